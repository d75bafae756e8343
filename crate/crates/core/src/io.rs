//! Binary tensor files, JSON manifests and report writers.
//!
//! Tensor layout (all integers little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `LOES`               |
//! | 4      | 4    | format version, u32 (= 1)  |
//! | 8      | 1    | dtype code (1 f32, 2 f64)  |
//! | 9      | 3    | reserved, zero             |
//! | 12     | 8    | rows, u64                  |
//! | 20     | 8    | cols, u64                  |
//! | 28     | ...  | row-major payload          |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::selection::{flatten_dense, DenseImage, TaskMode};
use crate::spectral::SpectrumReport;
use crate::ridge::ProbeMetrics;
use crate::{LayerStack, LoesError, Matrix, Result, Targets};

pub const MAGIC: &[u8; 4] = b"LOES";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const MANIFEST_VERSION: u32 = 1;

/// Pixels drawn per image when a dense manifest does not say otherwise.
pub const DEFAULT_PIXELS_PER_IMAGE: usize = 64;
pub const DEFAULT_IGNORE_LABEL: i64 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = LoesError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(LoesError::invalid(format!("unknown dtype '{other}'"))),
        }
    }
}

pub fn encode_tensor(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for i in 0..rows {
        for j in 0..cols {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&m[(i, j)].to_le_bytes()),
            }
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let fail = |reason: String| LoesError::FormatError {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format version {version}")));
    }
    let dtype = Dtype::from_code(bytes[8]).ok_or_else(|| fail(format!("unknown dtype code {}", bytes[8])))?;
    if bytes[9..12] != [0, 0, 0] {
        return Err(fail("reserved bytes are not zero".into()));
    }
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .ok_or_else(|| fail("shape overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if (payload.len() as u64) < expected {
        return Err(fail(format!("truncated payload: {} of {expected} bytes", payload.len())));
    }
    if payload.len() as u64 > expected {
        return Err(fail(format!("{} trailing bytes", payload.len() as u64 - expected)));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Matrix::from_row_slice(rows, cols, &values))
}

pub fn write_tensor(path: impl AsRef<Path>, m: &Matrix, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(m, dtype)).map_err(|e| LoesError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LoesError::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Dataset description. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub task: TaskMode,
    pub n_samples: usize,
    pub n_layers: usize,
    pub layer_files: Vec<PathBuf>,
    pub labels_file: PathBuf,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A manifest with its tensors loaded and checked.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub stack: LayerStack,
    pub targets: Targets,
    /// Dense manifests only: images dropped for having no valid pixel.
    pub skipped_images: usize,
}

impl Manifest {
    fn meta<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.metadata.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| LoesError::ManifestError(format!("metadata '{key}' has unparsable value '{v}'"))),
        }
    }

    /// Rows each layer file must have: samples, or samples times pixels for dense tasks.
    fn rows_per_file(&self) -> Result<usize> {
        if self.task != TaskMode::Dense {
            return Ok(self.n_samples);
        }
        let h: usize = self.meta("height")?.ok_or_else(|| LoesError::ManifestError("dense manifest needs metadata 'height'".into()))?;
        let w: usize = self.meta("width")?.ok_or_else(|| LoesError::ManifestError("dense manifest needs metadata 'width'".into()))?;
        Ok(self.n_samples * h * w)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| LoesError::ManifestError(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| LoesError::ManifestError(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    load_dataset(manifest, dir)
}

fn load_file(dir: &Path, rel: &Path) -> Result<Matrix> {
    let full = dir.join(rel);
    if !full.is_file() {
        return Err(LoesError::ManifestError(format!("missing file {}", full.display())));
    }
    read_tensor(&full)
}

pub fn load_dataset(manifest: Manifest, dir: &Path) -> Result<Dataset> {
    if manifest.version != MANIFEST_VERSION {
        return Err(LoesError::ManifestError(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.n_layers != manifest.layer_files.len() {
        return Err(LoesError::ManifestError(format!(
            "n_layers is {} but {} layer files are listed",
            manifest.n_layers,
            manifest.layer_files.len()
        )));
    }
    if manifest.n_layers == 0 {
        return Err(LoesError::ManifestError("no layer files".into()));
    }
    let rows = manifest.rows_per_file()?;
    let mut layers = Vec::with_capacity(manifest.n_layers);
    for rel in &manifest.layer_files {
        let m = load_file(dir, rel)?;
        if m.nrows() != rows {
            return Err(LoesError::ManifestError(format!(
                "{} has {} rows, expected {rows}",
                rel.display(),
                m.nrows()
            )));
        }
        layers.push(m);
    }
    let labels = load_file(dir, &manifest.labels_file)?;
    if labels.nrows() != rows {
        return Err(LoesError::ManifestError(format!(
            "labels have {} rows, expected {rows}",
            labels.nrows()
        )));
    }
    let (stack, targets, skipped_images) = match manifest.task {
        TaskMode::Regression => (LayerStack::new(layers)?, Targets::Values(labels), 0),
        TaskMode::Classification => {
            let ids = integer_labels(&labels, manifest.num_classes)?;
            let ids = ids.into_iter().map(|v| v as usize).collect();
            (LayerStack::new(layers)?, Targets::Labels(ids), 0)
        }
        TaskMode::Dense => dense_inputs(&manifest, layers, &labels)?,
    };
    Ok(Dataset {
        manifest,
        stack,
        targets,
        skipped_images,
    })
}

fn integer_labels(labels: &Matrix, num_classes: Option<usize>) -> Result<Vec<i64>> {
    if labels.ncols() != 1 {
        return Err(LoesError::ManifestError(format!("labels must have one column, found {}", labels.ncols())));
    }
    labels
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || !v.is_finite() {
                return Err(LoesError::ManifestError(format!("label {v} is not an integer")));
            }
            Ok(v as i64)
        })
        .collect::<Result<Vec<i64>>>()
        .and_then(|ids| {
            for &id in &ids {
                if id < 0 {
                    return Err(LoesError::ManifestError(format!("negative label {id}")));
                }
                if let Some(c) = num_classes {
                    if id as usize >= c {
                        return Err(LoesError::ManifestError(format!("label {id} not below num_classes {c}")));
                    }
                }
            }
            Ok(ids)
        })
}

fn dense_inputs(manifest: &Manifest, layers: Vec<Matrix>, labels: &Matrix) -> Result<(LayerStack, Targets, usize)> {
    if labels.ncols() != 1 {
        return Err(LoesError::ManifestError("dense masks must have one column".into()));
    }
    let pixels: usize = manifest.meta("pixels_per_image")?.unwrap_or(DEFAULT_PIXELS_PER_IMAGE);
    let ignore: i64 = manifest.meta("ignore_label")?.unwrap_or(DEFAULT_IGNORE_LABEL);
    let seed: u64 = manifest.meta("pixel_seed")?.unwrap_or(0);
    let per_image = labels.nrows() / manifest.n_samples.max(1);
    let masks: Vec<Vec<i64>> = (0..manifest.n_samples)
        .map(|i| {
            labels.rows(i * per_image, per_image).iter().map(|&v| v as i64).collect()
        })
        .collect();
    let mut flat = Vec::with_capacity(layers.len());
    let mut targets = Vec::new();
    let mut skipped = 0;
    for layer in &layers {
        let images: Vec<DenseImage> = masks
            .iter()
            .enumerate()
            .map(|(i, mask)| DenseImage {
                features: layer.rows(i * per_image, per_image).into_owned(),
                mask: mask.clone(),
            })
            .collect();
        // Same seed for every layer, so the sampled pixels line up.
        let (x, y, s) = flatten_dense(&images, pixels, ignore, seed)?;
        flat.push(x);
        targets = y;
        skipped = s;
    }
    if targets.is_empty() {
        return Err(LoesError::ManifestError("no valid pixels in any mask".into()));
    }
    Ok((LayerStack::new(flat)?, Targets::Labels(targets), skipped))
}

/// Writes one tensor per layer plus labels and a manifest into `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    stack: &LayerStack,
    labels: &Matrix,
    task: TaskMode,
    num_classes: Option<usize>,
    dtype: Dtype,
    metadata: BTreeMap<String, String>,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| LoesError::io(dir, e))?;
    let mut layer_files = Vec::with_capacity(stack.len());
    for (i, layer) in stack.layers().iter().enumerate() {
        let name = PathBuf::from(format!("layer_{i:03}.bin"));
        write_tensor(dir.join(&name), layer, dtype)?;
        layer_files.push(name);
    }
    let labels_file = PathBuf::from("labels.bin");
    write_tensor(dir.join(&labels_file), labels, Dtype::F64)?;
    let mut n_samples = stack.n_samples();
    if task == TaskMode::Dense {
        let pixels = Manifest {
            version: MANIFEST_VERSION,
            task,
            n_samples: 1,
            n_layers: 0,
            layer_files: Vec::new(),
            labels_file: PathBuf::new(),
            num_classes,
            dtype,
            metadata: metadata.clone(),
        }
        .rows_per_file()?;
        if pixels == 0 || n_samples % pixels != 0 {
            return Err(LoesError::invalid("pixel rows are not a multiple of height * width"));
        }
        n_samples /= pixels;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        task,
        n_samples,
        n_layers: stack.len(),
        layer_files,
        labels_file,
        num_classes,
        dtype,
        metadata,
    };
    write_json(dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Pretty JSON in declaration order, newline terminated.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json(value)?).map_err(|e| LoesError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| LoesError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-layer diagnostics: spectrum summary and a raw ridge probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub spectrum: SpectrumReport,
    pub probe: ProbeMetrics,
}

pub fn diagnostics_csv(rows: &[LayerDiagnostics]) -> String {
    let mut out = String::from("layer,isotropy,effective_rank,mean_eig,eig_variance,probe_mse,probe_accuracy\n");
    for r in rows {
        let acc = r.probe.accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layer,
            r.spectrum.isotropy,
            r.spectrum.effective_rank,
            r.spectrum.mean_eig,
            r.spectrum.eig_variance,
            r.probe.mse,
            acc
        ));
    }
    out
}

/// Writes any report structure as JSON.
pub fn write_report<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_json(path, value)
}

/// Writes diagnostics as JSON and as a CSV with the same stem.
pub fn write_diagnostics(path: impl AsRef<Path>, rows: &[LayerDiagnostics]) -> Result<PathBuf> {
    let path = path.as_ref();
    write_json(path, &rows)?;
    let csv = path.with_extension("csv");
    fs::write(&csv, diagnostics_csv(rows)).map_err(|e| LoesError::io(&csv, e))?;
    Ok(csv)
}
