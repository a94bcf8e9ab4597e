//! ADZT tensor files and the per-image tensor-set manifest.
//!
//! Layout (little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ADZT"
//!      4     4  version (u32) = 1
//!      8     4  ndim (u32) = 4
//!     12    16  dims, 4 x u32, all equal to the resolution w
//!     28  4w^4  payload, f32 row-major in [I, J, y, x] order
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ADZT";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

/// Largest accepted resolution. 128^4 f32 values is already 1 GiB.
pub const MAX_RESOLUTION: usize = 128;

/// Slices whose sum drifts from 1 by at most this much are accepted as is.
pub const SUM_TOLERANCE: f64 = 1e-4;
/// Slices drifting further than this are rejected as corrupt.
pub const SUM_REJECT: f64 = 1e-2;

/// One self-attention tensor at resolution `w`: `w^2` probability maps of
/// `w x w` values, stored row-major in `[I, J, y, x]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layer_id: usize,
    resolution: usize,
    data: Arc<[f32]>,
}

impl AttentionTensor {
    /// Builds a tensor after checking length, finiteness and non-negativity.
    /// Slice sums are not checked here; see [`AttentionTensor::max_sum_drift`].
    pub fn new(layer_id: usize, resolution: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_shared(layer_id, resolution, data.into())
    }

    pub fn from_shared(layer_id: usize, resolution: usize, data: Arc<[f32]>) -> Result<Self> {
        if resolution == 0 || resolution > MAX_RESOLUTION {
            return Err(Error::ShapeMismatch {
                offset: 12,
                reason: format!("resolution {resolution} outside 1..={MAX_RESOLUTION}"),
            });
        }
        let expected = resolution.pow(4);
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                offset: HEADER_LEN as u64,
                reason: format!(
                    "{} values for resolution {resolution} (expected {expected})",
                    data.len()
                ),
            });
        }
        for (flat, &value) in data.iter().enumerate() {
            check_value(resolution, flat, value)?;
        }
        Ok(AttentionTensor {
            layer_id,
            resolution,
            data,
        })
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn with_layer_id(mut self, layer_id: usize) -> Self {
        self.layer_id = layer_id;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<[f32]> {
        Arc::clone(&self.data)
    }

    /// Number of values in one `w x w` map.
    pub fn map_len(&self) -> usize {
        self.resolution * self.resolution
    }

    /// The attention map of query location `(row, col)`.
    pub fn slice(&self, row: usize, col: usize) -> &[f32] {
        let n = self.map_len();
        let start = (row * self.resolution + col) * n;
        &self.data[start..start + n]
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.map_len())
    }

    /// Largest `|sum - 1|` over all slices.
    pub fn max_sum_drift(&self) -> f64 {
        self.slices()
            .map(|s| (slice_sum(s) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn slice_sum(slice: &[f32]) -> f64 {
    slice.iter().map(|&v| v as f64).sum()
}

fn unflatten(resolution: usize, flat: usize) -> [usize; 4] {
    let w = resolution;
    [
        flat / (w * w * w),
        (flat / (w * w)) % w,
        (flat / w) % w,
        flat % w,
    ]
}

fn check_value(resolution: usize, flat: usize, value: f32) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFiniteValue {
            index: unflatten(resolution, flat),
            offset: (HEADER_LEN + 4 * flat) as u64,
            value,
        });
    }
    if value < 0.0 {
        return Err(Error::NegativeValue {
            index: unflatten(resolution, flat),
            offset: (HEADER_LEN + 4 * flat) as u64,
            value,
        });
    }
    Ok(())
}

pub fn write_tensor<W: Write>(tensor: &AttentionTensor, sink: W) -> std::io::Result<()> {
    let mut sink = BufWriter::new(sink);
    let w = tensor.resolution as u32;
    sink.write_all(&MAGIC)?;
    sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
    sink.write_all(&4u32.to_le_bytes())?;
    for _ in 0..4 {
        sink.write_all(&w.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(16 * 1024);
    for chunk in tensor.data.chunks(4096) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
    }
    sink.flush()
}

/// Reads exactly `buf.len()` bytes, mapping a short read to `Truncated`.
fn read_field<R: Read>(source: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Truncated {
                    offset: offset + filled as u64,
                    needed: (buf.len() - filled) as u64,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn read_u32<R: Read>(source: &mut R, offset: u64) -> Result<u32> {
    let mut b = [0u8; 4];
    read_field(source, &mut b, offset)?;
    Ok(u32::from_le_bytes(b))
}

/// Parses one ADZT tensor. The returned tensor has `layer_id` 0.
pub fn read_tensor<R: Read>(source: R) -> Result<AttentionTensor> {
    let mut source = BufReader::new(source);

    let mut magic = [0u8; 4];
    read_field(&mut source, &mut magic, 0)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            offset: 0,
        });
    }
    let version = read_u32(&mut source, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { version, offset: 4 });
    }
    let ndim = read_u32(&mut source, 8)?;
    if ndim != 4 {
        return Err(Error::ShapeMismatch {
            offset: 8,
            reason: format!("ndim {ndim}, expected 4"),
        });
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        *d = read_u32(&mut source, 12 + 4 * k as u64)? as usize;
    }
    if dims[0] != dims[1] || dims[2] != dims[3] {
        return Err(Error::ShapeMismatch {
            offset: 12,
            reason: format!("dims {dims:?} are not square (h x w x h x w with h = w)"),
        });
    }
    if dims[0] != dims[2] {
        return Err(Error::ShapeMismatch {
            offset: 12,
            reason: format!("dims {dims:?}: query and key resolutions differ"),
        });
    }
    let w = dims[0];
    if w == 0 || w > MAX_RESOLUTION {
        return Err(Error::ShapeMismatch {
            offset: 12,
            reason: format!("resolution {w} outside 1..={MAX_RESOLUTION}"),
        });
    }

    let count = w.pow(4);
    let mut data: Vec<f32> = Vec::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut offset = HEADER_LEN as u64;
    while data.len() < count {
        let take = ((count - data.len()) * 4).min(buf.len());
        read_field(&mut source, &mut buf[..take], offset)?;
        for b in buf[..take].chunks_exact(4) {
            let value = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            check_value(w, data.len(), value)?;
            data.push(value);
        }
        offset += take as u64;
    }
    Ok(AttentionTensor {
        layer_id: 0,
        resolution: w,
        data: data.into(),
    })
}

pub fn read_tensor_file(path: &Path) -> Result<AttentionTensor> {
    let file = File::open(path).map_err(|e| Error::from(e).in_file(path))?;
    read_tensor(file).map_err(|e| e.in_file(path))
}

pub fn write_tensor_file(tensor: &AttentionTensor, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::from(e).in_file(path))?;
    write_tensor(tensor, file).map_err(|e| Error::from(e).in_file(path))
}

fn default_latent_resolution() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer_id: usize,
    pub resolution: usize,
    /// Path relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSetManifest {
    pub image_id: String,
    #[serde(default = "default_latent_resolution")]
    pub latent_resolution: usize,
    pub timestep: i64,
    #[serde(default)]
    pub extractor_info: String,
    pub entries: Vec<ManifestEntry>,
}

impl TensorSetManifest {
    /// Structural checks that need no file access.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.entries.is_empty() {
            return Err("entries list is empty".into());
        }
        let mut seen = HashSet::new();
        for entry in &self.entries {
            if !seen.insert(entry.layer_id) {
                return Err(format!("duplicate layer_id {}", entry.layer_id));
            }
            if entry.resolution == 0 || entry.resolution > MAX_RESOLUTION {
                return Err(format!(
                    "layer {} has resolution {} outside 1..={MAX_RESOLUTION}",
                    entry.layer_id, entry.resolution
                ));
            }
            if entry.file.is_empty() {
                return Err(format!("layer {} has an empty file path", entry.layer_id));
            }
        }
        if !self
            .entries
            .iter()
            .any(|e| e.resolution == self.latent_resolution)
        {
            return Err(format!(
                "no entry at latent_resolution {}",
                self.latent_resolution
            ));
        }
        Ok(())
    }

    /// Resolution → number of layers, ascending by resolution.
    pub fn census(&self) -> Vec<(usize, usize)> {
        let mut census: Vec<(usize, usize)> = Vec::new();
        for entry in &self.entries {
            match census.iter_mut().find(|(r, _)| *r == entry.resolution) {
                Some((_, n)) => *n += 1,
                None => census.push((entry.resolution, 1)),
            }
        }
        census.sort_unstable();
        census
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerDrift {
    pub layer_id: usize,
    pub resolution: usize,
    /// Largest `|sum - 1|` over the slices as read from disk.
    pub max_drift: f64,
    pub renormalized_slices: usize,
}

/// A manifest together with its validated tensors, in manifest entry order.
#[derive(Debug, Clone)]
pub struct TensorSet {
    pub manifest: TensorSetManifest,
    pub tensors: Vec<AttentionTensor>,
    pub drift: Vec<LayerDrift>,
}

impl TensorSet {
    /// Total number of slices that were renormalized while loading.
    pub fn renormalized_slices(&self) -> usize {
        self.drift.iter().map(|d| d.renormalized_slices).sum()
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.tensors.iter().map(|t| t.resolution()).collect()
    }
}

/// Brings every slice within [`SUM_TOLERANCE`] of 1, rejecting slices that
/// drift beyond [`SUM_REJECT`].
fn normalize_slices(tensor: AttentionTensor) -> Result<(AttentionTensor, LayerDrift)> {
    let w = tensor.resolution;
    let mut drift = LayerDrift {
        layer_id: tensor.layer_id,
        resolution: w,
        max_drift: 0.0,
        renormalized_slices: 0,
    };
    let mut fixed: Option<Vec<f32>> = None;
    for (s, slice) in tensor.slices().enumerate() {
        let sum = slice_sum(slice);
        let dev = (sum - 1.0).abs();
        drift.max_drift = drift.max_drift.max(dev);
        if dev <= SUM_TOLERANCE {
            continue;
        }
        if dev > SUM_REJECT || sum <= 0.0 {
            return Err(Error::Unnormalized {
                layer_id: tensor.layer_id,
                row: s / w,
                col: s % w,
                sum,
            });
        }
        let data = fixed.get_or_insert_with(|| tensor.data.to_vec());
        let n = w * w;
        for v in &mut data[s * n..(s + 1) * n] {
            *v = (*v as f64 / sum) as f32;
        }
        drift.renormalized_slices += 1;
    }
    let tensor = match fixed {
        Some(data) => AttentionTensor {
            data: data.into(),
            ..tensor
        },
        None => tensor,
    };
    Ok((tensor, drift))
}

pub fn read_manifest(path: &Path) -> Result<TensorSetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    let manifest: TensorSetManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        reason: format!("schema violation: {e}"),
    })?;
    manifest.validate().map_err(|reason| Error::Manifest {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok(manifest)
}

/// Loads and validates every tensor referenced by a manifest.
pub fn load_tensor_set(manifest_path: &Path) -> Result<TensorSet> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    let mut drift = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path: PathBuf = base.join(&entry.file);
        let tensor = read_tensor_file(&path)?.with_layer_id(entry.layer_id);
        if tensor.resolution() != entry.resolution {
            return Err(Error::Manifest {
                path: manifest_path.to_path_buf(),
                reason: format!(
                    "layer {} declares resolution {} but {} holds resolution {}",
                    entry.layer_id,
                    entry.resolution,
                    path.display(),
                    tensor.resolution()
                ),
            });
        }
        let (tensor, d) = normalize_slices(tensor).map_err(|e| e.in_file(&path))?;
        tensors.push(tensor);
        drift.push(d);
    }
    Ok(TensorSet {
        manifest,
        tensors,
        drift,
    })
}

/// Writes `manifest.json` plus one ADZT file per entry into `dir`.
/// `tensors` must align with `manifest.entries`.
pub fn save_tensor_set(
    dir: &Path,
    manifest: &TensorSetManifest,
    tensors: &[AttentionTensor],
) -> Result<PathBuf> {
    if tensors.len() != manifest.entries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tensors for {} manifest entries",
            tensors.len(),
            manifest.entries.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    for (entry, tensor) in manifest.entries.iter().zip(tensors) {
        write_tensor_file(tensor, &dir.join(&entry.file))?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::from(e).in_file(&path))?;
    Ok(path)
}
