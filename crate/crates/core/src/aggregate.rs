//! Multi-resolution attention aggregation.
//!
//! Every tensor's key dimensions are bilinearly upsampled to the target
//! resolution, query locations are mapped by floor division
//! `(I / δ_k, J / δ_k)` with `δ_k = target / w_k`, the maps are summed with
//! weights `R_k`, and each output slice is renormalized to a distribution.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::resample::{blend_rows, sample_row, taps};
use crate::tensor_io::AttentionTensor;

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Per-tensor aggregation weights, nonnegative and summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty {
                what: "weight list",
            });
        }
        if let Some(bad) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight {bad} is not a nonnegative finite number"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "weights sum to {sum}, expected 1 within {WEIGHT_SUM_TOLERANCE}"
            )));
        }
        Ok(WeightVector(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Resolution-proportional weights: `R_k = w_k / Σ_j w_j`.
pub fn compute_weights(resolutions: &[usize]) -> Result<WeightVector> {
    if resolutions.is_empty() {
        return Err(Error::Empty {
            what: "resolution list",
        });
    }
    if resolutions.contains(&0) {
        return Err(Error::InvalidArgument("resolution 0".into()));
    }
    let total: usize = resolutions.iter().sum();
    Ok(WeightVector(
        resolutions
            .iter()
            .map(|&w| w as f64 / total as f64)
            .collect(),
    ))
}

/// The aggregated tensor: `resolution^2` maps of `resolution^2` values, each a
/// probability distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedTensor {
    resolution: usize,
    data: Vec<f32>,
}

impl AggregatedTensor {
    /// Wraps raw data, checking shape and the per-slice distribution invariant.
    pub fn from_raw(resolution: usize, data: Vec<f32>) -> Result<Self> {
        if resolution == 0 || data.len() != resolution.pow(4) {
            return Err(Error::DimensionMismatch(format!(
                "{} values for an aggregated tensor of resolution {resolution}",
                data.len()
            )));
        }
        let n = resolution * resolution;
        for (s, slice) in data.chunks_exact(n).enumerate() {
            if slice.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "slice {s} has negative or non-finite values"
                )));
            }
            let sum: f64 = slice.iter().map(|&v| v as f64).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!("slice {s} sums to {sum}")));
            }
        }
        Ok(AggregatedTensor { resolution, data })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn map_len(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn num_maps(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Map of query location `(row, col)`.
    pub fn slice(&self, row: usize, col: usize) -> &[f32] {
        self.map(row * self.resolution + col)
    }

    /// Map at flat grid index `row * resolution + col`.
    pub fn map(&self, index: usize) -> &[f32] {
        let n = self.map_len();
        &self.data[index * n..(index + 1) * n]
    }
}

/// Weighted sum of all tensors sharing one resolution, held at the source
/// resolution, then upsampled. Bilinear interpolation is linear, so combining
/// before upsampling equals upsampling each tensor first.
struct ResolutionGroup {
    resolution: usize,
    delta: usize,
    /// `resolution^2` maps of `target^2` values (empty for the target group).
    upsampled: Vec<f64>,
    /// `(weight, tensor)` pairs, used directly when no upsampling is needed.
    members: Vec<(f64, usize)>,
}

pub fn aggregate(
    tensors: &[AttentionTensor],
    weights: &WeightVector,
    target: usize,
) -> Result<AggregatedTensor> {
    if tensors.is_empty() {
        return Err(Error::Empty {
            what: "tensor list",
        });
    }
    if tensors.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} tensors but {} weights",
            tensors.len(),
            weights.len()
        )));
    }
    if target == 0 {
        return Err(Error::InvalidArgument("target resolution 0".into()));
    }
    for t in tensors {
        let w = t.resolution();
        if w > target || !target.is_multiple_of(w) {
            return Err(Error::InvalidArgument(format!(
                "layer {} resolution {w} does not divide target {target}",
                t.layer_id()
            )));
        }
    }

    // Fixed summation order independent of input order: by resolution, then
    // layer id, then position.
    let mut order: Vec<usize> = (0..tensors.len()).collect();
    order.sort_by_key(|&k| (tensors[k].resolution(), tensors[k].layer_id(), k));

    let mut groups: Vec<ResolutionGroup> = Vec::new();
    for &k in &order {
        let w = tensors[k].resolution();
        match groups.last_mut() {
            Some(g) if g.resolution == w => g.members.push((weights.as_slice()[k], k)),
            _ => groups.push(ResolutionGroup {
                resolution: w,
                delta: target / w,
                upsampled: Vec::new(),
                members: vec![(weights.as_slice()[k], k)],
            }),
        }
    }

    let out_len = target * target;
    for group in groups.iter_mut().filter(|g| g.resolution < target) {
        let w = group.resolution;
        let n = w * w;
        let ys = taps(w, target);
        let xs = taps(w, target);
        let mut up = vec![0.0f64; n * out_len];
        up.par_chunks_mut(out_len).enumerate().for_each(|(s, out)| {
            let mut combined = vec![0.0f64; n];
            for &(r, k) in &group.members {
                let src = &tensors[k].data()[s * n..(s + 1) * n];
                for (c, &v) in combined.iter_mut().zip(src) {
                    *c += r * v as f64;
                }
            }
            let mut row = vec![0.0f64; w];
            for (ty, out_row) in ys.iter().zip(out.chunks_exact_mut(target)) {
                blend_rows(&combined, w, *ty, &mut row);
                for (tx, o) in xs.iter().zip(out_row.iter_mut()) {
                    *o = sample_row(&row, *tx);
                }
            }
        });
        group.upsampled = up;
    }

    let mut data = vec![0.0f32; out_len * out_len];
    data.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(s, out)| {
            let (row, col) = (s / target, s % target);
            let mut acc = vec![0.0f64; out_len];
            for group in &groups {
                let src_slice = (row / group.delta) * group.resolution + col / group.delta;
                if group.resolution == target {
                    for &(r, k) in &group.members {
                        let src =
                            &tensors[k].data()[src_slice * out_len..(src_slice + 1) * out_len];
                        for (a, &v) in acc.iter_mut().zip(src) {
                            *a += r * v as f64;
                        }
                    }
                } else {
                    let src = &group.upsampled[src_slice * out_len..(src_slice + 1) * out_len];
                    for (a, &v) in acc.iter_mut().zip(src) {
                        *a += v;
                    }
                }
            }
            let sum: f64 = acc.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o = (a / sum) as f32;
                }
            } else {
                out.fill(1.0 / out_len as f32);
            }
        });

    Ok(AggregatedTensor {
        resolution: target,
        data,
    })
}
