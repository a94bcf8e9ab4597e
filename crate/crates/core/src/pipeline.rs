//! End-to-end segmentation: aggregate, merge, suppress.

use std::time::Instant;

use serde::{Deserialize, Serialize, Serializer};

use crate::aggregate::{aggregate, compute_weights, WeightVector};
use crate::error::{Error, Result};
use crate::mask::{nms_mask, select_region, BinaryMask, LabelMask};
use crate::merge::{iterative_merge, MergeConfig, ProposalList};
use crate::tensor_io::AttentionTensor;

pub const DEFAULT_OUT_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `R_k = w_k / Σ w_j` from each tensor's resolution.
    Resolution,
    /// One weight per tensor, in input order.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub merge: MergeConfig,
    /// Aggregation resolution; defaults to the largest tensor resolution.
    pub target_resolution: Option<usize>,
    pub out_width: usize,
    pub out_height: usize,
    pub weights: WeightMode,
    /// Pixel `(x, y)` whose region is extracted after suppression.
    pub point: Option<(usize, usize)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            merge: MergeConfig::default(),
            target_resolution: None,
            out_width: DEFAULT_OUT_SIZE,
            out_height: DEFAULT_OUT_SIZE,
            weights: WeightMode::Resolution,
            point: None,
        }
    }
}

fn finite_or_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    }
}

/// Everything about a run that depends only on its inputs, so summaries of
/// repeated runs compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub num_proposals: usize,
    #[serde(serialize_with = "finite_or_inf")]
    pub threshold: f64,
    pub grid_size: usize,
    pub iterations: usize,
    pub epsilon: f64,
    pub target_resolution: usize,
    pub out_width: usize,
    pub out_height: usize,
    pub weight_mode: &'static str,
    /// `(layer_id, resolution, weight)` per input tensor.
    pub weights: Vec<(usize, usize, f64)>,
    /// Proposal count after each merge iteration.
    pub merge_history: Vec<usize>,
    /// Pixels per label.
    pub label_histogram: Vec<u64>,
    pub point: Option<(usize, usize)>,
    pub selected_pixels: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timings {
    pub aggregate_ms: f64,
    pub merge_ms: f64,
    pub nms_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub proposals: ProposalList,
    pub mask: LabelMask,
    pub selected: Option<BinaryMask>,
    pub summary: RunSummary,
    pub timings: Timings,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub fn run_segmentation(
    tensors: &[AttentionTensor],
    config: &PipelineConfig,
) -> Result<Segmentation> {
    if tensors.is_empty() {
        return Err(Error::Empty {
            what: "tensor list",
        });
    }
    let start = Instant::now();
    let target = config
        .target_resolution
        .unwrap_or_else(|| tensors.iter().map(|t| t.resolution()).max().unwrap_or(0));
    config.merge.validate(target)?;
    let (weights, mode) = match &config.weights {
        WeightMode::Resolution => {
            let res: Vec<usize> = tensors.iter().map(|t| t.resolution()).collect();
            (compute_weights(&res)?, "resolution")
        }
        WeightMode::Explicit(w) => (WeightVector::new(w.clone())?, "explicit"),
    };
    if let Some((x, y)) = config.point {
        if x >= config.out_width || y >= config.out_height {
            return Err(Error::InvalidArgument(format!(
                "point ({x}, {y}) outside {}x{} output",
                config.out_width, config.out_height
            )));
        }
    }

    let t = Instant::now();
    let af = aggregate(tensors, &weights, target)?;
    let aggregate_ms = ms(t);

    let t = Instant::now();
    let proposals = iterative_merge(&af, &config.merge)?;
    drop(af);
    let merge_ms = ms(t);

    let t = Instant::now();
    let mask = nms_mask(&proposals, config.out_width, config.out_height)?;
    let nms_ms = ms(t);

    let selected = config.point.map(|p| select_region(&mask, p)).transpose()?;

    let summary = RunSummary {
        num_proposals: proposals.len(),
        threshold: config.merge.threshold,
        grid_size: config.merge.grid_size,
        iterations: config.merge.iterations,
        epsilon: config.merge.epsilon,
        target_resolution: target,
        out_width: config.out_width,
        out_height: config.out_height,
        weight_mode: mode,
        weights: tensors
            .iter()
            .zip(weights.as_slice())
            .map(|(t, &w)| (t.layer_id(), t.resolution(), w))
            .collect(),
        merge_history: proposals.history().to_vec(),
        label_histogram: mask.histogram(),
        point: config.point,
        selected_pixels: selected.as_ref().map(|s| s.count()),
    };
    Ok(Segmentation {
        proposals,
        mask,
        selected,
        summary,
        timings: Timings {
            aggregate_ms,
            merge_ms,
            nms_ms,
            total_ms: ms(start),
        },
    })
}
