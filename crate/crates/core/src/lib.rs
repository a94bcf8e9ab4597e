//! Zero-shot segmentation from diffusion self-attention tensors.
//!
//! The pipeline aggregates multi-resolution self-attention tensors into one
//! tensor ([`aggregate`]), merges its attention maps into object proposals by
//! symmetric KL distance ([`merge`]), and turns the proposals into a label
//! mask by per-pixel argmax ([`mask`]). [`metrics`] scores masks against
//! ground truth and [`synth`] builds tensor sets with a planted answer.

pub mod aggregate;
pub mod error;
pub mod mask;
pub mod merge;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod resample;
pub mod synth;
pub mod tensor_io;

pub use aggregate::{aggregate, compute_weights, AggregatedTensor, WeightVector};
pub use error::{Error, Result};
pub use mask::{nms_mask, render_overlay, select_region, BinaryMask, LabelMask, RgbImage};
pub use merge::{anchor_grid, iterative_merge, kl_distance, MergeConfig, ProposalList};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use resample::{upsample_bilinear, upsample_bilinear_rect};
pub use tensor_io::{
    load_tensor_set, read_tensor, write_tensor, AttentionTensor, TensorSetManifest,
};
