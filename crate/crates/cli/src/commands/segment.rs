use std::path::{Path, PathBuf};

use anyhow::Context;
use attnseg_core::pipeline::{run_segmentation, PipelineConfig, RunSummary, WeightMode};
use attnseg_core::raster::{encode_binary_mask, encode_label_mask};
use attnseg_core::tensor_io::load_tensor_set;
use serde::{Deserialize, Serialize};

use crate::output::{parse_point, parse_size, write_atomic, write_json};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Tensor set manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// JSON file with any of: tau, grid, iters, epsilon, out_size, target_res,
    /// weights, point. Flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Merge threshold in nats; accepts `inf`.
    #[arg(long)]
    tau: Option<f64>,
    /// Anchor grid size M (M x M anchors).
    #[arg(long)]
    grid: Option<usize>,
    /// Merge iterations N.
    #[arg(long)]
    iters: Option<usize>,
    /// Probability floor applied before taking logarithms.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Output mask size, e.g. 512x512.
    #[arg(long, value_parser = parse_size)]
    out_size: Option<(usize, usize)>,
    /// Aggregation resolution (defaults to the largest tensor resolution).
    #[arg(long)]
    target_res: Option<usize>,
    /// Comma-separated per-layer weights in manifest order, or `resolution`.
    #[arg(long)]
    weights: Option<String>,
    /// Pixel X,Y whose region is written as a separate binary mask.
    #[arg(long, value_parser = parse_point)]
    point: Option<(usize, usize)>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Number {
    Value(f64),
    Text(String),
}

impl Number {
    fn value(&self) -> anyhow::Result<f64> {
        match self {
            Number::Value(v) => Ok(*v),
            Number::Text(s) => s.parse().with_context(|| format!("{s:?} is not a number")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum WeightSpec {
    Named(String),
    List(Vec<f64>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    tau: Option<Number>,
    grid: Option<usize>,
    iters: Option<usize>,
    epsilon: Option<f64>,
    out_size: Option<String>,
    target_res: Option<usize>,
    weights: Option<WeightSpec>,
    point: Option<[usize; 2]>,
}

fn parse_weights(spec: &str) -> anyhow::Result<WeightMode> {
    if spec.trim() == "resolution" {
        return Ok(WeightMode::Resolution);
    }
    let weights = spec
        .split(',')
        .map(|w| {
            w.trim()
                .parse::<f64>()
                .with_context(|| format!("bad weight {w:?}"))
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(WeightMode::Explicit(weights))
}

fn build_config(args: &Args) -> anyhow::Result<PipelineConfig> {
    let file: ConfigFile = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ConfigFile::default(),
    };

    let mut config = PipelineConfig::default();
    if let Some(t) = &file.tau {
        config.merge.threshold = t.value()?;
    }
    if let Some(v) = file.grid {
        config.merge.grid_size = v;
    }
    if let Some(v) = file.iters {
        config.merge.iterations = v;
    }
    if let Some(v) = file.epsilon {
        config.merge.epsilon = v;
    }
    if let Some(s) = &file.out_size {
        (config.out_width, config.out_height) = parse_size(s).map_err(anyhow::Error::msg)?;
    }
    config.target_resolution = file.target_res;
    match file.weights {
        Some(WeightSpec::Named(s)) => config.weights = parse_weights(&s)?,
        Some(WeightSpec::List(w)) => config.weights = WeightMode::Explicit(w),
        None => {}
    }
    config.point = file.point.map(|[x, y]| (x, y));

    if let Some(v) = args.tau {
        config.merge.threshold = v;
    }
    if let Some(v) = args.grid {
        config.merge.grid_size = v;
    }
    if let Some(v) = args.iters {
        config.merge.iterations = v;
    }
    if let Some(v) = args.epsilon {
        config.merge.epsilon = v;
    }
    if let Some((w, h)) = args.out_size {
        (config.out_width, config.out_height) = (w, h);
    }
    if args.target_res.is_some() {
        config.target_resolution = args.target_res;
    }
    if let Some(s) = &args.weights {
        config.weights = parse_weights(s)?;
    }
    if args.point.is_some() {
        config.point = args.point;
    }
    Ok(config)
}

/// Run summary as written to `<image_id>.summary.json`. Wall-clock timings go
/// to a separate file so that summaries of identical runs are identical.
#[derive(Debug, Serialize)]
struct Summary<'a> {
    image_id: &'a str,
    census: Vec<(usize, usize)>,
    renormalized_slices: usize,
    mask_file: String,
    selected_file: Option<String>,
    #[serde(flatten)]
    run: &'a RunSummary,
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let config = build_config(&args)?;
    let set = load_tensor_set(&args.manifest)?;
    let seg = run_segmentation(&set.tensors, &config)?;
    let id = &set.manifest.image_id;

    let (format, bytes) = encode_label_mask(&seg.mask)?;
    let mask_path = args.out.join(format!("{id}.{}", format.extension()));
    write_atomic(&mask_path, &bytes)?;

    let selected_path = match &seg.selected {
        Some(sel) => {
            let path = args.out.join(format!("{id}.selected.pgm"));
            write_atomic(&path, &encode_binary_mask(sel))?;
            Some(path)
        }
        None => None,
    };

    let summary = Summary {
        image_id: id,
        census: set.manifest.census(),
        renormalized_slices: set.renormalized_slices(),
        mask_file: file_name(&mask_path),
        selected_file: selected_path.as_deref().map(file_name),
        run: &seg.summary,
    };
    write_json(&args.out.join(format!("{id}.summary.json")), &summary)?;
    write_json(&args.out.join(format!("{id}.timings.json")), &seg.timings)?;

    println!(
        "{id}: {} proposals, mask {}x{} -> {}",
        seg.summary.num_proposals,
        seg.mask.width(),
        seg.mask.height(),
        mask_path.display()
    );
    Ok(())
}
