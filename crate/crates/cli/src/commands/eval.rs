use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use attnseg_core::metrics::{evaluate_dataset, EvalMode};
use attnseg_core::raster::read_label_mask;

use crate::output::{write_atomic, write_json};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Directory of predicted masks (.pgm or .u16).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks with matching file stems.
    #[arg(long)]
    truth: PathBuf,
    /// `matched` pairs classes with regions; `point` selects the region under
    /// each class's interior point.
    #[arg(long, default_value = "matched")]
    mode: EvalMode,
    /// Directory for report.json and report.txt.
    #[arg(long)]
    out: PathBuf,
}

/// Mask files in `dir` by stem. Selected-region masks written next to
/// segmentations (`*.selected.pgm`) are skipped.
fn masks_by_stem(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !path.is_file() || !matches!(ext, "pgm" | "u16") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if stem.ends_with(".selected") {
            continue;
        }
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            bail!(
                "two masks share the stem {stem:?}: {} and {}",
                prev.display(),
                path.display()
            );
        }
    }
    Ok(out)
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let pred = masks_by_stem(&args.pred)?;
    let truth = masks_by_stem(&args.truth)?;
    let only_pred: Vec<&String> = pred.keys().filter(|k| !truth.contains_key(*k)).collect();
    let only_truth: Vec<&String> = truth.keys().filter(|k| !pred.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_truth.is_empty() {
        bail!(
            "unpaired masks: predictions without truth {only_pred:?}, truth without predictions {only_truth:?}"
        );
    }
    if pred.is_empty() {
        bail!("no masks found in {}", args.pred.display());
    }

    let mut pairs = Vec::with_capacity(pred.len());
    for (stem, p) in &pred {
        let mask = read_label_mask(p)?;
        let t = read_label_mask(&truth[stem])?;
        pairs.push((mask, t));
    }
    let mut report = evaluate_dataset(&pairs, args.mode)?;
    let names: Vec<&String> = pred.keys().collect();
    report.set_sample_names(&names);

    write_json(&args.out.join("report.json"), &report)?;
    let text = report.to_text();
    write_atomic(&args.out.join("report.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
