//! Overlap metrics (DSC, IoU, precision, recall) and dataset reports.
//!
//! All metrics are percentages. When a metric's own denominator is zero the
//! prediction and reference agree vacuously and the metric is 100.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{select_region, BinaryMask, LabelMask};

/// Label value treated as background in ground-truth rasters.
pub const BACKGROUND: u32 = 0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        100.0
    } else {
        num as f64 / den as f64 * 100.0
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN) * 100`
    pub fn dsc(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// `TP / (TP + FP + FN) * 100`
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// `TP / (TP + FP) * 100`
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP / (TP + FN) * 100`
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn scores(&self) -> Scores {
        Scores {
            dsc: self.dsc(),
            iou: self.iou(),
            precision: self.precision(),
            recall: self.recall(),
        }
    }
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    c.dsc()
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    c.precision()
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    c.recall()
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.bits().iter().zip(truth.bits()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Scores {
    fn mean<'a>(items: impl Iterator<Item = &'a Scores>) -> Scores {
        let mut sum = Scores::default();
        let mut n = 0usize;
        for s in items {
            sum.dsc += s.dsc;
            sum.iou += s.iou;
            sum.precision += s.precision;
            sum.recall += s.recall;
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        Scores {
            dsc: sum.dsc / n,
            iou: sum.iou / n,
            precision: sum.precision / n,
            recall: sum.recall / n,
        }
    }
}

/// Outcome for one ground-truth class in one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMatch {
    pub class_id: u32,
    /// Predicted label scored against the class, `None` when scored against
    /// an empty prediction.
    pub label: Option<u32>,
    pub counts: ConfusionCounts,
}

fn check_dims(mask: &LabelMask, truth: &LabelMask) -> Result<()> {
    if mask.width() != truth.width() || mask.height() != truth.height() {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs truth {}x{}",
            mask.width(),
            mask.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(())
}

/// Non-background classes present in `truth`, ascending, with pixel counts.
fn truth_classes(truth: &LabelMask) -> Vec<(u32, u64)> {
    truth
        .histogram()
        .into_iter()
        .enumerate()
        .filter(|&(c, n)| c as u32 != BACKGROUND && n > 0)
        .map(|(c, n)| (c as u32, n))
        .collect()
}

/// Pairs ground-truth classes with predicted labels greedily by IoU.
///
/// The highest-IoU pair is fixed first, then the next among unused classes
/// and labels, until classes or labels run out. Ties prefer the lower class
/// id, then the label whose region starts earliest in row-major order, which
/// makes the result independent of how predicted labels are numbered.
/// Classes left over are scored against an empty prediction.
pub fn match_regions(mask: &LabelMask, truth: &LabelMask) -> Result<Vec<ClassMatch>> {
    check_dims(mask, truth)?;
    let classes = truth_classes(truth);
    if classes.is_empty() {
        return Err(Error::InvalidArgument(
            "ground truth has no non-background class".into(),
        ));
    }
    let total = mask.labels().len() as u64;
    let n_labels = mask.num_labels() as usize;

    let mut label_size = vec![0u64; n_labels];
    let mut first_pixel = vec![usize::MAX; n_labels];
    let mut class_index = vec![usize::MAX; truth.num_labels() as usize];
    for (k, &(c, _)) in classes.iter().enumerate() {
        class_index[c as usize] = k;
    }
    let mut overlap = vec![0u64; classes.len() * n_labels];
    for (i, (&l, &t)) in mask.labels().iter().zip(truth.labels()).enumerate() {
        let l = l as usize;
        label_size[l] += 1;
        first_pixel[l] = first_pixel[l].min(i);
        let k = class_index[t as usize];
        if k != usize::MAX {
            overlap[k * n_labels + l] += 1;
        }
    }
    let counts_for = |k: usize, l: usize| {
        let tp = overlap[k * n_labels + l];
        let fp = label_size[l] - tp;
        let fn_ = classes[k].1 - tp;
        ConfusionCounts {
            tp,
            fp,
            fn_,
            tn: total - tp - fp - fn_,
        }
    };

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for k in 0..classes.len() {
        for l in (0..n_labels).filter(|&l| label_size[l] > 0) {
            pairs.push((counts_for(k, l).iou(), k, l));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(first_pixel[a.2].cmp(&first_pixel[b.2]))
    });

    let mut assigned: Vec<Option<usize>> = vec![None; classes.len()];
    let mut used = vec![false; n_labels];
    for (_, k, l) in pairs {
        if assigned[k].is_none() && !used[l] {
            assigned[k] = Some(l);
            used[l] = true;
        }
    }

    Ok(classes
        .iter()
        .zip(assigned)
        .enumerate()
        .map(|(k, (&(class_id, size), label))| match label {
            Some(l) => ClassMatch {
                class_id,
                label: Some(l as u32),
                counts: counts_for(k, l),
            },
            None => ClassMatch {
                class_id,
                label: None,
                counts: ConfusionCounts {
                    tp: 0,
                    fp: 0,
                    fn_: size,
                    tn: total - size,
                },
            },
        })
        .collect())
}

/// The class pixel closest to the class centroid (first in row-major order
/// on ties), so the point always lies inside the class.
pub fn interior_point(region: &BinaryMask) -> Option<(usize, usize)> {
    let w = region.width();
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for (i, _) in region.bits().iter().enumerate().filter(|(_, &b)| b) {
        sx += (i % w) as f64;
        sy += (i / w) as f64;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let mut best: Option<((usize, usize), f64)> = None;
    for (i, _) in region.bits().iter().enumerate().filter(|(_, &b)| b) {
        let (x, y) = (i % w, i / w);
        let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some(((x, y), d));
        }
    }
    best.map(|(p, _)| p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Classes paired with predicted regions by [`match_regions`].
    Matched,
    /// Each class scored against the region selected at its interior point.
    Point,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" => Ok(EvalMode::Matched),
            "point" | "point-prompted" => Ok(EvalMode::Point),
            other => Err(Error::InvalidArgument(format!(
                "unknown evaluation mode {other:?} (expected matched or point)"
            ))),
        }
    }
}

fn point_prompted(mask: &LabelMask, truth: &LabelMask) -> Result<Vec<ClassMatch>> {
    check_dims(mask, truth)?;
    let classes = truth_classes(truth);
    if classes.is_empty() {
        return Err(Error::InvalidArgument(
            "ground truth has no non-background class".into(),
        ));
    }
    classes
        .iter()
        .map(|&(class_id, _)| {
            let region = truth.region(class_id);
            let point = interior_point(&region).ok_or_else(|| {
                Error::Invariant(format!("class {class_id} counted but has no pixels"))
            })?;
            let pred = select_region(mask, point)?;
            Ok(ClassMatch {
                class_id,
                label: Some(mask.get(point.0, point.1)),
                counts: confusion(&pred, &region)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub label: Option<u32>,
    pub counts: ConfusionCounts,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub name: String,
    pub classes: Vec<ClassMetrics>,
    /// Unweighted mean over this sample's classes.
    pub mean: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class_id: u32,
    pub samples: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub sample_count: usize,
    pub samples: Vec<SampleMetrics>,
    /// Per class, the mean over the samples containing it.
    pub per_class: Vec<ClassSummary>,
    /// Unweighted mean of `per_class`.
    pub aggregate: Scores,
}

/// Scores every `(prediction, truth)` pair and averages per class over
/// samples, then over classes.
pub fn evaluate_dataset(pairs: &[(LabelMask, LabelMask)], mode: EvalMode) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Empty {
            what: "evaluation set",
        });
    }
    let samples: Vec<SampleMetrics> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (mask, truth))| {
            let matches = match mode {
                EvalMode::Matched => match_regions(mask, truth),
                EvalMode::Point => point_prompted(mask, truth),
            }
            .map_err(|e| Error::InvalidArgument(format!("sample {i}: {e}")))?;
            let classes: Vec<ClassMetrics> = matches
                .into_iter()
                .map(|m| ClassMetrics {
                    class_id: m.class_id,
                    label: m.label,
                    counts: m.counts,
                    scores: m.counts.scores(),
                })
                .collect();
            let mean = Scores::mean(classes.iter().map(|c| &c.scores));
            Ok(SampleMetrics {
                name: i.to_string(),
                classes,
                mean,
            })
        })
        .collect::<Result<_>>()?;

    let mut class_ids: Vec<u32> = samples
        .iter()
        .flat_map(|s| s.classes.iter().map(|c| c.class_id))
        .collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    let per_class: Vec<ClassSummary> = class_ids
        .iter()
        .map(|&id| {
            let entries: Vec<&Scores> = samples
                .iter()
                .flat_map(|s| s.classes.iter().filter(|c| c.class_id == id))
                .map(|c| &c.scores)
                .collect();
            ClassSummary {
                class_id: id,
                samples: entries.len(),
                scores: Scores::mean(entries.into_iter()),
            }
        })
        .collect();
    let aggregate = Scores::mean(per_class.iter().map(|c| &c.scores));
    Ok(MetricsReport {
        mode,
        sample_count: samples.len(),
        samples,
        per_class,
        aggregate,
    })
}

impl MetricsReport {
    /// Renames samples in order; extra names are ignored.
    pub fn set_sample_names<S: AsRef<str>>(&mut self, names: &[S]) {
        for (s, n) in self.samples.iter_mut().zip(names) {
            s.name = n.as_ref().to_string();
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table: one row per class plus the mean.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode: {}   samples: {}",
            match self.mode {
                EvalMode::Matched => "matched",
                EvalMode::Point => "point",
            },
            self.sample_count
        );
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>9} {:>9} {:>15} {:>12}",
            "Class", "Samples", "DSC (%)", "IoU (%)", "Precision (%)", "Recall (%)"
        );
        let row = |out: &mut String, name: &str, n: usize, s: &Scores| {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>9.1} {:>9.1} {:>15.1} {:>12.1}",
                name, n, s.dsc, s.iou, s.precision, s.recall
            );
        };
        for c in &self.per_class {
            row(&mut out, &c.class_id.to_string(), c.samples, &c.scores);
        }
        row(&mut out, "mean", self.sample_count, &self.aggregate);
        out
    }
}
