//! Patch accuracy, slide accuracy, patch-grid IoU and the training-fraction sweep.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{check_beta, detect_slide, scored_patches};
use crate::annotation::annotated_ratio;
use crate::error::{Error, Result};
use crate::model::{PatchRecord, SlideLabel, SlideResult};
use crate::rng::derive_seed;

pub const DEFAULT_FIXED_BETA: f64 = 0.2;
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// `|A∩B| / |A∪B|`; 1 when both are empty.
pub fn patch_iou(a: &BTreeSet<(u32, u32)>, b: &BTreeSet<(u32, u32)>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Slide confusion counts; rows are the true label, columns the prediction,
/// both in the order melanoma, nevus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        self.counts[0][0] + self.counts[1][1]
    }
}

fn label_index(l: SlideLabel) -> usize {
    match l {
        SlideLabel::Melanoma => 0,
        SlideLabel::Nevus => 1,
    }
}

/// Tally `(truth, predicted)` pairs.
pub fn confusion_matrix(pairs: &[(SlideLabel, SlideLabel)]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for &(t, p) in pairs {
        m.counts[label_index(t)][label_index(p)] += 1;
    }
    m
}

/// A held-out slide: scored records carrying ground-truth patch labels and
/// ground-truth `in_annotation` flags.
#[derive(Debug, Clone)]
pub struct EvalSlide {
    pub slide_id: String,
    pub true_label: Option<SlideLabel>,
    pub annotated: bool,
    pub records: Vec<PatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// β used for slides without annotations.
    pub fixed_beta: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fixed_beta: DEFAULT_FIXED_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub patch_accuracy: f64,
    pub slide_accuracy: f64,
    pub mean_iou: f64,
    pub n_labeled_patches: usize,
    pub n_classified_slides: usize,
    pub n_iou_slides: usize,
    pub confusion: ConfusionMatrix,
    pub per_slide: Vec<SlideResult>,
    pub skipped: Vec<String>,
    pub split_fraction: f64,
    pub seed: u64,
}

enum SlideOutcome {
    Done {
        result: SlideResult,
        truth: Option<SlideLabel>,
        patch_hits: usize,
        patch_total: usize,
    },
    Skipped(String),
}

fn evaluate_slide(slide: &EvalSlide, opts: &EvalOptions) -> Result<SlideOutcome> {
    if slide.true_label.is_none() && !slide.annotated {
        log::warn!("slide {} has neither label nor annotation; skipped", slide.slide_id);
        return Ok(SlideOutcome::Skipped(slide.slide_id.clone()));
    }
    if scored_patches(&slide.records).is_empty() {
        log::warn!("slide {} has no scored tissue patches; skipped", slide.slide_id);
        return Ok(SlideOutcome::Skipped(slide.slide_id.clone()));
    }
    let beta = if slide.annotated {
        annotated_ratio(&slide.records)?
    } else {
        opts.fixed_beta
    };
    let mut result = detect_slide(&slide.slide_id, &slide.records, beta)?;
    if slide.annotated {
        let truth: BTreeSet<(u32, u32)> = slide
            .records
            .iter()
            .filter(|r| r.tissue && r.in_annotation)
            .map(PatchRecord::pos)
            .collect();
        result.iou = Some(patch_iou(&truth, &result.roi_patches));
    }
    let mut patch_hits = 0;
    let mut patch_total = 0;
    for r in &slide.records {
        if let (Some(label), Some(s)) = (r.label, r.scores) {
            patch_total += 1;
            if s.argmax() == label {
                patch_hits += 1;
            }
        }
    }
    Ok(SlideOutcome::Done {
        result,
        truth: slide.true_label,
        patch_hits,
        patch_total,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate_cohort(slides: &[EvalSlide], opts: &EvalOptions, split_fraction: f64, seed: u64) -> Result<EvalReport> {
    check_beta(opts.fixed_beta)?;
    let outcomes: Vec<SlideOutcome> = slides
        .par_iter()
        .map(|s| evaluate_slide(s, opts))
        .collect::<Result<_>>()?;

    let mut per_slide = Vec::new();
    let mut skipped = Vec::new();
    let mut pairs = Vec::new();
    let (mut hits, mut total) = (0, 0);
    for o in outcomes {
        match o {
            SlideOutcome::Skipped(id) => skipped.push(id),
            SlideOutcome::Done {
                result,
                truth,
                patch_hits,
                patch_total,
            } => {
                hits += patch_hits;
                total += patch_total;
                if let Some(t) = truth {
                    pairs.push((t, result.predicted_label));
                }
                per_slide.push(result);
            }
        }
    }
    per_slide.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    skipped.sort();

    let confusion = confusion_matrix(&pairs);
    let ious: Vec<f64> = per_slide.iter().filter_map(|r| r.iou).collect();
    let mean_iou = if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };
    Ok(EvalReport {
        patch_accuracy: ratio(hits, total),
        slide_accuracy: ratio(confusion.correct(), confusion.total()),
        mean_iou,
        n_labeled_patches: total,
        n_classified_slides: confusion.total(),
        n_iou_slides: ious.len(),
        confusion,
        per_slide,
        skipped,
        split_fraction,
        seed,
    })
}

pub fn format_eval_table(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<32}{:>8}", "Metric", "Value");
    let _ = writeln!(s, "{:<32}{:>8.4}", "Patch classification accuracy", r.patch_accuracy);
    let _ = writeln!(s, "{:<32}{:>8.4}", "Slide classification accuracy", r.slide_accuracy);
    let _ = writeln!(s, "{:<32}{:>8.4}", "IoU", r.mean_iou);
    let _ = writeln!(
        s,
        "({} labeled patches, {} classified slides, {} slides with IoU)",
        r.n_labeled_patches, r.n_classified_slides, r.n_iou_slides
    );
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub values: Vec<f64>,
}

/// Mean with a normal-approximation 95% interval, `mean ± 1.96·sd/√n`.
pub fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    if n == 0 {
        return MetricSummary {
            mean: 0.0,
            ci_low: 0.0,
            ci_high: 0.0,
            values: Vec::new(),
        };
    }
    if values.iter().all(|v| *v == values[0]) {
        return MetricSummary {
            mean: values[0],
            ci_low: values[0],
            ci_high: values[0],
            values: values.to_vec(),
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let half = Z_95 * sd / (n as f64).sqrt();
    MetricSummary {
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
        values: values.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub fraction: f64,
    pub patch_accuracy: MetricSummary,
    pub slide_accuracy: MetricSummary,
    pub iou: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub rows: Vec<FractionRow>,
    pub n_repeats: usize,
    pub base_seed: u64,
}

/// Seed for one `(fraction, repeat)` cell of the sweep.
pub fn sweep_seed(base_seed: u64, fraction: f64, repeat: usize) -> u64 {
    derive_seed(base_seed, &["sweep", &format!("{fraction}"), &repeat.to_string()])
}

/// For each fraction and repeat, subsample the training slides (stratified)
/// and hand them to `run`, which retrains and evaluates on the fixed test set.
pub fn robustness_sweep<F>(
    train_slides: &[(String, SlideLabel)],
    fractions: &[f64],
    n_repeats: usize,
    base_seed: u64,
    run: F,
) -> Result<RobustnessSummary>
where
    F: Fn(&[String], u64) -> Result<EvalReport> + Sync,
{
    if n_repeats < 2 {
        return Err(Error::Config(format!("n_repeats {n_repeats} must be at least 2")));
    }
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::Config(format!("fractions {fractions:?} must lie in (0,1]")));
    }
    let jobs: Vec<(usize, usize)> = (0..fractions.len())
        .flat_map(|fi| (0..n_repeats).map(move |r| (fi, r)))
        .collect();
    let reports: Vec<EvalReport> = jobs
        .par_iter()
        .map(|&(fi, r)| {
            let seed = sweep_seed(base_seed, fractions[fi], r);
            let subset = crate::patching::subsample_slides(train_slides, fractions[fi], seed)?;
            log::info!("sweep fraction {} repeat {r}: {} training slides", fractions[fi], subset.len());
            run(&subset, seed)
        })
        .collect::<Result<_>>()?;

    let rows = fractions
        .iter()
        .enumerate()
        .map(|(fi, &fraction)| {
            let cell = &reports[fi * n_repeats..(fi + 1) * n_repeats];
            let pick = |f: fn(&EvalReport) -> f64| summarize(&cell.iter().map(f).collect::<Vec<_>>());
            FractionRow {
                fraction,
                patch_accuracy: pick(|r| r.patch_accuracy),
                slide_accuracy: pick(|r| r.slide_accuracy),
                iou: pick(|r| r.mean_iou),
            }
        })
        .collect();
    Ok(RobustnessSummary {
        rows,
        n_repeats,
        base_seed,
    })
}

pub fn format_robustness_table(s: &RobustnessSummary) -> String {
    let cell = |m: &MetricSummary| format!("{:.4} ({:.4}, {:.4})", m.mean, m.ci_low, m.ci_high);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8}{:<28}{:<28}{:<28}",
        "Split", "Patch accuracy (95% CI)", "Slide accuracy (95% CI)", "IoU (95% CI)"
    );
    for r in &s.rows {
        let _ = writeln!(
            out,
            "{:<8}{:<28}{:<28}{:<28}",
            format!("{:.0}%", r.fraction * 100.0),
            cell(&r.patch_accuracy),
            cell(&r.slide_accuracy),
            cell(&r.iou)
        );
    }
    let _ = writeln!(out, "({} repeats per split)", s.n_repeats);
    out
}
