//! Multinomial logistic regression over standardized patch features.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PatchClass, ScoreTriplet};
use crate::rng::rng_for;

use super::features::{PatchFeatures, FEATURE_COUNT};

pub const N_CLASSES: usize = 3;
/// Features plus a bias column.
pub const N_INPUTS: usize = FEATURE_COUNT + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub early_stop_tolerance: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            batch_size: 64,
            seed: 0,
            early_stop_patience: 10,
            early_stop_tolerance: 1e-5,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_run: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
}

/// Per-feature z-score statistics fitted on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaling {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; FEATURE_COUNT],
            std: vec![1.0; FEATURE_COUNT],
        }
    }

    pub fn fit(rows: &[PatchFeatures]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; FEATURE_COUNT];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.as_slice()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; FEATURE_COUNT];
        for r in rows {
            for j in 0..FEATURE_COUNT {
                var[j] += (r.0[j] - mean[j]).powi(2) / n;
            }
        }
        // constant features keep unit scale so they only shift the bias
        let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    /// Standardized features with a trailing bias entry of 1.
    pub fn design_row(&self, f: &PatchFeatures) -> [f64; N_INPUTS] {
        let mut row = [1.0; N_INPUTS];
        for j in 0..FEATURE_COUNT {
            row[j] = (f.0[j] - self.mean[j]) / self.std[j];
        }
        row
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != FEATURE_COUNT || self.std.len() != FEATURE_COUNT {
            return Err(Error::Validation("feature scaling has wrong length".into()));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("feature scaling must be finite with positive std".into()));
        }
        Ok(())
    }
}

pub type Weights = [[f64; N_INPUTS]; N_CLASSES];

pub fn softmax(logits: [f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - max).exp());
    let sum: f64 = e.iter().sum();
    e.map(|v| v / sum)
}

fn logits(w: &Weights, x: &[f64; N_INPUTS]) -> [f64; N_CLASSES] {
    std::array::from_fn(|k| w[k].iter().zip(x).map(|(a, b)| a * b).sum())
}

/// Mean cross-entropy over `idx` and its gradient with respect to `w`.
pub fn loss_and_gradient(w: &Weights, xs: &[[f64; N_INPUTS]], ys: &[usize], idx: &[usize]) -> (f64, Weights) {
    let mut grad = [[0.0; N_INPUTS]; N_CLASSES];
    let mut loss = 0.0;
    let n = idx.len().max(1) as f64;
    for &i in idx {
        let p = softmax(logits(w, &xs[i]));
        loss -= p[ys[i]].max(f64::MIN_POSITIVE).ln();
        for k in 0..N_CLASSES {
            let r = p[k] - if k == ys[i] { 1.0 } else { 0.0 };
            for (g, x) in grad[k].iter_mut().zip(&xs[i]) {
                *g += r * x;
            }
        }
    }
    for row in grad.iter_mut() {
        for g in row.iter_mut() {
            *g /= n;
        }
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    /// One row per class (melanoma, nevus, other); last column is the bias.
    pub weights: Vec<Vec<f64>>,
    pub scaling: FeatureScaling,
    pub training_meta: Option<TrainingMeta>,
}

impl ClassifierModel {
    /// All-zero weights; scores every patch uniformly.
    pub fn zeros() -> Self {
        Self {
            weights: vec![vec![0.0; N_INPUTS]; N_CLASSES],
            scaling: FeatureScaling::identity(),
            training_meta: None,
        }
    }

    fn weight_array(&self) -> Weights {
        std::array::from_fn(|k| std::array::from_fn(|j| self.weights[k][j]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != N_CLASSES || self.weights.iter().any(|r| r.len() != N_INPUTS) {
            return Err(Error::Validation(format!("weights must be {N_CLASSES}x{N_INPUTS}")));
        }
        if self.weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite weight".into()));
        }
        self.scaling.validate()
    }

    pub fn probabilities(&self, f: &PatchFeatures) -> [f64; N_CLASSES] {
        softmax(logits(&self.weight_array(), &self.scaling.design_row(f)))
    }

    pub fn score(&self, f: &PatchFeatures) -> Result<ScoreTriplet> {
        let [m, n, o] = self.probabilities(f);
        ScoreTriplet::new(m, n, o)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn train(samples: &[(PatchFeatures, PatchClass)], params: &TrainParams) -> Result<ClassifierModel> {
    params.validate()?;
    for class in PatchClass::ALL {
        if !samples.iter().any(|(_, c)| *c == class) {
            return Err(Error::ClassCoverage(format!("no training patches of class {class}")));
        }
    }
    let feats: Vec<PatchFeatures> = samples.iter().map(|(f, _)| f.clone()).collect();
    let scaling = FeatureScaling::fit(&feats);
    let xs: Vec<[f64; N_INPUTS]> = feats.iter().map(|f| scaling.design_row(f)).collect();
    let ys: Vec<usize> = samples.iter().map(|(_, c)| c.index()).collect();
    let all: Vec<usize> = (0..xs.len()).collect();

    let mut w: Weights = [[0.0; N_INPUTS]; N_CLASSES];
    let mut rng = rng_for(params.seed, &["sgd"]);
    let mut order = all.clone();
    let mut curve = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(params.batch_size) {
            let (_, g) = loss_and_gradient(&w, &xs, &ys, batch);
            for k in 0..N_CLASSES {
                for j in 0..N_INPUTS {
                    w[k][j] -= params.learning_rate * g[k][j];
                }
            }
        }
        let (loss, _) = loss_and_gradient(&w, &xs, &ys, &all);
        if !loss.is_finite() || w.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch, loss });
        }
        curve.push(loss);
        log::debug!("epoch {epoch}: loss {loss:.6}");
        if best - loss < params.early_stop_tolerance {
            stale += 1;
            if stale >= params.early_stop_patience {
                break;
            }
        } else {
            stale = 0;
        }
        best = best.min(loss);
    }

    Ok(ClassifierModel {
        weights: w.iter().map(|r| r.to_vec()).collect(),
        scaling,
        training_meta: Some(TrainingMeta {
            epochs_run: curve.len(),
            learning_rate: params.learning_rate,
            batch_size: params.batch_size,
            seed: params.seed,
            loss_curve: curve,
        }),
    })
}
