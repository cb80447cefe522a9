//! Hand-designed, flip-invariant patch descriptors.
//!
//! Layout (40 values):
//!
//! | index  | feature                                                  |
//! |--------|----------------------------------------------------------|
//! | 0..9   | mean, std, skewness of R, G, B (intensities in [0,1])    |
//! | 9..15  | mean, std, skewness of H and E concentrations            |
//! | 15..21 | mean, std, skewness of HSV saturation and value          |
//! | 21..29 | 8-bin hue histogram                                      |
//! | 29..37 | 8-bin H-concentration histogram over [0, 2)              |
//! | 37     | edge density (gray gradient magnitude > 0.1)             |
//! | 38     | mean gray gradient magnitude                             |
//! | 39     | tissue fraction                                          |
//!
//! Every sum runs over mirror pairs `(x, w-1-x)` within a row, so a patch
//! and its horizontal flip produce bit-identical features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RgbPatch;
use crate::preprocess::stain::{od_pixel, StainProfile, Unmixer};
use crate::preprocess::tissue::{hue_degrees, is_tissue_pixel, saturation_value, TissueParams};

pub const FEATURE_COUNT: usize = 40;
pub const HIST_BINS: usize = 8;
pub const H_HIST_MAX: f64 = 2.0;
pub const EDGE_THRESHOLD: f64 = 0.1;

pub const IDX_EDGE_DENSITY: usize = 37;
pub const IDX_MEAN_GRADIENT: usize = 38;
pub const IDX_TISSUE_FRACTION: usize = 39;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PatchFeatures(pub [f64; FEATURE_COUNT]);

impl TryFrom<Vec<f64>> for PatchFeatures {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        let n = v.len();
        let arr: [f64; FEATURE_COUNT] = v
            .try_into()
            .map_err(|_| Error::Validation(format!("feature vector has {n} entries, expected {FEATURE_COUNT}")))?;
        if arr.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(Self(arr))
    }
}

impl From<PatchFeatures> for Vec<f64> {
    fn from(f: PatchFeatures) -> Self {
        f.0.to_vec()
    }
}

impl PatchFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Sum `f(x, y)` over a square of side `n`, pairing mirrored columns.
fn mirror_sum(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    for y in 0..n {
        let mut row = 0.0;
        for x in 0..n / 2 {
            row += f(x, y) + f(n - 1 - x, y);
        }
        if n % 2 == 1 {
            row += f(n / 2, y);
        }
        total += row;
    }
    total
}

/// Population mean, std and skewness of a per-pixel channel.
fn moments(n: usize, values: &[f64]) -> [f64; 3] {
    let count = (n * n) as f64;
    let at = |x: usize, y: usize| values[y * n + x];
    let mean = mirror_sum(n, at) / count;
    let var = mirror_sum(n, |x, y| (at(x, y) - mean).powi(2)) / count;
    let std = var.sqrt();
    if std < 1e-12 {
        return [mean, 0.0, 0.0];
    }
    let m3 = mirror_sum(n, |x, y| (at(x, y) - mean).powi(3)) / count;
    [mean, std, m3 / (std * std * std)]
}

fn bin(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((value - lo) / (hi - lo) * bins as f64).floor();
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// Gray-level gradient magnitude by central differences with clamped borders.
pub fn gradient_magnitudes(patch: &RgbPatch) -> Vec<f64> {
    let n = patch.size();
    let gray: Vec<f64> = patch
        .pixels()
        .map(|[r, g, b]| (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0)
        .collect();
    let at = |x: usize, y: usize| gray[y * n + x];
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let gx = (at((x + 1).min(n - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            let gy = (at(x, (y + 1).min(n - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Feature extractor bound to the stain space patches were normalized into.
#[derive(Debug, Clone, Copy)]
pub struct FeatureExtractor {
    unmix: Unmixer,
    tissue: TissueParams,
}

impl FeatureExtractor {
    pub fn new(reference: &StainProfile, tissue: TissueParams) -> Result<Self> {
        Ok(Self {
            unmix: reference.unmixer()?,
            tissue,
        })
    }

    pub fn extract(&self, patch: &RgbPatch) -> PatchFeatures {
        let n = patch.size();
        let count = (n * n) as f64;
        let mut ch: [Vec<f64>; 7] = std::array::from_fn(|_| Vec::with_capacity(n * n));
        let mut hue_hist = [0usize; HIST_BINS];
        let mut h_hist = [0usize; HIST_BINS];
        let mut tissue = 0usize;
        for px in patch.pixels() {
            for c in 0..3 {
                ch[c].push(f64::from(px[c]) / 255.0);
            }
            let conc = self.unmix.concentrations(od_pixel(px));
            ch[3].push(conc[0]);
            ch[4].push(conc[1]);
            let (s, v) = saturation_value(px);
            ch[5].push(s);
            ch[6].push(v);
            hue_hist[bin(hue_degrees(px), 0.0, 360.0, HIST_BINS)] += 1;
            h_hist[bin(conc[0], 0.0, H_HIST_MAX, HIST_BINS)] += 1;
            if is_tissue_pixel(px, &self.tissue) {
                tissue += 1;
            }
        }

        let mut f = [0.0; FEATURE_COUNT];
        for (c, values) in ch.iter().enumerate() {
            f[c * 3..c * 3 + 3].copy_from_slice(&moments(n, values));
        }
        for b in 0..HIST_BINS {
            f[21 + b] = hue_hist[b] as f64 / count;
            f[29 + b] = h_hist[b] as f64 / count;
        }
        let grad = gradient_magnitudes(patch);
        let edges = grad.iter().filter(|&&g| g > EDGE_THRESHOLD).count();
        f[IDX_EDGE_DENSITY] = edges as f64 / count;
        f[IDX_MEAN_GRADIENT] = mirror_sum(n, |x, y| grad[y * n + x]) / count;
        f[IDX_TISSUE_FRACTION] = tissue as f64 / count;
        PatchFeatures(f)
    }
}

pub fn extract_features(patch: &RgbPatch, reference: &StainProfile, tissue: &TissueParams) -> Result<PatchFeatures> {
    Ok(FeatureExtractor::new(reference, *tissue)?.extract(patch))
}
