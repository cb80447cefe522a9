use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RgbPatch;

/// HSV thresholds for tissue detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueParams {
    pub saturation_threshold: f64,
    pub value_threshold: f64,
    pub fraction_threshold: f64,
}

impl Default for TissueParams {
    fn default() -> Self {
        Self {
            saturation_threshold: 0.08,
            value_threshold: 0.95,
            fraction_threshold: 0.25,
        }
    }
}

impl TissueParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("saturation_threshold", self.saturation_threshold),
            ("value_threshold", self.value_threshold),
            ("fraction_threshold", self.fraction_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("tissue.{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// HSV saturation and value of an RGB8 pixel, both in [0,1].
pub fn saturation_value(rgb: [u8; 3]) -> (f64, f64) {
    let max = rgb.iter().copied().max().unwrap_or(0);
    let min = rgb.iter().copied().min().unwrap_or(0);
    let v = f64::from(max) / 255.0;
    let s = if max == 0 {
        0.0
    } else {
        f64::from(max - min) / f64::from(max)
    };
    (s, v)
}

/// Hue in degrees [0, 360). Achromatic pixels report 0.
pub fn hue_degrees(rgb: [u8; 3]) -> f64 {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h * 60.0).rem_euclid(360.0)
}

pub fn is_tissue_pixel(rgb: [u8; 3], params: &TissueParams) -> bool {
    let (s, v) = saturation_value(rgb);
    s > params.saturation_threshold && v < params.value_threshold
}

pub fn tissue_fraction(patch: &RgbPatch, params: &TissueParams) -> f64 {
    let n = patch.size() * patch.size();
    let hits = patch.pixels().filter(|&p| is_tissue_pixel(p, params)).count();
    hits as f64 / n as f64
}

pub fn detect_tissue(patch: &RgbPatch, params: &TissueParams) -> bool {
    tissue_fraction(patch, params) > params.fraction_threshold
}
