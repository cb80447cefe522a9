//! Macenko stain estimation and normalization in optical-density space.
//!
//! Intensities map to optical density as `OD = -log10((I + 1) / 256)`, so
//! white (255) is exactly zero OD and black never hits log 0. Stain vectors
//! are the 1st/99th-percentile angle directions of the OD cloud projected
//! onto its two leading right-singular directions.

use std::sync::OnceLock;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RgbPatch;

/// Pixels with any OD component below this are treated as background.
pub const OD_FLOOR: f64 = 0.15;
/// Lower angle percentile; the upper one is `100 - ANGLE_PERCENTILE`.
pub const ANGLE_PERCENTILE: f64 = 1.0;
pub const CONCENTRATION_PERCENTILE: f64 = 99.0;
pub const MIN_STAIN_PIXELS: usize = 1000;
/// Minimum sine of the angle between stain columns.
pub const PARALLEL_TOLERANCE: f64 = 1e-6;

/// Two unit stain directions (hematoxylin first, then eosin) plus their
/// 99th-percentile concentrations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    pub stain_matrix: [[f64; 3]; 2],
    pub max_concentrations: [f64; 2],
}

impl Default for StainProfile {
    fn default() -> Self {
        Self::reference()
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    v.map(|x| x / n)
}

fn norm(v: [f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl StainProfile {
    /// Build a profile, normalizing both columns to unit length.
    pub fn new(hematoxylin: [f64; 3], eosin: [f64; 3], max_concentrations: [f64; 2]) -> Result<Self> {
        for v in [hematoxylin, eosin] {
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) || norm(v) == 0.0 {
                return Err(Error::Config(format!("invalid stain vector {v:?}")));
            }
        }
        let p = Self {
            stain_matrix: [unit(hematoxylin), unit(eosin)],
            max_concentrations,
        };
        p.validate()?;
        Ok(p)
    }

    /// Fixed H&E normalization target.
    pub fn reference() -> Self {
        Self {
            stain_matrix: [unit([0.65, 0.70, 0.29]), unit([0.07, 0.99, 0.11])],
            max_concentrations: [1.9, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for col in &self.stain_matrix {
            if col.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::Config(format!("stain column {col:?} has negative entries")));
            }
            if (norm(*col) - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("stain column {col:?} is not unit length")));
            }
        }
        if self
            .max_concentrations
            .iter()
            .any(|c| !c.is_finite() || *c <= 0.0)
        {
            return Err(Error::Config(format!(
                "max_concentrations {:?} must be positive",
                self.max_concentrations
            )));
        }
        Ok(())
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.stain_matrix[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.stain_matrix[1]
    }

    /// Least-squares unmixing operator, failing when the columns are parallel.
    pub fn unmixer(&self) -> Result<Unmixer> {
        let [h, e] = self.stain_matrix;
        if norm(cross(h, e)) < PARALLEL_TOLERANCE * norm(h) * norm(e) {
            return Err(Error::DegenerateStains(format!(
                "stain columns {h:?} and {e:?} are parallel"
            )));
        }
        // (MᵀM)⁻¹Mᵀ for M = [h e]
        let (hh, he, ee) = (dot(h, h), dot(h, e), dot(e, e));
        let det = hh * ee - he * he;
        let mut rows = [[0.0; 3]; 2];
        for k in 0..3 {
            rows[0][k] = (ee * h[k] - he * e[k]) / det;
            rows[1][k] = (hh * e[k] - he * h[k]) / det;
        }
        Ok(Unmixer { rows })
    }

    pub fn render_od(&self, c: [f64; 2]) -> [f64; 3] {
        let [h, e] = self.stain_matrix;
        [
            h[0] * c[0] + e[0] * c[1],
            h[1] * c[0] + e[1] * c[1],
            h[2] * c[0] + e[2] * c[1],
        ]
    }

    /// Render stain concentrations to an RGB8 pixel.
    pub fn render_pixel(&self, c: [f64; 2]) -> [u8; 3] {
        self.render_od(c).map(|od| quantize(intensity_from_od(od)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Unmixer {
    rows: [[f64; 3]; 2],
}

impl Unmixer {
    pub fn concentrations(&self, od: [f64; 3]) -> [f64; 2] {
        [dot(self.rows[0], od), dot(self.rows[1], od)]
    }
}

fn od_table() -> &'static [f64; 256] {
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|i| -((i as f64 + 1.0) / 256.0).log10()))
}

pub fn optical_density(v: u8) -> f64 {
    od_table()[v as usize]
}

pub fn od_pixel(rgb: [u8; 3]) -> [f64; 3] {
    rgb.map(optical_density)
}

/// Inverse of [`optical_density`] before quantization.
pub fn intensity_from_od(od: f64) -> f64 {
    256.0 * 10f64.powf(-od) - 1.0
}

pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Linear-interpolated percentile of a sorted slice (numpy's default rule).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * t
}

fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    percentile_sorted(values, p)
}

/// Estimate a stain profile from a pixel sample.
pub fn estimate_stains(pixels: &[[u8; 3]]) -> Result<StainProfile> {
    let od: Vec<[f64; 3]> = pixels
        .iter()
        .map(|&p| od_pixel(p))
        .filter(|o| o.iter().all(|&c| c >= OD_FLOOR))
        .collect();
    if od.len() < MIN_STAIN_PIXELS {
        return Err(Error::InsufficientTissue {
            usable: od.len(),
            required: MIN_STAIN_PIXELS,
        });
    }

    // Right-singular directions of the OD matrix = eigenvectors of ODᵀOD.
    let mut gram = Matrix3::<f64>::zeros();
    for o in &od {
        for i in 0..3 {
            for j in 0..3 {
                gram[(i, j)] += o[i] * o[j];
            }
        }
    }
    let eig = SymmetricEigen::new(gram);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis: Vec<[f64; 3]> = order[..2]
        .iter()
        .map(|&k| {
            let c = eig.eigenvectors.column(k);
            let v = [c[0], c[1], c[2]];
            if v.iter().sum::<f64>() < 0.0 {
                v.map(|x| -x)
            } else {
                v
            }
        })
        .collect();

    let mut angles: Vec<f64> = od
        .iter()
        .map(|&o| dot(o, basis[1]).atan2(dot(o, basis[0])))
        .collect();
    angles.sort_unstable_by(f64::total_cmp);
    let lo = percentile_sorted(&angles, ANGLE_PERCENTILE);
    let hi = percentile_sorted(&angles, 100.0 - ANGLE_PERCENTILE);

    let direction = |phi: f64| -> [f64; 3] {
        let v: [f64; 3] = std::array::from_fn(|k| basis[0][k] * phi.cos() + basis[1][k] * phi.sin());
        let v = if v.iter().sum::<f64>() < 0.0 { v.map(|x| -x) } else { v };
        v.map(|x| x.max(0.0))
    };
    let (a, b) = (direction(lo), direction(hi));
    if norm(a) == 0.0 || norm(b) == 0.0 {
        return Err(Error::DegenerateStains("stain direction collapsed to zero".into()));
    }
    let (a, b) = (unit(a), unit(b));
    // Hematoxylin absorbs more in the blue channel.
    let (h, e) = if a[2] >= b[2] { (a, b) } else { (b, a) };
    let mut profile = StainProfile {
        stain_matrix: [h, e],
        max_concentrations: [1.0, 1.0],
    };
    let unmix = profile.unmixer()?;

    let mut ch = Vec::with_capacity(pixels.len());
    let mut ce = Vec::with_capacity(pixels.len());
    for &p in pixels {
        let c = unmix.concentrations(od_pixel(p));
        ch.push(c[0]);
        ce.push(c[1]);
    }
    let maxc = [
        percentile(&mut ch, CONCENTRATION_PERCENTILE),
        percentile(&mut ce, CONCENTRATION_PERCENTILE),
    ];
    if maxc.iter().any(|c| !c.is_finite() || *c <= 0.0) {
        return Err(Error::DegenerateStains(format!(
            "non-positive max concentrations {maxc:?}"
        )));
    }
    profile.max_concentrations = maxc;
    Ok(profile)
}

/// Precomputed source→reference stain mapping.
#[derive(Debug, Clone, Copy)]
pub struct StainNormalizer {
    unmix: Unmixer,
    scale: [f64; 2],
    reference: StainProfile,
}

impl StainNormalizer {
    pub fn new(source: &StainProfile, reference: &StainProfile) -> Result<Self> {
        reference.unmixer()?;
        Ok(Self {
            unmix: source.unmixer()?,
            scale: [
                reference.max_concentrations[0] / source.max_concentrations[0],
                reference.max_concentrations[1] / source.max_concentrations[1],
            ],
            reference: *reference,
        })
    }

    pub fn map_pixel(&self, rgb: [u8; 3]) -> [u8; 3] {
        let c = self.unmix.concentrations(od_pixel(rgb));
        self.reference
            .render_pixel([c[0] * self.scale[0], c[1] * self.scale[1]])
    }

    pub fn apply(&self, patch: &RgbPatch) -> RgbPatch {
        let mut out = patch.clone();
        for px in out.data_mut().chunks_exact_mut(3) {
            let m = self.map_pixel([px[0], px[1], px[2]]);
            px.copy_from_slice(&m);
        }
        out
    }
}

pub fn normalize_patch(
    patch: &RgbPatch,
    source: &StainProfile,
    reference: &StainProfile,
) -> Result<RgbPatch> {
    Ok(StainNormalizer::new(source, reference)?.apply(patch))
}
