//! Synthetic H&E-like cohorts with known ROI geometry.
//!
//! Pixels are rendered in stain-concentration space (hematoxylin, eosin) and
//! pushed through a per-slide perturbation of the reference stain matrix.
//! Each slide is a white field holding one star-shaped tissue blob; inside it
//! sit 1–3 smooth ROI blobs that are darker, carry denser nuclei, and are
//! shifted along a class-specific concentration direction. The shift is
//! calibrated so the melanoma and nevus ROI mean colors lie
//! `class_separability` apart in RGB under the reference profile.

use std::collections::BTreeSet;
use std::path::Path;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{patch_membership, serialize_annotation_xml, AnnotationRegion, AnnotationSet};
use crate::error::{Error, Result};
use crate::manifest::{CohortManifest, ManifestEntry};
use crate::model::{build_grid, SlideLabel, SlideRaster, PATCH_SIZE};
use crate::preprocess::stain::{intensity_from_od, quantize, StainProfile};
use crate::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_slides: usize,
    /// Fraction of slides labeled melanoma.
    pub class_balance: f64,
    /// `[width, height]` in pixels.
    pub slide_size: [u32; 2],
    pub roi_count_range: [usize; 2],
    /// Total ROI area as a fraction of the slide area.
    pub roi_area_fraction_range: [f64; 2],
    /// RGB distance between melanoma and nevus ROI mean colors.
    pub class_separability: f64,
    /// Fraction of each slide's ROIs written to its partial annotation file.
    pub annotation_coverage: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_slides: 60,
            class_balance: 0.5,
            slide_size: [2048, 2048],
            roi_count_range: [1, 3],
            roi_area_fraction_range: [0.05, 0.3],
            class_separability: 60.0,
            annotation_coverage: 0.7,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("cohort: {m}")));
        if self.n_slides == 0 {
            return bad("n_slides must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return bad(format!("class_balance {} outside [0,1]", self.class_balance));
        }
        if self.slide_size.iter().any(|&s| s < PATCH_SIZE) {
            return bad(format!("slide_size {:?} smaller than one patch", self.slide_size));
        }
        let [c0, c1] = self.roi_count_range;
        if c0 == 0 || c0 > c1 {
            return bad(format!("roi_count_range {:?} must be ordered and start at 1 or more", self.roi_count_range));
        }
        let [a0, a1] = self.roi_area_fraction_range;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return bad(format!("roi_area_fraction_range {:?} must be ordered within (0,1]", self.roi_area_fraction_range));
        }
        if !(0.0..=1.0).contains(&self.annotation_coverage) {
            return bad(format!("annotation_coverage {} outside [0,1]", self.annotation_coverage));
        }
        if !(self.class_separability.is_finite() && self.class_separability >= 0.0) {
            return bad(format!("class_separability {} must be nonnegative", self.class_separability));
        }
        class_shift(self.class_separability)?;
        Ok(())
    }

    pub fn slide_id(&self, index: usize) -> String {
        let width = self.n_slides.to_string().len().max(3);
        format!("slide_{index:0width$}")
    }

    /// Exactly `round(n·balance)` melanoma labels in seeded order.
    pub fn labels(&self) -> Vec<SlideLabel> {
        let n_mel = (self.n_slides as f64 * self.class_balance).round() as usize;
        let mut labels: Vec<SlideLabel> = (0..self.n_slides)
            .map(|i| if i < n_mel { SlideLabel::Melanoma } else { SlideLabel::Nevus })
            .collect();
        labels.shuffle(&mut rng_for(self.seed, &["labels"]));
        labels
    }
}

// Concentration model. Each pair is (hematoxylin, eosin).
const TISSUE_BASE: [f64; 2] = [0.25, 0.45];
const TISSUE_NOISE: [f64; 2] = [0.20, 0.30];
const ROI_OFFSET: [f64; 2] = [0.50, 0.0];
const NUCLEUS_H: f64 = 0.9;
const PIXEL_JITTER: f64 = 0.05;
/// Melanoma ROIs move this way in concentration space, nevus ROIs the other way.
const CLASS_DIRECTION: [f64; 2] = [0.957_826_285_221_151_8, -0.287_347_885_566_345_5];
const TISSUE_NUCLEI_PER_PX: f64 = 1.0 / 2500.0;
const ROI_NUCLEI_PER_PX: f64 = 1.0 / 500.0;
const NUCLEUS_RADIUS: (f64, f64) = (2.5, 4.5);
const NOISE_CELL: f64 = 96.0;
const STAIN_PERTURBATION: f64 = 0.06;

const TISSUE_RADIUS: f64 = 0.45;
const TISSUE_WOBBLE: f64 = 0.03;
const ROI_WOBBLE: f64 = 0.06;
const TISSUE_VERTICES: usize = 96;
const ROI_VERTICES: usize = 48;
const PLACEMENT_ATTEMPTS: usize = 400;
const LAYOUT_ATTEMPTS: usize = 40;

fn roi_mean() -> [f64; 2] {
    [
        TISSUE_BASE[0] + TISSUE_NOISE[0] / 2.0 + ROI_OFFSET[0],
        TISSUE_BASE[1] + TISSUE_NOISE[1] / 2.0 + ROI_OFFSET[1],
    ]
}

fn shifted(c: [f64; 2], delta: f64) -> [f64; 2] {
    [c[0] + delta * CLASS_DIRECTION[0], c[1] + delta * CLASS_DIRECTION[1]]
}

fn reference_rgb(c: [f64; 2]) -> [f64; 3] {
    StainProfile::reference().render_od(c).map(intensity_from_od)
}

/// RGB distance between the two class means at shift `delta`.
pub fn class_distance(delta: f64) -> f64 {
    let m = reference_rgb(shifted(roi_mean(), delta));
    let n = reference_rgb(shifted(roi_mean(), -delta));
    m.iter().zip(&n).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Largest shift keeping both class means at nonnegative concentration.
fn max_shift() -> f64 {
    let m = roi_mean();
    let mut d = f64::INFINITY;
    for k in 0..2 {
        if CLASS_DIRECTION[k] != 0.0 {
            d = d.min(m[k] / CLASS_DIRECTION[k].abs());
        }
    }
    d
}

/// Concentration shift realizing `separability`, found by bisection.
pub fn class_shift(separability: f64) -> Result<f64> {
    if separability == 0.0 {
        return Ok(0.0);
    }
    let hi_limit = max_shift();
    let reach = class_distance(hi_limit);
    if separability > reach {
        return Err(Error::Config(format!(
            "class_separability {separability} exceeds the achievable {reach:.1}"
        )));
    }
    let (mut lo, mut hi) = (0.0, hi_limit);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if class_distance(mid) < separability {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Smoothstep-interpolated lattice noise in [0,1].
struct ValueNoise {
    cell: f64,
    cols: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: u32, height: u32, cell: f64) -> Self {
        let cols = (f64::from(width) / cell).ceil() as usize + 2;
        let rows = (f64::from(height) / cell).ceil() as usize + 2;
        Self {
            cell,
            cols,
            values: (0..cols * rows).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(fx - fx.floor()), s(fy - fy.floor()));
        let v = |i: usize, j: usize| self.values[j * self.cols + i];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Radial profile `1 + Σ a_k cos(kθ + φ_k)` for k = 2..=5.
fn wobble_profile(rng: &mut ChaCha8Rng, amplitude: f64) -> Vec<(f64, f64, f64)> {
    (2..=5)
        .map(|k| (f64::from(k), rng.random_range(-amplitude..=amplitude), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect()
}

fn star_polygon(center: (f64, f64), radius: f64, profile: &[(f64, f64, f64)], n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            let r = radius * (1.0 + profile.iter().map(|(k, a, p)| a * (k * t + p).cos()).sum::<f64>());
            ((center.0 + r * t.cos()).round(), (center.1 + r * t.sin()).round())
        })
        .collect()
}

/// Calls `f(x, y)` for every pixel whose center lies inside `poly` under the
/// nonzero winding rule.
pub fn fill_polygon(poly: &[(f64, f64)], width: u32, height: u32, mut f: impl FnMut(u32, u32)) {
    let n = poly.len();
    let mut crossings: Vec<(f64, i32)> = Vec::new();
    for y in 0..height {
        let yc = f64::from(y) + 0.5;
        crossings.clear();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a.1 <= yc) != (b.1 <= yc) {
                let x = a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1);
                crossings.push((x, if b.1 > a.1 { 1 } else { -1 }));
            }
        }
        crossings.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut winding = 0;
        for w in crossings.windows(2) {
            winding += w[0].1;
            if winding == 0 {
                continue;
            }
            // pixel centers x + 0.5 in [w[0].0, w[1].0)
            let x0 = (w[0].0 - 0.5).ceil();
            let x1 = (w[1].0 - 0.5).ceil() - 1.0;
            let x0 = x0.max(0.0);
            let x1 = x1.min(f64::from(width) - 1.0);
            let mut x = x0;
            while x <= x1 {
                f(x as u32, y);
                x += 1.0;
            }
        }
    }
}

fn inside_all(poly: &[(f64, f64)], container: &[(f64, f64)]) -> bool {
    poly.iter().all(|&p| crate::annotation::winding_number(container, p) != 0)
}

#[derive(Debug, Clone)]
struct Layout {
    tissue: Vec<(f64, f64)>,
    rois: Vec<Vec<(f64, f64)>>,
}

fn try_layout(rng: &mut ChaCha8Rng, spec: &CohortSpec) -> Option<Layout> {
    let [w, h] = spec.slide_size.map(f64::from);
    let side = w.min(h);
    let center = (w / 2.0 + rng.random_range(-0.02..=0.02) * w, h / 2.0 + rng.random_range(-0.02..=0.02) * h);
    let tissue_profile = wobble_profile(rng, TISSUE_WOBBLE);
    let tissue = star_polygon(center, TISSUE_RADIUS * side, &tissue_profile, TISSUE_VERTICES);

    let n_rois = rng.random_range(spec.roi_count_range[0]..=spec.roi_count_range[1]);
    let [a0, a1] = spec.roi_area_fraction_range;
    let total = rng.random_range(a0..=a1) * w * h;
    let weights: Vec<f64> = (0..n_rois).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();

    let mut rois: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut discs: Vec<((f64, f64), f64)> = Vec::new();
    for wt in weights {
        let target = total * wt / wsum;
        let profile = wobble_profile(rng, ROI_WOBBLE);
        let unit = polygon_area(&star_polygon((0.0, 0.0), 1000.0, &profile, ROI_VERTICES)) / 1e6;
        let radius = (target / unit).sqrt();
        let reach = radius * (1.0 + 4.0 * ROI_WOBBLE);
        let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let c = (rng.random_range(0.0..w), rng.random_range(0.0..h));
            if discs.iter().any(|&(d, r)| (c.0 - d.0).hypot(c.1 - d.1) <= r + reach) {
                return None;
            }
            let poly = star_polygon(c, radius, &profile, ROI_VERTICES);
            inside_all(&poly, &tissue).then_some((c, poly))
        });
        let (c, poly) = placed?;
        discs.push((c, reach));
        rois.push(poly);
    }
    Some(Layout { tissue, rois })
}

fn perturbed_profile(rng: &mut ChaCha8Rng) -> StainProfile {
    let reference = StainProfile::reference();
    let mut jitter = |v: [f64; 3]| v.map(|x| (x + rng.random_range(-STAIN_PERTURBATION..=STAIN_PERTURBATION)).max(0.01));
    let h = jitter(reference.hematoxylin());
    let e = jitter(reference.eosin());
    StainProfile::new(h, e, reference.max_concentrations).expect("perturbed reference stays valid")
}

/// One generated slide with its annotations and ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub slide_id: String,
    pub label: SlideLabel,
    pub raster: SlideRaster,
    /// Every ROI.
    pub truth: AnnotationSet,
    /// The annotated subset of ROIs.
    pub partial: AnnotationSet,
    /// 255 inside any ROI, 0 elsewhere.
    pub mask: GrayImage,
    /// Patch-level ROI flags in row-major grid order.
    pub roi_flags: Vec<bool>,
    pub stain: StainProfile,
}

pub fn generate_slide(spec: &CohortSpec, index: usize, label: SlideLabel) -> Result<SyntheticSlide> {
    let slide_id = spec.slide_id(index);
    let mut rng = rng_for(spec.seed, &["slide", &slide_id]);
    let layout = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| try_layout(&mut rng, spec))
        .ok_or_else(|| {
            Error::Generation(format!(
                "{slide_id}: could not fit ROIs covering {:?} of a {:?} slide",
                spec.roi_area_fraction_range, spec.slide_size
            ))
        })?;
    let stain = perturbed_profile(&mut rng);
    let delta = class_shift(spec.class_separability)?;
    let class_sign = match label {
        SlideLabel::Melanoma => 1.0,
        SlideLabel::Nevus => -1.0,
    };
    let roi_shift = [
        ROI_OFFSET[0] + class_sign * delta * CLASS_DIRECTION[0],
        ROI_OFFSET[1] + class_sign * delta * CLASS_DIRECTION[1],
    ];

    let [w, h] = spec.slide_size;
    let idx = |x: u32, y: u32| y as usize * w as usize + x as usize;
    let mut tissue = vec![false; (w * h) as usize];
    fill_polygon(&layout.tissue, w, h, |x, y| tissue[idx(x, y)] = true);
    let mut roi = vec![false; (w * h) as usize];
    for poly in &layout.rois {
        fill_polygon(poly, w, h, |x, y| roi[idx(x, y)] = true);
    }

    let mut nuclei = vec![0.0f32; (w * h) as usize];
    let candidates = (f64::from(w) * f64::from(h) * ROI_NUCLEI_PER_PX) as usize;
    for _ in 0..candidates {
        let (cx, cy) = (rng.random_range(0.0..f64::from(w)), rng.random_range(0.0..f64::from(h)));
        let r = rng.random_range(NUCLEUS_RADIUS.0..NUCLEUS_RADIUS.1);
        let keep_draw: f64 = rng.random();
        let at = idx(cx as u32, cy as u32);
        let keep = roi[at] || (tissue[at] && keep_draw < TISSUE_NUCLEI_PER_PX / ROI_NUCLEI_PER_PX);
        if !keep {
            continue;
        }
        let (x0, x1) = ((cx - r).floor().max(0.0) as u32, ((cx + r).ceil() as u32).min(w - 1));
        let (y0, y1) = ((cy - r).floor().max(0.0) as u32, ((cy + r).ceil() as u32).min(h - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = (f64::from(x) + 0.5 - cx).hypot(f64::from(y) + 0.5 - cy);
                if d <= r && tissue[idx(x, y)] {
                    nuclei[idx(x, y)] = 1.0;
                }
            }
        }
    }

    let noise_h = ValueNoise::new(&mut rng, w, h, NOISE_CELL);
    let noise_e = ValueNoise::new(&mut rng, w, h, NOISE_CELL / 2.0);
    let mut pixels = vec![255u8; (w * h * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            let i = idx(x, y);
            let (jh, je) = (rng.random_range(-PIXEL_JITTER..=PIXEL_JITTER), rng.random_range(-PIXEL_JITTER..=PIXEL_JITTER));
            if !tissue[i] {
                continue;
            }
            let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
            let mut c = [
                TISSUE_BASE[0] + TISSUE_NOISE[0] * noise_h.at(fx, fy) + jh,
                TISSUE_BASE[1] + TISSUE_NOISE[1] * noise_e.at(fx, fy) + je,
            ];
            if roi[i] {
                c[0] += roi_shift[0];
                c[1] += roi_shift[1];
            }
            c[0] += NUCLEUS_H * f64::from(nuclei[i]);
            let rgb = stain.render_od(c.map(|v| v.max(0.0))).map(|od| quantize(intensity_from_od(od)));
            pixels[i * 3..i * 3 + 3].copy_from_slice(&rgb);
        }
    }
    let raster = SlideRaster::new(slide_id.clone(), w, h, pixels, Some(label))?;

    let class = Some(label.patch_class());
    let regions: Vec<AnnotationRegion> = layout
        .rois
        .iter()
        .enumerate()
        .map(|(i, poly)| AnnotationRegion {
            region_id: (i + 1).to_string(),
            vertices: poly.clone(),
            assigned_class: class,
        })
        .collect();
    let n_annotated = (spec.annotation_coverage * regions.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.shuffle(&mut rng);
    let chosen: BTreeSet<usize> = order[..n_annotated].iter().copied().collect();
    let truth = AnnotationSet {
        slide_id: slide_id.clone(),
        regions: regions.clone(),
    };
    let partial = AnnotationSet {
        slide_id: slide_id.clone(),
        regions: regions.into_iter().enumerate().filter(|(i, _)| chosen.contains(i)).map(|(_, r)| r).collect(),
    };
    let roi_flags = patch_membership(&build_grid(&raster)?, &truth)?;
    let mask = GrayImage::from_fn(w, h, |x, y| image::Luma([if roi[idx(x, y)] { 255 } else { 0 }]));
    Ok(SyntheticSlide {
        slide_id,
        label,
        raster,
        truth,
        partial,
        mask,
        roi_flags,
        stain,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Generate the cohort into `dir` (slides/, annotations/, masks/ and
/// manifest.json). Slides are produced in parallel on the current rayon pool.
pub fn write_cohort(spec: &CohortSpec, dir: &Path) -> Result<CohortManifest> {
    spec.validate()?;
    for sub in ["slides", "annotations", "masks"] {
        create_dir(&dir.join(sub))?;
    }
    let labels = spec.labels();
    let entries: Vec<ManifestEntry> = (0..spec.n_slides)
        .into_par_iter()
        .map(|i| {
            let s = generate_slide(spec, i, labels[i])?;
            let id = &s.slide_id;
            let entry = ManifestEntry {
                slide_id: id.clone(),
                path: format!("slides/{id}.png"),
                label: Some(s.label),
                annotation: Some(format!("annotations/{id}.xml")),
                truth_annotation: Some(format!("annotations/{id}_truth.xml")),
                mask: Some(format!("masks/{id}.png")),
            };
            s.raster.to_image().save(dir.join(&entry.path))?;
            s.mask.save(dir.join(entry.mask.as_deref().unwrap_or_default()))?;
            write_text(&dir.join(entry.annotation.as_deref().unwrap_or_default()), &serialize_annotation_xml(&s.partial))?;
            write_text(
                &dir.join(entry.truth_annotation.as_deref().unwrap_or_default()),
                &serialize_annotation_xml(&s.truth),
            )?;
            log::info!("generated {id} ({})", s.label);
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = CohortManifest { slides: entries };
    manifest.save(&dir.join("manifest.json"))?;
    write_text(&dir.join("cohort_spec.json"), &(serde_json::to_string_pretty(spec)? + "\n"))?;
    Ok(manifest)
}
