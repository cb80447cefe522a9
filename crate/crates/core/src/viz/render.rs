//! Overlay, heatmap and boundary maps.

use std::collections::BTreeSet;

use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_grid, PatchGrid, PatchRecord, SlideRaster, SlideResult};

use super::contour::trace_boundary;
use super::optics::{largest_roi_cluster, ClusterParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Boundary,
    Overlay,
    Heatmap,
}

impl RenderMode {
    pub const ALL: [RenderMode; 3] = [RenderMode::Boundary, RenderMode::Overlay, RenderMode::Heatmap];

    pub fn as_str(self) -> &'static str {
        match self {
            RenderMode::Boundary => "boundary",
            RenderMode::Overlay => "overlay",
            RenderMode::Heatmap => "heatmap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub modes: Vec<RenderMode>,
    pub overlay_mask_color: [u8; 3],
    pub overlay_alpha: f64,
    pub boundary_color: [u8; 3],
    /// Stroke width in pixels.
    pub boundary_width: u32,
    pub cluster: ClusterParams,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            modes: RenderMode::ALL.to_vec(),
            overlay_mask_color: [0, 0, 255],
            overlay_alpha: 0.5,
            boundary_color: [0, 255, 0],
            boundary_width: 3,
            cluster: ClusterParams::default(),
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return Err(Error::Config(format!("overlay_alpha {} outside [0,1]", self.overlay_alpha)));
        }
        if self.boundary_width == 0 {
            return Err(Error::Config("boundary_width must be positive".into()));
        }
        self.cluster.validate()
    }
}

/// Blue at 0, red at 1, linear in between.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

pub fn blend(px: [u8; 3], color: [u8; 3], alpha: f64) -> [u8; 3] {
    std::array::from_fn(|c| ((1.0 - alpha) * f64::from(px[c]) + alpha * f64::from(color[c])).round() as u8)
}

fn base_image(slide: &SlideRaster) -> RgbaImage {
    RgbaImage::from_fn(slide.width(), slide.height(), |x, y| {
        let [r, g, b] = slide.pixel(x, y);
        Rgba([r, g, b, 255])
    })
}

fn check_identity(slide: &SlideRaster, grid: &PatchGrid, result: &SlideResult) -> Result<()> {
    let expected = build_grid(slide)?;
    if grid != &expected || result.slide_id != slide.slide_id {
        return Err(Error::Identity(format!(
            "render inputs disagree: slide {} ({}x{}), grid {} ({}x{}), result {}",
            slide.slide_id,
            slide.width(),
            slide.height(),
            grid.slide_id,
            grid.cols,
            grid.rows,
            result.slide_id
        )));
    }
    if let Some(&(x, y)) = result.roi_patches.iter().find(|&&(x, y)| !grid.contains(x, y)) {
        return Err(Error::Identity(format!("ROI patch ({x}, {y}) is off the grid")));
    }
    Ok(())
}

/// Non-ROI pixels blended with the mask color; ROI pixels untouched.
pub fn render_overlay(slide: &SlideRaster, grid: &PatchGrid, roi: &BTreeSet<(u32, u32)>, spec: &RenderSpec) -> RgbaImage {
    let s = grid.patch_size;
    let mut img = base_image(slide);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (gx, gy) = (x / s, y / s);
        if grid.contains(gx, gy) && roi.contains(&(gx, gy)) {
            continue;
        }
        let [r, g, b] = blend([px[0], px[1], px[2]], spec.overlay_mask_color, spec.overlay_alpha);
        *px = Rgba([r, g, b, 255]);
    }
    img
}

/// Scored patches filled with the colormap of the ranking-class score,
/// min-max scaled over the slide; a flat range maps to the middle.
pub fn render_heatmap(slide: &SlideRaster, grid: &PatchGrid, result: &SlideResult, records: &[PatchRecord]) -> RgbaImage {
    let class = result.predicted_label.patch_class();
    let scored: Vec<((u32, u32), f64)> = records
        .iter()
        .filter(|r| r.tissue && grid.contains(r.grid_x, r.grid_y))
        .filter_map(|r| r.scores.map(|s| (r.pos(), s.get(class))))
        .collect();
    let lo = scored.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let mut img = base_image(slide);
    let s = grid.patch_size;
    for ((gx, gy), v) in scored {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let [r, g, b] = colormap(t);
        for y in gy * s..(gy + 1) * s {
            for x in gx * s..(gx + 1) * s {
                img.put_pixel(x, y, Rgba([r, g, b, 255]));
            }
        }
    }
    img
}

/// Original image with the largest ROI cluster's contour stroked on top.
pub fn render_boundary(slide: &SlideRaster, grid: &PatchGrid, roi: &BTreeSet<(u32, u32)>, spec: &RenderSpec) -> Result<RgbaImage> {
    let mut img = base_image(slide);
    if roi.is_empty() {
        return Ok(img);
    }
    let cluster = largest_roi_cluster(roi, &spec.cluster)?;
    let contour = trace_boundary(&cluster, grid);
    let [r, g, b] = spec.boundary_color;
    let color = Rgba([r, g, b, 255]);
    // A lattice line at L is stroked over pixels L - ceil(w/2) ..= L + floor(w/2) - 1.
    let bw = i64::from(spec.boundary_width);
    let (before, after) = ((bw + 1) / 2, bw / 2 - 1);
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    for seg in contour.windows(2) {
        let (x0, x1) = (seg[0].0.min(seg[1].0), seg[0].0.max(seg[1].0));
        let (y0, y1) = (seg[0].1.min(seg[1].1), seg[0].1.max(seg[1].1));
        for y in (y0 - before).max(0)..=(y1 + after).min(h - 1) {
            for x in (x0 - before).max(0)..=(x1 + after).min(w - 1) {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
    Ok(img)
}

pub fn render(
    slide: &SlideRaster,
    grid: &PatchGrid,
    result: &SlideResult,
    records: &[PatchRecord],
    mode: RenderMode,
    spec: &RenderSpec,
) -> Result<RgbaImage> {
    spec.validate()?;
    check_identity(slide, grid, result)?;
    match mode {
        RenderMode::Overlay => Ok(render_overlay(slide, grid, &result.roi_patches, spec)),
        RenderMode::Heatmap => Ok(render_heatmap(slide, grid, result, records)),
        RenderMode::Boundary => render_boundary(slide, grid, &result.roi_patches, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScoreTriplet, SlideLabel};

    fn slide() -> SlideRaster {
        let (w, h) = (768u32, 512u32);
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[200, (x % 200) as u8, (y % 100) as u8 + 100]);
            }
        }
        SlideRaster::new("s", w, h, px, None).unwrap()
    }

    fn result(roi: &[(u32, u32)]) -> SlideResult {
        SlideResult {
            slide_id: "s".into(),
            predicted_label: SlideLabel::Melanoma,
            n_mel: 1,
            n_nev: 0,
            beta: 0.0,
            k: roi.len(),
            roi_patches: roi.iter().copied().collect(),
            iou: None,
            tie_flag: false,
        }
    }

    fn records(scores: impl Fn(u32, u32) -> f64) -> Vec<PatchRecord> {
        let mut out = Vec::new();
        for y in 0..2 {
            for x in 0..3 {
                let mut r = PatchRecord::new(x, y, true);
                let m = scores(x, y);
                r.scores = Some(ScoreTriplet::new(m, 1.0 - m, 0.0).unwrap());
                out.push(r);
            }
        }
        out
    }

    #[test]
    fn full_roi_overlay_is_original() {
        let s = slide();
        let g = build_grid(&s).unwrap();
        let all: Vec<_> = g.cells().collect();
        let img = render(&s, &g, &result(&all), &[], RenderMode::Overlay, &RenderSpec::default()).unwrap();
        assert_eq!(img, base_image(&s));
    }

    #[test]
    fn overlay_masks_exactly_the_non_roi_cells() {
        let s = slide();
        let g = build_grid(&s).unwrap();
        let roi = [(0, 0), (2, 0), (1, 1)];
        let img = render(&s, &g, &result(&roi), &[], RenderMode::Overlay, &RenderSpec::default()).unwrap();
        let base = base_image(&s);
        let changed = img.pixels().zip(base.pixels()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 3 * 256 * 256);
        for &(gx, gy) in &roi {
            assert_eq!(img.get_pixel(gx * 256 + 10, gy * 256 + 10), base.get_pixel(gx * 256 + 10, gy * 256 + 10));
        }
    }

    #[test]
    fn uniform_heatmap_is_one_color() {
        let s = slide();
        let g = build_grid(&s).unwrap();
        let img = render(&s, &g, &result(&[]), &records(|_, _| 0.4), RenderMode::Heatmap, &RenderSpec::default()).unwrap();
        let mid = colormap(0.5);
        assert!(img.pixels().all(|p| p.0 == [mid[0], mid[1], mid[2], 255]));
    }

    #[test]
    fn heatmap_spans_blue_to_red() {
        let s = slide();
        let g = build_grid(&s).unwrap();
        let recs = records(|x, y| f64::from(x + 3 * y) / 5.0);
        let img = render(&s, &g, &result(&[]), &recs, RenderMode::Heatmap, &RenderSpec::default()).unwrap();
        assert_eq!(img.get_pixel(5, 5).0, [0, 0, 255, 255]);
        assert_eq!(img.get_pixel(600, 300).0, [255, 0, 0, 255]);
    }

    #[test]
    fn boundary_strokes_the_cluster_outline() {
        let s = slide();
        let g = build_grid(&s).unwrap();
        let img = render(&s, &g, &result(&[(1, 0)]), &[], RenderMode::Boundary, &RenderSpec::default()).unwrap();
        let green = Rgba([0, 255, 0, 255]);
        assert_eq!(*img.get_pixel(256, 100), green);
        assert_eq!(*img.get_pixel(255, 100), green);
        assert_eq!(*img.get_pixel(300, 256), green);
        assert_ne!(*img.get_pixel(384, 128), green);
        assert_ne!(*img.get_pixel(100, 400), green);
    }

    #[test]
    fn mismatched_inputs_are_identity_errors() {
        let s = slide();
        let g = build_grid(&s).unwrap();
        let mut r = result(&[]);
        r.slide_id = "other".into();
        assert!(matches!(render(&s, &g, &r, &[], RenderMode::Overlay, &RenderSpec::default()), Err(Error::Identity(_))));
        let mut g2 = g.clone();
        g2.cols = 9;
        assert!(matches!(
            render(&s, &g2, &result(&[]), &[], RenderMode::Overlay, &RenderSpec::default()),
            Err(Error::Identity(_))
        ));
    }
}
