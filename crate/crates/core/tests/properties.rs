use std::collections::BTreeSet;

use proptest::collection::{btree_set, vec};
use proptest::prelude::*;
use roidet_core::aggregate::{classify_slide, rank_patches, roi_size, select_roi, ScoredPatch};
use roidet_core::evaluate::patch_iou;
use roidet_core::model::{RgbPatch, ScoreTriplet, SlideLabel};
use roidet_core::preprocess::augment::standardize;
use roidet_core::preprocess::stain::{estimate_stains, normalize_patch, StainProfile};
use roidet_core::preprocess::tissue::{detect_tissue, TissueParams};
use roidet_core::rng::derive_seed;
use roidet_core::viz::contour::{shoelace_area, trace_cells};

fn cells(max: u32) -> impl Strategy<Value = BTreeSet<(u32, u32)>> {
    btree_set((0..max, 0..max), 0..60)
}

fn triplet() -> impl Strategy<Value = ScoreTriplet> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b, c)| {
        let s = a + b + c + 1e-9;
        ScoreTriplet::new(a / s, b / s, 1.0 - a / s - b / s).unwrap()
    })
}

fn scored(max_len: usize) -> impl Strategy<Value = Vec<ScoredPatch>> {
    btree_set((0u32..20, 0u32..20), 1..max_len).prop_flat_map(|pos| {
        let pos: Vec<_> = pos.into_iter().collect();
        vec(triplet(), pos.len()).prop_map(move |t| {
            pos.iter()
                .zip(t)
                .map(|(&(grid_x, grid_y), scores)| ScoredPatch { grid_x, grid_y, scores })
                .collect()
        })
    })
}

fn patch(size: usize) -> impl Strategy<Value = RgbPatch> {
    vec(any::<u8>(), size * size * 3).prop_map(move |d| RgbPatch::new(size, d).unwrap())
}

/// Dense enough for both pure stains to clear the OD floor.
fn stained_pixels() -> impl Strategy<Value = Vec<[f64; 2]>> {
    vec((0.0f64..1.5, 0.0f64..2.5).prop_map(|(h, e)| [h, e]), 2000..2500)
}

/// Moderate densities; near-black pixels lose too much to 8-bit rounding.
fn moderate_pixels(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    vec((0.0f64..1.2, 0.0f64..1.2).prop_map(|(h, e)| [h, e]), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in cells(12), b in cells(12)) {
        let ab = patch_iou(&a, &b);
        prop_assert_eq!(ab, patch_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        if !a.is_empty() {
            prop_assert_eq!(patch_iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn roi_grows_with_beta(p in scored(80), b1 in 0.0f64..=1.0, b2 in 0.0f64..=1.0) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let ranked = rank_patches(&p, SlideLabel::Melanoma);
        let small = select_roi(&ranked, lo).unwrap();
        let large = select_roi(&ranked, hi).unwrap();
        prop_assert!(small.is_subset(&large));
        prop_assert_eq!(small.len(), roi_size(p.len(), lo));
    }

    #[test]
    fn vote_ignores_patch_order(p in scored(60), seed in any::<u64>()) {
        let mut shuffled = p.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (derive_seed(seed, &[&i.to_string()]) % (i as u64 + 1)) as usize);
        }
        prop_assert_eq!(classify_slide(&p).unwrap(), classify_slide(&shuffled).unwrap());
        for label in [SlideLabel::Melanoma, SlideLabel::Nevus] {
            prop_assert_eq!(rank_patches(&p, label), rank_patches(&shuffled, label));
        }
    }

    #[test]
    fn ranking_survives_monotone_rescaling(p in scored(60), k in 0.05f64..1.0) {
        let squeezed: Vec<_> = p
            .iter()
            .map(|s| {
                let m = s.scores.s_mel * k;
                let rest = 1.0 - m;
                let other = s.scores.s_nev + s.scores.s_other;
                let nev = if other > 0.0 { rest * s.scores.s_nev / other } else { rest / 2.0 };
                ScoredPatch { scores: ScoreTriplet::new(m, nev, (rest - nev).max(0.0)).unwrap(), ..*s }
            })
            .collect();
        let pos = |v: Vec<ScoredPatch>| v.iter().map(ScoredPatch::pos).collect::<Vec<_>>();
        let a = pos(rank_patches(&p, SlideLabel::Melanoma));
        let b = pos(rank_patches(&squeezed, SlideLabel::Melanoma));
        // Strictly increasing rescale keeps the order unless it merges two
        // values in floating point; equal inputs then stay tie-broken alike.
        let distinct: BTreeSet<u64> = p.iter().map(|s| (s.scores.s_mel * k).to_bits()).collect();
        prop_assume!(distinct.len() == p.len());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn contour_area_matches_cell_count(c in btree_set((0u32..8, 0u32..8), 1..30)) {
        // Keep the 4-connected component of the first cell so the mask is one piece.
        let start = *c.iter().next().unwrap();
        let mut comp = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some((x, y)) = stack.pop() {
            for n in [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)] {
                if c.contains(&n) && comp.insert(n) {
                    stack.push(n);
                }
            }
        }
        let holes = (0..10u32).flat_map(|y| (0..10u32).map(move |x| (x, y))).any(|(x, y)| {
            !comp.contains(&(x, y)) && {
                // A hole is an empty cell not reachable from outside the 8×8 box.
                let mut seen = BTreeSet::from([(x, y)]);
                let mut st = vec![(x as i64, y as i64)];
                let mut escaped = false;
                while let Some((px, py)) = st.pop() {
                    if !(0..8).contains(&px) || !(0..8).contains(&py) {
                        escaped = true;
                        break;
                    }
                    for (nx, ny) in [(px - 1, py), (px + 1, py), (px, py - 1), (px, py + 1)] {
                        let inside = (0..8).contains(&nx) && (0..8).contains(&ny);
                        let filled = inside && comp.contains(&(nx as u32, ny as u32));
                        if !filled && seen.insert((nx as u32, ny as u32)) {
                            st.push((nx, ny));
                        }
                    }
                }
                !escaped
            }
        });
        prop_assume!(!holes);
        let contour = trace_cells(&comp);
        prop_assert_eq!(contour.first(), contour.last());
        prop_assert_eq!(shoelace_area(&contour).abs(), comp.len() as i64);
    }

    #[test]
    fn tissue_detection_ignores_hflip(p in patch(16)) {
        let params = TissueParams::default();
        prop_assert_eq!(detect_tissue(&p, &params), detect_tissue(&p.hflip(), &params));
    }

    #[test]
    fn standardizing_with_own_statistics_is_unit_scaled(p in patch(16)) {
        let n = (p.size() * p.size()) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let vals: Vec<f64> = p.pixels().map(|px| f64::from(px[c]) / 255.0).collect();
            mean[c] = vals.iter().sum::<f64>() / n;
            std[c] = (vals.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
        }
        prop_assume!(std.iter().all(|s| *s > 1e-3));
        let t = standardize(&p, mean, std);
        for c in 0..3 {
            let vals: Vec<f64> = t.data.iter().skip(c).step_by(3).map(|v| f64::from(*v)).collect();
            let m = vals.iter().sum::<f64>() / n;
            let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-6, "channel {} mean {}", c, m);
            prop_assert!((s - 1.0).abs() < 1e-6, "channel {} std {}", c, s);
        }
    }

    #[test]
    fn estimated_stains_are_unit_nonnegative_hematoxylin_first(conc in stained_pixels()) {
        let r = StainProfile::reference();
        let px: Vec<[u8; 3]> = conc.iter().map(|&c| r.render_pixel(c)).collect();
        let est = estimate_stains(&px).unwrap();
        for v in [est.hematoxylin(), est.eosin()] {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
            prop_assert!(v.iter().all(|x| *x >= 0.0));
        }
        prop_assert!(est.hematoxylin()[2] >= est.eosin()[2]);
    }

    #[test]
    fn normalization_is_idempotent(conc in moderate_pixels(1600), shift in -0.05f64..0.05) {
        let r = StainProfile::reference();
        let h = r.hematoxylin();
        let src = StainProfile::new([h[0] + shift, h[1] - shift, h[2]], r.eosin(), [1.6, 1.1]).unwrap();
        let size = 40;
        let p = RgbPatch::from_fn(size, |x, y| src.render_pixel(conc[y * size + x]));
        let once = normalize_patch(&p, &src, &r).unwrap();
        let twice = normalize_patch(&once, &r, &r).unwrap();
        let worst = once.data().iter().zip(twice.data()).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
        prop_assert!(worst <= 2, "max channel change {}", worst);
    }

    #[test]
    fn seed_derivation_is_stable_and_path_sensitive(base in any::<u64>(), a in "[a-z]{1,6}", b in "[a-z]{1,6}") {
        prop_assert_eq!(derive_seed(base, &[&a, &b]), derive_seed(base, &[&a, &b]));
        if a != b {
            prop_assert_ne!(derive_seed(base, &[&a]), derive_seed(base, &[&b]));
        }
    }
}
