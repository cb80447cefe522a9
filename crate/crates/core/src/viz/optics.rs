//! OPTICS ordering and reachability-threshold cluster extraction.
//!
//! Core distance counts the point itself, so with `min_pts = 2` a point is
//! core iff some other point lies within `eps`. Seeds are popped by
//! `(reachability, index)`; a new component starts at the lowest unprocessed
//! index.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityPlot {
    /// Point indices in processing order.
    pub ordering: Vec<usize>,
    /// Reachability at each ordering position; `None` starts a component.
    pub reachability: Vec<Option<f64>>,
    /// Per point, indexed like the input.
    pub core_distances: Vec<Option<f64>>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Neighbors within `eps` (excluding the point) with their distances.
fn neighborhoods(points: &[(f64, f64)], eps: f64) -> Vec<Vec<(usize, f64)>> {
    let n = points.len();
    let mut out = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(points[i], points[j]);
            if d <= eps {
                out[i].push((j, d));
                out[j].push((i, d));
            }
        }
    }
    out
}

/// Distance to the `min_pts`-th point of the neighborhood, self included.
pub fn core_distance(neighbors: &[(usize, f64)], min_pts: usize) -> Option<f64> {
    if neighbors.len() + 1 < min_pts {
        return None;
    }
    let mut d: Vec<f64> = neighbors.iter().map(|&(_, d)| d).collect();
    d.sort_by(f64::total_cmp);
    Some(if min_pts <= 1 { 0.0 } else { d[min_pts - 2] })
}

fn check_params(n: usize, min_pts: usize, eps: f64) -> Result<()> {
    if min_pts < 2 {
        return Err(Error::Config(format!("min_pts {min_pts} must be at least 2")));
    }
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("eps {eps} must be positive")));
    }
    if n < min_pts {
        return Err(Error::SingleClusterFallback { points: n, min_pts });
    }
    Ok(())
}

pub fn optics_order(points: &[(f64, f64)], min_pts: usize, eps: f64) -> Result<ReachabilityPlot> {
    check_params(points.len(), min_pts, eps)?;
    let n = points.len();
    let nbrs = neighborhoods(points, eps);
    let core: Vec<Option<f64>> = nbrs.iter().map(|nb| core_distance(nb, min_pts)).collect();

    let mut processed = vec![false; n];
    let mut reach: Vec<Option<f64>> = vec![None; n];
    let mut ordering = Vec::with_capacity(n);
    let mut ordered_reach = Vec::with_capacity(n);
    // Reachabilities are nonnegative, so their bit patterns sort like the values.
    let mut seeds: BTreeSet<(u64, usize)> = BTreeSet::new();

    let expand = |p: usize,
                      processed: &[bool],
                      reach: &mut Vec<Option<f64>>,
                      seeds: &mut BTreeSet<(u64, usize)>| {
        let Some(cd) = core[p] else { return };
        for &(q, d) in &nbrs[p] {
            if processed[q] {
                continue;
            }
            let r = cd.max(d);
            match reach[q] {
                None => {
                    reach[q] = Some(r);
                    seeds.insert((r.to_bits(), q));
                }
                Some(old) if r < old => {
                    seeds.remove(&(old.to_bits(), q));
                    reach[q] = Some(r);
                    seeds.insert((r.to_bits(), q));
                }
                _ => {}
            }
        }
    };

    for start in 0..n {
        if processed[start] {
            continue;
        }
        processed[start] = true;
        ordering.push(start);
        ordered_reach.push(None);
        expand(start, &processed, &mut reach, &mut seeds);
        while let Some((bits, q)) = seeds.pop_first() {
            processed[q] = true;
            ordering.push(q);
            ordered_reach.push(Some(f64::from_bits(bits)));
            expand(q, &processed, &mut reach, &mut seeds);
        }
    }
    Ok(ReachabilityPlot {
        ordering,
        reachability: ordered_reach,
        core_distances: core,
    })
}

/// Cluster label per input point (`None` is noise), by cutting the
/// reachability plot at `threshold`. Non-core points left as noise but
/// within `threshold` of a core point join the cluster of the earliest such
/// core point in the ordering.
pub fn extract_clusters(plot: &ReachabilityPlot, points: &[(f64, f64)], threshold: f64) -> Vec<Option<usize>> {
    let n = plot.ordering.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut current: Option<usize> = None;
    let mut next_id = 0;
    let is_core = |p: usize| plot.core_distances[p].is_some_and(|c| c <= threshold);
    for (pos, &p) in plot.ordering.iter().enumerate() {
        match plot.reachability[pos] {
            Some(r) if r <= threshold => labels[p] = current,
            _ => {
                if is_core(p) {
                    current = Some(next_id);
                    next_id += 1;
                    labels[p] = current;
                } else {
                    current = None;
                }
            }
        }
    }
    for &p in &plot.ordering {
        if labels[p].is_some() || is_core(p) {
            continue;
        }
        labels[p] = plot
            .ordering
            .iter()
            .find(|&&c| is_core(c) && labels[c].is_some() && dist(points[c], points[p]) <= threshold)
            .and_then(|&c| labels[c]);
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub min_pts: usize,
    /// Neighborhood radius in grid units.
    pub eps: f64,
    /// Reachability cut; defaults to `eps`.
    pub threshold: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            min_pts: 2,
            eps: 1.5,
            threshold: 1.5,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        check_params(usize::MAX, self.min_pts, self.eps)?;
        if !(self.threshold > 0.0 && self.threshold <= self.eps) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, eps = {}]",
                self.threshold, self.eps
            )));
        }
        Ok(())
    }
}

/// ROI cells in `(grid_y, grid_x)` order, with their grid coordinates as points.
pub fn roi_points(roi: &BTreeSet<(u32, u32)>) -> (Vec<(u32, u32)>, Vec<(f64, f64)>) {
    let mut cells: Vec<(u32, u32)> = roi.iter().copied().collect();
    cells.sort_by_key(|&(x, y)| (y, x));
    let points = cells.iter().map(|&(x, y)| (f64::from(x), f64::from(y))).collect();
    (cells, points)
}

/// The most populous cluster of ROI patches. Ties go to the cluster holding
/// the smallest `(grid_y, grid_x)`. With fewer than `min_pts` patches the
/// whole set is one cluster; if every patch is noise the first patch in
/// `(grid_y, grid_x)` order stands alone.
pub fn largest_roi_cluster(roi: &BTreeSet<(u32, u32)>, params: &ClusterParams) -> Result<BTreeSet<(u32, u32)>> {
    params.validate()?;
    let (cells, points) = roi_points(roi);
    let plot = match optics_order(&points, params.min_pts, params.eps) {
        Ok(p) => p,
        Err(Error::SingleClusterFallback { .. }) => return Ok(roi.clone()),
        Err(e) => return Err(e),
    };
    let labels = extract_clusters(&plot, &points, params.threshold);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            groups.entry(*c).or_default().push(i);
        }
    }
    // cells are sorted, so a group's first member is its smallest (grid_y, grid_x)
    let best = groups.values().max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b[0].cmp(&a[0])));
    Ok(match best {
        Some(members) => members.iter().map(|&i| cells[i]).collect(),
        None => cells.first().into_iter().copied().collect(),
    })
}
