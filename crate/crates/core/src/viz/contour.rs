//! Outer contour of a set of grid cells.
//!
//! Boundary edges are directed with the cell interior on the right (image
//! coordinates, y down). At a vertex shared by two diagonal cells the trace
//! turns left, which keeps diagonally touching cells inside one contour.

use std::collections::BTreeSet;

use crate::model::PatchGrid;

/// Headings in clockwise screen order: +x, +y, -x, -y.
const HEADINGS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

fn has(cells: &BTreeSet<(i64, i64)>, x: i64, y: i64) -> bool {
    cells.contains(&(x, y))
}

/// Whether the unit edge leaving vertex `(x, y)` along `heading` lies on the
/// boundary with the set on its right.
fn is_boundary_edge(cells: &BTreeSet<(i64, i64)>, (x, y): (i64, i64), heading: usize) -> bool {
    let (inside, outside) = match heading {
        0 => ((x, y), (x, y - 1)),
        1 => ((x - 1, y), (x, y)),
        2 => ((x - 1, y - 1), (x - 1, y)),
        _ => ((x, y - 1), (x - 1, y - 1)),
    };
    has(cells, inside.0, inside.1) && !has(cells, outside.0, outside.1)
}

/// Closed outer contour in grid-vertex units, first vertex repeated at the
/// end, collinear vertices removed. Empty input gives an empty contour.
pub fn trace_cells(subset: &BTreeSet<(u32, u32)>) -> Vec<(i64, i64)> {
    let cells: BTreeSet<(i64, i64)> = subset.iter().map(|&(x, y)| (i64::from(x), i64::from(y))).collect();
    let Some(&(sx, sy)) = cells.iter().min_by_key(|&&(x, y)| (y, x)) else {
        return Vec::new();
    };
    let start = (sx, sy);
    let mut path = vec![start];
    let mut at = start;
    let mut heading = 0;
    loop {
        // prefer left, then straight, then right
        heading = [3, 0, 1]
            .iter()
            .map(|t| (heading + t) % 4)
            .find(|&h| is_boundary_edge(&cells, at, h))
            .expect("boundary vertex without an outgoing edge");
        let (dx, dy) = HEADINGS[heading];
        at = (at.0 + dx, at.1 + dy);
        path.push(at);
        if at == start {
            break;
        }
    }
    simplify(&path)
}

/// Drop vertices lying on a straight run; keeps the path closed.
fn simplify(closed: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let ring = &closed[..closed.len() - 1];
    let n = ring.len();
    let mut out: Vec<(i64, i64)> = (0..n)
        .filter(|&i| {
            let (p, c, q) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
            (c.0 - p.0) * (q.1 - c.1) - (c.1 - p.1) * (q.0 - c.0) != 0
        })
        .map(|i| ring[i])
        .collect();
    out.push(out[0]);
    out
}

/// Outer contour of the subset's patch squares in pixel coordinates.
pub fn trace_boundary(subset: &BTreeSet<(u32, u32)>, grid: &PatchGrid) -> Vec<(i64, i64)> {
    let s = i64::from(grid.patch_size);
    trace_cells(subset).into_iter().map(|(x, y)| (x * s, y * s)).collect()
}

/// Signed shoelace area; positive for the orientation produced above.
pub fn shoelace_area(closed: &[(i64, i64)]) -> i64 {
    let twice: i64 = closed.windows(2).map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1).sum();
    twice / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PatchGrid {
        PatchGrid {
            slide_id: "s".into(),
            patch_size: 256,
            cols: 10,
            rows: 10,
        }
    }

    #[test]
    fn single_cell_is_a_square() {
        let c = trace_boundary(&[(0, 0)].into(), &grid());
        assert_eq!(c, vec![(0, 0), (256, 0), (256, 256), (0, 256), (0, 0)]);
    }

    #[test]
    fn horizontal_pair_merges() {
        let c = trace_boundary(&[(0, 0), (1, 0)].into(), &grid());
        assert_eq!(c, vec![(0, 0), (512, 0), (512, 256), (0, 256), (0, 0)]);
    }

    #[test]
    fn l_shape_area() {
        let s: BTreeSet<_> = [(2, 2), (2, 3), (3, 3)].into();
        let c = trace_boundary(&s, &grid());
        assert_eq!(shoelace_area(&c), 3 * 256 * 256);
        assert_eq!(c.len(), 7);
    }

    #[test]
    fn diagonal_cells_share_one_contour() {
        for s in [[(0, 0), (1, 1)], [(1, 0), (0, 1)]] {
            let s: BTreeSet<_> = s.into();
            let c = trace_cells(&s);
            assert_eq!(shoelace_area(&c), 2);
            assert_eq!(c.first(), c.last());
        }
    }

    #[test]
    fn hole_is_not_traced() {
        let ring: BTreeSet<(u32, u32)> = (0..3).flat_map(|y| (0..3).map(move |x| (x, y))).filter(|&c| c != (1, 1)).collect();
        assert_eq!(trace_cells(&ring), vec![(0, 0), (3, 0), (3, 3), (0, 3), (0, 0)]);
    }
}
