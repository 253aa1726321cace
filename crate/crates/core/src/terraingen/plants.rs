//! Canopy segmentation into plant crowns and footprint rasterization.

use std::collections::{BTreeSet, VecDeque};

use crate::heightfield::GridMap;

/// Fraction of the apex height below which crown growth stops.
const STOP_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantCrown {
    /// `(x, y)` of the apex cell.
    pub apex: (usize, usize),
    /// Absolute canopy height at the apex, meters.
    pub height: f64,
    /// Canopy height above terrain at the apex, meters.
    pub relative_height: f64,
    /// Convex hull of the crown's cell centers, counter-clockwise.
    pub hull: Vec<(i64, i64)>,
    pub cells: usize,
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain. Collinear points are dropped; the result is
/// counter-clockwise without repetition.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Whether `p` lies inside or on the boundary of a counter-clockwise hull.
pub fn point_in_hull(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    match hull.len() {
        0 => false,
        1 => hull[0] == p,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            cross(a, b, p) == 0
                && p.0 >= a.0.min(b.0)
                && p.0 <= a.0.max(b.0)
                && p.1 >= a.1.min(b.1)
                && p.1 <= a.1.max(b.1)
        }
        n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
    }
}

fn neighbors(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i64..=1)
        .flat_map(|dy| (-1i64..=1).map(move |dx| (dx, dy)))
        .filter(|&d| d != (0, 0))
        .filter_map(move |(dx, dy)| {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h).then_some((nx as usize, ny as usize))
        })
}

/// Split the relative canopy into plant crowns grown from local maxima.
pub fn segment_canopy(map: &GridMap, min_height: f64, min_crown_cells: usize) -> Vec<PlantCrown> {
    let (w, h) = (map.width(), map.height());
    let rel: Vec<f64> = map
        .canopy()
        .iter()
        .zip(map.terrain())
        .map(|(&c, &t)| c as f64 - t as f64)
        .collect();

    let mut apexes: Vec<usize> = (0..w * h)
        .filter(|&i| {
            rel[i] > min_height
                && neighbors(i % w, i / w, w, h).all(|(nx, ny)| {
                    let j = ny * w + nx;
                    rel[i] > rel[j] || (rel[i] == rel[j] && i < j)
                })
        })
        .collect();
    apexes.sort_by(|&a, &b| rel[b].total_cmp(&rel[a]).then(a.cmp(&b)));

    let mut owner = vec![false; w * h];
    let mut crowns = Vec::new();
    for apex in apexes {
        if owner[apex] {
            continue;
        }
        let floor = STOP_FRACTION * rel[apex];
        let mut cells = vec![apex];
        owner[apex] = true;
        let mut queue = VecDeque::from([apex]);
        while let Some(c) = queue.pop_front() {
            for (nx, ny) in neighbors(c % w, c / w, w, h) {
                let j = ny * w + nx;
                if !owner[j] && rel[j] >= floor && rel[j] <= rel[c] {
                    owner[j] = true;
                    cells.push(j);
                    queue.push_back(j);
                }
            }
        }
        if cells.len() < min_crown_cells {
            continue;
        }
        let pts: Vec<(i64, i64)> = cells.iter().map(|&i| ((i % w) as i64, (i / w) as i64)).collect();
        crowns.push(PlantCrown {
            apex: (apex % w, apex / w),
            height: map.canopy()[apex] as f64,
            relative_height: rel[apex],
            hull: convex_hull(&pts),
            cells: cells.len(),
        });
    }
    crowns
}

/// Cells `(x, y)` whose centers fall inside any crown hull.
pub fn instantiate_plants(crowns: &[PlantCrown]) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for crown in crowns {
        let (x0, x1) = crown.hull.iter().fold((i64::MAX, i64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (y0, y1) = crown.hull.iter().fold((i64::MAX, i64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if point_in_hull(&crown.hull, (x, y)) {
                    out.insert((x as usize, y as usize));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_map(w: usize, h: usize, blobs: &[(f64, f64, f64, f64)], base: f32) -> GridMap {
        let terrain = vec![base; w * h];
        let canopy = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let top = blobs
                    .iter()
                    .map(|&(cx, cy, peak, s)| peak * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
                    .fold(0.0, f64::max);
                base + top as f32
            })
            .collect();
        GridMap::new(w, h, 0.5, terrain, canopy, 0).unwrap()
    }

    #[test]
    fn bare_map_has_no_crowns() {
        let m = GridMap::flat(16, 16, 0.5, 0).unwrap().offset(1.0);
        assert!(segment_canopy(&m, 0.5, 1).is_empty());
        assert!(instantiate_plants(&[]).is_empty());
    }

    #[test]
    fn single_blob_apex_is_argmax() {
        let m = blob_map(20, 20, &[(9.0, 11.0, 2.0, 2.0)], 0.0);
        let crowns = segment_canopy(&m, 0.5, 1);
        assert_eq!(crowns.len(), 1);
        let argmax = (0..400)
            .max_by(|&a, &b| m.canopy()[a].total_cmp(&m.canopy()[b]).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(crowns[0].apex, (argmax % 20, argmax / 20));
        assert_eq!(crowns[0].apex, (9, 11));
        assert!(point_in_hull(&crowns[0].hull, (9, 11)));
        assert!(crowns[0].height > m.terrain_at(9, 11) as f64);
    }

    fn segments_intersect(a: (i64, i64), b: (i64, i64), c: (i64, i64), d: (i64, i64)) -> bool {
        let o = |p: (i64, i64), q: (i64, i64), r: (i64, i64)| cross(p, q, r).signum();
        let on = |p: (i64, i64), q: (i64, i64), r: (i64, i64)| {
            r.0 >= p.0.min(q.0) && r.0 <= p.0.max(q.0) && r.1 >= p.1.min(q.1) && r.1 <= p.1.max(q.1)
        };
        let (o1, o2, o3, o4) = (o(a, b, c), o(a, b, d), o(c, d, a), o(c, d, b));
        (o1 != o2 && o3 != o4)
            || (o1 == 0 && on(a, b, c))
            || (o2 == 0 && on(a, b, d))
            || (o3 == 0 && on(c, d, a))
            || (o4 == 0 && on(c, d, b))
    }

    fn hulls_intersect(p: &[(i64, i64)], q: &[(i64, i64)]) -> bool {
        let edges = |h: &[(i64, i64)]| -> Vec<((i64, i64), (i64, i64))> {
            (0..h.len()).map(|i| (h[i], h[(i + 1) % h.len()])).collect()
        };
        for (a, b) in edges(p) {
            for (c, d) in edges(q) {
                if segments_intersect(a, b, c, d) {
                    return true;
                }
            }
        }
        p.iter().any(|&v| point_in_hull(q, v)) || q.iter().any(|&v| point_in_hull(p, v))
    }

    #[test]
    fn separated_blobs_have_disjoint_hulls() {
        let m = blob_map(32, 24, &[(7.0, 8.0, 2.0, 1.5), (24.0, 15.0, 1.5, 1.5)], 0.0);
        let crowns = segment_canopy(&m, 0.5, 1);
        assert_eq!(crowns.len(), 2);
        assert!(!hulls_intersect(&crowns[0].hull, &crowns[1].hull));
    }

    #[test]
    fn hull_of_square_with_interior() {
        let pts = [(0, 0), (2, 0), (2, 2), (0, 2), (1, 1), (1, 0)];
        assert_eq!(convex_hull(&pts), vec![(0, 0), (2, 0), (2, 2), (0, 2)]);
    }

    #[test]
    fn triangle_rasterization_matches_brute_force() {
        let hull = convex_hull(&[(1, 1), (9, 3), (4, 8)]);
        let crown = PlantCrown { apex: (4, 4), height: 2.0, relative_height: 2.0, hull: hull.clone(), cells: 3 };
        let got = instantiate_plants(&[crown]);
        // Independent oracle: barycentric sign test against the raw triangle.
        let (a, b, c) = ((1.0, 1.0), (9.0, 3.0), (4.0, 8.0));
        let side = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0);
        let mut want = BTreeSet::new();
        for y in 0..12usize {
            for x in 0..12usize {
                let p = (x as f64, y as f64);
                let (d1, d2, d3) = (side(a, b, p), side(b, c, p), side(c, a, p));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                if !(neg && pos) {
                    want.insert((x, y));
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn overlapping_crowns_union() {
        let a = PlantCrown { apex: (1, 1), height: 1.0, relative_height: 1.0, hull: convex_hull(&[(0, 0), (2, 0), (2, 2), (0, 2)]), cells: 9 };
        let b = PlantCrown { hull: convex_hull(&[(1, 1), (3, 1), (3, 3), (1, 3)]), ..a.clone() };
        assert_eq!(instantiate_plants(&[a, b]).len(), 9 + 9 - 4);
    }

    #[test]
    fn small_crowns_discarded() {
        let m = blob_map(16, 16, &[(8.0, 8.0, 2.0, 0.3)], 0.0);
        assert_eq!(segment_canopy(&m, 0.5, 1).len(), 1);
        assert!(segment_canopy(&m, 0.5, 2).is_empty());
    }

    #[test]
    fn crown_count_offset_invariant() {
        let m = blob_map(32, 32, &[(6.0, 6.0, 2.0, 1.5), (20.0, 9.0, 1.2, 2.0), (14.0, 25.0, 2.5, 1.0)], 0.0);
        let n = segment_canopy(&m, 0.5, 2).len();
        assert_eq!(n, 3);
        assert_eq!(segment_canopy(&m.offset(7.5), 0.5, 2).len(), n);
    }
}
