use super::GridMap;

/// Terrain slope in degrees at every cell.
///
/// Gradients use central differences in the interior and one-sided
/// differences on the border; diagonal neighbours do not contribute.
pub fn slope_map(map: &GridMap) -> Vec<f64> {
    let (w, h) = (map.width(), map.height());
    let res = map.resolution() as f64;
    let z = |x: usize, y: usize| map.terrain_at(x, y) as f64;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = (z(x1, y) - z(x0, y)) / ((x1 - x0) as f64 * res);
            let gy = (z(x, y1) - z(x, y0)) / ((y1 - y0) as f64 * res);
            out.push(gx.hypot(gy).atan().to_degrees());
        }
    }
    out
}
