//! Dense and 3×3-convolution primitives with hand-written backward passes.
//!
//! Spatial activations are stored channels-last as a matrix whose rows are
//! `(sample, y, x)` in row-major order and whose columns are channels, so a
//! convolution is an im2col gather followed by one matrix product.

use ndarray::{s, Array2, Axis, NdFloat};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::Rng;

#[inline]
pub(crate) fn cast<F: NdFloat>(v: f64) -> F {
    F::from(v).unwrap()
}

/// Spatial extent of a channels-last activation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Grid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn per_sample(&self) -> usize {
        self.height * self.width
    }

    pub fn half(&self) -> Grid {
        Grid { batch: self.batch, height: self.height / 2, width: self.width / 2 }
    }
}

pub(crate) fn he_init<F: NdFloat>(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Array2<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || cast(std * rng.sample::<f64, _>(StandardNormal)))
}

/// `x · w + b` with `b` a 1×C row.
pub(crate) fn linear<F: NdFloat>(x: &Array2<F>, w: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Returns `(dx, dw, db)` for `y = x · w + b`.
pub(crate) fn linear_backward<F: NdFloat>(
    x: &Array2<F>,
    w: &Array2<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dw, db)
}

pub(crate) fn silu<F: NdFloat>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| v / (F::one() + (-v).exp()))
}

pub(crate) fn silu_backward<F: NdFloat>(pre: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(pre).for_each(|d, &v| {
        let s = F::one() / (F::one() + (-v).exp());
        *d = *d * (s + v * s * (F::one() - s));
    });
    dx
}

/// Gather 3×3 zero-padded neighbourhoods: output column block `o` holds the
/// input channels at offset `o = (dy + 1) * 3 + (dx + 1)`.
pub(crate) fn im2col<F: NdFloat>(x: &Array2<F>, g: Grid) -> Array2<F> {
    let c = x.ncols();
    let mut col = Array2::<F>::zeros((g.rows(), 9 * c));
    for b in 0..g.batch {
        let base = b * g.per_sample();
        for y in 0..g.height {
            for xx in 0..g.width {
                let row = base + y * g.width + xx;
                let mut dst = col.row_mut(row);
                for oy in 0..3 {
                    let sy = y as isize + oy as isize - 1;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..3 {
                        let sx = xx as isize + ox as isize - 1;
                        if sx < 0 || sx >= g.width as isize {
                            continue;
                        }
                        let src = base + sy as usize * g.width + sx as usize;
                        let o = oy * 3 + ox;
                        dst.slice_mut(s![o * c..(o + 1) * c]).assign(&x.row(src));
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add column blocks back onto their sources.
pub(crate) fn col2im<F: NdFloat>(dcol: &Array2<F>, g: Grid, c: usize) -> Array2<F> {
    let mut dx = Array2::<F>::zeros((g.rows(), c));
    for b in 0..g.batch {
        let base = b * g.per_sample();
        for y in 0..g.height {
            for xx in 0..g.width {
                let row = dcol.row(base + y * g.width + xx);
                for oy in 0..3 {
                    let sy = y as isize + oy as isize - 1;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..3 {
                        let sx = xx as isize + ox as isize - 1;
                        if sx < 0 || sx >= g.width as isize {
                            continue;
                        }
                        let src = base + sy as usize * g.width + sx as usize;
                        let o = oy * 3 + ox;
                        let mut d = dx.row_mut(src);
                        d += &row.slice(s![o * c..(o + 1) * c]);
                    }
                }
            }
        }
    }
    dx
}

/// 2×2 average pooling (height and width must be even).
pub(crate) fn avg_pool2<F: NdFloat>(x: &Array2<F>, g: Grid) -> Array2<F> {
    let h = g.half();
    let quarter: F = cast(0.25);
    let mut out = Array2::<F>::zeros((h.rows(), x.ncols()));
    for b in 0..g.batch {
        for y in 0..h.height {
            for xx in 0..h.width {
                let mut dst = out.row_mut(b * h.per_sample() + y * h.width + xx);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = b * g.per_sample() + (2 * y + dy) * g.width + 2 * xx + dx;
                    dst.scaled_add(quarter, &x.row(src));
                }
            }
        }
    }
    out
}

/// Gradient of [`avg_pool2`]; `g` is the full-resolution grid.
pub(crate) fn avg_pool2_backward<F: NdFloat>(dy: &Array2<F>, g: Grid) -> Array2<F> {
    let h = g.half();
    let quarter: F = cast(0.25);
    let mut dx = Array2::<F>::zeros((g.rows(), dy.ncols()));
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let src = b * h.per_sample() + (y / 2) * h.width + xx / 2;
                dx.row_mut(b * g.per_sample() + y * g.width + xx)
                    .scaled_add(quarter, &dy.row(src));
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling; `g` is the full-resolution grid.
pub(crate) fn upsample2<F: NdFloat>(x: &Array2<F>, g: Grid) -> Array2<F> {
    let h = g.half();
    let mut out = Array2::<F>::zeros((g.rows(), x.ncols()));
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let src = b * h.per_sample() + (y / 2) * h.width + xx / 2;
                out.row_mut(b * g.per_sample() + y * g.width + xx).assign(&x.row(src));
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]; `g` is the full-resolution grid.
pub(crate) fn upsample2_backward<F: NdFloat>(dy: &Array2<F>, g: Grid) -> Array2<F> {
    let h = g.half();
    let mut dx = Array2::<F>::zeros((h.rows(), dy.ncols()));
    for b in 0..g.batch {
        for y in 0..g.height {
            for xx in 0..g.width {
                let dst = b * h.per_sample() + (y / 2) * h.width + xx / 2;
                let mut d = dx.row_mut(dst);
                d += &dy.row(b * g.per_sample() + y * g.width + xx);
            }
        }
    }
    dx
}

/// Add per-sample row vectors `e` (batch × C) to every spatial row.
pub(crate) fn add_per_sample<F: NdFloat>(x: &mut Array2<F>, e: &Array2<F>, per_sample: usize) {
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        row += &e.row(r / per_sample);
    }
}

pub(crate) fn sum_per_sample<F: NdFloat>(dy: &Array2<F>, batch: usize, per_sample: usize) -> Array2<F> {
    let mut out = Array2::<F>::zeros((batch, dy.ncols()));
    for (r, row) in dy.rows().into_iter().enumerate() {
        let mut o = out.row_mut(r / per_sample);
        o += &row;
    }
    out
}

pub(crate) fn concat_cols<F: NdFloat>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).unwrap()
}

/// Sinusoidal step features: `[sin(k f_i), cos(k f_i)]` with
/// `f_i = 1000^(-i / (dim / 2))`.
pub(crate) fn step_features<F: NdFloat>(steps: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    Array2::from_shape_fn((steps.len(), dim), |(r, c)| {
        let i = c % half;
        let f = (-(1000f64).ln() * i as f64 / half as f64).exp();
        let a = steps[r] as f64 * f;
        cast(if c < half { a.sin() } else { a.cos() })
    })
}

/// Adam state over a list of parameter matrices.
#[derive(Debug, Clone)]
pub(crate) struct Adam<F: NdFloat> {
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(params: &[Array2<F>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self { m: zeros(), v: zeros(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [Array2<F>], grads: &[Array2<F>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (fb1, fb2) = (cast::<F>(b1), cast::<F>(b2));
        let step: F = cast(lr / c1);
        let inv_c2: F = cast(1.0 / c2);
        let eps: F = cast(self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = fb1 * *m + (F::one() - fb1) * g;
                *v = fb2 * *v + (F::one() - fb2) * g * g;
                *p = *p - step * *m / ((*v * inv_c2).sqrt() + eps);
            });
        }
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub(crate) fn clip_global_norm<F: NdFloat>(grads: &mut [Array2<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s: F = cast(max_norm / norm);
        grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[]);
        he_init(r, c, 2, &mut rng)
    }

    /// <A x, y> = <x, A* y> for the linear spatial operators.
    fn adjoint_check(
        fwd: impl Fn(&Array2<f64>) -> Array2<f64>,
        bwd: impl Fn(&Array2<f64>) -> Array2<f64>,
        x_shape: (usize, usize),
        y_shape: (usize, usize),
    ) {
        let x = rand_mat(x_shape.0, x_shape.1, 1);
        let y = rand_mat(y_shape.0, y_shape.1, 2);
        let lhs = (&fwd(&x) * &y).sum();
        let rhs = (&x * &bwd(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn spatial_ops_are_adjoint_pairs() {
        let g = Grid { batch: 2, height: 4, width: 6 };
        adjoint_check(|x| im2col(x, g), |y| col2im(y, g, 3), (g.rows(), 3), (g.rows(), 27));
        adjoint_check(|x| avg_pool2(x, g), |y| avg_pool2_backward(y, g), (g.rows(), 3), (g.half().rows(), 3));
        adjoint_check(|x| upsample2(x, g), |y| upsample2_backward(y, g), (g.half().rows(), 3), (g.rows(), 3));
    }

    #[test]
    fn im2col_centre_block_is_identity() {
        let g = Grid { batch: 1, height: 3, width: 3 };
        let x = rand_mat(9, 2, 3);
        let col = im2col(&x, g);
        assert_eq!(col.slice(s![.., 8..10]), x);
        // top-left cell has no upper-left neighbour
        assert_eq!(col[[0, 0]], 0.0);
    }

    #[test]
    fn silu_gradient_matches_finite_difference() {
        let x = rand_mat(3, 4, 5);
        let dy = Array2::ones((3, 4));
        let g = silu_backward(&x, &dy);
        let h = 1e-6;
        for ((i, j), &gv) in g.indexed_iter() {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let fd = (silu(&xp).sum() - silu(&xm).sum()) / (2.0 * h);
            assert!((fd - gv).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = vec![Array2::from_elem((1, 2), 1.0f64)];
        let g = vec![Array2::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap()];
        let mut opt = Adam::new(&p);
        opt.step(&mut p, &g, 0.1);
        assert!((p[0][[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[0][[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Array2::from_elem((1, 4), 1.0f64)];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 2.0).abs() < 1e-12);
        assert!((g[0].iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    }
}
