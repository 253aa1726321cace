//! Trainable ε-prediction network.
//!
//! Two architectures share one parameter list and training loop:
//! - `Dense`: two hidden layers over the flattened map, for small maps.
//! - `Conv`: a three-level convolutional encoder–decoder with skip
//!   connections, used when both sides are ≥ 32 and divisible by 4.
//!
//! The step k enters through sinusoidal features and a small MLP whose output
//! is projected and added to the pre-activations of the first block at every
//! encoder level, including the bottleneck.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, NdFloat};
use serde::{Deserialize, Serialize};

use super::net::{self, cast, Grid};
use super::{Denoiser, DiffusionError, LatentMap, NoiseSchedule};
use crate::heightfield::{normalize, MapDataset, LAYERS};
use crate::rng::{self, Rng};

const MAGIC: &[u8; 4] = b"EPSN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Dense,
    Conv,
}

/// Architecture descriptor; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub width: usize,
    pub height: usize,
    pub embed_dim: usize,
    /// `[hidden]` for dense, `[c1, c2, c3]` channel widths for conv.
    pub widths: Vec<usize>,
}

/// Layer-size hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetHyper {
    pub dense_hidden: usize,
    pub conv_widths: [usize; 3],
    pub embed_dim: usize,
    pub max_params: usize,
}

impl Default for NetHyper {
    fn default() -> Self {
        Self { dense_hidden: 256, conv_widths: [16, 32, 64], embed_dim: 32, max_params: 4_000_000 }
    }
}

impl ArchSpec {
    pub fn for_map(width: usize, height: usize, hyper: &NetHyper) -> Self {
        let conv = width >= 32 && height >= 32 && width % 4 == 0 && height % 4 == 0;
        if conv {
            Self {
                kind: ArchKind::Conv,
                width,
                height,
                embed_dim: hyper.embed_dim,
                widths: hyper.conv_widths.to_vec(),
            }
        } else {
            Self {
                kind: ArchKind::Dense,
                width,
                height,
                embed_dim: hyper.embed_dim,
                widths: vec![hyper.dense_hidden],
            }
        }
    }

    fn dim(&self) -> usize {
        LAYERS * self.width * self.height
    }

    /// Shapes of every parameter matrix, in storage order.
    fn param_shapes(&self) -> Vec<(usize, usize)> {
        let e = self.embed_dim;
        match self.kind {
            ArchKind::Dense => {
                let (d, h) = (self.dim(), self.widths[0]);
                vec![
                    (e, h), (1, h), (h, h), (1, h), // step embedding
                    (d, h), (1, h), (h, h), (1, h), // hidden 1 + projection
                    (h, h), (1, h), (h, h), (1, h), // hidden 2 + projection
                    (h, d), (1, d),                 // output
                ]
            }
            ArchKind::Conv => {
                let (c1, c2, c3) = (self.widths[0], self.widths[1], self.widths[2]);
                let t = c3;
                vec![
                    (e, t), (1, t), (t, t), (1, t),
                    (9 * LAYERS, c1), (1, c1), (t, c1), (1, c1),
                    (9 * c1, c1), (1, c1),
                    (9 * c1, c2), (1, c2), (t, c2), (1, c2),
                    (9 * c2, c2), (1, c2),
                    (9 * c2, c3), (1, c3), (t, c3), (1, c3),
                    (9 * c3, c3), (1, c3),
                    (9 * (c3 + c2), c2), (1, c2),
                    (9 * (c2 + c1), c1), (1, c1),
                    (9 * c1, LAYERS), (1, LAYERS),
                ]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::BadArch(m));
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad(format!("embedding dim {} must be even and >= 2", self.embed_dim));
        }
        match self.kind {
            ArchKind::Dense if self.widths.len() != 1 => bad("dense net takes one hidden width".into()),
            ArchKind::Conv if self.widths.len() != 3 => bad("conv net takes three channel widths".into()),
            ArchKind::Conv if self.width % 4 != 0 || self.height % 4 != 0 => {
                bad("conv net needs sides divisible by 4".into())
            }
            _ if self.widths.contains(&0) => bad("zero layer width".into()),
            _ => Ok(()),
        }
    }
}

// Parameter indices shared by both architectures.
const TE1: usize = 0;
const TE2: usize = 2;

/// ε-network generic over its float type; [`EpsNet`] is the f32 instance
/// used for training and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Net<F: NdFloat> {
    pub arch: ArchSpec,
    pub params: Vec<Array2<F>>,
}

pub type EpsNet = Net<f32>;

struct TembCache<F: NdFloat> {
    feats: Array2<F>,
    z1: Array2<F>,
    a1: Array2<F>,
    temb: Array2<F>,
}

impl<F: NdFloat> Net<F> {
    /// Random initialization; the output layer starts at zero so an untrained
    /// network predicts ε̂ = 0.
    pub fn init(arch: ArchSpec, rng: &mut Rng) -> Result<Self, DiffusionError> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        let last = shapes.len() - 2;
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                if r == 1 || i >= last {
                    Array2::zeros((r, c))
                } else {
                    net::he_init(r, c, r, rng)
                }
            })
            .collect();
        Ok(Self { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn p(&self, i: usize) -> &Array2<F> {
        &self.params[i]
    }

    fn grid(&self, batch: usize) -> Grid {
        Grid { batch, height: self.arch.height, width: self.arch.width }
    }

    /// Arrange layer-major samples as the network's input matrix.
    pub(crate) fn pack(&self, samples: &[&[f64]]) -> Array2<F> {
        let n = self.arch.width * self.arch.height;
        match self.arch.kind {
            ArchKind::Dense => Array2::from_shape_fn((samples.len(), LAYERS * n), |(b, j)| cast(samples[b][j])),
            ArchKind::Conv => {
                Array2::from_shape_fn((samples.len() * n, LAYERS), |(r, l)| cast(samples[r / n][l * n + r % n]))
            }
        }
    }

    /// Inverse of [`Net::pack`] for one sample.
    pub(crate) fn unpack(&self, out: &Array2<F>, b: usize) -> Vec<f64> {
        let n = self.arch.width * self.arch.height;
        match self.arch.kind {
            ArchKind::Dense => out.row(b).iter().map(|v| v.to_f64().unwrap()).collect(),
            ArchKind::Conv => (0..LAYERS * n)
                .map(|j| out[[b * n + j % n, j / n]].to_f64().unwrap())
                .collect(),
        }
    }

    fn temb(&self, steps: &[usize]) -> TembCache<F> {
        let feats = net::step_features(steps, self.arch.embed_dim);
        let z1 = net::linear(&feats, self.p(TE1), self.p(TE1 + 1));
        let a1 = net::silu(&z1);
        let temb = net::linear(&a1, self.p(TE2), self.p(TE2 + 1));
        TembCache { feats, z1, a1, temb }
    }

    fn temb_backward(&self, c: &TembCache<F>, dtemb: &Array2<F>, grads: &mut [Array2<F>]) {
        let (da1, dw2, db2) = net::linear_backward(&c.a1, self.p(TE2), dtemb);
        grads[TE2] = dw2;
        grads[TE2 + 1] = db2;
        let dz1 = net::silu_backward(&c.z1, &da1);
        let (_, dw1, db1) = net::linear_backward(&c.feats, self.p(TE1), &dz1);
        grads[TE1] = dw1;
        grads[TE1 + 1] = db1;
    }

    /// Predicted noise for a packed batch.
    pub fn forward(&self, x: &Array2<F>, steps: &[usize]) -> Array2<F> {
        self.forward_backward(x, steps, None).0
    }

    /// Mean squared error against `target` and its gradient with respect to
    /// every parameter.
    pub fn loss_and_grads(&self, x: &Array2<F>, steps: &[usize], target: &Array2<F>) -> (f64, Vec<Array2<F>>) {
        let (y, grads) = self.forward_backward(x, steps, Some(target));
        let diff = &y - target;
        let loss = diff.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>() / diff.len() as f64;
        (loss, grads.unwrap())
    }

    fn forward_backward(
        &self,
        x: &Array2<F>,
        steps: &[usize],
        target: Option<&Array2<F>>,
    ) -> (Array2<F>, Option<Vec<Array2<F>>>) {
        match self.arch.kind {
            ArchKind::Dense => self.dense_pass(x, steps, target),
            ArchKind::Conv => self.conv_pass(x, steps, target),
        }
    }

    fn mse_grad(y: &Array2<F>, target: &Array2<F>) -> Array2<F> {
        let scale: F = cast(2.0 / y.len() as f64);
        (y - target).mapv(|v| v * scale)
    }

    fn dense_pass(
        &self,
        x: &Array2<F>,
        steps: &[usize],
        target: Option<&Array2<F>>,
    ) -> (Array2<F>, Option<Vec<Array2<F>>>) {
        let tc = self.temb(steps);
        let pe1 = net::linear(&tc.temb, self.p(6), self.p(7));
        let pe2 = net::linear(&tc.temb, self.p(10), self.p(11));
        let z1 = net::linear(x, self.p(4), self.p(5)) + &pe1;
        let a1 = net::silu(&z1);
        let z2 = net::linear(&a1, self.p(8), self.p(9)) + &pe2;
        let a2 = net::silu(&z2);
        let y = net::linear(&a2, self.p(12), self.p(13));
        let Some(target) = target else {
            return (y, None);
        };
        let mut g: Vec<Array2<F>> = self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let dy = Self::mse_grad(&y, target);
        let (da2, dwo, dbo) = net::linear_backward(&a2, self.p(12), &dy);
        g[12] = dwo;
        g[13] = dbo;
        let dz2 = net::silu_backward(&z2, &da2);
        let (da1, dw2, db2) = net::linear_backward(&a1, self.p(8), &dz2);
        g[8] = dw2;
        g[9] = db2;
        let dz1 = net::silu_backward(&z1, &da1);
        let (_, dw1, db1) = net::linear_backward(x, self.p(4), &dz1);
        g[4] = dw1;
        g[5] = db1;
        let (dt2, dp2, dpb2) = net::linear_backward(&tc.temb, self.p(10), &dz2);
        let (dt1, dp1, dpb1) = net::linear_backward(&tc.temb, self.p(6), &dz1);
        g[10] = dp2;
        g[11] = dpb2;
        g[6] = dp1;
        g[7] = dpb1;
        self.temb_backward(&tc, &(dt1 + dt2), &mut g);
        (y, Some(g))
    }

    fn conv_pass(
        &self,
        x: &Array2<F>,
        steps: &[usize],
        target: Option<&Array2<F>>,
    ) -> (Array2<F>, Option<Vec<Array2<F>>>) {
        let batch = steps.len();
        let g1 = self.grid(batch);
        let g2 = g1.half();
        let g3 = g2.half();
        let (c1, c2, c3) = (self.arch.widths[0], self.arch.widths[1], self.arch.widths[2]);
        let tc = self.temb(steps);
        let pe1 = net::linear(&tc.temb, self.p(6), self.p(7));
        let pe2 = net::linear(&tc.temb, self.p(12), self.p(13));
        let pe3 = net::linear(&tc.temb, self.p(18), self.p(19));

        // encoder level 1
        let col_e1a = net::im2col(x, g1);
        let mut z_e1a = net::linear(&col_e1a, self.p(4), self.p(5));
        net::add_per_sample(&mut z_e1a, &pe1, g1.per_sample());
        let h1a = net::silu(&z_e1a);
        let col_e1b = net::im2col(&h1a, g1);
        let z_e1b = net::linear(&col_e1b, self.p(8), self.p(9));
        let s1 = net::silu(&z_e1b);
        // encoder level 2
        let q1 = net::avg_pool2(&s1, g1);
        let col_e2a = net::im2col(&q1, g2);
        let mut z_e2a = net::linear(&col_e2a, self.p(10), self.p(11));
        net::add_per_sample(&mut z_e2a, &pe2, g2.per_sample());
        let h2a = net::silu(&z_e2a);
        let col_e2b = net::im2col(&h2a, g2);
        let z_e2b = net::linear(&col_e2b, self.p(14), self.p(15));
        let s2 = net::silu(&z_e2b);
        // bottleneck
        let q2 = net::avg_pool2(&s2, g2);
        let col_m1 = net::im2col(&q2, g3);
        let mut z_m1 = net::linear(&col_m1, self.p(16), self.p(17));
        net::add_per_sample(&mut z_m1, &pe3, g3.per_sample());
        let hm1 = net::silu(&z_m1);
        let col_m2 = net::im2col(&hm1, g3);
        let z_m2 = net::linear(&col_m2, self.p(20), self.p(21));
        let m = net::silu(&z_m2);
        // decoder
        let cat2 = net::concat_cols(&net::upsample2(&m, g2), &s2);
        let col_d2 = net::im2col(&cat2, g2);
        let z_d2 = net::linear(&col_d2, self.p(22), self.p(23));
        let d2 = net::silu(&z_d2);
        let cat1 = net::concat_cols(&net::upsample2(&d2, g1), &s1);
        let col_d1 = net::im2col(&cat1, g1);
        let z_d1 = net::linear(&col_d1, self.p(24), self.p(25));
        let d1 = net::silu(&z_d1);
        let col_out = net::im2col(&d1, g1);
        let y = net::linear(&col_out, self.p(26), self.p(27));

        let Some(target) = target else {
            return (y, None);
        };
        let mut g: Vec<Array2<F>> = self.params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        let dy = Self::mse_grad(&y, target);

        let (dcol, dw, db) = net::linear_backward(&col_out, self.p(26), &dy);
        (g[26], g[27]) = (dw, db);
        let dd1 = net::col2im(&dcol, g1, c1);

        let dz = net::silu_backward(&z_d1, &dd1);
        let (dcol, dw, db) = net::linear_backward(&col_d1, self.p(24), &dz);
        (g[24], g[25]) = (dw, db);
        let dcat1 = net::col2im(&dcol, g1, c2 + c1);
        let dd2 = net::upsample2_backward(&dcat1.slice(s![.., ..c2]).to_owned(), g1);
        let mut ds1 = dcat1.slice(s![.., c2..]).to_owned();

        let dz = net::silu_backward(&z_d2, &dd2);
        let (dcol, dw, db) = net::linear_backward(&col_d2, self.p(22), &dz);
        (g[22], g[23]) = (dw, db);
        let dcat2 = net::col2im(&dcol, g2, c3 + c2);
        let dm = net::upsample2_backward(&dcat2.slice(s![.., ..c3]).to_owned(), g2);
        let mut ds2 = dcat2.slice(s![.., c3..]).to_owned();

        let dz = net::silu_backward(&z_m2, &dm);
        let (dcol, dw, db) = net::linear_backward(&col_m2, self.p(20), &dz);
        (g[20], g[21]) = (dw, db);
        let dhm1 = net::col2im(&dcol, g3, c3);
        let dz = net::silu_backward(&z_m1, &dhm1);
        let dpe3 = net::sum_per_sample(&dz, batch, g3.per_sample());
        let (dcol, dw, db) = net::linear_backward(&col_m1, self.p(16), &dz);
        (g[16], g[17]) = (dw, db);
        ds2 += &net::avg_pool2_backward(&net::col2im(&dcol, g3, c2), g2);

        let dz = net::silu_backward(&z_e2b, &ds2);
        let (dcol, dw, db) = net::linear_backward(&col_e2b, self.p(14), &dz);
        (g[14], g[15]) = (dw, db);
        let dh2a = net::col2im(&dcol, g2, c2);
        let dz = net::silu_backward(&z_e2a, &dh2a);
        let dpe2 = net::sum_per_sample(&dz, batch, g2.per_sample());
        let (dcol, dw, db) = net::linear_backward(&col_e2a, self.p(10), &dz);
        (g[10], g[11]) = (dw, db);
        ds1 += &net::avg_pool2_backward(&net::col2im(&dcol, g2, c1), g1);

        let dz = net::silu_backward(&z_e1b, &ds1);
        let (dcol, dw, db) = net::linear_backward(&col_e1b, self.p(8), &dz);
        (g[8], g[9]) = (dw, db);
        let dh1a = net::col2im(&dcol, g1, c1);
        let dz = net::silu_backward(&z_e1a, &dh1a);
        let dpe1 = net::sum_per_sample(&dz, batch, g1.per_sample());
        let (_, dw, db) = net::linear_backward(&col_e1a, self.p(4), &dz);
        (g[4], g[5]) = (dw, db);

        let mut dtemb = Array2::zeros(tc.temb.raw_dim());
        for (dpe, wi) in [(&dpe1, 6), (&dpe2, 12), (&dpe3, 18)] {
            let (dt, dw, db) = net::linear_backward(&tc.temb, self.p(wi), dpe);
            dtemb += &dt;
            (g[wi], g[wi + 1]) = (dw, db);
        }
        self.temb_backward(&tc, &dtemb, &mut g);
        (y, Some(g))
    }
}

impl Denoiser for EpsNet {
    fn predict_eps(&self, latent: &LatentMap, k: usize) -> Vec<f64> {
        let x = self.pack(&[&latent.data]);
        let y = self.forward(&x, &[k]);
        self.unpack(&y, 0)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate to 10% over the run.
    pub cosine_decay: bool,
    pub grad_clip: f64,
    pub heldout_fraction: f64,
    /// Noise draws per held-out map when measuring held-out loss.
    pub eval_draws: usize,
    pub net: NetHyper,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            cosine_decay: true,
            grad_clip: 1.0,
            heldout_fraction: 0.1,
            eval_draws: 8,
            net: NetHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean training loss over the final 10% of steps.
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub initial_heldout_loss: f64,
    pub train_maps: usize,
    pub heldout_maps: usize,
}

/// Mean ε-MSE of `net` over `maps`, with `(k, ε)` drawn from `rng`.
pub fn eps_mse(net: &EpsNet, maps: &[Vec<f64>], schedule: &NoiseSchedule, draws: usize, rng: &mut Rng) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in maps.chunks(16) {
        for _ in 0..draws {
            let (x, steps, eps) = noised_batch(chunk.iter().map(|m| m.as_slice()), schedule, rng);
            let xs: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).collect();
            let out = net.forward(&net.pack(&xs), &steps);
            for (b, e) in eps.iter().enumerate() {
                let pred = net.unpack(&out, b);
                total += pred.iter().zip(e).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
                count += e.len();
            }
        }
    }
    total / count.max(1) as f64
}

fn noised_batch<'a>(
    maps: impl Iterator<Item = &'a [f64]>,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
    use rand::Rng as _;
    let (mut xs, mut ks, mut es) = (Vec::new(), Vec::new(), Vec::new());
    for e0 in maps {
        let k = rng.random_range(1..=schedule.steps());
        let eps = super::standard_normal(rng, e0.len());
        let ab = schedule.alpha_bar(k);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        xs.push(e0.iter().zip(&eps).map(|(x, n)| a * x + b * n).collect());
        ks.push(k);
        es.push(eps);
    }
    (xs, ks, es)
}

/// Fit an [`EpsNet`] to the normalized maps of `dataset` with the standard
/// ε-MSE objective and uniformly sampled steps.
pub fn train_eps_net(
    dataset: &MapDataset,
    schedule: &NoiseSchedule,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(EpsNet, TrainReport), DiffusionError> {
    use rand::seq::SliceRandom;

    let first = dataset.records().first().ok_or(DiffusionError::EmptyDataset)?;
    if hyper.batch_size == 0 {
        return Err(DiffusionError::BadTraining("batch size must be positive".into()));
    }
    let arch = ArchSpec::for_map(first.map.width(), first.map.height(), &hyper.net);
    if arch.param_count() > hyper.net.max_params {
        return Err(DiffusionError::BadArch(format!(
            "{} parameters exceeds limit {}",
            arch.param_count(),
            hyper.net.max_params
        )));
    }
    let maps: Vec<Vec<f64>> = dataset
        .maps()
        .map(|m| normalize(m, &dataset.stats))
        .collect::<Result<_, _>>()?;

    let mut split_rng = rng::stream(seed, &[rng::tag::DDPM_TRAIN, 0]);
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.shuffle(&mut split_rng);
    let n_held = if maps.len() >= 2 {
        ((maps.len() as f64 * hyper.heldout_fraction).round() as usize).clamp(1, maps.len() - 1)
    } else {
        0
    };
    let held: Vec<Vec<f64>> = order[..n_held].iter().map(|&i| maps[i].clone()).collect();
    let train: Vec<Vec<f64>> = order[n_held..].iter().map(|&i| maps[i].clone()).collect();
    // a single map is both trained on and evaluated
    let held_eval = if held.is_empty() { train.clone() } else { held.clone() };

    let mut net = EpsNet::init(arch, &mut rng::stream(seed, &[rng::tag::DDPM_TRAIN, 1]))?;
    let eval_seed = rng::derive_seed(seed, &[rng::tag::DDPM_TRAIN, 2]);
    let initial = eps_mse(&net, &held_eval, schedule, hyper.eval_draws, &mut <Rng as rand::SeedableRng>::seed_from_u64(eval_seed));

    let mut opt = net::Adam::new(&net.params);
    let mut batch_rng = rng::stream(seed, &[rng::tag::DDPM_TRAIN, 3]);
    let mut noise_rng = rng::stream(seed, &[rng::tag::DDPM_TRAIN, 4]);
    let mut perm: Vec<usize> = (0..train.len()).collect();
    let mut cursor = perm.len();
    let tail_start = hyper.steps - hyper.steps / 10;
    let (mut tail_sum, mut tail_n) = (0.0, 0usize);
    for step in 0..hyper.steps {
        let mut idx = Vec::with_capacity(hyper.batch_size);
        while idx.len() < hyper.batch_size {
            if cursor == perm.len() {
                perm.shuffle(&mut batch_rng);
                cursor = 0;
            }
            idx.push(perm[cursor]);
            cursor += 1;
        }
        let (x, ks, eps) = noised_batch(idx.iter().map(|&i| train[i].as_slice()), schedule, &mut noise_rng);
        let xs: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).collect();
        let es: Vec<&[f64]> = eps.iter().map(|v| v.as_slice()).collect();
        let (loss, mut grads) = net.loss_and_grads(&net.pack(&xs), &ks, &net.pack(&es));
        if !loss.is_finite() {
            return Err(DiffusionError::Diverged { step, loss });
        }
        if step >= tail_start {
            tail_sum += loss;
            tail_n += 1;
        }
        net::clip_global_norm(&mut grads, hyper.grad_clip);
        let lr = if hyper.cosine_decay {
            let t = step as f64 / hyper.steps.max(1) as f64;
            hyper.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
        } else {
            hyper.learning_rate
        };
        opt.step(&mut net.params, &grads, lr);
    }
    if net.params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(DiffusionError::Diverged { step: hyper.steps, loss: f64::NAN });
    }
    let heldout = eps_mse(&net, &held_eval, schedule, hyper.eval_draws, &mut <Rng as rand::SeedableRng>::seed_from_u64(eval_seed));
    let report = TrainReport {
        steps: hyper.steps,
        train_loss: if tail_n > 0 { tail_sum / tail_n as f64 } else { initial },
        heldout_loss: heldout,
        initial_heldout_loss: initial,
        train_maps: train.len(),
        heldout_maps: held.len(),
    };
    Ok((net, report))
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DiffusionError> {
        let s = self
            .bytes
            .get(self.off..self.off + n)
            .ok_or_else(|| DiffusionError::Checkpoint("truncated checkpoint".into()))?;
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DiffusionError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DiffusionError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl EpsNet {
    pub fn to_bytes(&self, schedule: &NoiseSchedule) -> Vec<u8> {
        let a = &self.arch;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let kind: u32 = match a.kind {
            ArchKind::Dense => 0,
            ArchKind::Conv => 1,
        };
        for v in [kind, a.width as u32, a.height as u32, a.embed_dim as u32, a.widths.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for w in &a.widths {
            buf.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        buf.extend_from_slice(&schedule.fingerprint().to_le_bytes());
        buf.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for p in &self.params {
            for v in p.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], schedule: &NoiseSchedule) -> Result<Self, DiffusionError> {
        let fmt = |m: &str| DiffusionError::Checkpoint(m.to_string());
        let mut r = Reader { bytes, off: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt("missing EPSN magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let kind = match r.u32()? {
            0 => ArchKind::Dense,
            1 => ArchKind::Conv,
            k => return Err(fmt(&format!("unknown architecture kind {k}"))),
        };
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let n_widths = r.u32()? as usize;
        if n_widths > 16 {
            return Err(fmt("implausible width count"));
        }
        let widths = (0..n_widths)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let hash = r.u64()?;
        if hash != schedule.fingerprint() {
            return Err(DiffusionError::ScheduleMismatch { stored: hash, expected: schedule.fingerprint() });
        }
        let count = r.u64()? as usize;
        let arch = ArchSpec { kind, width, height, embed_dim, widths };
        arch.validate()?;
        if count != arch.param_count() {
            return Err(fmt("parameter count does not match architecture"));
        }
        let mut params = Vec::new();
        for (rows, cols) in arch.param_shapes() {
            let raw = r.take(rows * cols * 4)?;
            let vals: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(fmt("non-finite parameter"));
            }
            params.push(Array2::from_shape_vec((rows, cols), vals).unwrap());
        }
        if r.off != bytes.len() {
            return Err(fmt("trailing bytes after parameters"));
        }
        Ok(Self { arch, params })
    }

    pub fn save(&self, path: impl AsRef<Path>, schedule: &NoiseSchedule) -> Result<(), DiffusionError> {
        fs::write(path.as_ref(), self.to_bytes(schedule)).map_err(DiffusionError::Io)
    }

    pub fn load(path: impl AsRef<Path>, schedule: &NoiseSchedule) -> Result<Self, DiffusionError> {
        let bytes = fs::read(path.as_ref()).map_err(DiffusionError::Io)?;
        Self::from_bytes(&bytes, schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heightfield::GridMap;

    fn tiny_conv() -> ArchSpec {
        ArchSpec { kind: ArchKind::Conv, width: 4, height: 4, embed_dim: 4, widths: vec![2, 3, 2] }
    }

    fn tiny_dense() -> ArchSpec {
        ArchSpec { kind: ArchKind::Dense, width: 2, height: 2, embed_dim: 4, widths: vec![5] }
    }

    /// Central finite differences on every parameter of an f64 network.
    fn gradient_check(arch: ArchSpec) {
        let mut rng = rng::stream(3, &[]);
        let mut net = Net::<f64>::init(arch, &mut rng).unwrap();
        // non-zero output layer so every path carries gradient
        let n = net.params.len();
        for i in [n - 2, n - 1] {
            net.params[i] = net::he_init(net.params[i].nrows(), net.params[i].ncols(), 4, &mut rng);
        }
        let dim = LAYERS * net.arch.width * net.arch.height;
        let samples: Vec<Vec<f64>> = (0..2).map(|_| super::super::standard_normal(&mut rng, dim)).collect();
        let targets: Vec<Vec<f64>> = (0..2).map(|_| super::super::standard_normal(&mut rng, dim)).collect();
        let xs: Vec<&[f64]> = samples.iter().map(|v| v.as_slice()).collect();
        let ts: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
        let (x, t) = (net.pack(&xs), net.pack(&ts));
        let steps = [3usize, 17];
        let (_, grads) = net.loss_and_grads(&x, &steps, &t);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for pi in 0..net.params.len() {
            for j in 0..net.params[pi].len() {
                let orig = net.params[pi].as_slice().unwrap()[j];
                net.params[pi].as_slice_mut().unwrap()[j] = orig + h;
                let lp = net.loss_and_grads(&x, &steps, &t).0;
                net.params[pi].as_slice_mut().unwrap()[j] = orig - h;
                let lm = net.loss_and_grads(&x, &steps, &t).0;
                net.params[pi].as_slice_mut().unwrap()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[pi].as_slice().unwrap()[j];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
                worst = worst.max(err);
                assert!(err < 1e-4, "param {pi}[{j}]: fd {fd} vs analytic {an}");
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        gradient_check(tiny_dense());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        gradient_check(tiny_conv());
    }

    #[test]
    fn arch_choice_follows_map_size() {
        let h = NetHyper::default();
        assert_eq!(ArchSpec::for_map(32, 32, &h).kind, ArchKind::Conv);
        assert_eq!(ArchSpec::for_map(16, 16, &h).kind, ArchKind::Dense);
        assert_eq!(ArchSpec::for_map(34, 32, &h).kind, ArchKind::Dense);
    }

    #[test]
    fn untrained_net_predicts_zero() {
        let net = EpsNet::init(ArchSpec::for_map(8, 8, &NetHyper::default()), &mut rng::stream(1, &[])).unwrap();
        let lat = LatentMap::new(8, 8, 5, vec![0.3; 128]).unwrap();
        assert!(net.predict_eps(&lat, 5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pack_unpack_round_trip() {
        let net = Net::<f64>::init(tiny_conv(), &mut rng::stream(1, &[])).unwrap();
        let v: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let packed = net.pack(&[&v, &v]);
        assert_eq!(packed.dim(), (32, 2));
        assert_eq!(net.unpack(&packed, 1), v);
    }

    #[test]
    fn checkpoint_round_trip_and_schedule_guard() {
        let s = NoiseSchedule::scaled_linear(16).unwrap();
        let other = NoiseSchedule::scaled_linear(17).unwrap();
        let net = EpsNet::init(ArchSpec::for_map(32, 32, &NetHyper::default()), &mut rng::stream(2, &[])).unwrap();
        let bytes = net.to_bytes(&s);
        assert_eq!(&bytes[..4], b"EPSN");
        assert_eq!(EpsNet::from_bytes(&bytes, &s).unwrap(), net);
        assert!(matches!(
            EpsNet::from_bytes(&bytes, &other),
            Err(DiffusionError::ScheduleMismatch { .. })
        ));
        assert!(EpsNet::from_bytes(&bytes[..bytes.len() - 1], &s).is_err());
    }

    fn const_dataset(n: usize) -> MapDataset {
        let maps = (0..n)
            .map(|i| {
                let t: Vec<f32> = (0..64).map(|c| ((c % 8) as f32 * 0.3).sin()).collect();
                GridMap::bare(8, 8, 0.5, t, i as u64).unwrap()
            })
            .collect();
        let mut ds = MapDataset::from_maps(maps, "t").unwrap();
        // identical maps: give the stats a non-degenerate scale
        ds.stats = crate::heightfield::NormStats { mean: [0.0, 0.0], scale: [1.0, 1.0] };
        ds
    }

    #[test]
    fn zero_steps_gives_unit_loss() {
        let s = NoiseSchedule::scaled_linear(32).unwrap();
        let hyper = TrainHyper { steps: 0, eval_draws: 64, ..TrainHyper::default() };
        let (_, report) = train_eps_net(&const_dataset(10), &s, &hyper, 1).unwrap();
        assert!((report.heldout_loss - 1.0).abs() < 0.05, "{report:?}");
    }

    #[test]
    fn constant_dataset_is_learnable() {
        let s = NoiseSchedule::scaled_linear(32).unwrap();
        let hyper = TrainHyper { steps: 400, learning_rate: 1e-3, ..TrainHyper::default() };
        let (_, report) = train_eps_net(&const_dataset(10), &s, &hyper, 1).unwrap();
        assert!(report.heldout_loss < 0.8, "{report:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let s = NoiseSchedule::scaled_linear(8).unwrap();
        let hyper = TrainHyper { steps: 5, ..TrainHyper::default() };
        let (a, _) = train_eps_net(&const_dataset(4), &s, &hyper, 9).unwrap();
        let (b, _) = train_eps_net(&const_dataset(4), &s, &hyper, 9).unwrap();
        assert_eq!(a.to_bytes(&s), b.to_bytes(&s));
    }
}
