use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DiffusionError, NoiseSchedule};
use crate::heightfield::LAYERS;
use crate::rng::Rng;

/// A normalized two-layer map (layer-major, row-major) at forward step `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMap {
    pub width: usize,
    pub height: usize,
    pub step: usize,
    pub data: Vec<f64>,
}

impl LatentMap {
    pub fn new(width: usize, height: usize, step: usize, data: Vec<f64>) -> Result<Self, DiffusionError> {
        if data.len() != LAYERS * width * height {
            return Err(DiffusionError::Shape { expected: LAYERS * width * height, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite);
        }
        Ok(Self { width, height, step, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// ε-prediction model.
pub trait Denoiser {
    /// Predicted noise for `latent` at step `k` (1 ≤ k ≤ K); same length as
    /// `latent.data`.
    fn predict_eps(&self, latent: &LatentMap, k: usize) -> Vec<f64>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_eps(&self, latent: &LatentMap, k: usize) -> Vec<f64> {
        (**self).predict_eps(latent, k)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_eps(&self, latent: &LatentMap, k: usize) -> Vec<f64> {
        (**self).predict_eps(latent, k)
    }
}

/// Variance used for the ancestral noise at each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// β̃_k, the variance of q(e_{k−1} | e_k, e_0).
    #[default]
    Posterior,
    /// β_k.
    Beta,
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draw e_k ~ q(e_k | e_0) = N(√ᾱ_k e_0, (1 − ᾱ_k) I).
pub fn forward_sample(
    e0: &LatentMap,
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LatentMap, DiffusionError> {
    if k > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange { step: k, max: schedule.steps() });
    }
    if k == 0 {
        return Ok(LatentMap { step: 0, ..e0.clone() });
    }
    let eps = standard_normal(rng, e0.len());
    Ok(forward_with_noise(e0, k, schedule, &eps))
}

/// e_k = √ᾱ_k e_0 + √(1 − ᾱ_k) ε with caller-supplied ε.
pub fn forward_with_noise(e0: &LatentMap, k: usize, schedule: &NoiseSchedule, eps: &[f64]) -> LatentMap {
    let ab = schedule.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    LatentMap {
        width: e0.width,
        height: e0.height,
        step: k,
        data: e0.data.iter().zip(eps).map(|(x, n)| a * x + b * n).collect(),
    }
}

/// Ancestral DDPM sampling from step `k` down to 0.
///
/// Each step computes μ = (e_j − β_j / √(1 − ᾱ_j) · ε̂) / √α_j and adds
/// Gaussian noise with the configured variance, except at j = 1.
pub fn reverse_from<D: Denoiser + ?Sized>(
    ek: &LatentMap,
    k: usize,
    denoiser: &D,
    schedule: &NoiseSchedule,
    variance: ReverseVariance,
    rng: &mut Rng,
) -> Result<LatentMap, DiffusionError> {
    if ek.step != k {
        return Err(DiffusionError::StepMismatch { latent: ek.step, requested: k });
    }
    if k > schedule.steps() {
        return Err(DiffusionError::StepOutOfRange { step: k, max: schedule.steps() });
    }
    let mut x = ek.clone();
    for j in (1..=k).rev() {
        let eps = denoiser.predict_eps(&x, j);
        if eps.len() != x.len() {
            return Err(DiffusionError::Shape { expected: x.len(), got: eps.len() });
        }
        let beta = schedule.beta(j);
        let coef = beta / (1.0 - schedule.alpha_bar(j)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(j).sqrt();
        for (v, e) in x.data.iter_mut().zip(&eps) {
            *v = (*v - coef * e) * inv_sqrt_alpha;
        }
        if j > 1 {
            let sigma = match variance {
                ReverseVariance::Posterior => schedule.posterior_variance(j),
                ReverseVariance::Beta => beta,
            }
            .sqrt();
            for v in x.data.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x.step = j - 1;
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite);
        }
    }
    Ok(x)
}

/// Wraps a denoiser so the implied clean estimate
/// ê_0 = (e_k − √(1 − ᾱ_k) ε̂) / √ᾱ_k is clamped to `[-bound, bound]` before
/// being turned back into a noise prediction. The reverse mean computed from
/// the adjusted ε̂ equals the posterior mean q(e_{k−1} | e_k, ê_0) at the
/// clamped ê_0.
#[derive(Debug, Clone)]
pub struct ClipDenoised<D> {
    pub inner: D,
    pub schedule: NoiseSchedule,
    pub bound: f64,
}

impl<D: Denoiser> Denoiser for ClipDenoised<D> {
    fn predict_eps(&self, latent: &LatentMap, k: usize) -> Vec<f64> {
        let eps = self.inner.predict_eps(latent, k);
        let ab = self.schedule.alpha_bar(k);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        latent
            .data
            .iter()
            .zip(eps)
            .map(|(x, e)| {
                let x0 = ((x - sb * e) / sa).clamp(-self.bound, self.bound);
                (x - sa * x0) / sb
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn clipping_bounds_the_clean_estimate() {
        let s = NoiseSchedule::scaled_linear(10).unwrap();
        let x = LatentMap::new(2, 2, 5, vec![3.0, -4.0, 0.1, -0.2, 0.0, 2.5, -0.5, 0.3]).unwrap();
        let ab = s.alpha_bar(5);
        let wide = ClipDenoised { inner: Zero, schedule: s.clone(), bound: 1e9 };
        assert_eq!(wide.predict_eps(&x, 5), vec![0.0; 8]);
        let tight = ClipDenoised { inner: Zero, schedule: s.clone(), bound: 1.0 };
        let eps = tight.predict_eps(&x, 5);
        for (v, e) in x.data.iter().zip(&eps) {
            let x0 = (v - (1.0 - ab).sqrt() * e) / ab.sqrt();
            let want = (v / ab.sqrt()).clamp(-1.0, 1.0);
            assert!((x0 - want).abs() < 1e-12);
        }
    }

    struct Zero;
    impl Denoiser for Zero {
        fn predict_eps(&self, latent: &LatentMap, _k: usize) -> Vec<f64> {
            vec![0.0; latent.len()]
        }
    }

    fn lat(step: usize) -> LatentMap {
        LatentMap::new(2, 2, step, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap()
    }

    /// Schedule with ᾱ at step 1 equal to 0.25.
    fn quarter() -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![0.75, 0.1]).unwrap()
    }

    #[test]
    fn step_zero_is_identity() {
        let s = quarter();
        let e0 = lat(0);
        let mut rng = stream(1, &[]);
        assert_eq!(forward_sample(&e0, 0, &s, &mut rng).unwrap(), e0);
        assert_eq!(reverse_from(&e0, 0, &Zero, &s, ReverseVariance::Posterior, &mut rng).unwrap(), e0);
    }

    #[test]
    fn rejects_step_mismatch_and_range() {
        let s = quarter();
        let mut rng = stream(1, &[]);
        assert!(matches!(
            reverse_from(&lat(1), 2, &Zero, &s, ReverseVariance::Posterior, &mut rng),
            Err(DiffusionError::StepMismatch { .. })
        ));
        assert!(forward_sample(&lat(0), 3, &s, &mut rng).is_err());
        assert!(LatentMap::new(2, 2, 0, vec![0.0; 7]).is_err());
    }

    #[test]
    fn forward_moments_monte_carlo() {
        let s = quarter();
        assert!((s.alpha_bar(1) - 0.25).abs() < 1e-15);
        let e0 = lat(0);
        let draws = 100_000;
        let mut rng = stream(11, &[]);
        let mut sum = vec![0.0; 8];
        let mut sq = vec![0.0; 8];
        let zero = LatentMap::new(2, 2, 0, vec![0.0; 8]).unwrap();
        let mut zsq = vec![0.0; 8];
        for _ in 0..draws {
            let x = forward_sample(&e0, 1, &s, &mut rng).unwrap();
            let z = forward_sample(&zero, 1, &s, &mut rng).unwrap();
            for i in 0..8 {
                sum[i] += x.data[i];
                sq[i] += x.data[i] * x.data[i];
                zsq[i] += z.data[i] * z.data[i];
            }
        }
        for i in 0..8 {
            let mean = sum[i] / draws as f64;
            assert!((mean - 0.5 * e0.data[i]).abs() < 0.02, "mean {mean}");
            let var = sq[i] / draws as f64 - mean * mean;
            assert!((var - 0.75).abs() < 0.02, "var {var}");
            let zvar = zsq[i] / draws as f64;
            assert!((zvar - 0.75).abs() < 0.02, "zero-map var {zvar}");
        }
    }

    #[test]
    fn reverse_is_deterministic_under_seed() {
        let s = NoiseSchedule::scaled_linear(16).unwrap();
        let run = || {
            let mut rng = stream(5, &[9]);
            let e = forward_sample(&lat(0), 16, &s, &mut rng).unwrap();
            reverse_from(&e, 16, &Zero, &s, ReverseVariance::Posterior, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.step, 0);
    }
}
