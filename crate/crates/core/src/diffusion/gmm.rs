//! Closed-form denoiser for an isotropic Gaussian-mixture prior.

use super::{Denoiser, DiffusionError, LatentMap, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    pub mean: Vec<f64>,
    /// Isotropic variance σ0² of the component.
    pub variance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self, DiffusionError> {
        let bad = |m: &str| Err(DiffusionError::BadPrior(m.to_string()));
        let Some(first) = components.first() else {
            return bad("no components");
        };
        let dim = first.mean.len();
        if components.iter().any(|c| c.mean.len() != dim) {
            return bad("component means differ in length");
        }
        if components.iter().any(|c| !(c.variance > 0.0 && c.variance.is_finite())) {
            return bad("variances must be positive");
        }
        if components.iter().any(|c| !(c.weight > 0.0)) {
            return bad("mixture weights must be positive");
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("mixture weights must sum to 1");
        }
        Ok(Self { components })
    }

    /// Equal-weight mixture with one component per mean.
    pub fn uniform(means: Vec<Vec<f64>>, variance: f64) -> Result<Self, DiffusionError> {
        let w = 1.0 / means.len().max(1) as f64;
        Self::new(
            means
                .into_iter()
                .map(|mean| GmmComponent { mean, variance, weight: w })
                .collect(),
        )
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Posterior responsibilities of each component given e_k, computed with
    /// log-sum-exp over the noised marginals N(√ᾱ μ_c, (ᾱ σ0c² + 1 − ᾱ) I).
    pub fn responsibilities(&self, ek: &[f64], alpha_bar: f64) -> Vec<f64> {
        let d = ek.len() as f64;
        let sa = alpha_bar.sqrt();
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let v = alpha_bar * c.variance + (1.0 - alpha_bar);
                let sq: f64 = ek.iter().zip(&c.mean).map(|(x, m)| (x - sa * m).powi(2)).sum();
                c.weight.ln() - 0.5 * d * v.ln() - 0.5 * sq / v
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// E[e_0 | e_k] under this prior.
    pub fn posterior_mean(&self, ek: &[f64], alpha_bar: f64) -> Vec<f64> {
        let r = self.responsibilities(ek, alpha_bar);
        let sa = alpha_bar.sqrt();
        let mut out = vec![0.0; ek.len()];
        for (c, rc) in self.components.iter().zip(&r) {
            let denom = alpha_bar * c.variance + (1.0 - alpha_bar);
            for ((o, x), m) in out.iter_mut().zip(ek).zip(&c.mean) {
                *o += rc * (c.variance * sa * x + (1.0 - alpha_bar) * m) / denom;
            }
        }
        out
    }
}

/// ε̂ = (e_k − √ᾱ_k E[e_0 | e_k]) / √(1 − ᾱ_k) under a Gaussian-mixture prior.
pub fn gmm_denoise(prior: &GmmPrior, ek: &LatentMap, k: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    if k == 0 {
        return vec![0.0; ek.len()];
    }
    let ab = schedule.alpha_bar(k);
    let mean = prior.posterior_mean(&ek.data, ab);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    ek.data.iter().zip(&mean).map(|(x, m)| (x - sa * m) / sb).collect()
}

/// [`Denoiser`] backed by [`gmm_denoise`].
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    pub prior: GmmPrior,
    pub schedule: NoiseSchedule,
}

impl Denoiser for GmmDenoiser {
    fn predict_eps(&self, latent: &LatentMap, k: usize) -> Vec<f64> {
        gmm_denoise(&self.prior, latent, k, &self.schedule)
    }
}
