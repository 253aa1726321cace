use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DiffusionError;

/// DDPM constants for steps `1..=K`.
///
/// `beta(k)` and `alpha(k)` are indexed from 1; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

impl NoiseSchedule {
    /// Linear interpolation of β from `beta_start` (step 1) to `beta_end`
    /// (step K).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::BadSchedule("K must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::BadSchedule(format!(
                "need 0 < beta_1 <= beta_K < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Linear schedule with the conventional 1000-step endpoints
    /// (1e-4, 0.02) rescaled by `1000 / K`, so the total noise injected
    /// stays comparable for short chains.
    pub fn scaled_linear(steps: usize) -> Result<Self, DiffusionError> {
        let scale = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, (1e-4 * scale).min(0.5), (0.02 * scale).min(0.999))
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::BadSchedule("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if acc <= 0.0 {
            return Err(DiffusionError::BadSchedule("alpha_bar underflowed to zero".into()));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn build(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps, beta_start, beta_end),
        }
    }

    /// Maximum forward step K.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.betas[k - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Posterior variance β̃_k = β_k (1 − ᾱ_{k−1}) / (1 − ᾱ_k).
    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.beta(k) * (1.0 - self.alpha_bar(k - 1)) / (1.0 - self.alpha_bar(k))
    }

    /// Fingerprint of the β sequence, used to pair checkpoints with the
    /// schedule they were trained under.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.betas.len() as u64).to_le_bytes());
        for b in &self.betas {
            h.update(b.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
