//! Performance-guided environment synthesis.
//!
//! A new environment is generated by noising a subset of training maps to a
//! common step k, fusing the latents with difficulty weights, and running the
//! reverse chain from the fused latent. The step k is scheduled from dataset
//! variability: low variability means a deeper start and more novel output.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{forward_sample, reverse_from, Denoiser, DiffusionError, LatentMap, NoiseSchedule, ReverseVariance};
use crate::heightfield::{denormalize, normalize, EnvId, EnvRecord, GridMap, HeightfieldError, NormStats};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("nothing to fuse")]
    Empty,
    #[error("{latents} latents but {weights} weights")]
    LengthMismatch { latents: usize, weights: usize },
    #[error("weights must be positive and finite, got {0}")]
    BadWeight(f64),
    #[error("latents disagree on step or shape")]
    Incompatible,
    #[error("maps in subset have different dimensions")]
    DimensionMismatch,
    #[error("invalid weight parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Heightfield(#[from] HeightfieldError),
}

/// Target difficulty s̄ and temperature σ of the difficulty weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightParams {
    pub desired_difficulty: f64,
    pub temperature: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        Self { desired_difficulty: 0.5, temperature: 0.3 }
    }
}

impl WeightParams {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let s = self.desired_difficulty;
        if !(s > 0.0 && s < 1.0) {
            return Err(SynthesisError::BadParams(format!("desired difficulty {s} not in (0, 1)")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SynthesisError::BadParams(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

/// w = exp(−(s − s̄)² / σ²); equals 1 exactly at s = s̄.
pub fn difficulty_weight(success_rate: f64, params: &WeightParams) -> f64 {
    let d = success_rate - params.desired_difficulty;
    (-(d * d) / (params.temperature * params.temperature)).exp()
}

/// Weight of a record: the difficulty weight of its success rate, or 1 for a
/// record that has not been evaluated yet.
pub fn record_weight(record: &EnvRecord, params: &WeightParams) -> f64 {
    record
        .success_rate
        .map_or(1.0, |s| difficulty_weight(s, params))
}

/// Convex combination Σ wᵢ eᵢ / Σ w of latents at a common step.
pub fn fuse_latents(latents: &[&LatentMap], weights: &[f64]) -> Result<LatentMap, SynthesisError> {
    let first = latents.first().ok_or(SynthesisError::Empty)?;
    if latents.len() != weights.len() {
        return Err(SynthesisError::LengthMismatch { latents: latents.len(), weights: weights.len() });
    }
    if let Some(&w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(SynthesisError::BadWeight(w));
    }
    if latents
        .iter()
        .any(|l| l.step != first.step || l.width != first.width || l.height != first.height)
    {
        return Err(SynthesisError::Incompatible);
    }
    if latents.len() == 1 {
        return Ok((*first).clone());
    }
    let total: f64 = weights.iter().sum();
    let mut data = vec![0.0; first.len()];
    for (l, w) in latents.iter().zip(weights) {
        let c = w / total;
        for (d, v) in data.iter_mut().zip(&l.data) {
            *d += c * v;
        }
    }
    Ok(LatentMap { data, ..(*first).clone() })
}

/// Linear scheduler k = round(K · (1 − Λ_var)), clamped to [0, K].
pub fn select_forward_step(lambda_var: f64, max_step: usize) -> usize {
    let v = lambda_var.clamp(0.0, 1.0);
    ((max_step as f64 * (1.0 - v)).round() as usize).min(max_step)
}

/// Draw up to `n` distinct indices with probability proportional to
/// `weights`, sequentially without replacement.
pub fn sample_subset(weights: &[f64], n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(n.min(weights.len()));
    while out.len() < n && !remaining.is_empty() {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let mut pick = remaining.len() - 1;
        if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            for (j, &i) in remaining.iter().enumerate() {
                u -= weights[i];
                if u < 0.0 {
                    pick = j;
                    break;
                }
            }
        } else {
            pick = rng.random_range(0..remaining.len());
        }
        out.push(remaining.remove(pick));
    }
    out
}

/// Synthesis with explicit fusion weights: normalize, noise each map to step
/// `k` independently, fuse, reverse from `k`, denormalize, and re-impose
/// canopy ≥ terrain.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_weighted<D: Denoiser + ?Sized>(
    maps: &[&GridMap],
    weights: &[f64],
    k: usize,
    denoiser: &D,
    schedule: &NoiseSchedule,
    stats: &NormStats,
    variance: ReverseVariance,
    rng: &mut Rng,
    id: EnvId,
) -> Result<GridMap, SynthesisError> {
    let first = maps.first().ok_or(SynthesisError::Empty)?;
    if maps.iter().any(|m| !m.same_shape(first)) {
        return Err(SynthesisError::DimensionMismatch);
    }
    let (w, h) = (first.width(), first.height());
    let mut latents = Vec::with_capacity(maps.len());
    for m in maps {
        let e0 = LatentMap::new(w, h, 0, normalize(m, stats)?)?;
        latents.push(forward_sample(&e0, k, schedule, rng)?);
    }
    let refs: Vec<&LatentMap> = latents.iter().collect();
    let fused = fuse_latents(&refs, weights)?;
    let e0 = reverse_from(&fused, k, denoiser, schedule, variance, rng)?;
    let values = denormalize(&e0.data, w * h, stats)?;
    Ok(GridMap::from_layers_f64(w, h, first.resolution(), &values, id)?)
}

/// Generate one environment from `subset`, fusing with each record's
/// difficulty weight.
#[allow(clippy::too_many_arguments)]
pub fn synthesize<D: Denoiser + ?Sized>(
    subset: &[&EnvRecord],
    k: usize,
    denoiser: &D,
    schedule: &NoiseSchedule,
    stats: &NormStats,
    params: &WeightParams,
    variance: ReverseVariance,
    rng: &mut Rng,
    id: EnvId,
) -> Result<GridMap, SynthesisError> {
    let maps: Vec<&GridMap> = subset.iter().map(|r| &r.map).collect();
    let weights: Vec<f64> = subset.iter().map(|r| record_weight(r, params)).collect();
    synthesize_weighted(&maps, &weights, k, denoiser, schedule, stats, variance, rng, id)
}
