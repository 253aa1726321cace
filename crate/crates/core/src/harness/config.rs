//! TOML run configuration with defaults for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ConfigError, RunManifest};
use crate::curriculum::{AcrlConfig, Preset};
use crate::diffusion::{NoiseSchedule, ReverseVariance, TrainHyper};
use crate::heightfield::{default_downsample, VariabilityParams, MIN_DIM};
use crate::navsim::{NavConfig, PolicyHyper, PpoHyper};
use crate::synthesis::WeightParams;
use crate::terraingen::{MapShape, TerrainRanges};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Maximum forward step K.
    pub steps: usize,
    /// β at step 1; defaults to 1e-4 scaled by 1000 / K.
    pub beta_start: Option<f64>,
    /// β at step K; defaults to 0.02 scaled by 1000 / K.
    pub beta_end: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 100, beta_start: None, beta_end: None }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, ConfigError> {
        let s = self.resolved();
        NoiseSchedule::linear(s.steps, s.beta_start.unwrap(), s.beta_end.unwrap())
            .map_err(|e| ConfigError::Invalid(format!("schedule: {e}")))
    }

    fn resolved(&self) -> Self {
        let scale = 1000.0 / self.steps.max(1) as f64;
        Self {
            steps: self.steps,
            beta_start: Some(self.beta_start.unwrap_or((1e-4 * scale).min(0.5))),
            beta_end: Some(self.beta_end.unwrap_or((0.02 * scale).min(0.999))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    /// Initial dataset size N0.
    pub count: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { count: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldoutConfig {
    /// Number of held-out maps; 0 skips the final held-out evaluation.
    pub count: usize,
    /// Seed of the held-out set, shared across runs so presets are compared
    /// on identical maps.
    pub seed: u64,
    pub episodes: usize,
}

impl Default for HeldoutConfig {
    fn default() -> Self {
        Self { count: 32, seed: 7919, episodes: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Maps fused per new environment n.
    pub subset_size: usize,
    pub expand_period: usize,
    /// New environments per expansion N.
    pub expand_count: usize,
    pub reverse_variance: ReverseVariance,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { subset_size: 4, expand_period: 5, expand_count: 8, reverse_variance: ReverseVariance::Posterior }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariabilityConfig {
    pub components: usize,
    /// Average-pool factor; 0 picks the smallest factor that keeps the
    /// flattened map within 512 values.
    pub downsample: usize,
    /// Reference variance; absent means `reference_factor` times the raw
    /// variability of the bootstrap dataset.
    pub reference: Option<f64>,
    pub reference_factor: f64,
}

impl Default for VariabilityConfig {
    fn default() -> Self {
        Self { components: 3, downsample: 0, reference: None, reference_factor: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub ucb_c: f64,
    pub refresh_budget: usize,
    /// Evaluation episodes M per environment.
    pub eval_episodes: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
    /// Record elapsed milliseconds in metrics.csv; off keeps reruns
    /// byte-identical.
    pub record_wall_time: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            ucb_c: 0.5,
            refresh_budget: 2,
            eval_episodes: 8,
            convergence_window: 20,
            convergence_tol: 1e-3,
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApgConfig {
    pub initial: f64,
    pub rate: f64,
}

impl Default for ApgConfig {
    fn default() -> Self {
        Self { initial: 0.3, rate: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    /// Train an EpsNet on the bootstrap dataset at the start of the run.
    EpsNet,
    /// Closed-form denoiser of a Gaussian mixture centred on the bootstrap maps.
    Gmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    /// EPSN checkpoint to load instead of training; overrides `kind`.
    pub checkpoint: Option<PathBuf>,
    /// Clamp the EpsNet's implied clean estimate to this magnitude (in
    /// normalized units) at every reverse step.
    pub clip_x0: Option<f64>,
    /// Per-component variance of the fallback mixture, in normalized units.
    pub gmm_variance: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { kind: DenoiserKind::EpsNet, checkpoint: None, clip_x0: Some(1.0), gmm_variance: 1e-4 }
    }
}

/// Everything a run needs. Every field has a default, unknown keys are
/// rejected, and the resolved form is what gets written to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: String,
    pub epochs: usize,
    pub map: MapShape,
    pub bootstrap: BootstrapConfig,
    pub heldout: HeldoutConfig,
    pub schedule: ScheduleConfig,
    pub weight: WeightParams,
    pub synthesis: SynthesisConfig,
    pub variability: VariabilityConfig,
    pub curriculum: CurriculumConfig,
    pub nav: NavConfig,
    pub ppo: PpoHyper,
    pub policy: PolicyHyper,
    pub terrain: TerrainRanges,
    pub apg: ApgConfig,
    pub ddpm: TrainHyper,
    pub denoiser: DenoiserConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: "adept".into(),
            epochs: 100,
            map: MapShape::default(),
            bootstrap: BootstrapConfig::default(),
            heldout: HeldoutConfig::default(),
            schedule: ScheduleConfig::default(),
            weight: WeightParams::default(),
            synthesis: SynthesisConfig::default(),
            variability: VariabilityConfig::default(),
            curriculum: CurriculumConfig::default(),
            nav: NavConfig::default(),
            ppo: PpoHyper::default(),
            policy: PolicyHyper::default(),
            terrain: TerrainRanges::default(),
            apg: ApgConfig::default(),
            ddpm: TrainHyper::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a TOML config, or the `config` section of a `run.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            manifest.config.validate()?;
            return Ok(manifest.config);
        }
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn preset(&self) -> Result<Preset, ConfigError> {
        Preset::parse(&self.preset).ok_or_else(|| ConfigError::UnknownPreset(self.preset.clone()))
    }

    /// Fill derived defaults (β bounds, downsample factor). The variability
    /// reference is resolved separately since it depends on the bootstrap
    /// data.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.schedule = c.schedule.resolved();
        if c.variability.downsample == 0 {
            c.variability.downsample = default_downsample(c.map.width, c.map.height);
        }
        c
    }

    /// Check every field against the preconditions of the modules that use it.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.preset()?;
        if self.map.width < MIN_DIM || self.map.height < MIN_DIM {
            return inv(format!("map must be at least {MIN_DIM}x{MIN_DIM}"));
        }
        if !(self.map.resolution > 0.0 && self.map.resolution.is_finite()) {
            return inv("map resolution must be > 0".into());
        }
        if self.bootstrap.count < 2 {
            return inv("bootstrap.count must be >= 2".into());
        }
        if self.heldout.count > 0 && self.heldout.episodes == 0 {
            return inv("heldout.episodes must be >= 1".into());
        }
        self.schedule.build()?;
        if self.variability.components == 0 {
            return inv("variability.components must be >= 1".into());
        }
        if let Some(r) = self.variability.reference {
            if !(r > 0.0 && r.is_finite()) {
                return inv("variability.reference must be > 0".into());
            }
        }
        if !(self.variability.reference_factor > 0.0) {
            return inv("variability.reference_factor must be > 0".into());
        }
        if self.synthesis.subset_size == 0 {
            return inv("synthesis.subset_size must be >= 1".into());
        }
        if self.denoiser.clip_x0.is_some_and(|b| !(b > 0.0)) {
            return inv("denoiser.clip_x0 must be > 0".into());
        }
        if !(self.denoiser.gmm_variance > 0.0) {
            return inv("denoiser.gmm_variance must be > 0".into());
        }
        if self.ddpm.batch_size == 0 || !(0.0..1.0).contains(&self.ddpm.heldout_fraction) {
            return inv("ddpm.batch_size must be >= 1 and heldout_fraction in [0, 1)".into());
        }
        self.acrl(1.0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Loop settings with the variability reference fixed to `reference`.
    pub fn acrl(&self, reference: f64) -> AcrlConfig {
        let r = self.resolved();
        AcrlConfig {
            preset: r.preset().unwrap_or(Preset::Adept),
            seed: r.seed,
            epochs: r.epochs,
            expand_period: r.synthesis.expand_period,
            expand_count: r.synthesis.expand_count,
            subset_size: r.synthesis.subset_size,
            refresh_budget: r.curriculum.refresh_budget,
            eval_episodes: r.curriculum.eval_episodes,
            ucb_c: r.curriculum.ucb_c,
            weight: r.weight,
            variability: VariabilityParams {
                components: r.variability.components,
                downsample: r.variability.downsample,
                reference,
            },
            reverse_variance: r.synthesis.reverse_variance,
            convergence_window: r.curriculum.convergence_window,
            convergence_tol: r.curriculum.convergence_tol,
            nav: r.nav,
            ppo: r.ppo,
            policy: r.policy.clone(),
            terrain: r.terrain.clone(),
            shape: r.map,
            apg_initial: r.apg.initial,
            apg_rate: r.apg.rate,
            record_wall_time: r.curriculum.record_wall_time,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(RunConfig::from_toml_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml_str("epochz = 3"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml_str("[ppo]\nlanez = 3"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(RunConfig::from_toml_str("preset = \"foo\""), Err(ConfigError::UnknownPreset(_))));
        assert!(matches!(RunConfig::from_toml_str("[weight]\ndesired_difficulty = 1.5\ntemperature = 0.3"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml_str("[map]\nwidth = 4\nheight = 32\nresolution = 0.5"), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml_str("[nav.reward]\ngamma = 1.0"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn resolved_round_trips_through_toml() {
        let cfg = RunConfig::from_toml_str("preset = \"pg\"\nepochs = 7\n[schedule]\nsteps = 50").unwrap();
        let r = cfg.resolved();
        assert_eq!(r.schedule.beta_start, Some(1e-4 * 20.0));
        assert_eq!(r.variability.downsample, 2);
        let back = RunConfig::from_toml_str(&r.to_toml_string()).unwrap();
        assert_eq!(back, r);
    }
}
