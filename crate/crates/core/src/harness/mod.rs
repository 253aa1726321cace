//! Run configuration, preset runs, run directories and cross-run comparison.

mod compare;
mod config;
mod tools;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use compare::{compare_runs, median, read_metrics, render_svg, Comparison, MetricsRow, Series};
pub use config::{
    ApgConfig, BootstrapConfig, CurriculumConfig, DenoiserConfig, DenoiserKind, HeldoutConfig, RunConfig,
    ScheduleConfig, SynthesisConfig, VariabilityConfig,
};
pub use crate::curriculum::RunningBound;
pub use tools::{evaluate_checkpoint, generate, train_ddpm};

use crate::curriculum::{evaluate_map_set, run_acrl, EpochMetrics, Preset};
use crate::diffusion::{train_eps_net, ClipDenoised, Denoiser, EpsNet, GmmDenoiser, GmmPrior, NoiseSchedule};
use crate::heightfield::{
    flatten_pooled, normalize, raw_variability, save_dataset_dir, Estimator, GridMap, MapDataset,
};
use crate::rng::{derive_seed, stream, tag};
use crate::terraingen::bootstrap_dataset;
use crate::Result;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown preset {0:?} (expected adept, dept, apg, pg, n-adept or n-ept)")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("no run directories given")]
    NoRuns,
    #[error("{path}: {msg}")]
    BadMetrics { path: PathBuf, msg: String },
    #[error("runs share no common epoch")]
    EmptyIntersection,
}

pub const METRICS_HEADER: &str = "epoch,preset,seed,selected_env,train_return,eval_return,norm_return,\
eval_success,lambda_var,chosen_k,dataset_size,wall_ms";

/// `raw` divided by the running bound after folding `raw` into it; 0 while
/// the bound is 0.
pub fn normalized_return(raw: f64, bound: &mut RunningBound) -> f64 {
    bound.normalize(raw)
}

pub fn metrics_row(m: &EpochMetrics, preset: Preset, seed: u64) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        m.epoch,
        preset.name(),
        seed,
        m.selected_env,
        m.train_return,
        m.eval_return,
        m.norm_return,
        m.eval_success,
        m.lambda_var,
        m.chosen_k,
        m.dataset_size,
        m.wall_ms
    )
}

/// Seeds of the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub root: u64,
    pub bootstrap: u64,
    pub heldout: u64,
    pub ddpm: u64,
}

impl RunSeeds {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            root: cfg.seed,
            bootstrap: derive_seed(cfg.seed, &[tag::BOOTSTRAP]),
            heldout: derive_seed(cfg.heldout.seed, &[tag::HELDOUT]),
            ddpm: derive_seed(cfg.seed, &[tag::DDPM_TRAIN]),
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seeds: RunSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutSummary {
    pub maps: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Held-out return divided by the run's running bound (with the held-out
    /// return folded in).
    pub norm_return: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub seed: u64,
    pub epochs: usize,
    pub converged_at: Option<usize>,
    pub final_dataset_size: usize,
    pub running_bound: f64,
    pub final_norm_return: Option<f64>,
    pub heldout: Option<HeldoutSummary>,
}

/// Bootstrap dataset of a run; depends only on the root seed, map shape and
/// terrain ranges, so every preset run from the same seed starts from it.
pub fn bootstrap_for(cfg: &RunConfig) -> Result<MapDataset> {
    let mut rng = stream(cfg.seed, &[tag::BOOTSTRAP]);
    Ok(bootstrap_dataset(cfg.bootstrap.count, &cfg.terrain, cfg.map, &mut rng)?)
}

/// Held-out maps, drawn from the held-out seed only.
pub fn heldout_maps(cfg: &RunConfig) -> Result<Vec<GridMap>> {
    if cfg.heldout.count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = stream(cfg.heldout.seed, &[tag::HELDOUT]);
    let n = cfg.heldout.count.max(2);
    let ds = bootstrap_dataset(n, &cfg.terrain, cfg.map, &mut rng)?;
    Ok(ds.maps().take(cfg.heldout.count).cloned().collect())
}

/// Reference variance: the configured value, else `reference_factor` times
/// the raw top-p variability of `dataset`.
pub fn resolve_reference(cfg: &RunConfig, dataset: &MapDataset) -> Result<f64> {
    if let Some(r) = cfg.variability.reference {
        return Ok(r);
    }
    let d = cfg.resolved().variability.downsample;
    let vectors: Vec<Vec<f64>> = dataset.maps().map(|m| flatten_pooled(m, d)).collect();
    let raw = raw_variability(&vectors, cfg.variability.components, Estimator::Sample)?;
    let r = raw * cfg.variability.reference_factor;
    Ok(if r > 0.0 && r.is_finite() { r } else { 1.0 })
}

/// Mixture with one component per map of `dataset`, in normalized units.
pub fn gmm_denoiser(dataset: &MapDataset, schedule: &NoiseSchedule, variance: f64) -> Result<GmmDenoiser> {
    let means = dataset
        .maps()
        .map(|m| normalize(m, &dataset.stats))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(GmmDenoiser { prior: GmmPrior::uniform(means, variance)?, schedule: schedule.clone() })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| crate::Error::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Execute one preset run and write its directory:
///
/// ```text
/// out/run.json           resolved config and stream seeds
/// out/metrics.csv        one row per epoch
/// out/bootstrap/         initial dataset
/// out/dataset/           final dataset
/// out/checkpoints/       policy.navp, epsnet.epsn when one was trained or loaded
/// out/summary.json       held-out evaluation and run totals
/// ```
pub fn run_preset(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let preset = cfg.preset()?;
    let bootstrap = bootstrap_for(cfg)?;
    let mut resolved = cfg.resolved();
    resolved.variability.reference = Some(resolve_reference(cfg, &bootstrap)?);
    let schedule = resolved.schedule.build()?;
    let seeds = RunSeeds::new(&resolved);

    fs::create_dir_all(out.join("checkpoints"))?;
    write_json(&out.join("run.json"), &RunManifest { config: resolved.clone(), seeds })?;
    save_dataset_dir(&bootstrap, out.join("bootstrap"))?;

    let denoiser: Option<Box<dyn Denoiser>> = if preset.uses_denoiser() && resolved.epochs > 0 {
        Some(build_denoiser(&resolved, &bootstrap, &schedule, &out.join("checkpoints"), seeds.ddpm)?)
    } else {
        None
    };

    let mut csv = BufWriter::new(fs::File::create(out.join("metrics.csv"))?);
    writeln!(csv, "{METRICS_HEADER}")?;
    let acrl = resolved.acrl(resolved.variability.reference.unwrap_or(1.0));
    let outcome = run_acrl(&acrl, bootstrap, denoiser.as_deref(), &schedule, &mut |m| {
        writeln!(csv, "{}", metrics_row(m, preset, resolved.seed))
    })?;
    csv.flush()?;
    drop(csv);

    save_dataset_dir(&outcome.state.dataset, out.join("dataset"))?;
    outcome.policy.save(out.join("checkpoints").join("policy.navp"))?;

    let mut bound = RunningBound::default();
    for m in &outcome.metrics {
        bound.normalize(m.eval_return);
    }
    let heldout = heldout_maps(&resolved)?;
    let heldout = if heldout.is_empty() {
        None
    } else {
        let eval_seed = derive_seed(resolved.heldout.seed, &[tag::EVAL]);
        let s = evaluate_map_set(&outcome.policy, &heldout, &resolved.nav, resolved.heldout.episodes, eval_seed)?;
        Some(HeldoutSummary {
            maps: heldout.len(),
            episodes: s.episodes,
            success_rate: s.success_rate,
            mean_return: s.mean_return,
            norm_return: bound.normalize(s.mean_return),
        })
    };
    let summary = RunSummary {
        preset: preset.name().to_string(),
        seed: resolved.seed,
        epochs: outcome.metrics.len(),
        converged_at: outcome.converged_at,
        final_dataset_size: outcome.state.dataset.len(),
        running_bound: bound.bound,
        final_norm_return: outcome.metrics.last().map(|m| m.norm_return),
        heldout,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Denoiser for generating presets: a loaded or freshly trained EpsNet
/// (copied to `checkpoints/epsnet.epsn`), or the bootstrap mixture.
fn build_denoiser(
    cfg: &RunConfig,
    bootstrap: &MapDataset,
    schedule: &NoiseSchedule,
    ckpt_dir: &Path,
    ddpm_seed: u64,
) -> Result<Box<dyn Denoiser>> {
    let target = ckpt_dir.join("epsnet.epsn");
    if let Some(path) = &cfg.denoiser.checkpoint {
        let net = EpsNet::load(path, schedule)?;
        net.save(&target, schedule)?;
        return Ok(clipped(net, cfg, schedule));
    }
    match cfg.denoiser.kind {
        DenoiserKind::Gmm => Ok(Box::new(gmm_denoiser(bootstrap, schedule, cfg.denoiser.gmm_variance)?)),
        DenoiserKind::EpsNet => {
            let (net, report) = train_eps_net(bootstrap, schedule, &cfg.ddpm, ddpm_seed)?;
            net.save(&target, schedule)?;
            write_json(&ckpt_dir.join("epsnet_report.json"), &report)?;
            Ok(clipped(net, cfg, schedule))
        }
    }
}

pub(crate) fn clipped(net: EpsNet, cfg: &RunConfig, schedule: &NoiseSchedule) -> Box<dyn Denoiser> {
    match cfg.denoiser.clip_x0 {
        Some(bound) => Box::new(ClipDenoised { inner: net, schedule: schedule.clone(), bound }),
        None => Box::new(net),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_return_examples() {
        let mut b = RunningBound::default();
        assert_eq!(normalized_return(10.0, &mut b), 1.0);
        assert_eq!(normalized_return(5.0, &mut b), 0.5);
        let mut z = RunningBound::default();
        assert!((0..5).all(|_| normalized_return(0.0, &mut z) == 0.0));
    }

    #[test]
    fn normalized_return_scale_covariant() {
        let raw = [3.0, -7.5, 2.0, 11.0, -0.5, 4.0];
        for lambda in [0.01, 1.0, 3.7, 250.0] {
            let (mut a, mut b) = (RunningBound::default(), RunningBound::default());
            for r in raw {
                let x = normalized_return(r, &mut a);
                let y = normalized_return(lambda * r, &mut b);
                assert!((x - y).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn header_matches_row_arity() {
        let m = EpochMetrics {
            epoch: 0,
            selected_env: 3,
            train_return: 1.0,
            eval_return: 0.5,
            norm_return: 1.0,
            eval_success: 0.25,
            lambda_var: 0.1,
            chosen_k: 90,
            dataset_size: 16,
            wall_ms: 0,
        };
        let row = metrics_row(&m, Preset::NEpt, 9);
        assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
        assert!(row.starts_with("0,n-ept,9,3,"));
    }

    #[test]
    fn heldout_independent_of_root_seed() {
        let a = RunConfig { seed: 1, ..RunConfig::default() };
        let b = RunConfig { seed: 2, ..RunConfig::default() };
        assert_eq!(heldout_maps(&a).unwrap(), heldout_maps(&b).unwrap());
        assert_ne!(bootstrap_for(&a).unwrap().records()[0].map, bootstrap_for(&b).unwrap().records()[0].map);
    }
}
