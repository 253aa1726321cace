//! One-shot operations behind the CLI subcommands other than `run` and
//! `compare`.

use std::path::Path;

use super::{clipped, gmm_denoiser, write_json, ConfigError, RunConfig};
use crate::curriculum::evaluate_map_set;
use crate::diffusion::{train_eps_net, Denoiser, EpsNet, TrainReport};
use crate::heightfield::{load_dataset_dir, EnvRecord, GridMap, MapDataset};
use crate::navsim::{ActorCritic, EvalSummary};
use crate::rng::{derive_seed, stream, tag};
use crate::synthesis::{record_weight, sample_subset, synthesize};
use crate::Result;

/// Train an EpsNet on the dataset in `dataset_dir`; writes `epsnet.epsn`
/// and `train_report.json` into `out`.
pub fn train_ddpm(cfg: &RunConfig, dataset_dir: &Path, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let ds = load_dataset_dir(dataset_dir)?;
    let (net, report) = train_eps_net(&ds, &schedule, &cfg.ddpm, derive_seed(cfg.seed, &[tag::DDPM_TRAIN]))?;
    std::fs::create_dir_all(out)?;
    net.save(out.join("epsnet.epsn"), &schedule)?;
    write_json(&out.join("train_report.json"), &report)?;
    Ok(report)
}

/// Synthesize `count` maps from `source` at forward step `k`. Each map fuses
/// a weight-proportional subset of `cfg.synthesis.subset_size` records; map
/// `i` draws from its own stream so outputs do not depend on `count`.
pub fn generate(cfg: &RunConfig, source: &MapDataset, k: usize, count: usize, checkpoint: Option<&Path>) -> Result<MapDataset> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    if k > schedule.steps() {
        return Err(ConfigError::Invalid(format!("k = {k} exceeds K = {}", schedule.steps())).into());
    }
    let denoiser: Box<dyn Denoiser> = match checkpoint.or(cfg.denoiser.checkpoint.as_deref()) {
        Some(p) => clipped(EpsNet::load(p, &schedule)?, cfg, &schedule),
        None => Box::new(gmm_denoiser(source, &schedule, cfg.denoiser.gmm_variance)?),
    };
    let weights: Vec<f64> = source.records().iter().map(|r| record_weight(r, &cfg.weight)).collect();
    let mut out = MapDataset::new(source.stats);
    for i in 0..count {
        let mut rng = stream(cfg.seed, &[tag::GENERATE, i as u64]);
        let picks = sample_subset(&weights, cfg.synthesis.subset_size, &mut rng);
        let subset: Vec<&EnvRecord> = picks.iter().map(|&j| &source.records()[j]).collect();
        let map = synthesize(
            &subset,
            k,
            &*denoiser,
            &schedule,
            &source.stats,
            &cfg.weight,
            cfg.synthesis.reverse_variance,
            &mut rng,
            i as u64,
        )?;
        out.push(EnvRecord::new(map, format!("gen:k={k}")))?;
    }
    Ok(out)
}

/// Success rate and mean return of a saved policy over a set of maps.
pub fn evaluate_checkpoint(cfg: &RunConfig, policy: &Path, maps: &[GridMap], episodes: usize) -> Result<EvalSummary> {
    cfg.validate()?;
    let policy = ActorCritic::load(policy)?;
    Ok(evaluate_map_set(&policy, maps, &cfg.nav, episodes, derive_seed(cfg.seed, &[tag::EVAL]))?)
}
