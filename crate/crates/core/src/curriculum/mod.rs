//! The curriculum loop: UCB environment selection, policy updates, success
//! rate bookkeeping, dataset expansion and stale-record refresh.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{Denoiser, NoiseSchedule, ReverseVariance};
use crate::heightfield::{dataset_variability, EnvId, EnvRecord, GridMap, HeightfieldError, MapDataset, VariabilityParams};
use crate::navsim::{
    collect_rollouts, evaluate_success_rate, ppo_update, ActorCritic, EvalSummary, NavConfig, NavError, NavWorld,
    PolicyHyper, PpoHyper, PpoOptimizer, N_ACTIONS,
};
use crate::rng::{stream, tag, Rng};
use crate::synthesis::{
    difficulty_weight, record_weight, sample_subset, select_forward_step, synthesize, synthesize_weighted,
    SynthesisError, WeightParams,
};
use crate::terraingen::{
    apg_adapt, gen_parametric_terrain, pg_sample, procedural_record, ApgState, Family, MapShape, TerrainError,
    TerrainRanges,
};

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("preset {0} needs a denoiser")]
    MissingDenoiser(Preset),
    #[error("invalid curriculum config: {0}")]
    BadConfig(String),
    #[error("metrics sink failed: {0}")]
    Sink(#[source] std::io::Error),
    #[error(transparent)]
    Heightfield(#[from] HeightfieldError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Nav(#[from] NavError),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
}

/// Loop variants: the full method and its ablations and baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "adept")]
    Adept,
    #[serde(rename = "dept")]
    Dept,
    #[serde(rename = "apg")]
    Apg,
    #[serde(rename = "pg")]
    Pg,
    #[serde(rename = "n-adept")]
    NAdept,
    #[serde(rename = "n-ept")]
    NEpt,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::Adept, Preset::Dept, Preset::Apg, Preset::Pg, Preset::NAdept, Preset::NEpt];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Adept => "adept",
            Preset::Dept => "dept",
            Preset::Apg => "apg",
            Preset::Pg => "pg",
            Preset::NAdept => "n-adept",
            Preset::NEpt => "n-ept",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Whether environments are chosen by UCB rather than uniformly.
    pub fn uses_ucb(self) -> bool {
        matches!(self, Preset::Adept | Preset::NAdept)
    }

    pub fn uses_denoiser(self) -> bool {
        matches!(self, Preset::Adept | Preset::Dept)
    }

    pub fn generates(self) -> bool {
        !matches!(self, Preset::NAdept | Preset::NEpt)
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Dataset plus selection bookkeeping carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub dataset: MapDataset,
    pub epoch: usize,
    pub total_selections: u64,
    pub ucb_c: f64,
    pub weight: WeightParams,
    pub seed: u64,
    pub last_selected: Option<EnvId>,
}

impl CurriculumState {
    pub fn new(dataset: MapDataset, ucb_c: f64, weight: WeightParams, seed: u64) -> Self {
        let total_selections = dataset.records().iter().map(|r| r.select_count).sum();
        Self { dataset, epoch: 0, total_selections, ucb_c, weight, seed, last_selected: None }
    }
}

/// UCB score w + c·√(ln T / N); unvisited records score +∞.
pub fn ucb_score(record: &EnvRecord, total: u64, c: f64) -> f64 {
    if record.select_count == 0 {
        return f64::INFINITY;
    }
    let t = (total.max(1) as f64).ln();
    record.weight + c * (t / record.select_count as f64).sqrt()
}

/// Highest UCB score, lowest id on ties.
pub fn select_env(state: &CurriculumState) -> Result<EnvId, CurriculumError> {
    let mut best: Option<(f64, EnvId)> = None;
    for r in state.dataset.records() {
        let s = ucb_score(r, state.total_selections, state.ucb_c);
        let better = match best {
            None => true,
            Some((bs, bid)) => s > bs || (s == bs && r.id() < bid),
        };
        if better {
            best = Some((s, r.id()));
        }
    }
    best.map(|(_, id)| id).ok_or(CurriculumError::EmptyDataset)
}

fn set_success(record: &mut EnvRecord, success_rate: f64, epoch: usize, weight: &WeightParams) {
    let s = success_rate.clamp(0.0, 1.0);
    record.success_rate = Some(s);
    record.weight = difficulty_weight(s, weight);
    record.last_eval_epoch = epoch as i64;
}

/// Store a fresh success rate for a selected environment.
pub fn record_outcome(state: &mut CurriculumState, id: EnvId, success_rate: f64) -> Result<(), CurriculumError> {
    let (epoch, weight) = (state.epoch, state.weight);
    let record = state.dataset.get_mut(id)?;
    set_success(record, success_rate, epoch, &weight);
    record.select_count += 1;
    state.total_selections += 1;
    state.last_selected = Some(id);
    Ok(())
}

/// Re-evaluate up to `budget` records with the oldest evaluation epoch (ties
/// by id), skipping the most recently selected one. Returns the ids touched.
pub fn subsample_refresh<E>(
    state: &mut CurriculumState,
    budget: usize,
    mut evaluate: impl FnMut(&EnvRecord) -> Result<f64, E>,
) -> Result<Vec<EnvId>, E> {
    let mut candidates: Vec<(i64, EnvId)> = state
        .dataset
        .records()
        .iter()
        .filter(|r| Some(r.id()) != state.last_selected)
        .map(|r| (r.last_eval_epoch, r.id()))
        .collect();
    candidates.sort_unstable();
    candidates.truncate(budget);
    let (epoch, weight) = (state.epoch, state.weight);
    let mut touched = Vec::with_capacity(candidates.len());
    for (_, id) in candidates {
        let record = state.dataset.get(id).expect("candidate ids come from the dataset");
        let s = evaluate(record)?;
        let record = state.dataset.get_mut(id).expect("candidate ids come from the dataset");
        set_success(record, s, epoch, &weight);
        touched.push(id);
    }
    Ok(touched)
}

/// Synthesis settings for one expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpandSpec {
    /// Number of new environments N.
    pub count: usize,
    /// Maps fused per new environment n.
    pub subset_size: usize,
    pub variability: VariabilityParams,
    pub variance: ReverseVariance,
    /// Uniform fusion weights, uniform subsets and k = K instead of the
    /// weighted, variability-scheduled path.
    pub uniform: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandReport {
    pub lambda_var: f64,
    pub k: usize,
    pub ids: Vec<EnvId>,
}

/// Generate `spec.count` environments by diffusion synthesis and append
/// them. New map `i` draws from a stream derived from `(seed, epoch, i)`, so
/// its content does not depend on generation order.
pub fn expand_dataset<D: Denoiser + ?Sized>(
    state: &mut CurriculumState,
    spec: &ExpandSpec,
    denoiser: &D,
    schedule: &NoiseSchedule,
) -> Result<ExpandReport, CurriculumError> {
    if state.dataset.is_empty() {
        return Err(CurriculumError::EmptyDataset);
    }
    let lambda_var = dataset_variability(&state.dataset, &spec.variability)?;
    let k = if spec.uniform { schedule.steps() } else { select_forward_step(lambda_var, schedule.steps()) };
    if spec.count == 0 {
        return Ok(ExpandReport { lambda_var, k, ids: Vec::new() });
    }
    let base = state.dataset.next_id();
    let order: Vec<usize> = (0..spec.count).collect();
    let maps = synthesize_batch(state, spec, denoiser, schedule, k, base, &order)?;
    let source = if spec.uniform { "dept" } else { "adept" };
    state.dataset.reserve_ids(spec.count as u64);
    let mut ids = Vec::with_capacity(maps.len());
    for m in maps {
        ids.push(m.id);
        state.dataset.push(EnvRecord::new(m, source))?;
    }
    Ok(ExpandReport { lambda_var, k, ids })
}

/// Maps for indices `order`, returned in index order.
fn synthesize_batch<D: Denoiser + ?Sized>(
    state: &CurriculumState,
    spec: &ExpandSpec,
    denoiser: &D,
    schedule: &NoiseSchedule,
    k: usize,
    base: EnvId,
    order: &[usize],
) -> Result<Vec<GridMap>, CurriculumError> {
    let records = state.dataset.records();
    let weights: Vec<f64> = if spec.uniform {
        vec![1.0; records.len()]
    } else {
        records.iter().map(|r| record_weight(r, &state.weight)).collect()
    };
    let mut out: Vec<Option<GridMap>> = vec![None; order.len()];
    for &i in order {
        let mut rng = stream(state.seed, &[tag::EXPAND, state.epoch as u64, i as u64]);
        let picks = sample_subset(&weights, spec.subset_size.max(1), &mut rng);
        let subset: Vec<&EnvRecord> = picks.iter().map(|&j| &records[j]).collect();
        let id = base + i as EnvId;
        let map = if spec.uniform {
            let maps: Vec<&GridMap> = subset.iter().map(|r| &r.map).collect();
            let w = vec![1.0; maps.len()];
            synthesize_weighted(&maps, &w, k, denoiser, schedule, &state.dataset.stats, spec.variance, &mut rng, id)?
        } else {
            synthesize(&subset, k, denoiser, schedule, &state.dataset.stats, &state.weight, spec.variance, &mut rng, id)?
        };
        out[i] = Some(map);
    }
    Ok(out.into_iter().map(|m| m.expect("every index generated")).collect())
}

/// Running maximum of absolute returns; the normalized value is the raw
/// return over the bound after it has absorbed that return.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunningBound {
    pub bound: f64,
}

impl RunningBound {
    pub fn normalize(&mut self, raw: f64) -> f64 {
        self.bound = self.bound.max(raw.abs());
        if self.bound == 0.0 {
            0.0
        } else {
            raw / self.bound
        }
    }
}

/// Settings for [`run_acrl`].
#[derive(Debug, Clone, PartialEq)]
pub struct AcrlConfig {
    pub preset: Preset,
    pub seed: u64,
    pub epochs: usize,
    pub expand_period: usize,
    pub expand_count: usize,
    pub subset_size: usize,
    pub refresh_budget: usize,
    pub eval_episodes: usize,
    pub ucb_c: f64,
    pub weight: WeightParams,
    pub variability: VariabilityParams,
    pub reverse_variance: ReverseVariance,
    /// Moving-average window of the convergence test; 0 disables it.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub nav: NavConfig,
    pub ppo: PpoHyper,
    pub policy: PolicyHyper,
    pub terrain: TerrainRanges,
    pub shape: MapShape,
    pub apg_initial: f64,
    pub apg_rate: f64,
    pub record_wall_time: bool,
}

impl Default for AcrlConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Adept,
            seed: 0,
            epochs: 100,
            expand_period: 5,
            expand_count: 8,
            subset_size: 4,
            refresh_budget: 2,
            eval_episodes: 8,
            ucb_c: 0.5,
            weight: WeightParams::default(),
            variability: VariabilityParams { components: 3, downsample: 2, reference: 1.0 },
            reverse_variance: ReverseVariance::default(),
            convergence_window: 20,
            convergence_tol: 1e-3,
            nav: NavConfig::default(),
            ppo: PpoHyper::default(),
            policy: PolicyHyper::default(),
            terrain: TerrainRanges::default(),
            shape: MapShape::default(),
            apg_initial: 0.3,
            apg_rate: 0.05,
            record_wall_time: false,
        }
    }
}

impl AcrlConfig {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        let bad = |m: &str| Err(CurriculumError::BadConfig(m.to_string()));
        if self.expand_period == 0 {
            return bad("expand_period must be >= 1");
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be >= 1");
        }
        if !(self.ucb_c >= 0.0 && self.ucb_c.is_finite()) {
            return bad("ucb c must be >= 0");
        }
        if !(self.convergence_tol >= 0.0) {
            return bad("convergence tolerance must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.apg_initial) || !(self.apg_rate >= 0.0) {
            return bad("apg initial difficulty must lie in [0, 1] and rate >= 0");
        }
        self.weight.validate()?;
        self.nav.validate()?;
        self.ppo.validate()?;
        self.terrain.validate()?;
        Ok(())
    }
}

/// One row of per-epoch metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub selected_env: EnvId,
    pub train_return: f64,
    pub eval_return: f64,
    pub norm_return: f64,
    pub eval_success: f64,
    pub lambda_var: f64,
    pub chosen_k: usize,
    pub dataset_size: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct AcrlOutcome {
    pub policy: ActorCritic,
    pub metrics: Vec<EpochMetrics>,
    pub state: CurriculumState,
    pub apg: Option<ApgState>,
    pub converged_at: Option<usize>,
}

/// Navigation worlds keyed by environment id, built on first use.
#[derive(Debug, Default)]
pub struct WorldCache {
    worlds: BTreeMap<EnvId, Arc<NavWorld>>,
}

impl WorldCache {
    pub fn get(&mut self, record: &EnvRecord, nav: &NavConfig) -> Result<Arc<NavWorld>, NavError> {
        if let Some(w) = self.worlds.get(&record.id()) {
            return Ok(w.clone());
        }
        let w = Arc::new(NavWorld::from_map(record.map.clone(), *nav)?);
        self.worlds.insert(record.id(), w.clone());
        Ok(w)
    }
}

/// Evaluate on a world, treating maps without two free cells as failures.
pub fn evaluate_world(policy: &ActorCritic, world: &Arc<NavWorld>, episodes: usize, rng: &mut Rng) -> Result<EvalSummary, NavError> {
    match evaluate_success_rate(policy, world, episodes, rng) {
        Err(NavError::TooFewFreeCells(_)) => Ok(EvalSummary { success_rate: 0.0, mean_return: 0.0, episodes: 0 }),
        other => other,
    }
}

/// Mean success and return over a set of maps; maps with fewer than two free
/// cells are skipped.
pub fn evaluate_map_set(
    policy: &ActorCritic,
    maps: &[GridMap],
    nav: &NavConfig,
    episodes_per_map: usize,
    seed: u64,
) -> Result<EvalSummary, NavError> {
    let (mut s, mut r, mut n) = (0.0, 0.0, 0usize);
    for (i, m) in maps.iter().enumerate() {
        let world = Arc::new(NavWorld::from_map(m.clone(), *nav)?);
        if world.free_cells().len() < 2 {
            continue;
        }
        let mut rng = stream(seed, &[tag::EVAL, i as u64]);
        let e = evaluate_success_rate(policy, &world, episodes_per_map, &mut rng)?;
        s += e.success_rate;
        r += e.mean_return;
        n += 1;
    }
    if n == 0 {
        return Ok(EvalSummary::default());
    }
    Ok(EvalSummary { success_rate: s / n as f64, mean_return: r / n as f64, episodes: n * episodes_per_map })
}

fn moving_average(xs: &[f64], window: usize) -> f64 {
    let tail = &xs[xs.len() - window..];
    tail.iter().sum::<f64>() / window as f64
}

/// Run the curriculum loop. `on_epoch` sees every metrics row as soon as it
/// is produced, so a failing run still leaves its completed rows behind.
pub fn run_acrl(
    cfg: &AcrlConfig,
    dataset: MapDataset,
    denoiser: Option<&dyn Denoiser>,
    schedule: &NoiseSchedule,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> std::io::Result<()>,
) -> Result<AcrlOutcome, CurriculumError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(CurriculumError::EmptyDataset);
    }
    if cfg.epochs > 0 && cfg.preset.uses_denoiser() && denoiser.is_none() {
        return Err(CurriculumError::MissingDenoiser(cfg.preset));
    }
    let seed = cfg.seed;
    let mut state = CurriculumState::new(dataset, cfg.ucb_c, cfg.weight, seed);
    let obs_dim = cfg.nav.obs_dim();
    let mut policy = ActorCritic::new(obs_dim, N_ACTIONS, &cfg.policy, &mut stream(seed, &[tag::POLICY_INIT]));
    let mut opt = PpoOptimizer::new(&policy);
    let mut apg = match cfg.preset {
        Preset::Apg => Some(ApgState::new(cfg.terrain.clone(), cfg.apg_initial, cfg.apg_rate)?),
        _ => None,
    };
    let mut worlds = WorldCache::default();
    let mut bound = RunningBound::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut norm_history = Vec::with_capacity(cfg.epochs);
    let mut lambda_var = if cfg.epochs > 0 && state.dataset.len() >= 2 {
        dataset_variability(&state.dataset, &cfg.variability)?
    } else {
        0.0
    };
    let mut chosen_k = match cfg.preset {
        Preset::Adept => select_forward_step(lambda_var, schedule.steps()),
        Preset::Dept => schedule.steps(),
        _ => 0,
    };
    let mut converged_at = None;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let id = if cfg.preset.uses_ucb() {
            select_env(&state)?
        } else {
            let mut rng = stream(seed, &[tag::SELECT, epoch as u64]);
            state.dataset.records()[rng.random_range(0..state.dataset.len())].id()
        };
        let record = state.dataset.get(id)?;
        let family = Family::from_provenance(&record.provenance);
        let world = worlds.get(record, &cfg.nav)?;

        let mut train_return = 0.0;
        if world.free_cells().len() >= 2 {
            let mut rng = stream(seed, &[tag::ROLLOUT, epoch as u64]);
            let batch = collect_rollouts(&policy, &world, cfg.ppo.lanes, cfg.ppo.horizon, &mut rng)?;
            if !batch.is_empty() {
                train_return = batch.mean_return();
                let mut rng = stream(seed, &[tag::PPO, epoch as u64]);
                ppo_update(&mut policy, &mut opt, &batch, &cfg.ppo, cfg.nav.reward.gamma, &mut rng)?;
            }
        }
        let mut rng = stream(seed, &[tag::EVAL, epoch as u64]);
        let eval = evaluate_world(&policy, &world, cfg.eval_episodes, &mut rng)?;
        record_outcome(&mut state, id, eval.success_rate)?;
        if let (Some(apg), Some(f)) = (apg.as_mut(), family) {
            if apg.difficulty_of(f).is_ok() {
                apg_adapt(apg, f, eval.success_rate, difficulty_weight(eval.success_rate, &cfg.weight), &cfg.weight)?;
            }
        }

        subsample_refresh(&mut state, cfg.refresh_budget, |r| -> Result<f64, NavError> {
            let w = worlds.get(r, &cfg.nav)?;
            let mut rng = stream(seed, &[tag::REFRESH, epoch as u64, r.id()]);
            Ok(evaluate_world(&policy, &w, cfg.eval_episodes, &mut rng)?.success_rate)
        })?;

        if cfg.preset.generates() && (epoch + 1) % cfg.expand_period == 0 {
            let report = expand(cfg, &mut state, apg.as_ref(), denoiser, schedule)?;
            lambda_var = report.lambda_var;
            chosen_k = report.k;
        }

        let norm = bound.normalize(eval.mean_return);
        norm_history.push(norm);
        let row = EpochMetrics {
            epoch,
            selected_env: id,
            train_return,
            eval_return: eval.mean_return,
            norm_return: norm,
            eval_success: eval.success_rate,
            lambda_var,
            chosen_k,
            dataset_size: state.dataset.len(),
            wall_ms: if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
        };
        on_epoch(&row).map_err(CurriculumError::Sink)?;
        metrics.push(row);

        let w = cfg.convergence_window;
        if w > 0 && norm_history.len() > 2 * w {
            let now = moving_average(&norm_history, w);
            let before = moving_average(&norm_history[..norm_history.len() - 1], w);
            if (now - before).abs() <= cfg.convergence_tol * before.abs().max(1e-12) {
                converged_at = Some(epoch);
                break;
            }
        }
    }
    Ok(AcrlOutcome { policy, metrics, state, apg, converged_at })
}

fn expand(
    cfg: &AcrlConfig,
    state: &mut CurriculumState,
    apg: Option<&ApgState>,
    denoiser: Option<&dyn Denoiser>,
    schedule: &NoiseSchedule,
) -> Result<ExpandReport, CurriculumError> {
    let spec = ExpandSpec {
        count: cfg.expand_count,
        subset_size: cfg.subset_size,
        variability: cfg.variability,
        variance: cfg.reverse_variance,
        uniform: cfg.preset == Preset::Dept,
    };
    match cfg.preset {
        Preset::Adept | Preset::Dept => {
            let d = denoiser.ok_or(CurriculumError::MissingDenoiser(cfg.preset))?;
            expand_dataset(state, &spec, d, schedule)
        }
        Preset::Pg | Preset::Apg => {
            let base = state.dataset.reserve_ids(cfg.expand_count as u64);
            let source = cfg.preset.name();
            let mut ids = Vec::with_capacity(cfg.expand_count);
            for i in 0..cfg.expand_count {
                let mut rng = stream(state.seed, &[tag::EXPAND, state.epoch as u64, i as u64]);
                let params = match apg {
                    Some(a) => {
                        let f = cfg.terrain.families[i % cfg.terrain.families.len()];
                        a.params_for(f, &mut rng)?
                    }
                    None => pg_sample(&cfg.terrain, &mut rng)?,
                };
                let id = base + i as EnvId;
                let map = gen_parametric_terrain(&params, cfg.shape, &mut rng, id)?;
                state.dataset.push(procedural_record(map, source, params.family))?;
                ids.push(id);
            }
            let lambda_var = dataset_variability(&state.dataset, &cfg.variability)?;
            Ok(ExpandReport { lambda_var, k: 0, ids })
        }
        Preset::NAdept | Preset::NEpt => Ok(ExpandReport { lambda_var: 0.0, k: 0, ids: Vec::new() }),
    }
}
