//! Gridworld navigation over two-layer maps, success-rate evaluation, and a
//! small actor-critic learner.

mod policy;
mod ppo;

pub use policy::{ActorCritic, PolicyHyper};
pub use ppo::{collect_rollouts, gae, ppo_loss_and_grads, ppo_update, PpoHyper, PpoOptimizer, PpoStats, RolloutBatch};

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heightfield::{slope_map, GridMap};
use crate::rng::Rng;
use crate::terraingen::{instantiate_plants, segment_canopy};

#[derive(Debug, Error)]
pub enum NavError {
    #[error("map has {0} traversable cells, need at least 2")]
    TooFewFreeCells(usize),
    #[error("invalid navigation config: {0}")]
    BadConfig(String),
    #[error("policy expects {expected} observation features, environment produces {got}")]
    ObsMismatch { expected: usize, got: usize },
    #[error("empty rollout batch")]
    EmptyBatch,
    #[error("non-finite loss during update")]
    NonFinite,
    #[error("policy checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Number of discrete actions: stay plus eight compass moves.
pub const N_ACTIONS: usize = 9;

/// Cell offsets per action; index 0 stays, 1..=8 go N, NE, E, SE, S, SW, W, NW.
pub const MOVES: [(i64, i64); N_ACTIONS] =
    [(0, 0), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub gamma: f64,
    pub progress_gain: f64,
    pub step_penalty: f64,
    pub goal_bonus: f64,
    pub collision_penalty: f64,
    pub slope_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            progress_gain: 1.0,
            step_penalty: 0.05,
            goal_bonus: 10.0,
            collision_penalty: 0.5,
            slope_penalty: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), NavError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(NavError::BadConfig(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if !(self.goal_bonus > 0.0) {
            return Err(NavError::BadConfig("goal bonus must be > 0".into()));
        }
        let rest = [self.progress_gain, self.step_penalty, self.collision_penalty, self.slope_penalty];
        if rest.iter().any(|v| !v.is_finite()) {
            return Err(NavError::BadConfig("reward constants must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavConfig {
    pub slope_threshold_deg: f64,
    pub patch_half_width: usize,
    /// Height differences in the observation are clipped to ± this, meters.
    pub height_clip: f64,
    /// Episode horizon is this factor times the longer map side.
    pub max_steps_factor: usize,
    pub plant_min_height: f64,
    pub plant_min_crown_cells: usize,
    pub reward: RewardConfig,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            slope_threshold_deg: 20.0,
            patch_half_width: 4,
            height_clip: 1.0,
            max_steps_factor: 4,
            plant_min_height: 0.5,
            plant_min_crown_cells: 2,
            reward: RewardConfig::default(),
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<(), NavError> {
        self.reward.validate()?;
        if !(self.slope_threshold_deg > 0.0 && self.slope_threshold_deg < 90.0) {
            return Err(NavError::BadConfig("slope threshold must lie in (0, 90) degrees".into()));
        }
        if !(self.height_clip > 0.0) {
            return Err(NavError::BadConfig("height clip must be > 0".into()));
        }
        if self.max_steps_factor == 0 {
            return Err(NavError::BadConfig("max_steps_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Length of the observation vector produced under this config.
    pub fn obs_dim(&self) -> usize {
        let side = 2 * self.patch_half_width + 1;
        2 * side * side + 5
    }
}

/// A map together with its traversability mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NavWorld {
    pub map: GridMap,
    /// Row-major; `true` = untraversable.
    pub occupancy: Vec<bool>,
    pub config: NavConfig,
}

impl NavWorld {
    /// Occupancy is the union of steep cells and the given footprint cells.
    pub fn new(map: GridMap, footprints: &BTreeSet<(usize, usize)>, config: NavConfig) -> Result<Self, NavError> {
        config.validate()?;
        let slope = slope_map(&map);
        let w = map.width();
        let mut occupancy: Vec<bool> = slope.iter().map(|&s| s > config.slope_threshold_deg).collect();
        for &(x, y) in footprints {
            if x < w && y < map.height() {
                occupancy[y * w + x] = true;
            }
        }
        Ok(Self { map, occupancy, config })
    }

    /// Footprints come from segmenting the map's own canopy.
    pub fn from_map(map: GridMap, config: NavConfig) -> Result<Self, NavError> {
        let crowns = segment_canopy(&map, config.plant_min_height, config.plant_min_crown_cells);
        let footprints = instantiate_plants(&crowns);
        Self::new(map, &footprints, config)
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    pub fn free(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width()
            && (y as usize) < self.height()
            && !self.occupancy[y as usize * self.width() + x as usize]
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        (0..self.occupancy.len())
            .filter(|&i| !self.occupancy[i])
            .map(|i| (i % self.width(), i / self.width()))
            .collect()
    }

    pub fn min_separation(&self) -> f64 {
        0.5 * self.width().min(self.height()) as f64
    }

    pub fn max_steps(&self) -> usize {
        self.config.max_steps_factor * self.width().max(self.height())
    }

    /// Every ordered (start, goal) pair of free cells meeting the separation
    /// rule.
    pub fn admissible_pairs(&self) -> Vec<((usize, usize), (usize, usize))> {
        let free = self.free_cells();
        let sep = self.min_separation();
        let mut out = Vec::new();
        for &a in &free {
            for &b in &free {
                if a != b && dist(a, b) >= sep {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Rejection-sample a start/goal pair. When no pair meets the separation
    /// rule the most separated pair seen is used.
    pub fn sample_pair(&self, rng: &mut Rng) -> Result<((usize, usize), (usize, usize)), NavError> {
        let free = self.free_cells();
        if free.len() < 2 {
            return Err(NavError::TooFewFreeCells(free.len()));
        }
        let sep = self.min_separation();
        let mut best: Option<((usize, usize), (usize, usize), f64)> = None;
        for _ in 0..1000 {
            let a = free[rng.random_range(0..free.len())];
            let b = free[rng.random_range(0..free.len())];
            if a == b {
                continue;
            }
            let d = dist(a, b);
            if d >= sep {
                return Ok((a, b));
            }
            if best.is_none_or(|(_, _, bd)| d > bd) {
                best = Some((a, b, d));
            }
        }
        let pairs = self.admissible_pairs();
        if !pairs.is_empty() {
            return Ok(pairs[rng.random_range(0..pairs.len())]);
        }
        match best {
            Some((a, b, _)) => Ok((a, b)),
            None => Ok((free[0], free[1])),
        }
    }
}

fn dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    dx.hypot(dy)
}

/// One start/goal task on a world.
#[derive(Debug, Clone, PartialEq)]
pub struct NavEnvInstance {
    pub world: Arc<NavWorld>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RobotState {
    pub cell: (usize, usize),
    pub steps_elapsed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Goal,
    Timeout,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: RobotState,
    pub reward: f64,
    pub done: bool,
    pub cause: Option<Termination>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    /// Discounted return.
    pub discounted_return: f64,
    pub undiscounted_return: f64,
    pub steps: usize,
    pub cause: Termination,
}

/// Build a task on `map`: occupancy from slope and footprints, then a sampled
/// start/goal pair.
pub fn build_nav_env(
    map: GridMap,
    slope_threshold_deg: f64,
    footprints: &BTreeSet<(usize, usize)>,
    rng: &mut Rng,
) -> Result<NavEnvInstance, NavError> {
    let config = NavConfig { slope_threshold_deg, ..NavConfig::default() };
    let world = Arc::new(NavWorld::new(map, footprints, config)?);
    NavEnvInstance::sample(world, rng)
}

impl NavEnvInstance {
    pub fn sample(world: Arc<NavWorld>, rng: &mut Rng) -> Result<Self, NavError> {
        let (start, goal) = world.sample_pair(rng)?;
        Ok(Self::with_pair(world, start, goal))
    }

    pub fn with_pair(world: Arc<NavWorld>, start: (usize, usize), goal: (usize, usize)) -> Self {
        let max_steps = world.max_steps();
        Self { world, start, goal, max_steps }
    }

    pub fn initial_state(&self) -> RobotState {
        RobotState { cell: self.start, steps_elapsed: 0 }
    }

    fn blocked(&self, cell: (usize, usize)) -> bool {
        MOVES[1..]
            .iter()
            .all(|&(dx, dy)| !self.world.free(cell.0 as i64 + dx, cell.1 as i64 + dy))
    }

    /// Apply one action.
    pub fn step(&self, state: RobotState, action: usize) -> StepOutcome {
        let r = &self.world.config.reward;
        let (dx, dy) = MOVES[action.min(N_ACTIONS - 1)];
        let (nx, ny) = (state.cell.0 as i64 + dx, state.cell.1 as i64 + dy);
        let mut reward = -r.step_penalty;
        let next = if action == 0 {
            state.cell
        } else if self.world.free(nx, ny) {
            (nx as usize, ny as usize)
        } else {
            reward -= r.collision_penalty;
            state.cell
        };
        reward += r.progress_gain * (dist(state.cell, self.goal) - dist(next, self.goal));
        let m = &self.world.map;
        let dz = m.terrain_at(next.0, next.1) as f64 - m.terrain_at(state.cell.0, state.cell.1) as f64;
        reward -= r.slope_penalty * dz.abs();
        let state = RobotState { cell: next, steps_elapsed: state.steps_elapsed + 1 };
        let cause = if next == self.goal {
            reward += r.goal_bonus;
            Some(Termination::Goal)
        } else if self.blocked(next) {
            Some(Termination::Blocked)
        } else if state.steps_elapsed >= self.max_steps {
            Some(Termination::Timeout)
        } else {
            None
        };
        StepOutcome { state, reward, done: cause.is_some(), cause }
    }

    /// Local occupancy and clipped relative heights around the robot, followed
    /// by the goal offset features.
    pub fn observe(&self, state: &RobotState) -> Vec<f64> {
        let cfg = &self.world.config;
        let h = cfg.patch_half_width as i64;
        let m = &self.world.map;
        let (cx, cy) = (state.cell.0 as i64, state.cell.1 as i64);
        let z0 = m.terrain_at(state.cell.0, state.cell.1) as f64;
        let side = (2 * h + 1) as usize;
        let mut occ = Vec::with_capacity(side * side);
        let mut hts = Vec::with_capacity(side * side);
        for y in cy - h..=cy + h {
            for x in cx - h..=cx + h {
                let inside = x >= 0 && y >= 0 && (x as usize) < m.width() && (y as usize) < m.height();
                occ.push(if self.world.free(x, y) { 0.0 } else { 1.0 });
                hts.push(if inside {
                    let dz = m.terrain_at(x as usize, y as usize) as f64 - z0;
                    dz.clamp(-cfg.height_clip, cfg.height_clip) / cfg.height_clip
                } else {
                    0.0
                });
            }
        }
        let scale = m.width().max(m.height()) as f64;
        let gx = self.goal.0 as f64 - state.cell.0 as f64;
        let gy = self.goal.1 as f64 - state.cell.1 as f64;
        let d = gx.hypot(gy);
        let (ux, uy) = if d > 0.0 { (gx / d, gy / d) } else { (0.0, 0.0) };
        occ.extend(hts);
        occ.extend([gx / scale, gy / scale, d / scale, ux, uy]);
        occ
    }
}

/// Anything that picks a deterministic action for a task state.
pub trait NavPolicy {
    fn greedy_action(&self, task: &NavEnvInstance, state: &RobotState) -> usize;
}

impl<P: NavPolicy + ?Sized> NavPolicy for &P {
    fn greedy_action(&self, task: &NavEnvInstance, state: &RobotState) -> usize {
        (**self).greedy_action(task, state)
    }
}

/// Roll out one episode with greedy actions.
pub fn run_episode<P: NavPolicy + ?Sized>(policy: &P, task: &NavEnvInstance) -> EpisodeResult {
    let gamma = task.world.config.reward.gamma;
    let mut state = task.initial_state();
    let (mut disc, mut total, mut g) = (0.0, 0.0, 1.0);
    loop {
        let out = task.step(state, policy.greedy_action(task, &state));
        disc += g * out.reward;
        total += out.reward;
        g *= gamma;
        state = out.state;
        if let Some(cause) = out.cause {
            return EpisodeResult {
                success: cause == Termination::Goal,
                discounted_return: disc,
                undiscounted_return: total,
                steps: state.steps_elapsed,
                cause,
            };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub success_rate: f64,
    /// Mean discounted return over the episodes.
    pub mean_return: f64,
    pub episodes: usize,
}

/// Greedy episodes over the given start/goal pairs.
pub fn evaluate_pairs<P: NavPolicy + ?Sized>(
    policy: &P,
    world: &Arc<NavWorld>,
    pairs: &[((usize, usize), (usize, usize))],
) -> EvalSummary {
    if pairs.is_empty() {
        return EvalSummary::default();
    }
    let (mut wins, mut ret) = (0usize, 0.0);
    for &(s, g) in pairs {
        let res = run_episode(policy, &NavEnvInstance::with_pair(world.clone(), s, g));
        wins += usize::from(res.success);
        ret += res.discounted_return;
    }
    let n = pairs.len() as f64;
    EvalSummary { success_rate: wins as f64 / n, mean_return: ret / n, episodes: pairs.len() }
}

/// Success rate and mean return over `m` independently sampled pairs.
pub fn evaluate_success_rate<P: NavPolicy + ?Sized>(
    policy: &P,
    world: &Arc<NavWorld>,
    m: usize,
    rng: &mut Rng,
) -> Result<EvalSummary, NavError> {
    let pairs = (0..m.max(1))
        .map(|_| world.sample_pair(rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate_pairs(policy, world, &pairs))
}
