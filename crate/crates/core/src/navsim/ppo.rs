//! Rollout collection and clipped-surrogate policy optimization.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::policy::log_softmax;
use super::{ActorCritic, NavEnvInstance, NavError, NavWorld, Termination};
use crate::diffusion::net::{clip_global_norm, Adam};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyper {
    pub lanes: usize,
    pub horizon: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub gae_lambda: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            lanes: 8,
            horizon: 64,
            epochs: 4,
            minibatch: 128,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 1e-3,
            gae_lambda: 0.95,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoHyper {
    pub fn validate(&self) -> Result<(), NavError> {
        let bad = |m: &str| Err(NavError::BadConfig(m.to_string()));
        if self.lanes == 0 || self.minibatch == 0 {
            return bad("lanes and minibatch must be >= 1");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("learning rate must be > 0 and lambda in [0, 1]");
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 || !(self.max_grad_norm > 0.0) {
            return bad("loss coefficients must be >= 0 and grad norm > 0");
        }
        Ok(())
    }
}

/// Transitions from `lanes` independent streams, lane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub lanes: usize,
    pub horizon: usize,
    pub obs: Array2<f64>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value estimate after the last step of each lane, 0 if it ended an episode.
    pub last_values: Vec<f64>,
    /// Undiscounted returns of episodes completed inside the batch.
    pub episode_returns: Vec<f64>,
    pub successes: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Mean undiscounted return of completed episodes, or the per-lane reward
    /// sum when none completed.
    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            self.rewards.iter().sum::<f64>() / self.lanes.max(1) as f64
        } else {
            self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
        }
    }
}

struct Lane {
    obs: Vec<Vec<f64>>,
    actions: Vec<usize>,
    logp: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    last_value: f64,
    episode_returns: Vec<f64>,
    successes: usize,
}

fn run_lane(policy: &ActorCritic, world: &Arc<NavWorld>, horizon: usize, seed: u64) -> Result<Lane, NavError> {
    let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut lane = Lane {
        obs: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        logp: Vec::with_capacity(horizon),
        values: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        dones: Vec::with_capacity(horizon),
        last_value: 0.0,
        episode_returns: Vec::new(),
        successes: 0,
    };
    if horizon == 0 {
        return Ok(lane);
    }
    let mut task = NavEnvInstance::sample(world.clone(), &mut rng)?;
    let mut state = task.initial_state();
    let mut ep_return = 0.0;
    let mut done = false;
    for _ in 0..horizon {
        let obs = task.observe(&state);
        let (a, lp, v) = policy.act(&obs, &mut rng);
        let out = task.step(state, a);
        lane.obs.push(obs);
        lane.actions.push(a);
        lane.logp.push(lp);
        lane.values.push(v);
        lane.rewards.push(out.reward);
        lane.dones.push(out.done);
        ep_return += out.reward;
        done = out.done;
        state = out.state;
        if out.done {
            lane.episode_returns.push(ep_return);
            lane.successes += usize::from(out.cause == Some(Termination::Goal));
            ep_return = 0.0;
            task = NavEnvInstance::sample(world.clone(), &mut rng)?;
            state = task.initial_state();
        }
    }
    lane.last_value = if done { 0.0 } else { policy.value(&task.observe(&state)) };
    Ok(lane)
}

fn collect_ordered(
    policy: &ActorCritic,
    world: &Arc<NavWorld>,
    lanes: usize,
    horizon: usize,
    root: u64,
    order: &[usize],
) -> Result<RolloutBatch, NavError> {
    let mut slots: Vec<Option<Lane>> = (0..lanes).map(|_| None).collect();
    for &l in order {
        slots[l] = Some(run_lane(policy, world, horizon, derive_seed(root, &[l as u64]))?);
    }
    let dim = world.config.obs_dim();
    let mut batch = RolloutBatch {
        lanes,
        horizon,
        obs: Array2::zeros((lanes * horizon, dim)),
        actions: Vec::new(),
        logp: Vec::new(),
        values: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
        last_values: Vec::new(),
        episode_returns: Vec::new(),
        successes: 0,
    };
    for (l, lane) in slots.into_iter().enumerate() {
        let lane = lane.expect("every lane collected");
        for (t, o) in lane.obs.iter().enumerate() {
            batch.obs.row_mut(l * horizon + t).assign(&ndarray::ArrayView1::from(o.as_slice()));
        }
        batch.actions.extend(lane.actions);
        batch.logp.extend(lane.logp);
        batch.values.extend(lane.values);
        batch.rewards.extend(lane.rewards);
        batch.dones.extend(lane.dones);
        batch.last_values.push(lane.last_value);
        batch.episode_returns.extend(lane.episode_returns);
        batch.successes += lane.successes;
    }
    Ok(batch)
}

/// Collect `horizon` steps from each of `lanes` streams. Each lane draws from
/// its own stream derived from one value of `rng`, and lanes are assembled in
/// index order.
pub fn collect_rollouts(
    policy: &ActorCritic,
    world: &Arc<NavWorld>,
    lanes: usize,
    horizon: usize,
    rng: &mut Rng,
) -> Result<RolloutBatch, NavError> {
    let dim = world.config.obs_dim();
    if policy.obs_dim() != dim {
        return Err(NavError::ObsMismatch { expected: policy.obs_dim(), got: dim });
    }
    let root: u64 = rng.random();
    let order: Vec<usize> = (0..lanes).collect();
    collect_ordered(policy, world, lanes, horizon, root, &order)
}

/// Generalized advantage estimates and value targets for one lane.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { last_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Minibatch loss terms and gradients.
///
/// L = −mean(min(r·A, clip(r)·A)) + c_v·mean(½(V − R)²) − c_e·mean(H).
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss_and_grads(
    policy: &ActorCritic,
    obs: &Array2<f64>,
    actions: &[usize],
    old_logp: &[f64],
    advantages: &[f64],
    returns: &[f64],
    hyper: &PpoHyper,
) -> (f64, PpoStats, Vec<Array2<f64>>) {
    let b = actions.len() as f64;
    let (logits, values, cache) = policy.forward_cached(obs);
    let logp = log_softmax(&logits);
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    let mut dvalues = Array1::<f64>::zeros(values.len());
    let mut stats = PpoStats::default();
    let (lo, hi) = (1.0 - hyper.clip, 1.0 + hyper.clip);
    for i in 0..actions.len() {
        let row = logp.row(i);
        let p: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let a = actions[i];
        let r = (row[a] - old_logp[i]).exp();
        let adv = advantages[i];
        let unclipped = r * adv;
        let clipped = r.clamp(lo, hi) * adv;
        stats.surrogate += unclipped.min(clipped) / b;
        let g = if unclipped <= clipped { -adv * r / b } else { 0.0 };
        if unclipped > clipped {
            stats.clip_fraction += 1.0 / b;
        }
        let h: f64 = -row.iter().zip(&p).map(|(l, p)| p * l).sum::<f64>();
        stats.entropy += h / b;
        for j in 0..p.len() {
            let onehot = if j == a { 1.0 } else { 0.0 };
            dlogits[[i, j]] = g * (onehot - p[j]) + hyper.entropy_coef * p[j] * (row[j] + h) / b;
        }
        let dv = values[i] - returns[i];
        stats.value_loss += 0.5 * dv * dv / b;
        dvalues[i] = hyper.value_coef * dv / b;
    }
    let loss = -stats.surrogate + hyper.value_coef * stats.value_loss - hyper.entropy_coef * stats.entropy;
    let grads = policy.backward(&cache, &dlogits, &dvalues);
    (loss, stats, grads)
}

/// Adam state that persists across updates.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    adam: Adam<f64>,
}

impl PpoOptimizer {
    pub fn new(policy: &ActorCritic) -> Self {
        Self { adam: Adam::new(&policy.params) }
    }
}

/// GAE, advantage normalization, then `epochs` passes of shuffled minibatch
/// Adam steps. Returns the mean statistics over all minibatches.
pub fn ppo_update(
    policy: &mut ActorCritic,
    opt: &mut PpoOptimizer,
    batch: &RolloutBatch,
    hyper: &PpoHyper,
    gamma: f64,
    rng: &mut Rng,
) -> Result<PpoStats, NavError> {
    hyper.validate()?;
    if batch.is_empty() {
        return Err(NavError::EmptyBatch);
    }
    let (mut adv, mut ret) = (Vec::with_capacity(batch.len()), Vec::with_capacity(batch.len()));
    let h = batch.horizon;
    for l in 0..batch.lanes {
        let s = l * h..(l + 1) * h;
        let (a, r) = gae(
            &batch.rewards[s.clone()],
            &batch.values[s.clone()],
            &batch.dones[s],
            batch.last_values[l],
            gamma,
            hyper.gae_lambda,
        );
        adv.extend(a);
        ret.extend(r);
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter_mut().for_each(|a| *a = if sd > 1e-8 { (*a - mean) / sd } else { *a - mean });

    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mut total = PpoStats::default();
    let mut count = 0.0;
    for _ in 0..hyper.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(hyper.minibatch) {
            let obs = batch.obs.select(ndarray::Axis(0), chunk);
            let pick = |v: &[f64]| chunk.iter().map(|&i| v[i]).collect::<Vec<f64>>();
            let actions: Vec<usize> = chunk.iter().map(|&i| batch.actions[i]).collect();
            let (loss, stats, mut grads) =
                ppo_loss_and_grads(policy, &obs, &actions, &pick(&batch.logp), &pick(&adv), &pick(&ret), hyper);
            if !loss.is_finite() {
                return Err(NavError::NonFinite);
            }
            let norm = clip_global_norm(&mut grads, hyper.max_grad_norm);
            opt.adam.step(&mut policy.params, &grads, hyper.learning_rate);
            total.surrogate += stats.surrogate;
            total.value_loss += stats.value_loss;
            total.entropy += stats.entropy;
            total.clip_fraction += stats.clip_fraction;
            total.grad_norm += norm;
            count += 1.0;
        }
    }
    if count > 0.0 {
        total.surrogate /= count;
        total.value_loss /= count;
        total.entropy /= count;
        total.clip_fraction /= count;
        total.grad_norm /= count;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heightfield::GridMap;
    use crate::navsim::{evaluate_pairs, NavConfig, PolicyHyper};
    use crate::rng::stream;
    use std::collections::BTreeSet;

    fn flat_world(w: usize, h: usize) -> Arc<NavWorld> {
        Arc::new(NavWorld::new(GridMap::flat(w, h, 0.5, 0).unwrap(), &BTreeSet::new(), NavConfig::default()).unwrap())
    }

    fn max_rel_err(policy: &ActorCritic, f: &dyn Fn(&ActorCritic) -> f64, grads: &[Array2<f64>]) -> f64 {
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for (t, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let mut plus = policy.clone();
                let mut minus = policy.clone();
                *plus.params[t].iter_mut().nth(k).unwrap() += eps;
                *minus.params[t].iter_mut().nth(k).unwrap() -= eps;
                let num = (f(&plus) - f(&minus)) / (2.0 * eps);
                let ana = *g.iter().nth(k).unwrap();
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn bandit_gradients_match_finite_differences() {
        let mut rng = stream(11, &[]);
        let policy = ActorCritic::new(3, 2, &PolicyHyper { hidden: vec![5] }, &mut rng);
        let n = 12;
        let obs = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));
        let actions: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let (logits, _) = policy.forward(&obs);
        let cur = log_softmax(&logits);
        // Ratios spread across both clip regions and the interior, kept away
        // from the kinks at 1 ± clip.
        let shifts = [-0.6, -0.3, -0.1, 0.05, 0.1, 0.35, 0.6, -0.05, 0.0, 0.12, -0.4, 0.3];
        let old: Vec<f64> = (0..n).map(|i| cur[[i, actions[i]]] + shifts[i]).collect();
        let adv: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { -1.0 } else { 0.7 } * (1.0 + i as f64 / 10.0)).collect();
        let ret: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        for (vc, ec) in [(0.0, 0.0), (1.0, 0.0), (0.0, 0.05), (0.5, 0.01)] {
            let hyper = PpoHyper { value_coef: vc, entropy_coef: ec, ..PpoHyper::default() };
            let (_, stats, grads) = ppo_loss_and_grads(&policy, &obs, &actions, &old, &adv, &ret, &hyper);
            assert!(stats.clip_fraction > 0.0);
            let f = |p: &ActorCritic| ppo_loss_and_grads(p, &obs, &actions, &old, &adv, &ret, &hyper).0;
            let err = max_rel_err(&policy, &f, &grads);
            assert!(err <= 1e-4, "coefs ({vc}, {ec}) rel err {err}");
        }
    }

    #[test]
    fn gae_single_step_episodes() {
        let (a, r) = gae(&[1.0, 2.0], &[0.5, 0.5], &[true, true], 9.0, 0.9, 0.95);
        assert_eq!(a, vec![0.5, 1.5]);
        assert_eq!(r, vec![1.0, 2.0]);
        let (a, _) = gae(&[0.0, 1.0], &[0.0, 0.0], &[false, false], 2.0, 0.5, 1.0);
        assert!((a[1] - 2.0).abs() < 1e-12 && (a[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_advantage_leaves_params_unchanged() {
        let mut rng = stream(12, &[]);
        let mut policy = ActorCritic::new(4, 3, &PolicyHyper { hidden: vec![6] }, &mut rng);
        // Critic outputs exactly 0.25 everywhere.
        let k = policy.params.len();
        policy.params[k - 2].fill(0.0);
        policy.params[k - 1].fill(0.25);
        let n = 16;
        let batch = RolloutBatch {
            lanes: 1,
            horizon: n,
            obs: Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0)),
            actions: (0..n).map(|i| i % 3).collect(),
            logp: vec![-1.0; n],
            values: vec![0.25; n],
            rewards: vec![0.25; n],
            dones: vec![true; n],
            last_values: vec![0.0],
            episode_returns: vec![0.25; n],
            successes: 0,
        };
        let before = policy.clone();
        let hyper = PpoHyper { entropy_coef: 0.0, minibatch: 4, ..PpoHyper::default() };
        let mut opt = PpoOptimizer::new(&policy);
        ppo_update(&mut policy, &mut opt, &batch, &hyper, 0.99, &mut rng).unwrap();
        assert_eq!(policy, before);
        let hyper = PpoHyper { entropy_coef: 0.05, ..hyper };
        ppo_update(&mut policy, &mut opt, &batch, &hyper, 0.99, &mut rng).unwrap();
        assert_ne!(policy, before);
    }

    #[test]
    fn empty_horizon_gives_empty_batch() {
        let world = flat_world(8, 8);
        let policy = ActorCritic::new(world.config.obs_dim(), 9, &PolicyHyper::default(), &mut stream(1, &[]));
        let b = collect_rollouts(&policy, &world, 3, 0, &mut stream(2, &[])).unwrap();
        assert!(b.is_empty());
        let mut opt = PpoOptimizer::new(&policy);
        let mut p = policy.clone();
        assert!(matches!(
            ppo_update(&mut p, &mut opt, &b, &PpoHyper::default(), 0.99, &mut stream(3, &[])),
            Err(NavError::EmptyBatch)
        ));
    }

    #[test]
    fn lanes_are_order_independent() {
        let world = flat_world(10, 10);
        let policy = ActorCritic::new(world.config.obs_dim(), 9, &PolicyHyper::default(), &mut stream(1, &[]));
        let a = collect_ordered(&policy, &world, 3, 40, 77, &[0, 1, 2]).unwrap();
        let b = collect_ordered(&policy, &world, 3, 40, 77, &[2, 0, 1]).unwrap();
        assert_eq!(a, b);
        let c = collect_rollouts(&policy, &world, 2, 30, &mut stream(5, &[])).unwrap();
        let d = collect_rollouts(&policy, &world, 2, 30, &mut stream(5, &[])).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn stay_policy_rewards_are_step_penalty() {
        let world = flat_world(10, 10);
        let mut policy = ActorCritic::new(world.config.obs_dim(), 9, &PolicyHyper { hidden: vec![8] }, &mut stream(1, &[]));
        let k = policy.split_index();
        policy.params[k - 2].fill(0.0);
        policy.params[k - 1] = Array2::from_shape_fn((1, 9), |(_, j)| if j == 0 { 100.0 } else { 0.0 });
        let b = collect_rollouts(&policy, &world, 2, 20, &mut stream(2, &[])).unwrap();
        assert!(b.actions.iter().all(|&a| a == 0));
        assert!(b.rewards.iter().all(|&r| r == -world.config.reward.step_penalty));
    }

    /// 9×8 map whose only free row is y = 3, so every task lies on a 1×9 strip.
    fn corridor() -> Arc<NavWorld> {
        let mut fp = BTreeSet::new();
        for y in 0..8 {
            for x in 0..9 {
                if y != 3 {
                    fp.insert((x, y));
                }
            }
        }
        Arc::new(NavWorld::new(GridMap::flat(9, 8, 0.5, 0).unwrap(), &fp, NavConfig::default()).unwrap())
    }

    #[test]
    fn corridor_is_learned_within_100_updates() {
        let world = corridor();
        let pairs = world.admissible_pairs();
        assert!(!pairs.is_empty());
        let hyper = PpoHyper { lanes: 4, horizon: 32, minibatch: 64, ..PpoHyper::default() };
        let mut rng = stream(21, &[]);
        let mut policy = ActorCritic::new(world.config.obs_dim(), 9, &PolicyHyper::default(), &mut rng);
        let mut opt = PpoOptimizer::new(&policy);
        let mut solved_at = None;
        for u in 1..=100 {
            let batch = collect_rollouts(&policy, &world, hyper.lanes, hyper.horizon, &mut rng).unwrap();
            ppo_update(&mut policy, &mut opt, &batch, &hyper, 0.99, &mut rng).unwrap();
            if evaluate_pairs(&policy, &world, &pairs).success_rate == 1.0 {
                solved_at = Some(u);
                break;
            }
        }
        assert!(solved_at.is_some(), "corridor not solved in 100 updates");
    }
}
