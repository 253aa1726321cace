//! Actor-critic network: two independent tanh MLPs over the observation.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{NavEnvInstance, NavError, NavPolicy, RobotState};
use crate::diffusion::net::{linear, linear_backward};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"NAVP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyHyper {
    pub hidden: Vec<usize>,
}

impl Default for PolicyHyper {
    fn default() -> Self {
        Self { hidden: vec![64, 64] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    obs_dim: usize,
    n_actions: usize,
    hidden: Vec<usize>,
    /// Actor `[W, b]*`, then critic `[W, b]*`; biases are 1×C rows.
    pub(crate) params: Vec<Array2<f64>>,
}

/// Per-layer inputs and post-activation outputs of one MLP pass.
pub(crate) struct MlpCache {
    inputs: Vec<Array2<f64>>,
    hidden_out: Vec<Array2<f64>>,
}

fn init_mlp(dims: &[usize], out_scale: f64, rng: &mut Rng) -> Vec<Array2<f64>> {
    let mut p = Vec::new();
    for (i, win) in dims.windows(2).enumerate() {
        let last = i + 2 == dims.len();
        let std = if last { out_scale } else { 1.0 } / (win[0] as f64).sqrt();
        p.push(Array2::from_shape_simple_fn((win[0], win[1]), || std * rng.sample::<f64, _>(StandardNormal)));
        p.push(Array2::zeros((1, win[1])));
    }
    p
}

fn mlp_forward(params: &[Array2<f64>], x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
    let layers = params.len() / 2;
    let mut cache = MlpCache { inputs: Vec::with_capacity(layers), hidden_out: Vec::new() };
    let mut h = x.clone();
    for l in 0..layers {
        let y = linear(&h, &params[2 * l], &params[2 * l + 1]);
        cache.inputs.push(h);
        if l + 1 < layers {
            h = y.mapv(f64::tanh);
            cache.hidden_out.push(h.clone());
        } else {
            h = y;
        }
    }
    (h, cache)
}

fn mlp_backward(params: &[Array2<f64>], cache: &MlpCache, dout: &Array2<f64>) -> Vec<Array2<f64>> {
    let layers = params.len() / 2;
    let mut grads = vec![Array2::zeros((0, 0)); params.len()];
    let mut dy = dout.clone();
    for l in (0..layers).rev() {
        let (dx, dw, db) = linear_backward(&cache.inputs[l], &params[2 * l], &dy);
        grads[2 * l] = dw;
        grads[2 * l + 1] = db;
        if l > 0 {
            let t = &cache.hidden_out[l - 1];
            dy = dx * &t.mapv(|v| 1.0 - v * v);
        }
    }
    grads
}

/// Log-softmax of each row.
pub(crate) fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.mapv_inplace(|v| v - z);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NavError> {
        let s = self
            .bytes
            .get(self.off..self.off + n)
            .ok_or_else(|| NavError::Checkpoint("truncated checkpoint".into()))?;
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NavError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) struct AcCache {
    actor: MlpCache,
    critic: MlpCache,
}

impl ActorCritic {
    pub fn new(obs_dim: usize, n_actions: usize, hyper: &PolicyHyper, rng: &mut Rng) -> Self {
        let mut dims = vec![obs_dim];
        dims.extend(&hyper.hidden);
        let mut actor_dims = dims.clone();
        actor_dims.push(n_actions);
        let mut critic_dims = dims;
        critic_dims.push(1);
        let mut params = init_mlp(&actor_dims, 0.01, rng);
        params.extend(init_mlp(&critic_dims, 1.0, rng));
        Self { obs_dim, n_actions, hidden: hyper.hidden.clone(), params }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Weight and bias matrices, actor layers first, then critic layers.
    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    #[cfg(test)]
    pub(crate) fn split_index(&self) -> usize {
        self.split()
    }

    fn split(&self) -> usize {
        2 * (self.hidden.len() + 1)
    }

    pub(crate) fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>, AcCache) {
        let k = self.split();
        let (logits, actor) = mlp_forward(&self.params[..k], x);
        let (v, critic) = mlp_forward(&self.params[k..], x);
        (logits, v.index_axis_move(Axis(1), 0), AcCache { actor, critic })
    }

    /// Action logits and state values for a batch of observations.
    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let (l, v, _) = self.forward_cached(x);
        (l, v)
    }

    pub(crate) fn backward(&self, cache: &AcCache, dlogits: &Array2<f64>, dvalues: &Array1<f64>) -> Vec<Array2<f64>> {
        let k = self.split();
        let mut g = mlp_backward(&self.params[..k], &cache.actor, dlogits);
        let dv = dvalues.clone().insert_axis(Axis(1));
        g.extend(mlp_backward(&self.params[k..], &cache.critic, &dv));
        g
    }

    fn single(&self, obs: &[f64]) -> (Vec<f64>, f64) {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row vector");
        let (l, v) = self.forward(&x);
        (l.row(0).to_vec(), v[0])
    }

    /// Sample an action; returns `(action, log-probability, value)`.
    pub fn act(&self, obs: &[f64], rng: &mut Rng) -> (usize, f64, f64) {
        let (logits, value) = self.single(obs);
        let row = Array2::from_shape_vec((1, logits.len()), logits).expect("row vector");
        let logp = log_softmax(&row).row(0).to_vec();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut action = logp.len() - 1;
        for (i, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                action = i;
                break;
            }
        }
        (action, logp[action], value)
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.single(obs).1
    }

    /// Highest-logit action, lowest index on ties.
    pub fn greedy(&self, obs: &[f64]) -> usize {
        let (logits, _) = self.single(obs);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.obs_dim, self.n_actions, self.hidden.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &h in &self.hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for p in &self.params {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NavError> {
        let bad = |m: &str| NavError::Checkpoint(m.to_string());
        let mut r = Reader { bytes, off: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        if r.u32()? != VERSION {
            return Err(bad("unsupported version"));
        }
        let obs_dim = r.u32()? as usize;
        let n_actions = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_hidden > 16 || obs_dim == 0 || n_actions == 0 {
            return Err(bad("implausible header"));
        }
        let hidden = (0..n_hidden).map(|_| r.u32().map(|h| h as usize)).collect::<Result<Vec<_>, _>>()?;
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let mut net = Self::new(obs_dim, n_actions, &PolicyHyper { hidden }, &mut <Rng as rand::SeedableRng>::seed_from_u64(0));
        if count != net.param_count() {
            return Err(bad("parameter count does not match architecture"));
        }
        for p in net.params.iter_mut() {
            for v in p.iter_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
        if r.off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if !net.is_finite() {
            return Err(bad("non-finite parameters"));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NavError> {
        std::fs::write(path, self.to_bytes()).map_err(NavError::Io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NavError> {
        Self::from_bytes(&std::fs::read(path).map_err(NavError::Io)?)
    }
}

impl NavPolicy for ActorCritic {
    fn greedy_action(&self, task: &NavEnvInstance, state: &RobotState) -> usize {
        self.greedy(&task.observe(state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn initial_policy_is_near_uniform() {
        let net = ActorCritic::new(20, 9, &PolicyHyper::default(), &mut stream(1, &[]));
        let x = Array2::from_shape_fn((4, 20), |(i, j)| ((i * 7 + j) % 5) as f64 - 2.0);
        let lp = log_softmax(&net.forward(&x).0);
        for v in lp.iter() {
            assert!((v.exp() - 1.0 / 9.0).abs() < 0.05);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = ActorCritic::new(7, 3, &PolicyHyper { hidden: vec![5, 4] }, &mut stream(2, &[]));
        let bytes = net.to_bytes();
        assert_eq!(ActorCritic::from_bytes(&bytes).unwrap(), net);
        assert!(ActorCritic::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ActorCritic::from_bytes(&bad).is_err());
    }

    #[test]
    fn sampled_actions_follow_probabilities() {
        let mut net = ActorCritic::new(2, 2, &PolicyHyper { hidden: vec![3] }, &mut stream(3, &[]));
        let k = net.split();
        net.params[k - 1] = Array2::from_shape_vec((1, 2), vec![0.0, 3f64.ln()]).unwrap();
        net.params[k - 2].fill(0.0);
        let mut rng = stream(4, &[]);
        let ones = (0..20_000).filter(|_| net.act(&[0.3, -0.1], &mut rng).0 == 1).count();
        assert!((ones as f64 / 20_000.0 - 0.75).abs() < 0.015);
        assert_eq!(net.greedy(&[0.3, -0.1]), 1);
    }
}
