//! PPO with GAE over synchronously stepped environment batches.
//!
//! Training can run against the oracle, the physics-trained surrogate or a
//! data-driven baseline; evaluation always runs on the oracle.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::TransitionModel;
use crate::env::{GridModel, ResetMode};
use crate::error::{Error, Result};
use crate::grid::{Action, GridState, NetworkSpec};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Container, Mlp, MlpArch, NetCheckpoint, Scaler};
use crate::pinn::Surrogate;

pub const LOG_STD_RANGE: (f64, f64) = (-20.0, 2.0);

// ---------------------------------------------------------------------------
// Policy

/// Diagonal Gaussian actor with a state-independent log-std, squashed into the
/// action box by `tanh`, plus a separate value network. Observations are
/// min-max scaled to `[-1, 1]` before entering either network.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
    obs: Scaler,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Sampled actions for a batch of observations.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Pre-squash Gaussian draws.
    pub raw: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_prob: Vec<f64>,
    pub values: Vec<f64>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

impl Policy {
    pub fn new(obs_ranges: &[(f64, f64)], lo: Vec<f64>, hi: Vec<f64>, seed: u64) -> Result<Self> {
        let obs = Scaler::new(obs_ranges)?;
        let mut actor = Mlp::new(MlpArch::small_tanh(obs.dim(), lo.len()), seed)?;
        actor.scale_head(0.01);
        let critic = Mlp::new(MlpArch::small_tanh(obs.dim(), 1), seed.wrapping_add(1))?;
        Ok(Policy {
            actor,
            log_std: vec![0.0; lo.len()],
            critic,
            obs,
            lo,
            hi,
        })
    }

    /// Policy over the grid environment's state and action spaces.
    pub fn for_grid(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let (lo, hi) = spec.action_bounds();
        Policy::new(&spec.state_ranges(), lo, hi, seed)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.dim()
    }

    pub fn action_dim(&self) -> usize {
        self.lo.len()
    }

    fn std(&self) -> Vec<f64> {
        self.log_std
            .iter()
            .map(|l| l.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1).exp())
            .collect()
    }

    pub fn normalize(&self, obs: ArrayView2<f64>) -> Array2<f64> {
        let mut x = obs.to_owned();
        for mut r in x.rows_mut() {
            for (c, v) in r.iter_mut().enumerate() {
                *v = 2.0 * self.obs.scale_one(c, *v) - 1.0;
            }
        }
        x
    }

    pub fn squash(&self, raw: ArrayView2<f64>) -> Array2<f64> {
        let mut a = raw.to_owned();
        for mut r in a.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = self.lo[j] + 0.5 * (v.tanh() + 1.0) * (self.hi[j] - self.lo[j]);
            }
        }
        a
    }

    pub fn values(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.critic.forward_batch(self.normalize(obs).view())?.column(0).to_vec())
    }

    /// Mean action (no exploration noise).
    pub fn act_deterministic(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mean = self.actor.forward_batch(self.normalize(obs).view())?;
        Ok(self.squash(mean.view()))
    }

    fn log_prob_row(&self, mean: &[f64], raw: &[f64], std: &[f64]) -> f64 {
        let mut lp = 0.0;
        for j in 0..mean.len() {
            let z = (raw[j] - mean[j]) / std[j];
            lp += -0.5 * z * z - std[j].ln() - 0.5 * LN_2PI;
        }
        lp
    }

    pub fn sample(&self, obs: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let x = self.normalize(obs);
        let mean = self.actor.forward_batch(x.view())?;
        let values = self.critic.forward_batch(x.view())?.column(0).to_vec();
        let std = self.std();
        let mut raw = mean.clone();
        for mut r in raw.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                *v += std[j] * e;
            }
        }
        let log_prob = (0..raw.nrows())
            .map(|i| self.log_prob_row(&mean.row(i).to_vec(), &raw.row(i).to_vec(), &std))
            .collect();
        Ok(Sample {
            actions: self.squash(raw.view()),
            raw,
            log_prob,
            values,
        })
    }

    pub fn n_params(&self) -> usize {
        self.actor.n_params() + self.log_std.len() + self.critic.n_params()
    }

    /// Actor parameters, then log-std, then critic parameters.
    pub fn flat(&self) -> Vec<f64> {
        let mut p = self.actor.params().to_vec();
        p.extend(&self.log_std);
        p.extend(self.critic.params());
        p
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        let (na, nl) = (self.actor.n_params(), self.log_std.len());
        self.actor.params_mut().copy_from_slice(&p[..na]);
        self.log_std.copy_from_slice(&p[na..na + nl]);
        self.critic.params_mut().copy_from_slice(&p[na + nl..]);
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    log_std: Vec<f64>,
    obs: Scaler,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Policy {
    pub fn to_container(&self) -> Container {
        let meta = PolicyMeta {
            log_std: self.log_std.clone(),
            obs: self.obs.clone(),
            lo: self.lo.clone(),
            hi: self.hi.clone(),
        };
        let net = |m: &Mlp| {
            NetCheckpoint {
                model: m.clone(),
                input_scaler: None,
                output_scaler: None,
                optimizer: None,
            }
            .to_bytes()
        };
        let mut c = Container::default();
        c.insert("policy", serde_json::to_vec(&meta).expect("policy meta serializes"));
        c.insert("actor", net(&self.actor));
        c.insert("critic", net(&self.critic));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: PolicyMeta =
            serde_json::from_slice(c.get("policy")?).map_err(|e| Error::Checkpoint(format!("policy: {e}")))?;
        let actor = NetCheckpoint::from_bytes(c.get("actor")?)?.model;
        let critic = NetCheckpoint::from_bytes(c.get("critic")?)?.model;
        let k = meta.lo.len();
        if actor.output_dim() != k || meta.log_std.len() != k || meta.hi.len() != k || critic.output_dim() != 1 {
            return Err(Error::Checkpoint("policy dimensions disagree".into()));
        }
        Ok(Policy {
            actor,
            log_std: meta.log_std,
            critic,
            obs: meta.obs,
            lo: meta.lo,
            hi: meta.hi,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

// ---------------------------------------------------------------------------
// Environments

/// One synchronous step of every environment in a batch.
#[derive(Debug, Clone, Default)]
pub struct VecStep {
    pub rewards: Vec<f64>,
    /// Terminal transitions (collapse).
    pub dones: Vec<bool>,
    /// Episodes cut by the horizon; `final_obs` holds their last observation.
    pub truncated: Vec<bool>,
    pub final_obs: Vec<Option<Vec<f64>>>,
    pub energy_loss: Vec<f64>,
}

/// Environments stepped in lockstep. Finished episodes reset automatically.
pub trait VecEnv {
    fn n_envs(&self) -> usize;
    fn obs(&self) -> Array2<f64>;
    fn step(&mut self, actions: ArrayView2<f64>) -> Result<VecStep>;
}

/// Transition rows for the batched grid environments.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub energy_loss: f64,
}

/// Batched transition function over flat state/action rows.
pub trait Dynamics: Send + Sync {
    fn step_rows(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<Transition>>;
}

/// Exact simulator; rows are independent instances, optionally sharded over threads.
#[derive(Debug, Clone)]
pub struct OracleDynamics {
    pub model: GridModel,
    pub threads: usize,
}

impl OracleDynamics {
    pub fn new(spec: Arc<NetworkSpec>) -> Self {
        OracleDynamics {
            model: GridModel::new(spec),
            threads: thread_count(),
        }
    }

    fn step_range(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<Transition>> {
        let spec = &*self.model.spec;
        (0..states.nrows())
            .map(|i| {
                let st = GridState::decode(spec, &states.row(i).to_vec())?;
                let ac = Action::decode(spec, &actions.row(i).to_vec())?;
                let r = self.model.step(&st, &ac)?;
                Ok(Transition {
                    next: r.next_state.encode(),
                    reward: r.reward,
                    done: r.done,
                    energy_loss: r.info.energy_loss(),
                })
            })
            .collect()
    }
}

/// Worker count for sharded oracle stepping (`GRIDTWIN_THREADS`, default 1).
pub fn thread_count() -> usize {
    std::env::var("GRIDTWIN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

impl Dynamics for OracleDynamics {
    fn step_rows(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<Transition>> {
        let n = states.nrows();
        if self.threads <= 1 || n < 2 * self.threads {
            return self.step_range(states, actions);
        }
        let chunk = n.div_ceil(self.threads);
        let parts: Vec<Result<Vec<Transition>>> = std::thread::scope(|sc| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|a| {
                    let b = (a + chunk).min(n);
                    let (st, ac) = (states.slice(s![a..b, ..]), actions.slice(s![a..b, ..]));
                    sc.spawn(move || self.step_range(st, ac))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("oracle worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(n);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

impl Dynamics for Surrogate {
    fn step_rows(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<Transition>> {
        Ok(self
            .step_batch(states, actions)?
            .into_iter()
            .map(|r| Transition {
                next: r.next_state.encode(),
                reward: r.reward,
                done: r.done,
                energy_loss: r.info.energy_loss(),
            })
            .collect())
    }
}

/// A data-driven regressor used as a transition function. It never signals a
/// collapse, and rewards are clipped like the oracle's.
pub struct ModelDynamics {
    pub model: Arc<dyn TransitionModel + Send + Sync>,
    pub reward_clip: (f64, f64),
}

impl Dynamics for ModelDynamics {
    fn step_rows(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<Transition>> {
        let (next, rew) = self.model.predict(states, actions)?;
        Ok(next
            .rows()
            .into_iter()
            .zip(rew)
            .map(|(r, w)| Transition {
                next: r.to_vec(),
                reward: w.clamp(self.reward_clip.0, self.reward_clip.1),
                done: false,
                energy_loss: f64::NAN,
            })
            .collect())
    }
}

/// `n` grid environments sharing one transition function.
pub struct GridVecEnv<D: Dynamics> {
    pub dynamics: D,
    resetter: GridModel,
    mode: ResetMode,
    horizon: usize,
    states: Array2<f64>,
    t: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<D: Dynamics> GridVecEnv<D> {
    pub fn new(spec: Arc<NetworkSpec>, dynamics: D, n_envs: usize, horizon: usize, mode: ResetMode, seed: u64) -> Self {
        let resetter = GridModel::new(spec.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = Array2::zeros((n_envs, spec.state_dim()));
        for mut r in states.rows_mut() {
            r.assign(&Array1::from(resetter.reset(mode, rng.random()).encode()));
        }
        GridVecEnv {
            dynamics,
            resetter,
            mode,
            horizon,
            states,
            t: vec![0; n_envs],
            rng,
        }
    }
}

impl<D: Dynamics> VecEnv for GridVecEnv<D> {
    fn n_envs(&self) -> usize {
        self.states.nrows()
    }

    fn obs(&self) -> Array2<f64> {
        self.states.clone()
    }

    fn step(&mut self, actions: ArrayView2<f64>) -> Result<VecStep> {
        let rows = self.dynamics.step_rows(self.states.view(), actions)?;
        let n = self.n_envs();
        let mut out = VecStep {
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            truncated: Vec::with_capacity(n),
            final_obs: Vec::with_capacity(n),
            energy_loss: Vec::with_capacity(n),
        };
        for (i, tr) in rows.into_iter().enumerate() {
            self.t[i] += 1;
            let truncated = !tr.done && self.t[i] >= self.horizon;
            out.rewards.push(tr.reward);
            out.dones.push(tr.done);
            out.truncated.push(truncated);
            out.energy_loss.push(tr.energy_loss);
            if tr.done || truncated {
                out.final_obs.push(truncated.then(|| tr.next.clone()));
                let s = self.resetter.reset(self.mode, self.rng.random()).encode();
                self.states.row_mut(i).assign(&Array1::from(s));
                self.t[i] = 0;
            } else {
                out.final_obs.push(None);
                self.states.row_mut(i).assign(&Array1::from(tr.next));
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Rollouts

/// Fixed-capacity store of `n_envs * buffer_size` transitions, time-major.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub buffer_size: usize,
    pub obs: Array2<f64>,
    pub raw_actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// The transition ended its episode (collapse or horizon).
    pub dones: Vec<bool>,
    /// Critic values of the observations after the last step.
    pub last_values: Vec<f64>,
    len: usize,
}

impl RolloutBuffer {
    pub fn new(n_envs: usize, buffer_size: usize, obs_dim: usize, action_dim: usize) -> Self {
        let cap = n_envs * buffer_size;
        RolloutBuffer {
            n_envs,
            buffer_size,
            obs: Array2::zeros((cap, obs_dim)),
            raw_actions: Array2::zeros((cap, action_dim)),
            log_probs: vec![0.0; cap],
            rewards: vec![0.0; cap],
            values: vec![0.0; cap],
            dones: vec![false; cap],
            last_values: vec![0.0; n_envs],
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.n_envs * self.buffer_size
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len == self.capacity()
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }
}

/// Step every environment `buffer_size` times with `policy`, filling `buffer`.
/// Horizon cuts are bootstrapped by adding `gamma * V(final obs)` to the reward.
/// Returns the mean energy loss of the collected transitions (NaN-free envs only).
pub fn collect_rollout(
    env: &mut dyn VecEnv,
    policy: &Policy,
    buffer: &mut RolloutBuffer,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if env.n_envs() != buffer.n_envs {
        return Err(Error::Dimension {
            context: "rollout envs",
            expected: buffer.n_envs,
            got: env.n_envs(),
        });
    }
    buffer.clear();
    let n = buffer.n_envs;
    let (mut e_sum, mut e_n) = (0.0, 0usize);
    for t in 0..buffer.buffer_size {
        let obs = env.obs();
        let smp = policy.sample(obs.view(), rng)?;
        let step = env.step(smp.actions.view())?;
        let base = t * n;
        buffer.obs.slice_mut(s![base..base + n, ..]).assign(&obs);
        buffer.raw_actions.slice_mut(s![base..base + n, ..]).assign(&smp.raw);
        for i in 0..n {
            let mut r = step.rewards[i];
            if let Some(fin) = &step.final_obs[i] {
                let fo = ArrayView2::from_shape((1, fin.len()), fin).unwrap();
                r += gamma * policy.values(fo)?[0];
            }
            buffer.log_probs[base + i] = smp.log_prob[i];
            buffer.values[base + i] = smp.values[i];
            buffer.rewards[base + i] = r;
            buffer.dones[base + i] = step.dones[i] || step.truncated[i];
            if step.energy_loss[i].is_finite() {
                e_sum += step.energy_loss[i];
                e_n += 1;
            }
        }
        buffer.len += n;
    }
    buffer.last_values = policy.values(env.obs().view())?;
    Ok(if e_n > 0 { e_sum / e_n as f64 } else { f64::NAN })
}

/// Generalized advantage estimates and returns (`advantages + values`).
pub fn compute_gae(buffer: &RolloutBuffer, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let n = buffer.n_envs;
    let mut adv = vec![0.0; buffer.len()];
    for e in 0..n {
        let mut last = 0.0;
        for t in (0..buffer.buffer_size).rev() {
            let i = t * n + e;
            let next_v = if t + 1 == buffer.buffer_size {
                buffer.last_values[e]
            } else {
                buffer.values[i + n]
            };
            let live = if buffer.dones[i] { 0.0 } else { 1.0 };
            let delta = buffer.rewards[i] + gamma * next_v * live - buffer.values[i];
            last = delta + gamma * lam * live * last;
            adv[i] = last;
        }
    }
    let ret = adv.iter().zip(&buffer.values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

// ---------------------------------------------------------------------------
// PPO

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub n_envs: usize,
    pub buffer_size: usize,
    pub clip: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Training episode length.
    pub horizon: usize,
    /// Length of each oracle evaluation episode.
    pub eval_horizon: usize,
    /// Stop after this many evaluations without a new best.
    pub patience: usize,
    pub max_updates: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            n_envs: 100,
            buffer_size: 30,
            clip: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.0,
            epochs: 10,
            minibatch: 64,
            lr: 3e-4,
            max_grad_norm: 0.5,
            gamma: 0.99,
            gae_lambda: 0.95,
            horizon: 288,
            eval_horizon: 288,
            patience: 20,
            max_updates: 1000,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_envs", self.n_envs),
            ("buffer_size", self.buffer_size),
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("horizon", self.horizon),
            ("eval_horizon", self.eval_horizon),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(Error::invariant(name, "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Clipped surrogate for one sample, `-min(r A, clip(r) A)`, and its
/// derivative with respect to `r`.
pub fn clipped_objective(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (-unclipped, -adv)
    } else {
        (-clipped, 0.0)
    }
}

/// Optimizer state that persists across updates.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    pub adam: AdamW,
}

impl PpoOptimizer {
    pub fn new(policy: &Policy, lr: f64) -> Self {
        PpoOptimizer {
            adam: AdamW::new(
                policy.n_params(),
                AdamWConfig {
                    lr,
                    eps: 1e-5,
                    weight_decay: 0.0,
                    ..Default::default()
                },
            ),
        }
    }
}

struct MinibatchLoss {
    total: f64,
    policy: f64,
    value: f64,
    clipped: usize,
    kl: f64,
}

/// Loss of one minibatch over normalized observations; overwrites `grads`
/// with its gradient in [`Policy::flat`] order.
#[allow(clippy::too_many_arguments)]
fn minibatch_loss_grad(
    policy: &Policy,
    x: ArrayView2<f64>,
    raw: ArrayView2<f64>,
    old_log_probs: &[f64],
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
    grads: &mut [f64],
) -> Result<MinibatchLoss> {
    let b = x.nrows() as f64;
    let k = policy.action_dim();
    let na = policy.actor.n_params();
    let (mean, a_cache) = policy.actor.forward_train(x)?;
    let (val, c_cache) = policy.critic.forward_train(x)?;
    let std = policy.std();
    let mut d_mean = Array2::zeros(mean.raw_dim());
    let mut d_log_std = vec![0.0; k];
    let mut d_val = Array2::zeros(val.raw_dim());
    let (mut pl, mut vl, mut clipped, mut kl) = (0.0, 0.0, 0usize, 0.0);
    for r in 0..x.nrows() {
        let mut lp = 0.0;
        for j in 0..k {
            let z = (raw[(r, j)] - mean[(r, j)]) / std[j];
            lp += -0.5 * z * z - std[j].ln() - 0.5 * LN_2PI;
        }
        let log_ratio = lp - old_log_probs[r];
        let ratio = log_ratio.exp();
        let (l, dl_dr) = clipped_objective(ratio, adv[r], cfg.clip);
        pl += l / b;
        if (ratio - 1.0).abs() > cfg.clip {
            clipped += 1;
        }
        kl += ((ratio - 1.0) - log_ratio) / b;
        let g = dl_dr * ratio / b;
        for j in 0..k {
            let z = (raw[(r, j)] - mean[(r, j)]) / std[j];
            d_mean[(r, j)] = g * z / std[j];
            d_log_std[j] += g * (z * z - 1.0);
        }
        let e = val[(r, 0)] - ret[r];
        vl += e * e / b;
        d_val[(r, 0)] = cfg.vf_coef * 2.0 * e / b;
    }
    let mut entropy = 0.0;
    for (j, l) in policy.log_std.iter().enumerate() {
        // Gaussian entropy is sum(log_std) + const; clamped entries get no gradient.
        let inside = (LOG_STD_RANGE.0..=LOG_STD_RANGE.1).contains(l);
        entropy += l.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1);
        d_log_std[j] = if inside { d_log_std[j] - cfg.ent_coef } else { 0.0 };
    }
    grads.iter_mut().for_each(|g| *g = 0.0);
    policy.actor.backward_into(&a_cache, d_mean.view(), &mut grads[..na]);
    grads[na..na + k].copy_from_slice(&d_log_std);
    policy.critic.backward_into(&c_cache, d_val.view(), &mut grads[na + k..]);
    Ok(MinibatchLoss {
        total: pl + cfg.vf_coef * vl - cfg.ent_coef * entropy,
        policy: pl,
        value: vl,
        clipped,
        kl,
    })
}

/// Full PPO loss (clipped policy term, weighted value error, entropy bonus,
/// entropy up to its constant) of a minibatch of raw observations, with the
/// gradient in [`Policy::flat`] order. No clipping of the gradient norm.
pub fn ppo_loss_grad(
    policy: &Policy,
    obs: ArrayView2<f64>,
    raw_actions: ArrayView2<f64>,
    old_log_probs: &[f64],
    adv: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<(f64, Vec<f64>)> {
    let n = obs.nrows();
    if raw_actions.nrows() != n || old_log_probs.len() != n || adv.len() != n || returns.len() != n {
        return Err(Error::invariant("ppo minibatch", "all inputs need one row per sample"));
    }
    let x = policy.normalize(obs);
    let mut grads = vec![0.0; policy.n_params()];
    let mb = minibatch_loss_grad(policy, x.view(), raw_actions, old_log_probs, adv, returns, cfg, &mut grads)?;
    Ok((mb.total, grads))
}

/// `epochs` passes of shuffled minibatches over a full buffer.
pub fn ppo_update(
    policy: &mut Policy,
    opt: &mut PpoOptimizer,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoStats> {
    if !buffer.is_full() {
        return Err(Error::invariant("rollout buffer", "update requires a full buffer"));
    }
    let (mut adv, ret) = compute_gae(buffer, cfg.gamma, cfg.gae_lambda);
    if adv.len() > 1 {
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (adv.len() - 1) as f64;
        let sd = var.sqrt() + 1e-8;
        adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
    }
    let n = buffer.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = vec![0.0; policy.n_params()];
    let mut stats = PpoStats::default();
    let mut batches = 0usize;
    let norm_obs = policy.normalize(buffer.obs.view());

    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        for idx in order.chunks(cfg.minibatch) {
            let b = idx.len() as f64;
            let x = norm_obs.select(Axis(0), idx);
            let raw = buffer.raw_actions.select(Axis(0), idx);
            let old: Vec<f64> = idx.iter().map(|&i| buffer.log_probs[i]).collect();
            let mb_adv: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            let mb_ret: Vec<f64> = idx.iter().map(|&i| ret[i]).collect();
            let mb = minibatch_loss_grad(policy, x.view(), raw.view(), &old, &mb_adv, &mb_ret, cfg, &mut grads)?;
            if !(mb.policy.is_finite() && mb.value.is_finite()) {
                return Err(Error::Divergence {
                    step: batches,
                    detail: format!("PPO loss not finite: policy {}, value {}", mb.policy, mb.value),
                });
            }
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            let mut p = policy.flat();
            opt.adam.step(&mut p, &grads);
            policy.set_flat(&p);

            stats.policy_loss += mb.policy;
            stats.value_loss += mb.value;
            stats.clip_fraction += mb.clipped as f64 / b;
            stats.approx_kl += mb.kl;
            batches += 1;
        }
    }
    let nb = batches.max(1) as f64;
    stats.policy_loss /= nb;
    stats.value_loss /= nb;
    stats.clip_fraction /= nb;
    stats.approx_kl /= nb;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training runs

/// Return of one deterministic-policy oracle episode from the fixed start,
/// with the mean per-step energy loss.
pub fn evaluate_on_oracle(model: &GridModel, policy: &Policy, horizon: usize) -> Result<(f64, f64)> {
    let spec = &*model.spec;
    let mut state = model.reset(ResetMode::FixedStart, 0);
    let (mut ret, mut energy, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..horizon {
        let s = state.encode();
        let a = policy.act_deterministic(ArrayView2::from_shape((1, s.len()), &s).unwrap())?;
        let r = model.step(&state, &Action::decode(spec, &a.row(0).to_vec())?)?;
        ret += r.reward;
        energy += r.info.energy_loss();
        steps += 1;
        if r.done {
            break;
        }
        state = r.next_state;
    }
    Ok((ret, energy / steps.max(1) as f64))
}

/// Mean oracle return of the uniform-random policy from the fixed start.
pub fn random_policy_return(model: &GridModel, horizon: usize, episodes: usize, seed: u64) -> Result<f64> {
    let spec = &*model.spec;
    let (lo, hi) = spec.action_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = model.reset(ResetMode::FixedStart, 0);
        for _ in 0..horizon {
            let a: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect();
            let r = model.step(&state, &Action::decode(spec, &a)?)?;
            total += r.reward;
            if r.done {
                break;
            }
            state = r.next_state;
        }
    }
    Ok(total / episodes.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    /// Cumulative training time (rollouts and updates, evaluation excluded).
    pub wall_time_s: f64,
    pub eval_reward: f64,
    pub energy_loss: f64,
    pub transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub n_envs: usize,
    pub buffer_size: usize,
    pub updates: Vec<UpdateRecord>,
    pub best_eval: f64,
    pub best_update: usize,
    pub stopped_early: bool,
    /// Everything, evaluation included.
    pub total_time_s: f64,
}

impl TrainRunRecord {
    /// Training time until the eval reward first reaches `threshold`.
    pub fn time_to_threshold(&self, threshold: f64) -> Option<f64> {
        self.updates
            .iter()
            .find(|u| u.eval_reward >= threshold)
            .map(|u| u.wall_time_s)
    }

    pub fn mean_last_evals(&self, k: usize) -> f64 {
        let tail = &self.updates[self.updates.len().saturating_sub(k)..];
        tail.iter().map(|u| u.eval_reward).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("update,wall_time_s,eval_reward,energy_loss\n");
        for u in &self.updates {
            out.push_str(&format!("{},{},{},{}\n", u.update, u.wall_time_s, u.eval_reward, u.energy_loss));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Which transition function the policy learns against.
#[derive(Clone)]
pub enum TrainEnv {
    Oracle,
    Pinn(Arc<Surrogate>),
    Baseline(Arc<dyn TransitionModel + Send + Sync>),
}

/// PPO until the oracle evaluation saturates. Returns the policy with the best
/// evaluation reward.
pub fn train_policy(spec: Arc<NetworkSpec>, env: &TrainEnv, cfg: &PpoConfig) -> Result<(Policy, TrainRunRecord)> {
    cfg.validate()?;
    let env_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    let mut vec_env: Box<dyn VecEnv> = match env {
        TrainEnv::Oracle => Box::new(GridVecEnv::new(
            spec.clone(),
            OracleDynamics::new(spec.clone()),
            cfg.n_envs,
            cfg.horizon,
            ResetMode::UniformRandom,
            env_seed,
        )),
        TrainEnv::Pinn(s) => Box::new(GridVecEnv::new(
            spec.clone(),
            SharedSurrogate(s.clone()),
            cfg.n_envs,
            cfg.horizon,
            ResetMode::UniformRandom,
            env_seed,
        )),
        TrainEnv::Baseline(m) => Box::new(GridVecEnv::new(
            spec.clone(),
            ModelDynamics {
                model: m.clone(),
                reward_clip: spec.reward_clip,
            },
            cfg.n_envs,
            cfg.horizon,
            ResetMode::UniformRandom,
            env_seed,
        )),
    };
    train_on(spec, vec_env.as_mut(), cfg)
}

/// PPO against an arbitrary batch of grid environments.
pub fn train_on(spec: Arc<NetworkSpec>, env: &mut dyn VecEnv, cfg: &PpoConfig) -> Result<(Policy, TrainRunRecord)> {
    let start = Instant::now();
    let oracle = GridModel::new(spec.clone());
    let mut policy = Policy::for_grid(&spec, cfg.seed)?;
    let mut opt = PpoOptimizer::new(&policy, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut buffer = RolloutBuffer::new(cfg.n_envs, cfg.buffer_size, spec.state_dim(), spec.action_dim());
    let mut record = TrainRunRecord {
        n_envs: cfg.n_envs,
        buffer_size: cfg.buffer_size,
        updates: Vec::new(),
        best_eval: f64::NEG_INFINITY,
        best_update: 0,
        stopped_early: false,
        total_time_s: 0.0,
    };
    let mut best = policy.clone();
    let mut train_time = 0.0;
    for update in 0..cfg.max_updates {
        let t0 = Instant::now();
        collect_rollout(env, &policy, &mut buffer, cfg.gamma, &mut rng)?;
        let transitions = buffer.len();
        ppo_update(&mut policy, &mut opt, &buffer, cfg, &mut rng)?;
        train_time += t0.elapsed().as_secs_f64();

        let (eval_reward, energy_loss) = evaluate_on_oracle(&oracle, &policy, cfg.eval_horizon)?;
        record.updates.push(UpdateRecord {
            update,
            wall_time_s: train_time,
            eval_reward,
            energy_loss,
            transitions,
        });
        if eval_reward > record.best_eval {
            record.best_eval = eval_reward;
            record.best_update = update;
            best = policy.clone();
        } else if update - record.best_update >= cfg.patience {
            record.stopped_early = true;
            break;
        }
    }
    record.total_time_s = start.elapsed().as_secs_f64();
    Ok((best, record))
}

/// Shared handle so one surrogate can back several environments.
pub struct SharedSurrogate(pub Arc<Surrogate>);

impl Dynamics for SharedSurrogate {
    fn step_rows(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<Transition>> {
        self.0.step_rows(states, actions)
    }
}

// ---------------------------------------------------------------------------
// Structural sweep

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_envs: usize,
    pub buffer_size: usize,
    pub mean_last10_reward: f64,
    pub total_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCorrelations {
    pub buffer_vs_reward: f64,
    pub n_envs_vs_reward: f64,
    pub buffer_vs_time: f64,
    pub n_envs_vs_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub correlations: SweepCorrelations,
}

impl SweepResult {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("n_envs,buffer_size,mean_last10_reward,total_time_s\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.n_envs, r.buffer_size, r.mean_last10_reward, r.total_time_s));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// One plateau-stopped training run per `(n_envs, buffer_size)` cell.
pub fn sweep_structural_params(
    spec: Arc<NetworkSpec>,
    env: &TrainEnv,
    grid: &[(usize, usize)],
    cfg: &PpoConfig,
) -> Result<SweepResult> {
    let mut rows = Vec::with_capacity(grid.len());
    for &(n_envs, buffer_size) in grid {
        let c = PpoConfig {
            n_envs,
            buffer_size,
            ..*cfg
        };
        let (_, rec) = train_policy(spec.clone(), env, &c)?;
        rows.push(SweepRow {
            n_envs,
            buffer_size,
            mean_last10_reward: rec.mean_last_evals(10),
            total_time_s: rec.total_time_s,
        });
    }
    let col = |f: fn(&SweepRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (b, e) = (col(|r| r.buffer_size as f64), col(|r| r.n_envs as f64));
    let (rw, tm) = (col(|r| r.mean_last10_reward), col(|r| r.total_time_s));
    let correlations = SweepCorrelations {
        buffer_vs_reward: pearson(&b, &rw),
        n_envs_vs_reward: pearson(&e, &rw),
        buffer_vs_time: pearson(&b, &tm),
        n_envs_vs_time: pearson(&e, &tm),
    };
    Ok(SweepResult { rows, correlations })
}
