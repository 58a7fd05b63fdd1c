//! Simulator-generated transition datasets and the purely data-driven
//! baselines (ridge-regularized linear map, MLP) they are used to fit.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{action_column_names, state_column_names, GridModel, ResetMode};
use crate::error::{Error, Result};
use crate::grid::{Action, GridState, NetworkSpec, STEPS_PER_DAY};
use crate::nn::{AdamW, AdamWConfig, Container, Mlp, MlpArch, NetCheckpoint, Scaler, Sobol};
use crate::pinn::Surrogate;
use crate::powerflow::{slack_power, solve_power_flow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Generative,
    Agent,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generative" => Ok(DatasetKind::Generative),
            "agent" => Ok(DatasetKind::Agent),
            _ => Err(Error::Parse(format!("unknown dataset kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Generative => "generative",
            DatasetKind::Agent => "agent",
        })
    }
}

/// Rows of `(state, action) -> (next_state, reward)` from the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub kind: DatasetKind,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Episode index per row; every generative row is its own episode.
    pub episodes: Vec<usize>,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Model input: state followed by action.
    pub fn inputs(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.states.view(), self.actions.view()]).expect("row counts agree")
    }

    /// Model target: next state followed by reward.
    pub fn targets(&self) -> Array2<f64> {
        let r = Array2::from_shape_vec((self.len(), 1), self.rewards.clone()).expect("reward column");
        ndarray::concatenate(Axis(1), &[self.next_states.view(), r.view()]).expect("row counts agree")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<()> {
        let path = path.as_ref();
        let mut header = vec!["episode".to_string()];
        header.extend(state_column_names(spec));
        header.extend(action_column_names(spec));
        header.extend(state_column_names(spec).into_iter().map(|c| format!("next_{c}")));
        header.push("reward".into());
        header.push("done".into());
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            let mut row = vec![self.episodes[i].to_string()];
            row.extend(self.states.row(i).iter().map(|v| v.to_string()));
            row.extend(self.actions.row(i).iter().map(|v| v.to_string()));
            row.extend(self.next_states.row(i).iter().map(|v| v.to_string()));
            row.push(self.rewards[i].to_string());
            row.push(u8::from(self.dones[i]).to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    /// Inverse of [`TransitionDataset::write_csv`]; values round-trip exactly.
    pub fn read_csv(path: impl AsRef<Path>, spec: &NetworkSpec, kind: DatasetKind) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (sd, ad) = (spec.state_dim(), spec.action_dim());
        let width = 1 + 2 * sd + ad + 2;
        let mut rows = Rows::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            let parse_err = |what: &str| Error::Parse(format!("{}:{}: {what}", path.display(), ln + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != width {
                return Err(parse_err(&format!("expected {width} fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(&format!("bad number {s:?}")));
            rows.episodes.push(f[0].parse().map_err(|_| parse_err("bad episode index"))?);
            for v in &f[1..1 + sd] {
                rows.states.push(num(v)?);
            }
            for v in &f[1 + sd..1 + sd + ad] {
                rows.actions.push(num(v)?);
            }
            for v in &f[1 + sd + ad..1 + 2 * sd + ad] {
                rows.next.push(num(v)?);
            }
            rows.rewards.push(num(f[width - 2])?);
            rows.dones.push(match f[width - 1] {
                "0" => false,
                "1" => true,
                _ => return Err(parse_err("done must be 0 or 1")),
            });
        }
        Ok(rows.finish(kind, spec))
    }
}

struct Rows {
    states: Vec<f64>,
    actions: Vec<f64>,
    next: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    episodes: Vec<usize>,
}

impl Rows {
    fn new() -> Self {
        Rows {
            states: vec![],
            actions: vec![],
            next: vec![],
            rewards: vec![],
            dones: vec![],
            episodes: vec![],
        }
    }

    fn finish(self, kind: DatasetKind, spec: &NetworkSpec) -> TransitionDataset {
        let n = self.rewards.len();
        let (sd, ad) = (spec.state_dim(), spec.action_dim());
        TransitionDataset {
            kind,
            states: Array2::from_shape_vec((n, sd), self.states).unwrap(),
            actions: Array2::from_shape_vec((n, ad), self.actions).unwrap(),
            next_states: Array2::from_shape_vec((n, sd), self.next).unwrap(),
            rewards: self.rewards,
            dones: self.dones,
            episodes: self.episodes,
        }
    }
}

/// Sobol dimensions of a generative draw: time step, SoC, non-slack generator
/// `(P / P^max(aux), Q)`, DES `(P, Q)`, then the action.
fn generative_dims(spec: &NetworkSpec) -> usize {
    2 + 2 * spec.n_nonslack() + 2 + spec.action_dim()
}

/// Independent transitions from Sobol-sampled operating points. Loads and
/// renewable capacity follow the profiles at the sampled time step, the
/// slack entry is the matching power-flow solution.
pub fn build_generative_dataset(spec: &NetworkSpec, n: usize, seed: u64) -> Result<TransitionDataset> {
    let model = GridModel::new(Arc::new(spec.clone()));
    let sobol = Sobol::new(generative_dims(spec));
    let (lo, hi) = spec.action_bounds();
    let ng = spec.n_nonslack();
    let mut rows = Rows::new();
    let batch = 4096;
    let mut drawn = 0usize;
    while drawn < n {
        let take = batch.min(n - drawn);
        let pts = sobol.sample(take, seed.wrapping_mul(1 << 24) + drawn as u64);
        for u in pts.rows() {
            let aux = ((u[0] * STEPS_PER_DAY as f64) as usize).min(STEPS_PER_DAY - 1);
            let d = &spec.des;
            let soc = d.soc_min + u[1] * (d.soc_max - d.soc_min);
            let mut state = model.profile_state(soc, aux);
            for (k, &g) in spec.nonslack_generators().iter().enumerate() {
                let gen = &spec.generators[g];
                let slot = spec.devices().iter().position(|&x| x == crate::grid::Device::Generator(g)).unwrap();
                state.p_dev[slot] = gen.p_min + u[2 + 2 * k] * (state.p_max_gen[k] - gen.p_min);
                state.q_dev[slot] = gen.q_min + u[3 + 2 * k] * (gen.q_max - gen.q_min);
            }
            let slot = spec.devices().iter().position(|&x| x == crate::grid::Device::Des).unwrap();
            state.p_dev[slot] = d.p_min + u[2 + 2 * ng] * (d.p_max - d.p_min);
            state.q_dev[slot] = d.q_min + u[3 + 2 * ng] * (d.q_max - d.q_min);
            refresh_slack(&model, &mut state);
            let a: Vec<f64> = (0..spec.action_dim())
                .map(|j| lo[j] + u[4 + 2 * ng + j] * (hi[j] - lo[j]))
                .collect();
            let res = model.step(&state, &Action::decode(spec, &a)?)?;
            rows.states.extend(state.encode());
            rows.actions.extend(&a);
            rows.next.extend(res.next_state.encode());
            rows.rewards.push(res.reward);
            rows.dones.push(res.done);
            rows.episodes.push(rows.episodes.len());
        }
        drawn += take;
    }
    Ok(rows.finish(DatasetKind::Generative, spec))
}

fn refresh_slack(model: &GridModel, state: &mut GridState) {
    let spec = &*model.spec;
    let inj = crate::env::bus_injections(spec, state);
    let (p, q) = match solve_power_flow(&model.adm, &inj) {
        Ok(v) => slack_power(&model.adm, &v),
        Err(_) => (-inj.p_bus.iter().sum::<f64>(), -inj.q_bus.iter().sum::<f64>()),
    };
    let s = crate::env::slack_slot(spec);
    state.p_dev[s] = p;
    state.q_dev[s] = q;
}

/// Uniform-random-policy trajectories, reset on collapse or after `horizon`
/// steps, concatenated to exactly `n` rows.
pub fn build_agent_dataset(spec: &NetworkSpec, n: usize, horizon: usize, seed: u64) -> Result<TransitionDataset> {
    let model = GridModel::new(Arc::new(spec.clone()));
    let (lo, hi) = spec.action_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Rows::new();
    let mut episode = 0usize;
    while rows.rewards.len() < n {
        let mut state = model.reset(ResetMode::UniformRandom, rng.random());
        for _ in 0..horizon {
            if rows.rewards.len() == n {
                break;
            }
            let a: Vec<f64> = lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect();
            let res = model.step(&state, &Action::decode(spec, &a)?)?;
            rows.states.extend(state.encode());
            rows.actions.extend(&a);
            rows.next.extend(res.next_state.encode());
            rows.rewards.push(res.reward);
            rows.dones.push(res.done);
            rows.episodes.push(episode);
            if res.done {
                break;
            }
            state = res.next_state;
        }
        episode += 1;
    }
    Ok(rows.finish(DatasetKind::Agent, spec))
}

// ---------------------------------------------------------------------------
// Models

/// Anything that maps `(state, action)` rows to `(next_state, reward)` rows.
pub trait TransitionModel {
    fn predict(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)>;
}

impl TransitionModel for Surrogate {
    fn predict(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        let res = self.step_batch(states, actions)?;
        let mut next = Array2::zeros((res.len(), self.spec.state_dim()));
        for (i, r) in res.iter().enumerate() {
            next.row_mut(i).assign(&Array1::from(r.next_state.encode()));
        }
        Ok((next, res.iter().map(|r| r.reward).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
enum Fitted {
    /// `(n_in + 1) x n_out`, last row is the intercept.
    Linear(Array2<f64>),
    Mlp(Mlp),
}

/// Data-driven transition regressor. Inputs and targets are min-max scaled
/// with the state, action and reward ranges of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRegressor {
    pub kind: BaselineKind,
    pub trained_on: DatasetKind,
    input: Scaler,
    output: Scaler,
    fitted: Fitted,
    /// Training loss per epoch (MLP only).
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub ridge: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            ridge: 1e-8,
            epochs: 20,
            batch: 64,
            lr: AdamWConfig::default().lr,
            seed: 0,
        }
    }
}

fn io_scalers(spec: &NetworkSpec) -> Result<(Scaler, Scaler)> {
    let state = spec.state_ranges();
    let (lo, hi) = spec.action_bounds();
    let mut input = state.clone();
    input.extend(lo.into_iter().zip(hi));
    let mut output = state;
    output.push(spec.reward_clip);
    Ok((Scaler::new(&input)?, Scaler::new(&output)?))
}

fn scale_rows(s: &Scaler, x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut r in out.rows_mut() {
        for (c, v) in r.iter_mut().enumerate() {
            *v = s.scale_one(c, *v);
        }
    }
    out
}

fn unscale_rows(s: &Scaler, mut x: Array2<f64>) -> Array2<f64> {
    for mut r in x.rows_mut() {
        for (c, v) in r.iter_mut().enumerate() {
            *v = s.unscale_one(c, *v);
        }
    }
    x
}

/// Least squares with a ridge term, solved through the normal equations.
pub fn ridge_fit(x: ArrayView2<f64>, y: ArrayView2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let (n, p) = x.dim();
    let q = y.ncols();
    let mut a = DMatrix::<f64>::zeros(n, p + 1);
    for i in 0..n {
        for j in 0..p {
            a[(i, j)] = x[(i, j)];
        }
        a[(i, p)] = 1.0;
    }
    let b = DMatrix::from_fn(n, q, |i, j| y[(i, j)]);
    let mut ata = a.transpose() * &a;
    for j in 0..=p {
        ata[(j, j)] += ridge;
    }
    let atb = a.transpose() * b;
    let chol = ata
        .cholesky()
        .ok_or_else(|| Error::Singular("normal equations are not positive definite".into()))?;
    let w = chol.solve(&atb);
    Ok(Array2::from_shape_fn((p + 1, q), |(i, j)| w[(i, j)]))
}

impl BaselineRegressor {
    pub fn predict_scaled(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.fitted {
            Fitted::Linear(w) => {
                let p = x.ncols();
                Ok(x.dot(&w.slice(s![..p, ..])) + &w.row(p))
            }
            Fitted::Mlp(net) => net.forward_batch(x),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BaselineMeta {
    kind: BaselineKind,
    trained_on: DatasetKind,
    input: Scaler,
    output: Scaler,
    history: Vec<f64>,
    /// Row-major linear weights with their shape.
    linear: Option<(usize, usize, Vec<f64>)>,
}

impl BaselineRegressor {
    pub fn to_container(&self) -> Container {
        let linear = match &self.fitted {
            Fitted::Linear(w) => Some((w.nrows(), w.ncols(), w.iter().copied().collect())),
            Fitted::Mlp(_) => None,
        };
        let meta = BaselineMeta {
            kind: self.kind,
            trained_on: self.trained_on,
            input: self.input.clone(),
            output: self.output.clone(),
            history: self.history.clone(),
            linear,
        };
        let mut c = Container::default();
        c.insert("baseline", serde_json::to_vec(&meta).expect("baseline meta serializes"));
        if let Fitted::Mlp(net) = &self.fitted {
            let ck = NetCheckpoint {
                model: net.clone(),
                input_scaler: None,
                output_scaler: None,
                optimizer: None,
            };
            c.insert("mlp", ck.to_bytes());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: BaselineMeta =
            serde_json::from_slice(c.get("baseline")?).map_err(|e| Error::Checkpoint(format!("baseline: {e}")))?;
        let fitted = match (meta.kind, meta.linear) {
            (BaselineKind::Linear, Some((r, k, w))) => Fitted::Linear(
                Array2::from_shape_vec((r, k), w).map_err(|e| Error::Checkpoint(format!("linear weights: {e}")))?,
            ),
            (BaselineKind::Mlp, None) => Fitted::Mlp(NetCheckpoint::from_bytes(c.get("mlp")?)?.model),
            _ => return Err(Error::Checkpoint("baseline kind does not match stored weights".into())),
        };
        Ok(BaselineRegressor {
            kind: meta.kind,
            trained_on: meta.trained_on,
            input: meta.input,
            output: meta.output,
            fitted,
            history: meta.history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

impl TransitionModel for BaselineRegressor {
    fn predict(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        let x = ndarray::concatenate(Axis(1), &[states, actions])
            .map_err(|_| Error::Dimension {
                context: "baseline inputs",
                expected: states.nrows(),
                got: actions.nrows(),
            })?;
        if x.ncols() != self.input.dim() {
            return Err(Error::Dimension {
                context: "baseline inputs",
                expected: self.input.dim(),
                got: x.ncols(),
            });
        }
        let y = unscale_rows(&self.output, self.predict_scaled(scale_rows(&self.input, x.view()).view())?);
        let sd = y.ncols() - 1;
        Ok((y.slice(s![.., ..sd]).to_owned(), y.column(sd).to_vec()))
    }
}

pub fn fit_baseline(
    spec: &NetworkSpec,
    kind: BaselineKind,
    data: &TransitionDataset,
    cfg: &BaselineConfig,
) -> Result<BaselineRegressor> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let (input, output) = io_scalers(spec)?;
    let x = scale_rows(&input, data.inputs().view());
    let y = scale_rows(&output, data.targets().view());
    let (fitted, history) = match kind {
        BaselineKind::Linear => (Fitted::Linear(ridge_fit(x.view(), y.view(), cfg.ridge)?), vec![]),
        BaselineKind::Mlp => {
            let (net, h) = fit_mlp_mae(x.view(), y.view(), cfg)?;
            (Fitted::Mlp(net), h)
        }
    };
    Ok(BaselineRegressor {
        kind,
        trained_on: data.kind,
        input,
        output,
        fitted,
        history,
    })
}

/// Minibatch AdamW on the mean absolute error; rows are reshuffled every epoch.
fn fit_mlp_mae(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &BaselineConfig) -> Result<(Mlp, Vec<f64>)> {
    let mut net = Mlp::new(MlpArch::surrogate(x.ncols(), y.ncols()), cfg.seed)?;
    let mut opt = AdamW::new(
        net.n_params(),
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = vec![0.0; net.n_params()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let denom = y.ncols() as f64;
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let xb = x.select(Axis(0), chunk);
            let yb = y.select(Axis(0), chunk);
            let (pred, cache) = net.forward_train(xb.view())?;
            let diff = &pred - &yb;
            let b = chunk.len() as f64;
            total += diff.mapv(f64::abs).sum() / denom;
            let dy = diff.mapv(|d| d.signum() / (b * denom));
            grads.iter_mut().for_each(|g| *g = 0.0);
            net.backward_into(&cache, dy.view(), &mut grads);
            opt.step(net.params_mut(), &grads);
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                detail: format!("baseline MLP loss {loss}"),
            });
        }
        history.push(loss);
    }
    Ok((net, history))
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub r2: Vec<f64>,
    pub mae: Vec<f64>,
    pub r2_mean: f64,
    pub mae_mean: f64,
}

/// Coefficient of determination and MAE per column. A constant target column
/// scores R² = 1 when matched exactly and 0 otherwise.
pub fn regression_metrics(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> RegressionMetrics {
    let mean = truth.mean_axis(Axis(0)).expect("nonempty");
    let mut r2 = Vec::with_capacity(truth.ncols());
    let mut mae = Vec::with_capacity(truth.ncols());
    for c in 0..truth.ncols() {
        let (mut ss_res, mut ss_tot, mut abs) = (0.0, 0.0, 0.0);
        for r in 0..truth.nrows() {
            let e = pred[(r, c)] - truth[(r, c)];
            ss_res += e * e;
            abs += e.abs();
            let d = truth[(r, c)] - mean[c];
            ss_tot += d * d;
        }
        r2.push(if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        });
        mae.push(abs / truth.nrows() as f64);
    }
    let k = r2.len() as f64;
    RegressionMetrics {
        r2_mean: r2.iter().sum::<f64>() / k,
        mae_mean: mae.iter().sum::<f64>() / k,
        r2,
        mae,
    }
}

/// One-step metrics of `model` on a dataset, on min-max scaled next states
/// and reward.
pub fn evaluate_one_step(spec: &NetworkSpec, model: &dyn TransitionModel, data: &TransitionDataset) -> Result<RegressionMetrics> {
    let (_, output) = io_scalers(spec)?;
    let (next, rew) = model.predict(data.states.view(), data.actions.view())?;
    let r = Array2::from_shape_vec((rew.len(), 1), rew).expect("reward column");
    let pred = ndarray::concatenate(Axis(1), &[next.view(), r.view()]).expect("rows agree");
    Ok(regression_metrics(
        scale_rows(&output, pred.view()).view(),
        scale_rows(&output, data.targets().view()).view(),
    ))
}

/// An oracle trajectory: `states[0]` is the initial state, `states[t + 1]`
/// follows from `actions[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMae {
    /// Mean scaled absolute state error after each step.
    pub per_step: Vec<f64>,
    pub mean: f64,
}

/// Closed-loop rollout: the model starts from the true initial state, then
/// consumes its own predictions while replaying the episode's actions.
/// Errors are in min-max scaled state units.
pub fn episodic_mae(spec: &NetworkSpec, model: &dyn TransitionModel, ep: &Episode) -> Result<EpisodicMae> {
    let ranges = spec.state_ranges();
    let scale = Scaler::new(&ranges)?;
    let mut state = ep.states.slice(s![0..1, ..]).to_owned();
    let mut per_step = Vec::with_capacity(ep.actions.nrows());
    for t in 0..ep.actions.nrows() {
        let a = ep.actions.slice(s![t..t + 1, ..]);
        let (next, _) = model.predict(state.view(), a)?;
        let truth = ep.states.row(t + 1);
        let err: f64 = (0..truth.len())
            .map(|c| (scale.scale_one(c, next[(0, c)]) - scale.scale_one(c, truth[c])).abs())
            .sum::<f64>()
            / truth.len() as f64;
        per_step.push(if err.is_finite() { err } else { f64::INFINITY });
        state = next;
    }
    let mean = per_step.iter().sum::<f64>() / per_step.len().max(1) as f64;
    Ok(EpisodicMae { per_step, mean })
}

/// Oracle episode of exactly `len` steps under `policy`, starting from a
/// random reset. Episodes that collapse are redrawn (up to `max_tries`).
pub fn oracle_episode(
    spec: &NetworkSpec,
    len: usize,
    seed: u64,
    max_tries: usize,
    policy: &mut dyn FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64>,
) -> Result<Episode> {
    let model = GridModel::new(Arc::new(spec.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'tries: for _ in 0..max_tries {
        let mut state = model.reset(ResetMode::UniformRandom, rng.random());
        let mut states = vec![state.encode()];
        let mut actions = Vec::with_capacity(len);
        let mut rewards = Vec::with_capacity(len);
        for _ in 0..len {
            let a = policy(&state.encode(), &mut rng);
            let res = model.step(&state, &Action::decode(spec, &a)?)?;
            if res.done {
                continue 'tries;
            }
            actions.push(a);
            rewards.push(res.reward);
            state = res.next_state;
            states.push(state.encode());
        }
        let sd = spec.state_dim();
        return Ok(Episode {
            states: Array2::from_shape_vec((len + 1, sd), states.concat()).unwrap(),
            actions: Array2::from_shape_vec((len, spec.action_dim()), actions.concat()).unwrap(),
            rewards,
        });
    }
    Err(Error::Dataset(format!("no {len}-step episode without collapse in {max_tries} tries")))
}

/// Uniform-random policy over the action box.
pub fn random_policy(spec: &NetworkSpec) -> impl FnMut(&[f64], &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = spec.action_bounds();
    move |_, rng| lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)).collect()
}
