//! Physics-trained surrogate. Two projection networks learn the device
//! setpoint projections from KKT residuals, a third learns bus voltages from
//! power-balance mismatches. None of them sees a simulator sample: inputs are
//! Sobol points over the operating ranges and the losses are analytic.

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::env::{
    assemble_state, bus_injections, penalty, prelude, reward_terms, slack_slot, soc_update, Env, EnvStep, GridModel,
    ResetMode, StepInfo, StepResult,
};
use crate::grid::{Action, GridState, NetworkSpec};
use crate::nn::{clip_grad_norm, AdamW, AdamWConfig, Container, Mlp, MlpArch, NetCheckpoint, Scaler, Sobol};
use crate::powerflow::{
    branch_flows, build_admittance, jacobian_into, mismatch, slack_power, Admittance, BusInjections, VoltageSolution,
};
use crate::projection::{build_des_polytope, build_generator_polytope, kkt_loss_grad, Polytope};
use crate::terminal::{terminal_features, GbtModel};

/// Width of the shared Sobol stream. Columns: generator net `0..6`, DES net
/// `6..9`, power-balance net `9..19`; `19` and `20` are drawn but unused.
pub const SOBOL_DIMS: usize = 21;

/// Held-out evaluation points are taken from this far into the stream, well
/// past anything a training run consumes.
pub const HELD_OUT_OFFSET: u64 = 1 << 31;

/// Smoothing factor of the loss average used for early stopping.
pub const LOSS_EMA: f64 = 0.999;

/// Voltage magnitude and angle windows used to scale pb-net outputs.
pub const V_MAG_RANGE: (f64, f64) = (0.8, 1.2);
pub const V_ANG_RANGE: (f64, f64) = (-0.5, 0.5);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Stop once the best smoothed loss is this many steps old.
    pub window: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub width: usize,
    pub depth: usize,
    /// Global gradient-norm cap applied before each optimizer step.
    pub grad_clip: Option<f64>,
    /// Cosine-anneal the learning rate to this value at `max_steps`.
    pub lr_final: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            lr: 1e-5,
            window: 5000,
            max_steps: 1_000_000,
            seed: 0,
            width: 512,
            depth: 3,
            grad_clip: None,
            lr_final: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invariant("batch", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::invariant("window", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invariant("lr", "must be positive"));
        }
        if self.lr_final.is_some_and(|f| !(f >= 0.0 && f <= self.lr)) {
            return Err(Error::invariant("lr_final", "must lie in [0, lr]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: NetCheckpoint,
    /// Batch loss at every step.
    pub history: Vec<f64>,
    /// Lowest smoothed loss.
    pub best_loss: f64,
    pub stopped_early: bool,
    pub elapsed_s: f64,
}

impl TrainOutcome {
    pub fn write_history_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_loss_csv(path, &self.history)
    }
}

pub fn write_loss_csv(path: impl AsRef<Path>, history: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(history.len() * 24);
    out.push_str("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{i},{l:e}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Per-net input/output scaling and loss definition.
pub(crate) trait Task {
    fn sobol_cols(&self) -> Range<usize>;
    fn input_scaler(&self) -> &Scaler;
    fn output_scaler(&self) -> &Scaler;
    fn output_dim(&self) -> usize;
    /// Mean loss over one sample; writes `dL/dy` for that sample.
    fn loss_grad(&self, x: &[f64], y: &[f64], dy: &mut [f64]) -> f64;

    /// Optional adjustment of the freshly initialized network.
    fn init(&self, _net: &mut Mlp) {}
}

fn batch_loss_grad<T: Task>(task: &T, x: ArrayView2<f64>, y: ArrayView2<f64>, mut dy: ArrayViewMut2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let mut total = 0.0;
    let mut g = vec![0.0; y.ncols()];
    for r in 0..x.nrows() {
        let xr = x.row(r).to_vec();
        let yr = y.row(r).to_vec();
        g.iter_mut().for_each(|v| *v = 0.0);
        total += task.loss_grad(&xr, &yr, &mut g);
        for (d, gv) in dy.row_mut(r).iter_mut().zip(&g) {
            *d = gv / n;
        }
    }
    total / n
}

/// Called after every optimizer step with the step index, the batch loss and
/// the current network.
pub type Progress<'a> = &'a mut dyn FnMut(usize, f64, &Mlp);

fn train_task<T: Task>(task: &T, cfg: &TrainConfig, progress: Option<Progress>) -> Result<TrainOutcome> {
    let mut progress = progress;
    cfg.validate()?;
    let start = Instant::now();
    let arch = MlpArch::residual_net(task.input_scaler().dim(), task.output_dim(), cfg.width, cfg.depth);
    let mut net = Mlp::new(arch, cfg.seed)?;
    task.init(&mut net);
    let mut opt = AdamW::new(
        net.n_params(),
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let sobol = Sobol::new(SOBOL_DIMS);
    let cols = task.sobol_cols();
    let mut grads = vec![0.0; net.n_params()];
    let mut dy = Array2::zeros((cfg.batch, task.output_dim()));
    let mut history = Vec::new();
    // Progress is judged on an exponential average; single Sobol batches are
    // noisy enough that a lucky minimum would stall the per-batch best.
    let (mut best, mut best_step) = (f64::INFINITY, 0usize);
    let mut smoothed = f64::NAN;
    let mut stopped_early = false;

    for step in 0..cfg.max_steps {
        let pts = sobol.sample(cfg.batch, (step * cfg.batch) as u64);
        let x = pts.slice(s![.., cols.clone()]);
        let (y, cache) = net.forward_train(x)?;
        let loss = batch_loss_grad(task, x, y.view(), dy.view_mut());
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!(
                    "loss {loss} after {step} steps (best {best:e} at step {best_step}); max |y| = {:e}",
                    y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
                ),
            });
        }
        history.push(loss);
        smoothed = if step == 0 { loss } else { LOSS_EMA * smoothed + (1.0 - LOSS_EMA) * loss };
        if smoothed < best {
            best = smoothed;
            best_step = step;
        } else if step - best_step >= cfg.window {
            stopped_early = true;
            break;
        }
        grads.iter_mut().for_each(|g| *g = 0.0);
        net.backward_into(&cache, dy.view(), &mut grads);
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        if let Some(f) = cfg.lr_final {
            let progress = step as f64 / cfg.max_steps as f64;
            opt.config.lr = f + 0.5 * (cfg.lr - f) * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        opt.step(net.params_mut(), &grads);
        if let Some(cb) = progress.as_mut() {
            cb(step, loss, &net);
        }
    }

    let checkpoint = NetCheckpoint {
        model: net,
        input_scaler: Some(task.input_scaler().clone()),
        output_scaler: Some(task.output_scaler().clone()),
        optimizer: Some(opt),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_loss: best,
        stopped_early,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Held-out inputs for a task, in scaled units.
pub(crate) fn held_out(cols: Range<usize>, n: usize) -> Array2<f64> {
    Sobol::new(SOBOL_DIMS)
        .sample(n, HELD_OUT_OFFSET)
        .slice(s![.., cols])
        .to_owned()
}

// ---------------------------------------------------------------------------
// Projection networks

/// KKT residuals are evaluated in `x / scale` so that both coordinates and the
/// multipliers are O(1).
fn projection_scale(p: (f64, f64), q: (f64, f64)) -> f64 {
    (p.1 - p.0).max(q.1 - q.0)
}

pub(crate) struct GenTask {
    pub spec: NetworkSpec,
    pub input: Scaler,
    pub output: Scaler,
    scales: Vec<f64>,
}

impl GenTask {
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        let mut input = Vec::new();
        let mut output = Vec::new();
        let mut scales = Vec::new();
        for &g in spec.nonslack_generators() {
            let gen = &spec.generators[g];
            let (p, q) = ((gen.p_min, gen.p_max), (gen.q_min, gen.q_max));
            input.extend([p, q, p]);
            output.extend([p, q]);
            scales.push(projection_scale(p, q));
        }
        Ok(GenTask {
            spec: spec.clone(),
            input: Scaler::new(&input)?,
            output: Scaler::new(&output)?,
            scales,
        })
    }

    fn n_rows(&self) -> usize {
        7
    }

    /// Polytope for generator `k` at the given (unscaled) capacity.
    pub fn polytope(&self, k: usize, p_max_t: f64) -> Result<Polytope> {
        let g = &self.spec.generators[self.spec.nonslack_generators()[k]];
        build_generator_polytope(g, p_max_t.clamp(g.p_min, g.p_max))
    }

    /// Unscaled action and polytope for generator `k` from a scaled input row.
    pub fn problem(&self, k: usize, x: &[f64]) -> ([f64; 2], Polytope) {
        let a = [self.input.unscale_one(3 * k, x[3 * k]), self.input.unscale_one(3 * k + 1, x[3 * k + 1])];
        let pmax = self.input.unscale_one(3 * k + 2, x[3 * k + 2]);
        (a, self.polytope(k, pmax).expect("capacity within static bounds"))
    }
}

impl Task for GenTask {
    fn sobol_cols(&self) -> Range<usize> {
        0..3 * self.scales.len()
    }
    fn input_scaler(&self) -> &Scaler {
        &self.input
    }
    fn output_scaler(&self) -> &Scaler {
        &self.output
    }
    fn output_dim(&self) -> usize {
        self.scales.len() * (2 + self.n_rows())
    }

    fn loss_grad(&self, x: &[f64], y: &[f64], dy: &mut [f64]) -> f64 {
        let ng = self.scales.len();
        let mut loss = 0.0;
        for k in 0..ng {
            let (a, poly) = self.problem(k, x);
            let lam = &y[2 * ng + 7 * k..2 * ng + 7 * (k + 1)];
            let (l, dx, dl) = kkt_terms(
                a,
                &poly,
                self.scales[k],
                &self.output,
                [2 * k, 2 * k + 1],
                [y[2 * k], y[2 * k + 1]],
                lam,
            );
            loss += l / ng as f64;
            dy[2 * k] = dx[0] / ng as f64;
            dy[2 * k + 1] = dx[1] / ng as f64;
            for (d, g) in dy[2 * ng + 7 * k..2 * ng + 7 * (k + 1)].iter_mut().zip(dl) {
                *d = g / ng as f64;
            }
        }
        loss
    }
}

/// KKT loss of a scaled primal output against `poly`, with gradients taken
/// with respect to the scaled primal output and the raw multipliers.
fn kkt_terms(
    a: [f64; 2],
    poly: &Polytope,
    scale: f64,
    out: &Scaler,
    dims: [usize; 2],
    y: [f64; 2],
    lam: &[f64],
) -> (f64, [f64; 2], Vec<f64>) {
    let x = [out.unscale_one(dims[0], y[0]) / scale, out.unscale_one(dims[1], y[1]) / scale];
    let (l, dx, dl) = kkt_loss_grad([a[0] / scale, a[1] / scale], &poly.rescaled(scale), x, lam);
    (
        l,
        [dx[0] * out.width(dims[0]) / scale, dx[1] * out.width(dims[1]) / scale],
        dl,
    )
}

pub(crate) struct DesTask {
    pub spec: NetworkSpec,
    pub input: Scaler,
    pub output: Scaler,
    scale: f64,
}

impl DesTask {
    pub fn new(spec: &NetworkSpec) -> Result<Self> {
        let d = &spec.des;
        let (p, q) = ((d.p_min, d.p_max), (d.q_min, d.q_max));
        Ok(DesTask {
            spec: spec.clone(),
            input: Scaler::new(&[p, q, (d.soc_min, d.soc_max)])?,
            output: Scaler::new(&[p, q])?,
            scale: projection_scale(p, q),
        })
    }

    pub fn polytope(&self, soc: f64) -> Result<Polytope> {
        let d = &self.spec.des;
        build_des_polytope(d, soc.clamp(d.soc_min, d.soc_max), self.spec.delta_t)
    }

    pub fn problem(&self, x: &[f64]) -> ([f64; 2], Polytope) {
        let a = [self.input.unscale_one(0, x[0]), self.input.unscale_one(1, x[1])];
        let soc = self.input.unscale_one(2, x[2]);
        (a, self.polytope(soc).expect("SoC within bounds"))
    }
}

impl Task for DesTask {
    fn sobol_cols(&self) -> Range<usize> {
        6..9
    }
    fn input_scaler(&self) -> &Scaler {
        &self.input
    }
    fn output_scaler(&self) -> &Scaler {
        &self.output
    }
    fn output_dim(&self) -> usize {
        12
    }

    fn loss_grad(&self, x: &[f64], y: &[f64], dy: &mut [f64]) -> f64 {
        let (a, poly) = self.problem(x);
        let (l, dx, dl) = kkt_terms(a, &poly, self.scale, &self.output, [0, 1], [y[0], y[1]], &y[2..]);
        dy[0] = dx[0];
        dy[1] = dx[1];
        dy[2..].copy_from_slice(&dl);
        l
    }
}

// ---------------------------------------------------------------------------
// Power-balance network

pub(crate) struct PbTask {
    pub adm: Admittance,
    pub input: Scaler,
    pub output: Scaler,
}

impl PbTask {
    pub fn new(spec: &NetworkSpec, adm: &Admittance) -> Result<Self> {
        let (p, q) = spec.bus_injection_ranges();
        let m = p.len();
        let input: Vec<_> = p.into_iter().chain(q).collect();
        let output: Vec<_> = std::iter::repeat_n(V_MAG_RANGE, m)
            .chain(std::iter::repeat_n(V_ANG_RANGE, m))
            .collect();
        Ok(PbTask {
            adm: adm.clone(),
            input: Scaler::new(&input)?,
            output: Scaler::new(&output)?,
        })
    }

    fn m(&self) -> usize {
        self.adm.n() - 1
    }

    pub fn injections(&self, x: &[f64]) -> BusInjections {
        let m = self.m();
        let u = self.input.unscale(x);
        BusInjections {
            p_bus: u[..m].to_vec(),
            q_bus: u[m..].to_vec(),
        }
    }

    /// Full-network voltages (slack bus at `1∠0`) from a scaled output row.
    pub fn voltages(&self, y: &[f64]) -> VoltageSolution {
        let m = self.m();
        let u = self.output.unscale(y);
        let mut v_mag = vec![1.0];
        v_mag.extend_from_slice(&u[..m]);
        let mut v_ang = vec![0.0];
        v_ang.extend_from_slice(&u[m..]);
        VoltageSolution {
            v_mag,
            v_ang,
            iterations: 0,
        }
    }

    /// Scaled output row holding a given voltage profile.
    pub fn scaled_voltages(&self, v: &VoltageSolution) -> Vec<f64> {
        let raw: Vec<f64> = v.v_mag[1..].iter().chain(&v.v_ang[1..]).copied().collect();
        self.output.scale(&raw)
    }
}

impl Task for PbTask {
    fn sobol_cols(&self) -> Range<usize> {
        9..9 + 2 * self.m()
    }
    fn input_scaler(&self) -> &Scaler {
        &self.input
    }
    fn output_scaler(&self) -> &Scaler {
        &self.output
    }
    fn output_dim(&self) -> usize {
        2 * self.m()
    }

    /// Start from the flat profile so the first residuals are the injections.
    fn init(&self, net: &mut Mlp) {
        let m = self.m();
        let flat = VoltageSolution {
            v_mag: vec![1.0; m + 1],
            v_ang: vec![0.0; m + 1],
            iterations: 0,
        };
        net.scale_head(0.01);
        net.set_head_bias(&self.scaled_voltages(&flat));
    }

    /// `mean_i dP_i^2 + mean_i dQ_i^2` over buses `2..=n`, in p.u.
    fn loss_grad(&self, x: &[f64], y: &[f64], dy: &mut [f64]) -> f64 {
        let m = self.m();
        let inj = self.injections(x);
        let v = self.voltages(y);
        let f = mismatch(&self.adm, &inj, &v);
        let loss = f.iter().map(|r| r * r).sum::<f64>() / m as f64;
        let mut jac = DMatrix::zeros(2 * m, 2 * m);
        jacobian_into(&self.adm, &v.v_mag, &v.v_ang, &mut jac);
        // Jacobian columns are [theta; |V|], outputs are [|V|; theta].
        for c in 0..2 * m {
            let g: f64 = (0..2 * m).map(|r| jac[(r, c)] * f[r]).sum::<f64>() * 2.0 / m as f64;
            let out = if c < m { m + c } else { c - m };
            dy[out] = g * self.output.width(out);
        }
        loss
    }
}

/// Per-output mean absolute error between two scaled matrices.
pub(crate) fn column_mae(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Vec<f64> {
    (&a - &b).mapv(f64::abs).mean_axis(Axis(0)).unwrap().to_vec()
}

pub fn train_generator_net(spec: &NetworkSpec, cfg: &TrainConfig, progress: Option<Progress>) -> Result<TrainOutcome> {
    train_task(&GenTask::new(spec)?, cfg, progress)
}

pub fn train_des_net(spec: &NetworkSpec, cfg: &TrainConfig, progress: Option<Progress>) -> Result<TrainOutcome> {
    train_task(&DesTask::new(spec)?, cfg, progress)
}

pub fn train_power_balance_net(
    spec: &NetworkSpec,
    adm: &Admittance,
    cfg: &TrainConfig,
    progress: Option<Progress>,
) -> Result<TrainOutcome> {
    train_task(&PbTask::new(spec, adm)?, cfg, progress)
}

/// The three physics-informed nets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetKind {
    Generator,
    Des,
    PowerBalance,
}

fn net_loss_grad_with<T: Task>(task: &T, net: &Mlp, x: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
    let (y, cache) = net.forward_train(x)?;
    let mut dy = Array2::zeros(y.raw_dim());
    let loss = batch_loss_grad(task, x, y.view(), dy.view_mut());
    let mut grads = vec![0.0; net.n_params()];
    net.backward_into(&cache, dy.view(), &mut grads);
    Ok((loss, grads))
}

/// Training loss of `net` on a batch of scaled inputs and its gradient in the
/// flat parameters.
pub fn net_loss_grad(
    spec: &NetworkSpec,
    adm: &Admittance,
    kind: NetKind,
    net: &Mlp,
    x: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>)> {
    match kind {
        NetKind::Generator => net_loss_grad_with(&GenTask::new(spec)?, net, x),
        NetKind::Des => net_loss_grad_with(&DesTask::new(spec)?, net, x),
        NetKind::PowerBalance => net_loss_grad_with(&PbTask::new(spec, adm)?, net, x),
    }
}

/// Untrained net of the right shape for `kind`.
pub fn new_net(spec: &NetworkSpec, adm: &Admittance, kind: NetKind, width: usize, depth: usize, seed: u64) -> Result<Mlp> {
    fn build<T: Task>(task: &T, width: usize, depth: usize, seed: u64) -> Result<Mlp> {
        let arch = MlpArch::residual_net(task.input_scaler().dim(), task.output_dim(), width, depth);
        let mut net = Mlp::new(arch, seed)?;
        task.init(&mut net);
        Ok(net)
    }
    match kind {
        NetKind::Generator => build(&GenTask::new(spec)?, width, depth, seed),
        NetKind::Des => build(&DesTask::new(spec)?, width, depth, seed),
        NetKind::PowerBalance => build(&PbTask::new(spec, adm)?, width, depth, seed),
    }
}

/// Mean absolute error, in scaled output units, between the generator net's
/// primal outputs and the exact projection on `n` held-out points.
pub fn generator_held_out_mae(spec: &NetworkSpec, net: &Mlp, n: usize) -> Result<f64> {
    let task = GenTask::new(spec)?;
    let x = held_out(task.sobol_cols(), n);
    let y = net.forward_batch(x.view())?;
    let ng = spec.n_nonslack();
    let mut exact = Array2::zeros((n, 2 * ng));
    for r in 0..n {
        let xr = x.row(r).to_vec();
        for k in 0..ng {
            let (a, poly) = task.problem(k, &xr);
            let p = crate::projection::project_exact(a, &poly)?.x;
            exact[(r, 2 * k)] = task.output.scale_one(2 * k, p[0]);
            exact[(r, 2 * k + 1)] = task.output.scale_one(2 * k + 1, p[1]);
        }
    }
    let mae = column_mae(y.slice(s![.., ..2 * ng]), exact.view());
    Ok(mae.iter().sum::<f64>() / mae.len() as f64)
}

pub fn des_held_out_mae(spec: &NetworkSpec, net: &Mlp, n: usize) -> Result<f64> {
    let task = DesTask::new(spec)?;
    let x = held_out(task.sobol_cols(), n);
    let y = net.forward_batch(x.view())?;
    let mut exact = Array2::zeros((n, 2));
    for r in 0..n {
        let (a, poly) = task.problem(&x.row(r).to_vec());
        let p = crate::projection::project_exact(a, &poly)?.x;
        exact[(r, 0)] = task.output.scale_one(0, p[0]);
        exact[(r, 1)] = task.output.scale_one(1, p[1]);
    }
    let mae = column_mae(y.slice(s![.., ..2]), exact.view());
    Ok((mae[0] + mae[1]) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoltageAccuracy {
    /// p.u.
    pub v_mag_mae: f64,
    /// rad
    pub v_ang_mae: f64,
    pub n_solved: usize,
    pub n_drawn: usize,
}

/// Compare pb-net voltages with Newton-Raphson on the first `n` held-out
/// injections the solver can solve.
pub fn power_balance_accuracy(spec: &NetworkSpec, adm: &Admittance, net: &Mlp, n: usize) -> Result<VoltageAccuracy> {
    let task = PbTask::new(spec, adm)?;
    let m = task.m();
    let (mut dv, mut da) = (0.0, 0.0);
    let (mut solved, mut drawn) = (0usize, 0usize);
    let sobol = Sobol::new(SOBOL_DIMS);
    while solved < n {
        if drawn > 100 * n.max(1) {
            return Err(Error::Dataset(format!(
                "only {solved} of {drawn} held-out injections are solvable"
            )));
        }
        let pts = sobol.sample(256, HELD_OUT_OFFSET + drawn as u64);
        let x = pts.slice(s![.., task.sobol_cols()]);
        let y = net.forward_batch(x)?;
        for r in 0..x.nrows() {
            drawn += 1;
            let Ok(v) = crate::powerflow::solve_power_flow(adm, &task.injections(&x.row(r).to_vec())) else {
                continue;
            };
            let p = task.voltages(&y.row(r).to_vec());
            for i in 1..=m {
                dv += (p.v_mag[i] - v.v_mag[i]).abs();
                da += (p.v_ang[i] - v.v_ang[i]).abs();
            }
            solved += 1;
            if solved == n {
                break;
            }
        }
    }
    let denom = (n.max(1) * m) as f64;
    Ok(VoltageAccuracy {
        v_mag_mae: dv / denom,
        v_ang_mae: da / denom,
        n_solved: solved,
        n_drawn: drawn,
    })
}

// ---------------------------------------------------------------------------
// Assembled surrogate

/// Trained pieces of the surrogate. `None` marks a net that has not been trained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurrogateBundle {
    pub gen_net: Option<NetCheckpoint>,
    pub des_net: Option<NetCheckpoint>,
    pub pb_net: Option<NetCheckpoint>,
    pub terminal: Option<GbtModel>,
}

const ENTRY_GEN: &str = "gen_net";
const ENTRY_DES: &str = "des_net";
const ENTRY_PB: &str = "pb_net";
const ENTRY_TERMINAL: &str = "terminal";

impl SurrogateBundle {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        for (name, net) in [(ENTRY_GEN, &self.gen_net), (ENTRY_DES, &self.des_net), (ENTRY_PB, &self.pb_net)] {
            if let Some(n) = net {
                c.insert(name, n.to_bytes());
            }
        }
        if let Some(t) = &self.terminal {
            c.insert(ENTRY_TERMINAL, t.to_json().into_bytes());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let net = |name: &str| -> Result<Option<NetCheckpoint>> {
            c.entries.get(name).map(|b| NetCheckpoint::from_bytes(b)).transpose()
        };
        let terminal = match c.entries.get(ENTRY_TERMINAL) {
            Some(b) => Some(GbtModel::from_json(
                std::str::from_utf8(b).map_err(|_| Error::Checkpoint("terminal model is not UTF-8".into()))?,
            )?),
            None => None,
        };
        Ok(SurrogateBundle {
            gen_net: net(ENTRY_GEN)?,
            des_net: net(ENTRY_DES)?,
            pb_net: net(ENTRY_PB)?,
            terminal,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Inference-ready surrogate transition. Immutable once built, so one
/// instance can serve any number of rollout workers.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub spec: Arc<NetworkSpec>,
    pub adm: Admittance,
    gen: (Mlp, Scaler, Scaler),
    des: (Mlp, Scaler, Scaler),
    pb: (Mlp, Scaler, Scaler),
    terminal: GbtModel,
}

fn ready(ck: &Option<NetCheckpoint>, name: &'static str, input: usize, output: usize) -> Result<(Mlp, Scaler, Scaler)> {
    let ck = ck.as_ref().ok_or(Error::NotTrained(name))?;
    let (Some(si), Some(so)) = (&ck.input_scaler, &ck.output_scaler) else {
        return Err(Error::Checkpoint(format!("{name} checkpoint has no scalers")));
    };
    let checks = [
        ("input dim", input, ck.model.input_dim()),
        ("input scaler dim", input, si.dim()),
        ("output dim", output, ck.model.output_dim()),
    ];
    for (what, expected, got) in checks {
        if expected != got {
            return Err(Error::Checkpoint(format!("{name} {what}: expected {expected}, got {got}")));
        }
    }
    Ok((ck.model.clone(), si.clone(), so.clone()))
}

impl Surrogate {
    pub fn new(spec: Arc<NetworkSpec>, bundle: &SurrogateBundle) -> Result<Self> {
        let ng = spec.n_nonslack();
        let m = spec.n_buses() - 1;
        let gen = ready(&bundle.gen_net, "generator net", 3 * ng, 9 * ng)?;
        let des = ready(&bundle.des_net, "DES net", 3, 12)?;
        let pb = ready(&bundle.pb_net, "power-balance net", 2 * m, 2 * m)?;
        let terminal = bundle.terminal.clone().ok_or(Error::NotTrained("terminal classifier"))?;
        if terminal.n_features != spec.state_dim() + spec.action_dim() {
            return Err(Error::Checkpoint("terminal classifier feature count".into()));
        }
        let adm = build_admittance(&spec);
        Ok(Surrogate {
            spec,
            adm,
            gen,
            des,
            pb,
            terminal,
        })
    }

    pub fn step(&self, state: &GridState, action: &Action) -> Result<StepResult> {
        let s = Array2::from_shape_vec((1, self.spec.state_dim()), state.encode()).expect("state row");
        let a = Array2::from_shape_vec((1, self.spec.action_dim()), action.encode()).expect("action row");
        Ok(self.step_batch(s.view(), a.view())?.pop().expect("one result"))
    }

    /// One transition per row; identical, bit for bit, to calling [`Surrogate::step`] per row.
    pub fn step_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<StepResult>> {
        let spec = &*self.spec;
        let n = states.nrows();
        if states.ncols() != spec.state_dim() {
            return Err(Error::Dimension {
                context: "surrogate states",
                expected: spec.state_dim(),
                got: states.ncols(),
            });
        }
        if actions.ncols() != spec.action_dim() || actions.nrows() != n {
            return Err(Error::Dimension {
                context: "surrogate actions",
                expected: spec.action_dim(),
                got: actions.ncols(),
            });
        }
        let ng = spec.n_nonslack();
        let mut parsed = Vec::with_capacity(n);
        let mut gx = Array2::zeros((n, 3 * ng));
        let mut dx = Array2::zeros((n, 3));
        for r in 0..n {
            let st = GridState::decode(spec, &states.row(r).to_vec())?;
            let ac = Action::decode(spec, &actions.row(r).to_vec())?;
            let pre = prelude(spec, &st)?;
            let si = &self.gen.1;
            for k in 0..ng {
                gx[(r, 3 * k)] = si.scale_one(3 * k, ac.a_p_gen[k]);
                gx[(r, 3 * k + 1)] = si.scale_one(3 * k + 1, ac.a_q_gen[k]);
                gx[(r, 3 * k + 2)] = si.scale_one(3 * k + 2, pre.p_max_next[k]);
            }
            let si = &self.des.1;
            dx[(r, 0)] = si.scale_one(0, ac.a_p_des);
            dx[(r, 1)] = si.scale_one(1, ac.a_q_des);
            dx[(r, 2)] = si.scale_one(2, st.soc);
            parsed.push((st, pre));
        }
        let gy = self.gen.0.forward_batch(gx.view())?;
        let dy = self.des.0.forward_batch(dx.view())?;

        let m = spec.n_buses() - 1;
        let mut next = Vec::with_capacity(n);
        let mut px = Array2::zeros((n, 2 * m));
        for (r, (st, pre)) in parsed.iter().enumerate() {
            let so = &self.gen.2;
            let gen_pq: Vec<[f64; 2]> = (0..ng)
                .map(|k| [so.unscale_one(2 * k, gy[(r, 2 * k)]), so.unscale_one(2 * k + 1, gy[(r, 2 * k + 1)])])
                .collect();
            let so = &self.des.2;
            let des_pq = [so.unscale_one(0, dy[(r, 0)]), so.unscale_one(1, dy[(r, 1)])];
            let soc = soc_update(st.soc, des_pq[0], spec.des.eta, spec.delta_t);
            let ns = assemble_state(spec, pre, &gen_pq, des_pq, soc);
            let inj = bus_injections(spec, &ns);
            for (c, v) in inj.p_bus.iter().chain(&inj.q_bus).enumerate() {
                px[(r, c)] = self.pb.1.scale_one(c, *v);
            }
            next.push(ns);
        }
        let py = self.pb.0.forward_batch(px.view())?;

        let mut out = Vec::with_capacity(n);
        let slot = slack_slot(spec);
        for (r, mut ns) in next.into_iter().enumerate() {
            let feats = terminal_features(&states.row(r).to_vec(), &actions.row(r).to_vec());
            if self.terminal.predict(ArrayView1::from(&feats[..])).1 {
                let floor = spec.reward_clip.0;
                out.push(StepResult {
                    next_state: parsed[r].0.clone(),
                    reward: floor,
                    done: true,
                    info: StepInfo {
                        raw_reward: floor,
                        ..StepInfo::default()
                    },
                });
                continue;
            }
            let so = &self.pb.2;
            let raw: Vec<f64> = py.row(r).iter().enumerate().map(|(c, &u)| so.unscale_one(c, u)).collect();
            let v = VoltageSolution {
                v_mag: std::iter::once(1.0).chain(raw[..m].iter().copied()).collect(),
                v_ang: std::iter::once(0.0).chain(raw[m..].iter().copied()).collect(),
                iterations: 0,
            };
            let (p_slack, q_slack) = slack_power(&self.adm, &v);
            ns.p_dev[slot] = p_slack;
            ns.q_dev[slot] = q_slack;
            let phi = penalty(spec, &v, &branch_flows(spec, &v));
            let (reward, info) = reward_terms(spec, &ns, p_slack, phi);
            out.push(StepResult {
                next_state: ns,
                reward,
                done: false,
                info,
            });
        }
        Ok(out)
    }
}

/// Reset/step wrapper around [`Surrogate`]; resets match [`OracleEnv`](crate::env::OracleEnv).
#[derive(Debug, Clone)]
pub struct SurrogateEnv {
    pub surrogate: Arc<Surrogate>,
    model: GridModel,
    pub mode: ResetMode,
    pub horizon: usize,
    state: Option<GridState>,
    t: usize,
}

impl SurrogateEnv {
    pub fn new(surrogate: Arc<Surrogate>, mode: ResetMode, horizon: usize) -> Self {
        let model = GridModel::new(surrogate.spec.clone());
        SurrogateEnv {
            surrogate,
            model,
            mode,
            horizon,
            state: None,
            t: 0,
        }
    }

    pub fn state(&self) -> Option<&GridState> {
        self.state.as_ref()
    }

    pub fn set_state(&mut self, state: GridState) {
        self.state = Some(state);
        self.t = 0;
    }

    pub fn initial_state(&self, seed: u64) -> GridState {
        self.model.reset(self.mode, seed)
    }
}

impl Env for SurrogateEnv {
    fn state_dim(&self) -> usize {
        self.surrogate.spec.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.surrogate.spec.action_dim()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let s = self.initial_state(seed);
        let v = s.encode();
        self.set_state(s);
        v
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let state = self.state.as_ref().ok_or(Error::NotTrained("environment not reset"))?;
        let action = Action::decode(&self.surrogate.spec, action)?;
        let res = self.surrogate.step(state, &action)?;
        self.t += 1;
        let out = EnvStep {
            state: res.next_state.encode(),
            reward: res.reward,
            done: res.done,
            truncated: !res.done && self.t >= self.horizon,
            info: res.info,
        };
        self.state = Some(res.next_state);
        Ok(out)
    }
}
