//! Ground-truth transition, reward and terminal logic, plus a reset/step
//! environment wrapper around it.

use std::cell::Cell;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{advance_aux, Action, Device, GridState, NetworkSpec, STEPS_PER_DAY};
use crate::powerflow::{
    branch_flows, build_admittance, slack_power, solve_power_flow, Admittance, BusInjections,
    VoltageSolution,
};
use crate::projection::{build_des_polytope, build_generator_polytope, project_exact};

thread_local! {
    static ORACLE_STEPS: Cell<u64> = const { Cell::new(0) };
}

/// Number of oracle transitions evaluated on the calling thread so far.
pub fn oracle_step_count() -> u64 {
    ORACLE_STEPS.with(|c| c.get())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInfo {
    /// `(dE1, dE2, dE3)` in MWh.
    pub energy_loss_parts: [f64; 3],
    pub penalty: f64,
    pub raw_reward: f64,
}

impl StepInfo {
    pub fn energy_loss(&self) -> f64 {
        self.energy_loss_parts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: GridState,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResetMode {
    FixedStart,
    UniformRandom,
}

/// Battery charge after one step; charging (`p <= 0`) is scaled by `eta`,
/// discharging by `1 / eta`.
pub fn soc_update(soc: f64, p_des: f64, eta: f64, delta_t: f64) -> f64 {
    if p_des <= 0.0 {
        soc - eta * delta_t * p_des
    } else {
        soc - delta_t / eta * p_des
    }
}

/// Operating-limit penalty; voltages in p.u., flows in MVA converted to p.u.
pub fn penalty(spec: &NetworkSpec, v: &VoltageSolution, flows: &[(f64, f64)]) -> f64 {
    let pos = |x: f64| x.max(0.0);
    let mut sum = 0.0;
    for (bus, &vm) in spec.buses.iter().zip(&v.v_mag) {
        sum += pos(vm - bus.v_max) + pos(bus.v_min - vm);
    }
    for (br, &(s_ij, s_ji)) in spec.branches.iter().zip(flows) {
        let (hi, lo) = (br.s_rating / spec.base_mva, br.s_min / spec.base_mva);
        for s in [s_ij / spec.base_mva, s_ji / spec.base_mva] {
            sum += pos(s - hi) + pos(lo - s);
        }
    }
    spec.delta_t * sum
}

/// Reward terms shared by the oracle and the surrogate.
pub(crate) fn reward_terms(
    spec: &NetworkSpec,
    state_next: &GridState,
    p_slack: f64,
    phi: f64,
) -> (f64, StepInfo) {
    let dt = spec.delta_t;
    let des_slot = spec.devices().iter().position(|&d| d == Device::Des).unwrap();
    let de1 = dt * (state_next.p_dev.iter().sum::<f64>() - state_next.p_dev[slack_slot(spec)] + p_slack);
    let de2 = -dt * state_next.p_dev[des_slot];
    let de3 = dt
        * spec
            .nonslack_generators()
            .iter()
            .enumerate()
            .map(|(k, &g)| state_next.p_max_gen[k] - state_next.p_dev[device_slot(spec, Device::Generator(g))])
            .sum::<f64>();
    let raw = -(de1 + de2 + de3 + spec.lambda_penalty * phi);
    let info = StepInfo {
        energy_loss_parts: [de1, de2, de3],
        penalty: phi,
        raw_reward: raw,
    };
    (raw.clamp(spec.reward_clip.0, spec.reward_clip.1), info)
}

pub(crate) fn device_slot(spec: &NetworkSpec, d: Device) -> usize {
    spec.devices().iter().position(|&x| x == d).unwrap()
}

pub(crate) fn slack_slot(spec: &NetworkSpec) -> usize {
    device_slot(spec, Device::Generator(spec.slack_index()))
}

/// Input shared by oracle and surrogate: everything that is fixed before the
/// projections (time step, loads, available capacity).
pub(crate) struct StepPrelude {
    pub aux_next: usize,
    pub p_max_next: Vec<f64>,
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
}

pub(crate) fn prelude(spec: &NetworkSpec, state: &GridState) -> Result<StepPrelude> {
    let aux_next = advance_aux(state.aux)?;
    let p_max_next = (0..spec.n_nonslack())
        .map(|k| spec.profiles.gen_p_max_at(k, aux_next))
        .collect();
    let load_p: Vec<f64> = (0..spec.loads.len()).map(|l| spec.profiles.load_at(l, aux_next)).collect();
    let load_q = load_p.iter().zip(&spec.loads).map(|(&p, l)| l.reactive(p)).collect();
    Ok(StepPrelude {
        aux_next,
        p_max_next,
        load_p,
        load_q,
    })
}

/// Assemble the next state (slack entries left at zero) from projected setpoints.
pub(crate) fn assemble_state(
    spec: &NetworkSpec,
    pre: &StepPrelude,
    gen_pq: &[[f64; 2]],
    des_pq: [f64; 2],
    soc: f64,
) -> GridState {
    let nd = spec.n_devices();
    let mut p_dev = vec![0.0; nd];
    let mut q_dev = vec![0.0; nd];
    for (slot, &d) in spec.devices().iter().enumerate() {
        let (p, q) = match d {
            Device::Load(l) => (pre.load_p[l], pre.load_q[l]),
            Device::Des => (des_pq[0], des_pq[1]),
            Device::Generator(g) => match spec.nonslack_generators().iter().position(|&x| x == g) {
                Some(k) => (gen_pq[k][0], gen_pq[k][1]),
                None => (0.0, 0.0),
            },
        };
        p_dev[slot] = p;
        q_dev[slot] = q;
    }
    GridState {
        p_dev,
        q_dev,
        soc: soc.clamp(spec.des.soc_min, spec.des.soc_max),
        p_max_gen: pre.p_max_next.clone(),
        aux: pre.aux_next,
    }
}

/// Per-bus `(P, Q)` for buses `2..=n` from all non-slack devices.
pub fn bus_injections(spec: &NetworkSpec, state: &GridState) -> BusInjections {
    let m = spec.n_buses() - 1;
    let mut inj = BusInjections {
        p_bus: vec![0.0; m],
        q_bus: vec![0.0; m],
    };
    for (slot, &d) in spec.devices().iter().enumerate() {
        let bus = spec.device_bus(d);
        if bus == 1 {
            continue;
        }
        inj.p_bus[bus - 2] += state.p_dev[slot];
        inj.q_bus[bus - 2] += state.q_dev[slot];
    }
    inj
}

/// The exact simulator: projections, storage update, AC power flow, reward.
#[derive(Debug, Clone)]
pub struct GridModel {
    pub spec: Arc<NetworkSpec>,
    pub adm: Admittance,
}

impl GridModel {
    pub fn new(spec: Arc<NetworkSpec>) -> Self {
        let adm = build_admittance(&spec);
        GridModel { spec, adm }
    }

    /// Project raw setpoints onto the device polytopes for the upcoming step.
    pub fn project_setpoints(
        &self,
        state: &GridState,
        action: &Action,
        p_max_next: &[f64],
    ) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
        let spec = &*self.spec;
        let mut gen = Vec::with_capacity(spec.n_nonslack());
        for (k, &g) in spec.nonslack_generators().iter().enumerate() {
            let poly = build_generator_polytope(&spec.generators[g], p_max_next[k])?;
            gen.push(project_exact([action.a_p_gen[k], action.a_q_gen[k]], &poly)?.x);
        }
        let poly = build_des_polytope(&spec.des, state.soc, spec.delta_t)?;
        let des = project_exact([action.a_p_des, action.a_q_des], &poly)?.x;
        Ok((gen, des))
    }

    pub fn step(&self, state: &GridState, action: &Action) -> Result<StepResult> {
        ORACLE_STEPS.with(|c| c.set(c.get() + 1));
        let spec = &*self.spec;
        let pre = prelude(spec, state)?;
        let (gen, des) = self.project_setpoints(state, action, &pre.p_max_next)?;
        let soc = soc_update(state.soc, des[0], spec.des.eta, spec.delta_t);
        let mut next = assemble_state(spec, &pre, &gen, des, soc);

        let inj = bus_injections(spec, &next);
        let v = match solve_power_flow(&self.adm, &inj) {
            Ok(v) => v,
            Err(_) => {
                let floor = spec.reward_clip.0;
                return Ok(StepResult {
                    next_state: state.clone(),
                    reward: floor,
                    done: true,
                    info: StepInfo {
                        raw_reward: floor,
                        ..StepInfo::default()
                    },
                });
            }
        };
        let (p_slack, q_slack) = slack_power(&self.adm, &v);
        let s = slack_slot(spec);
        next.p_dev[s] = p_slack;
        next.q_dev[s] = q_slack;
        let phi = penalty(spec, &v, &branch_flows(spec, &v));
        let (reward, info) = reward_terms(spec, &next, p_slack, phi);
        Ok(StepResult {
            next_state: next,
            reward,
            done: false,
            info,
        })
    }

    /// Initial state. Device powers follow the profiles at the sampled time
    /// step with full renewable output and an idle battery; the slack entry
    /// comes from the corresponding power flow.
    pub fn reset(&self, mode: ResetMode, seed: u64) -> GridState {
        let spec = &*self.spec;
        let (soc, aux) = match mode {
            ResetMode::FixedStart => (spec.des.soc_min, 0),
            ResetMode::UniformRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let soc = rng.random_range(spec.des.soc_min..=spec.des.soc_max);
                (soc, rng.random_range(0..STEPS_PER_DAY))
            }
        };
        self.profile_state(soc, aux)
    }

    pub fn profile_state(&self, soc: f64, aux: usize) -> GridState {
        let spec = &*self.spec;
        let gen: Vec<[f64; 2]> = (0..spec.n_nonslack())
            .map(|k| [spec.profiles.gen_p_max_at(k, aux), 0.0])
            .collect();
        let load_p: Vec<f64> = (0..spec.loads.len()).map(|l| spec.profiles.load_at(l, aux)).collect();
        let pre = StepPrelude {
            aux_next: aux,
            p_max_next: gen.iter().map(|g| g[0]).collect(),
            load_q: load_p.iter().zip(&spec.loads).map(|(&p, l)| l.reactive(p)).collect(),
            load_p,
        };
        let mut state = assemble_state(spec, &pre, &gen, [0.0, 0.0], soc);
        let s = slack_slot(spec);
        let inj = bus_injections(spec, &state);
        let (p, q) = match solve_power_flow(&self.adm, &inj) {
            Ok(v) => slack_power(&self.adm, &v),
            Err(_) => (-inj.p_bus.iter().sum::<f64>(), -inj.q_bus.iter().sum::<f64>()),
        };
        state.p_dev[s] = p;
        state.q_dev[s] = q;
        state
    }
}

/// One transition as seen by an agent.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

/// Reset/step interface shared by the oracle and learned environments.
pub trait Env {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<EnvStep>;
}

/// Oracle environment with a step horizon.
#[derive(Debug, Clone)]
pub struct OracleEnv {
    pub model: GridModel,
    pub mode: ResetMode,
    pub horizon: usize,
    state: Option<GridState>,
    t: usize,
}

pub const DEFAULT_HORIZON: usize = 3000;

impl OracleEnv {
    pub fn new(spec: Arc<NetworkSpec>, mode: ResetMode, horizon: usize) -> Self {
        OracleEnv {
            model: GridModel::new(spec),
            mode,
            horizon,
            state: None,
            t: 0,
        }
    }

    pub fn state(&self) -> Option<&GridState> {
        self.state.as_ref()
    }

    /// Start from an explicit state instead of a sampled one.
    pub fn set_state(&mut self, state: GridState) {
        self.state = Some(state);
        self.t = 0;
    }
}

impl Env for OracleEnv {
    fn state_dim(&self) -> usize {
        self.model.spec.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.model.spec.action_dim()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let s = self.model.reset(self.mode, seed);
        let v = s.encode();
        self.set_state(s);
        v
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let state = self.state.as_ref().ok_or(Error::NotTrained("environment must be reset before stepping"))?;
        let action = Action::decode(&self.model.spec, action)?;
        let r = self.model.step(state, &action)?;
        self.t += 1;
        let out = EnvStep {
            state: r.next_state.encode(),
            reward: r.reward,
            done: r.done,
            truncated: !r.done && self.t >= self.horizon,
            info: r.info,
        };
        self.state = Some(r.next_state);
        Ok(out)
    }
}

/// One recorded step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Column names in flattening order: `P_<id>`, `Q_<id>`, `SoC`, `Pmax_<id>`, `aux`.
pub fn state_column_names(spec: &NetworkSpec) -> Vec<String> {
    let mut names = Vec::with_capacity(spec.state_dim());
    names.extend(spec.devices().iter().map(|&d| format!("P_{}", spec.device_id(d))));
    names.extend(spec.devices().iter().map(|&d| format!("Q_{}", spec.device_id(d))));
    names.push("SoC".into());
    names.extend(
        spec.nonslack_generators()
            .iter()
            .map(|&g| format!("Pmax_{}", spec.generators[g].id)),
    );
    names.push("aux".into());
    names
}

pub fn action_column_names(spec: &NetworkSpec) -> Vec<String> {
    let ids: Vec<usize> = spec.nonslack_generators().iter().map(|&g| spec.generators[g].id).collect();
    let mut names: Vec<String> = ids.iter().map(|id| format!("aP_{id}")).collect();
    names.extend(ids.iter().map(|id| format!("aQ_{id}")));
    names.push(format!("aP_{}", spec.des.id));
    names.push(format!("aQ_{}", spec.des.id));
    names
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, spec: &NetworkSpec, rows: &[TrajectoryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut header = vec!["t".to_string()];
    header.extend(state_column_names(spec));
    header.extend(action_column_names(spec));
    header.push("reward".into());
    header.push("done".into());
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for r in rows {
        let mut line = r.t.to_string();
        for x in r.state.iter().chain(&r.action).chain(std::iter::once(&r.reward)) {
            line.push(',');
            line.push_str(&x.to_string());
        }
        line.push(',');
        line.push_str(if r.done { "1" } else { "0" });
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}
