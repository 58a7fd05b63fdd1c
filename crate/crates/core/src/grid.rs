//! Network description, daily profiles and the MDP state/action encoding.
//!
//! A [`NetworkSpec`] is loaded from a TOML document (see `configs/anm6.toml`
//! and `docs/network-config.md`). All device powers are in MW / MVAr, SoC in
//! MWh and admittances in per-unit on `base_mva`. Loads are negative
//! injections and generation is positive, so the sum of all device
//! injections equals the network losses.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of 15-minute slots in one day.
pub const STEPS_PER_DAY: usize = 96;

const DEFAULT_CONFIG: &str = include_str!("../configs/anm6.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub id: usize,
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Upper reactive-flexibility line `Q <= tau1 * P + rho1`.
    pub tau1: f64,
    pub rho1: f64,
    /// Lower reactive-flexibility line `Q >= tau2 * P + rho2`.
    pub tau2: f64,
    pub rho2: f64,
    #[serde(default)]
    pub is_slack: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub id: usize,
    pub bus: usize,
    /// Power factor, `0 < pf <= 1`.
    pub pf: f64,
}

impl LoadSpec {
    /// Reactive demand for an active demand `p` at this load's power factor.
    pub fn reactive(&self, p: f64) -> f64 {
        p * self.pf.acos().tan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesSpec {
    pub id: usize,
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Slopes of the four capability lines, in the order
    /// `Q <= t1 P + r1`, `Q >= t2 P + r2`, `Q <= t3 P + r3`, `Q >= t4 P + r4`.
    pub tau: [f64; 4],
    pub rho: [f64; 4],
    pub soc_min: f64,
    pub soc_max: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSpec {
    pub from_bus: usize,
    pub to_bus: usize,
    pub y_series: Complex64,
    pub y_shunt: Complex64,
    /// Off-nominal tap ratio, applied on the `from` side.
    pub tap: Complex64,
    /// Apparent-power rating in MVA.
    pub s_rating: f64,
    pub s_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSpec {
    pub index: usize,
    pub v_min: f64,
    pub v_max: f64,
}

/// Daily demand and maximum-generation series, one row per device.
#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    /// Active demand per load, aligned with [`NetworkSpec::loads`].
    pub load_p: Vec<Vec<f64>>,
    /// Maximum generation per non-slack generator, aligned with
    /// [`NetworkSpec::nonslack_generators`].
    pub gen_p_max: Vec<Vec<f64>>,
}

impl Profiles {
    pub fn load_at(&self, load: usize, aux: usize) -> f64 {
        self.load_p[load][aux % STEPS_PER_DAY]
    }

    pub fn gen_p_max_at(&self, gen: usize, aux: usize) -> f64 {
        self.gen_p_max[gen][aux % STEPS_PER_DAY]
    }
}

/// Which solver convention to use for the reactive balance. The standard
/// form is `Q = sum V_i V_k (G sin - B cos)`; `Literal` flips the sign of the
/// `B cos` term for comparison against the alternative printed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactiveSign {
    #[default]
    Standard,
    Literal,
}

impl ReactiveSign {
    pub fn b_cos_factor(self) -> f64 {
        match self {
            ReactiveSign::Standard => -1.0,
            ReactiveSign::Literal => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerFlowConfig {
    pub max_iter: usize,
    /// Convergence threshold on the mismatch max-norm (p.u.).
    pub tolerance: f64,
    /// Mismatch max-norm above which the iteration is declared divergent.
    pub divergence: f64,
    /// Jacobian 1-norm condition estimate above which it is treated as singular.
    pub max_condition: f64,
    pub reactive_sign: ReactiveSign,
}

impl Default for PowerFlowConfig {
    fn default() -> Self {
        PowerFlowConfig {
            max_iter: 50,
            tolerance: 1e-10,
            divergence: 1e6,
            max_condition: 1e12,
            reactive_sign: ReactiveSign::Standard,
        }
    }
}

/// A device slot in the fixed state ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Device {
    Generator(usize),
    Load(usize),
    Des,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub generators: Vec<GeneratorSpec>,
    pub loads: Vec<LoadSpec>,
    pub des: DesSpec,
    pub branches: Vec<BranchSpec>,
    pub buses: Vec<BusSpec>,
    pub profiles: Profiles,
    pub lambda_penalty: f64,
    pub reward_clip: (f64, f64),
    /// Step length in hours.
    pub delta_t: f64,
    pub base_mva: f64,
    pub powerflow: PowerFlowConfig,
    devices: Vec<Device>,
    nonslack: Vec<usize>,
    slack: usize,
}

impl NetworkSpec {
    /// The bundled 6-bus, 7-device feeder.
    pub fn default_anm6() -> Self {
        Self::from_toml_str(DEFAULT_CONFIG).expect("bundled configuration is valid")
    }

    pub fn default_toml() -> &'static str {
        DEFAULT_CONFIG
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: NetworkFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        raw.into_spec()
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_devices(&self) -> usize {
        self.devices.len()
    }

    /// Devices in state order (ascending device id).
    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device_bus(&self, d: Device) -> usize {
        match d {
            Device::Generator(g) => self.generators[g].bus,
            Device::Load(l) => self.loads[l].bus,
            Device::Des => self.des.bus,
        }
    }

    pub fn device_id(&self, d: Device) -> usize {
        match d {
            Device::Generator(g) => self.generators[g].id,
            Device::Load(l) => self.loads[l].id,
            Device::Des => self.des.id,
        }
    }

    pub fn slack(&self) -> &GeneratorSpec {
        &self.generators[self.slack]
    }

    pub fn slack_index(&self) -> usize {
        self.slack
    }

    /// Indices into `generators` of the controllable (non-slack) units.
    pub fn nonslack_generators(&self) -> &[usize] {
        &self.nonslack
    }

    pub fn n_nonslack(&self) -> usize {
        self.nonslack.len()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_devices() + 1 + self.n_nonslack() + 1
    }

    pub fn action_dim(&self) -> usize {
        2 * self.n_nonslack() + 2
    }

    /// Feasible action box: generator and DES setpoints within their static
    /// active/reactive bounds.
    pub fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let ng = self.n_nonslack();
        let mut lo = vec![0.0; self.action_dim()];
        let mut hi = vec![0.0; self.action_dim()];
        for (k, &g) in self.nonslack.iter().enumerate() {
            let gen = &self.generators[g];
            lo[k] = gen.p_min;
            hi[k] = gen.p_max;
            lo[ng + k] = gen.q_min;
            hi[ng + k] = gen.q_max;
        }
        lo[2 * ng] = self.des.p_min;
        hi[2 * ng] = self.des.p_max;
        lo[2 * ng + 1] = self.des.q_min;
        hi[2 * ng + 1] = self.des.q_max;
        (lo, hi)
    }

    /// Active-power range each device can take.
    pub fn device_p_range(&self, d: Device) -> (f64, f64) {
        match d {
            Device::Load(l) => min_max(&self.profiles.load_p[l]),
            Device::Generator(g) if g == self.slack => self.slack_range().0,
            Device::Generator(g) => (self.generators[g].p_min, self.generators[g].p_max),
            Device::Des => (self.des.p_min, self.des.p_max),
        }
    }

    pub fn device_q_range(&self, d: Device) -> (f64, f64) {
        match d {
            Device::Load(l) => {
                let (lo, hi) = self.device_p_range(d);
                let (a, b) = (self.loads[l].reactive(lo), self.loads[l].reactive(hi));
                (a.min(b), a.max(b))
            }
            Device::Generator(g) if g == self.slack => self.slack_range().1,
            Device::Generator(g) => (self.generators[g].q_min, self.generators[g].q_max),
            Device::Des => (self.des.q_min, self.des.q_max),
        }
    }

    /// Range the slack unit can be driven into by the remaining devices, padded
    /// by 10 % of the width to cover network losses.
    fn slack_range(&self) -> ((f64, f64), (f64, f64)) {
        let (mut p_lo, mut p_hi, mut q_lo, mut q_hi) = (0.0, 0.0, 0.0, 0.0);
        for &d in &self.devices {
            if d == Device::Generator(self.slack) {
                continue;
            }
            let (a, b) = self.device_p_range(d);
            let (c, e) = self.device_q_range(d);
            p_lo += a;
            p_hi += b;
            q_lo += c;
            q_hi += e;
        }
        let pad = |lo: f64, hi: f64| {
            let w = 0.1 * (hi - lo).max(1.0);
            (-hi - w, -lo + w)
        };
        (pad(p_lo, p_hi), pad(q_lo, q_hi))
    }

    /// Per-dimension `(min, max)` of the flat state vector, used for scaled
    /// error metrics.
    pub fn state_ranges(&self) -> Vec<(f64, f64)> {
        let mut r = Vec::with_capacity(self.state_dim());
        r.extend(self.devices.iter().map(|&d| self.device_p_range(d)));
        r.extend(self.devices.iter().map(|&d| self.device_q_range(d)));
        r.push((self.des.soc_min, self.des.soc_max));
        r.extend(
            self.nonslack
                .iter()
                .map(|&g| (self.generators[g].p_min, self.generators[g].p_max)),
        );
        r.push((0.0, (STEPS_PER_DAY - 1) as f64));
        r
    }

    /// Per-bus `(min, max)` of aggregated active and reactive injections for
    /// buses `2..=n` (MW, MVAr). Buses without devices get a `[-1, 1]` band so
    /// that the range is never degenerate.
    pub fn bus_injection_ranges(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
        let n = self.n_buses();
        let mut p = vec![(0.0, 0.0); n - 1];
        let mut q = vec![(0.0, 0.0); n - 1];
        for &d in &self.devices {
            let bus = self.device_bus(d);
            if bus == 1 {
                continue;
            }
            let (a, b) = self.device_p_range(d);
            let (c, e) = self.device_q_range(d);
            p[bus - 2].0 += a;
            p[bus - 2].1 += b;
            q[bus - 2].0 += c;
            q[bus - 2].1 += e;
        }
        for r in p.iter_mut().chain(q.iter_mut()) {
            if r.1 - r.0 < 1e-9 {
                *r = (r.0 - 1.0, r.1 + 1.0);
            }
        }
        (p, q)
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

pub fn load_network_spec(path: impl AsRef<Path>) -> Result<NetworkSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NetworkSpec::from_toml_str(&text)
}

/// `(aux + 1) mod 96`.
pub fn advance_aux(aux: usize) -> Result<usize> {
    if aux >= STEPS_PER_DAY {
        return Err(Error::invariant("aux", format!("{aux} is outside 0..=95")));
    }
    Ok((aux + 1) % STEPS_PER_DAY)
}

/// The MDP state: device injections, battery charge, available renewable
/// capacity and the time-of-day index.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    /// Active injection per device, in device-id order.
    pub p_dev: Vec<f64>,
    pub q_dev: Vec<f64>,
    pub soc: f64,
    /// Available generation per non-slack generator.
    pub p_max_gen: Vec<f64>,
    pub aux: usize,
}

impl GridState {
    /// Flatten as `[P..., Q..., SoC, Pmax..., aux]`.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.p_dev.len() + self.p_max_gen.len() + 2);
        v.extend_from_slice(&self.p_dev);
        v.extend_from_slice(&self.q_dev);
        v.push(self.soc);
        v.extend_from_slice(&self.p_max_gen);
        v.push(self.aux as f64);
        v
    }

    pub fn decode(spec: &NetworkSpec, v: &[f64]) -> Result<GridState> {
        let nd = spec.n_devices();
        let ng = spec.n_nonslack();
        if v.len() != spec.state_dim() {
            return Err(Error::Dimension {
                context: "state vector",
                expected: spec.state_dim(),
                got: v.len(),
            });
        }
        let aux = v[v.len() - 1];
        if !(0.0..STEPS_PER_DAY as f64).contains(&aux) || aux.fract() != 0.0 {
            return Err(Error::invariant("aux", format!("{aux} is not an integer in 0..=95")));
        }
        Ok(GridState {
            p_dev: v[..nd].to_vec(),
            q_dev: v[nd..2 * nd].to_vec(),
            soc: v[2 * nd],
            p_max_gen: v[2 * nd + 1..2 * nd + 1 + ng].to_vec(),
            aux: aux as usize,
        })
    }
}

/// Setpoints for the controllable devices.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub a_p_gen: Vec<f64>,
    pub a_q_gen: Vec<f64>,
    pub a_p_des: f64,
    pub a_q_des: f64,
}

impl Action {
    pub fn encode(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.a_p_gen.len() + 2);
        v.extend_from_slice(&self.a_p_gen);
        v.extend_from_slice(&self.a_q_gen);
        v.push(self.a_p_des);
        v.push(self.a_q_des);
        v
    }

    pub fn decode(spec: &NetworkSpec, v: &[f64]) -> Result<Action> {
        let ng = spec.n_nonslack();
        if v.len() != spec.action_dim() {
            return Err(Error::Dimension {
                context: "action vector",
                expected: spec.action_dim(),
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invariant("action", "all setpoints must be finite"));
        }
        Ok(Action {
            a_p_gen: v[..ng].to_vec(),
            a_q_gen: v[ng..2 * ng].to_vec(),
            a_p_des: v[2 * ng],
            a_q_des: v[2 * ng + 1],
        })
    }
}

// ---------------------------------------------------------------------------
// File schema

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(default = "default_base_mva")]
    base_mva: f64,
    #[serde(default = "default_delta_t")]
    delta_t: f64,
    #[serde(default)]
    reward: RewardFile,
    #[serde(default)]
    powerflow: PowerFlowConfig,
    buses: Vec<BusSpec>,
    generators: Vec<GeneratorSpec>,
    loads: Vec<LoadSpec>,
    des: DesSpec,
    branches: Vec<BranchFile>,
    profiles: ProfilesFile,
}

fn default_base_mva() -> f64 {
    100.0
}

fn default_delta_t() -> f64 {
    0.25
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardFile {
    lambda: f64,
    clip: [f64; 2],
}

impl Default for RewardFile {
    fn default() -> Self {
        RewardFile {
            lambda: 100.0,
            clip: [-100.0, 100.0],
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchFile {
    from_bus: usize,
    to_bus: usize,
    y_series: [f64; 2],
    #[serde(default)]
    y_shunt: [f64; 2],
    #[serde(default = "unit_tap")]
    tap: [f64; 2],
    s_rating: f64,
    #[serde(default)]
    s_min: f64,
}

fn unit_tap() -> [f64; 2] {
    [1.0, 0.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfilesFile {
    load: Vec<ProfileRow>,
    gen_p_max: Vec<ProfileRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRow {
    id: usize,
    p: Vec<f64>,
}

impl NetworkFile {
    fn into_spec(self) -> Result<NetworkSpec> {
        let NetworkFile {
            base_mva,
            delta_t,
            reward,
            powerflow,
            mut buses,
            mut generators,
            mut loads,
            des,
            branches,
            profiles,
        } = self;

        positive("base_mva", base_mva)?;
        positive("delta_t", delta_t)?;
        if !(reward.lambda >= 0.0) {
            return Err(Error::invariant("reward.lambda", "must be >= 0"));
        }
        if !(reward.clip[0] < reward.clip[1]) {
            return Err(Error::invariant("reward.clip", "lower bound must be below upper bound"));
        }

        buses.sort_by_key(|b| b.index);
        for (k, b) in buses.iter().enumerate() {
            if b.index != k + 1 {
                return Err(Error::invariant(
                    "buses.index",
                    "bus indices must be 1..=n without gaps",
                ));
            }
            if !(0.0 < b.v_min && b.v_min < b.v_max) {
                return Err(Error::invariant(
                    format!("buses[{}]", b.index),
                    "require 0 < v_min < v_max",
                ));
            }
        }
        if buses.len() < 2 {
            return Err(Error::invariant("buses", "need a slack bus and at least one more bus"));
        }
        let n_bus = buses.len();
        let bus_ok = |field: String, bus: usize| {
            if (1..=n_bus).contains(&bus) {
                Ok(())
            } else {
                Err(Error::invariant(field, format!("bus {bus} does not exist")))
            }
        };

        generators.sort_by_key(|g| g.id);
        loads.sort_by_key(|l| l.id);
        for g in &generators {
            let f = format!("generators[id={}]", g.id);
            bus_ok(f.clone(), g.bus)?;
            if !(g.p_min <= g.p_max) {
                return Err(Error::invariant(f, "p_min must be <= p_max"));
            }
            if !(g.q_min <= g.q_max) {
                return Err(Error::invariant(f, "q_min must be <= q_max"));
            }
        }
        let slacks: Vec<usize> = (0..generators.len())
            .filter(|&i| generators[i].is_slack)
            .collect();
        if slacks.len() != 1 {
            return Err(Error::invariant(
                "generators.is_slack",
                format!("exactly one slack generator required, found {}", slacks.len()),
            ));
        }
        let slack = slacks[0];
        if generators[slack].bus != 1 {
            return Err(Error::invariant("generators.is_slack", "slack generator must sit on bus 1"));
        }
        for l in &loads {
            let f = format!("loads[id={}]", l.id);
            bus_ok(f.clone(), l.bus)?;
            if !(l.pf > 0.0 && l.pf <= 1.0) {
                return Err(Error::invariant(f, "power factor must be in (0, 1]"));
            }
        }
        bus_ok("des".into(), des.bus)?;
        if !(des.p_min <= des.p_max && des.q_min <= des.q_max) {
            return Err(Error::invariant("des", "require p_min <= p_max and q_min <= q_max"));
        }
        if !(des.soc_min < des.soc_max) {
            return Err(Error::invariant("des", "soc_min must be < soc_max"));
        }
        if !(des.eta > 0.0 && des.eta <= 1.0) {
            return Err(Error::invariant("des.eta", "must be in (0, 1]"));
        }

        // Device ids must form 0..n with the slack generator alone on bus 1.
        let mut ids: BTreeMap<usize, Device> = BTreeMap::new();
        let mut insert = |id: usize, d: Device| {
            if ids.insert(id, d).is_some() {
                Err(Error::invariant("device id", format!("id {id} is used twice")))
            } else {
                Ok(())
            }
        };
        for (i, g) in generators.iter().enumerate() {
            insert(g.id, Device::Generator(i))?;
        }
        for (i, l) in loads.iter().enumerate() {
            insert(l.id, Device::Load(i))?;
        }
        insert(des.id, Device::Des)?;
        if ids.keys().copied().ne(0..ids.len()) {
            return Err(Error::invariant("device id", "ids must be 0..n without gaps"));
        }
        let devices: Vec<Device> = ids.into_values().collect();
        for &d in &devices {
            let bus = match d {
                Device::Generator(g) => generators[g].bus,
                Device::Load(l) => loads[l].bus,
                Device::Des => des.bus,
            };
            if bus == 1 && d != Device::Generator(slack) {
                return Err(Error::invariant(
                    "device bus",
                    "only the slack generator may connect to bus 1",
                ));
            }
        }
        let nonslack: Vec<usize> = (0..generators.len()).filter(|&i| i != slack).collect();

        let mut branch_specs = Vec::with_capacity(branches.len());
        for (k, b) in branches.iter().enumerate() {
            let f = format!("branches[{k}]");
            bus_ok(f.clone(), b.from_bus)?;
            bus_ok(f.clone(), b.to_bus)?;
            if b.from_bus == b.to_bus {
                return Err(Error::invariant(f, "branch must join two distinct buses"));
            }
            if !(b.s_rating > 0.0) {
                return Err(Error::invariant(f, "s_rating must be > 0"));
            }
            let tap = Complex64::new(b.tap[0], b.tap[1]);
            if !(tap.norm() > 0.0) {
                return Err(Error::invariant(f, "tap magnitude must be > 0"));
            }
            branch_specs.push(BranchSpec {
                from_bus: b.from_bus,
                to_bus: b.to_bus,
                y_series: Complex64::new(b.y_series[0], b.y_series[1]),
                y_shunt: Complex64::new(b.y_shunt[0], b.y_shunt[1]),
                tap,
                s_rating: b.s_rating,
                s_min: b.s_min,
            });
        }
        check_connected(n_bus, &branch_specs)?;

        let lookup = |rows: &[ProfileRow], id: usize, field: &str| -> Result<Vec<f64>> {
            let row = rows
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| Error::invariant(field, format!("missing profile for device {id}")))?;
            if row.p.len() != STEPS_PER_DAY {
                return Err(Error::invariant(
                    format!("{field}[id={id}]"),
                    format!("expected {STEPS_PER_DAY} entries, found {}", row.p.len()),
                ));
            }
            Ok(row.p.clone())
        };
        let mut load_p = Vec::with_capacity(loads.len());
        for l in &loads {
            let p = lookup(&profiles.load, l.id, "profiles.load")?;
            if p.iter().any(|&x| !(x <= 0.0)) {
                return Err(Error::invariant(
                    format!("profiles.load[id={}]", l.id),
                    "load demand entries must be <= 0",
                ));
            }
            load_p.push(p);
        }
        let mut gen_p_max = Vec::with_capacity(nonslack.len());
        for &g in &nonslack {
            let gen = &generators[g];
            let p = lookup(&profiles.gen_p_max, gen.id, "profiles.gen_p_max")?;
            if p.iter().any(|&x| !(x >= 0.0 && x >= gen.p_min && x <= gen.p_max)) {
                return Err(Error::invariant(
                    format!("profiles.gen_p_max[id={}]", gen.id),
                    "entries must be >= 0 and inside [p_min, p_max]",
                ));
            }
            gen_p_max.push(p);
        }

        Ok(NetworkSpec {
            generators,
            loads,
            des,
            branches: branch_specs,
            buses,
            profiles: Profiles { load_p, gen_p_max },
            lambda_penalty: reward.lambda,
            reward_clip: (reward.clip[0], reward.clip[1]),
            delta_t,
            base_mva,
            powerflow,
            devices,
            nonslack,
            slack,
        })
    }
}

fn positive(field: &str, x: f64) -> Result<()> {
    if x > 0.0 {
        Ok(())
    } else {
        Err(Error::invariant(field, "must be > 0"))
    }
}

fn check_connected(n_bus: usize, branches: &[BranchSpec]) -> Result<()> {
    let mut seen = BTreeSet::from([1usize]);
    let mut queue = VecDeque::from([1usize]);
    while let Some(b) = queue.pop_front() {
        for br in branches {
            let other = if br.from_bus == b {
                br.to_bus
            } else if br.to_bus == b {
                br.from_bus
            } else {
                continue;
            };
            if seen.insert(other) {
                queue.push_back(other);
            }
        }
    }
    if seen.len() == n_bus {
        Ok(())
    } else {
        Err(Error::invariant("branches", "branch graph is not connected"))
    }
}
