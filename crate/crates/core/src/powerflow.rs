//! AC power flow on the bus-admittance model.
//!
//! Internally everything is per-unit on `base_mva`; the public entry points
//! take and return MW / MVAr / MVA.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::grid::{BranchSpec, NetworkSpec, PowerFlowConfig};

/// Bus-admittance matrix `Y = G + jB` together with the solver settings it
/// was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Admittance {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub base_mva: f64,
    pub config: PowerFlowConfig,
}

/// Net injections at buses `2..=n` (MW, MVAr), generation positive.
#[derive(Debug, Clone, PartialEq)]
pub struct BusInjections {
    pub p_bus: Vec<f64>,
    pub q_bus: Vec<f64>,
}

/// Bus voltages; entry 0 is the slack bus at `1 ∠ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub iterations: usize,
}

/// Why the power-flow equations were declared unsolvable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoSolution {
    Diverged { iteration: usize },
    NotConverged { mismatch: f64 },
    Singular { condition: f64 },
}

impl Admittance {
    pub fn n(&self) -> usize {
        self.g.nrows()
    }

    pub fn y(&self, i: usize, k: usize) -> Complex64 {
        Complex64::new(self.g[(i, k)], self.b[(i, k)])
    }
}

/// Builds `Y` from the network's branch list.
pub fn build_admittance(spec: &NetworkSpec) -> Admittance {
    admittance_from_branches(spec.n_buses(), &spec.branches, spec.base_mva, spec.powerflow)
}

/// Pi-model accumulation. Bus numbers in `branches` are 1-based.
pub fn admittance_from_branches(
    n: usize,
    branches: &[BranchSpec],
    base_mva: f64,
    config: PowerFlowConfig,
) -> Admittance {
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in branches {
        let (i, k) = (br.from_bus - 1, br.to_bus - 1);
        let t = br.tap;
        let ys = br.y_series;
        y[(i, i)] += (ys + br.y_shunt) / t.norm_sqr();
        y[(k, k)] += ys + br.y_shunt;
        y[(i, k)] -= ys / t.conj();
        y[(k, i)] -= ys / t;
    }
    Admittance {
        g: y.map(|c| c.re),
        b: y.map(|c| c.im),
        base_mva,
        config,
    }
}

/// Per-unit active and reactive injections at every bus implied by `v`.
pub fn bus_powers(adm: &Admittance, v_mag: &[f64], v_ang: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = adm.n();
    let sigma = adm.config.reactive_sign.b_cos_factor();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for k in 0..n {
            let (gik, bik) = (adm.g[(i, k)], adm.b[(i, k)]);
            if gik == 0.0 && bik == 0.0 {
                continue;
            }
            let (s, c) = (v_ang[i] - v_ang[k]).sin_cos();
            let vv = v_mag[i] * v_mag[k];
            p[i] += vv * (gik * c + bik * s);
            q[i] += vv * (gik * s + sigma * bik * c);
        }
    }
    (p, q)
}

/// Balance residuals `[P_calc - P; Q_calc - Q]` for buses `2..=n`, in p.u.
pub fn mismatch(adm: &Admittance, inj: &BusInjections, v: &VoltageSolution) -> Vec<f64> {
    let (p, q) = bus_powers(adm, &v.v_mag, &v.v_ang);
    let m = adm.n() - 1;
    let mut r = Vec::with_capacity(2 * m);
    r.extend((0..m).map(|i| p[i + 1] - inj.p_bus[i] / adm.base_mva));
    r.extend((0..m).map(|i| q[i + 1] - inj.q_bus[i] / adm.base_mva));
    r
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Newton-Raphson from a flat start on `(theta_i, |V_i|)` for `i = 2..=n`.
pub fn solve_power_flow(adm: &Admittance, inj: &BusInjections) -> Result<VoltageSolution, NoSolution> {
    let n = adm.n();
    let m = n - 1;
    assert_eq!(inj.p_bus.len(), m, "one active injection per non-slack bus");
    assert_eq!(inj.q_bus.len(), m, "one reactive injection per non-slack bus");
    let cfg = adm.config;
    let mut v = VoltageSolution {
        v_mag: vec![1.0; n],
        v_ang: vec![0.0; n],
        iterations: 0,
    };
    let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);

    for it in 0..=cfg.max_iter {
        let f = mismatch(adm, inj, &v);
        let norm = max_abs(&f);
        if !norm.is_finite() || norm > cfg.divergence {
            return Err(NoSolution::Diverged { iteration: it });
        }
        if norm <= cfg.tolerance {
            v.iterations = it;
            return Ok(v);
        }
        if it == cfg.max_iter {
            return Err(NoSolution::NotConverged { mismatch: norm });
        }

        jacobian_into(adm, &v.v_mag, &v.v_ang, &mut jac);

        let lu = jac.clone().lu();
        let inv = match lu.try_inverse() {
            Some(inv) => inv,
            None => return Err(NoSolution::Singular { condition: f64::INFINITY }),
        };
        let condition = one_norm(&jac) * one_norm(&inv);
        if !condition.is_finite() || condition > cfg.max_condition {
            return Err(NoSolution::Singular { condition });
        }
        let dx = inv * DVector::from_vec(f);
        for i in 1..n {
            v.v_ang[i] -= dx[i - 1];
            v.v_mag[i] -= dx[m + i - 1];
        }
    }
    unreachable!("loop returns on its final iteration")
}

/// Derivatives of the bus-2..n mismatch `[P; Q]` with respect to
/// `[theta_2..n; |V|_2..n]`, written into `jac` (`2(n-1)` square).
pub fn jacobian_into(adm: &Admittance, vm: &[f64], va: &[f64], jac: &mut DMatrix<f64>) {
    let n = adm.n();
    let m = n - 1;
    let sigma = adm.config.reactive_sign.b_cos_factor();
    jac.fill(0.0);
    for i in 1..n {
        let r = i - 1;
        for k in 0..n {
            let (gik, bik) = (adm.g[(i, k)], adm.b[(i, k)]);
            if k == i || (gik == 0.0 && bik == 0.0) {
                continue;
            }
            let (s, c) = (va[i] - va[k]).sin_cos();
            let vv = vm[i] * vm[k];
            // Diagonal contributions from the off-diagonal terms.
            jac[(r, r)] += vv * (-gik * s + bik * c);
            jac[(r, m + r)] += vm[k] * (gik * c + bik * s);
            jac[(m + r, r)] += vv * (gik * c - sigma * bik * s);
            jac[(m + r, m + r)] += vm[k] * (gik * s + sigma * bik * c);
            if k == 0 {
                continue;
            }
            let col = k - 1;
            jac[(r, col)] = vv * (gik * s - bik * c);
            jac[(r, m + col)] = vm[i] * (gik * c + bik * s);
            jac[(m + r, col)] = vv * (-gik * c + sigma * bik * s);
            jac[(m + r, m + col)] = vm[i] * (gik * s + sigma * bik * c);
        }
        jac[(r, m + r)] += 2.0 * vm[i] * adm.g[(i, i)];
        jac[(m + r, m + r)] += 2.0 * vm[i] * sigma * adm.b[(i, i)];
    }
}

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Slack-bus injection `(P, Q)` in MW / MVAr from the bus-1 balance sums.
pub fn slack_power(adm: &Admittance, v: &VoltageSolution) -> (f64, f64) {
    let sigma = adm.config.reactive_sign.b_cos_factor();
    let (mut p, mut q) = (0.0, 0.0);
    for k in 0..adm.n() {
        let (g, b) = (adm.g[(0, k)], adm.b[(0, k)]);
        let (s, c) = (v.v_ang[0] - v.v_ang[k]).sin_cos();
        let vv = v.v_mag[0] * v.v_mag[k];
        p += vv * (g * c + b * s);
        q += vv * (g * s + sigma * b * c);
    }
    (p * adm.base_mva, q * adm.base_mva)
}

/// Complex power entering each branch at its `from` and `to` ends, in MVA.
pub fn branch_power(branches: &[BranchSpec], v: &VoltageSolution, base_mva: f64) -> Vec<(Complex64, Complex64)> {
    branches
        .iter()
        .map(|br| {
            let (i, k) = (br.from_bus - 1, br.to_bus - 1);
            let vi = Complex64::from_polar(v.v_mag[i], v.v_ang[i]);
            let vk = Complex64::from_polar(v.v_mag[k], v.v_ang[k]);
            let t = br.tap;
            let y = br.y_series;
            let i_from = (y + br.y_shunt) / t.norm_sqr() * vi - y / t.conj() * vk;
            let i_to = -y / t * vi + (y + br.y_shunt) * vk;
            (vi * i_from.conj() * base_mva, vk * i_to.conj() * base_mva)
        })
        .collect()
}

/// Apparent-power magnitudes `(|S_ij|, |S_ji|)` per branch, in MVA.
pub fn branch_flows(spec: &NetworkSpec, v: &VoltageSolution) -> Vec<(f64, f64)> {
    branch_power(&spec.branches, v, spec.base_mva)
        .into_iter()
        .map(|(a, b)| (a.norm(), b.norm()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(from: usize, to: usize, y: Complex64) -> BranchSpec {
        BranchSpec {
            from_bus: from,
            to_bus: to,
            y_series: y,
            y_shunt: Complex64::new(0.0, 0.0),
            tap: Complex64::new(1.0, 0.0),
            s_rating: 1.0,
            s_min: 0.0,
        }
    }

    #[test]
    fn two_bus_textbook_line() {
        let y = Complex64::new(1.0, -5.0);
        let adm = admittance_from_branches(2, &[line(1, 2, y)], 100.0, PowerFlowConfig::default());
        assert_eq!(adm.y(0, 0), y);
        assert_eq!(adm.y(1, 1), y);
        assert_eq!(adm.y(0, 1), -y);
        assert_eq!(adm.y(1, 0), -y);
    }

    #[test]
    fn tap_entries() {
        let y = Complex64::new(1.0, -5.0);
        let mut br = line(1, 2, y);
        br.tap = Complex64::new(1.05, 0.0);
        let adm = admittance_from_branches(2, &[br.clone()], 100.0, PowerFlowConfig::default());
        assert!((adm.y(0, 0) - y / 1.1025).norm() < 1e-15);
        assert_eq!(adm.y(1, 1), y);
        assert!((adm.y(0, 1) + y / 1.05).norm() < 1e-15);
        assert!(adm.y(0, 0) != adm.y(1, 1));

        br.tap = Complex64::from_polar(1.05, 0.1);
        let adm = admittance_from_branches(2, &[br], 100.0, PowerFlowConfig::default());
        assert!((adm.y(0, 1) - adm.y(1, 0)).norm() > 1e-3);
    }

    #[test]
    fn unconnected_buses_have_zero_entry() {
        let spec = NetworkSpec::default_anm6();
        let adm = build_admittance(&spec);
        let linked = |i: usize, k: usize| {
            spec.branches
                .iter()
                .any(|b| (b.from_bus, b.to_bus) == (i + 1, k + 1) || (b.from_bus, b.to_bus) == (k + 1, i + 1))
        };
        for i in 0..6 {
            for k in 0..6 {
                if i != k && !linked(i, k) {
                    assert_eq!(adm.y(i, k), Complex64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn flat_no_load() {
        let spec = NetworkSpec::default_anm6();
        let mut branches = spec.branches.clone();
        branches.iter_mut().for_each(|b| b.y_shunt = Complex64::new(0.0, 0.0));
        let adm = admittance_from_branches(6, &branches, 100.0, PowerFlowConfig::default());
        let inj = BusInjections {
            p_bus: vec![0.0; 5],
            q_bus: vec![0.0; 5],
        };
        let v = solve_power_flow(&adm, &inj).unwrap();
        assert_eq!(v.v_mag, vec![1.0; 6]);
        assert_eq!(v.v_ang, vec![0.0; 6]);
        assert_eq!(slack_power(&adm, &v), (0.0, 0.0));
        for (a, b) in branch_power(&branches, &v, 100.0) {
            assert_eq!((a.norm(), b.norm()), (0.0, 0.0));
        }
    }

    #[test]
    fn lossless_line_has_equal_end_magnitudes() {
        // Same current flows through both ends, so equal |V| gives equal |S|.
        let br = line(1, 2, Complex64::new(0.0, -10.0));
        let v = VoltageSolution {
            v_mag: vec![1.0, 1.0],
            v_ang: vec![0.0, -0.12],
            iterations: 0,
        };
        let (a, b) = branch_power(&[br], &v, 100.0)[0];
        assert!((a.norm() - b.norm()).abs() < 1e-9);
        assert!((a.re + b.re).abs() < 1e-9);
    }

    #[test]
    fn literal_sign_changes_the_solution() {
        let y = Complex64::new(1.0, -10.0);
        let inj = BusInjections {
            p_bus: vec![-20.0],
            q_bus: vec![-5.0],
        };
        let std = solve_power_flow(&admittance_from_branches(2, &[line(1, 2, y)], 100.0, PowerFlowConfig::default()), &inj)
            .unwrap();
        let mut cfg = PowerFlowConfig::default();
        cfg.reactive_sign = crate::grid::ReactiveSign::Literal;
        let adm = admittance_from_branches(2, &[line(1, 2, y)], 100.0, cfg);
        let lit = solve_power_flow(&adm, &inj).unwrap();
        assert!(max_abs(&mismatch(&adm, &inj, &lit)) <= 1e-8);
        assert!((std.v_mag[1] - lit.v_mag[1]).abs() > 1e-3);
    }
}
