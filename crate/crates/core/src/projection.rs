//! Euclidean projection of a 2-D setpoint onto `{x : Gx <= h}`.
//!
//! In two dimensions the optimum has at most two linearly independent active
//! constraints, so the solver enumerates every active set of size 0, 1 and 2,
//! solves the equality-constrained subproblem in closed form and keeps the
//! candidates that satisfy the KKT conditions. The same residuals double as
//! the training loss of the projection networks.

use crate::error::{Error, Result};
use crate::grid::{DesSpec, GeneratorSpec};

/// Linear-inequality feasible set `{x : Gx - h <= 0}` in `R^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub g: Vec<[f64; 2]>,
    pub h: Vec<f64>,
}

/// Primal optimum and constraint multipliers of a projection.
#[derive(Debug, Clone, PartialEq)]
pub struct KktCertificate {
    pub x: [f64; 2],
    pub lambda: Vec<f64>,
}

/// Residual blocks of the KKT system at `(x, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktResiduals {
    pub stationarity: [f64; 2],
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
    pub comp: Vec<f64>,
}

impl KktResiduals {
    pub fn max_norm(&self) -> f64 {
        self.stationarity
            .iter()
            .chain(&self.primal)
            .chain(&self.dual)
            .chain(&self.comp)
            .fold(0.0f64, |m, r| m.max(r.abs()))
    }

    /// Mean of the squared residuals over all four blocks.
    pub fn loss(&self) -> f64 {
        let n = 2 + 3 * self.primal.len();
        let s: f64 = self
            .stationarity
            .iter()
            .chain(&self.primal)
            .chain(&self.dual)
            .chain(&self.comp)
            .map(|r| r * r)
            .sum();
        s / n as f64
    }
}

impl Polytope {
    pub fn new(g: Vec<[f64; 2]>, h: Vec<f64>) -> Result<Self> {
        if g.is_empty() {
            return Err(Error::invariant("polytope", "need at least one constraint"));
        }
        if g.len() != h.len() {
            return Err(Error::Dimension {
                context: "polytope h",
                expected: g.len(),
                got: h.len(),
            });
        }
        Ok(Polytope { g, h })
    }

    pub fn n_constraints(&self) -> usize {
        self.g.len()
    }

    /// `Gx - h` per row.
    pub fn slack(&self, x: [f64; 2]) -> Vec<f64> {
        self.g
            .iter()
            .zip(&self.h)
            .map(|(g, h)| g[0] * x[0] + g[1] * x[1] - h)
            .collect()
    }

    pub fn contains(&self, x: [f64; 2], tol: f64) -> bool {
        self.slack(x).iter().all(|&s| s <= tol)
    }

    /// The same set expressed in coordinates divided by `scale`.
    pub fn rescaled(&self, scale: f64) -> Polytope {
        Polytope {
            g: self.g.clone(),
            h: self.h.iter().map(|h| h / scale).collect(),
        }
    }

    fn row_tol(&self, i: usize, x: [f64; 2]) -> f64 {
        let g = self.g[i];
        1e-9 * (1.0 + self.h[i].abs() + g[0].abs() * x[0].abs() + g[1].abs() * x[1].abs())
    }

    fn feasible(&self, x: [f64; 2]) -> bool {
        self.slack(x)
            .iter()
            .enumerate()
            .all(|(i, &s)| s <= self.row_tol(i, x))
    }
}

/// Feasible set of a non-slack generator with available capacity `p_max_t`.
///
/// Rows: `-P <= -Pmin`, `P <= Pmax`, `P <= Pmax_t`, `-Q <= -Qmin`,
/// `Q <= Qmax`, `Q - tau1 P <= rho1`, `-Q + tau2 P <= -rho2`.
pub fn build_generator_polytope(g: &GeneratorSpec, p_max_t: f64) -> Result<Polytope> {
    if !(g.p_min <= p_max_t && p_max_t <= g.p_max) {
        return Err(Error::invariant(
            "p_max_t",
            format!("{p_max_t} is outside [{}, {}]", g.p_min, g.p_max),
        ));
    }
    let poly = Polytope {
        g: vec![
            [-1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, -1.0],
            [0.0, 1.0],
            [-g.tau1, 1.0],
            [g.tau2, -1.0],
        ],
        h: vec![-g.p_min, g.p_max, p_max_t, -g.q_min, g.q_max, g.rho1, -g.rho2],
    };
    project_exact([0.0, 0.0], &poly)?;
    Ok(poly)
}

/// Feasible set of the storage unit at charge `soc`: the static box, four
/// capability lines, and the two charge-headroom rows.
pub fn build_des_polytope(d: &DesSpec, soc: f64, delta_t: f64) -> Result<Polytope> {
    if !(d.soc_min <= soc && soc <= d.soc_max) {
        return Err(Error::invariant(
            "soc",
            format!("{soc} is outside [{}, {}]", d.soc_min, d.soc_max),
        ));
    }
    let charge_floor = (soc - d.soc_max) / (d.eta * delta_t);
    let discharge_cap = d.eta * (soc - d.soc_min) / delta_t;
    let poly = Polytope {
        g: vec![
            [-1.0, 0.0],
            [1.0, 0.0],
            [0.0, -1.0],
            [0.0, 1.0],
            [-d.tau[0], 1.0],
            [d.tau[1], -1.0],
            [-d.tau[2], 1.0],
            [d.tau[3], -1.0],
            [-1.0, 0.0],
            [1.0, 0.0],
        ],
        h: vec![
            -d.p_min,
            d.p_max,
            -d.q_min,
            d.q_max,
            d.rho[0],
            -d.rho[1],
            d.rho[2],
            -d.rho[3],
            -charge_floor,
            discharge_cap,
        ],
    };
    project_exact([0.0, 0.0], &poly)?;
    Ok(poly)
}

/// Closest point of `poly` to `a`, with its multipliers.
pub fn project_exact(a: [f64; 2], poly: &Polytope) -> Result<KktCertificate> {
    let m = poly.n_constraints();
    if poly.feasible(a) {
        return Ok(KktCertificate {
            x: a,
            lambda: vec![0.0; m],
        });
    }

    let mut best: Option<(f64, KktCertificate)> = None;
    let mut fallback: Option<(f64, [f64; 2])> = None;
    let mut consider = |x: [f64; 2], lam: Vec<f64>, best: &mut Option<(f64, KktCertificate)>| {
        if !poly.feasible(x) {
            return;
        }
        let d = (x[0] - a[0]).powi(2) + (x[1] - a[1]).powi(2);
        if fallback.as_ref().is_none_or(|(fd, _)| d < *fd - 1e-15 * (1.0 + fd)) {
            fallback = Some((d, x));
        }
        if lam.iter().any(|&l| l < -1e-12 * (1.0 + d.sqrt())) {
            return;
        }
        if best.as_ref().is_none_or(|(bd, _)| d < *bd - 1e-15 * (1.0 + bd)) {
            let lambda = lam.into_iter().map(|l| l.max(0.0)).collect();
            *best = Some((d, KktCertificate { x, lambda }));
        }
    };

    for i in 0..m {
        let g = poly.g[i];
        let gg = g[0] * g[0] + g[1] * g[1];
        if gg == 0.0 {
            continue;
        }
        let t = (g[0] * a[0] + g[1] * a[1] - poly.h[i]) / gg;
        let x = [a[0] - t * g[0], a[1] - t * g[1]];
        let mut lam = vec![0.0; m];
        lam[i] = 2.0 * t;
        consider(x, lam, &mut best);
    }

    for i in 0..m {
        for j in i + 1..m {
            let (gi, gj) = (poly.g[i], poly.g[j]);
            let det = gi[0] * gj[1] - gi[1] * gj[0];
            let scale = (gi[0].hypot(gi[1])) * (gj[0].hypot(gj[1]));
            if det.abs() <= 1e-12 * scale {
                continue;
            }
            let (hi, hj) = (poly.h[i], poly.h[j]);
            let x = [(hi * gj[1] - gi[1] * hj) / det, (gi[0] * hj - hi * gj[0]) / det];
            // 2(x - a) + li gi + lj gj = 0
            let r = [-2.0 * (x[0] - a[0]), -2.0 * (x[1] - a[1])];
            let li = (r[0] * gj[1] - gj[0] * r[1]) / det;
            let lj = (gi[0] * r[1] - r[0] * gi[1]) / det;
            let mut lam = vec![0.0; m];
            lam[i] = li;
            lam[j] = lj;
            consider(x, lam, &mut best);
        }
    }

    match (best, fallback) {
        (Some((_, cert)), _) => Ok(cert),
        (None, Some((_, x))) => Ok(KktCertificate {
            x,
            lambda: vec![0.0; m],
        }),
        (None, None) => Err(Error::Infeasible),
    }
}

/// KKT residuals of `min ||x - a||^2 s.t. Gx <= h` at `(x, lam)`.
pub fn kkt_residuals(a: [f64; 2], poly: &Polytope, x: [f64; 2], lam: &[f64]) -> KktResiduals {
    debug_assert_eq!(lam.len(), poly.n_constraints());
    let mut stationarity = [2.0 * (x[0] - a[0]), 2.0 * (x[1] - a[1])];
    for (g, l) in poly.g.iter().zip(lam) {
        stationarity[0] += g[0] * l;
        stationarity[1] += g[1] * l;
    }
    let slack = poly.slack(x);
    KktResiduals {
        stationarity,
        primal: slack.iter().map(|s| s.max(0.0)).collect(),
        dual: lam.iter().map(|l| (-l).max(0.0)).collect(),
        comp: lam.iter().zip(&slack).map(|(l, s)| l * s).collect(),
    }
}

/// [`KktResiduals::loss`] together with its gradient in `x` and `lam`.
pub fn kkt_loss_grad(a: [f64; 2], poly: &Polytope, x: [f64; 2], lam: &[f64]) -> (f64, [f64; 2], Vec<f64>) {
    let r = kkt_residuals(a, poly, x, lam);
    let m = poly.n_constraints();
    let n = (2 + 3 * m) as f64;
    let slack = poly.slack(x);
    let mut dx = [4.0 * r.stationarity[0], 4.0 * r.stationarity[1]];
    let mut dlam = vec![0.0; m];
    for i in 0..m {
        let g = poly.g[i];
        // primal: max(0, s)^2
        let wp = 2.0 * r.primal[i];
        // complementarity: (l s)^2
        let wc = 2.0 * r.comp[i];
        dx[0] += (wp + wc * lam[i]) * g[0];
        dx[1] += (wp + wc * lam[i]) * g[1];
        dlam[i] = 2.0 * (r.stationarity[0] * g[0] + r.stationarity[1] * g[1]) - 2.0 * r.dual[i]
            + wc * slack[i];
    }
    dx[0] /= n;
    dx[1] /= n;
    dlam.iter_mut().for_each(|v| *v /= n);
    (r.loss(), dx, dlam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NetworkSpec;

    fn unit_box() -> Polytope {
        Polytope::new(
            vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
            vec![1.0, 1.0, 1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn interior_point_is_fixed() {
        let c = project_exact([0.3, -0.2], &unit_box()).unwrap();
        assert_eq!(c.x, [0.3, -0.2]);
        assert!(c.lambda.iter().all(|&l| l == 0.0));
        let r = kkt_residuals([0.3, -0.2], &unit_box(), c.x, &c.lambda);
        assert_eq!(r.max_norm(), 0.0);
    }

    #[test]
    fn face_projection() {
        let c = project_exact([2.0, 0.0], &unit_box()).unwrap();
        assert_eq!(c.x, [1.0, 0.0]);
        assert!((c.lambda[0] - 2.0).abs() < 1e-12);
        let r = kkt_residuals([2.0, 0.0], &unit_box(), c.x, &c.lambda);
        assert!(r.max_norm() <= 1e-8);
    }

    #[test]
    fn vertex_projection() {
        let c = project_exact([3.0, -4.0], &unit_box()).unwrap();
        assert_eq!(c.x, [1.0, -1.0]);
        let r = kkt_residuals([3.0, -4.0], &unit_box(), c.x, &c.lambda);
        assert!(r.max_norm() <= 1e-8, "{r:?}");
    }

    #[test]
    fn empty_polytope_is_infeasible() {
        let p = Polytope::new(vec![[1.0, 0.0], [-1.0, 0.0]], vec![-1.0, -1.0]).unwrap();
        assert!(matches!(project_exact([0.0, 0.0], &p), Err(Error::Infeasible)));
    }

    #[test]
    fn primal_residual_of_box_violation() {
        let r = kkt_residuals([0.0, 0.0], &unit_box(), [1.5, 0.0], &[0.0; 4]);
        assert_eq!(r.primal, vec![0.5, 0.0, 0.0, 0.0]);
        assert!(r.dual.iter().chain(&r.comp).all(|&v| v == 0.0));
    }

    #[test]
    fn generator_rows_follow_capability_definition() {
        let spec = NetworkSpec::default_anm6();
        let g = &spec.generators[spec.nonslack_generators()[0]];
        let p = build_generator_polytope(g, g.p_max).unwrap();
        assert_eq!(p.n_constraints(), 7);
        let expected_g = [
            [-1.0, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, -1.0],
            [0.0, 1.0],
            [-g.tau1, 1.0],
            [g.tau2, -1.0],
        ];
        let expected_h = [-g.p_min, g.p_max, g.p_max, -g.q_min, g.q_max, g.rho1, -g.rho2];
        assert_eq!(p.g, expected_g);
        assert_eq!(p.h, expected_h);
        assert!(build_generator_polytope(g, g.p_max + 1.0).is_err());
    }

    #[test]
    fn non_binding_slopes_never_active_on_box() {
        let mut g = NetworkSpec::default_anm6().generators[1].clone();
        g.tau1 = 0.0;
        g.rho1 = 1e3;
        g.tau2 = 0.0;
        g.rho2 = -1e3;
        let p = build_generator_polytope(&g, g.p_max).unwrap();
        for a in [[100.0, 100.0], [-40.0, 3.0], [5.0, -90.0]] {
            let c = project_exact(a, &p).unwrap();
            assert_eq!(c.lambda[5], 0.0);
            assert_eq!(c.lambda[6], 0.0);
            assert!(p.slack(c.x)[5] < 0.0 && p.slack(c.x)[6] < 0.0);
        }
    }

    #[test]
    fn pinned_generator_interval() {
        let spec = NetworkSpec::default_anm6();
        let g = &spec.generators[spec.nonslack_generators()[0]];
        let p = build_generator_polytope(g, g.p_min).unwrap();
        for a in [[25.0, 3.0], [-5.0, 0.0], [0.0, 100.0], [13.0, -13.0]] {
            let c = project_exact(a, &p).unwrap();
            assert!((c.x[0] - g.p_min).abs() < 1e-12, "{c:?}");
            let r = kkt_residuals(a, &p, c.x, &c.lambda);
            assert!(r.max_norm() <= 1e-8, "{r:?}");
        }
    }

    #[test]
    fn des_charge_rows() {
        let spec = NetworkSpec::default_anm6();
        let mut d = spec.des.clone();
        let full = build_des_polytope(&d, d.soc_max, 0.25).unwrap();
        assert_eq!(full.n_constraints(), 10);
        assert_eq!(full.h[8], 0.0);
        // Charging request at a full battery is cut back to zero.
        let c = project_exact([-20.0, 0.0], &full).unwrap();
        assert!(c.x[0].abs() < 1e-12);

        let empty = build_des_polytope(&d, d.soc_min, 0.25).unwrap();
        assert_eq!(empty.h[9], 0.0);
        let c = project_exact([20.0, 0.0], &empty).unwrap();
        assert!(c.x[0].abs() < 1e-12);

        d.eta = 1.0;
        let mid = 0.5 * (d.soc_min + d.soc_max);
        let p = build_des_polytope(&d, mid, 0.25).unwrap();
        // P >= 4 (SoC - SoCmax), P <= 4 (SoC - SoCmin)
        assert!((-p.h[8] - 4.0 * (mid - d.soc_max)).abs() < 1e-12);
        assert!((p.h[9] - 4.0 * (mid - d.soc_min)).abs() < 1e-12);
        assert!(build_des_polytope(&d, d.soc_max + 1.0, 0.25).is_err());
    }

    #[test]
    fn kkt_loss_gradient_matches_finite_differences() {
        let poly = Polytope::new(
            vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-0.5, 1.0]],
            vec![1.0, 1.0, 1.0, 1.0, 0.8],
        )
        .unwrap();
        let a = [1.7, 0.4];
        let x = [1.2, 0.3];
        let lam = [0.7, -0.2, 0.1, 0.05, 0.3];
        let (_, dx, dl) = kkt_loss_grad(a, &poly, x, &lam);
        let h = 1e-6;
        let f = |x: [f64; 2], l: &[f64]| kkt_residuals(a, &poly, x, l).loss();
        for k in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(xp, &lam) - f(xm, &lam)) / (2.0 * h);
            assert!((fd - dx[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", dx[k]);
        }
        for i in 0..lam.len() {
            let (mut lp, mut lm) = (lam, lam);
            lp[i] += h;
            lm[i] -= h;
            let fd = (f(x, &lp) - f(x, &lm)) / (2.0 * h);
            assert!((fd - dl[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", dl[i]);
        }
    }
}
