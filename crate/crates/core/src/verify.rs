//! Independent oracles and runtime monitors: quadrature checks of the
//! smoothing error bounds, finite-difference derivatives, a brute-force
//! composition evaluator, a KKT enumeration oracle for the QP, and the
//! almost-sure safety monitor.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::barrier::{BarrierExpr, KappaFunction, Node};
use crate::error::{Error, Result};
use crate::filter::SafetyFilter;
use crate::harness::run_episode;
use crate::mission::{build_barrier_tree, Scenario};
use crate::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use crate::smoothing::{
    phi_exact, smooth_grad, smooth_hessian, smooth_jet, smooth_min_pair, Order, SmoothingConfig,
};

/// `int_{-beta}^{beta} |phi - M_2| dl = 2 beta (1 - 11/16)`, by direct
/// integration of the quintic.
pub const LEMMA1_CLOSED_FORM: f64 = 5.0 / 8.0;
/// The constant as printed alongside the lemma; only an upper envelope.
pub const LEMMA1_PRINTED: f64 = 15.0 / 4.0;
/// `int |e_hat| dl = beta^2 int_0^1 t (1 - p(t)) dt = beta^2 / 14` for k = 2.
pub const PROP1_CLOSED_FORM: f64 = 1.0 / 14.0;
pub const PROP1_PRINTED: f64 = 15.0 / 8.0;

pub const QUAD_TOL: f64 = 1e-10;
/// Monitor checks are restricted to states with at least this much margin.
pub const MONITOR_H_FLOOR: f64 = 0.05;

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(&f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `int_{-beta}^{beta} |phi(l) - phi_hat(l)| dl`, split at the kink of `phi`.
pub fn l1_transition_error(beta: f64, k: u32) -> Result<f64> {
    let cfg = SmoothingConfig::polynomial(beta, k)?;
    let poly = cfg.transition();
    let f = |l: f64| (phi_exact(l) - poly.phi(l)).abs();
    Ok(integrate(f, -beta, 0.0, QUAD_TOL / 2.0) + integrate(f, 0.0, beta, QUAD_TOL / 2.0))
}

/// `int |h_hat - min(h1, h2)| dl` over the band, sweeping the difference
/// `l = h2 - h1` with the pair mean held at that of `(h1, h2)`.
pub fn pair_error_integral(h1: f64, h2: f64, cfg: &SmoothingConfig) -> f64 {
    let mean = 0.5 * (h1 + h2);
    let beta = cfg.beta();
    let f = |l: f64| {
        let (a, b) = (mean - 0.5 * l, mean + 0.5 * l);
        (smooth_min_pair(a, b, cfg) - a.min(b)).abs()
    };
    integrate(f, -beta, 0.0, QUAD_TOL / 2.0) + integrate(f, 0.0, beta, QUAD_TOL / 2.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    pub beta: f64,
    pub samples: usize,
    pub bound: f64,
    pub max_integral: f64,
    pub max_ratio: f64,
    pub violations: usize,
    /// Largest `|h_hat - min|` seen at pairs with `|h2 - h1| > beta`.
    pub outside_band_max_error: f64,
}

/// Checks `int |e_hat| dl <= 15 beta^2 / 8` for every sampled pair.
pub fn cbf_error_bound_check(pairs: &[(f64, f64)], beta: f64) -> Result<BoundReport> {
    let cfg = SmoothingConfig::polynomial(beta, 2)?;
    let bound = PROP1_PRINTED * beta * beta;
    let mut max_integral: f64 = 0.0;
    let mut violations = 0;
    let mut outside: f64 = 0.0;
    for &(h1, h2) in pairs {
        let e = pair_error_integral(h1, h2, &cfg);
        max_integral = max_integral.max(e);
        if e > bound {
            violations += 1;
        }
        if (h2 - h1).abs() > beta {
            outside = outside.max((smooth_min_pair(h1, h2, &cfg) - h1.min(h2)).abs());
        }
    }
    Ok(BoundReport {
        beta,
        samples: pairs.len(),
        bound,
        max_integral,
        max_ratio: max_integral / bound,
        violations,
        outside_band_max_error: outside,
    })
}

/// Drift and diffusion of `h_hat` along the closed loop at `(x, u)`.
///
/// The disturbance is a velocity perturbation held over one step, so its
/// displacement covariance accrues at rate `dt K Sigma K'`; both terms use
/// that rate, the same scaling as the filter's second-order term.
#[derive(Clone, Debug)]
pub struct SafetyDriftDiffusion {
    pub h: f64,
    pub mu: f64,
    pub sigma: DVector<f64>,
}

pub fn drift_diffusion(
    filter: &SafetyFilter,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<SafetyDriftDiffusion> {
    let jet = smooth_jet(&filter.expr, x, &filter.smoothing, Order::Hessian)?;
    let grad = jet.gradient.expect("gradient");
    let hess = jet.hessian.expect("hessian");
    let model = &filter.model;
    let k = model.noise_gain();
    let var: Vec<f64> = (0..model.n_agents())
        .flat_map(|_| filter.noise_variance.iter().copied())
        .collect();
    let kthk = k.tr_mul(&(&hess * &k));
    let trace: f64 = var.iter().enumerate().map(|(i, v)| v * kthk[(i, i)]).sum();
    let velocity = model.drift(x) + model.control_field(x) * u;
    let mu = grad.dot(&velocity) + 0.5 * filter.dt * trace;
    let ktg = k.tr_mul(&grad);
    let sigma = DVector::from_iterator(
        ktg.len(),
        ktg.iter()
            .zip(&var)
            .map(|(g, v)| (filter.dt * v).sqrt() * g),
    );
    Ok(SafetyDriftDiffusion {
        h: jet.value,
        mu,
        sigma,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MonitorOutcome {
    /// `lhs = mu - |sigma|^2 / h`, `rhs = -h^2 alpha(h)`.
    Evaluated { satisfied: bool, lhs: f64, rhs: f64 },
    /// `h_hat <= 0`: the inequality is only defined on the interior.
    BoundaryReached { h: f64 },
}

impl MonitorOutcome {
    pub fn satisfied(&self) -> Option<bool> {
        match self {
            MonitorOutcome::Evaluated { satisfied, .. } => Some(*satisfied),
            MonitorOutcome::BoundaryReached { .. } => None,
        }
    }
}

/// Checks `mu_h - |sigma_h|^2 / h_hat >= -h_hat^2 alpha(h_hat)` at `(x, u)`.
pub fn safety_condition_monitor(
    filter: &SafetyFilter,
    x: &DVector<f64>,
    u: &DVector<f64>,
    alpha: &KappaFunction,
) -> Result<MonitorOutcome> {
    let dd = drift_diffusion(filter, x, u)?;
    if dd.h <= 0.0 {
        return Ok(MonitorOutcome::BoundaryReached { h: dd.h });
    }
    let lhs = dd.mu - dd.sigma.norm_squared() / dd.h;
    let rhs = -dd.h * dd.h * alpha.eval(dd.h);
    let tol = 1e-9 * (1.0 + lhs.abs().max(rhs.abs()));
    Ok(MonitorOutcome::Evaluated {
        satisfied: lhs >= rhs - tol,
        lhs,
        rhs,
    })
}

/// Smallest linear class-K slope for which the filter's certificate implies
/// the monitor inequality at every state with `h_hat >= h_floor`, in the
/// noise-free case: `-gamma^3 h >= -c h^3` needs `c >= gamma^3 / h_floor^2`.
pub fn certified_monitor_alpha(alpha: &KappaFunction, h_floor: f64) -> Result<KappaFunction> {
    KappaFunction::linear(alpha.slope() / (h_floor * h_floor))
}

/// Central-difference gradient.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, step: f64) -> DVector<f64> {
    let mut xp = x.clone();
    DVector::from_fn(x.len(), |i, _| {
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        (fp - fm) / (2.0 * step)
    })
}

/// Central-difference Jacobian of a vector field, symmetrized; used as a
/// Hessian oracle when `g` is an analytic gradient.
pub fn fd_hessian(
    g: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for j in 0..n {
        xp[j] = x[j] + step;
        let gp = g(&xp);
        xp[j] = x[j] - step;
        let gm = g(&xp);
        xp[j] = x[j];
        jac.set_column(j, &((gp - gm) / (2.0 * step)));
    }
    (&jac + jac.transpose()) * 0.5
}

/// Largest componentwise error relative to `max(1, |reference|)`.
pub fn relative_error<'a>(
    a: impl IntoIterator<Item = &'a f64>,
    reference: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    a.into_iter()
        .zip(reference)
        .map(|(x, r)| (x - r).abs() / r.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Exact composition by explicit-stack traversal of the negation normal
/// form: `And` is a min, `Or` a max, and every `Not` flips the operator of
/// its subtree and the sign of its leaves.
pub fn brute_min_oracle(expr: &BarrierExpr, x: &DVector<f64>) -> Result<f64> {
    expr.check_state(x)?;
    struct Frame<'a> {
        children: &'a [BarrierExpr],
        next: usize,
        take_min: bool,
        negated: bool,
        acc: f64,
    }
    let mut stack: Vec<Frame> = Vec::new();
    let mut current = Some((expr, false));
    loop {
        let mut finished = None;
        if let Some((node, negated)) = current.take() {
            match node.node() {
                Node::Leaf(b) => {
                    let v = b.value(x);
                    finished = Some(if negated { -v } else { v });
                }
                Node::Not(inner) => current = Some((inner, !negated)),
                Node::And(children) | Node::Or(children) => {
                    let is_and = matches!(node.node(), Node::And(_));
                    let take_min = is_and != negated;
                    stack.push(Frame {
                        children,
                        next: 0,
                        take_min,
                        negated,
                        acc: if take_min {
                            f64::INFINITY
                        } else {
                            f64::NEG_INFINITY
                        },
                    });
                }
            }
        }
        if let Some(v) = finished {
            match stack.last_mut() {
                None => return Ok(v),
                Some(top) => {
                    top.acc = if top.take_min {
                        top.acc.min(v)
                    } else {
                        top.acc.max(v)
                    }
                }
            }
        }
        if current.is_none() {
            let top = stack.last_mut().expect("non-empty while traversing");
            if top.next < top.children.len() {
                current = Some((&top.children[top.next], top.negated));
                top.next += 1;
            } else {
                let done = stack.pop().expect("frame").acc;
                match stack.last_mut() {
                    None => return Ok(done),
                    Some(top) => {
                        top.acc = if top.take_min {
                            top.acc.min(done)
                        } else {
                            top.acc.max(done)
                        }
                    }
                }
            }
        }
    }
}

/// Minimizer found by enumerating every candidate active set and keeping
/// the KKT points (stationary, primal feasible, non-negative multipliers).
/// `None` when no KKT point exists, i.e. the problem is infeasible.
/// Exponential in the constraint count; meant for small problems only.
pub fn kkt_enumeration(p: &QpProblem) -> Option<DVector<f64>> {
    let n = p.n_vars();
    let total = p.n_constraints();
    assert!(
        total <= 24,
        "enumeration over {total} constraints is too large"
    );
    let zero = DVector::zeros(n);
    let rhs: Vec<f64> = (0..total).map(|i| -p.slack(i, &zero)).collect();
    let normals: Vec<DVector<f64>> = (0..total).map(|i| p.normal(i)).collect();
    let tol = 1e-9;

    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << total) {
        let active: Vec<usize> = (0..total).filter(|i| mask & (1 << i) != 0).collect();
        let k = active.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut r = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        r.rows_mut(0, n).copy_from(&(-&p.c));
        for (j, &i) in active.iter().enumerate() {
            kkt.view_mut((0, n + j), (n, 1)).copy_from(&(-&normals[i]));
            kkt.view_mut((n + j, 0), (1, n))
                .copy_from(&normals[i].transpose());
            r[n + j] = rhs[i];
        }
        let Some(sol) = kkt.lu().solve(&r) else {
            continue;
        };
        if !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let dual_ok = sol.rows(n, k).iter().all(|l| *l >= -tol);
        let primal_ok = (0..total).all(|i| p.slack(i, &x) >= -tol * (1.0 + rhs[i].abs()));
        if dual_ok && primal_ok {
            let obj = p.objective(&x);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, x));
            }
        }
    }
    best.map(|(_, x)| x)
}

/// Random strictly convex QP with `n` variables and `m` general rows.
pub fn random_qp(rng: &mut impl Rng, n: usize, m: usize, bound: Option<f64>) -> QpProblem {
    let f = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let h = f.tr_mul(&f) + DMatrix::identity(n, n) * 0.1;
    QpProblem {
        h,
        c: DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0)),
        a: DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
        b: DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0)),
        bound,
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct QpOracleReport {
    pub problems: usize,
    pub infeasible: usize,
    pub status_mismatches: usize,
    pub max_deviation: f64,
}

/// Compares the active-set solver with [`kkt_enumeration`] on random
/// problems: `count` with general rows only (up to 12 variables, 8 rows) and
/// `count / 4` small box-bounded ones.
pub fn qp_oracle_check(count: usize, seed: u64) -> Result<QpOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = QpOracleReport::default();
    let settings = QpSettings::default();
    let boxed = count / 4;
    for i in 0..count + boxed {
        let p = if i < count {
            let n = rng.gen_range(1..=12);
            let m = rng.gen_range(0..=8);
            random_qp(&mut rng, n, m, None)
        } else {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(0..=4);
            let bound = rng.gen_range(0.2..2.0);
            random_qp(&mut rng, n, m, Some(bound))
        };
        let sol = solve_qp(&p, &settings)?;
        let oracle = kkt_enumeration(&p);
        report.problems += 1;
        match (sol.status, oracle) {
            (QpStatus::Optimal, Some(x)) => {
                report.max_deviation = report.max_deviation.max((&sol.x - x).amax());
            }
            (QpStatus::Infeasible, None) => report.infeasible += 1,
            _ => report.status_mismatches += 1,
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DerivativeReport {
    pub states: usize,
    pub worst_gradient_rel: f64,
    pub worst_hessian_rel: f64,
}

/// Analytic gradient and Hessian of `h_hat` against central differences at
/// `count` random states in the box `[lo, hi]^d`.
pub fn derivative_check(
    expr: &BarrierExpr,
    cfg: &SmoothingConfig,
    count: usize,
    lo: f64,
    hi: f64,
    seed: u64,
) -> Result<DerivativeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = expr.required_dim();
    let mut report = DerivativeReport {
        states: count,
        ..Default::default()
    };
    let value = |x: &DVector<f64>| crate::smoothing::smooth_eval(expr, x, cfg).expect("value");
    let grad = |x: &DVector<f64>| smooth_grad(expr, x, cfg).expect("gradient");
    for _ in 0..count {
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(lo..hi));
        let g = smooth_grad(expr, &x, cfg)?;
        let h = smooth_hessian(expr, &x, cfg)?;
        let g_fd = fd_gradient(value, &x, 1e-6);
        let h_fd = fd_hessian(grad, &x, 1e-5);
        report.worst_gradient_rel = report
            .worst_gradient_rel
            .max(relative_error(g.iter(), g_fd.iter()));
        report.worst_hessian_rel = report
            .worst_hessian_rel
            .max(relative_error(h.iter(), h_fd.iter()));
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MonitorReport {
    pub steps: usize,
    pub checked: usize,
    pub violations: usize,
    pub boundary_reached: usize,
    pub pass_rate: f64,
    pub alpha_slope: f64,
}

/// Runs the scenario and evaluates the monitor at every applied control
/// whose state has `h_hat >= h_floor`.
pub fn monitor_episode(s: &Scenario, alpha: &KappaFunction, h_floor: f64) -> Result<MonitorReport> {
    let filter = s.filter()?;
    let rec = run_episode(s)?;
    let mut report = MonitorReport {
        steps: rec.steps(),
        alpha_slope: alpha.slope(),
        ..Default::default()
    };
    for ((x, u), h) in rec.trajectory.iter().zip(&rec.controls).zip(&rec.h_smooth) {
        if *h > 0.0 && *h < h_floor {
            continue;
        }
        match safety_condition_monitor(&filter, x, u, alpha)? {
            MonitorOutcome::BoundaryReached { .. } => report.boundary_reached += 1,
            MonitorOutcome::Evaluated { satisfied, .. } => {
                report.checked += 1;
                if !satisfied {
                    report.violations += 1;
                }
            }
        }
    }
    report.pass_rate = if report.checked == 0 {
        1.0
    } else {
        1.0 - report.violations as f64 / report.checked as f64
    };
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct Lemma1Entry {
    pub beta: f64,
    pub measured: f64,
    pub measured_constant: f64,
    pub closed_form: f64,
    pub printed_envelope: f64,
    pub scaling_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub lemma1: Vec<Lemma1Entry>,
    pub lemma1_closed_form_constant: f64,
    pub lemma1_printed_constant: f64,
    pub prop1: Vec<BoundReport>,
    pub prop1_closed_form_constant: f64,
    pub derivatives: DerivativeReport,
    pub qp: QpOracleReport,
    pub monitor_certified_alpha: MonitorReport,
    pub monitor_identity_alpha: MonitorReport,
}

pub const TABLE_BETAS: [f64; 3] = [1.0, 0.5, 0.1];

/// Runs every oracle with fixed seeds. `samples` scales the random checks
/// (pairs per beta, derivative states and QPs).
pub fn run_verification(samples: usize) -> Result<VerifyReport> {
    let mut lemma1 = Vec::new();
    for beta in TABLE_BETAS {
        let measured = l1_transition_error(beta, 2)?;
        lemma1.push(Lemma1Entry {
            beta,
            measured,
            measured_constant: measured / beta,
            closed_form: LEMMA1_CLOSED_FORM * beta,
            printed_envelope: LEMMA1_PRINTED * beta,
            scaling_ratio: l1_transition_error(2.0 * beta, 2)? / measured,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut prop1 = Vec::new();
    for beta in TABLE_BETAS {
        let pairs: Vec<(f64, f64)> = (0..samples)
            .map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
            .collect();
        prop1.push(cbf_error_bound_check(&pairs, beta)?);
    }

    let multi = Scenario::bundled("multi-obstacle")?;
    let expr = build_barrier_tree(&multi)?;
    let derivatives =
        derivative_check(&expr, &multi.smoothing()?, samples.min(1000), -6.0, 6.0, 12)?;
    let qp = qp_oracle_check(samples.min(1000), 13)?;

    let quiet = multi.without_noise();
    let gain = KappaFunction::cubic_gain(quiet.gamma)?;
    let certified = certified_monitor_alpha(&gain, MONITOR_H_FLOOR)?;
    Ok(VerifyReport {
        lemma1,
        lemma1_closed_form_constant: LEMMA1_CLOSED_FORM,
        lemma1_printed_constant: LEMMA1_PRINTED,
        prop1,
        prop1_closed_form_constant: PROP1_CLOSED_FORM,
        derivatives,
        qp,
        monitor_certified_alpha: monitor_episode(&quiet, &certified, MONITOR_H_FLOOR)?,
        monitor_identity_alpha: monitor_episode(
            &quiet,
            &KappaFunction::identity(),
            MONITOR_H_FLOOR,
        )?,
    })
}

/// Writes `verify_report.json` into `out_dir`.
pub fn write_report(report: &VerifyReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| Error::Numerical(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join("verify_report.json"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::AtomicBarrier;
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn simpson_on_polynomials() {
        assert_relative_eq!(integrate(|x| x * x, 0.0, 3.0, 1e-12), 9.0, epsilon = 1e-12);
        assert_relative_eq!(
            integrate(f64::sin, 0.0, std::f64::consts::PI, 1e-12),
            2.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn lemma1_closed_form_and_envelope() {
        for beta in [0.1, 0.5, 1.0] {
            let v = l1_transition_error(beta, 2).unwrap();
            assert_relative_eq!(v, LEMMA1_CLOSED_FORM * beta, epsilon = 1e-9);
            assert!(v <= LEMMA1_PRINTED * beta);
            let ratio = l1_transition_error(2.0 * beta, 2).unwrap() / v;
            assert!((ratio - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn prop1_closed_form() {
        let cfg = SmoothingConfig::polynomial(1.0, 2).unwrap();
        assert_relative_eq!(
            pair_error_integral(0.3, 0.2, &cfg),
            PROP1_CLOSED_FORM,
            epsilon = 1e-9
        );
        let r = cbf_error_bound_check(&[(0.0, 0.05), (1.0, -1.0), (0.4, 0.4)], 0.1).unwrap();
        assert_eq!(r.violations, 0);
        assert_relative_eq!(r.bound, 0.01875, epsilon = 1e-15);
        assert_eq!(r.outside_band_max_error, 0.0);
    }

    #[test]
    fn fd_gradient_exact_on_quadratic() {
        let f = |x: &DVector<f64>| 3.0 * x[0] * x[0] + x[0] * x[1] - 2.0 * x[1];
        let g = fd_gradient(f, &dv(&[1.0, 2.0]), 1e-3);
        assert_relative_eq!(g[0], 8.0, epsilon = 1e-9);
        assert_relative_eq!(g[1], -1.0, epsilon = 1e-9);
        let h = fd_hessian(
            |x| dv(&[6.0 * x[0] + x[1], x[0] - 2.0]),
            &dv(&[1.0, 2.0]),
            1e-3,
        );
        assert_relative_eq!(
            h,
            DMatrix::from_row_slice(2, 2, &[6.0, 1.0, 1.0, 0.0]),
            epsilon = 1e-9
        );
    }

    fn mixed_tree() -> BarrierExpr {
        let o = |k: usize, c: [f64; 2]| {
            BarrierExpr::leaf(AtomicBarrier::obstacle(0, k, c.to_vec(), 0.3).unwrap())
        };
        let p = BarrierExpr::leaf(AtomicBarrier::pair(0, 1, 2, 0.14).unwrap());
        BarrierExpr::and(vec![
            p,
            BarrierExpr::or(vec![o(0, [1.0, 0.0]), BarrierExpr::not(o(1, [0.0, 1.0]))]).unwrap(),
            BarrierExpr::not(BarrierExpr::and(vec![o(2, [-1.0, 0.0]), o(3, [2.0, 2.0])]).unwrap()),
        ])
        .unwrap()
    }

    #[test]
    fn brute_min_matches_recursive_evaluation() {
        let expr = mixed_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            assert_eq!(
                brute_min_oracle(&expr, &x).unwrap(),
                expr.eval_exact(&x).unwrap()
            );
        }
        assert!(brute_min_oracle(&expr, &dv(&[0.0])).is_err());
    }

    #[test]
    fn smooth_eval_tends_to_brute_min() {
        let expr = mixed_tree();
        let cfg = SmoothingConfig::polynomial(1e-6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let s = crate::smoothing::smooth_eval(&expr, &x, &cfg).unwrap();
            assert!((s - brute_min_oracle(&expr, &x).unwrap()).abs() < 1e-5);
        }
    }

    #[test]
    fn kkt_enumeration_projection() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            c: dv(&[0.0, 0.0]),
            a: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b: dv(&[2.0]),
            bound: None,
        };
        let x = kkt_enumeration(&p).unwrap();
        assert_relative_eq!(x, dv(&[1.0, 1.0]), epsilon = 1e-12);
        let bad = QpProblem {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            b: dv(&[1.0, 1.0]),
            ..p
        };
        assert!(kkt_enumeration(&bad).is_none());
    }

    #[test]
    fn solver_agrees_with_enumeration() {
        let r = qp_oracle_check(200, 5).unwrap();
        assert_eq!(r.status_mismatches, 0, "{r:?}");
        assert!(r.max_deviation < 1e-6, "{r:?}");
    }

    #[test]
    fn derivatives_on_mixed_tree() {
        let cfg = SmoothingConfig::polynomial(0.5, 2).unwrap();
        let r = derivative_check(&mixed_tree(), &cfg, 100, -2.0, 2.0, 9).unwrap();
        assert!(r.worst_gradient_rel < 1e-6, "{r:?}");
        assert!(r.worst_hessian_rel < 1e-4, "{r:?}");
    }

    fn single_obstacle_filter(noisy: bool) -> SafetyFilter {
        let s = Scenario::from_toml_str(
            "n_agents = 1\nstarts = [[0.0, 0.0]]\ngoals = [[4.0, 0.0]]\nobstacles = [{ center = [2.0, 0.0], radius = 0.2 }]\n",
        )
        .unwrap();
        if noisy {
            s.filter().unwrap()
        } else {
            s.without_noise().filter().unwrap()
        }
    }

    #[test]
    fn drift_is_trace_alone_at_zero_control() {
        let f = single_obstacle_filter(true);
        let x = dv(&[0.5, 0.3]);
        let dd = drift_diffusion(&f, &x, &dv(&[0.0, 0.0])).unwrap();
        let row = f.build_cbf_row(&x).unwrap();
        assert_relative_eq!(dd.mu, row.ito_term, epsilon = 1e-14);
        assert!(dd.mu > 0.0);
    }

    #[test]
    fn monitor_far_state_has_slack() {
        let f = single_obstacle_filter(true);
        let x = dv(&[-3.0, 3.0]);
        let u = f
            .controller
            .nominal_control(&f.model, &x, &dv(&[0.0, 0.0]))
            .unwrap();
        match safety_condition_monitor(&f, &x, &u, &KappaFunction::identity()).unwrap() {
            MonitorOutcome::Evaluated {
                satisfied,
                lhs,
                rhs,
            } => {
                assert!(satisfied);
                assert!(lhs - rhs > 1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn monitor_near_boundary() {
        let f = single_obstacle_filter(true);
        // Just outside the clearance disk (radius 0.35), moving tangentially.
        let x = dv(&[2.0, 0.3501]);
        let u = dv(&[1.0, 0.0]);
        match safety_condition_monitor(&f, &x, &u, &KappaFunction::identity()).unwrap() {
            MonitorOutcome::Evaluated {
                satisfied,
                lhs,
                rhs,
            } => {
                assert!(!satisfied);
                assert!(rhs.abs() < 1e-9);
                assert!(lhs < -1.0);
            }
            other => panic!("{other:?}"),
        }
        let inside = dv(&[2.0, 0.1]);
        assert!(matches!(
            safety_condition_monitor(&f, &inside, &u, &KappaFunction::identity()).unwrap(),
            MonitorOutcome::BoundaryReached { .. }
        ));
    }

    #[test]
    fn certified_alpha_slope() {
        let a = certified_monitor_alpha(&KappaFunction::cubic_gain(1.0).unwrap(), 0.05).unwrap();
        assert_relative_eq!(a.slope(), 400.0, epsilon = 1e-9);
    }
}
