//! Smooth approximations of composed barriers.
//!
//! For two arguments the minimum can be written as
//! `min(h1, h2) = -(l * sign(l) - l') / 2` with `l = h2 - h1` and
//! `l' = h1 + h2`. Replacing `sign` by an odd polynomial on `[-beta, beta]`
//! gives a `C^k` approximation that coincides with the minimum whenever the
//! two arguments are further apart than `beta`. Trees with more than two
//! children are handled by left-folding this identity over the child list,
//! so child order matters within `O(beta)`.
//!
//! The log-sum-exp alternative replaces every `And` by
//! `-(1/s) log sum exp(-s h)` and every `Or` by its dual.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierExpr, Node};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[serde(alias = "polynomial")]
    Poly,
    #[serde(alias = "log-sum-exp", alias = "logsumexp")]
    Lse,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poly" | "polynomial" => Ok(Scheme::Poly),
            "lse" | "log-sum-exp" | "logsumexp" => Ok(Scheme::Lse),
            other => Err(Error::config(format!("unknown smoothing scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Poly => "poly",
            Scheme::Lse => "lse",
        })
    }
}

/// The sign function with `sign(0) = 1`.
pub fn phi_exact(ell: f64) -> f64 {
    if ell >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Odd Hermite transition `M_k(l, beta)` of degree `2k + 1` with
/// `M(+-beta) = +-1` and the first `k` derivatives vanishing at `+-beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionPolynomial {
    beta: f64,
    k: u32,
    /// Coefficients of the normalized polynomial `P(t)`, `t = l / beta`.
    normalized: Vec<f64>,
}

impl TransitionPolynomial {
    pub fn new(beta: f64, k: u32) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::config(format!(
                "smoothing parameter beta must be positive, got {beta}"
            )));
        }
        if k == 0 {
            return Err(Error::config("smoothness order k must be at least 1"));
        }
        Ok(Self {
            beta,
            k,
            normalized: normalized_coefficients(k)?,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn degree(&self) -> usize {
        2 * self.k as usize + 1
    }

    /// `a_0, ..., a_p` of `M_k(l, beta) = sum_j a_j l^j`.
    pub fn coefficients(&self) -> Vec<f64> {
        self.normalized
            .iter()
            .enumerate()
            .map(|(j, c)| c / self.beta.powi(j as i32))
            .collect()
    }

    /// `M_k` and its first two derivatives with respect to `l`, without
    /// saturation.
    pub fn eval_with_derivatives(&self, ell: f64) -> (f64, f64, f64) {
        let t = ell / self.beta;
        let (p, dp, d2p) = horner3(&self.normalized, t);
        (p, dp / self.beta, d2p / (self.beta * self.beta))
    }

    pub fn eval(&self, ell: f64) -> f64 {
        self.eval_with_derivatives(ell).0
    }

    /// Saturated transition: `1` above `beta`, `-1` below `-beta`, `M_k` in
    /// between, together with its first two derivatives.
    pub fn phi_with_derivatives(&self, ell: f64) -> (f64, f64, f64) {
        if ell > self.beta {
            (1.0, 0.0, 0.0)
        } else if ell < -self.beta {
            (-1.0, 0.0, 0.0)
        } else {
            self.eval_with_derivatives(ell)
        }
    }

    pub fn phi(&self, ell: f64) -> f64 {
        self.phi_with_derivatives(ell).0
    }
}

/// Evaluates a polynomial and its first two derivatives at `t`.
fn horner3(coeffs: &[f64], t: f64) -> (f64, f64, f64) {
    let (mut p, mut dp, mut d2p) = (0.0, 0.0, 0.0);
    for c in coeffs.iter().rev() {
        d2p = d2p * t + 2.0 * dp;
        dp = dp * t + p;
        p = p * t + c;
    }
    (p, dp, d2p)
}

/// Solves the Hermite conditions at `t = 1` for the odd coefficients
/// `c_1, c_3, ..., c_{2k+1}`; odd symmetry covers `t = -1`.
fn normalized_coefficients(k: u32) -> Result<Vec<f64>> {
    let k = k as usize;
    let unknowns = k + 1;
    let degree = 2 * k + 1;
    // row r: d^r/dt^r P(1) = [r == 0]
    let a = DMatrix::from_fn(unknowns, unknowns, |r, col| {
        let j = 2 * col + 1;
        if j < r {
            0.0
        } else {
            ((j - r + 1)..=j).map(|f| f as f64).product::<f64>()
        }
    });
    let mut rhs = DVector::zeros(unknowns);
    rhs[0] = 1.0;
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical(format!("singular Hermite system for k = {k}")))?;
    let mut coeffs = vec![0.0; degree + 1];
    for (col, c) in sol.iter().enumerate() {
        coeffs[2 * col + 1] = *c;
    }
    Ok(coeffs)
}

/// Smoothing scheme and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingConfig {
    scheme: Scheme,
    beta: f64,
    k: u32,
    lse_sharpness: f64,
    poly: TransitionPolynomial,
}

impl SmoothingConfig {
    /// `lse_sharpness` defaults to `10 / beta`.
    pub fn new(scheme: Scheme, beta: f64, k: u32) -> Result<Self> {
        let poly = TransitionPolynomial::new(beta, k)?;
        Ok(Self {
            scheme,
            beta,
            k,
            lse_sharpness: 10.0 / beta,
            poly,
        })
    }

    pub fn polynomial(beta: f64, k: u32) -> Result<Self> {
        Self::new(Scheme::Poly, beta, k)
    }

    pub fn log_sum_exp(beta: f64) -> Result<Self> {
        Self::new(Scheme::Lse, beta, 2)
    }

    pub fn with_lse_sharpness(mut self, s: f64) -> Result<Self> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::config(format!(
                "LSE sharpness must be positive, got {s}"
            )));
        }
        self.lse_sharpness = s;
        Ok(self)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn lse_sharpness(&self) -> f64 {
        self.lse_sharpness
    }

    pub fn transition(&self) -> &TransitionPolynomial {
        &self.poly
    }
}

/// Polynomial transition `phi_hat(l, beta)`.
pub fn phi_smooth(ell: f64, cfg: &SmoothingConfig) -> Result<f64> {
    match cfg.scheme {
        Scheme::Poly => Ok(cfg.poly.phi(ell)),
        Scheme::Lse => Err(Error::config(
            "phi_smooth is only defined for the polynomial scheme",
        )),
    }
}

/// Two-argument smooth minimum under the configured scheme.
pub fn smooth_min_pair(h1: f64, h2: f64, cfg: &SmoothingConfig) -> f64 {
    match cfg.scheme {
        Scheme::Poly => poly_min_pair(h1, h2, &cfg.poly),
        Scheme::Lse => lse_min(&[h1, h2], cfg.lse_sharpness),
    }
}

fn poly_min_pair(h1: f64, h2: f64, poly: &TransitionPolynomial) -> f64 {
    let ell = h2 - h1;
    if ell.abs() > poly.beta {
        return h1.min(h2);
    }
    let phi = poly.eval(ell);
    -0.5 * (ell * phi - (h1 + h2))
}

fn lse_min(h: &[f64], s: f64) -> f64 {
    let m = h.iter().copied().fold(f64::INFINITY, f64::min);
    let z: f64 = h.iter().map(|v| (-s * (v - m)).exp()).sum();
    m - z.ln() / s
}

/// How many derivatives to propagate through a tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Value of a smoothed barrier with optional gradient and Hessian.
#[derive(Clone, Debug)]
pub struct Jet {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

impl Jet {
    fn negate(mut self) -> Self {
        self.value = -self.value;
        if let Some(g) = self.gradient.as_mut() {
            g.neg_mut();
        }
        if let Some(h) = self.hessian.as_mut() {
            h.neg_mut();
        }
        self
    }
}

/// Smoothed value and requested derivatives of `expr` at `x`.
pub fn smooth_jet(
    expr: &BarrierExpr,
    x: &DVector<f64>,
    cfg: &SmoothingConfig,
    order: Order,
) -> Result<Jet> {
    expr.check_state(x)?;
    if order == Order::Hessian && cfg.scheme == Scheme::Poly && cfg.k < 2 {
        return Err(Error::config("Hessian requires C^2, set k >= 2"));
    }
    Ok(jet(expr, x, cfg, order))
}

fn jet(expr: &BarrierExpr, x: &DVector<f64>, cfg: &SmoothingConfig, order: Order) -> Jet {
    match expr.node() {
        Node::Leaf(b) => Jet {
            value: b.value(x),
            gradient: (order >= Order::Gradient).then(|| b.gradient(x)),
            hessian: (order >= Order::Hessian).then(|| b.hessian(x)),
        },
        Node::Not(c) => jet(c, x, cfg, order).negate(),
        Node::And(cs) => {
            let children = cs.iter().map(|c| jet(c, x, cfg, order));
            smooth_and(children, cfg)
        }
        Node::Or(cs) => {
            let children = cs.iter().map(|c| jet(c, x, cfg, order).negate());
            smooth_and(children, cfg).negate()
        }
    }
}

fn smooth_and(children: impl Iterator<Item = Jet>, cfg: &SmoothingConfig) -> Jet {
    match cfg.scheme {
        Scheme::Poly => children
            .reduce(|acc, c| poly_min_pair_jet(acc, c, &cfg.poly))
            .expect("And nodes have at least two children"),
        Scheme::Lse => lse_min_jet(children.collect(), cfg.lse_sharpness),
    }
}

fn poly_min_pair_jet(a: Jet, b: Jet, poly: &TransitionPolynomial) -> Jet {
    let ell = b.value - a.value;
    if ell > poly.beta {
        return a;
    }
    if ell < -poly.beta {
        return b;
    }
    let (phi, dphi, d2phi) = poly.eval_with_derivatives(ell);
    let value = -0.5 * (ell * phi - (a.value + b.value));
    // psi(l) = l * phi(l); dh/dh1 = (1 + psi')/2, dh/dh2 = (1 - psi')/2
    let psi1 = phi + ell * dphi;
    let psi2 = 2.0 * dphi + ell * d2phi;
    let wa = 0.5 * (1.0 + psi1);
    let wb = 0.5 * (1.0 - psi1);

    let gradient = match (&a.gradient, &b.gradient) {
        (Some(ga), Some(gb)) => Some(ga * wa + gb * wb),
        _ => None,
    };
    let hessian = match (a.hessian, b.hessian, &a.gradient, &b.gradient) {
        (Some(ha), Some(hb), Some(ga), Some(gb)) => {
            let diff = ga - gb;
            let mut h = ha * wa + hb * wb;
            h.ger(-0.5 * psi2, &diff, &diff, 1.0);
            Some(h)
        }
        _ => None,
    };
    Jet {
        value,
        gradient,
        hessian,
    }
}

fn lse_min_jet(children: Vec<Jet>, s: f64) -> Jet {
    let m = children
        .iter()
        .map(|c| c.value)
        .fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = children
        .iter()
        .map(|c| (-s * (c.value - m)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|r| r / z).collect();
    let value = m - z.ln() / s;

    let gradient = if children.iter().all(|c| c.gradient.is_some()) {
        let n = children[0].gradient.as_ref().map_or(0, |g| g.len());
        let mut g = DVector::zeros(n);
        for (c, wi) in children.iter().zip(&w) {
            g.axpy(*wi, c.gradient.as_ref().unwrap(), 1.0);
        }
        Some(g)
    } else {
        None
    };

    let hessian = match &gradient {
        Some(gbar) if children.iter().all(|c| c.hessian.is_some()) => {
            let n = gbar.len();
            let mut h = DMatrix::zeros(n, n);
            for (c, wi) in children.iter().zip(&w) {
                let gi = c.gradient.as_ref().unwrap();
                h += c.hessian.as_ref().unwrap() * *wi;
                h.ger(-s * wi, gi, gi, 1.0);
            }
            h.ger(s, gbar, gbar, 1.0);
            Some(h)
        }
        _ => None,
    };
    Jet {
        value,
        gradient,
        hessian,
    }
}

pub fn smooth_eval(expr: &BarrierExpr, x: &DVector<f64>, cfg: &SmoothingConfig) -> Result<f64> {
    Ok(smooth_jet(expr, x, cfg, Order::Value)?.value)
}

pub fn smooth_grad(
    expr: &BarrierExpr,
    x: &DVector<f64>,
    cfg: &SmoothingConfig,
) -> Result<DVector<f64>> {
    Ok(smooth_jet(expr, x, cfg, Order::Gradient)?
        .gradient
        .expect("gradient requested"))
}

pub fn smooth_hessian(
    expr: &BarrierExpr,
    x: &DVector<f64>,
    cfg: &SmoothingConfig,
) -> Result<DMatrix<f64>> {
    Ok(smooth_jet(expr, x, cfg, Order::Hessian)?
        .hessian
        .expect("hessian requested"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{AtomicBarrier, CustomBarrier};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[derive(Debug)]
    struct Constant(f64);

    impl CustomBarrier for Constant {
        fn value(&self, _: &DVector<f64>) -> f64 {
            self.0
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(x.len())
        }
        fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(x.len(), x.len())
        }
        fn required_dim(&self) -> usize {
            0
        }
    }

    fn constant(v: f64) -> BarrierExpr {
        BarrierExpr::leaf(AtomicBarrier::custom(Arc::new(Constant(v))))
    }

    #[test]
    fn quintic_matches_tabulated_coefficients() {
        for beta in [1.0, 0.5, 0.1] {
            let a = TransitionPolynomial::new(beta, 2).unwrap().coefficients();
            assert_eq!(a.len(), 6);
            for j in [0, 2, 4] {
                assert_eq!(a[j], 0.0);
            }
            assert_relative_eq!(a[1], 15.0 / (8.0 * beta), max_relative = 1e-13);
            assert_relative_eq!(a[3], -5.0 / (4.0 * beta.powi(3)), max_relative = 1e-13);
            assert_relative_eq!(a[5], 3.0 / (8.0 * beta.powi(5)), max_relative = 1e-13);
        }
    }

    #[test]
    fn general_order_meets_boundary_conditions() {
        for k in 1..=5 {
            let p = TransitionPolynomial::new(0.7, k).unwrap();
            assert_eq!(p.degree(), 2 * k as usize + 1);
            assert_relative_eq!(p.eval(0.7), 1.0, epsilon = 1e-11);
            assert_relative_eq!(p.eval(-0.7), -1.0, epsilon = 1e-11);
            let (_, d1, d2) = p.eval_with_derivatives(0.7);
            assert!(d1.abs() < 1e-10, "k={k} M'={d1}");
            if k >= 2 {
                assert!(d2.abs() < 1e-9, "k={k} M''={d2}");
            }
        }
    }

    #[test]
    fn phi_exact_values() {
        assert_eq!(phi_exact(0.0), 1.0);
        assert_eq!(phi_exact(-0.3), -1.0);
        assert_eq!(phi_exact(7.0), 1.0);
    }

    #[test]
    fn phi_smooth_values() {
        let cfg = SmoothingConfig::polynomial(1.0, 2).unwrap();
        assert_eq!(phi_smooth(2.0, &cfg).unwrap(), 1.0);
        assert_eq!(phi_smooth(0.0, &cfg).unwrap(), 0.0);
        assert_relative_eq!(phi_smooth(0.5, &cfg).unwrap(), 0.79296875, epsilon = 1e-15);
        let lse = SmoothingConfig::log_sum_exp(1.0).unwrap();
        assert!(phi_smooth(0.0, &lse).is_err());
    }

    #[test]
    fn pair_examples() {
        let cfg = SmoothingConfig::polynomial(0.5, 2).unwrap();
        assert_eq!(smooth_min_pair(3.0, 1.0, &cfg), 1.0);
        let cfg = SmoothingConfig::polynomial(1.0, 2).unwrap();
        assert_relative_eq!(smooth_min_pair(1.0, 1.0, &cfg), 1.0, epsilon = 1e-15);
        assert_relative_eq!(smooth_min_pair(1.0, 1.2, &cfg), 1.063488, epsilon = 1e-12);
    }

    #[test]
    fn single_leaf_is_unchanged() {
        let cfg = SmoothingConfig::polynomial(0.1, 2).unwrap();
        let b = AtomicBarrier::pair(0, 1, 2, 0.14).unwrap();
        let x = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
        let e = BarrierExpr::leaf(b.clone());
        assert_eq!(smooth_eval(&e, &x, &cfg).unwrap(), b.value(&x));
    }

    #[test]
    fn three_way_fold_is_exact_when_separated() {
        let cfg = SmoothingConfig::polynomial(0.1, 2).unwrap();
        let e = BarrierExpr::and(vec![constant(1.0), constant(2.0), constant(3.0)]).unwrap();
        assert_eq!(smooth_eval(&e, &DVector::zeros(0), &cfg).unwrap(), 1.0);
    }

    #[test]
    fn hessian_requires_k2() {
        let cfg = SmoothingConfig::polynomial(0.1, 1).unwrap();
        let e = BarrierExpr::leaf(AtomicBarrier::pair(0, 1, 2, 0.14).unwrap());
        let x = DVector::from_column_slice(&[0.0, 0.0, 1.0, 0.0]);
        assert!(smooth_grad(&e, &x, &cfg).is_ok());
        let err = smooth_hessian(&e, &x, &cfg).unwrap_err();
        assert!(err.to_string().contains("k >= 2"));
    }

    #[test]
    fn pair_leaf_hessian_blocks() {
        let cfg = SmoothingConfig::polynomial(0.1, 2).unwrap();
        let e = BarrierExpr::leaf(AtomicBarrier::pair(0, 1, 2, 0.14).unwrap());
        let x = DVector::from_column_slice(&[0.3, 0.1, 1.0, -0.4]);
        let h = smooth_hessian(&e, &x, &cfg).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, 0.0, -2.0, 0.0, //
                0.0, 2.0, 0.0, -2.0, //
                -2.0, 0.0, 2.0, 0.0, //
                0.0, -2.0, 0.0, 2.0,
            ],
        );
        assert_eq!(h, expected);
    }

    #[test]
    fn saturated_gradient_is_active_branch() {
        let cfg = SmoothingConfig::polynomial(0.1, 2).unwrap();
        let near = AtomicBarrier::obstacle(0, 0, vec![0.0, 0.0], 0.15).unwrap();
        let far = AtomicBarrier::obstacle(0, 1, vec![5.0, 5.0], 0.15).unwrap();
        let e = BarrierExpr::and(vec![near.clone().into(), far.into()]).unwrap();
        let x = DVector::from_column_slice(&[0.5, 0.2]);
        assert_eq!(smooth_grad(&e, &x, &cfg).unwrap(), near.gradient(&x));
        assert_eq!(smooth_hessian(&e, &x, &cfg).unwrap(), near.hessian(&x));
    }

    #[test]
    fn junction_smoothness_k2() {
        for beta in [1.0, 0.5, 0.1] {
            let p = TransitionPolynomial::new(beta, 2).unwrap();
            let (m, d1, d2) = p.eval_with_derivatives(beta);
            assert!((m - 1.0).abs() < 1e-12);
            assert!(d1.abs() * beta < 1e-12);
            assert!(d2.abs() * beta * beta < 1e-12);
            for i in 0..=50 {
                let l = beta * i as f64 / 50.0;
                assert!((p.eval(-l) + p.eval(l)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn transition_is_bounded(t in -1.0f64..=1.0, beta in 0.01f64..10.0) {
            let p = TransitionPolynomial::new(beta, 2).unwrap();
            let v = p.phi(t * beta);
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn exact_outside_band(h1 in -10.0f64..10.0, gap in 0.1001f64..5.0, beta in prop::sample::select(vec![1.0, 0.5, 0.1]), flip: bool) {
            let cfg = SmoothingConfig::polynomial(beta, 2).unwrap();
            let gap = gap.max(beta * 1.0001);
            let h2 = if flip { h1 - gap } else { h1 + gap };
            prop_assert_eq!(smooth_min_pair(h1, h2, &cfg), h1.min(h2));
        }

        #[test]
        fn pair_error_within_half_beta(h1 in -5.0f64..5.0, l in -1.0f64..1.0, beta in 0.01f64..2.0) {
            let cfg = SmoothingConfig::polynomial(beta, 2).unwrap();
            let h2 = h1 + l * beta;
            let err = smooth_min_pair(h1, h2, &cfg) - h1.min(h2);
            prop_assert!(err >= -1e-12);
            prop_assert!(err <= 0.5 * beta + 1e-12);
        }

        #[test]
        fn lse_never_exceeds_min(h in prop::collection::vec(-5.0f64..5.0, 2..8), beta in 0.05f64..1.0) {
            let cfg = SmoothingConfig::log_sum_exp(beta).unwrap();
            let children: Vec<_> = h.iter().map(|v| constant(*v)).collect();
            let e = BarrierExpr::and(children).unwrap();
            let m = h.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(smooth_eval(&e, &DVector::zeros(0), &cfg).unwrap() <= m + 1e-12);
        }
    }
}
