//! Dense dual active-set solver for small strictly convex QPs
//! (Goldfarb-Idnani).
//!
//! ```text
//!     minimize    1/2 x' H x + c' x
//!     subject to  A x >= b
//!                 -bound <= x_i <= bound     (optional box)
//! ```
//!
//! Constraints are indexed with the general rows first (`0..m`), then the
//! lower bounds (`m..m+n`), then the upper bounds (`m+n..m+2n`). The lowest
//! index violated constraint always enters next, which makes the iteration
//! sequence deterministic. Factorizations `J = L^-T Q` and the triangular
//! `R` are updated with Givens rotations on every add and drop.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Inequality rows, `a x >= b`.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Symmetric box `|x_i| <= bound`, if any.
    pub bound: Option<f64>,
}

impl QpProblem {
    pub fn unconstrained(h: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            h,
            c,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            bound: None,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.n_rows()
            + if self.bound.is_some() {
                2 * self.n_vars()
            } else {
                0
            }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.c.dot(x)
    }

    /// Slack `n_i' x - b_i` of constraint `i`.
    pub fn slack(&self, i: usize, x: &DVector<f64>) -> f64 {
        let (m, n) = (self.n_rows(), self.n_vars());
        if i < m {
            self.a.row(i).transpose().dot(x) - self.b[i]
        } else {
            let bound = self.bound.expect("box constraint index without bound");
            if i < m + n {
                x[i - m] + bound
            } else {
                bound - x[i - m - n]
            }
        }
    }

    pub fn normal(&self, i: usize) -> DVector<f64> {
        let (m, n) = (self.n_rows(), self.n_vars());
        if i < m {
            self.a.row(i).transpose()
        } else {
            let mut e = DVector::zeros(n);
            if i < m + n {
                e[i - m] = 1.0;
            } else {
                e[i - m - n] = -1.0;
            }
            e
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        check_dim("QP Hessian rows", n, self.h.nrows())?;
        check_dim("QP Hessian cols", n, self.h.ncols())?;
        check_dim("QP constraint cols", n, self.a.ncols())?;
        check_dim("QP constraint rhs", self.a.nrows(), self.b.len())?;
        if let Some(bound) = self.bound {
            if bound.is_nan() || bound <= 0.0 {
                return Err(Error::config(format!(
                    "box bound must be positive, got {bound}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpSettings {
    pub max_iter: usize,
    /// Relative feasibility tolerance for picking violated constraints.
    pub feas_tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            feas_tol: 1e-12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub objective: f64,
    /// Active constraint indices and their multipliers, in activation order.
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    /// Constraint that could not be satisfied when infeasibility was detected.
    pub blocking: Option<usize>,
}

impl QpSolution {
    /// Infinity norm of `H x + c - sum_i lambda_i n_i`.
    pub fn kkt_residual(&self, p: &QpProblem) -> f64 {
        let mut r = &p.h * &self.x + &p.c;
        for (i, lam) in self.active.iter().zip(&self.multipliers) {
            r.axpy(-lam, &p.normal(*i), 1.0);
        }
        r.amax()
    }

    /// Most negative constraint slack (zero when all constraints hold).
    pub fn max_violation(&self, p: &QpProblem) -> f64 {
        (0..p.n_constraints())
            .map(|i| (-p.slack(i, &self.x)).max(0.0))
            .fold(0.0, f64::max)
    }
}

struct Factors {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
}

impl Factors {
    fn rotate_j(&mut self, a: usize, b: usize, c: f64, s: f64) {
        let n = self.j.nrows();
        for row in 0..n {
            let (ja, jb) = (self.j[(row, a)], self.j[(row, b)]);
            self.j[(row, a)] = c * ja + s * jb;
            self.j[(row, b)] = -s * ja + c * jb;
        }
    }

    /// Appends a constraint whose transformed normal is `d = J' n`.
    fn add(&mut self, mut d: DVector<f64>) {
        let n = d.len();
        for i in (self.q + 1..n).rev() {
            let (a, b) = (d[i - 1], d[i]);
            if b == 0.0 {
                continue;
            }
            let rho = a.hypot(b);
            let (c, s) = (a / rho, b / rho);
            d[i - 1] = rho;
            d[i] = 0.0;
            self.rotate_j(i - 1, i, c, s);
        }
        for i in 0..=self.q {
            self.r[(i, self.q)] = d[i];
        }
        self.q += 1;
    }

    /// Removes the `k`-th active constraint and restores triangularity.
    fn drop(&mut self, k: usize) {
        let q = self.q;
        for col in k..q - 1 {
            for row in 0..=col + 1 {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..q {
            self.r[(row, q - 1)] = 0.0;
        }
        for i in k..q - 1 {
            let (a, b) = (self.r[(i, i)], self.r[(i + 1, i)]);
            if b == 0.0 {
                continue;
            }
            let rho = a.hypot(b);
            let (c, s) = (a / rho, b / rho);
            for col in i..q - 1 {
                let (ri, rj) = (self.r[(i, col)], self.r[(i + 1, col)]);
                self.r[(i, col)] = c * ri + s * rj;
                self.r[(i + 1, col)] = -s * ri + c * rj;
            }
            self.r[(i + 1, i)] = 0.0;
            self.rotate_j(i, i + 1, c, s);
        }
        self.q -= 1;
    }

    /// Solves the leading `q x q` triangular system `R r = d[..q]`.
    fn back_substitute(&self, d: &DVector<f64>) -> Vec<f64> {
        let q = self.q;
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for (jj, rj) in r.iter().enumerate().skip(i + 1) {
                acc -= self.r[(i, jj)] * rj;
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }
}

/// Solves `p` to optimality, infeasibility, or the iteration cap.
pub fn solve_qp(p: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    p.validate()?;
    let n = p.n_vars();
    let chol =
        p.h.clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("QP Hessian is not positive definite".into()))?;
    let mut x = -chol.solve(&p.c);
    let linv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let mut f = Factors {
        j: linv.transpose(),
        r: DMatrix::zeros(n, n),
        q: 0,
    };
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let total = p.n_constraints();

    let finish =
        |x: DVector<f64>, status, active: Vec<usize>, mult: Vec<f64>, iterations, blocking| {
            let objective = p.objective(&x);
            Ok(QpSolution {
                x,
                status,
                objective,
                active,
                multipliers: mult,
                iterations,
                blocking,
            })
        };

    loop {
        let violated = (0..total).filter(|i| !active.contains(i)).find(|&i| {
            let scale = 1.0
                + if i < p.n_rows() {
                    p.b[i].abs()
                } else {
                    p.bound.unwrap_or(0.0)
                };
            p.slack(i, &x) < -settings.feas_tol * scale
        });
        let Some(cp) = violated else {
            return finish(x, QpStatus::Optimal, active, mult, iterations, None);
        };
        let np = p.normal(cp);
        let mut u_p = 0.0;

        loop {
            iterations += 1;
            if iterations > settings.max_iter {
                return finish(x, QpStatus::MaxIter, active, mult, iterations - 1, None);
            }
            let d = f.j.tr_mul(&np);
            let q = f.q;
            let tail = d.rows(q, n - q);
            let z = f.j.columns(q, n - q) * tail;
            let zn = tail.norm_squared();
            let r = f.back_substitute(&d);

            // largest dual step that keeps active multipliers non-negative
            let mut t1 = f64::INFINITY;
            let mut k_drop = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 0.0 {
                    let ratio = mult[j] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        k_drop = Some(j);
                    }
                }
            }

            if zn <= 1e-14 * d.norm_squared().max(1e-300) {
                // n_p is dependent on the active normals: only a dual step is possible
                let Some(k) = k_drop else {
                    return finish(x, QpStatus::Infeasible, active, mult, iterations, Some(cp));
                };
                for (mj, rj) in mult.iter_mut().zip(&r) {
                    *mj -= t1 * rj;
                }
                u_p += t1;
                active.remove(k);
                mult.remove(k);
                f.drop(k);
                continue;
            }

            let t2 = -p.slack(cp, &x) / zn;
            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for (mj, rj) in mult.iter_mut().zip(&r) {
                *mj -= t * rj;
            }
            u_p += t;
            if t2 <= t1 {
                active.push(cp);
                mult.push(u_p);
                f.add(d);
                break;
            }
            let k = k_drop.expect("finite partial step has a blocking index");
            active.remove(k);
            mult.remove(k);
            f.drop(k);
        }
    }
}
