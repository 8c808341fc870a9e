//! Chance-constrained CBF quadratic program over a receding horizon.
//!
//! The nominal controller is rolled forward under the mean dynamics, one
//! smoothed-CBF row is placed at every predicted step, and the stacked
//! control sequence is projected onto the certified set subject to box
//! bounds. The Gaussian chance constraint on each row is replaced by its
//! exact deterministic equivalent: the row is affine in the disturbance, so
//! `Pr(a + b'u + s'w >= 0) >= 1 - delta` iff `a + b'u >= kappa ||Sigma^1/2 s||`
//! with `kappa` the standard-normal `1 - delta` quantile.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::barrier::{BarrierExpr, KappaFunction};
use crate::dynamics::EnsembleModel;
use crate::error::{check_dim, Error, Result};
use crate::qp::{solve_qp, QpProblem, QpSettings, QpStatus};
use crate::smoothing::{smooth_jet, Order, SmoothingConfig};

/// Cost weight used on horizon steps that already sit inside the goal ball;
/// it keeps the Hessian positive definite while contributing nothing
/// measurable to the reported objective.
const GOAL_BALL_WEIGHT: f64 = 1e-6;

/// Where the per-step CBF rows of the horizon are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Prediction {
    /// Along the mean-dynamics rollout of the filtered law itself: each
    /// predicted state is reached by the control the QP assigns to the
    /// previous step.
    #[default]
    ClosedLoop,
    /// Along the open-loop nominal rollout. Predicted states may cross
    /// obstacles, which makes their rows unsatisfiable under the box bound.
    Nominal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NominalSign {
    /// `u_f = -k_p (x - x_g)`
    GoalAttracting,
    /// `u_f = +k_p (x - x_g)`, the sign as printed; repels from the goal.
    PaperLiteral,
}

/// Proportional goal-seeking law with optional disturbance feedthrough.
#[derive(Clone, Debug)]
pub struct NominalController {
    gain: f64,
    goal: DVector<f64>,
    noise_feedthrough: bool,
    sign: NominalSign,
}

impl NominalController {
    pub fn new(gain: f64, goal: DVector<f64>) -> Result<Self> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::config(format!(
                "nominal gain k_p must be positive, got {gain}"
            )));
        }
        Ok(Self {
            gain,
            goal,
            noise_feedthrough: true,
            sign: NominalSign::GoalAttracting,
        })
    }

    pub fn with_feedthrough(mut self, on: bool) -> Self {
        self.noise_feedthrough = on;
        self
    }

    pub fn with_sign(mut self, sign: NominalSign) -> Self {
        self.sign = sign;
        self
    }

    pub fn goal(&self) -> &DVector<f64> {
        &self.goal
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn sign(&self) -> NominalSign {
        self.sign
    }

    /// Feedback part `u_f` alone.
    pub fn feedback(&self, x: &DVector<f64>) -> DVector<f64> {
        let err = x - &self.goal;
        match self.sign {
            NominalSign::GoalAttracting => err * -self.gain,
            NominalSign::PaperLiteral => err * self.gain,
        }
    }

    /// `u_d = u_f + K w` (feedthrough on) or `u_f`.
    pub fn nominal_control(
        &self,
        model: &EnsembleModel,
        x: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim("nominal state", model.state_dim(), x.len())?;
        check_dim("nominal goal", model.state_dim(), self.goal.len())?;
        check_dim("nominal disturbance", model.state_dim(), w.len())?;
        if model.control_dim() != model.state_dim() {
            return Err(Error::config(
                "proportional nominal law needs control dimension equal to state dimension",
            ));
        }
        let mut u = self.feedback(x);
        if self.noise_feedthrough {
            u += model.apply_noise_gain(w);
        }
        Ok(u)
    }
}

/// Violation probability and its standard-normal quantile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChanceSpec {
    delta_h: f64,
    kappa: f64,
}

impl ChanceSpec {
    pub fn new(delta_h: f64) -> Result<Self> {
        if !(delta_h > 0.0 && delta_h < 1.0) {
            return Err(Error::config(format!(
                "delta_h must lie in (0, 1), got {delta_h}"
            )));
        }
        let kappa = Normal::new(0.0, 1.0)
            .expect("standard normal")
            .inverse_cdf(1.0 - delta_h);
        Ok(Self { delta_h, kappa })
    }

    pub fn delta_h(&self) -> f64 {
        self.delta_h
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

/// One linearized CBF constraint `row . u >= rhs`.
#[derive(Clone, Debug)]
pub struct CbfRow {
    pub row: DVector<f64>,
    pub rhs: f64,
    pub h_smooth: f64,
    pub lie_drift: f64,
    pub ito_term: f64,
    pub alpha_term: f64,
    pub tightening: f64,
}

impl CbfRow {
    pub fn margin(&self, u: &DVector<f64>) -> f64 {
        self.row.dot(u) - self.rhs
    }
}

/// Predicted states over the horizon with their nominal controls and rows.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub predicted: Vec<DVector<f64>>,
    pub nominal: Vec<DVector<f64>>,
    pub rows: Vec<CbfRow>,
}

#[derive(Clone, Debug)]
pub struct SafeControlResult {
    pub u_seq: Vec<DVector<f64>>,
    pub nominal_seq: Vec<DVector<f64>>,
    pub predicted: Vec<DVector<f64>>,
    pub rows: Vec<CbfRow>,
    pub status: QpStatus,
    /// Per-step CBF slack `row . u - rhs`.
    pub margins: Vec<f64>,
    /// `sum_t 1{outside goal} ||u_t - u_d,t||^2`
    pub objective: f64,
    pub solve_time: f64,
    pub iterations: usize,
    /// Horizon step of the constraint that made the problem infeasible.
    pub infeasible_step: Option<usize>,
}

/// Everything needed to filter one receding-horizon window.
#[derive(Clone, Debug)]
pub struct SafetyFilter {
    pub expr: BarrierExpr,
    pub smoothing: SmoothingConfig,
    pub model: EnsembleModel,
    pub alpha: KappaFunction,
    pub chance: ChanceSpec,
    pub controller: NominalController,
    /// Diagonal of the per-agent disturbance covariance `Sigma_w`.
    pub noise_variance: Vec<f64>,
    pub dt: f64,
    pub u_max: f64,
    pub horizon: usize,
    pub eps_g: f64,
    pub qp: QpSettings,
    pub prediction: Prediction,
}

impl SafetyFilter {
    /// Covariance diagonal of the stacked disturbance.
    fn ensemble_variance(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.model.n_agents()).flat_map(move |_| self.noise_variance.iter().copied())
    }

    /// Builds the tightened CBF row at `x`.
    ///
    /// The disturbance is a velocity perturbation held for `dt`, so the
    /// displacement covariance grows like `dt^2 K Sigma K'` per step, i.e.
    /// `dt K Sigma K'` per unit time. That rate is what enters the
    /// second-order (Ito) term; the first-order term sees the perturbation
    /// itself and is handled by the quantile tightening.
    pub fn build_cbf_row(&self, x: &DVector<f64>) -> Result<CbfRow> {
        check_dim("CBF row state", self.model.state_dim(), x.len())?;
        let jet = smooth_jet(&self.expr, x, &self.smoothing, Order::Hessian)?;
        let grad = jet.gradient.expect("gradient");
        let hess = jet.hessian.expect("hessian");
        if !grad.iter().all(|v| v.is_finite()) || !hess.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite barrier derivative".into()));
        }

        let lie_drift = grad.dot(&self.model.drift(x));
        let row = self.model.control_field(x).tr_mul(&grad);

        let k = self.model.noise_gain();
        let kthk = k.tr_mul(&(&hess * &k));
        let trace: f64 = self
            .ensemble_variance()
            .enumerate()
            .map(|(i, v)| v * kthk[(i, i)])
            .sum();
        let ito_term = 0.5 * self.dt * trace;

        let ktg = k.tr_mul(&grad);
        let spread: f64 = self
            .ensemble_variance()
            .zip(ktg.iter())
            .map(|(v, s)| v * s * s)
            .sum::<f64>()
            .sqrt();
        let tightening = self.chance.kappa() * spread;
        let alpha_term = self.alpha.eval(jet.value);
        let rhs = -(lie_drift + ito_term + alpha_term) + tightening;
        Ok(CbfRow {
            row,
            rhs,
            h_smooth: jet.value,
            lie_drift,
            ito_term,
            alpha_term,
            tightening,
        })
    }

    /// Rolls the nominal law forward `horizon` steps under mean dynamics and
    /// places a row at every predicted state.
    pub fn nominal_rollout(&self, x0: &DVector<f64>, w: &DVector<f64>) -> Result<Rollout> {
        let mut predicted = Vec::with_capacity(self.horizon);
        let mut nominal = Vec::with_capacity(self.horizon);
        let zero = DVector::zeros(self.model.state_dim());
        let mut xc = x0.clone();
        for _ in 0..self.horizon {
            let ud = self.controller.nominal_control(&self.model, &xc, w)?;
            let next = self.model.step(&xc, &ud, &zero, self.dt)?;
            predicted.push(std::mem::replace(&mut xc, next));
            nominal.push(ud);
        }
        let rows = predicted
            .iter()
            .map(|x| self.build_cbf_row(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Rollout {
            predicted,
            nominal,
            rows,
        })
    }

    /// Rolls the mean dynamics forward under the single-step filter, so every
    /// predicted state has a row that the box admits whenever the one-step
    /// problem along the way is feasible. Since the horizon QP separates by
    /// step, its solution reproduces this rollout.
    pub fn closed_loop_rollout(&self, x0: &DVector<f64>, w: &DVector<f64>) -> Result<Rollout> {
        let mut predicted = Vec::with_capacity(self.horizon);
        let mut nominal = Vec::with_capacity(self.horizon);
        let mut rows = Vec::with_capacity(self.horizon);
        let zero = DVector::zeros(self.model.state_dim());
        let mut xc = x0.clone();
        for _ in 0..self.horizon {
            let ud = self.controller.nominal_control(&self.model, &xc, w)?;
            let row = self.build_cbf_row(&xc)?;
            let step = self.block_problem(
                std::slice::from_ref(&row),
                std::slice::from_ref(&ud),
                &[1.0],
            );
            let sol = solve_qp(&step, &self.qp)?;
            // An infeasible step keeps the box-projected nominal so the
            // rollout can continue; the horizon QP then reports it.
            let u = match sol.status {
                QpStatus::Optimal => sol.x,
                _ => ud.map(|v| v.clamp(-self.u_max, self.u_max)),
            };
            let next = self.model.step(&xc, &u, &zero, self.dt)?;
            predicted.push(std::mem::replace(&mut xc, next));
            nominal.push(ud);
            rows.push(row);
        }
        Ok(Rollout {
            predicted,
            nominal,
            rows,
        })
    }

    fn block_problem(
        &self,
        rows: &[CbfRow],
        nominal: &[DVector<f64>],
        weights: &[f64],
    ) -> QpProblem {
        let m = self.model.control_dim();
        let steps = rows.len();
        let n = m * steps;
        let mut h = DMatrix::zeros(n, n);
        let mut c = DVector::zeros(n);
        let mut a = DMatrix::zeros(steps, n);
        let mut b = DVector::zeros(steps);
        for (t, ((row, ud), w_t)) in rows.iter().zip(nominal).zip(weights).enumerate() {
            let wt = w_t.max(GOAL_BALL_WEIGHT);
            for i in 0..m {
                h[(t * m + i, t * m + i)] = wt;
                c[t * m + i] = -wt * ud[i];
            }
            a.view_mut((t, t * m), (1, m))
                .copy_from(&row.row.transpose());
            b[t] = row.rhs;
        }
        QpProblem {
            h,
            c,
            a,
            b,
            bound: Some(self.u_max),
        }
    }

    /// Solves the filtered sequence for the window starting at `x0` with the
    /// disturbance realization `w`.
    pub fn filter_controls(
        &self,
        x0: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<SafeControlResult> {
        if self.horizon == 0 {
            return Err(Error::config("control horizon must be at least 1"));
        }
        let m = self.model.control_dim();
        let Rollout {
            predicted,
            nominal,
            rows,
        } = match self.prediction {
            Prediction::ClosedLoop => self.closed_loop_rollout(x0, w)?,
            Prediction::Nominal => self.nominal_rollout(x0, w)?,
        };

        let weights: Vec<f64> = predicted
            .iter()
            .map(|x| {
                if (x - self.controller.goal()).norm() <= self.eps_g {
                    0.0
                } else {
                    1.0
                }
            })
            .collect();
        let problem = self.block_problem(&rows, &nominal, &weights);

        let start = Instant::now();
        let sol = solve_qp(&problem, &self.qp)?;
        let solve_time = start.elapsed().as_secs_f64();

        let u_seq: Vec<DVector<f64>> = (0..self.horizon)
            .map(|t| sol.x.rows(t * m, m).into_owned())
            .collect();
        let margins = rows.iter().zip(&u_seq).map(|(r, u)| r.margin(u)).collect();
        let objective = u_seq
            .iter()
            .zip(&nominal)
            .zip(&weights)
            .map(|((u, ud), w_t)| w_t * (u - ud).norm_squared())
            .sum();
        let infeasible_step = (sol.status == QpStatus::Infeasible)
            .then(|| sol.blocking.map(|i| constraint_step(i, self.horizon, m)))
            .flatten();
        Ok(SafeControlResult {
            u_seq,
            nominal_seq: nominal,
            predicted,
            rows,
            status: sol.status,
            margins,
            objective,
            solve_time,
            iterations: sol.iterations,
            infeasible_step,
        })
    }
}

/// Maps a QP constraint index back to its horizon step.
fn constraint_step(index: usize, horizon: usize, m: usize) -> usize {
    if index < horizon {
        index
    } else {
        ((index - horizon) % (horizon * m)) / m
    }
}

/// Iteration cap scaled to the problem size, never below the solver default.
pub fn qp_settings_for(horizon: usize, control_dim: usize) -> QpSettings {
    let n = horizon * control_dim;
    let defaults = QpSettings::default();
    QpSettings {
        max_iter: defaults.max_iter.max(4 * (n + horizon)),
        ..defaults
    }
}
