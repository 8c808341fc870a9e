//! Control-affine agent dynamics with additive scaled Gaussian disturbance,
//! ensemble stacking, and an explicit Euler-Maruyama step.
//!
//! Ensemble vectors are agent-major: `x = [x_1; x_2; ...; x_N]`. With that
//! ordering the ensemble disturbance gain is block-diagonal with `K_w` on
//! every diagonal block (`I_N (x) K_w` in Kronecker notation).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

pub type DriftFn = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
pub type ControlFieldFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Dynamics of one agent: `x' = f(x) + g(x) u + K_w w`.
#[derive(Clone)]
pub struct AgentModel {
    state_dim: usize,
    control_dim: usize,
    drift: DriftFn,
    control: ControlFieldFn,
    noise_gain: DMatrix<f64>,
    lipschitz: f64,
}

impl fmt::Debug for AgentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentModel")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("noise_gain", &self.noise_gain)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl AgentModel {
    /// `lipschitz` documents the declared Lipschitz constant of `f` and `g`;
    /// `noise_gain` must be symmetric positive-definite.
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        drift: DriftFn,
        control: ControlFieldFn,
        noise_gain: DMatrix<f64>,
        lipschitz: f64,
    ) -> Result<Self> {
        if state_dim == 0 || control_dim == 0 {
            return Err(Error::config(
                "agent state and control dimensions must be positive",
            ));
        }
        if noise_gain.shape() != (state_dim, state_dim) {
            return Err(Error::config(format!(
                "K_w must be {state_dim}x{state_dim}, got {}x{}",
                noise_gain.nrows(),
                noise_gain.ncols()
            )));
        }
        if (&noise_gain - noise_gain.transpose()).amax() > 1e-12 {
            return Err(Error::config("K_w must be symmetric"));
        }
        if noise_gain.clone().cholesky().is_none() {
            return Err(Error::config("K_w must be positive-definite"));
        }
        if !(lipschitz.is_finite() && lipschitz >= 0.0) {
            return Err(Error::config(
                "declared Lipschitz constant must be finite and non-negative",
            ));
        }
        Ok(Self {
            state_dim,
            control_dim,
            drift,
            control,
            noise_gain,
            lipschitz,
        })
    }

    /// Planar single integrator: `f = 0`, `g = I_2`, `K_w = I_2`.
    pub fn single_integrator() -> Self {
        Self::single_integrator_with_gain(DMatrix::identity(2, 2)).expect("identity gain is valid")
    }

    pub fn single_integrator_with_gain(noise_gain: DMatrix<f64>) -> Result<Self> {
        Self::new(
            2,
            2,
            Arc::new(|_| DVector::zeros(2)),
            Arc::new(|_| DMatrix::identity(2, 2)),
            noise_gain,
            0.0,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn noise_gain(&self) -> &DMatrix<f64> {
        &self.noise_gain
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn drift(&self, x: &[f64]) -> DVector<f64> {
        (self.drift)(x)
    }

    pub fn control_field(&self, x: &[f64]) -> DMatrix<f64> {
        (self.control)(x)
    }
}

/// `N` identical agents stacked into one system.
#[derive(Clone, Debug)]
pub struct EnsembleModel {
    agent: AgentModel,
    n_agents: usize,
}

impl EnsembleModel {
    pub fn new(agent: AgentModel, n_agents: usize) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::config("ensemble needs at least one agent"));
        }
        Ok(Self { agent, n_agents })
    }

    pub fn agent(&self) -> &AgentModel {
        &self.agent
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn state_dim(&self) -> usize {
        self.n_agents * self.agent.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.n_agents * self.agent.control_dim
    }

    /// Stacked drift `F(x)`.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.agent.state_dim;
        let mut out = DVector::zeros(self.state_dim());
        for i in 0..self.n_agents {
            let xi = &x.as_slice()[i * d..(i + 1) * d];
            out.rows_mut(i * d, d).copy_from(&self.agent.drift(xi));
        }
        out
    }

    /// Block-diagonal control field `G(x)`.
    pub fn control_field(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (d, m) = (self.agent.state_dim, self.agent.control_dim);
        let mut out = DMatrix::zeros(self.state_dim(), self.control_dim());
        for i in 0..self.n_agents {
            let xi = &x.as_slice()[i * d..(i + 1) * d];
            out.view_mut((i * d, i * m), (d, m))
                .copy_from(&self.agent.control_field(xi));
        }
        out
    }

    /// Ensemble disturbance gain, block-diagonal in agent-major order.
    pub fn noise_gain(&self) -> DMatrix<f64> {
        let d = self.agent.state_dim;
        let mut out = DMatrix::zeros(self.state_dim(), self.state_dim());
        for i in 0..self.n_agents {
            out.view_mut((i * d, i * d), (d, d))
                .copy_from(&self.agent.noise_gain);
        }
        out
    }

    /// Applies the ensemble disturbance gain without forming the full matrix.
    pub fn apply_noise_gain(&self, w: &DVector<f64>) -> DVector<f64> {
        let d = self.agent.state_dim;
        let mut out = DVector::zeros(self.state_dim());
        for i in 0..self.n_agents {
            let wi = w.rows(i * d, d);
            out.rows_mut(i * d, d)
                .copy_from(&(&self.agent.noise_gain * wi));
        }
        out
    }

    /// One Euler-Maruyama step; the disturbance is a velocity perturbation
    /// held constant over `dt`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        w: &DVector<f64>,
        dt: f64,
    ) -> Result<DVector<f64>> {
        check_dim("ensemble state", self.state_dim(), x.len())?;
        check_dim("ensemble control", self.control_dim(), u.len())?;
        check_dim("ensemble disturbance", self.state_dim(), w.len())?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::config(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let rate = self.drift(x) + self.control_field(x) * u + self.apply_noise_gain(w);
        Ok(x + rate * dt)
    }
}

/// Planar single-integrator ensemble of `n` agents.
pub fn builtin_single_integrator(n: usize) -> Result<EnsembleModel> {
    EnsembleModel::new(AgentModel::single_integrator(), n)
}

/// Zero-mean Gaussian disturbance with diagonal covariance, driven by a
/// seeded ChaCha stream.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    variance: Vec<f64>,
    sigma_max: f64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl NoiseModel {
    /// `variance` holds the diagonal of `Sigma_w`; each entry must lie in
    /// `(0, sigma_max]`.
    pub fn new(variance: Vec<f64>, sigma_max: f64, seed: u64) -> Result<Self> {
        if variance.is_empty() {
            return Err(Error::config("noise covariance must be non-empty"));
        }
        if !(sigma_max.is_finite() && sigma_max > 0.0) {
            return Err(Error::config("sigma_max must be positive"));
        }
        for (i, v) in variance.iter().enumerate() {
            if !(*v > 0.0 && *v <= sigma_max) {
                return Err(Error::config(format!(
                    "Sigma_w[{i}][{i}] = {v} must lie in (0, {sigma_max}]"
                )));
            }
        }
        Ok(Self::unchecked(variance, sigma_max, seed))
    }

    /// Degenerate zero-covariance model. Only meant for noise-free runs.
    pub fn zero(dim: usize, seed: u64) -> Self {
        Self::unchecked(vec![0.0; dim], 0.0, seed)
    }

    fn unchecked(variance: Vec<f64>, sigma_max: f64, seed: u64) -> Self {
        Self {
            variance,
            sigma_max,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dim(&self) -> usize {
        self.variance.len()
    }

    pub fn variance(&self) -> &[f64] {
        &self.variance
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_zero(&self) -> bool {
        self.variance.iter().all(|v| *v == 0.0)
    }

    /// Stacked draw for `n` agents, each block i.i.d. `N(0, Sigma_w)`.
    pub fn sample_disturbance(&mut self, n: usize) -> DVector<f64> {
        let d = self.variance.len();
        let mut w = DVector::zeros(n * d);
        for i in 0..n {
            for (c, v) in self.variance.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                w[i * d + c] = v.sqrt() * z;
            }
        }
        w
    }
}
