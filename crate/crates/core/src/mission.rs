//! Declarative reach-avoid scenarios and their compilation into a barrier
//! tree, an ensemble model and a safety filter.
//!
//! Scenario files are TOML, or JSON when the extension is `.json`. Omitted
//! keys take the default values below; unknown keys are rejected.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::{AtomicBarrier, BarrierExpr, KappaFunction};
use crate::dynamics::{AgentModel, EnsembleModel, NoiseModel};
use crate::error::{Error, Result, Violation};
use crate::filter::{
    qp_settings_for, ChanceSpec, NominalController, NominalSign, Prediction, SafetyFilter,
};
use crate::smoothing::{Scheme, SmoothingConfig};

const AGENT_DIM: usize = 2;

pub const SINGLE_OBSTACLE: &str = include_str!("../scenarios/single-obstacle.toml");
pub const MULTI_OBSTACLE: &str = include_str!("../scenarios/multi-obstacle.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    /// Physical radius in meters; agents keep `delta_o` from the surface.
    #[serde(default)]
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n_agents: usize,
    pub starts: Vec<[f64; 2]>,
    pub goals: Vec<[f64; 2]>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default = "defaults::delta_o")]
    pub delta_o: f64,
    #[serde(default = "defaults::eps_g")]
    pub eps_g: f64,
    /// Diagonal of the per-agent disturbance covariance.
    #[serde(default = "defaults::sigma_w")]
    pub sigma_w: [f64; 2],
    #[serde(default = "defaults::k_w")]
    pub k_w: [[f64; 2]; 2],
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::scheme")]
    pub scheme: Scheme,
    #[serde(default = "defaults::k_smooth")]
    pub k_smooth: u32,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::t_max")]
    pub t_max: usize,
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    #[serde(default = "defaults::u_max")]
    pub u_max: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::delta_h")]
    pub delta_h: f64,
    #[serde(default = "defaults::k_p")]
    pub k_p: f64,
    #[serde(default)]
    pub seed: u64,
    /// Use the nominal law with the sign exactly as printed (goal-repelling).
    #[serde(skip)]
    pub paper_literal_sign: bool,
    /// Zero the disturbance entirely; allowed only through [`Scenario::without_noise`].
    #[serde(skip)]
    pub noise_free: bool,
    #[serde(skip)]
    pub prediction: Prediction,
}

mod defaults {
    use crate::smoothing::Scheme;

    pub fn delta() -> f64 {
        0.14
    }
    pub fn delta_o() -> f64 {
        0.15
    }
    pub fn eps_g() -> f64 {
        0.05
    }
    pub fn sigma_w() -> [f64; 2] {
        [0.1, 0.1]
    }
    pub fn k_w() -> [[f64; 2]; 2] {
        [[1.0, 0.0], [0.0, 1.0]]
    }
    pub fn beta() -> f64 {
        0.1
    }
    pub fn scheme() -> Scheme {
        Scheme::Poly
    }
    pub fn k_smooth() -> u32 {
        2
    }
    pub fn horizon() -> usize {
        10
    }
    pub fn t_max() -> usize {
        1000
    }
    pub fn dt() -> f64 {
        0.05
    }
    pub fn u_max() -> f64 {
        2.0
    }
    pub fn gamma() -> f64 {
        1.0
    }
    pub fn delta_h() -> f64 {
        0.01
    }
    pub fn k_p() -> f64 {
        1.0
    }
}

impl Scenario {
    /// Parses without validating.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// One of the scenarios shipped with the crate: `single-obstacle` or
    /// `multi-obstacle`.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name {
            "single-obstacle" => SINGLE_OBSTACLE,
            "multi-obstacle" => MULTI_OBSTACLE,
            other => return Err(Error::config(format!("unknown bundled scenario `{other}`"))),
        };
        Self::from_toml_str(text)
    }

    /// Copy with the disturbance switched off.
    pub fn without_noise(&self) -> Self {
        Self {
            noise_free: true,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn state_dim(&self) -> usize {
        self.n_agents * AGENT_DIM
    }

    /// Clearance radius of obstacle `k` measured from its center.
    pub fn obstacle_clearance(&self, k: usize) -> f64 {
        self.obstacles[k].radius + self.delta_o
    }

    pub fn start_state(&self) -> DVector<f64> {
        stack(&self.starts)
    }

    pub fn goal_state(&self) -> DVector<f64> {
        stack(&self.goals)
    }

    pub fn noise_gain(&self) -> DMatrix<f64> {
        DMatrix::from_fn(2, 2, |r, c| self.k_w[r][c])
    }

    /// Every violated invariant, each named by its field. Empty iff valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut need = |ok: bool, field: &str, msg: String| {
            if !ok {
                v.push(Violation::new(field, msg));
            }
        };
        let positive = |x: f64| x.is_finite() && x > 0.0;

        need(
            self.n_agents >= 1,
            "n_agents",
            "at least one agent is required".into(),
        );
        need(
            self.starts.len() == self.n_agents,
            "starts",
            format!(
                "expected {} start points, got {}",
                self.n_agents,
                self.starts.len()
            ),
        );
        need(
            self.goals.len() == self.n_agents,
            "goals",
            format!(
                "expected {} goal points, got {}",
                self.n_agents,
                self.goals.len()
            ),
        );
        let finite_points = |pts: &[[f64; 2]]| pts.iter().flatten().all(|c| c.is_finite());
        need(
            finite_points(&self.starts),
            "starts",
            "coordinates must be finite".into(),
        );
        need(
            finite_points(&self.goals),
            "goals",
            "coordinates must be finite".into(),
        );
        need(
            positive(self.delta),
            "delta",
            format!("must be positive, got {}", self.delta),
        );
        need(
            positive(self.delta_o),
            "delta_o",
            format!("must be positive, got {}", self.delta_o),
        );
        need(
            self.delta_o > self.delta,
            "delta_o",
            format!(
                "C2 ordering: delta_o ({}) must exceed delta ({})",
                self.delta_o, self.delta
            ),
        );
        need(
            positive(self.eps_g),
            "eps_g",
            format!("must be positive, got {}", self.eps_g),
        );
        for (k, o) in self.obstacles.iter().enumerate() {
            need(
                o.radius.is_finite() && o.radius >= 0.0 && o.center.iter().all(|c| c.is_finite()),
                "obstacles",
                format!("obstacle {k} needs a finite center and non-negative radius"),
            );
        }
        if !self.noise_free {
            need(
                self.sigma_w.iter().all(|s| positive(*s)),
                "sigma_w",
                format!(
                    "covariance diagonal must be positive, got {:?}",
                    self.sigma_w
                ),
            );
        }
        let k = self.noise_gain();
        need(
            (&k - k.transpose()).amax() <= 1e-12 && k.clone().cholesky().is_some(),
            "k_w",
            "must be symmetric positive-definite".into(),
        );
        need(
            positive(self.beta),
            "beta",
            format!("must be positive, got {}", self.beta),
        );
        need(
            self.k_smooth >= 2 || self.scheme == Scheme::Lse,
            "k_smooth",
            "Hessian requires C^2, set k >= 2".into(),
        );
        need(self.horizon >= 1, "horizon", "must be at least 1".into());
        need(
            positive(self.dt),
            "dt",
            format!("must be positive, got {}", self.dt),
        );
        need(
            positive(self.u_max),
            "u_max",
            format!("must be positive, got {}", self.u_max),
        );
        need(
            positive(self.gamma),
            "gamma",
            format!("must be positive, got {}", self.gamma),
        );
        need(
            self.delta_h > 0.0 && self.delta_h < 1.0,
            "delta_h",
            format!("must lie in (0, 1), got {}", self.delta_h),
        );
        need(
            positive(self.k_p),
            "k_p",
            format!("must be positive, got {}", self.k_p),
        );
        need(
            self.n_agents > 1 || !self.obstacles.is_empty(),
            "obstacles",
            "a single agent without obstacles has nothing to compose".into(),
        );

        let dist = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
        for i in 0..self.starts.len() {
            for j in i + 1..self.starts.len() {
                let d = dist(self.starts[i], self.starts[j]);
                need(
                    d > self.delta,
                    "starts",
                    format!(
                        "initial state not interior: agents {i} and {j} are {d} apart (delta = {})",
                        self.delta
                    ),
                );
            }
            for (k, o) in self.obstacles.iter().enumerate() {
                let d = dist(self.starts[i], o.center);
                let clearance = o.radius + self.delta_o;
                need(
                    d > clearance,
                    "starts",
                    format!("initial state not interior: agent {i} is {d} from obstacle {k} (clearance {clearance})"),
                );
            }
        }
        v
    }

    fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }

    pub fn model(&self) -> Result<EnsembleModel> {
        let agent = AgentModel::single_integrator_with_gain(self.noise_gain())?;
        EnsembleModel::new(agent, self.n_agents)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        if self.noise_free {
            return Ok(NoiseModel::zero(AGENT_DIM, self.seed));
        }
        let sigma_max = self.sigma_w.iter().copied().fold(0.0, f64::max);
        NoiseModel::new(self.sigma_w.to_vec(), sigma_max, self.seed)
    }

    pub fn smoothing(&self) -> Result<SmoothingConfig> {
        SmoothingConfig::new(self.scheme, self.beta, self.k_smooth)
    }

    pub fn controller(&self) -> Result<NominalController> {
        let sign = if self.paper_literal_sign {
            NominalSign::PaperLiteral
        } else {
            NominalSign::GoalAttracting
        };
        Ok(NominalController::new(self.k_p, self.goal_state())?.with_sign(sign))
    }

    /// Validated safety filter for this scenario.
    pub fn filter(&self) -> Result<SafetyFilter> {
        self.ensure_valid()?;
        let noise_variance = if self.noise_free {
            vec![0.0; AGENT_DIM]
        } else {
            self.sigma_w.to_vec()
        };
        Ok(SafetyFilter {
            expr: build_barrier_tree(self)?,
            smoothing: self.smoothing()?,
            model: self.model()?,
            alpha: KappaFunction::cubic_gain(self.gamma)?,
            chance: ChanceSpec::new(self.delta_h)?,
            controller: self.controller()?,
            noise_variance,
            dt: self.dt,
            u_max: self.u_max,
            horizon: self.horizon,
            eps_g: self.eps_g,
            qp: qp_settings_for(self.horizon, self.state_dim()),
            prediction: self.prediction,
        })
    }
}

fn stack(points: &[[f64; 2]]) -> DVector<f64> {
    DVector::from_iterator(points.len() * 2, points.iter().flatten().copied())
}

/// Parses and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let s = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Scenario::from_json_str(&text)?,
        _ => Scenario::from_toml_str(&text)?,
    };
    s.ensure_valid()?;
    Ok(s)
}

/// Compiles the scenario's clearance constraints into
/// `And(pairs, obstacles)`, with pair leaves ordered by `(i, j)`, `j > i`,
/// and obstacle leaves by `(i, k)`. Empty groups are omitted and
/// single-leaf groups are not wrapped.
pub fn build_barrier_tree(s: &Scenario) -> Result<BarrierExpr> {
    let mut pairs = Vec::new();
    for i in 0..s.n_agents {
        for j in i + 1..s.n_agents {
            pairs.push(BarrierExpr::leaf(AtomicBarrier::pair(
                i, j, AGENT_DIM, s.delta,
            )?));
        }
    }
    let mut obstacles = Vec::new();
    for i in 0..s.n_agents {
        for (k, o) in s.obstacles.iter().enumerate() {
            obstacles.push(BarrierExpr::leaf(AtomicBarrier::obstacle(
                i,
                k,
                o.center.to_vec(),
                o.radius + s.delta_o,
            )?));
        }
    }
    let group = |mut leaves: Vec<BarrierExpr>| -> Result<Option<BarrierExpr>> {
        match leaves.len() {
            0 => Ok(None),
            1 => Ok(leaves.pop()),
            _ => BarrierExpr::and(leaves).map(Some),
        }
    };
    match (group(pairs)?, group(obstacles)?) {
        (Some(p), Some(o)) => BarrierExpr::and(vec![p, o]),
        (Some(one), None) | (None, Some(one)) => Ok(one),
        (None, None) => Err(Error::config(
            "degenerate barrier tree: no agent pairs and no obstacles",
        )),
    }
}
