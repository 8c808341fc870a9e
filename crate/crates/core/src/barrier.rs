//! Atomic barrier functions and their Boolean composition.
//!
//! A [`BarrierExpr`] is a finite tree whose leaves are twice continuously
//! differentiable scalar fields over the stacked ensemble state. Exact
//! evaluation maps `And` to the pointwise minimum, `Or` to the pointwise
//! maximum and `Not` to negation, so the zero super-level set of the root is
//! the intersection/union/complement of the leaves' safe sets.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// User-supplied barrier with analytic derivatives.
pub trait CustomBarrier: Send + Sync + fmt::Debug {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Smallest ensemble state length this barrier can be evaluated on.
    fn required_dim(&self) -> usize;
}

/// Leaf of a composition tree.
#[derive(Clone, Debug)]
pub enum AtomicBarrier {
    /// `||x_i - x_j||^2 - delta^2`
    PairDistance {
        i: usize,
        j: usize,
        dim: usize,
        clearance_sq: f64,
    },
    /// `||x_i - c_k||^2 - r^2` for a fixed obstacle center `c_k`.
    ObstacleDistance {
        agent: usize,
        obstacle: usize,
        center: Vec<f64>,
        clearance_sq: f64,
    },
    Custom(Arc<dyn CustomBarrier>),
}

impl AtomicBarrier {
    /// Inter-agent clearance barrier. `clearance` is in meters.
    pub fn pair(i: usize, j: usize, dim: usize, clearance: f64) -> Result<Self> {
        if i == j {
            return Err(Error::config(format!(
                "pair barrier needs two distinct agents, got i = j = {i}"
            )));
        }
        if dim == 0 {
            return Err(Error::config("agent state dimension must be positive"));
        }
        if !(clearance.is_finite() && clearance > 0.0) {
            return Err(Error::config(format!(
                "pair clearance must be positive, got {clearance}"
            )));
        }
        Ok(Self::PairDistance {
            i,
            j,
            dim,
            clearance_sq: clearance * clearance,
        })
    }

    /// Obstacle clearance barrier around `center` (agent state dimension is
    /// `center.len()`).
    pub fn obstacle(
        agent: usize,
        obstacle: usize,
        center: Vec<f64>,
        clearance: f64,
    ) -> Result<Self> {
        if center.is_empty() {
            return Err(Error::config("obstacle center must be non-empty"));
        }
        if !(clearance.is_finite() && clearance > 0.0) {
            return Err(Error::config(format!(
                "obstacle clearance must be positive, got {clearance}"
            )));
        }
        Ok(Self::ObstacleDistance {
            agent,
            obstacle,
            center,
            clearance_sq: clearance * clearance,
        })
    }

    pub fn custom(b: Arc<dyn CustomBarrier>) -> Self {
        Self::Custom(b)
    }

    pub fn required_dim(&self) -> usize {
        match self {
            Self::PairDistance { i, j, dim, .. } => (i.max(j) + 1) * dim,
            Self::ObstacleDistance { agent, center, .. } => (agent + 1) * center.len(),
            Self::Custom(c) => c.required_dim(),
        }
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            Self::PairDistance {
                i,
                j,
                dim,
                clearance_sq,
            } => {
                let (a, b) = (i * dim, j * dim);
                (0..*dim)
                    .map(|c| (x[a + c] - x[b + c]).powi(2))
                    .sum::<f64>()
                    - clearance_sq
            }
            Self::ObstacleDistance {
                agent,
                center,
                clearance_sq,
                ..
            } => {
                let a = agent * center.len();
                center
                    .iter()
                    .enumerate()
                    .map(|(c, o)| (x[a + c] - o).powi(2))
                    .sum::<f64>()
                    - clearance_sq
            }
            Self::Custom(c) => c.value(x),
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        match self {
            Self::PairDistance { i, j, dim, .. } => {
                let mut g = DVector::zeros(n);
                let (a, b) = (i * dim, j * dim);
                for c in 0..*dim {
                    let diff = 2.0 * (x[a + c] - x[b + c]);
                    g[a + c] = diff;
                    g[b + c] = -diff;
                }
                g
            }
            Self::ObstacleDistance { agent, center, .. } => {
                let mut g = DVector::zeros(n);
                let a = agent * center.len();
                for (c, o) in center.iter().enumerate() {
                    g[a + c] = 2.0 * (x[a + c] - o);
                }
                g
            }
            Self::Custom(c) => c.gradient(x),
        }
    }

    pub fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        match self {
            Self::PairDistance { i, j, dim, .. } => {
                let mut h = DMatrix::zeros(n, n);
                let (a, b) = (i * dim, j * dim);
                for c in 0..*dim {
                    h[(a + c, a + c)] = 2.0;
                    h[(b + c, b + c)] = 2.0;
                    h[(a + c, b + c)] = -2.0;
                    h[(b + c, a + c)] = -2.0;
                }
                h
            }
            Self::ObstacleDistance { agent, center, .. } => {
                let mut h = DMatrix::zeros(n, n);
                let a = agent * center.len();
                for c in 0..center.len() {
                    h[(a + c, a + c)] = 2.0;
                }
                h
            }
            Self::Custom(c) => c.hessian(x),
        }
    }
}

/// Analytic gradient of a single atomic barrier.
pub fn eval_atomic_grad(b: &AtomicBarrier, x: &DVector<f64>) -> DVector<f64> {
    b.gradient(x)
}

#[derive(Clone, Debug)]
pub enum Node {
    Leaf(AtomicBarrier),
    And(Vec<BarrierExpr>),
    Or(Vec<BarrierExpr>),
    Not(Box<BarrierExpr>),
}

/// Boolean composition tree over atomic barriers. Immutable once built; the
/// constructors enforce `And`/`Or` fan-in of at least two.
#[derive(Clone, Debug)]
pub struct BarrierExpr {
    node: Node,
    required_dim: usize,
}

impl BarrierExpr {
    pub fn leaf(b: AtomicBarrier) -> Self {
        let required_dim = b.required_dim();
        Self {
            node: Node::Leaf(b),
            required_dim,
        }
    }

    pub fn and(children: Vec<BarrierExpr>) -> Result<Self> {
        Self::nary(children, "And").map(|(c, d)| Self {
            node: Node::And(c),
            required_dim: d,
        })
    }

    pub fn or(children: Vec<BarrierExpr>) -> Result<Self> {
        Self::nary(children, "Or").map(|(c, d)| Self {
            node: Node::Or(c),
            required_dim: d,
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(child: BarrierExpr) -> Self {
        let required_dim = child.required_dim;
        Self {
            node: Node::Not(Box::new(child)),
            required_dim,
        }
    }

    fn nary(children: Vec<BarrierExpr>, op: &str) -> Result<(Vec<BarrierExpr>, usize)> {
        if children.len() < 2 {
            return Err(Error::config(format!(
                "{op} node needs at least 2 children, got {}",
                children.len()
            )));
        }
        let d = children.iter().map(|c| c.required_dim).max().unwrap_or(0);
        Ok((children, d))
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    /// Smallest state length the tree can be evaluated on.
    pub fn required_dim(&self) -> usize {
        self.required_dim
    }

    /// Leaves in depth-first, left-to-right order.
    pub fn leaves(&self) -> Vec<&AtomicBarrier> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a AtomicBarrier>) {
        match &self.node {
            Node::Leaf(b) => out.push(b),
            Node::And(cs) | Node::Or(cs) => cs.iter().for_each(|c| c.collect_leaves(out)),
            Node::Not(c) => c.collect_leaves(out),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match &self.node {
            Node::Leaf(_) => 1,
            Node::And(cs) | Node::Or(cs) => cs.iter().map(Self::leaf_count).sum(),
            Node::Not(c) => c.leaf_count(),
        }
    }

    /// Edges on the longest root-to-leaf path; a bare leaf has depth 0.
    pub fn depth(&self) -> usize {
        match &self.node {
            Node::Leaf(_) => 0,
            Node::And(cs) | Node::Or(cs) => 1 + cs.iter().map(Self::depth).max().unwrap_or(0),
            Node::Not(c) => 1 + c.depth(),
        }
    }

    pub(crate) fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() < self.required_dim {
            return Err(Error::Dimension {
                context: "barrier evaluation",
                expected: self.required_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Exact (non-smooth) composed barrier value.
    pub fn eval_exact(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        Ok(self.eval_unchecked(x))
    }

    fn eval_unchecked(&self, x: &DVector<f64>) -> f64 {
        match &self.node {
            Node::Leaf(b) => b.value(x),
            Node::And(cs) => cs
                .iter()
                .map(|c| c.eval_unchecked(x))
                .fold(f64::INFINITY, f64::min),
            Node::Or(cs) => cs
                .iter()
                .map(|c| c.eval_unchecked(x))
                .fold(f64::NEG_INFINITY, f64::max),
            Node::Not(c) => -c.eval_unchecked(x),
        }
    }

    /// Membership of the composed safe set; the boundary is included.
    pub fn in_safe_set(&self, x: &DVector<f64>) -> Result<bool> {
        Ok(self.eval_exact(x)? >= 0.0)
    }
}

impl From<AtomicBarrier> for BarrierExpr {
    fn from(b: AtomicBarrier) -> Self {
        Self::leaf(b)
    }
}

/// Extended class-K function `alpha(gamma, h) = gamma^exponent * h`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaFunction {
    gain: f64,
    exponent: u32,
}

impl KappaFunction {
    pub fn power_linear(gain: f64, exponent: u32) -> Result<Self> {
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::config(format!(
                "class-K gain must be positive, got {gain}"
            )));
        }
        if exponent == 0 {
            return Err(Error::config("class-K exponent must be at least 1"));
        }
        Ok(Self { gain, exponent })
    }

    /// `gamma^3 h`, the form used for the filter constraint.
    pub fn cubic_gain(gamma: f64) -> Result<Self> {
        Self::power_linear(gamma, 3)
    }

    /// The plain identity `h`.
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            exponent: 1,
        }
    }

    /// Linear function with the given positive slope.
    pub fn linear(slope: f64) -> Result<Self> {
        Self::power_linear(slope, 1)
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn slope(&self) -> f64 {
        self.gain.powi(self.exponent as i32)
    }

    pub fn eval(&self, h: f64) -> f64 {
        self.slope() * h
    }
}
