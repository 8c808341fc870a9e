//! Safe control synthesis for noisy multi-agent ensembles: Boolean
//! compositions of control barrier functions are smoothed with a polynomial
//! transition and enforced through a chance-constrained QP inside a
//! receding-horizon loop.

pub mod barrier;
pub mod dynamics;
pub mod error;
pub mod filter;
pub mod harness;
pub mod mission;
pub mod qp;
pub mod smoothing;
pub mod verify;

pub use error::{Error, Result};
