//! Online imitation learning with a coupled random-distillation reward model.
//!
//! The crate is organized around a small set of subsystems:
//!
//! - [`math`]: row-major matrices and the scalar abstraction shared by all
//!   numerical code (`f32` for training, `f64` for gradient verification).
//! - [`nn`]: multilayer perceptrons with exact reverse-mode gradients, an
//!   adaptive-moment optimizer, learning-rate scheduling, and soft target
//!   blending.
//! - [`reward`]: the coupled density-estimation reward model built from a
//!   frozen random target ensemble and two predictors.
//! - [`model`]: the decoder-free latent world model (encoder, dynamics,
//!   discrete-bin Q ensemble, stochastic policy prior) and its losses.
//! - [`planner`]: sampling-based action-sequence refinement over latent
//!   rollouts.
//! - [`buffer`]: expert/behavioral replay buffers with contiguous segment
//!   sampling and on-disk trajectory persistence.
//! - [`env`]: analytic toy control environments with scripted experts.
//! - [`trainer`]: the online training loop, evaluation, and metrics.

pub mod checkpoint;
pub mod math;
pub mod model;
pub mod planner;
pub mod nn;
pub mod reward;

pub use math::{Matrix, Real};
pub use model::WorldModel;
pub use planner::{PlanSolution, Planner};
pub use nn::{Adam, Mlp, MlpSpec, ParamStore};
pub use reward::{CdredModel, RewardBreakdown};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in {context} (parameter group `{group}`)")]
    NonFinite { context: String, group: String },
    #[error("data format error: {0}")]
    Format(String),
    #[error("not ready: {0}")]
    NotReady(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical abort: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
