//! Continuous graph flow: a continuous normalizing flow over
//! graph-structured variables.
//!
//! The transformation from a simple base distribution to the data
//! distribution is the solution map of an ODE whose vector field is
//! built from shared, edge-typed message functions. Log-densities follow
//! from integrating the (estimated) trace of the field's Jacobian
//! alongside the states.
//!
//! Modules, roughly bottom-up:
//!
//! - [`tensor`], [`params`], [`tape`]: dense 2-D tensors and a recorded
//!   reverse-mode differentiation engine.
//! - [`graph`]: graph data model, synthetic dataset samplers, the
//!   potential-edge encoding used for generation, JSONL I/O.
//! - [`dequant`]: dequantization of binary states.
//! - [`dynamics`]: the message-passing vector field.
//! - [`odeint`]: fixed and adaptive integrators, trace accumulation,
//!   adjoint and unrolled gradients.
//! - [`flow`]: stacked flow blocks, log-probability, sampling,
//!   conditional sampling, checkpoints.
//! - [`train`]: maximum-likelihood training.
//! - [`metrics`]: graph statistics and MMD evaluation.
//! - [`diagnostics`]: the self-test battery exposed by the CLI.

pub mod dequant;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod flow;
pub mod graph;
pub mod metrics;
pub mod odeint;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{CgError, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
