//! Structure-preserving learning of energy-based dynamical systems.
//!
//! The crate models physical systems of the form `du/dt = G ∇H(u)`: a scalar
//! energy `H` (analytic or a neural network) paired with a structure operator
//! `G` whose algebraic properties (skew-symmetry, negative semi-definiteness,
//! all-ones left kernel) yield energy conservation, energy dissipation, and
//! mass conservation.
//!
//! The discrete-time counterpart replaces `∇H` with a discrete gradient
//! `∇̄H(u, v)` satisfying `H(u) − H(v) = ∇̄H(u, v)·(u − v)` and
//! `∇̄H(u, u) = ∇H(u)`. For neural energies the discrete gradient is obtained
//! by a modified backward pass over the recorded computation graph: linear
//! layers contribute their ordinary transposed Jacobians, elementwise
//! activations contribute secant slopes between the two evaluation points.
//! The resulting graph is itself differentiable, so models can be trained by
//! minimizing the residual of the implicit discrete-time scheme.
//!
//! Module map:
//! - [`tensor`]: dense tensors with a runtime precision tag.
//! - [`tape`]: reverse-mode autodiff tape over tensor operations.
//! - [`models`]: neural energy functions (MLP, periodic conv) and derivative
//!   field models, with orthogonal initialization and checkpointing.
//! - [`dg`]: discrete differentials, discrete gradients, and their oracles.
//! - [`systems`]: structure operators and analytic benchmark systems.
//! - [`integrators`]: explicit steppers (midpoint, Dormand–Prince, leapfrog)
//!   and the implicit discrete-gradient stepper with its nonlinear solver.
//! - [`train`]: training objectives, Adam, and the training loop.
//! - [`data`]: dataset generation, serialization, and ingestion.
//! - [`metrics`]: trajectory and derivative-field error metrics.

pub mod data;
pub mod dg;
pub mod integrators;
pub mod metrics;
pub mod models;
pub mod systems;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::{Precision, Tensor, TensorError};
