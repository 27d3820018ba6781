//! `resnetlab`: narrow ResNets with a skip scale ε and a residual scale δ.
//!
//! The crate evaluates `Φ(x) = λ̃(h_L(λ(x)))` where each hidden update is
//! `h_l = ε·h_{l−1} + δ·f_l(h_{l−1})`, and provides:
//!
//! - exact input gradients and layer Jacobians ([`gradients`]),
//! - certified verdicts on when `Φ` cannot have critical points, plus a
//!   constructor that plants one on purpose ([`regimes`]),
//! - proximity bounds to the neural ODE (`ε = 1`) and MLP (`ε = 0`) limits,
//!   checked against measured grid distances ([`bounds`]),
//! - grid level-set topology and critical-point search ([`topology`]),
//! - the 1D regression and 2D classification training setups ([`training`]).
//!
//! The `resnetlab` binary wires these into sub-commands; see [`cli`].

pub mod bounds;
pub mod cli;
pub mod error;
pub mod gradients;
pub mod io;
pub mod models;
pub mod numerics;
pub mod regimes;
pub mod rng;
pub mod svg;
pub mod sampling;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
pub use models::{Activation, AffineSigmaMap, NeuralOdeSpec, ResNetModel, ResidualLayer};
pub use numerics::{Mat64, Vec64};
