//! LoRA and SymLoRA adapters on a frozen base, with the machinery needed to
//! train and inspect them at desk scale.
//!
//! * [`numerics`]: matrices, seeded RNG, Jacobi decompositions, reverse-mode
//!   autodiff and a finite-difference oracle.
//! * [`adapters`]: LoRA (`W0 + (α/r)BA`) and SymLoRA (`λW0 + (α/r)Q diag(Λ) Qᵀ`).
//! * [`model`]: a tiny transformer classifier with injectable adapters.
//! * [`tasks`]: planted linear tasks with known optima and toy sequence tasks.
//! * [`training`]: optimizers, the training loop, grid search, intervals.
//! * [`analysis`]: per-layer norm reports and comparison tables.
//! * [`store`]: the `SLRA` checkpoint format.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below pin the
//! common `f64` (and `f32`) instantiations.

pub mod adapters;
pub mod analysis;
pub mod error;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod store;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type LoraAdapter64 = adapters::LoraAdapter<f64>;
pub type SymLoraAdapter64 = adapters::SymLoraAdapter<f64>;
pub type AdaptedLinear64 = adapters::AdaptedLinear<f64>;
pub type AdaptedLinear32 = adapters::AdaptedLinear<f32>;
pub type AdaptedModel64 = model::AdaptedModel<f64>;
pub type AdaptedModel32 = model::AdaptedModel<f32>;
pub type PlantedLinearTask64 = tasks::PlantedLinearTask<f64>;
