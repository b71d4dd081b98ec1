//! Domain-adaptive diffusion with a mutual learning strategy, at desk
//! scale: a diffusion module transports source-domain features toward the
//! target domain through a sequence of transitional distributions, and a
//! classifier and the diffusion module train each other alternately so
//! that class semantics survive the transition.
//!
//! Everything runs on synthetic low-dimensional domain pairs with a
//! self-contained f64 autodiff engine, so every training invariant is
//! checkable in seconds.

pub mod config;
pub mod dad;
pub mod diffusion;
pub mod domains;
pub mod error;
pub mod metrics;
pub mod mls;
pub mod models;
pub mod numerics;
pub mod report;

pub use config::{parse_config, DatasetSpec, ExperimentConfig};
pub use error::{Error, Result};
pub use report::AdaptationReport;
pub use numerics::{Graph, Rng, SgdMomentum, Tensor, Var};

