//! Variational manifold embedding.
//!
//! Fits smooth maps `φ: R^d → R^D` from a latent prior `q` into an ambient
//! density `p_data` by maximizing
//! `J[φ] = E_q[½ log det(JᵀJ) + log p_data(φ(z)) − log q(z)]`, and checks
//! the stationarity conditions and conserved quantities of that objective.

pub mod dynamics;
pub mod embedding;
pub mod models;
pub mod numerics;
pub mod objective;
pub mod optimizer;
pub mod pca;
pub mod variational;

pub use dynamics::{OdeState, Trajectory};
pub use embedding::{Basis, EmbeddingModel, Family, InjectivityReport};
pub use models::{DensityModel, DensitySpec, PriorModel, PriorSpec};
pub use numerics::{AffineMap, Matrix, QuadratureRule};
pub use objective::{IntegrationScheme, ObjectiveEstimate, Repulsion};
pub use optimizer::{OptimizeConfig, OptimizeOutcome, OptimizeTrace};
pub use pca::PcaSolution;
pub use variational::{ConservationTrace, ElResidual};
