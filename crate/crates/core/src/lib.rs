//! Unbalanced optimal transport regularized by the maximum mean discrepancy.

pub mod barycenter;
pub mod class_ratio;
pub mod datasets;
pub mod discrepancy;
pub mod error;
pub mod exact;
pub mod kernels;
pub mod kl_uot;
pub mod measures;
pub mod optim;
pub mod uot;

pub use error::{Error, Result};
pub use measures::{marginals, ConstraintMode, DiscreteMeasure, Marginals, TransportPlan};
