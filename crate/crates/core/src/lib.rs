//! Deterministic conditional mean imputation for longitudinal trials.
//!
//! The pipeline masks post-ICE data for the imputation model, fits an MMRM by
//! REML, imputes missing outcomes by their conditional mean under MAR or a
//! reference-based assumption (CR, J2R, CIR), estimates the treatment effect
//! by ANCOVA, and derives standard errors by jackknife or bootstrap.

pub mod analysis;
pub mod dataset;
pub mod impute;
pub mod inference;
pub(crate) mod linalg;
pub mod mmrm;
pub mod simgen;
