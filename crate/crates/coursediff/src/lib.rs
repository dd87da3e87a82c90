//! Course difficulty and student performance estimation from grade matrices.

pub mod assumption_checks;
pub mod config;
pub mod correlation;
pub mod dcf;
pub mod dimensionality;
pub mod error;
pub mod grade_data;
pub mod imputation;
pub mod latent_models;
pub mod missingness;
pub mod pipeline;
pub mod simulation;
pub mod stats;

pub use error::{Error, Result};
