//! Adaptive modal fusion distillation at desk scale.
//!
//! The student's single fused feature imitates the teacher's RGB and thermal
//! features separately through two modal extraction alignment (MEA) losses,
//! each combining a global-context term with mask- and attention-weighted
//! focal terms.

pub mod attention;
pub mod boxes;
pub mod checks;
pub mod error;
pub mod fusion;
pub mod mea;
pub mod metrics;
pub mod tensor;
pub mod toynet;

pub use error::{Error, Result};
