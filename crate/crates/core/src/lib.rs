pub mod approximation;
pub mod coefficient;
pub mod error;
pub mod expr;
pub mod hho_mono;
pub mod harness;
pub mod homogenization;
pub mod local_solver;
pub mod mesh;
pub mod mshho;
pub mod oscillatory_basis;
pub mod quadrature;
pub mod util;

pub use error::{Error, Result};
