//! The exact symbolic kernel: variable contexts, multivariate polynomials,
//! normalized rational functions and closed-form solution expressions.

pub mod vars;
pub mod poly;
pub mod scalar;
pub mod solution;
pub mod linalg;

pub use scalar::Scalar;
pub use solution::{CharVar, SolutionExpr};
pub use vars::VarSpec;
