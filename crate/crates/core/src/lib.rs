//! Symbolic factorization and integration of strictly hyperbolic linear PDEs
//! and first-order linear systems in two independent variables.
//!
//! The library works over an exact coefficient field: multivariate rational
//! functions of the two independent variables and a set of named parameters,
//! with arbitrary-precision rational coefficients.  On top of that kernel it
//! provides
//!
//! * an algebra of linear partial differential operators ([`lpdo`]),
//! * conversions between scalar equations, first-order systems and systems in
//!   characteristic form ([`charform`]),
//! * the classical Laplace cascade for 2×2 characteristic systems
//!   ([`cascade`]),
//! * generalized Laplace transformations for n×n characteristic systems
//!   ([`genlaplace`]),
//! * a driver that searches for block-triangular factorizations and
//!   integrates them in closed form ([`solver`]),
//! * exact and numeric verification of the produced solutions ([`verify`]),
//! * a small input DSL and a machine-readable report ([`dsl`], [`report`]).

pub mod expr;
pub mod lpdo;
pub mod charform;
pub mod cascade;
pub mod genlaplace;
pub mod solver;
pub mod verify;
pub mod dsl;
pub mod report;
pub mod fixtures;

pub use expr::scalar::Scalar;
pub use expr::solution::{CharVar, SolutionExpr};
pub use expr::vars::VarSpec;
pub use lpdo::{CharOperator, Lpdo};
pub use charform::{CharSystem, SubstitutionRecord};
