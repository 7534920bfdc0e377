//! Semilinear equations `-A u = f(x, u) + mu` on finite state spaces carrying a
//! Dirichlet form, with signed measure data.
//!
//! The crate covers form assembly from local and jump operators, capacities,
//! monotone solvers between sub- and supersolutions, reduced measures obtained
//! by truncation, and refinement studies built on top of them.

// Guards are written `!(x > 0.0)` so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capacity;
pub mod error;
pub mod form;
pub mod green;
pub mod measure;
pub mod nonlinearity;
pub mod operator;
mod quad;
pub mod reduction;
pub mod scenario;
pub mod sampling;
pub mod solver;
pub mod space;
pub mod study;
pub mod suite;

pub use error::{CapacityError, FormError, MeasureError, NonlinearityError, SolveError};
pub use form::{assemble, FormMatrix};
pub use green::{Discretization, GreenOperator, WeightPair, WeightSource};
pub use measure::{DiscreteMeasure, Tag};
pub use nonlinearity::Nonlinearity;
pub use operator::OperatorSpec;
pub use space::{build_space, GridSpec, StateSpace};
