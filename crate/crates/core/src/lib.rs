//! Monte-Carlo solvers for semilinear pseudo-PDEs
//!
//! ```text
//! a(u) + f(t, x, u, sqrt(Gamma(u, u))) = 0,   u(T, .) = g
//! ```
//!
//! where `a` is the generator of a Markov process that need not be a
//! differential operator. The solution pair `(u, v)` is computed from the
//! two coupled semigroup equations
//!
//! ```text
//! u(s,x)   = P_{s,T}[g](x)   + int_s^T P_{s,r}[f(r, ., u, v)](x) dV_r
//! u^2(s,x) = P_{s,T}[g^2](x) - int_s^T P_{s,r}[v^2 - 2 u f](x) dV_r
//! ```
//!
//! by Picard iteration over a frozen Monte-Carlo path cache ([`mild`]), and
//! cross-checked against a backward least-squares Monte-Carlo solver of the
//! associated forward-backward SDE ([`fbsde`]). [`operators`] provides carré
//! du champ operators and statistical martingale-problem tests.

pub mod error;
pub mod expr;
pub mod fbsde;
pub mod field;
pub mod grid;
pub mod mild;
pub mod operators;
pub mod problem;
pub mod processes;
pub mod quad;
pub mod rng;
pub mod semigroup;
pub mod stats;

pub use error::{Error, Result};
pub use expr::Expression;
pub use field::{field_distance, ScalarField};
pub use grid::{v_increments, ClockV, SpaceTimeGrid};
pub use problem::{Function, LipschitzDriver, ProblemSpec};
pub use processes::{simulate, GeneratorSpec, PathEnsemble};
