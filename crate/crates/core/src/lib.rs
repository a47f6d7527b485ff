//! Revenue-maximizing dynamic mechanism for selling a fixed stock of a
//! perfectly divisible good to buyers who arrive at random over a finite
//! horizon and privately hold a (marginal value, demanded quantity) type.
//!
//! The crate is organised bottom-up:
//!
//! * [`market`]: buyer types, distributions, virtual valuations and regularity.
//! * [`allocation`]: the within-period greedy allocation by virtual value and its revenue.
//! * [`chebyshev`] / [`value_approx`]: Chebyshev regression of the value-to-go
//!   (Monte-Carlo backward induction) and a tabulated dynamic-programming oracle.
//! * [`sell_policy`]: marginal value and the threshold sell quantity.
//! * [`mechanism`]: allocation, payments, the quantity-overbid penalty and interim estimators.
//! * [`ddpg`]: an actor-critic learner for the sell quantity built on a small MLP.
//! * [`audit`]: statistical incentive-compatibility and rationality audits.
//! * [`harness`]: episodes, the full-information benchmark, experiment tables and CSV output.
//!
//! Monte-Carlo loops run on rayon when the `parallel` feature is enabled (default) and
//! sequentially otherwise; every random draw comes from an index-addressed stream so both
//! builds produce bit-identical results.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod audit;
pub mod chebyshev;
pub mod config;
pub mod ddpg;
mod error;
pub mod exec;
pub mod harness;
pub mod market;
pub mod mechanism;
pub mod rng;
pub mod sell_policy;
pub mod value_approx;

pub use error::{Error, Result};
