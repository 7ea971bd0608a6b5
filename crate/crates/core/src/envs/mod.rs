//! Benchmark environments: a reduced-rank POMDP and a geometric Brownian
//! motion market for an optimal-stopping contract.

pub mod analytic;
pub mod market;
pub mod pomdp;

pub use market::{canonical_basis, extended_basis, payoff, simulate_gbm, MarketState};
pub use pomdp::{history_true_value, rr_pomdp_spec, simulate_pomdp, true_value, PomdpSpec};
