//! Black-box approximation and gradient-free optimization of multivariate
//! functions in the hierarchical Tucker (HT) tensor format.
//!
//! A function discretized on a per-mode grid is treated as a `d`-way tensor
//! that is never materialized. Index values on every link of a binary
//! dimension tree are refined by a visit-count-guided walk; each edge
//! crossing rebuilds a small matrix of tensor entries and reselects its
//! quasi-maximum-volume rows. From the final index values an evaluable
//! low-rank surrogate is assembled (`ht_cross`), or the best value seen is
//! reported (`ht_opt`).
//!
//! Modules:
//! - [`tree`]: dimension tree topology, cores, entry evaluation.
//! - [`linalg`]: pivoted QR, matrix volume, square/rectangular maxvol.
//! - [`state`]: per-link index sets/values and the index update step.
//! - [`transform`]: point-wise value transforms used for optimization.
//! - [`sweep`]: the tree walk, `ht_cross` and `ht_opt` entry points.
//! - [`build`]: core construction from final index values.
//! - [`bench`]: benchmark functions, Chebyshev grids, the budgeted oracle.

pub mod bench;
pub mod build;
pub mod linalg;
pub mod state;
pub mod sweep;
pub mod transform;
pub mod tree;

pub use bench::{Benchmark, Grid, Oracle};
pub use sweep::{ht_cross, ht_opt, BudgetPolicy, Direction, RunReport, SweepConfig};
pub use tree::{build_balanced_tree, Core, HtModel, TreeTopology};
