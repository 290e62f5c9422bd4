//! Single-process simulator for decentralized bilevel optimization with
//! normalized, variance-reduced gradient descent ascent (D-NSVRGDA).
//!
//! A set of `K` workers, connected by an undirected communication graph,
//! jointly minimizes an upper-level loss subject to a lower-level problem
//! that is only required to satisfy a PL condition. The lower-level
//! optimality constraint is replaced by a penalty/minimax reformulation with
//! an auxiliary ascent variable, so only first-order gradients are needed.
//! Workers run STORM-style recursive gradient estimators, combine them per
//! variable, exchange them through gradient tracking over a doubly
//! stochastic mixing matrix, and move by exactly one step length along the
//! normalized tracked direction (the unnormalized variant, D-SVRGDA, is kept
//! as an ablation).
//!
//! Module map:
//! - [`graph`]: topologies, Metropolis mixing weights, spectral gaps, gossip.
//! - [`noise`]: heavy-tailed samplers and moment diagnostics.
//! - [`data`]: synthetic generators, LIBSVM ingestion, sharding, caching.
//! - [`problem`]: the bilevel problem interface plus a closed-form quadratic
//!   oracle and a two-layer-network hyperparameter-optimization instance.
//! - [`optim`]: the optimizer itself and the theory-derived schedules.
//! - [`diag`]: consensus/gradient-error/surrogate diagnostics and CSV output.
//! - [`oracle`]: independent verification machinery used by tests.
//! - [`plot`]: standalone SVG line charts for run outputs.

pub mod data;
pub mod diag;
pub mod graph;
pub mod linalg;
pub mod noise;
pub mod optim;
pub mod oracle;
pub mod plot;
pub mod problem;
pub mod rng;
