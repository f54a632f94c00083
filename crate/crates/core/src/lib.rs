//! Graph-transformer predictor for properties (accuracy, latency) of neural
//! architectures described as operation DAGs.
//!
//! The predictor stacks blocks of sibling-aware masked attention, where four
//! heads attend over forward edges, backward edges, nodes sharing a parent
//! and nodes sharing a child, followed by a feed-forward layer that mixes in
//! forward and backward graph aggregations.

pub mod autodiff;
pub mod dag;
pub mod encoding;
pub mod metrics;
pub mod wl;
pub mod model;
pub mod seed;
pub mod train;
pub mod datasets;
