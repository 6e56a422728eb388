//! Temporal contrastive self-supervised learning for multivariate time series.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod eval;
pub mod features;
pub mod models;
pub mod nn;
pub mod sampling;
pub mod signal;
pub mod training;
