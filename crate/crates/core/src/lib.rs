//! Moving-horizon parameter estimation coupled with an observability-seeking
//! one-step MPC, and a bearing-only landmark localization simulator.

// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod controller;
pub mod estimator;
pub mod grammian;
pub mod model;
pub mod simulation;
