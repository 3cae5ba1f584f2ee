#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bank;
pub mod error;
pub mod linalg;
pub mod projector;
pub mod stats;
pub mod store;
pub mod templates;
pub mod head;
pub mod vocab;
pub mod dataset;
pub mod eval;
pub mod train;
pub mod synth;
pub mod pipeline;
pub mod cli;
