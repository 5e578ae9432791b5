//! Conditional randomization tests for experiments with interference,
//! post-randomized conditioning, and quasi-randomization procedures.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod applications;
pub mod assignment;
pub mod conditioning;
pub mod engine;
pub mod error;
pub mod exec;
pub mod hypothesis;
pub mod inference;
pub mod statistics;
pub mod stepped_wedge;
