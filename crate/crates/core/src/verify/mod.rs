//! Independent reference routines used by the self-test and the acceptance
//! suite: finite-difference gradient checks and a classical multi-scale
//! vesselness filter that shares no code with the trainable network.

pub mod classical;
pub mod gradcheck;

pub use classical::{classical_frangi, classical_hessian, classical_vesselness};
pub use gradcheck::{grad_check, random_array, weighted_sum, CheckMode, GradReport, FD_STEP};
pub mod suite;

pub use suite::{check_op, op_gradient_suite, oracle_max_diff, OpCheck, OPS, OP_TOLERANCE};
