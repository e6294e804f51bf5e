//! Lattice losses for sequence transduction.
//!
//! Both losses come in two independent implementations: a dynamic-programming
//! recursion (the one used for training, with analytic gradients) and a
//! brute-force path enumeration kept deliberately naive. Tests hold the two
//! within 1e-9 of each other on every random instance they can afford.

mod ctc;
mod transducer;

pub use ctc::{
    collapse, ctc_brute_force, ctc_forced_align, ctc_loss, path_log_prob, write_alignment_dump,
    CtcLattice,
};
pub use transducer::{transducer_brute_force, transducer_loss, TransducerLattice};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("no valid alignment: {rows} frames cannot carry {required} mandatory emissions")]
    Infeasible { rows: usize, required: usize },
    #[error("enumeration too large: {paths} paths exceed the {limit} guard")]
    TooLarge { paths: u128, limit: u128 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("labels must not contain the blank index 0")]
    BlankInLabels,
    #[error("lattice expected shape {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    LatticeShape {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("lattice contains non-finite log-probabilities")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ceiling on brute-force enumeration size.
pub(crate) const ENUM_LIMIT: u128 = 1_000_000;

/// How far a row's `logsumexp` may drift from 0 before the lattice
/// constructors renormalize the whole matrix on the tape.
pub(crate) const ROW_NORM_TOL: f64 = 1e-9;
