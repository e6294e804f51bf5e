//! Contextual biasing for a toy neural transducer, built from scratch.
//!
//! The crate provides a small reverse-mode autodiff engine ([`tensor`]),
//! lattice losses with brute-force verification oracles ([`losses`]),
//! catalog-attention biasing adapters ([`adapter`]), attention supervision
//! losses and their label builders ([`guided`]), bias-list construction
//! ([`bias_list`]), word-error scoring split by bias membership ([`metrics`]),
//! and a synthetic-corpus experiment harness ([`harness`]).

pub mod adapter;
pub mod bias_list;
pub mod checkpoint;
pub mod gradcheck;
pub mod guided;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod num;
pub mod params;
pub mod tensor;
pub mod vocab;
