//! Toy transducer with contextual-biasing adapters.
//!
//! The base model is a per-frame feedforward encoder, an LSTM prediction
//! network, and a tanh joint. Biasing adds a shared catalog encoder that
//! embeds each bias phrase, plus one cross-attention adapter per stream
//! (audio onto encoder frames, text onto predictor states) whose output is
//! added element-wise to the stream it biases.

mod attention;
mod catalog;
mod decode;
mod lstm;
mod model;

pub use attention::{biasing_attention, fuse, AttentionScores};
pub use catalog::encode_catalog;
pub use decode::greedy_decode;
pub use model::{BiasedForward, Bound, Model, ModelConfig, TrainScope};
