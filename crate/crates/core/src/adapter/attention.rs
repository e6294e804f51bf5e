//! Multi-head cross-attention from model states onto the phrase catalog.

use super::model::{Bound, ModelConfig};
use crate::tensor::{Tape, TensorError, TensorId};

/// Attention probabilities produced by one biasing pass.
pub struct AttentionScores {
    /// Head-averaged probabilities, rows = attending states, cols = catalog entries.
    pub avg: TensorId,
    /// Per-head probabilities in head order.
    pub heads: Vec<TensorId>,
}

/// Attends `h` (rows of model states) onto the catalog `p` (rows of phrase
/// embeddings) with the parameter group named by `prefix` ("adapter.audio"
/// or "adapter.text"). Returns the attention scores and the biasing vectors,
/// one row per state.
pub fn biasing_attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    prefix: &str,
    h: TensorId,
    p: TensorId,
) -> Result<(AttentionScores, TensorId), TensorError> {
    let head_dim = cfg.embed_dim / cfg.n_heads;
    let temp = (head_dim as f64).sqrt();

    let w_in = bound.id(&format!("{prefix}.w_in"));
    let hq = tape.matmul(h, w_in)?;

    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut contexts = Vec::with_capacity(cfg.n_heads);
    for i in 0..cfg.n_heads {
        let wq = bound.id(&format!("{prefix}.h{i}.wq"));
        let wk = bound.id(&format!("{prefix}.h{i}.wk"));
        let wv = bound.id(&format!("{prefix}.h{i}.wv"));
        let q = tape.matmul(hq, wq)?;
        let k = tape.matmul(p, wk)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let a = tape.softmax_rows(scores, temp)?;
        let v = tape.matmul(p, wv)?;
        contexts.push(tape.matmul(a, v)?);
        heads.push(a);
    }

    let mut joined = contexts[0];
    for &ctx in &contexts[1..] {
        joined = tape.concat_cols(joined, ctx)?;
    }
    let w_out = bound.id(&format!("{prefix}.w_out"));
    let b = tape.matmul(joined, w_out)?;

    let mut sum = heads[0];
    for &a in &heads[1..] {
        sum = tape.add(sum, a)?;
    }
    let avg = tape.scale(sum, 1.0 / cfg.n_heads as f64);

    Ok((AttentionScores { avg, heads }, b))
}

/// Injects the biasing vectors into the model states.
pub fn fuse(tape: &mut Tape, h: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
    tape.add(h, b)
}
