//! Catalog encoder: one fixed-size embedding per bias phrase.

use super::lstm::{lstm_run, LstmWeights};
use super::model::{Bound, ModelConfig};
use crate::bias_list::BiasList;
use crate::tensor::{Tape, TensorError, TensorId};

/// Encodes every phrase with a shared BiLSTM: the forward and backward last
/// hidden states are concatenated and projected to the embed width. Row 0 is
/// the learned `<no_bias>` embedding, not an encoded phrase.
pub fn encode_catalog(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    bias: &BiasList,
) -> Result<TensorId, TensorError> {
    let embed = bound.id("adapter.catalog.embed");
    let weights = |dir: &str| LstmWeights {
        wx: bound.id(&format!("adapter.catalog.{dir}.wx")),
        wh: bound.id(&format!("adapter.catalog.{dir}.wh")),
        b: bound.id(&format!("adapter.catalog.{dir}.b")),
        hidden: cfg.catalog_hidden,
    };
    let fwd = weights("fwd");
    let bwd = weights("bwd");
    let proj = bound.id("adapter.catalog.proj");
    let proj_b = bound.id("adapter.catalog.proj_b");

    let mut rows = Vec::with_capacity(bias.len());
    rows.push(bound.id("adapter.catalog.no_bias"));
    for s in 1..bias.len() {
        let tokens = bias.phrase(s);
        let mut inputs = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            inputs.push(tape.row(embed, tok)?);
        }
        let f_states = lstm_run(tape, &fwd, &inputs)?;
        inputs.reverse();
        let b_states = lstm_run(tape, &bwd, &inputs)?;
        let last_f = *f_states.last().expect("phrases are nonempty");
        let last_b = *b_states.last().expect("phrases are nonempty");
        let both = tape.concat_cols(last_f, last_b)?;
        let projected = tape.matmul(both, proj)?;
        rows.push(tape.add(projected, proj_b)?);
    }
    tape.stack_rows(&rows)
}
