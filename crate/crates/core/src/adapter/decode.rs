//! Greedy transducer decoding, with or without a bias list.

use super::attention::{biasing_attention, fuse};
use super::lstm::lstm_step;
use super::model::{Model, TrainScope};
use crate::bias_list::BiasList;
use crate::tensor::{Tape, TensorError, TensorId};

/// Greedy best-path decode: at each frame, emit the argmax symbol and
/// advance the predictor until blank wins or `max_symbols_per_frame`
/// emissions have been made, then move to the next frame. Uses the exact
/// forward kernels of training, so biased decoding sees the same biasing
/// vectors the adapters were trained with.
pub fn greedy_decode(
    model: &Model,
    features: &[f64],
    t_len: usize,
    bias: Option<&BiasList>,
) -> Result<Vec<usize>, TensorError> {
    let tape = &mut Tape::new();
    let bound = model.bind(tape, TrainScope::Frozen);
    let cfg = &model.cfg;

    let p = match bias {
        Some(list) => Some(model.catalog(tape, &bound, list)?),
        None => None,
    };

    let mut enc = model.encoder_forward(tape, &bound, features, t_len)?;
    if let Some(p) = p {
        let (_, b_enc) = biasing_attention(tape, cfg, &bound, "adapter.audio", enc, p)?;
        enc = fuse(tape, enc, b_enc)?;
    }

    let weights = model.predictor_weights(&bound);
    let embed = bound.id("base.pred.embed");
    let we = bound.id("base.joint.we");
    let wd = bound.id("base.joint.wd");
    let jb = bound.id("base.joint.b");
    let wo = bound.id("base.joint.wo");
    let bo = bound.id("base.joint.bo");

    // Predictor state after consuming start-of-sequence.
    let sos = tape.row(embed, 0)?;
    let zero_h = tape.zeros(1, cfg.embed_dim, false);
    let zero_c = tape.zeros(1, cfg.embed_dim, false);
    let (mut h, mut c) = lstm_step(tape, &weights, sos, zero_h, zero_c)?;

    // The joint consumes the text-biased predictor state; recomputed only
    // when the predictor advances.
    let mut dec_repr = biased_state(tape, model, &bound, h, p)?;
    let mut dec_proj = project_dec(tape, dec_repr, wd, jb)?;

    let mut hypothesis = Vec::new();
    for t in 0..t_len {
        let e_row = tape.row(enc, t)?;
        let e_proj = tape.matmul(e_row, we)?;
        let mut emitted = 0;
        loop {
            let z = tape.add(e_proj, dec_proj)?;
            let z = tape.tanh(z);
            let logits = tape.matmul(z, wo)?;
            let logits = tape.add(logits, bo)?;
            let best = argmax(tape.value(logits));
            if best == 0 || emitted == cfg.max_symbols_per_frame {
                break;
            }
            hypothesis.push(best);
            emitted += 1;
            let x = tape.row(embed, best)?;
            let (nh, nc) = lstm_step(tape, &weights, x, h, c)?;
            h = nh;
            c = nc;
            dec_repr = biased_state(tape, model, &bound, h, p)?;
            dec_proj = project_dec(tape, dec_repr, wd, jb)?;
        }
    }
    Ok(hypothesis)
}

fn biased_state(
    tape: &mut Tape,
    model: &Model,
    bound: &super::model::Bound,
    h: TensorId,
    p: Option<TensorId>,
) -> Result<TensorId, TensorError> {
    match p {
        Some(p) => {
            let (_, b) = biasing_attention(tape, &model.cfg, bound, "adapter.text", h, p)?;
            fuse(tape, h, b)
        }
        None => Ok(h),
    }
}

fn project_dec(
    tape: &mut Tape,
    dec: TensorId,
    wd: TensorId,
    jb: TensorId,
) -> Result<TensorId, TensorError> {
    let d = tape.matmul(dec, wd)?;
    tape.add(d, jb)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
