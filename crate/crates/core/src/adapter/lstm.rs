//! Single-cell LSTM built from tape primitives.

use crate::tensor::{Tape, TensorError, TensorId};

/// Gate weights for one direction: `wx` is `[I x 4H]`, `wh` is `[H x 4H]`,
/// `b` is `[1 x 4H]`, with gate order input, forget, cell, output.
pub(super) struct LstmWeights {
    pub wx: TensorId,
    pub wh: TensorId,
    pub b: TensorId,
    pub hidden: usize,
}

pub(super) fn lstm_step(
    tape: &mut Tape,
    w: &LstmWeights,
    x: TensorId,
    h: TensorId,
    c: TensorId,
) -> Result<(TensorId, TensorId), TensorError> {
    let hid = w.hidden;
    let gx = tape.matmul(x, w.wx)?;
    let gh = tape.matmul(h, w.wh)?;
    let pre = tape.add(gx, gh)?;
    let gates = tape.add(pre, w.b)?;
    let i_pre = tape.slice_cols(gates, 0, hid)?;
    let f_pre = tape.slice_cols(gates, hid, hid)?;
    let g_pre = tape.slice_cols(gates, 2 * hid, hid)?;
    let o_pre = tape.slice_cols(gates, 3 * hid, hid)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}

/// Runs the cell over `inputs` from zero state, returning every hidden state.
pub(super) fn lstm_run(
    tape: &mut Tape,
    w: &LstmWeights,
    inputs: &[TensorId],
) -> Result<Vec<TensorId>, TensorError> {
    let mut h = tape.zeros(1, w.hidden, false);
    let mut c = tape.zeros(1, w.hidden, false);
    let mut states = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let (h2, c2) = lstm_step(tape, w, x, h, c)?;
        h = h2;
        c = c2;
        states.push(h);
    }
    Ok(states)
}
