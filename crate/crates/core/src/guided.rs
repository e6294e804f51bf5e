//! Phrase-index label construction and the guided-attention losses.
//!
//! Attention score matrices are treated as per-row likelihood distributions
//! over bias-list entries, with column 0 (`<no_bias>`) playing the role of
//! the CTC blank.

use std::io::{self, Write};

use thiserror::Error;

use crate::bias_list::BiasList;
use crate::losses::{ctc_loss, CtcLattice, LossError};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum GuidedError {
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("alignment inconsistent with the token sequence at frame {frame}")]
    InconsistentAlignment { frame: usize },
    #[error("{labels} token labels for {tokens} tokens")]
    LengthMismatch { tokens: usize, labels: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-token phrase indices by greedy left-to-right longest match. Matched
/// spans carry the phrase index, everything else carries 0; equal-length
/// candidates resolve to the lowest phrase index.
pub fn build_text_labels(tokens: &[usize], bias: &BiasList) -> Vec<usize> {
    let mut labels = vec![0usize; tokens.len()];
    let mut i = 0;
    while i < tokens.len() {
        let mut best: Option<(usize, usize)> = None; // (length, phrase index)
        for s in 1..bias.len() {
            let p = bias.phrase(s);
            if p.len() > best.map_or(0, |(l, _)| l)
                && tokens[i..].starts_with(p)
            {
                best = Some((p.len(), s));
            }
        }
        match best {
            Some((len, s)) => {
                labels[i..i + len].fill(s);
                i += len;
            }
            None => i += 1,
        }
    }
    labels
}

/// CTC label sequence for the attention matrices: `<no_bias>` entries are
/// dropped and each remaining run of one phrase index, even when interrupted
/// only by `<no_bias>`, contributes a single label.
pub fn build_ctc_labels(c_dec: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &c in c_dec {
        if c != 0 && out.last() != Some(&c) {
            out.push(c);
        }
    }
    out
}

/// Per-frame phrase indices from a frame-level token alignment: each frame
/// inherits the phrase index of the token occurrence it belongs to, blank
/// frames get 0. The alignment must collapse to exactly `tokens`.
pub fn build_frame_labels(
    alignment: &[usize],
    tokens: &[usize],
    c_dec: &[usize],
) -> Result<Vec<usize>, GuidedError> {
    if tokens.len() != c_dec.len() {
        return Err(GuidedError::LengthMismatch {
            tokens: tokens.len(),
            labels: c_dec.len(),
        });
    }
    let mut out = Vec::with_capacity(alignment.len());
    let mut pos: Option<usize> = None;
    let mut prev = 0usize;
    for (frame, &a) in alignment.iter().enumerate() {
        if a == 0 {
            out.push(0);
        } else {
            if a != prev {
                let next = pos.map_or(0, |p| p + 1);
                if next >= tokens.len() || tokens[next] != a {
                    return Err(GuidedError::InconsistentAlignment { frame });
                }
                pos = Some(next);
            }
            out.push(c_dec[pos.expect("set on first nonblank frame")]);
        }
        prev = a;
    }
    if pos.map_or(0, |p| p + 1) != tokens.len() {
        return Err(GuidedError::InconsistentAlignment {
            frame: alignment.len(),
        });
    }
    Ok(out)
}

/// Mean per-row negative log-likelihood of the labeled column, summed over
/// the audio and text attention matrices.
pub fn ga_ce_loss(
    tape: &mut Tape,
    a_enc: TensorId,
    c_enc: &[usize],
    a_dec: TensorId,
    c_dec: &[usize],
) -> Result<TensorId, GuidedError> {
    let enc = tape.nll_rows_mean(a_enc, c_enc)?;
    let dec = tape.nll_rows_mean(a_dec, c_dec)?;
    Ok(tape.add(enc, dec)?)
}

/// CTC over both attention matrices with column 0 as the blank and the same
/// label sequence for each, summed.
pub fn ga_ctc_loss(
    tape: &mut Tape,
    a_enc: TensorId,
    a_dec: TensorId,
    c_ctc: &[usize],
) -> Result<TensorId, GuidedError> {
    let term = |tape: &mut Tape, a: TensorId| -> Result<TensorId, GuidedError> {
        let log_a = tape.log_clamped(a)?;
        let lattice = CtcLattice::new(tape, log_a, c_ctc)?;
        Ok(ctc_loss(tape, &lattice)?)
    };
    let enc = term(tape, a_enc)?;
    let dec = term(tape, a_dec)?;
    Ok(tape.add(enc, dec)?)
}

/// `alpha * l_ga + (1 - alpha) * l_transducer`.
pub fn combined_objective(
    tape: &mut Tape,
    l_transducer: TensorId,
    l_ga: TensorId,
    alpha: f64,
) -> Result<TensorId, GuidedError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GuidedError::AlphaOutOfRange(alpha));
    }
    let ga = tape.scale(l_ga, alpha);
    let trans = tape.scale(l_transducer, 1.0 - alpha);
    Ok(tape.add(ga, trans)?)
}

/// One line per utterance: c_dec, c_ctc, c_enc as space-separated integers
/// in three tab-separated fields.
pub fn write_label_dump<'a, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a [usize], &'a [usize], &'a [usize])>,
) -> io::Result<()> {
    let join = |xs: &[usize]| {
        xs.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    for (c_dec, c_ctc, c_enc) in entries {
        writeln!(w, "{}\t{}\t{}", join(c_dec), join(c_ctc), join(c_enc))?;
    }
    Ok(())
}
