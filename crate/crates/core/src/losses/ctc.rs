//! CTC negative log-likelihood, its enumeration oracle, and forced alignment.
//!
//! Class 0 is the blank. A frame sequence maps to a label sequence by merging
//! adjacent duplicates and then dropping blanks, so `[1,0,1]` reads as `[1,1]`
//! while `[1,1]` reads as `[1]`.

use std::io::{self, Write};

use super::{LossError, ENUM_LIMIT, ROW_NORM_TOL};
use crate::num::{log_add_exp, log_sum_exp, LOG_ZERO};
use crate::tensor::{Tape, TensorId};

/// Frame-level log-probabilities `[T x K]` paired with a target labeling.
///
/// Rows must be log-distributions: `logsumexp(row) == 0` within 1e-9. Rows
/// drifting beyond that are renormalized on the tape at construction, so the
/// loss always sees a proper distribution.
#[derive(Debug, Clone)]
pub struct CtcLattice {
    pub log_probs: TensorId,
    pub labels: Vec<usize>,
    frames: usize,
    classes: usize,
}

impl CtcLattice {
    pub fn new(
        tape: &mut Tape,
        log_probs: TensorId,
        labels: &[usize],
    ) -> Result<Self, LossError> {
        let (frames, classes) = tape.shape(log_probs);
        if frames == 0 || classes < 1 {
            return Err(LossError::LatticeShape {
                expected_rows: 1,
                expected_cols: 1,
                rows: frames,
                cols: classes,
            });
        }
        for &l in labels {
            if l == 0 {
                return Err(LossError::BlankInLabels);
            }
            if l >= classes {
                return Err(LossError::LabelOutOfRange {
                    label: l,
                    classes,
                });
            }
        }
        let log_probs = normalize_rows(tape, log_probs)?;
        Ok(Self {
            log_probs,
            labels: labels.to_vec(),
            frames,
            classes,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Minimum frame count that admits any valid path: one per label plus one
    /// separating blank per adjacent duplicate pair.
    pub fn required_frames(&self) -> usize {
        let dups = self
            .labels
            .windows(2)
            .filter(|w| w[0] == w[1])
            .count();
        self.labels.len() + dups
    }
}

/// Validates finiteness and row normalization; renormalizes on drift.
pub(super) fn normalize_rows(
    tape: &mut Tape,
    log_probs: TensorId,
) -> Result<TensorId, LossError> {
    let (rows, cols) = tape.shape(log_probs);
    let data = tape.value(log_probs);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    let mut drifted = false;
    for r in 0..rows {
        let lse = log_sum_exp(&data[r * cols..(r + 1) * cols]);
        if lse.abs() > ROW_NORM_TOL {
            drifted = true;
            break;
        }
    }
    if drifted {
        Ok(tape.log_softmax_rows(log_probs)?)
    } else {
        Ok(log_probs)
    }
}

/// Merges adjacent duplicates, then removes blanks.
pub fn collapse(seq: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in seq {
        if Some(s) != prev && s != 0 {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Extended label sequence with blanks interleaved: `[0, l1, 0, l2, ..., 0]`.
fn extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(0);
    for &l in labels {
        ext.push(l);
        ext.push(0);
    }
    ext
}

/// `-ln P(labels | log_probs)` by the forward recursion over the extended
/// label sequence. The gradient with respect to the log-probabilities is
/// derived from the forward/backward occupancies and recorded on the tape.
pub fn ctc_loss(tape: &mut Tape, lattice: &CtcLattice) -> Result<TensorId, LossError> {
    let required = lattice.required_frames();
    if lattice.frames < required {
        return Err(LossError::Infeasible {
            rows: lattice.frames,
            required,
        });
    }
    let (loss, grad) = ctc_dp(
        tape.value(lattice.log_probs),
        lattice.frames,
        lattice.classes,
        &lattice.labels,
    );
    if !loss.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(tape.loss_with_grad(lattice.log_probs, loss, grad))
}

fn ctc_dp(lp: &[f64], t_len: usize, k: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let ext = extended(labels);
    let s_len = ext.len();
    let at = |t: usize, c: usize| lp[t * k + c];
    // Skip transition s-2 -> s is legal only onto a label differing from the
    // one two states back (blanks can never be skipped into).
    let skip_ok = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if skip_ok(s) {
                acc = log_add_exp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + at(t, ext[s]);
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add_exp(log_p, alpha[last + s_len - 2]);
    }

    let mut beta = vec![LOG_ZERO; t_len * s_len];
    beta[last + s_len - 1] = at(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = at(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add_exp(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add_exp(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = acc + at(t, ext[s]);
        }
    }

    // d(-ln P)/d lp(t,c) = -exp(lse_{s: ext[s]=c}(alpha+beta) - lp(t,c) - ln P).
    // Alpha and beta both include the emission at t, hence the lp subtraction.
    let mut grad = vec![0.0; t_len * k];
    let mut occupancy = vec![LOG_ZERO; k];
    for t in 0..t_len {
        occupancy.fill(LOG_ZERO);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s];
            let bb = beta[t * s_len + s];
            if ab > LOG_ZERO && bb > LOG_ZERO {
                occupancy[ext[s]] = log_add_exp(occupancy[ext[s]], ab + bb);
            }
        }
        for c in 0..k {
            if occupancy[c] > LOG_ZERO {
                grad[t * k + c] = -(occupancy[c] - at(t, c) - log_p).exp();
            }
        }
    }
    (-log_p, grad)
}

/// Enumerates every length-T class sequence and sums the probability of those
/// collapsing to the target labels. Guarded to `K^T <=` [`ENUM_LIMIT`].
pub fn ctc_brute_force(tape: &Tape, lattice: &CtcLattice) -> Result<f64, LossError> {
    let t_len = lattice.frames;
    let k = lattice.classes;
    let paths = (k as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if paths > ENUM_LIMIT {
        return Err(LossError::TooLarge {
            paths,
            limit: ENUM_LIMIT,
        });
    }
    let lp = tape.value(lattice.log_probs);
    let mut seq = vec![0usize; t_len];
    let mut matching = Vec::new();
    loop {
        if collapse(&seq) == lattice.labels {
            let total: f64 = seq
                .iter()
                .enumerate()
                .map(|(t, &c)| lp[t * k + c])
                .sum();
            matching.push(total);
        }
        // Odometer increment over base-K sequences.
        let mut pos = t_len;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            seq[pos] += 1;
            if seq[pos] < k {
                break;
            }
            seq[pos] = 0;
        }
        if pos == 0 && seq[0] == 0 {
            break;
        }
    }
    if matching.is_empty() {
        return Err(LossError::Infeasible {
            rows: t_len,
            required: lattice.required_frames(),
        });
    }
    Ok(-log_sum_exp(&matching))
}

/// Maximum-probability frame labeling whose collapse equals the target.
///
/// Ties are broken deterministically toward blank: at the final frame the
/// trailing-blank state wins, and among equal-scoring predecessors a blank
/// state wins first, then the earlier label position, then staying put.
pub fn ctc_forced_align(tape: &Tape, lattice: &CtcLattice) -> Result<Vec<usize>, LossError> {
    let required = lattice.required_frames();
    let t_len = lattice.frames;
    if t_len < required {
        return Err(LossError::Infeasible {
            rows: t_len,
            required,
        });
    }
    let k = lattice.classes;
    let lp = tape.value(lattice.log_probs);
    let ext = extended(&lattice.labels);
    let s_len = ext.len();
    let at = |t: usize, c: usize| lp[t * k + c];
    let skip_ok = |s: usize| s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2];

    let mut score = vec![LOG_ZERO; t_len * s_len];
    let mut back = vec![0usize; t_len * s_len];
    score[0] = at(0, ext[0]);
    if s_len > 1 {
        score[1] = at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            // Candidate predecessors in tie-break preference order.
            let mut order: Vec<usize> = Vec::with_capacity(3);
            if ext[s] == 0 {
                order.push(s);
                if s >= 1 {
                    order.push(s - 1);
                }
            } else {
                order.push(s - 1); // the blank just below a label state
                if skip_ok(s) {
                    order.push(s - 2);
                }
                order.push(s);
            }
            let mut best = LOG_ZERO;
            let mut best_prev = s;
            for &p in &order {
                let cand = score[(t - 1) * s_len + p];
                if cand > best {
                    best = cand;
                    best_prev = p;
                }
            }
            score[t * s_len + s] = best + at(t, ext[s]);
            back[t * s_len + s] = best_prev;
        }
    }

    let last = (t_len - 1) * s_len;
    let mut state = s_len - 1;
    if s_len > 1 && score[last + s_len - 2] > score[last + s_len - 1] {
        state = s_len - 2;
    }
    let mut path = vec![0usize; t_len];
    for t in (0..t_len).rev() {
        path[t] = ext[state];
        if t > 0 {
            state = back[t * s_len + state];
        }
    }
    debug_assert_eq!(collapse(&path), lattice.labels);
    Ok(path)
}

/// Log-probability of one specific frame labeling under the lattice.
pub fn path_log_prob(tape: &Tape, lattice: &CtcLattice, path: &[usize]) -> f64 {
    let k = lattice.classes;
    let lp = tape.value(lattice.log_probs);
    path.iter()
        .enumerate()
        .map(|(t, &c)| lp[t * k + c])
        .sum()
}

/// Writes one line per utterance: the id followed by the per-frame indices.
pub fn write_alignment_dump<'a, W: Write>(
    mut w: W,
    entries: impl IntoIterator<Item = (&'a str, &'a [usize])>,
) -> io::Result<()> {
    for (id, frames) in entries {
        write!(w, "{id}")?;
        for f in frames {
            write!(w, " {f}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(
        tape: &mut Tape,
        rng: &mut ChaCha8Rng,
        t_len: usize,
        k: usize,
        labels: &[usize],
    ) -> CtcLattice {
        let logits: Vec<f64> = (0..t_len * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let raw = tape.leaf(logits, t_len, k, false).unwrap();
        let lp = tape.log_softmax_rows(raw).unwrap();
        CtcLattice::new(tape, lp, labels).unwrap()
    }

    fn uniform_lattice(tape: &mut Tape, t_len: usize, k: usize, labels: &[usize]) -> CtcLattice {
        let lp = vec![-(k as f64).ln(); t_len * k];
        let id = tape.leaf(lp, t_len, k, false).unwrap();
        CtcLattice::new(tape, id, labels).unwrap()
    }

    #[test]
    fn collapse_merges_then_drops_blanks() {
        assert_eq!(collapse(&[1, 1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse(&[1, 1, 2]), vec![1, 2]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
    }

    #[test]
    fn single_frame_uniform_loss_is_ln2() {
        let mut tape = Tape::new();
        let lat = uniform_lattice(&mut tape, 1, 2, &[1]);
        let loss = ctc_loss(&mut tape, &lat).unwrap();
        assert!((tape.value(loss)[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_labels_sum_blank_log_probs() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = random_lattice(&mut tape, &mut rng, 4, 3, &[]);
        let loss = ctc_loss(&mut tape, &lat).unwrap();
        let lp = tape.value(lat.log_probs);
        let expected: f64 = -(0..4).map(|t| lp[t * 3]).sum::<f64>();
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let mut tape = Tape::new();
        let lat = uniform_lattice(&mut tape, 2, 2, &[1, 1]);
        match ctc_loss(&mut tape, &lat) {
            Err(LossError::Infeasible { rows: 2, required: 3 }) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
        // The enumeration oracle agrees.
        match ctc_brute_force(&tape, &lat) {
            Err(LossError::Infeasible { .. }) => {}
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn uniform_three_frame_loss_matches_hand_enumeration() {
        // K=2, T=3, labels=[1]: 6 of the 8 equal-probability paths collapse
        // to [1], so the loss is -ln(6/8).
        let mut tape = Tape::new();
        let lat = uniform_lattice(&mut tape, 3, 2, &[1]);
        let expected = -(0.75f64).ln();
        let brute = ctc_brute_force(&tape, &lat).unwrap();
        assert!((brute - expected).abs() < 1e-12, "brute {brute}");
        let loss = ctc_loss(&mut tape, &lat).unwrap();
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn dp_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let t_len = rng.random_range(1..=6);
            let k = rng.random_range(2..=4);
            let n_labels = rng.random_range(0..=3);
            let labels: Vec<usize> =
                (0..n_labels).map(|_| rng.random_range(1..k)).collect();
            let mut tape = Tape::new();
            let lat = random_lattice(&mut tape, &mut rng, t_len, k, &labels);
            match (ctc_loss(&mut tape, &lat), ctc_brute_force(&tape, &lat)) {
                (Ok(loss), Ok(brute)) => {
                    let dp = tape.value(loss)[0];
                    assert!(
                        (dp - brute).abs() <= 1e-9,
                        "trial {trial}: dp {dp} vs brute {brute}"
                    );
                }
                (Err(LossError::Infeasible { .. }), Err(LossError::Infeasible { .. })) => {}
                (a, b) => panic!("trial {trial}: disagreement {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn loss_is_invariant_under_class_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let t_len = rng.random_range(2..=5);
            let k = 4;
            let labels: Vec<usize> = (0..rng.random_range(1..=2))
                .map(|_| rng.random_range(1..k))
                .collect();
            let mut tape = Tape::new();
            let lat = random_lattice(&mut tape, &mut rng, t_len, k, &labels);
            let base = match ctc_loss(&mut tape, &lat) {
                Ok(l) => tape.value(l)[0],
                Err(LossError::Infeasible { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            // Swap classes 1 and 3 everywhere (blank stays put).
            let perm = [0usize, 3, 2, 1];
            let lp = tape.value(lat.log_probs).to_vec();
            let mut permuted = lp.clone();
            for t in 0..t_len {
                for c in 0..k {
                    permuted[t * k + perm[c]] = lp[t * k + c];
                }
            }
            let mut tape2 = Tape::new();
            let id = tape2.leaf(permuted, t_len, k, false).unwrap();
            let mapped: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            let lat2 = CtcLattice::new(&mut tape2, id, &mapped).unwrap();
            let loss2 = ctc_loss(&mut tape2, &lat2).unwrap();
            assert!((tape2.value(loss2)[0] - base).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for seed in 0..20 {
            let t_len = rng.random_range(2..=5);
            let k = rng.random_range(2..=4);
            let n_labels = rng.random_range(0..=2);
            let labels: Vec<usize> =
                (0..n_labels).map(|_| rng.random_range(1..k)).collect();
            let mut inner = ChaCha8Rng::seed_from_u64(1000 + seed);
            let logits: Vec<f64> = (0..t_len * k)
                .map(|_| inner.random_range(-2.0..2.0))
                .collect();

            let build = |tape: &mut Tape, x: Vec<f64>| {
                let raw = tape.leaf(x, t_len, k, true).unwrap();
                let lp = tape.log_softmax_rows(raw).unwrap();
                let lat = CtcLattice::new(tape, lp, &labels).unwrap();
                (ctc_loss(tape, &lat), raw)
            };

            let mut tape = Tape::new();
            let (loss, raw) = build(&mut tape, logits.clone());
            let Ok(loss) = loss else { continue };
            tape.backward(loss).unwrap();
            let analytic = tape.grad(raw).unwrap().to_vec();

            let numeric = gradcheck::central_difference(
                |xs| {
                    let mut t = Tape::new();
                    let (l, _) = build(&mut t, xs.to_vec());
                    t.value(l.unwrap())[0]
                },
                &logits,
                gradcheck::STEP,
            );
            gradcheck::compare(&analytic, &numeric)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn forced_align_puts_label_on_its_strong_frame() {
        let mut tape = Tape::new();
        // Frame probabilities strongly favor the label at the middle frame.
        let rows = [
            [0.9f64, 0.1],
            [0.05, 0.95],
            [0.9, 0.1],
        ];
        let lp: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
        let id = tape.leaf(lp, 3, 2, false).unwrap();
        let lat = CtcLattice::new(&mut tape, id, &[1]).unwrap();
        assert_eq!(ctc_forced_align(&tape, &lat).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn forced_align_collapse_matches_labels_and_bounds_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..100 {
            let t_len = rng.random_range(1..=6);
            let k = rng.random_range(2..=4);
            let n_labels = rng.random_range(0..=3);
            let labels: Vec<usize> =
                (0..n_labels).map(|_| rng.random_range(1..k)).collect();
            let mut tape = Tape::new();
            let lat = random_lattice(&mut tape, &mut rng, t_len, k, &labels);
            let Ok(path) = ctc_forced_align(&tape, &lat) else {
                assert!(t_len < lat.required_frames());
                continue;
            };
            assert_eq!(collapse(&path), labels);
            // The single best path can never beat the total probability.
            let best = path_log_prob(&tape, &lat, &path);
            let loss = ctc_loss(&mut tape, &lat).unwrap();
            let total = -tape.value(loss)[0];
            assert!(best <= total + 1e-12, "best {best} > total {total}");
        }
    }

    #[test]
    fn drifted_rows_are_renormalized() {
        let mut tape = Tape::new();
        // Rows sum to 2, well past the tolerance.
        let raw = vec![(0.5f64).ln(); 4 * 2];
        let shifted: Vec<f64> = raw.iter().map(|v| v + 2.0f64.ln()).collect();
        let id = tape.leaf(shifted, 4, 2, false).unwrap();
        let lat = CtcLattice::new(&mut tape, id, &[1]).unwrap();
        let lp = tape.value(lat.log_probs);
        for r in 0..4 {
            let s: f64 = lp[r * 2..(r + 1) * 2].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn brute_force_guard_rejects_huge_instances() {
        let mut tape = Tape::new();
        let lat = uniform_lattice(&mut tape, 12, 4, &[1]);
        assert!(matches!(
            ctc_brute_force(&tape, &lat),
            Err(LossError::TooLarge { .. })
        ));
    }

    #[test]
    fn alignment_dump_is_line_per_utterance() {
        let mut buf = Vec::new();
        let a: &[usize] = &[0, 1, 1, 0];
        let b: &[usize] = &[2];
        write_alignment_dump(&mut buf, [("utt-1", a), ("utt-2", b)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "utt-1 0 1 1 0\nutt-2 2\n");
    }
}
