//! Transducer negative log-likelihood over a flattened joint grid.
//!
//! The joint network scores every (frame, prediction-state) pair. A path
//! walks the grid from `(0, 0)`: emitting the blank (class 0) advances the
//! frame, emitting label `y[u+1]` advances the prediction state, and the path
//! terminates with a blank at `(T-1, U)`. Every label sequence is feasible
//! for every `T >= 1` because label emissions do not consume frames.

use super::ctc::normalize_rows;
use super::{LossError, ENUM_LIMIT};
use crate::num::{log_add_exp, log_sum_exp, LOG_ZERO};
use crate::tensor::{Tape, TensorId};

/// Joint log-probabilities `[(T * (U+1)) x V]` with row `t * (U+1) + u`
/// holding the output distribution at frame `t` after `u` emitted labels.
#[derive(Debug, Clone)]
pub struct TransducerLattice {
    pub log_probs: TensorId,
    pub labels: Vec<usize>,
    frames: usize,
    classes: usize,
}

impl TransducerLattice {
    pub fn new(
        tape: &mut Tape,
        log_probs: TensorId,
        frames: usize,
        labels: &[usize],
    ) -> Result<Self, LossError> {
        let (rows, classes) = tape.shape(log_probs);
        let expected_rows = frames * (labels.len() + 1);
        if frames == 0 || rows != expected_rows {
            return Err(LossError::LatticeShape {
                expected_rows,
                expected_cols: classes.max(1),
                rows,
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

    /// Flat row index of grid node `(t, u)`.
    pub fn row_index(&self, t: usize, u: usize) -> usize {
        t * (self.labels.len() + 1) + u
    }
}

/// `-ln P(labels | grid)` summed over all monotone paths, with the analytic
/// gradient recorded on the tape.
pub fn transducer_loss(
    tape: &mut Tape,
    lattice: &TransducerLattice,
) -> Result<TensorId, LossError> {
    let (loss, grad) = transducer_dp(
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

/// Forward/backward recursions on the raw grid. Returns the loss and its
/// gradient with respect to every grid entry.
fn transducer_dp(lp: &[f64], t_len: usize, v: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let u_len = labels.len();
    let w = u_len + 1;
    let at = |t: usize, u: usize, c: usize| lp[(t * w + u) * v + c];

    // alpha[t][u]: log prob of all prefixes arriving at node (t, u).
    let mut alpha = vec![LOG_ZERO; t_len * w];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..w {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = LOG_ZERO;
            if t > 0 {
                acc = log_add_exp(acc, alpha[(t - 1) * w + u] + at(t - 1, u, 0));
            }
            if u > 0 {
                acc = log_add_exp(acc, alpha[t * w + u - 1] + at(t, u - 1, labels[u - 1]));
            }
            alpha[t * w + u] = acc;
        }
    }
    let log_p = alpha[(t_len - 1) * w + u_len] + at(t_len - 1, u_len, 0);

    // beta[t][u]: log prob of completing from node (t, u), including the
    // emission chosen there.
    let mut beta = vec![LOG_ZERO; t_len * w];
    beta[(t_len - 1) * w + u_len] = at(t_len - 1, u_len, 0);
    for t in (0..t_len).rev() {
        for u in (0..w).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let mut acc = LOG_ZERO;
            if t + 1 < t_len {
                acc = log_add_exp(acc, at(t, u, 0) + beta[(t + 1) * w + u]);
            }
            if u < u_len {
                acc = log_add_exp(acc, at(t, u, labels[u]) + beta[t * w + u + 1]);
            }
            beta[t * w + u] = acc;
        }
    }
    debug_assert!((beta[0] - log_p).abs() <= 1e-9 * log_p.abs().max(1.0));

    // Posterior of emitting class c at node (t, u), one branch per class:
    // blank pairs with beta of the next frame, the due label with beta of
    // the next prediction state.
    let mut grad = vec![0.0; lp.len()];
    for t in 0..t_len {
        for u in 0..w {
            let a = alpha[t * w + u];
            if a <= LOG_ZERO {
                continue;
            }
            let blank_tail = if t + 1 < t_len {
                beta[(t + 1) * w + u]
            } else if u == u_len {
                0.0
            } else {
                LOG_ZERO
            };
            if blank_tail > LOG_ZERO || (t == t_len - 1 && u == u_len) {
                let occ = a + at(t, u, 0) + blank_tail - log_p;
                grad[(t * w + u) * v] -= occ.exp();
            }
            if u < u_len {
                let tail = beta[t * w + u + 1];
                if tail > LOG_ZERO {
                    let occ = a + at(t, u, labels[u]) + tail - log_p;
                    grad[(t * w + u) * v + labels[u]] -= occ.exp();
                }
            }
        }
    }
    (-log_p, grad)
}

/// Binomial coefficient with saturation, for the enumeration guard.
fn path_count(t_len: usize, u_len: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..u_len as u128 {
        // The running product is itself a binomial, so the division is exact.
        // Saturation only trips on grids far past any enumeration limit.
        c = c.saturating_mul(t_len as u128 - 1 + u_len as u128 - i) / (i + 1);
    }
    c
}

/// Sums path probabilities by explicit depth-first enumeration of every
/// monotone walk. Guarded to `C(T-1+U, U) <=` [`ENUM_LIMIT`] paths.
pub fn transducer_brute_force(
    tape: &Tape,
    lattice: &TransducerLattice,
) -> Result<f64, LossError> {
    let t_len = lattice.frames;
    let u_len = lattice.labels.len();
    let paths = path_count(t_len, u_len);
    if paths > ENUM_LIMIT {
        return Err(LossError::TooLarge {
            paths,
            limit: ENUM_LIMIT,
        });
    }
    Ok(brute_force_raw(
        tape.value(lattice.log_probs),
        t_len,
        lattice.classes,
        &lattice.labels,
    ))
}

fn brute_force_raw(lp: &[f64], t_len: usize, v: usize, labels: &[usize]) -> f64 {
    let u_len = labels.len();
    let w = u_len + 1;
    let at = |t: usize, u: usize, c: usize| lp[(t * w + u) * v + c];
    let mut totals = Vec::new();
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, acc)) = stack.pop() {
        if t == t_len - 1 && u == u_len {
            totals.push(acc + at(t, u, 0));
            continue;
        }
        if t + 1 < t_len {
            stack.push((t + 1, u, acc + at(t, u, 0)));
        }
        if u < u_len {
            stack.push((t, u + 1, acc + at(t, u, labels[u])));
        }
    }
    -log_sum_exp(&totals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, rows: usize, v: usize) -> Vec<f64> {
        (0..rows * v).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    fn build_lattice(
        tape: &mut Tape,
        logits: Vec<f64>,
        t_len: usize,
        v: usize,
        labels: &[usize],
    ) -> TransducerLattice {
        let rows = t_len * (labels.len() + 1);
        let raw = tape.leaf(logits, rows, v, false).unwrap();
        let lp = tape.log_softmax_rows(raw).unwrap();
        TransducerLattice::new(tape, lp, t_len, labels).unwrap()
    }

    #[test]
    fn empty_labels_loss_is_blank_chain() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random_grid(&mut rng, 5, 3);
        let lat = build_lattice(&mut tape, logits, 5, 3, &[]);
        let loss = transducer_loss(&mut tape, &lat).unwrap();
        let lp = tape.value(lat.log_probs);
        let expected: f64 = -(0..5).map(|t| lp[t * 3]).sum::<f64>();
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn single_frame_single_label_is_one_path() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random_grid(&mut rng, 2, 4);
        let lat = build_lattice(&mut tape, logits, 1, 4, &[2]);
        let loss = transducer_loss(&mut tape, &lat).unwrap();
        let lp = tape.value(lat.log_probs);
        // Row 0 is node (0,0), row 1 is node (0,1).
        let expected = -(lp[2] + lp[4]);
        assert!((tape.value(loss)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn dp_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..200 {
            let t_len = rng.random_range(1..=5);
            let v = rng.random_range(2..=4);
            let u_len = rng.random_range(0..=4);
            let labels: Vec<usize> = (0..u_len).map(|_| rng.random_range(1..v)).collect();
            let mut tape = Tape::new();
            let logits = random_grid(&mut rng, t_len * (u_len + 1), v);
            let lat = build_lattice(&mut tape, logits, t_len, v, &labels);
            let loss = transducer_loss(&mut tape, &lat).unwrap();
            let dp = tape.value(loss)[0];
            let brute = transducer_brute_force(&tape, &lat).unwrap();
            assert!(
                (dp - brute).abs() <= 1e-9,
                "trial {trial}: dp {dp} vs brute {brute}"
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for seed in 0..20 {
            let t_len = rng.random_range(1..=4);
            let v = rng.random_range(2..=4);
            let u_len = rng.random_range(0..=3);
            let labels: Vec<usize> = (0..u_len).map(|_| rng.random_range(1..v)).collect();
            let rows = t_len * (u_len + 1);
            let mut inner = ChaCha8Rng::seed_from_u64(2000 + seed);
            let logits: Vec<f64> =
                (0..rows * v).map(|_| inner.random_range(-2.0..2.0)).collect();

            let build = |tape: &mut Tape, x: Vec<f64>| {
                let raw = tape.leaf(x, rows, v, true).unwrap();
                let lp = tape.log_softmax_rows(raw).unwrap();
                let lat = TransducerLattice::new(tape, lp, t_len, &labels).unwrap();
                (transducer_loss(tape, &lat).unwrap(), raw)
            };

            let mut tape = Tape::new();
            let (loss, raw) = build(&mut tape, logits.clone());
            tape.backward(loss).unwrap();
            let analytic = tape.grad(raw).unwrap().to_vec();

            let numeric = gradcheck::central_difference(
                |xs| {
                    let mut t = Tape::new();
                    let (l, _) = build(&mut t, xs.to_vec());
                    t.value(l)[0]
                },
                &logits,
                gradcheck::STEP,
            );
            gradcheck::compare(&analytic, &numeric)
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn raising_an_on_path_score_lowers_the_loss() {
        // Every label transition and every frame-advancing blank lies on some
        // path, so a raw bump to such an entry strictly increases total path
        // probability. Checked against both the recursion and the enumerator.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let t_len = 4;
        let v = 3;
        let labels = [1usize, 2];
        let w = labels.len() + 1;
        let lp: Vec<f64> = (0..t_len * w * v).map(|_| rng.random_range(-3.0..0.0)).collect();
        let (base, _) = transducer_dp(&lp, t_len, v, &labels);
        let mut on_path: Vec<usize> = Vec::new();
        for t in 0..t_len {
            for u in 0..w {
                if u < labels.len() {
                    on_path.push((t * w + u) * v + labels[u]);
                }
                if t + 1 < t_len || u == labels.len() {
                    on_path.push((t * w + u) * v);
                }
            }
        }
        for idx in on_path {
            let mut bumped = lp.clone();
            bumped[idx] += 0.1;
            let (loss, _) = transducer_dp(&bumped, t_len, v, &labels);
            assert!(loss < base, "bump at flat index {idx} did not lower the loss");
            let oracle = brute_force_raw(&bumped, t_len, v, &labels);
            assert!((loss - oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let id = tape.leaf(vec![0.0; 6], 3, 2, false).unwrap();
        // Three rows cannot represent two frames of a one-label grid (needs 4).
        match TransducerLattice::new(&mut tape, id, 2, &[1]) {
            Err(LossError::LatticeShape { expected_rows: 4, rows: 3, .. }) => {}
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn blank_in_labels_is_rejected() {
        let mut tape = Tape::new();
        let id = tape.leaf(vec![0.0; 8], 4, 2, false).unwrap();
        assert!(matches!(
            TransducerLattice::new(&mut tape, id, 2, &[0]),
            Err(LossError::BlankInLabels)
        ));
    }

    #[test]
    fn enumeration_guard_blocks_huge_grids() {
        let mut tape = Tape::new();
        let t_len = 40;
        let labels = vec![1usize; 12];
        let rows = t_len * (labels.len() + 1);
        let id = tape.leaf(vec![-(2.0f64.ln()); rows * 2], rows, 2, false).unwrap();
        let lat = TransducerLattice::new(&mut tape, id, t_len, &labels).unwrap();
        assert!(matches!(
            transducer_brute_force(&tape, &lat),
            Err(LossError::TooLarge { .. })
        ));
    }

    #[test]
    fn path_count_matches_small_binomials() {
        assert_eq!(path_count(1, 0), 1);
        assert_eq!(path_count(3, 0), 1);
        assert_eq!(path_count(1, 4), 1);
        assert_eq!(path_count(4, 2), 10); // C(5, 2)
        assert_eq!(path_count(2, 3), 4); // C(4, 3)
    }
}
