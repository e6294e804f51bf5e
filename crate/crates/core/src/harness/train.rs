//! Pretraining of the base transducer and adapter training on top of it.
//!
//! Training is sequential and fully deterministic: one tape per batch, one
//! Adam step per batch, batch order shuffled from a seeded stream.

use std::collections::HashMap;

use anyhow::{bail, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{GaMode, TrainConfig};
use super::mix_seed;
use super::synth::Corpus;
use crate::adapter::{Bound, Model, TrainScope};
use crate::bias_list::{training_bias_list, RareVocab};
use crate::guided::{
    build_ctc_labels, build_frame_labels, build_text_labels, combined_objective, ga_ce_loss,
    ga_ctc_loss, GuidedError,
};
use crate::losses::{
    ctc_forced_align, ctc_loss, transducer_loss, CtcLattice, LossError, TransducerLattice,
};
use crate::params::Adam;
use crate::tensor::{Tape, TensorId};

/// Per-epoch loss record of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainingCurve {
    /// Mean total loss per epoch (combined objective for adapter runs).
    pub epoch_losses: Vec<f64>,
    /// Mean guided-attention loss per epoch; empty when no GA loss runs.
    pub epoch_ga_losses: Vec<f64>,
    /// Guided-attention instances skipped as CTC-infeasible.
    pub skipped_infeasible: u64,
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn collect_grads(tape: &Tape, bound: &Bound) -> HashMap<String, Vec<f64>> {
    let mut grads = HashMap::new();
    for (name, id) in bound.iter() {
        if let Some(g) = tape.grad(id) {
            grads.insert(name.to_string(), g.to_vec());
        }
    }
    grads
}

/// Trains every parameter of the plain transducer, plus the auxiliary CTC
/// head when `ctc_weight > 0`, until the epoch's mean loss drops below
/// `loss_threshold` or `epochs` epochs have run. Fails on a non-finite loss.
pub fn pretrain_base(model: &mut Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainingCurve> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 3));
    let mut curve = TrainingCurve::default();

    for _epoch in 0..cfg.epochs {
        let order = epoch_order(corpus.train.len(), &mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, TrainScope::All);
            let mut total: Option<TensorId> = None;
            for &i in batch {
                let u = &corpus.train[i];
                let enc = model.encoder_forward(&mut tape, &bound, &u.features, u.frames)?;
                let dec = model.predictor_forward(&mut tape, &bound, &u.tokens)?;
                let lp = model.joint_forward(&mut tape, &bound, enc, dec)?;
                let lattice = TransducerLattice::new(&mut tape, lp, u.frames, &u.tokens)?;
                let mut loss = transducer_loss(&mut tape, &lattice)?;
                if cfg.ctc_weight > 0.0 {
                    let clp = model.ctc_log_probs(&mut tape, &bound, enc)?;
                    let cl = CtcLattice::new(&mut tape, clp, &u.tokens)?;
                    let aux = ctc_loss(&mut tape, &cl)?;
                    let aux = tape.scale(aux, cfg.ctc_weight);
                    loss = tape.add(loss, aux)?;
                }
                total = Some(match total {
                    None => loss,
                    Some(t) => tape.add(t, loss)?,
                });
            }
            let total = total.expect("batches are nonempty");
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            let value = tape.value(mean)[0];
            if !value.is_finite() {
                bail!("pretraining diverged (non-finite loss) with seed {}", cfg.seed);
            }
            epoch_sum += value * batch.len() as f64;
            tape.backward(mean)?;
            adam.step(&mut model.store, &collect_grads(&tape, &bound));
        }
        let epoch_mean = epoch_sum / corpus.train.len() as f64;
        curve.epoch_losses.push(epoch_mean);
        if cfg.loss_threshold > 0.0 && epoch_mean < cfg.loss_threshold {
            break;
        }
    }
    Ok(curve)
}

/// Frame alignments used for the guided-attention frame labels: either the
/// generator's ground truth or a forced alignment against the (current,
/// typically pretrained) model's CTC head.
fn frame_alignments(model: &Model, corpus: &Corpus, force_align: bool) -> Result<Vec<Vec<usize>>> {
    if !force_align {
        return Ok(corpus.train.iter().map(|u| u.alignment.clone()).collect());
    }
    let mut out = Vec::with_capacity(corpus.train.len());
    for u in &corpus.train {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, TrainScope::Frozen);
        let enc = model.encoder_forward(&mut tape, &bound, &u.features, u.frames)?;
        let clp = model.ctc_log_probs(&mut tape, &bound, enc)?;
        let lattice = CtcLattice::new(&mut tape, clp, &u.tokens)?;
        out.push(ctc_forced_align(&tape, &lattice)?);
    }
    Ok(out)
}

/// Adapter training over the biased forward pass. With `freeze_base` the
/// base parameters never receive gradients and stay bitwise unchanged; the
/// guided-attention loss selected by `ga_mode` joins the transducer loss
/// through the `alpha`-weighted combined objective.
pub fn train_adapters(
    model: &mut Model,
    corpus: &Corpus,
    rare: &RareVocab,
    cfg: &TrainConfig,
) -> Result<TrainingCurve> {
    cfg.validate()?;
    let scope = if cfg.freeze_base {
        TrainScope::AdaptersOnly
    } else {
        TrainScope::All
    };
    let alignments = frame_alignments(model, corpus, cfg.force_align)?;
    let mut adam = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 4));
    let mut curve = TrainingCurve::default();

    for _epoch in 0..cfg.epochs {
        let order = epoch_order(corpus.train.len(), &mut rng);
        let mut loss_sum = 0.0;
        let mut ga_sum = 0.0;
        let mut ga_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&[usize]> = batch
                .iter()
                .map(|&i| corpus.train[i].tokens.as_slice())
                .collect();
            let list = training_bias_list(&refs, rare);

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, scope);
            let p = model.catalog(&mut tape, &bound, &list)?;

            let mut trans_total: Option<TensorId> = None;
            let mut ga_total: Option<TensorId> = None;
            let mut ga_batch = 0usize;
            for &i in batch {
                let u = &corpus.train[i];
                let out = model.biased_forward(&mut tape, &bound, &u.features, u.frames, &u.tokens, p)?;
                let lattice = TransducerLattice::new(&mut tape, out.log_probs, u.frames, &u.tokens)?;
                let l_trans = transducer_loss(&mut tape, &lattice)?;
                trans_total = Some(match trans_total {
                    None => l_trans,
                    Some(t) => tape.add(t, l_trans)?,
                });

                if cfg.ga_mode == GaMode::None {
                    continue;
                }
                let c_dec = build_text_labels(&u.tokens, &list);
                // Row 0 of the text-adapter scores belongs to the
                // start-of-sequence state, which has no token label.
                let a_dec = tape.slice_rows(out.a_dec.avg, 1, u.tokens.len())?;
                let ga = match cfg.ga_mode {
                    GaMode::GaCe => {
                        let c_enc = build_frame_labels(&alignments[i], &u.tokens, &c_dec)?;
                        Ok(ga_ce_loss(&mut tape, out.a_enc.avg, &c_enc, a_dec, &c_dec)?)
                    }
                    GaMode::GaCtc => {
                        let c = build_ctc_labels(&c_dec);
                        ga_ctc_loss(&mut tape, out.a_enc.avg, a_dec, &c)
                    }
                    GaMode::None => unreachable!(),
                };
                match ga {
                    Ok(l) => {
                        ga_total = Some(match ga_total {
                            None => l,
                            Some(t) => tape.add(t, l)?,
                        });
                        ga_batch += 1;
                    }
                    Err(GuidedError::Loss(LossError::Infeasible { .. })) => {
                        curve.skipped_infeasible += 1;
                    }
                    Err(e) => return Err(e.into()),
                }
            }

            let trans_mean = tape.scale(trans_total.expect("batches are nonempty"), 1.0 / batch.len() as f64);
            let total = match ga_total {
                Some(ga) => {
                    let ga_mean = tape.scale(ga, 1.0 / ga_batch as f64);
                    ga_sum += tape.value(ga_mean)[0] * ga_batch as f64;
                    ga_count += ga_batch;
                    combined_objective(&mut tape, trans_mean, ga_mean, cfg.alpha)?
                }
                None => trans_mean,
            };
            let value = tape.value(total)[0];
            if !value.is_finite() {
                bail!("adapter training diverged (non-finite loss) with seed {}", cfg.seed);
            }
            loss_sum += value * batch.len() as f64;
            tape.backward(total)?;
            adam.step(&mut model.store, &collect_grads(&tape, &bound));
        }
        curve.epoch_losses.push(loss_sum / corpus.train.len() as f64);
        if ga_count > 0 {
            curve.epoch_ga_losses.push(ga_sum / ga_count as f64);
        }
    }
    Ok(curve)
}
