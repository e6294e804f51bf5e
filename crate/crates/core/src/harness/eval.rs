//! Scored decoding over a test set, parallel across utterances.

use std::collections::HashSet;

use anyhow::Result;
use rayon::prelude::*;

use super::mix_seed;
use super::synth::Utterance;
use crate::adapter::{greedy_decode, Model};
use crate::bias_list::{eval_bias_list, BiasList, RareVocab};
use crate::metrics::{aggregate, wer_breakdown, EvalReport};

/// How the bias machinery is exercised during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// Per-utterance list: the utterance's rare words plus this many
    /// distractors, shuffled.
    Distractors(usize),
    /// The `<no_bias>`-only list.
    EmptyBias,
    /// No biasing pass at all; how the vanilla model decodes.
    Plain,
}

/// Decodes and scores every utterance, then pools the counts. Per-utterance
/// distractor draws are seeded from `(seed, utterance index)`, so reports
/// are identical for any worker count and any utterance processing order.
pub fn evaluate(
    model: &Model,
    data: &[Utterance],
    rare: &RareVocab,
    condition: Condition,
    seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    let score_one = |(i, u): (usize, &Utterance)| -> Result<EvalReport> {
        let (hypothesis, bias_words) = match condition {
            Condition::Distractors(n) => {
                let list = eval_bias_list(&u.tokens, rare, n, mix_seed(seed, i as u64))?;
                let hyp = greedy_decode(model, &u.features, u.frames, Some(&list))?;
                let words = list.member_tokens();
                (hyp, words)
            }
            Condition::EmptyBias => {
                let list = BiasList::empty();
                let hyp = greedy_decode(model, &u.features, u.frames, Some(&list))?;
                (hyp, HashSet::new())
            }
            Condition::Plain => {
                let hyp = greedy_decode(model, &u.features, u.frames, None)?;
                // Score against the same word split the biased conditions
                // see: the utterance's rare words count as biased.
                let words = u.tokens.iter().copied().filter(|&t| rare.is_rare(t)).collect();
                (hyp, words)
            }
        };
        Ok(wer_breakdown(&u.tokens, &hypothesis, &bias_words))
    };

    let run = || data.par_iter().enumerate().map(score_one).collect::<Result<Vec<_>>>();
    let reports = if workers == 0 {
        run()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
        pool.install(run)?
    };
    Ok(aggregate(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias_list::build_rare_vocab;
    use crate::harness::config::{ModelSizes, SynthConfig};
    use crate::harness::synth::synth_corpus;

    fn setup() -> (crate::harness::synth::Corpus, Model, RareVocab) {
        let synth = SynthConfig {
            vocab_size: 12,
            frames_per_token: 2,
            feature_dim: 4,
            noise_std: 0.2,
            n_train: 8,
            n_test: 12,
            zipf_exponent: 1.2,
            head_count: 4,
            rare_mass: 0.25,
            seed: 77,
        };
        let sizes = ModelSizes {
            enc_hidden: 12,
            embed_dim: 8,
            joint_hidden: 8,
            n_heads: 2,
            catalog_hidden: 4,
            max_symbols_per_frame: 2,
            seed: 9,
        };
        let corpus = synth_corpus(&synth);
        let model = Model::new(sizes.model_config(&synth), sizes.seed);
        let rare = build_rare_vocab(&corpus.vocab(), &corpus.counts, 4);
        (corpus, model, rare)
    }

    #[test]
    fn reports_are_identical_for_any_worker_count() {
        let (corpus, model, rare) = setup();
        let at = |workers| {
            evaluate(&model, &corpus.test, &rare, Condition::Distractors(3), 5, workers).unwrap()
        };
        let one = at(1);
        assert_eq!(one, at(3));
        assert_eq!(one, at(0));
    }

    #[test]
    fn same_seed_same_report() {
        let (corpus, model, rare) = setup();
        let run = || {
            evaluate(&model, &corpus.test, &rare, Condition::Distractors(2), 11, 2).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_bias_scores_every_word_as_unbiased() {
        let (corpus, model, rare) = setup();
        let report =
            evaluate(&model, &corpus.test, &rare, Condition::EmptyBias, 5, 1).unwrap();
        assert_eq!(report.utterances, corpus.test.len() as u64);
        assert_eq!(report.biased.ref_words, 0);
        assert_eq!(report.unbiased.ref_words, report.all.ref_words);
    }

    #[test]
    fn plain_condition_splits_by_rarity() {
        let (corpus, model, rare) = setup();
        let report = evaluate(&model, &corpus.test, &rare, Condition::Plain, 5, 1).unwrap();
        let rare_refs: u64 = corpus
            .test
            .iter()
            .flat_map(|u| &u.tokens)
            .filter(|&&t| rare.is_rare(t))
            .count() as u64;
        assert_eq!(report.biased.ref_words, rare_refs);
        assert_eq!(
            report.all.ref_words,
            report.biased.ref_words + report.unbiased.ref_words
        );
    }
}
