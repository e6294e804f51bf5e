//! Synthetic spoken-word corpus with exact frame alignments.
//!
//! Every word owns a fixed random feature signature of `frames_per_token`
//! frames; an utterance is the concatenation of its words' signatures plus
//! Gaussian noise. Because the generator knows which frames belong to which
//! word, it emits the frame alignment that guided-attention training would
//! otherwise need a forced aligner for.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::SynthConfig;
use super::mix_seed;
use crate::losses::write_alignment_dump;
use crate::vocab::Vocab;

const MIN_WORDS: usize = 3;
const MAX_WORDS: usize = 8;

/// One synthetic utterance. `alignment` holds the generating token of every
/// frame; adjacent frames with equal tokens belong to the same occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<usize>,
    pub frames: usize,
    pub features: Vec<f64>,
    pub alignment: Vec<usize>,
}

/// A generated dataset plus everything needed to reproduce and score it.
/// `counts` are training-set occurrences per vocabulary word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: SynthConfig,
    pub words: Vec<String>,
    pub counts: Vec<u64>,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.words.clone())
    }
}

/// Per-word sampling probabilities: the `head_count` most frequent words
/// share `1 - rare_mass`, the tail shares `rare_mass`, both Zipf-shaped by
/// global rank.
fn word_probabilities(cfg: &SynthConfig) -> Vec<f64> {
    let weight = |rank: usize| ((rank + 1) as f64).powf(-cfg.zipf_exponent);
    let head_sum: f64 = (0..cfg.head_count).map(weight).sum();
    let tail_sum: f64 = (cfg.head_count..cfg.vocab_size).map(weight).sum();
    (0..cfg.vocab_size)
        .map(|rank| {
            if rank < cfg.head_count {
                (1.0 - cfg.rare_mass) * weight(rank) / head_sum
            } else {
                cfg.rare_mass * weight(rank) / tail_sum
            }
        })
        .collect()
}

/// Generates the corpus. Words are named by frequency rank (`w000` most
/// frequent); tokens are the 1-based vocabulary indices of those names.
pub fn synth_corpus(cfg: &SynthConfig) -> Corpus {
    cfg.validate().expect("invalid synthesis configuration");
    let words: Vec<String> = (0..cfg.vocab_size).map(|r| format!("w{r:03}")).collect();

    let block = cfg.frames_per_token * cfg.feature_dim;
    let mut sig_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0));
    let signatures: Vec<Vec<f64>> = (0..cfg.vocab_size)
        .map(|_| (0..block).map(|_| sig_rng.sample(StandardNormal)).collect())
        .collect();

    let probs = word_probabilities(cfg);
    let dist = WeightedIndex::new(&probs).expect("probabilities are positive");

    let sample_split = |salt: u64, n: usize| -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, salt));
        (0..n)
            .map(|_| {
                let len = rng.random_range(MIN_WORDS..=MAX_WORDS);
                let mut tokens = Vec::with_capacity(len);
                for _ in 0..len {
                    // Adjacent repeats are resampled away: the frame
                    // alignment cannot separate two occurrences that share
                    // a boundary.
                    loop {
                        let tok = dist.sample(&mut rng) + 1;
                        if tokens.last() != Some(&tok) {
                            tokens.push(tok);
                            break;
                        }
                    }
                }
                let frames = len * cfg.frames_per_token;
                let mut features = Vec::with_capacity(frames * cfg.feature_dim);
                let mut alignment = Vec::with_capacity(frames);
                for &tok in &tokens {
                    for &s in &signatures[tok - 1] {
                        let noise: f64 = rng.sample(StandardNormal);
                        features.push(s + cfg.noise_std * noise);
                    }
                    alignment.extend(std::iter::repeat(tok).take(cfg.frames_per_token));
                }
                Utterance {
                    tokens,
                    frames,
                    features,
                    alignment,
                }
            })
            .collect()
    };

    let train = sample_split(1, cfg.n_train);
    let test = sample_split(2, cfg.n_test);

    let mut counts = vec![0u64; cfg.vocab_size];
    for utt in &train {
        for &tok in &utt.tokens {
            counts[tok - 1] += 1;
        }
    }

    Corpus {
        config: *cfg,
        words,
        counts,
        train,
        test,
    }
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    serde_json::to_writer(w, corpus).context("serializing corpus")?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let r = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    serde_json::from_reader(r).with_context(|| format!("parsing corpus {}", path.display()))
}

/// Word frequency table, most frequent first, count ties by word name.
pub fn write_freq_table<W: Write>(mut w: W, words: &[String], counts: &[u64]) -> io::Result<()> {
    let mut order: Vec<usize> = (0..words.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(words[a].cmp(&words[b])));
    for i in order {
        writeln!(w, "{}\t{}", words[i], counts[i])?;
    }
    Ok(())
}

/// Ground-truth frame alignments of both splits in dump format.
pub fn write_alignments<W: Write>(w: W, corpus: &Corpus) -> io::Result<()> {
    let entries: Vec<(String, &[usize])> = corpus
        .train
        .iter()
        .enumerate()
        .map(|(i, u)| (format!("train-{i:04}"), u.alignment.as_slice()))
        .chain(
            corpus
                .test
                .iter()
                .enumerate()
                .map(|(i, u)| (format!("test-{i:04}"), u.alignment.as_slice())),
        )
        .collect();
    write_alignment_dump(w, entries.iter().map(|(id, a)| (id.as_str(), *a)))
}
