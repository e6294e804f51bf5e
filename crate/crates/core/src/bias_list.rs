//! Bias-list assembly: rare-word extraction, per-batch training lists, and
//! per-utterance evaluation lists with seeded distractors.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("bias phrase at position {0} is empty")]
    EmptyPhrase(usize),
    #[error("duplicate bias phrase at positions {first} and {second}")]
    DuplicatePhrase { first: usize, second: usize },
    #[error("unknown word {0:?} in bias-list file")]
    UnknownWord(String),
    #[error("need {needed} distractors but only {available} candidates exist")]
    NotEnoughDistractors { needed: usize, available: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ordered bias phrases as token sequences. Index 0 is the reserved
/// `<no_bias>` marker; real phrases occupy indices `1..len()`, are nonempty,
/// and are pairwise distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasList {
    phrases: Vec<Vec<usize>>,
}

impl BiasList {
    /// The single-entry list: `<no_bias>` alone.
    pub fn empty() -> Self {
        Self {
            phrases: vec![Vec::new()],
        }
    }

    /// Prepends `<no_bias>` to the given phrases.
    pub fn from_phrases(phrases: Vec<Vec<usize>>) -> Result<Self, BiasError> {
        let mut seen: HashSet<&[usize]> = HashSet::new();
        for (i, p) in phrases.iter().enumerate() {
            if p.is_empty() {
                return Err(BiasError::EmptyPhrase(i + 1));
            }
            if !seen.insert(p) {
                let first = phrases.iter().position(|q| q == p).unwrap() + 1;
                return Err(BiasError::DuplicatePhrase {
                    first,
                    second: i + 1,
                });
            }
        }
        let mut all = Vec::with_capacity(phrases.len() + 1);
        all.push(Vec::new());
        all.extend(phrases);
        Ok(Self { phrases: all })
    }

    /// List length including `<no_bias>`, so always at least 1.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    /// Token sequence of phrase `s` (1-based; index 0 is `<no_bias>`).
    pub fn phrase(&self, s: usize) -> &[usize] {
        &self.phrases[s]
    }

    /// Real phrases, without the `<no_bias>` marker.
    pub fn real_phrases(&self) -> &[Vec<usize>] {
        &self.phrases[1..]
    }

    /// All tokens covered by any phrase, for error attribution.
    pub fn member_tokens(&self) -> HashSet<usize> {
        self.real_phrases().iter().flatten().copied().collect()
    }
}

/// Writes one phrase per line as space-joined words. `<no_bias>` is implicit
/// and never written.
pub fn write_bias_list(path: &Path, list: &BiasList, vocab: &Vocab) -> Result<(), BiasError> {
    let mut out = Vec::new();
    for p in list.real_phrases() {
        writeln!(out, "{}", vocab.render(p))?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads the one-phrase-per-line format written by [`write_bias_list`].
pub fn read_bias_list(path: &Path, vocab: &Vocab) -> Result<BiasList, BiasError> {
    let mut phrases = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = Vec::new();
        for w in line.split_whitespace() {
            tokens.push(
                vocab
                    .token(w)
                    .ok_or_else(|| BiasError::UnknownWord(w.to_string()))?,
            );
        }
        phrases.push(tokens);
    }
    BiasList::from_phrases(phrases)
}

/// Token-level split of the vocabulary into the `k` most frequent words and
/// the rare remainder.
#[derive(Debug, Clone)]
pub struct RareVocab {
    rare: HashSet<usize>,
    common: HashSet<usize>,
    pub k: usize,
}

impl RareVocab {
    pub fn is_rare(&self, token: usize) -> bool {
        self.rare.contains(&token)
    }

    pub fn rare_tokens(&self) -> &HashSet<usize> {
        &self.rare
    }

    pub fn common_tokens(&self) -> &HashSet<usize> {
        &self.common
    }
}

/// Splits by frequency: `common` is the top `k` tokens by count with ties
/// broken lexicographically by word, `rare` is everything else. `counts[i]`
/// is the training count of token `i + 1`.
pub fn build_rare_vocab(vocab: &Vocab, counts: &[u64], k: usize) -> RareVocab {
    assert_eq!(counts.len(), vocab.len(), "one count per word");
    let mut order: Vec<usize> = (1..=vocab.len()).collect();
    order.sort_by(|&a, &b| {
        counts[b - 1]
            .cmp(&counts[a - 1])
            .then_with(|| vocab.word(a).cmp(vocab.word(b)))
    });
    let common: HashSet<usize> = order.iter().take(k).copied().collect();
    let rare: HashSet<usize> = order.iter().skip(k).copied().collect();
    RareVocab { rare, common, k }
}

/// Union of the batch's rare words, ordered by first occurrence, one
/// single-token phrase each.
pub fn training_bias_list(batch: &[&[usize]], rare: &RareVocab) -> BiasList {
    let mut seen = HashSet::new();
    let mut phrases = Vec::new();
    for utt in batch {
        for &tok in *utt {
            if rare.is_rare(tok) && seen.insert(tok) {
                phrases.push(vec![tok]);
            }
        }
    }
    BiasList::from_phrases(phrases).expect("single tokens are nonempty and deduplicated")
}

/// The utterance's rare words plus `n_distractors` seeded samples (without
/// replacement) from rare words absent from the utterance. Everything after
/// the `<no_bias>` slot is shuffled so relevant entries are not positionally
/// identifiable.
pub fn eval_bias_list(
    tokens: &[usize],
    rare: &RareVocab,
    n_distractors: usize,
    seed: u64,
) -> Result<BiasList, BiasError> {
    let mut seen = HashSet::new();
    let mut words: Vec<usize> = Vec::new();
    for &tok in tokens {
        if rare.is_rare(tok) && seen.insert(tok) {
            words.push(tok);
        }
    }
    let mut candidates: Vec<usize> = rare
        .rare_tokens()
        .iter()
        .copied()
        .filter(|t| !seen.contains(t))
        .collect();
    if candidates.len() < n_distractors {
        return Err(BiasError::NotEnoughDistractors {
            needed: n_distractors,
            available: candidates.len(),
        });
    }
    candidates.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first n_distractors slots become the sample.
    for i in 0..n_distractors {
        let j = rng.random_range(i..candidates.len());
        candidates.swap(i, j);
    }
    words.extend(&candidates[..n_distractors]);
    words.shuffle(&mut rng);
    BiasList::from_phrases(words.into_iter().map(|t| vec![t]).collect())
}
