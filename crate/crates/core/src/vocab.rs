//! Word vocabulary with token index 0 reserved for the blank symbol.

use std::collections::HashMap;

/// Bidirectional word/token mapping. Word `i` has token index `i + 1`.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from unique words. Panics on duplicates.
    pub fn new(words: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let prev = index.insert(w.clone(), i + 1);
            assert!(prev.is_none(), "duplicate vocabulary word {w:?}");
        }
        Self { words, index }
    }

    /// Number of words, excluding the blank.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Output classes for the transducer and CTC heads: words plus blank.
    pub fn num_classes(&self) -> usize {
        self.words.len() + 1
    }

    /// Token index of a word, if present. Never 0.
    pub fn token(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Word for a nonzero token index.
    pub fn word(&self, token: usize) -> &str {
        assert!(token >= 1 && token <= self.words.len(), "bad token {token}");
        &self.words[token - 1]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Renders a token sequence as space-joined words.
    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_words_and_tokens() {
        let v = Vocab::new(vec!["alpha".into(), "beta".into()]);
        assert_eq!(v.len(), 2);
        assert_eq!(v.num_classes(), 3);
        assert_eq!(v.token("beta"), Some(2));
        assert_eq!(v.token("gamma"), None);
        assert_eq!(v.word(1), "alpha");
        assert_eq!(v.render(&[2, 1]), "beta alpha");
    }

    #[test]
    #[should_panic(expected = "duplicate vocabulary word")]
    fn rejects_duplicates() {
        Vocab::new(vec!["a".into(), "a".into()]);
    }
}
