//! Word-level tokenization with a train-split vocabulary.

use std::collections::BTreeMap;

/// Reserved id for out-of-vocabulary words.
pub const UNK_ID: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Deterministic word vocabulary: `<unk>` at 0, then sorted unique words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    to_id: BTreeMap<String, usize>,
    words: Vec<String>,
}

impl Vocab {
    /// Build from training texts only; sorted order keeps ids independent of
    /// text order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut unique: Vec<String> = Vec::new();
        for text in texts {
            unique.extend(word_tokens(text));
        }
        unique.sort_unstable();
        unique.dedup();
        let mut words = Vec::with_capacity(unique.len() + 1);
        words.push(UNK_TOKEN.to_string());
        words.extend(unique);
        let to_id = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { to_id, words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.to_id.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(|s| s.as_str()).unwrap_or(UNK_TOKEN)
    }
}

/// Lowercased word split: alphanumeric runs plus single punctuation marks.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        let ch = ch.to_ascii_lowercase();
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token ids, truncated to `max_len`, never empty (an empty text maps to UNK).
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = word_tokens(text)
        .iter()
        .map(|w| vocab.id(w))
        .take(max_len)
        .collect();
    if ids.is_empty() {
        ids.push(UNK_ID);
    }
    ids
}

/// Fraction of non-UNK tokens across texts.
pub fn coverage<'a>(texts: impl IntoIterator<Item = &'a str>, vocab: &Vocab) -> f64 {
    let mut total = 0usize;
    let mut known = 0usize;
    for text in texts {
        for w in word_tokens(text) {
            total += 1;
            if vocab.id(&w) != UNK_ID {
                known += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        known as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(word_tokens("Good food!"), vec!["good", "food", "!"]);
        assert_eq!(word_tokens("a,b"), vec!["a", ",", "b"]);
    }

    #[test]
    fn tokenize_known_text() {
        let vocab = Vocab::build(["good food !"]);
        let ids = tokenize("Good food!", &vocab, 10);
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i != UNK_ID));
        assert_eq!(vocab.word(ids[0]), "good");
    }

    #[test]
    fn empty_text_yields_unk() {
        let vocab = Vocab::build(["something"]);
        assert_eq!(tokenize("", &vocab, 10), vec![UNK_ID]);
    }

    #[test]
    fn truncation() {
        let vocab = Vocab::build(["a b c d e"]);
        assert_eq!(tokenize("a b c d e", &vocab, 3).len(), 3);
    }

    #[test]
    fn oov_maps_to_unk() {
        let vocab = Vocab::build(["known words"]);
        let ids = tokenize("unknown things", &vocab, 10);
        assert_eq!(ids, vec![UNK_ID, UNK_ID]);
    }

    #[test]
    fn vocabulary_is_order_independent() {
        let a = Vocab::build(["alpha beta", "gamma"]);
        let b = Vocab::build(["gamma", "alpha beta"]);
        assert_eq!(a, b);
    }
}
