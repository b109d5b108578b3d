//! Word ↔ id mapping for captions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

const STRIPPED: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\''];

/// Lowercase, strip `.,!?;:"'` and split on whitespace.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .replace(STRIPPED, "")
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// The caption as the vocabulary sees it: tokens joined by single spaces.
pub fn normalize(caption: &str) -> String {
    tokenize(caption).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    id_to_word: Vec<String>,
    word_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Words with corpus frequency ≥ `min_count`, ordered by descending
    /// frequency and then lexicographically, after the four reserved tokens.
    pub fn build<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Parameter("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for tok in tokenize(c.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_words(all)
    }

    /// Rebuild from a full id-ordered word list (reserved tokens first).
    pub fn from_words(id_to_word: Vec<String>) -> Result<Self> {
        if id_to_word.len() < RESERVED.len() || id_to_word[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut word_to_id = HashMap::with_capacity(id_to_word.len());
        for (i, w) in id_to_word.iter().enumerate() {
            if word_to_id.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { id_to_word, word_to_id })
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.id_to_word.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_word
    }

    /// Non-reserved words in id order.
    pub fn corpus_words(&self) -> &[String] {
        &self.id_to_word[RESERVED.len()..]
    }

    /// `[START, ids…, END]` right-padded with PAD to `max_len`. Unknown words
    /// map to UNK; captions longer than `max_len - 2` words are cut before END.
    pub fn encode(&self, caption: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 {
            return Err(Error::Parameter(format!("max_len must be at least 2, got {max_len}")));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(START);
        ids.extend(
            tokenize(caption)
                .iter()
                .take(max_len - 2)
                .map(|w| self.id(w).unwrap_or(UNK)),
        );
        ids.push(END);
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    /// Join words with single spaces, dropping PAD and START and stopping at
    /// the first END.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let w = self
                .word(id)
                .ok_or_else(|| Error::Data(format!("token id {id} out of range for vocabulary of {}", self.len())))?;
            match id {
                END => break,
                PAD | START => {}
                _ => words.push(w),
            }
        }
        Ok(words.join(" "))
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Self::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_word
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn frequency_then_lexicographic_ids() {
        let v = Vocabulary::build(&["a red circle", "a blue square"], 1).unwrap();
        assert_eq!(v.len(), 9);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.corpus_words(), &["a", "blue", "circle", "red", "square"]);
    }

    #[test]
    fn min_count_filters() {
        let v = Vocabulary::build(&["x x x"], 2).unwrap();
        assert_eq!(v.corpus_words(), &["x"]);
        let v = Vocabulary::build(&["x x y"], 2).unwrap();
        assert_eq!(v.corpus_words(), &["x"]);
    }

    #[test]
    fn empty_corpus_is_data_error() {
        assert!(matches!(Vocabulary::build(&[""], 1), Err(Error::Data(_))));
        assert!(matches!(Vocabulary::build::<&str>(&[], 1), Err(Error::Data(_))));
    }

    #[test]
    fn punctuation_and_case_are_normalised() {
        assert_eq!(tokenize("A Dog, running!  \"Fast\"."), vec!["a", "dog", "running", "fast"]);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(&["a red circle"], 1).unwrap();
        let ids = v.encode("a red circle", 6).unwrap();
        assert_eq!(
            ids,
            vec![START, v.id("a").unwrap(), v.id("red").unwrap(), v.id("circle").unwrap(), END, PAD]
        );
        assert_eq!(v.encode("zzz", 4).unwrap(), vec![START, UNK, END, PAD]);
        // Truncation keeps END.
        assert_eq!(v.encode("a red circle", 4).unwrap()[3], END);
        assert!(v.encode("a", 1).is_err());
    }

    #[test]
    fn decode_examples() {
        let v = Vocabulary::build(&["a dog"], 1).unwrap();
        let (a, dog) = (v.id("a").unwrap(), v.id("dog").unwrap());
        assert_eq!(v.decode(&[START, a, dog, END, PAD, PAD]).unwrap(), "a dog");
        assert_eq!(v.decode(&[START, END]).unwrap(), "");
        assert!(matches!(v.decode(&[v.len()]), Err(Error::Data(_))));
    }

    #[test]
    fn serde_round_trip_checks_reserved_prefix() {
        let v = Vocabulary::build(&["a dog"], 1).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_in_vocabulary(words in proptest::collection::vec("[a-z]{1,6}", 1..8)) {
            let caption = words.join(" ");
            let v = Vocabulary::build(&[caption.as_str()], 1).unwrap();
            let ids = v.encode(&caption, words.len() + 2).unwrap();
            prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&caption));
            prop_assert!(ids[1..=words.len()].iter().all(|&id| id >= RESERVED.len()));
        }

        #[test]
        fn build_is_deterministic(caps in proptest::collection::vec("[a-c ]{0,12}", 1..6)) {
            if let Ok(a) = Vocabulary::build(&caps, 1) {
                let mut rev = caps.clone();
                rev.reverse();
                let b = Vocabulary::build(&rev, 1).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
