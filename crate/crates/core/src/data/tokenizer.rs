//! Whitespace word tokenizer over a fixed vocabulary file — a stand-in for
//! BPE that keeps toy captions inside the short-text regime.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::DataError;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Word list where position is the token id; `<pad>` is always id 0 and
/// `<unk>` id 1.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self, DataError> {
        if words.len() < 2 || words[0] != PAD || words[1] != UNK {
            return Err(DataError::BadVocab(format!(
                "first two entries must be {PAD} and {UNK}"
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.chars().any(char::is_whitespace) {
                return Err(DataError::BadVocab(format!("word {w:?} contains whitespace")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(DataError::BadVocab(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Covers every synthetic caption with room to spare.
    pub fn toy() -> Self {
        let words = [
            PAD, UNK, "a", "photo", "of", "red", "green", "blue", "yellow", "circle", "square",
            "triangle", "cross",
        ];
        Self::new(words.iter().map(|s| s.to_string()).collect()).expect("toy vocab is valid")
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Lowercase, split on whitespace, look each word up; unknown → `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.to_lowercase()
            .split_whitespace()
            .map(|w| *self.index.get(w).unwrap_or(&1))
            .collect()
    }

    /// Inverse for in-vocab text; pads are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != 0)
            .map(|&id| {
                self.words
                    .get(id as usize)
                    .map_or(UNK, String::as_str)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(fs::write(path, self.words.join("\n"))?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        Self::new(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{caption_for, N_CLASSES};

    #[test]
    fn lookup_matches_vocab_positions() {
        let v = Vocab::toy();
        let ids = v.tokenize("a red circle");
        assert_eq!(
            ids,
            vec![
                v.tokenize("a")[0],
                v.tokenize("red")[0],
                v.tokenize("circle")[0]
            ]
        );
        assert_eq!(ids, vec![2, 5, 9]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::toy();
        assert_eq!(v.tokenize("a zebra"), vec![2, v.unk_id()]);
    }

    #[test]
    fn round_trip_for_in_vocab_captions() {
        let v = Vocab::toy();
        for text in ["a photo of a red circle", "YELLOW CROSS", "of of of"] {
            let ids = v.tokenize(text);
            assert_eq!(v.detokenize(&ids), text.to_lowercase());
        }
    }

    #[test]
    fn every_synthetic_caption_fits_eight_tokens() {
        let v = Vocab::toy();
        for id in 0..N_CLASSES {
            let ids = v.tokenize(&caption_for(id));
            assert!(ids.len() <= 8, "caption {:?} has {} tokens", caption_for(id), ids.len());
            assert!(ids.iter().all(|&t| t != v.unk_id()), "caption not covered");
        }
    }

    #[test]
    fn save_load_keeps_ids_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::toy();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v.tokenize("a photo of a blue square"), loaded.tokenize("a photo of a blue square"));
        assert_eq!(loaded.len(), v.len());
    }

    #[test]
    fn malformed_vocabularies_rejected() {
        let bad = |words: &[&str]| {
            Vocab::new(words.iter().map(|s| s.to_string()).collect()).unwrap_err()
        };
        assert!(matches!(bad(&["<unk>", "<pad>"]), DataError::BadVocab(_)));
        assert!(matches!(bad(&["<pad>"]), DataError::BadVocab(_)));
        assert!(matches!(
            bad(&["<pad>", "<unk>", "a", "a"]),
            DataError::BadVocab(_)
        ));
        assert!(matches!(
            bad(&["<pad>", "<unk>", "two words"]),
            DataError::BadVocab(_)
        ));
    }
}
