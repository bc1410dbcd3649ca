//! Deterministic corpus perturbations.
//!
//! Words are maximal runs of non-whitespace characters; punctuation stays
//! attached to its word. Scripts written without spaces therefore move as
//! whole runs when shuffled.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::rng;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("input is not valid UTF-8: {0}")]
    Utf8(#[from] std::string::FromUtf8Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus {0:?} has no sentences")]
    Empty(String),
}

/// Sentence-aligned corpus; line `i` of one condition pairs with line `i` of another.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub id: String,
    pub language: String,
    pub sentences: Vec<String>,
}

impl Corpus {
    pub fn new(id: impl Into<String>, language: impl Into<String>, sentences: Vec<String>) -> Result<Self, PerturbError> {
        let id = id.into();
        if sentences.is_empty() {
            return Err(PerturbError::Empty(id));
        }
        Ok(Self {
            id,
            language: language.into(),
            sentences,
        })
    }

    /// One sentence per line, UTF-8.
    pub fn read(path: &Path, language: &str) -> Result<Self, PerturbError> {
        let bytes = fs::read(path).map_err(|source| PerturbError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let text = String::from_utf8(bytes)?;
        let sentences = text.lines().map(str::to_owned).collect();
        Self::new(path.display().to_string(), language, sentences)
    }

    pub fn write(&self, path: &Path) -> Result<(), PerturbError> {
        let mut out = self.sentences.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|source| PerturbError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Permutes the words of one sentence with a generator seeded from `seed`.
/// Sentences with fewer than two words are returned unchanged; otherwise
/// words are re-joined with single spaces.
pub fn shuffle_sentence(sentence: &str, seed: u64) -> String {
    let mut words: Vec<&str> = sentence.split_whitespace().collect();
    if words.len() < 2 {
        return sentence.to_owned();
    }
    rng::shuffle(&mut words, &mut rng::seeded(seed));
    words.join(" ")
}

/// Shuffles every sentence; sentence `i` uses the stream `derive_seed(seed, i)`.
pub fn shuffle_words(corpus: &Corpus, seed: u64) -> Corpus {
    let sentences = corpus
        .sentences
        .par_iter()
        .enumerate()
        .map(|(i, s)| shuffle_sentence(s, rng::derive_seed(seed, i as u64)))
        .collect();
    Corpus {
        id: format!("{}#shuffled-{seed}", corpus.id),
        language: corpus.language.clone(),
        sentences,
    }
}

/// Canonical decomposition, removal of combining marks, recomposition.
pub fn strip_diacritics(text: &str) -> String {
    text.nfd().filter(|c| !is_combining_mark(*c)).nfc().collect()
}

pub fn strip_diacritics_bytes(bytes: &[u8]) -> Result<String, PerturbError> {
    let text = String::from_utf8(bytes.to_vec())?;
    Ok(strip_diacritics(&text))
}

pub fn strip_corpus(corpus: &Corpus) -> Corpus {
    Corpus {
        id: format!("{}#ascii", corpus.id),
        language: corpus.language.clone(),
        sentences: corpus.sentences.par_iter().map(|s| strip_diacritics(s)).collect(),
    }
}

pub fn combining_mark_count(text: &str) -> usize {
    text.chars().filter(|&c| is_combining_mark(c)).count()
}
