//! Tokenization, n-gram extraction and the term vocabulary.
//!
//! Text is lowercased and split on anything that is not alphanumeric. Every
//! CJK codepoint becomes its own token. A sequence of tokens expands into its
//! unigrams followed by its adjacent bigrams, and each n-gram maps to one
//! vocabulary id. Unknown n-grams share id 0.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

/// Term stored at id 0; every unknown n-gram encodes to it.
pub const OOV_TERM: &str = "<OOV>";
pub const OOV_ID: u32 = 0;
/// Joins the two halves of a bigram. Tokenization never emits it.
pub const BIGRAM_SEP: char = '\u{1}';

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // hiragana, katakana
        | 0x3400..=0x4DBF    // CJK extension A
        | 0x4E00..=0x9FFF    // CJK unified ideographs
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // extensions B and beyond
}

pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if is_cjk(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// All unigrams in order, then all adjacent bigrams.
pub fn ngrams<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut terms: Vec<String> = tokens.iter().map(|t| t.as_ref().to_owned()).collect();
    for pair in tokens.windows(2) {
        let mut bigram = String::with_capacity(pair[0].as_ref().len() + pair[1].as_ref().len() + 1);
        bigram.push_str(pair[0].as_ref());
        bigram.push(BIGRAM_SEP);
        bigram.push_str(pair[1].as_ref());
        terms.push(bigram);
    }
    terms
}

/// Encoded n-gram ids of one text: unigram ids followed by bigram ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    pub fn token_count(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    terms: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary holding `<OOV>` plus the `max_size - 1` most
    /// frequent n-grams seen at least `min_count` times. Ties in frequency are
    /// ordered lexicographically, so the result does not depend on corpus order.
    pub fn build<I, S>(corpus: I, max_size: usize, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size == 0 {
            return Err(Error::invalid("vocab max_size must be at least 1"));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for term in ngrams(&tokenize(text.as_ref())) {
                *counts.entry(term).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        // Ties: unigrams before bigrams, then lexicographic.
        let is_bigram = |t: &str| t.contains(BIGRAM_SEP);
        ranked.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| is_bigram(&a.0).cmp(&is_bigram(&b.0)))
                .then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(max_size - 1);

        let mut terms = Vec::with_capacity(ranked.len() + 1);
        terms.push(OOV_TERM.to_owned());
        terms.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_terms(terms)
    }

    /// Rebuilds a vocabulary from its id-ordered term list.
    pub fn from_terms(terms: Vec<String>) -> Result<Self> {
        if terms.first().map(String::as_str) != Some(OOV_TERM) {
            return Err(Error::invalid(format!("vocab must start with {OOV_TERM}")));
        }
        if terms.len() > u32::MAX as usize {
            return Err(Error::invalid("vocab too large for 32-bit ids"));
        }
        let mut index = HashMap::with_capacity(terms.len());
        for (id, term) in terms.iter().enumerate() {
            if index.insert(term.clone(), id as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocab term {term:?}")));
            }
        }
        Ok(Vocab { terms, index })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        // Always holds <OOV>.
        false
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, term: &str) -> u32 {
        self.index.get(term).copied().unwrap_or(OOV_ID)
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        let ids = ngrams(&tokenize(text)).iter().map(|t| self.id(t)).collect();
        TokenSeq { ids }
    }

    /// One term per line, line number = id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut out = BufWriter::new(file);
        for term in &self.terms {
            writeln!(out, "{term}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::file(path, e))?;
        let terms = BufReader::new(file).lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_terms(terms)
    }
}
