use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const DEFAULT_MAX_LEN: usize = 64;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lowercased word pieces of `text`; any non-alphanumeric character is a
/// boundary and is dropped.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from training texts. Words are sorted so the id
    /// assignment does not depend on corpus order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(distinct).collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Restores the lookup table after deserialisation.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A tokenized question: `[CLS] w_1 .. w_n [SEP]` padded with `PAD` to
/// `max_len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub raw_text: String,
    pub token_ids: Vec<usize>,
    /// Number of non-padding ids (including CLS and SEP).
    pub length: usize,
    /// Set when the text contained no words.
    pub empty: bool,
}

impl Question {
    pub fn content(&self) -> &[usize] {
        &self.token_ids[..self.length]
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Question> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold CLS and SEP")));
    }
    let ws = words(text);
    if ws.is_empty() {
        log::warn!("empty question text");
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(ws.iter().take(max_len - 2).map(|w| vocab.id(w)));
    ids.push(SEP);
    let length = ids.len();
    ids.resize(max_len, PAD);
    Ok(Question {
        raw_text: text.to_string(),
        token_ids: ids,
        length,
        empty: ws.is_empty(),
    })
}

/// In-vocabulary words of a question, in order.
pub fn detokenize(q: &Question, vocab: &Vocabulary) -> Vec<String> {
    q.content()
        .iter()
        .filter(|&&id| id >= RESERVED.len())
        .filter_map(|&id| vocab.token(id).map(str::to_string))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["Who wrote Moby Dick?"])
    }

    #[test]
    fn empty_text() {
        let q = tokenize("", &vocab(), DEFAULT_MAX_LEN).unwrap();
        assert_eq!(q.content(), &[CLS, SEP]);
        assert_eq!(q.token_ids.len(), DEFAULT_MAX_LEN);
        assert!(q.token_ids[2..].iter().all(|&t| t == PAD));
        assert!(q.empty);
    }

    #[test]
    fn moby_dick() {
        let v = vocab();
        let q = tokenize("Who wrote Moby Dick?", &v, DEFAULT_MAX_LEN).unwrap();
        assert_eq!(q.length, 6);
        assert_eq!(q.content()[0], CLS);
        assert_eq!(q.content()[5], SEP);
        assert!(q.content()[1..5].iter().all(|&t| t > SEP));
        assert_eq!(detokenize(&q, &v), ["who", "wrote", "moby", "dick"]);
    }

    #[test]
    fn oov_and_truncation() {
        let v = vocab();
        let q = tokenize("who is ishmael", &v, 4).unwrap();
        assert_eq!(q.token_ids, vec![CLS, v.id("who"), UNK, SEP]);
    }

    #[test]
    fn build_is_order_independent() {
        assert_eq!(Vocabulary::build(["b a", "c"]), Vocabulary::build(["c", "a b"]));
    }
}
