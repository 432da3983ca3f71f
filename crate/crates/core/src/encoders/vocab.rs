use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::words;
use crate::error::{Error, Result};

pub type TokenId = usize;
pub type TokenSeq = Vec<TokenId>;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

/// Word-level vocabulary. Ids `0..3` are `<pad>`, `<eos>`, `<unk>`; the rest
/// are words in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Collects every lowercased word of `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut ws: Vec<String> = texts.into_iter().flat_map(words).collect();
        ws.sort_unstable();
        ws.dedup();
        ws.retain(|w| !SPECIALS.contains(&w.as_str()));
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(ws).collect();
        Self::from_tokens(tokens).expect("built vocabularies are well formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Parameter(format!(
                "vocabulary must start with the special tokens {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parameter(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Lowercases, splits on whitespace, maps words to ids (unknown → `<unk>`),
    /// keeps at most `max_len - 1` of them and appends `<eos>`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSeq {
        assert!(max_len >= 2, "max_len must leave room for one token and <eos>");
        let mut ids: TokenSeq = words(text).take(max_len - 1).map(|w| self.id(&w)).collect();
        ids.push(EOS);
        ids
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(["a b"]);
        let (a, b) = (v.id("a"), v.id("b"));
        assert_eq!((a, b), (3, 4));
        assert_eq!(v.tokenize("A b", 128), vec![a, b, EOS]);
        assert_eq!(v.tokenize("zzz", 128), vec![UNK, EOS]);
        assert_eq!(v.tokenize("", 128), vec![EOS]);
        let long = vec!["a"; 200].join(" ");
        let seq = v.tokenize(&long, 128);
        assert_eq!(seq.len(), 128);
        assert_eq!(*seq.last().unwrap(), EOS);
    }

    #[test]
    fn ids_are_dense_and_specials_fixed() {
        let v = Vocabulary::build(["b a c a", "<eos> d"]);
        assert_eq!(v.tokens(), &["<pad>", "<eos>", "<unk>", "a", "b", "c", "d"]);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }
}
