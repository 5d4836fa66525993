//! Token ↔ id mapping. Ids 0..4 are the special tokens.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::bpe::{BpeCodec, END_OF_WORD, SEPARATOR};
use crate::error::{Error, Result};
use crate::TokenId;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIALS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// `tokens[i]` gets id `i`; the first four must be the specials in order.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIALS {
            return Err(Error::Integrity(format!("vocabulary must start with {SPECIALS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Integrity(format!("vocabulary token {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Integrity(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials, then `c@@` and `c` for every alphabet character, then both
    /// piece forms of every merge result.
    pub fn from_codec(codec: &BpeCodec, alphabet: impl IntoIterator<Item = char>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut add = |t: String, tokens: &mut Vec<String>| {
            if !t.is_empty() && seen.insert(t.clone()) {
                tokens.push(t);
            }
        };
        let mut chars: Vec<char> = alphabet.into_iter().filter(|c| !c.is_whitespace()).collect();
        chars.sort_unstable();
        chars.dedup();
        for c in chars {
            add(format!("{c}{SEPARATOR}"), &mut tokens);
            add(c.to_string(), &mut tokens);
        }
        for (a, b) in codec.merges() {
            let symbol = format!("{a}{b}");
            match symbol.strip_suffix(END_OF_WORD) {
                Some(last) => add(last.to_owned(), &mut tokens),
                None => {
                    add(format!("{symbol}{SEPARATOR}"), &mut tokens);
                    add(symbol, &mut tokens);
                }
            }
        }
        Self::new(tokens).expect("constructed vocabulary is well formed")
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

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, pieces: &[S]) -> Vec<TokenId> {
        pieces.iter().map(|p| self.id(p.as_ref())).collect()
    }

    /// Pieces for `ids`; pad/bos/eos are dropped, unknown ids read as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD_ID | BOS_ID | EOS_ID))
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK_ID as usize]).to_owned())
            .collect()
    }

    /// One `token id` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t} {i}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Integrity(format!("vocabulary line {}: {msg}", i + 1));
            let (tok, id) = line.rsplit_once(' ').ok_or_else(|| bad("expected `token id`"))?;
            let id: usize = id.trim().parse().map_err(|_| bad("id is not a number"))?;
            if id != i {
                return Err(bad("ids must be consecutive from 0"));
            }
            tokens.push(tok.to_owned());
        }
        Self::new(tokens)
    }
}
