//! Byte-pair encoding with subword-nmt semantics and `@@` continuation marks.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const SEPARATOR: &str = "@@";
pub const END_OF_WORD: &str = "</w>";

/// Codes-file dialect. `V01` treats the end-of-word mark as its own symbol,
/// `V02` attaches it to the last character.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BpeVersion {
    #[default]
    V01,
    V02,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeCodec {
    merges: Vec<(String, String)>,
    /// `ranks[left][right]` is the priority of merging `left right`.
    ranks: HashMap<String, HashMap<String, usize>>,
    version: BpeVersion,
}

impl BpeCodec {
    /// Merge priority is list order; duplicates are rejected.
    pub fn new(merges: Vec<(String, String)>, version: BpeVersion) -> Result<Self> {
        let mut ranks: HashMap<String, HashMap<String, usize>> = HashMap::new();
        for (i, pair) in merges.iter().enumerate() {
            if pair.0.is_empty() || pair.1.is_empty() {
                return Err(Error::Codes {
                    line: i + 1,
                    message: "empty symbol".into(),
                });
            }
            if ranks.entry(pair.0.clone()).or_default().insert(pair.1.clone(), i).is_some() {
                return Err(Error::Codes {
                    line: i + 1,
                    message: format!("duplicate merge {} {}", pair.0, pair.1),
                });
            }
        }
        Ok(Self { merges, ranks, version })
    }

    /// Parses a codes file: an optional `#version` header, then one merge
    /// per line as two space-separated symbols (a trailing count is ignored).
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = BpeVersion::V01;
        let mut merges = Vec::new();
        let mut line_of = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if i == 0 && line.starts_with("#version") {
                version = match line.trim_start_matches("#version:").trim() {
                    "0.1" => BpeVersion::V01,
                    "0.2" => BpeVersion::V02,
                    other => {
                        return Err(Error::Codes {
                            line: 1,
                            message: format!("unsupported version {other:?}"),
                        })
                    }
                };
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            match fields[..] {
                [a, b] | [a, b, _] if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_owned(), b.to_owned()));
                    line_of.push(i + 1);
                }
                _ => {
                    return Err(Error::Codes {
                        line: i + 1,
                        message: format!("expected two symbols, got {line:?}"),
                    })
                }
            }
        }
        Self::new(merges, version).map_err(|e| match e {
            Error::Codes { line, message } => Error::Codes {
                line: line_of[line - 1],
                message,
            },
            other => other,
        })
    }

    pub fn to_codes(&self) -> String {
        let mut s = match self.version {
            BpeVersion::V01 => String::new(),
            BpeVersion::V02 => "#version: 0.2\n".to_owned(),
        };
        for (a, b) in &self.merges {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn version(&self) -> BpeVersion {
        self.version
    }

    fn initial_symbols(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        match self.version {
            BpeVersion::V01 => symbols.push(END_OF_WORD.to_owned()),
            BpeVersion::V02 => {
                if let Some(last) = symbols.last_mut() {
                    last.push_str(END_OF_WORD);
                }
            }
        }
        symbols
    }

    /// Symbols of `word` after all merges, end-of-word mark removed.
    pub fn segment(&self, word: &str) -> Vec<String> {
        if word.is_empty() {
            return Vec::new();
        }
        let mut symbols = self.initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&w[0])?.get(&w[1]).copied())
                .min();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == *a && symbols[i + 1] == *b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        if symbols.last().is_some_and(|s| s == END_OF_WORD) {
            symbols.pop();
        } else if let Some(last) = symbols.last_mut() {
            if let Some(stripped) = last.strip_suffix(END_OF_WORD) {
                *last = stripped.to_owned();
            }
        }
        symbols
    }

    /// Subword pieces of one word: every piece but the last ends in `@@`.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut pieces = self.segment(word);
        let n = pieces.len();
        for p in pieces.iter_mut().take(n.saturating_sub(1)) {
            p.push_str(SEPARATOR);
        }
        pieces
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens.iter().flat_map(|t| self.encode_word(t.as_ref())).collect()
    }
}

/// Joins pieces ending in `@@` with their successor. A trailing piece that
/// still carries the separator is kept as-is.
pub fn decode<S: AsRef<str>>(pieces: &[S]) -> Vec<String> {
    let mut out = Vec::new();
    let mut pending = String::new();
    let mut open = false;
    for p in pieces {
        let p = p.as_ref();
        match p.strip_suffix(SEPARATOR) {
            Some(stem) => {
                pending.push_str(stem);
                open = true;
            }
            None => {
                pending.push_str(p);
                out.push(std::mem::take(&mut pending));
                open = false;
            }
        }
    }
    if open {
        pending.push_str(SEPARATOR);
        out.push(pending);
    }
    out
}

/// Learns up to `num_merges` merges from a word list by repeatedly joining the
/// most frequent adjacent pair (ties: lexicographically smallest pair).
pub fn learn_merges<'a>(words: impl IntoIterator<Item = &'a str>, num_merges: usize, version: BpeVersion) -> BpeCodec {
    let empty = BpeCodec::new(Vec::new(), version).expect("empty codec");
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for w in words {
        if !w.is_empty() {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = freq.into_iter().collect();
    entries.sort_unstable();
    let mut corpus: Vec<(Vec<String>, usize)> = entries.into_iter().map(|(w, c)| (empty.initial_symbols(w), c)).collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    while merges.len() < num_merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, c) in &corpus {
            for w in symbols.windows(2) {
                *counts.entry((&w[0], &w[1])).or_default() += c;
            }
        }
        let Some(((a, b), _)) = counts
            .into_iter()
            .max_by(|(p, c), (q, d)| c.cmp(d).then_with(|| q.cmp(p)))
        else {
            break;
        };
        let (a, b) = (a.to_owned(), b.to_owned());
        for (symbols, _) in &mut corpus {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == a && symbols[i + 1] == b {
                    let right = symbols.remove(i + 1);
                    symbols[i].push_str(&right);
                }
                i += 1;
            }
        }
        merges.push((a, b));
    }
    BpeCodec::new(merges, version).expect("learned merges are unique")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec(pairs: &[(&str, &str)]) -> BpeCodec {
        BpeCodec::new(pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(), BpeVersion::V01).unwrap()
    }

    #[test]
    fn hand_traced_merges() {
        let c = codec(&[("l", "o"), ("lo", "w")]);
        assert_eq!(c.encode_word("low"), ["low"]);
        assert_eq!(c.encode_word("lower"), ["low@@", "e@@", "r"]);
        assert_eq!(c.encode_word("x"), ["x"]);
        assert!(c.encode_word("").is_empty());
    }

    #[test]
    fn end_of_word_merges() {
        let c = codec(&[("e", "r"), ("er", "</w>"), ("l", "o")]);
        assert_eq!(c.encode_word("lower"), ["lo@@", "w@@", "er"]);
        // "er" inside a word cannot use the word-final merge
        assert_eq!(c.encode_word("erl"), ["er@@", "l"]);
        let v2 = BpeCodec::parse("#version: 0.2\nl o\nlo w</w>\n").unwrap();
        assert_eq!(v2.version(), BpeVersion::V02);
        assert_eq!(v2.encode_word("low"), ["low"]);
        assert_eq!(v2.encode_word("lowe"), ["lo@@", "w@@", "e"]);
    }

    #[test]
    fn best_rank_applies_everywhere() {
        let c = codec(&[("a", "b"), ("b", "a")]);
        assert_eq!(c.encode_word("ababa"), ["ab@@", "ab@@", "a"]);
        let c = codec(&[("b", "a"), ("a", "b")]);
        assert_eq!(c.encode_word("ababa"), ["a@@", "ba@@", "ba"]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&["low@@", "er"]), ["lower"]);
        assert_eq!(decode(&["hello"]), ["hello"]);
        assert_eq!(decode(&["a@@"]), ["a@@"]);
        assert_eq!(decode(&["a@@", "b", "c@@", "d@@"]), ["ab", "cd@@"]);
    }

    #[test]
    fn parse_and_write() {
        let c = BpeCodec::parse("l o\nlo w 17\n\n").unwrap();
        assert_eq!(c.merges().len(), 2);
        assert_eq!(BpeCodec::parse(&c.to_codes()).unwrap(), c);
        assert!(matches!(BpeCodec::parse("l o\nbad\n"), Err(Error::Codes { line: 2, .. })));
        assert!(matches!(BpeCodec::parse("#version: 0.2\na b\na b\n"), Err(Error::Codes { line: 3, .. })));
        assert!(BpeCodec::parse("#version: 9\n").is_err());
    }

    #[test]
    fn learned_codec_covers_training_words() {
        let words = ["low", "lower", "lowest", "newer", "wider", "low"];
        let c = learn_merges(words, 1000, BpeVersion::V01);
        for w in words {
            assert_eq!(c.encode_word(w), [w]);
        }
        let few = learn_merges(words, 1, BpeVersion::V01);
        // (l,o) and (o,w) both occur 4 times; the smaller pair wins
        assert_eq!(few.merges()[0], ("l".to_string(), "o".to_string()));
    }
}
