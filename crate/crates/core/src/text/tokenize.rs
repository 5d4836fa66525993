//! Rule-subset word tokenizer and its inverse.
//!
//! Words are split on whitespace, then non-alphanumeric characters are peeled
//! one at a time off both ends. Internal punctuation (`3.14`, `don't`, `1,000`)
//! stays put and a few abbreviations keep their trailing period.

/// Abbreviations whose periods stay attached.
pub const PROTECTED: &[&str] = &[
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "St.", "Jr.", "Sr.", "e.g.", "i.e.", "etc.", "vs.", "U.S.", "U.K.",
    "Inc.", "Ltd.",
];

/// Single-character tokens glued to the token before them on detokenization.
const CLOSE: &[char] = &['.', ',', '!', '?', ';', ':', ')', ']', '}', '%', '»', '…'];
/// Single-character tokens glued to the token after them.
const OPEN: &[char] = &['(', '[', '{', '$', '£', '€', '¥', '#', '¿', '¡', '«'];

/// Drops control characters other than whitespace.
pub fn clean(line: &str) -> String {
    line.chars().filter(|c| !c.is_control() || c.is_whitespace()).collect()
}

pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in clean(line).split_whitespace() {
        split_word(word, &mut out);
    }
    out
}

fn split_word(word: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    let protected = |s: usize, e: usize| {
        let core: String = chars[s..e].iter().collect();
        PROTECTED.contains(&core.as_str())
    };
    let (mut start, mut end) = (0, chars.len());
    while start < end && !chars[start].is_alphanumeric() && !protected(start, end) {
        out.push(chars[start].to_string());
        start += 1;
    }
    let mut tail = Vec::new();
    while start < end && !chars[end - 1].is_alphanumeric() && !protected(start, end) {
        tail.push(chars[end - 1].to_string());
        end -= 1;
    }
    if start < end {
        out.push(chars[start..end].iter().collect());
    }
    out.extend(tail.into_iter().rev());
}

fn single(tok: &str) -> Option<char> {
    let mut it = tok.chars();
    match (it.next(), it.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for tok in tokens {
        let tok = tok.as_ref();
        let c = single(tok);
        if !glue_next && !c.is_some_and(|c| CLOSE.contains(&c)) {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = c.is_some_and(|c| OPEN.contains(&c));
    }
    out
}
