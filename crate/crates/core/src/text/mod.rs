//! Text side of the pipeline: tokenization, subword segmentation, id mapping
//! and the order-preserving parallel runner.

pub mod bpe;
pub mod parallel;
pub mod tokenize;
pub mod vocab;

pub use bpe::{learn_merges, BpeCodec, BpeVersion};
pub use parallel::{run_parallel, run_parallel_with, ChunkPlan, DEFAULT_CHUNK_LINES};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocab, BOS_ID, EOS_ID, NUM_SPECIALS, PAD_ID, UNK_ID};

/// Subword codec plus the vocabulary its pieces map into.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub codec: BpeCodec,
    pub vocab: Vocab,
}

impl Lexicon {
    /// Learns `num_merges` merges from the tokenized lines of `corpus` and
    /// builds the matching vocabulary over the corpus alphabet.
    pub fn learn(corpus: &str, num_merges: usize) -> Self {
        let words: Vec<String> = corpus.lines().flat_map(tokenize).collect();
        let codec = learn_merges(words.iter().map(String::as_str), num_merges, BpeVersion::V01);
        let vocab = Vocab::from_codec(&codec, words.iter().flat_map(|w| w.chars()));
        Self { codec, vocab }
    }

    /// Tokenized words to ids.
    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<crate::TokenId> {
        self.vocab.encode(&self.codec.encode(tokens))
    }

    /// Ids back to words (subwords joined).
    pub fn decode_ids(&self, ids: &[crate::TokenId]) -> Vec<String> {
        bpe::decode(&self.vocab.decode(ids))
    }
}
