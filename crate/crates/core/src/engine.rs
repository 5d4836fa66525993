//! End-to-end line translation: tokenize, subword-encode, batch, decode and
//! undo it all, chunk-parallel with output in input order.

use std::collections::HashMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use log::warn;

use crate::batch::{estimate_peak_memory, plan_batches, restore_order, BatchPlan, DecodeLimits};
use crate::error::Result;
use crate::model::{Model, Precision};
use crate::scalar::Scalar;
use crate::search::{max_out_length, translate_ids, SearchConfig};
use crate::text::tokenize::clean;
use crate::text::{detokenize, run_parallel_with, tokenize, ChunkPlan, Lexicon, PAD_ID};
use crate::TokenId;

/// Longest segment handed to the model; longer inputs are cut into pieces
/// that are translated independently and rejoined.
pub const DEFAULT_SPLIT_LEN: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub limits: DecodeLimits,
    pub chunk: ChunkPlan,
    pub search: SearchConfig,
    /// Input is already tokenized: split on whitespace only, and emit
    /// space-joined tokens.
    pub pretokenized: bool,
    pub split_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            limits: DecodeLimits::default(),
            chunk: ChunkPlan::default(),
            search: SearchConfig::default(),
            pretokenized: false,
            split_len: DEFAULT_SPLIT_LEN,
        }
    }
}

pub struct Translator<'a, T: Scalar = f32> {
    model: &'a Model<T>,
    lexicon: &'a Lexicon,
    run: RunConfig,
}

/// One model-sized piece of an input line.
struct Segment {
    line: usize,
    ids: Vec<TokenId>,
}

impl<'a, T: Scalar> Translator<'a, T> {
    pub fn new(model: &'a Model<T>, lexicon: &'a Lexicon, run: RunConfig) -> Self {
        Self { model, lexicon, run }
    }

    pub fn run_config(&self) -> &RunConfig {
        &self.run
    }

    fn split_len(&self) -> usize {
        self.run.split_len.clamp(1, self.model.config().max_positions)
    }

    fn words(&self, line: &str) -> Vec<String> {
        if self.run.pretokenized {
            clean(line).split_whitespace().map(str::to_owned).collect()
        } else {
            tokenize(line)
        }
    }

    fn segments(&self, lines: &[String]) -> Vec<Segment> {
        let mut cache: HashMap<String, Vec<TokenId>> = HashMap::new();
        let split = self.split_len();
        let mut out = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            let mut ids = Vec::new();
            for w in self.words(line) {
                let pieces = cache.entry(w).or_insert_with_key(|w| self.lexicon.encode_tokens(&[w]));
                ids.extend_from_slice(pieces);
            }
            for piece in ids.chunks(split) {
                out.push(Segment {
                    line: i,
                    ids: piece.to_vec(),
                });
            }
        }
        out
    }

    fn decode_batch(&self, segs: &[&Segment]) -> Result<Vec<Vec<TokenId>>> {
        let src_len = segs.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(segs.len() * src_len);
        for s in segs {
            tokens.extend_from_slice(&s.ids);
            tokens.extend(std::iter::repeat_n(PAD_ID, src_len - s.ids.len()));
        }
        let lengths: Vec<usize> = segs.iter().map(|s| s.ids.len()).collect();
        let enc = self.model.encode_padded(&tokens, src_len, &lengths)?;
        translate_ids(self.model, &enc, &self.run.search)
    }

    /// Decodes a batch, falling back to one segment at a time if the batch
    /// fails; a segment that fails alone yields no tokens.
    fn decode_batch_tolerant(&self, segs: &[&Segment]) -> Vec<Vec<TokenId>> {
        let attempt = |s: &[&Segment]| {
            catch_unwind(AssertUnwindSafe(|| self.decode_batch(s))).unwrap_or_else(|_| {
                Err(crate::Error::Integrity("decoder panicked".into()))
            })
        };
        match attempt(segs) {
            Ok(out) => out,
            Err(e) if segs.len() > 1 => {
                warn!("batch of {} failed ({e}); retrying sentence by sentence", segs.len());
                segs.iter().flat_map(|s| self.decode_batch_tolerant(std::slice::from_ref(s))).collect()
            }
            Err(e) => {
                warn!("line {} could not be translated: {e}", segs[0].line);
                vec![Vec::new()]
            }
        }
    }

    /// Batch plan for one chunk of input lines (empty lines excluded).
    pub fn plan(&self, lines: &[String]) -> BatchPlan {
        let segs = self.segments(lines);
        let lengths: Vec<usize> = segs.iter().map(|s| s.ids.len()).collect();
        let mut plan = plan_batches(&lengths, self.run.limits);
        plan.batches.retain(|b| b.max_len > 0);
        plan
    }

    /// Translates one chunk sequentially. Output has one line per input line.
    pub fn translate_chunk(&self, lines: &[String]) -> Vec<String> {
        let segs: Vec<Segment> = self.segments(lines).into_iter().filter(|s| !s.ids.is_empty()).collect();
        let lengths: Vec<usize> = segs.iter().map(|s| s.ids.len()).collect();
        let plan = plan_batches(&lengths, self.run.limits);
        let mut outputs = Vec::with_capacity(segs.len());
        for batch in &plan.batches {
            let members: Vec<&Segment> = batch.indices.iter().map(|&i| &segs[i]).collect();
            outputs.extend(self.decode_batch_tolerant(&members));
        }
        let outputs = restore_order(outputs, &plan).expect("one output per segment");
        let mut per_line: Vec<Vec<TokenId>> = vec![Vec::new(); lines.len()];
        for (seg, ids) in segs.iter().zip(outputs) {
            per_line[seg.line].extend(ids);
        }
        per_line
            .iter()
            .map(|ids| {
                let words = self.lexicon.decode_ids(ids);
                if self.run.pretokenized {
                    words.join(" ")
                } else {
                    detokenize(&words)
                }
            })
            .collect()
    }

    /// Translates `lines` with the configured worker pool, handing each
    /// finished chunk to `sink` in input order.
    pub fn translate_with(&self, lines: &[String], sink: impl FnMut(Vec<String>) -> Result<()>) -> Result<()>
    where
        T: Sync,
    {
        run_parallel_with(lines, &self.run.chunk, |chunk| Ok(self.translate_chunk(chunk)), sink)
    }

    pub fn translate_lines(&self, lines: &[String]) -> Result<Vec<String>>
    where
        T: Sync,
    {
        let mut out = Vec::with_capacity(lines.len());
        self.translate_with(lines, |chunk| {
            out.extend(chunk);
            Ok(())
        })?;
        Ok(out)
    }

    /// Peak-memory bound over every chunk's batch plan.
    pub fn memory_estimate(&self, lines: &[String]) -> usize {
        let cfg = self.model.config();
        self.run
            .chunk
            .chunks(lines.len())
            .into_iter()
            .map(|r| {
                let plan = self.plan(&lines[r]);
                let longest = plan.batches.iter().map(|b| b.max_len).max().unwrap_or(0);
                let out = max_out_length(longest, &self.run.search, cfg.max_positions);
                estimate_peak_memory(&plan, cfg, out)
            })
            .max()
            .unwrap_or_else(|| estimate_peak_memory(&BatchPlan::default(), cfg, 0))
    }
}

/// Source words: whitespace-delimited, before subword segmentation.
pub fn count_words(lines: &[String]) -> usize {
    lines.iter().map(|l| l.split_whitespace().count()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub lines: usize,
    pub words: usize,
    pub wall_seconds: f64,
    pub words_per_second: f64,
    pub sentences_per_second: f64,
    pub precision: Precision,
    pub sbatch: usize,
    pub wbatch: usize,
    pub workers: usize,
    pub chunk_lines: usize,
    pub beam: usize,
    pub memory_estimate_bytes: usize,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lines={}", self.lines)?;
        writeln!(f, "words={}", self.words)?;
        writeln!(f, "wall_seconds={:.6}", self.wall_seconds)?;
        writeln!(f, "words_per_second={:.2}", self.words_per_second)?;
        writeln!(f, "sentences_per_second={:.2}", self.sentences_per_second)?;
        writeln!(f, "precision={}", self.precision)?;
        writeln!(f, "sbatch={}", self.sbatch)?;
        writeln!(f, "wbatch={}", self.wbatch)?;
        writeln!(f, "workers={}", self.workers)?;
        writeln!(f, "chunk_lines={}", self.chunk_lines)?;
        writeln!(f, "beam={}", self.beam)?;
        write!(f, "memory_estimate_bytes={}", self.memory_estimate_bytes)
    }
}

/// Times a full translation of `lines`; the outputs are discarded.
pub fn bench<T: Scalar + Sync>(translator: &Translator<'_, T>, lines: &[String]) -> Result<BenchReport> {
    let memory_estimate_bytes = translator.memory_estimate(lines);
    let start = Instant::now();
    let mut produced = 0;
    translator.translate_with(lines, |chunk| {
        produced += chunk.len();
        Ok(())
    })?;
    let wall_seconds = start.elapsed().as_secs_f64().max(1e-9);
    debug_assert_eq!(produced, lines.len());
    let words = count_words(lines);
    let run = translator.run_config();
    Ok(BenchReport {
        lines: lines.len(),
        words,
        wall_seconds,
        words_per_second: words as f64 / wall_seconds,
        sentences_per_second: lines.len() as f64 / wall_seconds,
        precision: translator.model.precision(),
        sbatch: run.limits.sbatch,
        wbatch: run.limits.wbatch,
        workers: run.chunk.workers,
        chunk_lines: run.chunk.chunk_size,
        beam: run.search.beam_size,
        memory_estimate_bytes,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaseResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelftestReport {
    pub cases: Vec<CaseResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(f, "{}={} {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail)?;
        }
        write!(f, "selftest={}", if self.passed() { "pass" } else { "FAIL" })
    }
}

/// Deterministic pseudo-random bytes (xorshift), decoded lossily like stdin.
fn dirty_line(seed: u64, len: usize) -> String {
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let bytes: Vec<u8> = (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            match (x & 0xff) as u8 {
                b'\n' | b'\r' => b' ',
                b => b,
            }
        })
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn selftest_cases() -> Vec<(&'static str, Vec<String>)> {
    let words = ["the", "cat", "sat", "on", "a", "mat", "and", "looked", "at", "lower", "towers", "."];
    let long_line = {
        let mut s = String::new();
        let mut i = 0;
        while s.len() < 100 * 1024 {
            s.push_str(words[i % words.len()]);
            s.push(' ');
            i += 7;
        }
        s
    };
    let lines = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        ("empty_input", Vec::new()),
        ("single_empty_line", lines(&[""])),
        ("empty_lines_between", lines(&["the cat sat .", "", "on a mat", "", ""])),
        ("whitespace_only", lines(&["   ", "\t\t", " \u{a0} "])),
        ("control_characters", lines(&["\u{0}\u{1}the\u{7} cat\u{1b}[31m", "\u{feff}mat"])),
        ("dirty_bytes", (0..64).map(|i| dirty_line(i, 1 + (i as usize * 37) % 400)).collect()),
        ("unknown_script", lines(&["Доброе утро 世界 🚀🚀", "ℵ₀ ≠ ∞ …", "(((((((("])),
        ("long_token", vec!["x".repeat(5000)]),
        ("line_100kb", vec![long_line]),
        ("repeated_token", vec![["cat"; 3000].join(" ")]),
    ]
}

/// Dirty data, empty input and very long lines through the full pipeline.
/// A case passes when nothing panics, every input line yields exactly one
/// output line, and empty inputs stay empty.
pub fn selftest<T: Scalar + Sync>(translator: &Translator<'_, T>) -> SelftestReport {
    let cases = selftest_cases()
        .into_iter()
        .map(|(name, input)| {
            let start = Instant::now();
            let result = catch_unwind(AssertUnwindSafe(|| translator.translate_lines(&input)));
            let (passed, detail) = match result {
                Err(_) => (false, "panicked".to_owned()),
                Ok(Err(e)) => (false, e.to_string()),
                Ok(Ok(out)) => {
                    let blanks_ok = input
                        .iter()
                        .zip(&out)
                        .all(|(i, o)| !i.trim().is_empty() || o.is_empty());
                    let single_lines = out.iter().all(|o| !o.contains('\n'));
                    let ok = out.len() == input.len() && blanks_ok && single_lines;
                    (
                        ok,
                        format!("lines_in={} lines_out={} seconds={:.3}", input.len(), out.len(), start.elapsed().as_secs_f64()),
                    )
                }
            };
            CaseResult { name, passed, detail }
        })
        .collect();
    SelftestReport { cases }
}

/// Built-in text used to learn the lexicon of [`tiny_random_model`].
pub const SAMPLE_TEXT: &str = "\
The cat sat on the mat, and the dog slept by the door.
A lower tower stood near the newest houses in the old town.
We translated 48 sentences in 2.5 seconds (roughly).
Machine translation turns source sentences into target sentences.
\"Quick!\" she said; the fox jumped over the lazy dogs.
";

/// Small randomly initialised model with a lexicon learned from
/// [`SAMPLE_TEXT`]; output is noise but exercises every stage.
pub fn tiny_random_model(seed: u64) -> Result<(Model<f32>, Lexicon)> {
    use crate::model::{ModelConfig, NormVariant};
    let lexicon = Lexicon::learn(SAMPLE_TEXT, 60);
    let cfg = ModelConfig {
        n_enc_layers: 2,
        n_dec_layers: 1,
        d_model: 32,
        n_heads_enc: 4,
        n_heads_dec: 2,
        ffn_dim_enc: 64,
        ffn_dim_dec: 32,
        vocab_size: lexicon.vocab.len(),
        max_positions: 256,
        norm_variant: NormVariant::L2,
        shared_embeddings: true,
    };
    Ok((Model::random(cfg, seed)?, lexicon))
}
