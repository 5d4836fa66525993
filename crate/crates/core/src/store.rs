//! Binary model files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "LIGHTMT\0"
//! version  u32
//! config   9 × u64 (layers, dims, heads, ffn sizes, vocab, max positions),
//!          u8 norm (0 = l2, 1 = l1), u8 shared embeddings
//! lexicon  u64 token count (0 = none), tokens; u8 bpe version; u64 merge
//!          count, merges as symbol pairs
//! entries  u64 count, then per entry: name, u8 dtype, u8 rank, rank × u64
//!          dims, u64 absolute offset, u64 byte length
//! payload  8-byte aligned tensors
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Dtypes: 0 = f32 values;
//! 1 = int8 weight (`cols` f32 scales, `cols` f32 zeropoints, then the
//! row-major i8 codes); 2 = alias, whose payload is the name of the source
//! entry. The tied output projection is stored as an alias of the embedding.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, LoadError, Result};
use crate::model::{
    tied_output, AttentionWeights, DecoderLayer, EncoderLayer, FeedForward, Linear, LinearWeight, Model,
    ModelConfig, NormParams, NormVariant, Precision, Weights,
};
use crate::quant::{dequantize_weights, pack, quantize_weights, unpack, QuantizedMatrix, DEFAULT_PANEL_WIDTH, DEFAULT_ROW_BLOCK};
use crate::tensor::Tensor;
use crate::text::{BpeCodec, BpeVersion, Lexicon, Vocab};

pub const MAGIC: &[u8; 8] = b"LIGHTMT\0";
pub const FORMAT_VERSION: u32 = 1;
const EMBEDDING: &str = "embed.tokens";
const OUTPUT_WEIGHT: &str = "output.weight";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    Int8,
    Alias,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::Int8 => 1,
            Dtype::Alias => 2,
        }
    }

    fn from_tag(name: &str, tag: u8) -> Result<Self, LoadError> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::Int8),
            2 => Ok(Dtype::Alias),
            t => Err(LoadError::BadDtype(name.to_owned(), t)),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::Int8 => "i8q",
            Dtype::Alias => "alias",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// A model plus its optional text assets, as read from disk.
#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub model: Model<f32>,
    pub lexicon: Option<Lexicon>,
}

/// Header and directory of a model file.
#[derive(Clone, Debug)]
pub struct FileSummary {
    pub version: u32,
    pub config: ModelConfig,
    pub vocab_tokens: usize,
    pub merges: usize,
    pub entries: Vec<Entry>,
    pub file_len: u64,
}

impl fmt::Display for FileSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "format_version={}", self.version)?;
        writeln!(f, "file_bytes={}", self.file_len)?;
        writeln!(
            f,
            "config=enc:{} dec:{} d_model:{} heads_enc:{} heads_dec:{} ffn_enc:{} ffn_dec:{} vocab:{} max_positions:{} norm:{} shared:{}",
            c.n_enc_layers,
            c.n_dec_layers,
            c.d_model,
            c.n_heads_enc,
            c.n_heads_dec,
            c.ffn_dim_enc,
            c.ffn_dim_dec,
            c.vocab_size,
            c.max_positions,
            match c.norm_variant {
                NormVariant::L2 => "l2",
                NormVariant::L1 => "l1",
            },
            c.shared_embeddings
        )?;
        writeln!(f, "params={}", c.count_params())?;
        writeln!(f, "vocab_tokens={}", self.vocab_tokens)?;
        writeln!(f, "bpe_merges={}", self.merges)?;
        writeln!(f, "tensors={}", self.entries.len())?;
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            writeln!(f, "{} {} [{}] offset={} bytes={}", e.name, e.dtype, dims.join("x"), e.offset, e.len)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- writing

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

enum Payload<'a> {
    Values(&'a [f32]),
    Quantized(QuantizedMatrix),
    Alias(&'static str),
}

struct Pending<'a> {
    name: String,
    shape: Vec<usize>,
    payload: Payload<'a>,
}

fn push_linear<'a>(out: &mut Vec<Pending<'a>>, prefix: &str, l: &'a Linear<f32>, precision: Precision) -> Result<()> {
    let payload = match (&l.weight, precision) {
        (LinearWeight::Dense(w), Precision::F32) => Payload::Values(w.data()),
        (LinearWeight::Dense(w), Precision::Int8) => Payload::Quantized(quantize_weights(w)?),
        (LinearWeight::Int8(p), Precision::Int8) => Payload::Quantized(unpack(p)),
        (LinearWeight::Int8(_), Precision::F32) => {
            return Err(Error::Config(format!("{prefix}: quantized weights cannot be saved as f32")))
        }
    };
    out.push(Pending {
        name: format!("{prefix}.weight"),
        shape: vec![l.in_dim(), l.out_dim()],
        payload,
    });
    out.push(Pending {
        name: format!("{prefix}.bias"),
        shape: vec![l.bias.len()],
        payload: Payload::Values(&l.bias),
    });
    Ok(())
}

fn push_norm<'a>(out: &mut Vec<Pending<'a>>, prefix: &str, n: &'a NormParams<f32>) {
    for (suffix, v) in [("gain", &n.gain), ("bias", &n.bias)] {
        out.push(Pending {
            name: format!("{prefix}.{suffix}"),
            shape: vec![v.len()],
            payload: Payload::Values(v),
        });
    }
}

fn push_attention<'a>(out: &mut Vec<Pending<'a>>, prefix: &str, a: &'a AttentionWeights<f32>, p: Precision) -> Result<()> {
    for (name, l) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
        push_linear(out, &format!("{prefix}.{name}"), l, p)?;
    }
    Ok(())
}

fn push_ffn<'a>(out: &mut Vec<Pending<'a>>, prefix: &str, f: &'a FeedForward<f32>, p: Precision) -> Result<()> {
    push_linear(out, &format!("{prefix}.w1"), &f.w1, p)?;
    push_linear(out, &format!("{prefix}.w2"), &f.w2, p)
}

fn collect_entries<'a>(w: &'a Weights<f32>, precision: Precision) -> Result<Vec<Pending<'a>>> {
    let mut out = Vec::new();
    out.push(Pending {
        name: EMBEDDING.into(),
        shape: w.embedding.shape().to_vec(),
        payload: Payload::Values(w.embedding.data()),
    });
    if let Some(src) = &w.src_embedding {
        out.push(Pending {
            name: "embed.source".into(),
            shape: src.shape().to_vec(),
            payload: Payload::Values(src.data()),
        });
    }
    for (i, l) in w.encoder.iter().enumerate() {
        let p = format!("enc.{i}");
        push_attention(&mut out, &format!("{p}.self_attn"), &l.self_attn, precision)?;
        push_norm(&mut out, &format!("{p}.attn_norm"), &l.attn_norm);
        push_ffn(&mut out, &format!("{p}.ffn"), &l.ffn, precision)?;
        push_norm(&mut out, &format!("{p}.ffn_norm"), &l.ffn_norm);
    }
    for (i, l) in w.decoder.iter().enumerate() {
        let p = format!("dec.{i}");
        push_attention(&mut out, &format!("{p}.self_attn"), &l.self_attn, precision)?;
        push_norm(&mut out, &format!("{p}.self_norm"), &l.self_norm);
        push_attention(&mut out, &format!("{p}.cross_attn"), &l.cross_attn, precision)?;
        push_norm(&mut out, &format!("{p}.cross_norm"), &l.cross_norm);
        if let Some((ffn, norm)) = &l.ffn {
            push_ffn(&mut out, &format!("{p}.ffn"), ffn, precision)?;
            push_norm(&mut out, &format!("{p}.ffn_norm"), norm);
        }
    }
    if w.output_tied {
        out.push(Pending {
            name: OUTPUT_WEIGHT.into(),
            shape: vec![w.output.in_dim(), w.output.out_dim()],
            payload: Payload::Alias(EMBEDDING),
        });
        out.push(Pending {
            name: "output.bias".into(),
            shape: vec![w.output.bias.len()],
            payload: Payload::Values(&w.output.bias),
        });
    } else {
        push_linear(&mut out, "output", &w.output, precision)?;
    }
    Ok(out)
}

fn write_config(w: &mut Writer, c: &ModelConfig) {
    for v in [
        c.n_enc_layers,
        c.n_dec_layers,
        c.d_model,
        c.n_heads_enc,
        c.n_heads_dec,
        c.ffn_dim_enc,
        c.ffn_dim_dec,
        c.vocab_size,
        c.max_positions,
    ] {
        w.u64(v as u64);
    }
    w.u8(match c.norm_variant {
        NormVariant::L2 => 0,
        NormVariant::L1 => 1,
    });
    w.u8(c.shared_embeddings as u8);
}

fn write_lexicon(w: &mut Writer, lex: Option<&Lexicon>) {
    let Some(lex) = lex else {
        w.u64(0);
        return;
    };
    w.u64(lex.vocab.len() as u64);
    for t in lex.vocab.tokens() {
        w.str(t);
    }
    w.u8(match lex.codec.version() {
        BpeVersion::V01 => 1,
        BpeVersion::V02 => 2,
    });
    w.u64(lex.codec.merges().len() as u64);
    for (a, b) in lex.codec.merges() {
        w.str(a);
        w.str(b);
    }
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

fn payload_len(p: &Payload<'_>) -> usize {
    match p {
        Payload::Values(v) => v.len() * 4,
        Payload::Quantized(q) => q.cols() * 8 + q.q().len(),
        Payload::Alias(name) => name.len(),
    }
}

/// Serializes a model. `Int8` stores every GEMM weight as per-column
/// quantized codes; embeddings, biases and norms stay f32.
pub fn to_bytes(cfg: &ModelConfig, weights: &Weights<f32>, lexicon: Option<&Lexicon>, precision: Precision) -> Result<Vec<u8>> {
    cfg.validate()?;
    weights.validate(cfg)?;
    if let Some(lex) = lexicon {
        if lex.vocab.len() > cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens exceeds vocab_size {}",
                lex.vocab.len(),
                cfg.vocab_size
            )));
        }
    }
    let entries = collect_entries(weights, precision)?;

    let mut head = Writer::default();
    head.0.extend_from_slice(MAGIC);
    head.u32(FORMAT_VERSION);
    write_config(&mut head, cfg);
    write_lexicon(&mut head, lexicon);
    let dir_len: usize = 8 + entries
        .iter()
        .map(|e| 4 + e.name.len() + 1 + 1 + 8 * e.shape.len() + 16)
        .sum::<usize>();
    let mut offset = align8(head.0.len() + dir_len);
    let mut placed = Vec::with_capacity(entries.len());
    head.u64(entries.len() as u64);
    for e in &entries {
        let len = payload_len(&e.payload);
        head.str(&e.name);
        head.u8(match e.payload {
            Payload::Values(_) => Dtype::F32,
            Payload::Quantized(_) => Dtype::Int8,
            Payload::Alias(_) => Dtype::Alias,
        }
        .tag());
        head.u8(e.shape.len() as u8);
        for &d in &e.shape {
            head.u64(d as u64);
        }
        head.u64(offset as u64);
        head.u64(len as u64);
        placed.push(offset);
        offset = align8(offset + len);
    }
    let mut w = head;
    for (e, &at) in entries.iter().zip(&placed) {
        w.0.resize(at, 0);
        match &e.payload {
            Payload::Values(v) => w.f32s(v),
            Payload::Quantized(q) => {
                w.f32s(q.col_scale());
                w.f32s(q.col_zeropoint());
                w.0.extend(q.q().iter().map(|&b| b as u8));
            }
            Payload::Alias(name) => w.0.extend_from_slice(name.as_bytes()),
        }
    }
    Ok(w.0)
}

pub fn save(
    path: impl AsRef<Path>,
    cfg: &ModelConfig,
    weights: &Weights<f32>,
    lexicon: Option<&Lexicon>,
    precision: Precision,
) -> Result<()> {
    let bytes = to_bytes(cfg, weights, lexicon, precision)?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

// ---------------------------------------------------------------- reading

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LoadError::Truncated(what.to_owned()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8, LoadError> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self, what: &str) -> Result<usize, LoadError> {
        usize::try_from(self.u64(what)?).map_err(|_| LoadError::Truncated(what.to_owned()))
    }
    fn str(&mut self, what: &str) -> Result<String, LoadError> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| LoadError::Truncated(format!("{what} (invalid UTF-8)")))
    }
    /// Element counts read from the file are bounded by the bytes left, so a
    /// corrupt count cannot trigger a huge allocation.
    fn count(&mut self, what: &str, min_item_bytes: usize) -> Result<usize, LoadError> {
        let n = self.usize(what)?;
        if n.saturating_mul(min_item_bytes) > self.bytes.len() - self.pos {
            return Err(LoadError::Truncated(what.to_owned()));
        }
        Ok(n)
    }
}

fn read_header(c: &mut Cursor<'_>) -> Result<(u32, ModelConfig, Option<Lexicon>, usize), LoadError> {
    if c.bytes.len() < MAGIC.len() || &c.bytes[..MAGIC.len()] != MAGIC {
        return Err(LoadError::BadMagic);
    }
    c.pos = MAGIC.len();
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(LoadError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = c.usize("config")?;
    }
    let norm_variant = match c.u8("config")? {
        0 => NormVariant::L2,
        1 => NormVariant::L1,
        t => return Err(LoadError::Config(format!("unknown norm tag {t}"))),
    };
    let shared_embeddings = match c.u8("config")? {
        0 => false,
        1 => true,
        t => return Err(LoadError::Config(format!("bad shared-embeddings flag {t}"))),
    };
    let config = ModelConfig {
        n_enc_layers: f[0],
        n_dec_layers: f[1],
        d_model: f[2],
        n_heads_enc: f[3],
        n_heads_dec: f[4],
        ffn_dim_enc: f[5],
        ffn_dim_dec: f[6],
        vocab_size: f[7],
        max_positions: f[8],
        norm_variant,
        shared_embeddings,
    };
    config.validate().map_err(|e| LoadError::Config(e.to_string()))?;

    let n_tokens = c.count("vocabulary", 4)?;
    let mut merges_len = 0;
    let lexicon = if n_tokens == 0 {
        None
    } else {
        let tokens = (0..n_tokens).map(|_| c.str("vocabulary")).collect::<Result<Vec<_>, _>>()?;
        let bpe_version = match c.u8("vocabulary")? {
            1 => BpeVersion::V01,
            2 => BpeVersion::V02,
            t => return Err(LoadError::Vocab(format!("unknown bpe version tag {t}"))),
        };
        let n_merges = c.count("merges", 8)?;
        let merges = (0..n_merges)
            .map(|_| Ok((c.str("merges")?, c.str("merges")?)))
            .collect::<Result<Vec<_>, LoadError>>()?;
        merges_len = merges.len();
        let vocab = Vocab::new(tokens).map_err(|e| LoadError::Vocab(e.to_string()))?;
        if vocab.len() > config.vocab_size {
            return Err(LoadError::Vocab(format!(
                "{} tokens exceed vocab_size {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let codec = BpeCodec::new(merges, bpe_version).map_err(|e| LoadError::Vocab(e.to_string()))?;
        Some(Lexicon { codec, vocab })
    };
    Ok((version, config, lexicon, merges_len))
}

fn read_directory(c: &mut Cursor<'_>) -> Result<Vec<Entry>, LoadError> {
    let n = c.count("directory", 22)?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name = c.str("directory")?;
        let dtype = Dtype::from_tag(&name, c.u8(&name)?)?;
        let rank = c.u8(&name)? as usize;
        let shape = (0..rank).map(|_| c.usize(&name)).collect::<Result<Vec<_>, _>>()?;
        let offset = c.u64(&name)?;
        let len = c.u64(&name)?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            offset,
            len,
        });
    }
    Ok(entries)
}

/// Offsets inside the file, after the directory, and non-overlapping.
fn check_layout(entries: &[Entry], dir_end: usize, file_len: usize) -> Result<(), LoadError> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
    for e in entries {
        let end = e.offset.checked_add(e.len).ok_or_else(|| LoadError::BadOffset(e.name.clone()))?;
        if e.offset < dir_end as u64 || end > file_len as u64 {
            return Err(LoadError::BadOffset(e.name.clone()));
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(LoadError::BadOffset(w[1].2.to_owned()));
        }
    }
    Ok(())
}

/// Reads the header and directory without touching tensor payloads.
pub fn inspect_bytes(bytes: &[u8]) -> Result<FileSummary> {
    let mut c = Cursor { bytes, pos: 0 };
    let (version, config, lexicon, merges) = read_header(&mut c)?;
    let entries = read_directory(&mut c)?;
    check_layout(&entries, c.pos, bytes.len())?;
    Ok(FileSummary {
        version,
        config,
        vocab_tokens: lexicon.as_ref().map_or(0, |l| l.vocab.len()),
        merges,
        entries,
        file_len: bytes.len() as u64,
    })
}

pub fn inspect(path: impl AsRef<Path>) -> Result<FileSummary> {
    inspect_bytes(&read_file(path.as_ref())?)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })
}

struct TensorReader<'a> {
    bytes: &'a [u8],
    entries: HashMap<&'a str, &'a Entry>,
    used: HashSet<&'a str>,
    precision: Precision,
}

impl<'a> TensorReader<'a> {
    fn entry(&mut self, name: &str, shape: &[usize]) -> Result<&'a Entry, LoadError> {
        let e = *self.entries.get(name).ok_or_else(|| LoadError::MissingTensor(name.to_owned()))?;
        self.used.insert(&e.name);
        if e.shape != shape {
            return Err(LoadError::TensorShape {
                name: name.to_owned(),
                expected: shape.to_vec(),
                found: e.shape.clone(),
            });
        }
        Ok(e)
    }

    fn payload(&self, e: &Entry, expected_len: usize) -> Result<&'a [u8], LoadError> {
        if e.len != expected_len as u64 {
            return Err(LoadError::BadOffset(e.name.clone()));
        }
        Ok(&self.bytes[e.offset as usize..(e.offset + e.len) as usize])
    }

    fn f32s(&self, e: &Entry, n: usize) -> Result<Vec<f32>, LoadError> {
        let raw = self.payload(e, n * 4)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }

    fn vector(&mut self, name: &str, n: usize) -> Result<Vec<f32>, LoadError> {
        let e = self.entry(name, &[n])?;
        if e.dtype != Dtype::F32 {
            return Err(LoadError::BadDtype(name.to_owned(), e.dtype.tag()));
        }
        self.f32s(e, n)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor<f32>, LoadError> {
        let e = self.entry(name, &[rows, cols])?;
        if e.dtype != Dtype::F32 {
            return Err(LoadError::BadDtype(name.to_owned(), e.dtype.tag()));
        }
        let data = self.f32s(e, rows * cols)?;
        Ok(Tensor::new(vec![rows, cols], data).expect("length checked"))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<NormParams<f32>, LoadError> {
        Ok(NormParams {
            gain: self.vector(&format!("{prefix}.gain"), d)?,
            bias: self.vector(&format!("{prefix}.bias"), d)?,
        })
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> Result<Linear<f32>> {
        let name = format!("{prefix}.weight");
        let e = self.entry(&name, &[rows, cols])?;
        let weight = match e.dtype {
            Dtype::F32 => {
                let t = Tensor::new(vec![rows, cols], self.f32s(e, rows * cols)?).expect("length checked");
                match self.precision {
                    Precision::F32 => LinearWeight::Dense(t),
                    Precision::Int8 => LinearWeight::Int8(crate::quant::PackedMatrix::from_weights(&t)?),
                }
            }
            Dtype::Int8 => {
                let raw = self.payload(e, cols * 8 + rows * cols)?;
                let floats = |b: &[u8]| -> Vec<f32> {
                    b.chunks_exact(4).map(|x| f32::from_le_bytes(x.try_into().expect("4 bytes"))).collect()
                };
                let scale = floats(&raw[..cols * 4]);
                let zeropoint = floats(&raw[cols * 4..cols * 8]);
                let q = raw[cols * 8..].iter().map(|&b| b as i8).collect();
                let qm = QuantizedMatrix::from_parts(rows, cols, q, scale, zeropoint)
                    .map_err(|err| LoadError::Config(format!("{name}: {err}")))?;
                match self.precision {
                    Precision::Int8 => LinearWeight::Int8(pack(&qm, DEFAULT_PANEL_WIDTH, DEFAULT_ROW_BLOCK)?),
                    Precision::F32 => LinearWeight::Dense(dequantize_weights(&qm)),
                }
            }
            Dtype::Alias => return Err(LoadError::BadAlias(name).into()),
        };
        let bias = self.vector(&format!("{prefix}.bias"), cols)?;
        Ok(Linear { weight, bias })
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<AttentionWeights<f32>> {
        Ok(AttentionWeights {
            q: self.linear(&format!("{prefix}.q"), d, d)?,
            k: self.linear(&format!("{prefix}.k"), d, d)?,
            v: self.linear(&format!("{prefix}.v"), d, d)?,
            o: self.linear(&format!("{prefix}.o"), d, d)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> Result<FeedForward<f32>> {
        Ok(FeedForward {
            w1: self.linear(&format!("{prefix}.w1"), d, f)?,
            w2: self.linear(&format!("{prefix}.w2"), f, d)?,
        })
    }

    fn weights(&mut self, cfg: &ModelConfig) -> Result<Weights<f32>> {
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let embedding = self.matrix(EMBEDDING, v, d)?;
        let src_embedding = if cfg.shared_embeddings {
            None
        } else {
            Some(self.matrix("embed.source", v, d)?)
        };
        let mut encoder = Vec::with_capacity(cfg.n_enc_layers);
        for i in 0..cfg.n_enc_layers {
            let p = format!("enc.{i}");
            encoder.push(EncoderLayer {
                self_attn: self.attention(&format!("{p}.self_attn"), d)?,
                attn_norm: self.norm(&format!("{p}.attn_norm"), d)?,
                ffn: self.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim_enc)?,
                ffn_norm: self.norm(&format!("{p}.ffn_norm"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.n_dec_layers);
        for i in 0..cfg.n_dec_layers {
            let p = format!("dec.{i}");
            let self_attn = self.attention(&format!("{p}.self_attn"), d)?;
            let self_norm = self.norm(&format!("{p}.self_norm"), d)?;
            let cross_attn = self.attention(&format!("{p}.cross_attn"), d)?;
            let cross_norm = self.norm(&format!("{p}.cross_norm"), d)?;
            let ffn = if cfg.has_decoder_ffn() {
                Some((
                    self.ffn(&format!("{p}.ffn"), d, cfg.ffn_dim_dec)?,
                    self.norm(&format!("{p}.ffn_norm"), d)?,
                ))
            } else {
                None
            };
            decoder.push(DecoderLayer {
                self_attn,
                self_norm,
                cross_attn,
                cross_norm,
                ffn,
            });
        }
        let output = if cfg.shared_embeddings {
            let e = self.entry(OUTPUT_WEIGHT, &[d, v])?;
            if e.dtype != Dtype::Alias || self.payload(e, EMBEDDING.len())? != EMBEDDING.as_bytes() {
                return Err(LoadError::BadAlias(OUTPUT_WEIGHT.into()).into());
            }
            let out = tied_output(&embedding, self.vector("output.bias", v)?)?;
            match self.precision {
                Precision::F32 => out,
                Precision::Int8 => out.to_int8()?,
            }
        } else {
            self.linear("output", d, v)?
        };
        Ok(Weights {
            embedding,
            src_embedding,
            output,
            output_tied: cfg.shared_embeddings,
            encoder,
            decoder,
        })
    }
}

/// Parses a model file. With `Int8`, every GEMM weight is packed once here,
/// quantizing float entries on the fly; with `F32`, quantized entries are
/// dequantized.
pub fn from_bytes(bytes: &[u8], precision: Precision) -> Result<LoadedModel> {
    let mut c = Cursor { bytes, pos: 0 };
    let (_, config, lexicon, _) = read_header(&mut c)?;
    let entries = read_directory(&mut c)?;
    check_layout(&entries, c.pos, bytes.len())?;
    let mut by_name = HashMap::with_capacity(entries.len());
    for e in &entries {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(LoadError::DuplicateTensor(e.name.clone()).into());
        }
    }
    let mut reader = TensorReader {
        bytes,
        entries: by_name,
        used: HashSet::new(),
        precision,
    };
    let weights = reader.weights(&config)?;
    if let Some(extra) = entries.iter().find(|e| !reader.used.contains(e.name.as_str())) {
        return Err(LoadError::UnexpectedTensor(extra.name.clone()).into());
    }
    let model = Model::new(config, weights)?;
    Ok(LoadedModel { model, lexicon })
}

pub fn load(path: impl AsRef<Path>, precision: Precision) -> Result<LoadedModel> {
    from_bytes(&read_file(path.as_ref())?, precision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_model;

    fn cfg(ffn_dim_dec: usize, shared: bool) -> ModelConfig {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_model: 8,
            n_heads_enc: 2,
            n_heads_dec: 1,
            ffn_dim_enc: 16,
            ffn_dim_dec,
            vocab_size: 40,
            max_positions: 32,
            norm_variant: NormVariant::L1,
            shared_embeddings: shared,
        }
    }

    fn lexicon() -> Lexicon {
        Lexicon::learn("low lower lowest\nnew newer\n", 5)
    }

    #[test]
    fn f32_roundtrip_is_exact() {
        for (ffn, shared) in [(8, true), (0, true), (8, false)] {
            let c = cfg(ffn, shared);
            let w = random_model::<f32>(&c, 1).unwrap();
            let lex = lexicon();
            let bytes = to_bytes(&c, &w, Some(&lex), Precision::F32).unwrap();
            let loaded = from_bytes(&bytes, Precision::F32).unwrap();
            assert_eq!(loaded.model.config(), &c);
            assert_eq!(loaded.model.weights(), &w);
            assert_eq!(loaded.lexicon, Some(lex));
        }
    }

    #[test]
    fn deterministic_bytes_and_alignment() {
        let c = cfg(8, true);
        let w = random_model::<f32>(&c, 2).unwrap();
        let a = to_bytes(&c, &w, None, Precision::Int8).unwrap();
        assert_eq!(a, to_bytes(&c, &w, None, Precision::Int8).unwrap());
        let s = inspect_bytes(&a).unwrap();
        assert!(s.entries.iter().all(|e| e.offset % 8 == 0));
        let out = s.entries.iter().find(|e| e.name == OUTPUT_WEIGHT).unwrap();
        assert_eq!(out.dtype, Dtype::Alias);
        assert!(s.entries.iter().any(|e| e.dtype == Dtype::Int8));
        let text = s.to_string();
        assert!(text.contains("embed.tokens f32 [40x8]"), "{text}");
    }

    #[test]
    fn int8_paths_agree() {
        let c = cfg(8, false);
        let w = random_model::<f32>(&c, 3).unwrap();
        let offline = from_bytes(&to_bytes(&c, &w, None, Precision::Int8).unwrap(), Precision::Int8).unwrap();
        let at_load = from_bytes(&to_bytes(&c, &w, None, Precision::F32).unwrap(), Precision::Int8).unwrap();
        assert_eq!(offline.model.weights(), at_load.model.weights());
        let LinearWeight::Dense(wq) = &w.encoder[0].self_attn.q.weight else { unreachable!() };
        let LinearWeight::Int8(p) = &offline.model.weights().encoder[0].self_attn.q.weight else { unreachable!() };
        assert_eq!(unpack(p), quantize_weights(wq).unwrap());
    }

    #[test]
    fn rejects_damage() {
        let c = cfg(8, true);
        let w = random_model::<f32>(&c, 4).unwrap();
        let good = to_bytes(&c, &w, None, Precision::F32).unwrap();
        let err = |b: &[u8]| match from_bytes(b, Precision::F32) {
            Err(Error::Load(e)) => e,
            other => panic!("expected a load error, got {other:?}"),
        };

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(err(&bad), LoadError::BadMagic);
        assert_eq!(err(&bad).to_string(), "bad magic");

        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(err(&bad), LoadError::Version { found: 2, expected: 1 }));

        assert!(matches!(err(&good[..good.len() - 3]), LoadError::BadOffset(_)));
        assert!(matches!(err(&good[..40]), LoadError::Truncated(_)));

        // ffn_dim_dec = 0 with no decoder FFN tensors is complete
        let c0 = cfg(0, true);
        let w0 = random_model::<f32>(&c0, 4).unwrap();
        assert!(from_bytes(&to_bytes(&c0, &w0, None, Precision::F32).unwrap(), Precision::F32).is_ok());
        // but claiming a decoder FFN without its tensors is not
        let mut patched = to_bytes(&c0, &w0, None, Precision::F32).unwrap();
        // ffn_dim_dec is the seventh u64 of the config block
        patched[12 + 6 * 8..12 + 7 * 8].copy_from_slice(&8u64.to_le_bytes());
        assert_eq!(err(&patched), LoadError::MissingTensor("dec.0.ffn.w1.weight".into()));
    }
}
