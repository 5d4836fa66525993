//! Post-norm transformer encoder-decoder with an incremental decoder.

mod attention;
mod config;
mod weights;

pub use attention::{attention, Mask, MASK_VALUE};
pub use config::{ModelConfig, NormVariant, STUDENT_VOCAB};
pub use weights::{
    random_model, tied_output, AttentionWeights, DecoderLayer, EncoderLayer, FeedForward, Linear,
    LinearWeight, NormParams, Weights,
};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{add_assign, layer_norm_l1, layer_norm_l2, relu_in_place, Tensor, NORM_EPS};
use crate::text::vocab::PAD_ID;
use crate::TokenId;

use attention::attend;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    F32,
    Int8,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Self::F32),
            "int8" => Ok(Self::Int8),
            other => Err(format!("unknown precision {other:?} (expected f32 or int8)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::Int8 => "int8",
        })
    }
}

/// Sinusoidal position table `[max_positions × d]`.
pub fn sinusoidal_positions<T: Scalar>(max_positions: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(vec![max_positions, d], |idx| {
        let (pos, e) = ((idx / d) as f64, idx % d);
        let rate = 10000f64.powf((2 * (e / 2)) as f64 / d as f64);
        T::lit(if e % 2 == 0 { (pos / rate).sin() } else { (pos / rate).cos() })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    /// `[batch × src_len × d_model]`
    pub states: Tensor<T>,
    /// Non-pad length of each row; positions past it are padding.
    pub lengths: Vec<usize>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn src_len(&self) -> usize {
        self.states.shape()[1]
    }

    /// `[batch × src_len]`, `true` at padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        let l = self.src_len();
        self.lengths
            .iter()
            .flat_map(|&n| (0..l).map(move |j| j >= n))
            .collect()
    }

    /// States of sentence `row`, `[src_len × d]`.
    pub fn sentence(&self, row: usize) -> &[T] {
        let (l, d) = (self.src_len(), self.states.cols());
        &self.states.data()[row * l * d..(row + 1) * l * d]
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerCache<T> {
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    cross_k: Tensor<T>,
    cross_v: Tensor<T>,
}

/// Incremental decoder state for one batch: per layer, the self-attention
/// key/value history of every row plus cross-attention keys/values projected
/// once from the encoder states.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeCache<T> {
    layers: Vec<LayerCache<T>>,
    lengths: Vec<usize>,
    src_len: usize,
    steps: usize,
}

impl<T: Scalar> DecodeCache<T> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Cross-attention keys of `layer`, `[batch × src_len × d]`.
    pub fn cross_k(&self, layer: usize) -> &Tensor<T> {
        &self.layers[layer].cross_k
    }

    pub fn cross_v(&self, layer: usize) -> &Tensor<T> {
        &self.layers[layer].cross_v
    }

    /// Self-attention key history of one row, `steps × d` flattened.
    pub fn self_k(&self, layer: usize, row: usize) -> &[T] {
        &self.layers[layer].self_k[row]
    }

    /// Reserves history for `steps` more decode steps per row.
    pub fn reserve(&mut self, steps: usize, d_model: usize) {
        for layer in &mut self.layers {
            for h in layer.self_k.iter_mut().chain(layer.self_v.iter_mut()) {
                h.reserve_exact(steps * d_model);
            }
        }
    }

    /// Keeps rows `rows` (in that order, repeats allowed).
    pub fn reorder(&mut self, rows: &[usize]) {
        let gather = |t: &Tensor<T>| {
            let per = t.len() / self.lengths.len().max(1);
            let mut data = Vec::with_capacity(rows.len() * per);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = rows.len();
            Tensor::new(shape, data).expect("gathered rows keep their width")
        };
        for layer in &mut self.layers {
            gather_histories(&mut layer.self_k, rows);
            gather_histories(&mut layer.self_v, rows);
            layer.cross_k = gather(&layer.cross_k);
            layer.cross_v = gather(&layer.cross_v);
        }
        self.lengths = rows.iter().map(|&r| self.lengths[r]).collect();
    }
}

/// Moves each kept history to its new slot, copying (with the same spare
/// capacity) only for rows that appear more than once.
fn gather_histories<T: Clone>(hist: &mut Vec<Vec<T>>, rows: &[usize]) {
    let mut last = vec![usize::MAX; hist.len()];
    for (i, &r) in rows.iter().enumerate() {
        last[r] = i;
    }
    let mut old: Vec<Option<Vec<T>>> = std::mem::take(hist).into_iter().map(Some).collect();
    *hist = rows
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if last[r] == i {
                old[r].take().expect("each row is moved once")
            } else {
                let src = old[r].as_ref().expect("copies precede the move");
                let mut v = Vec::with_capacity(src.capacity());
                v.extend_from_slice(src);
                v
            }
        })
        .collect();
}

/// Configuration, weights and the precomputed position table.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    weights: Weights<T>,
    positions: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, weights: Weights<T>) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        let positions = sinusoidal_positions(config.max_positions, config.d_model);
        Ok(Self {
            config,
            weights,
            positions,
        })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = random_model(&config, seed)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> Weights<T> {
        self.weights
    }

    pub fn precision(&self) -> Precision {
        if self.weights.output.is_int8() {
            Precision::Int8
        } else {
            Precision::F32
        }
    }

    /// Same model with every GEMM weight quantized and packed (or unchanged for f32).
    pub fn to_precision(&self, precision: Precision) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            weights: self.weights.to_precision(precision)?,
            positions: self.positions.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
            positions: sinusoidal_positions(self.config.max_positions, self.config.d_model),
        }
    }

    fn norm(&self, x: &Tensor<T>, p: &NormParams<T>) -> Result<Tensor<T>> {
        let eps = T::lit(NORM_EPS);
        match self.config.norm_variant {
            NormVariant::L2 => layer_norm_l2(x, &p.gain, &p.bias, eps),
            NormVariant::L1 => layer_norm_l1(x, &p.gain, &p.bias, eps),
        }
    }

    /// `norm(x + f)`, reusing `f`'s buffer.
    fn residual_norm(&self, x: &Tensor<T>, mut f: Tensor<T>, p: &NormParams<T>) -> Result<Tensor<T>> {
        add_assign(&mut f, x);
        self.norm(&f, p)
    }

    fn feed_forward(&self, x: &Tensor<T>, ffn: &FeedForward<T>) -> Result<Tensor<T>> {
        let mut h = ffn.w1.forward(x)?;
        relu_in_place(&mut h);
        ffn.w2.forward(&h)
    }

    /// `embedding[token] · √d + position`, one row per token.
    fn embed(&self, table: &Tensor<T>, tokens: &[TokenId], positions: impl Iterator<Item = usize>) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        let scale = T::lit(d as f64).sqrt();
        let mut out = Vec::with_capacity(tokens.len() * d);
        for (&tok, pos) in tokens.iter().zip(positions) {
            if tok as usize >= self.config.vocab_size {
                return Err(Error::Integrity(format!(
                    "token id {tok} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            if pos >= self.config.max_positions {
                return Err(Error::Length(format!(
                    "position {pos} exceeds max_positions {}",
                    self.config.max_positions
                )));
            }
            let pe = self.positions.row(pos);
            out.extend(table.row(tok as usize).iter().zip(pe).map(|(&e, &p)| e * scale + p));
        }
        Tensor::new(vec![tokens.len(), d], out)
    }

    /// Encodes ragged sentences, right-padding them to the longest.
    pub fn encode(&self, sentences: &[Vec<TokenId>]) -> Result<EncoderOutput<T>> {
        let src_len = sentences.iter().map(Vec::len).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(sentences.len() * src_len);
        for s in sentences {
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat_n(PAD_ID, src_len - s.len()));
        }
        let lengths: Vec<usize> = sentences.iter().map(Vec::len).collect();
        self.encode_padded(&tokens, src_len, &lengths)
    }

    /// Encodes a padded `[batch × src_len]` token matrix; row `i` holds
    /// `lengths[i]` real tokens followed by padding.
    pub fn encode_padded(&self, tokens: &[TokenId], src_len: usize, lengths: &[usize]) -> Result<EncoderOutput<T>> {
        let b = lengths.len();
        let d = self.config.d_model;
        if tokens.len() != b * src_len || lengths.iter().any(|&n| n > src_len) {
            return Err(shape_err(format!(
                "{} tokens for batch {b} x {src_len} with lengths {lengths:?}",
                tokens.len()
            )));
        }
        if src_len > self.config.max_positions {
            return Err(Error::Length(format!(
                "source length {src_len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let mut x = self.embed(
            self.weights.source_embedding(),
            tokens,
            (0..b).flat_map(|_| 0..src_len),
        )?;
        let heads = self.config.n_heads_enc;
        for layer in &self.weights.encoder {
            let a = &layer.self_attn;
            let mut ctx = vec![T::zero(); b * src_len * d];
            let (q, k, v) = (a.q.forward(&x)?, a.k.forward(&x)?, a.v.forward(&x)?);
            for (s, &valid) in lengths.iter().enumerate() {
                let span = s * src_len * d..(s + 1) * src_len * d;
                attend(
                    &q.data()[span.clone()],
                    &k.data()[span.clone()],
                    &v.data()[span.clone()],
                    src_len,
                    src_len,
                    d,
                    heads,
                    &Mask::KeyPadding { valid },
                    &mut ctx[span],
                );
            }
            drop((q, k, v));
            let ctx = Tensor::new(vec![b * src_len, d], ctx)?;
            x = self.residual_norm(&x, a.o.forward(&ctx)?, &layer.attn_norm)?;
            let f = self.feed_forward(&x, &layer.ffn)?;
            x = self.residual_norm(&x, f, &layer.ffn_norm)?;
        }
        Ok(EncoderOutput {
            states: x.reshape(vec![b, src_len, d])?,
            lengths: lengths.to_vec(),
        })
    }

    fn project_cross(&self, enc: &EncoderOutput<T>, a: &AttentionWeights<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (b, l, d) = (enc.batch(), enc.src_len(), self.config.d_model);
        let flat = enc.states.clone().reshape(vec![b * l, d])?;
        let k = a.k.forward(&flat)?.reshape(vec![b, l, d])?;
        let v = a.v.forward(&flat)?.reshape(vec![b, l, d])?;
        Ok((k, v))
    }

    /// Projects cross-attention keys/values for every decoder layer; the
    /// self-attention histories start empty.
    pub fn init_cross_cache(&self, enc: &EncoderOutput<T>) -> Result<DecodeCache<T>> {
        let b = enc.batch();
        let layers = self
            .weights
            .decoder
            .iter()
            .map(|layer| {
                let (cross_k, cross_v) = self.project_cross(enc, &layer.cross_attn)?;
                Ok(LayerCache {
                    self_k: vec![Vec::new(); b],
                    self_v: vec![Vec::new(); b],
                    cross_k,
                    cross_v,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecodeCache {
            layers,
            lengths: enc.lengths.clone(),
            src_len: enc.src_len(),
            steps: 0,
        })
    }

    /// Feeds one token per row at position `cache.steps()` and returns the
    /// next-token logits `[batch × vocab]`.
    pub fn decode_step(&self, cache: &mut DecodeCache<T>, prev_tokens: &[TokenId]) -> Result<Tensor<T>> {
        let b = cache.batch();
        let d = self.config.d_model;
        let (l, pos) = (cache.src_len, cache.steps);
        if prev_tokens.len() != b {
            return Err(shape_err(format!("{} tokens for a batch of {b}", prev_tokens.len())));
        }
        if pos >= self.config.max_positions {
            return Err(Error::Length(format!(
                "decode step {pos} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let heads = self.config.n_heads_dec;
        let mut x = self.embed(&self.weights.embedding, prev_tokens, std::iter::repeat(pos))?;
        for (layer, lc) in self.weights.decoder.iter().zip(&mut cache.layers) {
            let a = &layer.self_attn;
            let (q, k, v) = (a.q.forward(&x)?, a.k.forward(&x)?, a.v.forward(&x)?);
            let mut ctx = vec![T::zero(); b * d];
            for r in 0..b {
                lc.self_k[r].extend_from_slice(k.row(r));
                lc.self_v[r].extend_from_slice(v.row(r));
                attend(
                    q.row(r),
                    &lc.self_k[r],
                    &lc.self_v[r],
                    1,
                    pos + 1,
                    d,
                    heads,
                    &Mask::None,
                    &mut ctx[r * d..(r + 1) * d],
                );
            }
            let ctx = Tensor::new(vec![b, d], ctx)?;
            x = self.residual_norm(&x, a.o.forward(&ctx)?, &layer.self_norm)?;

            let c = &layer.cross_attn;
            let q = c.q.forward(&x)?;
            let mut ctx = vec![T::zero(); b * d];
            for r in 0..b {
                let span = r * l * d..(r + 1) * l * d;
                attend(
                    q.row(r),
                    &lc.cross_k.data()[span.clone()],
                    &lc.cross_v.data()[span],
                    1,
                    l,
                    d,
                    heads,
                    &Mask::KeyPadding { valid: cache.lengths[r] },
                    &mut ctx[r * d..(r + 1) * d],
                );
            }
            let ctx = Tensor::new(vec![b, d], ctx)?;
            x = self.residual_norm(&x, c.o.forward(&ctx)?, &layer.cross_norm)?;

            if let Some((ffn, norm)) = &layer.ffn {
                let f = self.feed_forward(&x, ffn)?;
                x = self.residual_norm(&x, f, norm)?;
            }
        }
        cache.steps += 1;
        self.weights.output.forward(&x)
    }

    /// Non-incremental decoder over whole prefixes `[batch × steps]`, with
    /// causal masking and cross keys/values recomputed from `enc`. Returns
    /// logits `[batch × steps × vocab]`.
    pub fn decode_full(&self, enc: &EncoderOutput<T>, prefix: &[TokenId], steps: usize) -> Result<Tensor<T>> {
        let b = enc.batch();
        let (l, d) = (enc.src_len(), self.config.d_model);
        if prefix.len() != b * steps {
            return Err(shape_err(format!("prefix of {} tokens for {b} x {steps}", prefix.len())));
        }
        let heads = self.config.n_heads_dec;
        let mut x = self.embed(&self.weights.embedding, prefix, (0..b).flat_map(|_| 0..steps))?;
        for layer in &self.weights.decoder {
            let a = &layer.self_attn;
            let (q, k, v) = (a.q.forward(&x)?, a.k.forward(&x)?, a.v.forward(&x)?);
            let mut ctx = vec![T::zero(); b * steps * d];
            for s in 0..b {
                let span = s * steps * d..(s + 1) * steps * d;
                attend(
                    &q.data()[span.clone()],
                    &k.data()[span.clone()],
                    &v.data()[span.clone()],
                    steps,
                    steps,
                    d,
                    heads,
                    &Mask::Causal { valid: steps, offset: 0 },
                    &mut ctx[span],
                );
            }
            let ctx = Tensor::new(vec![b * steps, d], ctx)?;
            x = self.residual_norm(&x, a.o.forward(&ctx)?, &layer.self_norm)?;

            let c = &layer.cross_attn;
            let (ck, cv) = self.project_cross(enc, c)?;
            let q = c.q.forward(&x)?;
            let mut ctx = vec![T::zero(); b * steps * d];
            for s in 0..b {
                let kv = s * l * d..(s + 1) * l * d;
                let qs = s * steps * d..(s + 1) * steps * d;
                attend(
                    &q.data()[qs.clone()],
                    &ck.data()[kv.clone()],
                    &cv.data()[kv],
                    steps,
                    l,
                    d,
                    heads,
                    &Mask::KeyPadding { valid: enc.lengths[s] },
                    &mut ctx[qs],
                );
            }
            let ctx = Tensor::new(vec![b * steps, d], ctx)?;
            x = self.residual_norm(&x, c.o.forward(&ctx)?, &layer.cross_norm)?;

            if let Some((ffn, norm)) = &layer.ffn {
                let f = self.feed_forward(&x, ffn)?;
                x = self.residual_norm(&x, f, norm)?;
            }
        }
        self.weights
            .output
            .forward(&x)?
            .reshape(vec![b, steps, self.config.vocab_size])
    }
}
