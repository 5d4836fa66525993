use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::Precision;
use crate::error::{shape_err, Result};
use crate::quant::{quantize_activations_per_row, qgemm, PackedMatrix};
use crate::scalar::Scalar;
use crate::tensor::{add_row_bias, matmul, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LinearWeight<T> {
    /// Float weight laid out `[in × out]`.
    Dense(Tensor<T>),
    /// Pre-quantized, pre-packed weight.
    Int8(PackedMatrix),
}

/// Affine projection `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: LinearWeight<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn dense(weight: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let (_, out) = weight.dims2()?;
        if bias.len() != out {
            return Err(shape_err(format!("bias of length {} for {out} outputs", bias.len())));
        }
        Ok(Self {
            weight: LinearWeight::Dense(weight),
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        match &self.weight {
            LinearWeight::Dense(w) => w.shape()[0],
            LinearWeight::Int8(p) => p.rows(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = match &self.weight {
            LinearWeight::Dense(w) => matmul(x, w)?,
            // Activations are quantized per row so a sentence's result never
            // depends on what else shares its batch.
            LinearWeight::Int8(p) => qgemm(&quantize_activations_per_row(x)?, p)?,
        };
        add_row_bias(&mut y, &self.bias);
        Ok(y)
    }

    /// Converts a dense weight to its packed int8 form; packed weights are kept.
    pub fn to_int8(&self) -> Result<Self> {
        let weight = match &self.weight {
            LinearWeight::Dense(w) => LinearWeight::Int8(PackedMatrix::from_weights(w)?),
            LinearWeight::Int8(p) => LinearWeight::Int8(p.clone()),
        };
        Ok(Self {
            weight,
            bias: self.bias.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: match &self.weight {
                LinearWeight::Dense(w) => LinearWeight::Dense(w.cast()),
                LinearWeight::Int8(p) => LinearWeight::Int8(p.clone()),
            },
            bias: self.bias.iter().map(|&b| U::lit(b.as_f64())).collect(),
        }
    }

    pub fn is_int8(&self) -> bool {
        matches!(self.weight, LinearWeight::Int8(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> NormParams<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![T::one(); d],
            bias: vec![T::zero(); d],
        }
    }

    fn cast<U: Scalar>(&self) -> NormParams<U> {
        NormParams {
            gain: self.gain.iter().map(|&v| U::lit(v.as_f64())).collect(),
            bias: self.bias.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub self_attn: AttentionWeights<T>,
    pub attn_norm: NormParams<T>,
    pub ffn: FeedForward<T>,
    pub ffn_norm: NormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: AttentionWeights<T>,
    pub self_norm: NormParams<T>,
    pub cross_attn: AttentionWeights<T>,
    pub cross_norm: NormParams<T>,
    /// Absent when `ffn_dim_dec == 0`.
    pub ffn: Option<(FeedForward<T>, NormParams<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Target embedding `[vocab × d]`; also the source embedding when shared.
    pub embedding: Tensor<T>,
    /// Separate source embedding, only when embeddings are not shared.
    pub src_embedding: Option<Tensor<T>>,
    /// Output projection `[d × vocab]`. When tied it is materialized once as
    /// the transpose of `embedding` so decoding never transposes.
    pub output: Linear<T>,
    pub output_tied: bool,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
}

impl<T: Scalar> Weights<T> {
    pub fn source_embedding(&self) -> &Tensor<T> {
        self.src_embedding.as_ref().unwrap_or(&self.embedding)
    }

    /// Checks every tensor against the configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let expect = |what: &str, got: &[usize], want: &[usize]| {
            if got == want {
                Ok(())
            } else {
                Err(shape_err(format!("{what}: expected {want:?}, got {got:?}")))
            }
        };
        let linear = |what: &str, l: &Linear<T>, i: usize, o: usize| {
            expect(what, &[l.in_dim(), l.out_dim()], &[i, o])
        };
        let norm = |what: &str, n: &NormParams<T>| {
            expect(what, &[n.gain.len(), n.bias.len()], &[d, d])
        };
        let attn = |what: &str, a: &AttentionWeights<T>| {
            for l in [&a.q, &a.k, &a.v, &a.o] {
                linear(what, l, d, d)?;
            }
            Ok::<(), crate::Error>(())
        };
        expect("embedding", self.embedding.shape(), &[v, d])?;
        match (&self.src_embedding, cfg.shared_embeddings) {
            (None, true) => {}
            (Some(e), false) => expect("source embedding", e.shape(), &[v, d])?,
            _ => return Err(shape_err("source embedding presence disagrees with shared_embeddings")),
        }
        if self.output_tied != cfg.shared_embeddings {
            return Err(shape_err("output tying disagrees with shared_embeddings"));
        }
        linear("output", &self.output, d, v)?;
        if self.encoder.len() != cfg.n_enc_layers || self.decoder.len() != cfg.n_dec_layers {
            return Err(shape_err("layer count disagrees with config"));
        }
        for layer in &self.encoder {
            attn("encoder self-attention", &layer.self_attn)?;
            norm("encoder norm", &layer.attn_norm)?;
            norm("encoder norm", &layer.ffn_norm)?;
            linear("encoder ffn", &layer.ffn.w1, d, cfg.ffn_dim_enc)?;
            linear("encoder ffn", &layer.ffn.w2, cfg.ffn_dim_enc, d)?;
        }
        for layer in &self.decoder {
            attn("decoder self-attention", &layer.self_attn)?;
            attn("decoder cross-attention", &layer.cross_attn)?;
            norm("decoder norm", &layer.self_norm)?;
            norm("decoder norm", &layer.cross_norm)?;
            match (&layer.ffn, cfg.has_decoder_ffn()) {
                (None, false) => {}
                (Some((ffn, n)), true) => {
                    linear("decoder ffn", &ffn.w1, d, cfg.ffn_dim_dec)?;
                    linear("decoder ffn", &ffn.w2, cfg.ffn_dim_dec, d)?;
                    norm("decoder norm", n)?;
                }
                _ => return Err(shape_err("decoder FFN presence disagrees with ffn_dim_dec")),
            }
        }
        Ok(())
    }

    pub fn to_precision(&self, precision: Precision) -> Result<Self> {
        match precision {
            Precision::F32 => Ok(self.clone()),
            Precision::Int8 => self.map_linears(|l| l.to_int8()),
        }
    }

    fn map_linears(&self, f: impl Fn(&Linear<T>) -> Result<Linear<T>>) -> Result<Self> {
        let attn = |a: &AttentionWeights<T>| -> Result<AttentionWeights<T>> {
            Ok(AttentionWeights {
                q: f(&a.q)?,
                k: f(&a.k)?,
                v: f(&a.v)?,
                o: f(&a.o)?,
            })
        };
        let ffn = |x: &FeedForward<T>| -> Result<FeedForward<T>> {
            Ok(FeedForward {
                w1: f(&x.w1)?,
                w2: f(&x.w2)?,
            })
        };
        Ok(Self {
            embedding: self.embedding.clone(),
            src_embedding: self.src_embedding.clone(),
            output: f(&self.output)?,
            output_tied: self.output_tied,
            encoder: self
                .encoder
                .iter()
                .map(|l| {
                    Ok(EncoderLayer {
                        self_attn: attn(&l.self_attn)?,
                        attn_norm: l.attn_norm.clone(),
                        ffn: ffn(&l.ffn)?,
                        ffn_norm: l.ffn_norm.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            decoder: self
                .decoder
                .iter()
                .map(|l| {
                    Ok(DecoderLayer {
                        self_attn: attn(&l.self_attn)?,
                        self_norm: l.self_norm.clone(),
                        cross_attn: attn(&l.cross_attn)?,
                        cross_norm: l.cross_norm.clone(),
                        ffn: match &l.ffn {
                            Some((x, n)) => Some((ffn(x)?, n.clone())),
                            None => None,
                        },
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Converts float storage to another scalar type; packed weights are shared as-is.
    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        let attn = |a: &AttentionWeights<T>| AttentionWeights {
            q: a.q.cast(),
            k: a.k.cast(),
            v: a.v.cast(),
            o: a.o.cast(),
        };
        let ffn = |x: &FeedForward<T>| FeedForward {
            w1: x.w1.cast(),
            w2: x.w2.cast(),
        };
        Weights {
            embedding: self.embedding.cast(),
            src_embedding: self.src_embedding.as_ref().map(|e| e.cast()),
            output: self.output.cast(),
            output_tied: self.output_tied,
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    self_attn: attn(&l.self_attn),
                    attn_norm: l.attn_norm.cast(),
                    ffn: ffn(&l.ffn),
                    ffn_norm: l.ffn_norm.cast(),
                })
                .collect(),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    self_attn: attn(&l.self_attn),
                    self_norm: l.self_norm.cast(),
                    cross_attn: attn(&l.cross_attn),
                    cross_norm: l.cross_norm.cast(),
                    ffn: l.ffn.as_ref().map(|(x, n)| (ffn(x), n.cast())),
                })
                .collect(),
        }
    }
}

/// Output projection tied to the embedding: the transpose, with its own bias.
pub fn tied_output<T: Scalar>(embedding: &Tensor<T>, bias: Vec<T>) -> Result<Linear<T>> {
    Linear::dense(embedding.transpose()?, bias)
}

/// Deterministic pseudo-random weights with magnitudes ∝ 1/√d_model.
///
/// Values are drawn as `f32` and widened, so `random_model::<f64>` equals
/// `random_model::<f32>().cast::<f64>()` exactly.
pub fn random_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Weights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let scale = 1.0 / (d as f32).sqrt();

    let matrix = |rows: usize, cols: usize, s: f32, rng: &mut ChaCha8Rng| {
        Tensor::from_fn(vec![rows, cols], |_| T::of_f32(rng.gen_range(-1.0f32..1.0) * s))
    };
    let vector = |n: usize, s: f32, rng: &mut ChaCha8Rng| -> Vec<T> {
        (0..n).map(|_| T::of_f32(rng.gen_range(-1.0f32..1.0) * s)).collect()
    };
    let linear = |i: usize, o: usize, rng: &mut ChaCha8Rng| {
        let s = 1.0 / (i as f32).sqrt();
        let w = matrix(i, o, s, rng);
        Linear::dense(w, vector(o, 0.1 * s, rng)).expect("consistent dims")
    };
    let norm = |rng: &mut ChaCha8Rng| NormParams {
        gain: (0..d).map(|_| T::of_f32(1.0 + 0.1 * rng.gen_range(-1.0f32..1.0))).collect(),
        bias: (0..d).map(|_| T::of_f32(0.1 * rng.gen_range(-1.0f32..1.0))).collect(),
    };
    let attention = |rng: &mut ChaCha8Rng| AttentionWeights {
        q: linear(d, d, rng),
        k: linear(d, d, rng),
        v: linear(d, d, rng),
        o: linear(d, d, rng),
    };

    let embedding = Tensor::from_fn(vec![v, d], |_| T::of_f32(rng.gen_range(-1.0f32..1.0) * scale));
    let src_embedding = (!cfg.shared_embeddings)
        .then(|| Tensor::from_fn(vec![v, d], |_| T::of_f32(rng.gen_range(-1.0f32..1.0) * scale)));

    let mut encoder = Vec::with_capacity(cfg.n_enc_layers);
    for _ in 0..cfg.n_enc_layers {
        let self_attn = attention(&mut rng);
        let attn_norm = norm(&mut rng);
        let ffn = FeedForward {
            w1: linear(d, cfg.ffn_dim_enc, &mut rng),
            w2: linear(cfg.ffn_dim_enc, d, &mut rng),
        };
        let ffn_norm = norm(&mut rng);
        encoder.push(EncoderLayer {
            self_attn,
            attn_norm,
            ffn,
            ffn_norm,
        });
    }
    let mut decoder = Vec::with_capacity(cfg.n_dec_layers);
    for _ in 0..cfg.n_dec_layers {
        let self_attn = attention(&mut rng);
        let self_norm = norm(&mut rng);
        let cross_attn = attention(&mut rng);
        let cross_norm = norm(&mut rng);
        let ffn = cfg.has_decoder_ffn().then(|| {
            let f = FeedForward {
                w1: linear(d, cfg.ffn_dim_dec, &mut rng),
                w2: linear(cfg.ffn_dim_dec, d, &mut rng),
            };
            (f, norm(&mut rng))
        });
        decoder.push(DecoderLayer {
            self_attn,
            self_norm,
            cross_attn,
            cross_norm,
            ffn,
        });
    }
    let out_bias = vector(v, 0.1 * scale, &mut rng);
    let output = if cfg.shared_embeddings {
        tied_output(&embedding, out_bias)?
    } else {
        let w = matrix(d, v, scale, &mut rng);
        Linear::dense(w, out_bias)?
    };
    let weights = Weights {
        embedding,
        src_embedding,
        output,
        output_tied: cfg.shared_embeddings,
        encoder,
        decoder,
    };
    weights.validate(cfg)?;
    Ok(weights)
}
