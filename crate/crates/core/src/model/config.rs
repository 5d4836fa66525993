use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormVariant {
    /// Mean/variance layer normalization.
    L2,
    /// Mean-absolute-deviation layer normalization.
    L1,
}

/// Architecture hyperparameters of an encoder-decoder student model.
///
/// The student naming `E-D-F` reads as `E` encoder layers, `D` decoder
/// layers and a decoder FFN width of `F` (0 removes the decoder FFN).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads_enc: usize,
    pub n_heads_dec: usize,
    pub ffn_dim_enc: usize,
    /// 0 means the decoder layers have no FFN sub-layer at all.
    pub ffn_dim_dec: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub norm_variant: NormVariant,
    /// Source embedding, target embedding and output projection share storage.
    pub shared_embeddings: bool,
}

/// Size of the 32K-merge vocabulary plus the four special tokens.
pub const STUDENT_VOCAB: usize = 32_768 + 4;

impl ModelConfig {
    /// Transformer-base student: d_model 512, 8 encoder heads, encoder FFN 2048,
    /// shared embeddings.
    pub fn student(n_enc: usize, n_dec: usize, n_heads_dec: usize, ffn_dim_dec: usize) -> Self {
        Self {
            n_enc_layers: n_enc,
            n_dec_layers: n_dec,
            d_model: 512,
            n_heads_enc: 8,
            n_heads_dec,
            ffn_dim_enc: 2048,
            ffn_dim_dec,
            vocab_size: STUDENT_VOCAB,
            max_positions: 1024,
            norm_variant: NormVariant::L2,
            shared_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 {
            return bad("d_model must be positive".into());
        }
        if self.n_enc_layers == 0 {
            return bad("need at least one encoder layer".into());
        }
        if self.n_dec_layers == 0 {
            return bad("need at least one decoder layer".into());
        }
        for (name, h) in [("n_heads_enc", self.n_heads_enc), ("n_heads_dec", self.n_heads_dec)] {
            if h == 0 || !self.d_model.is_multiple_of(h) {
                return bad(format!("{name}={h} must divide d_model={}", self.d_model));
            }
        }
        if self.ffn_dim_enc == 0 {
            return bad("ffn_dim_enc must be positive".into());
        }
        if self.vocab_size < crate::text::vocab::NUM_SPECIALS + 1 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        Ok(())
    }

    pub fn has_decoder_ffn(&self) -> bool {
        self.ffn_dim_dec > 0
    }

    /// Exact parameter count. Shared embeddings are counted once; every
    /// projection carries a bias, including the output projection.
    pub fn count_params(&self) -> u64 {
        let d = self.d_model as u64;
        let v = self.vocab_size as u64;
        let attention = 4 * (d * d + d);
        let norm = 2 * d;
        let ffn = |f: u64| if f == 0 { 0 } else { 2 * d * f + f + d };

        let embeddings = if self.shared_embeddings { v * d } else { 3 * v * d };
        let output_bias = v;
        let enc_layer = attention + norm + ffn(self.ffn_dim_enc as u64) + norm;
        let dec_ffn = if self.has_decoder_ffn() {
            ffn(self.ffn_dim_dec as u64) + norm
        } else {
            0
        };
        let dec_layer = 2 * attention + 2 * norm + dec_ffn;
        embeddings
            + output_bias
            + self.n_enc_layers as u64 * enc_layer
            + self.n_dec_layers as u64 * dec_layer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(count: u64, reference_m: f64) -> f64 {
        (count as f64 / 1e6 - reference_m).abs() / reference_m
    }

    #[test]
    fn student_rows() {
        let s612 = ModelConfig::student(6, 1, 1, 512);
        let s610 = ModelConfig::student(6, 1, 1, 0);
        let s312 = ModelConfig::student(3, 1, 1, 512);
        assert!(rel(s612.count_params(), 38.0) <= 0.05);
        assert!(rel(s610.count_params(), 37.0) <= 0.05);
        assert!(rel(s312.count_params(), 28.0) <= 0.05);
        // decoder FFN: W1 512x512 + b1 + W2 512x512 + b2 + its norm
        let ffn = 2 * 512 * 512 + 512 + 512 + 2 * 512;
        assert_eq!(s612.count_params() - s610.count_params(), ffn);
    }

    #[test]
    fn exact_small_count() {
        let cfg = ModelConfig {
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_model: 2,
            n_heads_enc: 1,
            n_heads_dec: 1,
            ffn_dim_enc: 3,
            ffn_dim_dec: 0,
            vocab_size: 10,
            max_positions: 8,
            norm_variant: NormVariant::L1,
            shared_embeddings: true,
        };
        // emb 20 + out bias 10 + enc (24 + 4 + 17 + 4) + dec (48 + 8)
        assert_eq!(cfg.count_params(), 20 + 10 + 49 + 56);
    }

    #[test]
    fn monotone_in_each_dimension() {
        let base = ModelConfig::student(6, 1, 1, 512);
        let n = base.count_params();
        let mut c = base.clone();
        c.n_enc_layers += 1;
        assert!(c.count_params() > n);
        let mut c = base.clone();
        c.ffn_dim_enc += 1;
        assert!(c.count_params() > n);
        let mut c = base.clone();
        c.ffn_dim_dec += 1;
        assert!(c.count_params() > n);
        let mut c = base;
        c.vocab_size += 1;
        assert!(c.count_params() > n);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::student(6, 1, 1, 512);
        assert!(c.validate().is_ok());
        c.n_heads_dec = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::student(6, 0, 1, 512);
        assert!(c.validate().is_err());
        c.n_dec_layers = 1;
        c.ffn_dim_dec = 0;
        assert!(c.validate().is_ok());
    }
}
