//! Scaled dot-product attention over row-major `[len × d]` buffers.
//!
//! The `1/√d_k` factor is applied to the query before the dot products rather
//! than to the attention logits. Heads are strided column ranges of the same
//! buffers, so a single head runs over whole rows with no split or merge.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_in_place, Tensor};

/// Added to the logit of every masked position.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug)]
pub enum Mask<'a> {
    None,
    /// Keys at index `>= valid` are padding.
    KeyPadding { valid: usize },
    /// Query `i` sees keys `j <= i + offset` with `j < valid`.
    Causal { valid: usize, offset: usize },
    /// Row-major `lq × lk`; `true` masks the position.
    Explicit(&'a [bool]),
}

impl Mask<'_> {
    #[inline]
    fn masked(&self, i: usize, j: usize, lk: usize) -> bool {
        match *self {
            Mask::None => false,
            Mask::KeyPadding { valid } => j >= valid,
            Mask::Causal { valid, offset } => j >= valid || j > i + offset,
            Mask::Explicit(m) => m[i * lk + j],
        }
    }
}

/// `softmax((q/√d_k) kᵀ + mask) v` for each head, heads concatenated.
/// The output projection is left to the caller.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Mask<'_>,
    n_heads: usize,
) -> Result<Tensor<T>> {
    let (lq, d) = q.dims2()?;
    let (lk, dk) = k.dims2()?;
    if v.shape() != k.shape() || dk != d {
        return Err(shape_err(format!(
            "attention shapes q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(shape_err(format!("{n_heads} heads do not divide width {d}")));
    }
    if let Mask::Explicit(m) = mask {
        if m.len() != lq * lk {
            return Err(shape_err("explicit mask shape disagrees with lq x lk"));
        }
    }
    let mut out = vec![T::zero(); lq * d];
    attend(q.data(), k.data(), v.data(), lq, lk, d, n_heads, mask, &mut out);
    Tensor::new(vec![lq, d], out)
}

/// Slice-level kernel behind [`attention`]; `out` must be zeroed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    n_heads: usize,
    mask: &Mask<'_>,
    out: &mut [T],
) {
    let dh = d / n_heads;
    let sqrt_dk = T::lit(dh as f64).sqrt();
    let mask_value = T::lit(MASK_VALUE);
    let mut qs = vec![T::zero(); dh];
    let mut scores = vec![T::zero(); lk];
    for i in 0..lq {
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            for (s, &x) in qs.iter_mut().zip(&q[i * d + cols.start..i * d + cols.end]) {
                *s = x / sqrt_dk;
            }
            for (j, score) in scores.iter_mut().enumerate() {
                let krow = &k[j * d + cols.start..j * d + cols.end];
                let mut dot = T::zero();
                for (&a, &b) in qs.iter().zip(krow) {
                    dot += a * b;
                }
                if mask.masked(i, j, lk) {
                    dot += mask_value;
                }
                *score = dot;
            }
            softmax_in_place(&mut scores);
            let orow = &mut out[i * d + cols.start..i * d + cols.end];
            for (j, &p) in scores.iter().enumerate() {
                let vrow = &v[j * d + cols.start..j * d + cols.end];
                for (o, &x) in orow.iter_mut().zip(vrow) {
                    *o += p * x;
                }
            }
        }
    }
}
