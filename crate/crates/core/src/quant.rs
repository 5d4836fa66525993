//! Per-column 8-bit weight quantization, dynamic activation quantization,
//! panel packing and the integer GEMM.
//!
//! Weights use signed 8-bit codes with one affine map per column, fitted to
//! the window `[mean - 7σ, mean + 7σ]`:
//!
//! ```text
//! scale[j]     = 14 σ_j / 255
//! zeropoint[j] = 127 - (mean_j + 7 σ_j) / scale[j]      (= -0.5 - mean_j / scale[j])
//! q[i, j]      = clamp(round(w[i, j] / scale[j] + zeropoint[j]), -128, 127)
//! ```
//!
//! Activations use unsigned codes fitted to `[x_min, x_max]`:
//!
//! ```text
//! scale     = (x_max - x_min) / 255
//! zeropoint = 255 - x_max / scale                       (= -x_min / scale)
//! ```
//!
//! Zeropoints are real-valued, so the GEMM accumulates `Σ qa·qb` in `i32` and
//! applies the zeropoint cross terms afterwards from precomputed row and
//! column code sums.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_PANEL_WIDTH: usize = 8;
pub const DEFAULT_ROW_BLOCK: usize = 32;

/// Largest inner dimension for which the `i32` accumulator cannot overflow:
/// `255 · 128 · 2^15 < 2^31`.
pub const MAX_INNER_DIM: usize = 1 << 15;

const WEIGHT_HALF_RANGE_SIGMAS: f64 = 7.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
}

pub fn column_stats<T: Scalar>(w: &Tensor<T>) -> Result<ColumnStats> {
    let (k, n) = w.dims2()?;
    if k == 0 {
        return Err(shape_err("column_stats needs at least one row"));
    }
    let data = w.data();
    let mut mean = vec![0.0f64; n];
    let mut std = vec![0.0f64; n];
    for j in 0..n {
        let pivot = data[j].as_f64();
        let mut shifted = 0.0;
        for i in 0..k {
            shifted += data[i * n + j].as_f64() - pivot;
        }
        let mu = pivot + shifted / k as f64;
        let mut ss = 0.0;
        for i in 0..k {
            let d = data[i * n + j].as_f64() - mu;
            ss += d * d;
        }
        mean[j] = mu;
        std[j] = (ss / k as f64).sqrt();
    }
    Ok(ColumnStats { mean, std })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    q: Vec<i8>,
    col_scale: Vec<f32>,
    col_zeropoint: Vec<f32>,
}

impl QuantizedMatrix {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        q: Vec<i8>,
        col_scale: Vec<f32>,
        col_zeropoint: Vec<f32>,
    ) -> Result<Self> {
        if q.len() != rows * cols || col_scale.len() != cols || col_zeropoint.len() != cols {
            return Err(shape_err(format!(
                "quantized {rows}x{cols}: payload {}, scales {}, zeropoints {}",
                q.len(),
                col_scale.len(),
                col_zeropoint.len()
            )));
        }
        if col_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Integrity("column scale must be finite and positive".into()));
        }
        if col_zeropoint.iter().any(|z| !z.is_finite()) {
            return Err(Error::Integrity("column zeropoint must be finite".into()));
        }
        Ok(Self {
            rows,
            cols,
            q,
            col_scale,
            col_zeropoint,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn q(&self) -> &[i8] {
        &self.q
    }
    pub fn col_scale(&self) -> &[f32] {
        &self.col_scale
    }
    pub fn col_zeropoint(&self) -> &[f32] {
        &self.col_zeropoint
    }
}

#[inline]
fn round_clamp(v: f64, lo: f64, hi: f64) -> f64 {
    // f64::round is half-away-from-zero.
    v.round().clamp(lo, hi)
}

/// Affine parameters for one weight column; `None` marks a degenerate column.
fn weight_column_params(mean: f64, std: f64) -> (f32, f32) {
    let scale = (2.0 * WEIGHT_HALF_RANGE_SIGMAS * std / 255.0) as f32;
    if std > 0.0 && scale.is_normal() {
        let zp = (-0.5 - mean / scale as f64) as f32;
        if zp.is_finite() {
            return (scale, zp);
        }
    }
    // σ = 0: unit scale and a zeropoint that reproduces the constant exactly.
    (1.0, (-mean) as f32)
}

pub fn quantize_weights<T: Scalar>(w: &Tensor<T>) -> Result<QuantizedMatrix> {
    let (k, n) = w.dims2()?;
    if n == 0 {
        return Err(shape_err("quantize_weights needs at least one column"));
    }
    let stats = column_stats(w)?;
    let (col_scale, col_zeropoint): (Vec<f32>, Vec<f32>) = stats
        .mean
        .iter()
        .zip(&stats.std)
        .map(|(&m, &s)| weight_column_params(m, s))
        .unzip();
    let mut q = Vec::with_capacity(k * n);
    for row in w.data().chunks(n) {
        for ((&v, &s), &z) in row.iter().zip(&col_scale).zip(&col_zeropoint) {
            q.push(round_clamp(v.as_f64() / s as f64 + z as f64, -128.0, 127.0) as i8);
        }
    }
    QuantizedMatrix::from_parts(k, n, q, col_scale, col_zeropoint)
}

pub fn dequantize_weights<T: Scalar>(qm: &QuantizedMatrix) -> Tensor<T> {
    let n = qm.cols;
    Tensor::from_fn(vec![qm.rows, n], |idx| {
        let j = idx % n;
        T::lit((qm.q[idx] as f64 - qm.col_zeropoint[j] as f64) * qm.col_scale[j] as f64)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// One scale/zeropoint for the whole matrix.
    PerMatrix,
    /// Each row is quantized as its own 1×k matrix.
    PerRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedActivations {
    rows: usize,
    cols: usize,
    q: Vec<u8>,
    granularity: Granularity,
    scale: Vec<f32>,
    zeropoint: Vec<f32>,
}

impl QuantizedActivations {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn q(&self) -> &[u8] {
        &self.q
    }
    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    /// `(scale, zeropoint)` applying to row `i`.
    pub fn params(&self, i: usize) -> (f32, f32) {
        match self.granularity {
            Granularity::PerMatrix => (self.scale[0], self.zeropoint[0]),
            Granularity::PerRow => (self.scale[i], self.zeropoint[i]),
        }
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        let k = self.cols.max(1);
        Tensor::from_fn(vec![self.rows, self.cols], |idx| {
            let (s, z) = self.params(idx / k);
            T::lit((self.q[idx] as f64 - z as f64) * s as f64)
        })
    }
}

fn activation_params<T: Scalar>(values: &[T]) -> (f32, f32) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let scale = ((hi - lo) / 255.0) as f32;
        if scale.is_normal() {
            let zp = (-lo / scale as f64) as f32;
            if zp.is_finite() {
                return (scale, zp);
            }
        }
    }
    // Constant (or empty) input maps to code 0.
    let c = if lo.is_finite() { lo } else { 0.0 };
    (1.0, (-c) as f32)
}

fn quantize_slice<T: Scalar>(values: &[T], scale: f32, zp: f32, out: &mut Vec<u8>) {
    let (s, z) = (scale as f64, zp as f64);
    out.extend(
        values
            .iter()
            .map(|v| round_clamp(v.as_f64() / s + z, 0.0, 255.0) as u8),
    );
}

/// Quantizes an activation matrix with one scale/zeropoint from its live range.
pub fn quantize_activations<T: Scalar>(x: &Tensor<T>) -> Result<QuantizedActivations> {
    let (m, k) = x.dims2()?;
    let (scale, zp) = activation_params(x.data());
    let mut q = Vec::with_capacity(m * k);
    quantize_slice(x.data(), scale, zp, &mut q);
    Ok(QuantizedActivations {
        rows: m,
        cols: k,
        q,
        granularity: Granularity::PerMatrix,
        scale: vec![scale],
        zeropoint: vec![zp],
    })
}

/// Quantizes each row of `x` independently, so a row's codes never depend on
/// the other rows in the batch.
pub fn quantize_activations_per_row<T: Scalar>(x: &Tensor<T>) -> Result<QuantizedActivations> {
    let (m, k) = x.dims2()?;
    let mut q = Vec::with_capacity(m * k);
    let mut scale = Vec::with_capacity(m);
    let mut zeropoint = Vec::with_capacity(m);
    for i in 0..m {
        let row = &x.data()[i * k..(i + 1) * k];
        let (s, z) = activation_params(row);
        quantize_slice(row, s, z, &mut q);
        scale.push(s);
        zeropoint.push(z);
    }
    Ok(QuantizedActivations {
        rows: m,
        cols: k,
        q,
        granularity: Granularity::PerRow,
        scale,
        zeropoint,
    })
}

/// Quantized weights reordered into column panels of `panel_width`, each split
/// into row blocks of `row_block`, row-major inside a block. Edge panels and
/// blocks are ragged.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    panel_width: usize,
    row_block: usize,
    payload: Vec<i8>,
    col_scale: Vec<f32>,
    col_zeropoint: Vec<f32>,
    col_sums: Vec<i32>,
}

impl PackedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn panel_width(&self) -> usize {
        self.panel_width
    }
    pub fn row_block(&self) -> usize {
        self.row_block
    }
    pub fn payload(&self) -> &[i8] {
        &self.payload
    }
    pub fn col_scale(&self) -> &[f32] {
        &self.col_scale
    }
    pub fn col_zeropoint(&self) -> &[f32] {
        &self.col_zeropoint
    }
    pub fn col_sums(&self) -> &[i32] {
        &self.col_sums
    }

    /// Quantizes and packs a float weight matrix with the default layout.
    pub fn from_weights<T: Scalar>(w: &Tensor<T>) -> Result<Self> {
        pack(&quantize_weights(w)?, DEFAULT_PANEL_WIDTH, DEFAULT_ROW_BLOCK)
    }

    fn panels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.cols)
            .step_by(self.panel_width)
            .map(move |j0| (j0, self.panel_width.min(self.cols - j0)))
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows)
            .step_by(self.row_block)
            .map(move |k0| (k0, self.row_block.min(self.rows - k0)))
    }
}

pub fn pack(qm: &QuantizedMatrix, panel_width: usize, row_block: usize) -> Result<PackedMatrix> {
    if panel_width == 0 || row_block == 0 {
        return Err(shape_err("panel_width and row_block must be at least 1"));
    }
    let (k, n) = (qm.rows, qm.cols);
    let mut packed = PackedMatrix {
        rows: k,
        cols: n,
        panel_width,
        row_block,
        payload: Vec::with_capacity(k * n),
        col_scale: qm.col_scale.clone(),
        col_zeropoint: qm.col_zeropoint.clone(),
        col_sums: vec![0; n],
    };
    let panels: Vec<_> = packed.panels().collect();
    let blocks: Vec<_> = packed.blocks().collect();
    for &(j0, w) in &panels {
        for &(k0, h) in &blocks {
            for kk in k0..k0 + h {
                packed.payload.extend_from_slice(&qm.q[kk * n + j0..kk * n + j0 + w]);
            }
        }
    }
    for row in qm.q.chunks(n.max(1)) {
        for (s, &v) in packed.col_sums.iter_mut().zip(row) {
            *s += v as i32;
        }
    }
    Ok(packed)
}

pub fn unpack(p: &PackedMatrix) -> QuantizedMatrix {
    let (k, n) = (p.rows, p.cols);
    let mut q = vec![0i8; k * n];
    let mut src = p.payload.iter();
    for (j0, w) in p.panels() {
        for (k0, h) in p.blocks() {
            for kk in k0..k0 + h {
                for jj in j0..j0 + w {
                    q[kk * n + jj] = *src.next().expect("payload length matches dims");
                }
            }
        }
    }
    QuantizedMatrix {
        rows: k,
        cols: n,
        q,
        col_scale: p.col_scale.clone(),
        col_zeropoint: p.col_zeropoint.clone(),
    }
}

/// `C[i, j] = sa_i · sb_j · Σ_k (qa[i,k] - za_i)(qb[k,j] - zb_j)`.
///
/// The code products are exact in `i32` for `k ≤ MAX_INNER_DIM`; the cross
/// terms are applied in `f64` from row/column code sums.
pub fn qgemm<T: Scalar>(a: &QuantizedActivations, b: &PackedMatrix) -> Result<Tensor<T>> {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if k != b.rows {
        return Err(shape_err(format!(
            "qgemm inner dimensions disagree: {m}x{k} * {}x{n}",
            b.rows
        )));
    }
    if k > MAX_INNER_DIM {
        return Err(shape_err(format!(
            "qgemm inner dimension {k} exceeds accumulator bound {MAX_INNER_DIM}"
        )));
    }
    let mut acc = vec![0i32; m * n];
    kernel::accumulate(&a.q, b, &mut acc, m);

    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a.q[i * k..(i + 1) * k];
        let row_sum: i64 = arow.iter().map(|&v| v as i64).sum();
        let (sa, za) = a.params(i);
        let (sa, za) = (sa as f64, za as f64);
        for j in 0..n {
            let zb = b.col_zeropoint[j] as f64;
            let dot = acc[i * n + j] as f64 - zb * row_sum as f64 - za * b.col_sums[j] as f64
                + k as f64 * za * zb;
            out.push(T::lit(sa * b.col_scale[j] as f64 * dot));
        }
    }
    Tensor::new(vec![m, n], out)
}

mod kernel {
    use super::PackedMatrix;

    /// Adds `qa · qb` into `acc` (row-major `m × n`); accumulator tiles stay
    /// in registers across the whole inner dimension.
    pub(super) fn accumulate(qa: &[u8], b: &PackedMatrix, acc: &mut [i32], m: usize) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { accumulate_avx2(qa, b, acc, m) };
                return;
            }
        }
        accumulate_generic(qa, b, acc, m)
    }

    /// Rows of A handled together, sharing every load of B.
    #[cfg(target_arch = "x86_64")]
    const ROW_TILE: usize = 6;

    /// Rows of A walked across all panels before moving on, so a panel
    /// stays in L1 while it is reused.
    const ROW_GROUP: usize = 48;

    /// Width-8 panels use `vpmaddwd`: two adjacent panel rows are
    /// interleaved byte-wise and widened to i16, then multiplied against the
    /// matching pair of activation codes, giving exact i32 pair sums.
    /// Activation pairs are prepared once as `lo | hi << 16`.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn accumulate_avx2(qa: &[u8], b: &PackedMatrix, acc: &mut [i32], m: usize) {
        let (k, n) = (b.rows, b.cols);
        let kp = k.div_ceil(2);
        let mut pairs = vec![0u32; m * kp];
        for (row, out) in qa.chunks_exact(k.max(1)).zip(pairs.chunks_exact_mut(kp.max(1))) {
            for (p, o) in out.iter_mut().enumerate() {
                let hi = row.get(2 * p + 1).copied().unwrap_or(0) as u32;
                *o = row[2 * p] as u32 | (hi << 16);
            }
        }
        for i0 in (0..m).step_by(ROW_GROUP) {
            let i_end = (i0 + ROW_GROUP).min(m);
            for (j0, w) in b.panels() {
                let panel = &b.payload[j0 * k..j0 * k + w * k];
                if w != 8 {
                    panel_generic(qa, panel, acc, i0..i_end, k, n, j0, w);
                    continue;
                }
                let mut i = i0;
                while i + ROW_TILE <= i_end {
                    tile_avx2::<ROW_TILE>(&pairs, panel, acc, i, k, n, j0);
                    i += ROW_TILE;
                }
                for i in i..i_end {
                    tile_avx2::<1>(&pairs, panel, acc, i, k, n, j0);
                }
            }
        }
    }

    /// Rows `i..i + R` against one width-8 panel (row-major `k × 8`).
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    #[inline]
    unsafe fn tile_avx2<const R: usize>(pairs: &[u32], panel: &[i8], acc: &mut [i32], i: usize, k: usize, n: usize, j0: usize) {
        use std::arch::x86_64::*;

        // [r0 c0..c7 | r1 c0..c7] -> [r0c0 r1c0 r0c1 r1c1 ..]
        let interleave = _mm_setr_epi8(0, 8, 1, 9, 2, 10, 3, 11, 4, 12, 5, 13, 6, 14, 7, 15);
        let kp = k.div_ceil(2);
        let full = k / 2;
        let ap: [*const u32; R] = std::array::from_fn(|r| pairs.as_ptr().add((i + r) * kp));
        let cp: [*mut i32; R] = std::array::from_fn(|r| acc.as_mut_ptr().add((i + r) * n + j0));
        let mut c: [__m256i; R] = std::array::from_fn(|r| _mm256_loadu_si256(cp[r] as *const __m256i));
        for p in 0..kp {
            let src = panel.as_ptr().add(p * 16) as *const __m128i;
            let bytes = if p < full { _mm_loadu_si128(src) } else { _mm_loadl_epi64(src) };
            let bv = _mm256_cvtepi8_epi16(_mm_shuffle_epi8(bytes, interleave));
            for r in 0..R {
                let av = _mm256_set1_epi32(*ap[r].add(p) as i32);
                c[r] = _mm256_add_epi32(c[r], _mm256_madd_epi16(av, bv));
            }
        }
        for r in 0..R {
            _mm256_storeu_si256(cp[r] as *mut __m256i, c[r]);
        }
    }

    /// Portable kernel. Every panel of the packed payload is a row-major
    /// `k × w` strip, because its row blocks are stored consecutively.
    pub(super) fn accumulate_generic(qa: &[u8], b: &PackedMatrix, acc: &mut [i32], m: usize) {
        let (k, n) = (b.rows, b.cols);
        for i0 in (0..m).step_by(ROW_GROUP) {
            let rows = i0..(i0 + ROW_GROUP).min(m);
            for (j0, w) in b.panels() {
                let panel = &b.payload[j0 * k..j0 * k + w * k];
                panel_generic(qa, panel, acc, rows.clone(), k, n, j0, w);
            }
        }
    }

    /// One `k × w` panel against rows `rows` of A. u8·i8 fits in i16
    /// (|255·-128| < 2^15).
    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn panel_generic(qa: &[u8], panel: &[i8], acc: &mut [i32], rows: std::ops::Range<usize>, k: usize, n: usize, j0: usize, w: usize) {
        for i in rows {
            let arow = &qa[i * k..(i + 1) * k];
            let out = &mut acc[i * n + j0..i * n + j0 + w];
            for (&av, brow) in arow.iter().zip(panel.chunks_exact(w)) {
                let av = av as i16;
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += (av * bv as i16) as i32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    fn col(values: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn column_stats_examples() {
        let s = column_stats(&col(&[1., 1., 1.])).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 0.0));
        let s = column_stats(&col(&[-1., 0., 1.])).unwrap();
        assert_eq!(s.mean[0], 0.0);
        assert!((s.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let s = column_stats(&col(&[0., 2.])).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
    }

    #[test]
    fn constant_column_is_exact() {
        for c in [3.25f32, -0.1, 0.0, 1e6] {
            let qm = quantize_weights(&col(&[c, c, c])).unwrap();
            assert_eq!(qm.q(), &[0, 0, 0]);
            assert_eq!(qm.col_scale(), &[1.0]);
            assert_eq!(qm.col_zeropoint(), &[-c]);
            assert_eq!(dequantize_weights::<f32>(&qm).data(), &[c, c, c]);
        }
    }

    #[test]
    fn symmetric_column_example() {
        let qm = quantize_weights(&col(&[-1., 0., 1.])).unwrap();
        let sigma = (2.0f64 / 3.0).sqrt();
        assert!((qm.col_scale()[0] as f64 - 14.0 * sigma / 255.0).abs() < 1e-7);
        assert!((qm.col_scale()[0] - 0.044828).abs() < 1e-6);
        assert_eq!(qm.col_zeropoint()[0], -0.5);
        assert_eq!(qm.q(), &[-23, -1, 22]);
        let back = dequantize_weights::<f32>(&qm);
        for (x, y) in back.data().iter().zip([-1.0f32, 0.0, 1.0]) {
            assert!((x - y).abs() <= 0.0225, "{x} vs {y}");
        }
    }

    #[test]
    fn window_endpoints_hit_code_range_ends() {
        // mean 0, population std 1
        let mut w = col(&[-1., 1., -1., 1.]);
        let qm = quantize_weights(&w).unwrap();
        let (s, z) = (qm.col_scale()[0] as f64, qm.col_zeropoint()[0] as f64);
        assert_eq!((7.0 / s + z).round(), 127.0);
        assert_eq!((-7.0 / s + z).round(), -128.0);
        // one outlier among 201 values sits ~14σ out and saturates
        let mut v = vec![1.0f32; 201];
        for (i, x) in v.iter_mut().enumerate() {
            if i % 2 == 1 {
                *x = -1.0;
            }
        }
        v[0] = 1000.0;
        w = col(&v);
        let qm = quantize_weights(&w).unwrap();
        let st = column_stats(&w).unwrap();
        assert_eq!(qm.q()[0], 127);
        let top = dequantize_weights::<f64>(&qm).data()[0];
        let expected = st.mean[0] + 7.0 * st.std[0];
        assert!((top - expected).abs() <= qm.col_scale()[0] as f64);
    }

    #[test]
    fn activation_example() {
        let x = Tensor::from_rows(&[[0.0f32, 1.0, 2.55]]).unwrap();
        let qa = quantize_activations(&x).unwrap();
        let (s, z) = qa.params(0);
        assert!((s - 0.01).abs() < 1e-9);
        assert_eq!(z, 0.0);
        assert_eq!(qa.q(), &[0, 100, 255]);
    }

    #[test]
    fn activation_degenerate_is_exact() {
        for c in [0.1f32, -4.0, 7.25] {
            let x = Tensor::from_rows(&[[c]]).unwrap();
            let qa = quantize_activations(&x).unwrap();
            assert_eq!(qa.params(0).0, 1.0);
            assert_eq!(qa.dequantize::<f32>().data(), &[c]);
        }
    }

    #[test]
    fn activation_range_ends() {
        let x = Tensor::from_fn(vec![4, 5], |i| ((i * 7919) % 23) as f32 * 0.37 - 3.1);
        let qa = quantize_activations(&x).unwrap();
        let (imin, imax) = x
            .data()
            .iter()
            .enumerate()
            .fold((0, 0), |(lo, hi), (i, &v)| {
                (
                    if v < x.data()[lo] { i } else { lo },
                    if v > x.data()[hi] { i } else { hi },
                )
            });
        assert_eq!(qa.q()[imin], 0);
        assert_eq!(qa.q()[imax], 255);
    }

    #[test]
    fn per_row_ignores_other_rows() {
        let a = Tensor::from_rows(&[[0.5f32, -1.0, 2.0], [100.0, -300.0, 7.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.5f32, -1.0, 2.0]]).unwrap();
        let qa = quantize_activations_per_row(&a).unwrap();
        let qb = quantize_activations_per_row(&b).unwrap();
        assert_eq!(&qa.q()[..3], qb.q());
        assert_eq!(qa.params(0), qb.params(0));
    }

    #[test]
    fn pack_single_element() {
        let qm = QuantizedMatrix::from_parts(1, 1, vec![-7], vec![0.5], vec![1.0]).unwrap();
        let p = pack(&qm, 8, 32).unwrap();
        assert_eq!(p.payload(), &[-7]);
        assert_eq!(p.col_sums(), &[-7]);
    }

    #[test]
    fn pack_4x4_layout() {
        let q: Vec<i8> = (0..16).collect();
        let qm = QuantizedMatrix::from_parts(4, 4, q, vec![1.0; 4], vec![0.0; 4]).unwrap();
        let p = pack(&qm, 2, 2).unwrap();
        // (rows 0-1, cols 0-1), (rows 2-3, cols 0-1), (rows 0-1, cols 2-3), (rows 2-3, cols 2-3)
        assert_eq!(
            p.payload(),
            &[0, 1, 4, 5, 8, 9, 12, 13, 2, 3, 6, 7, 10, 11, 14, 15]
        );
        assert_eq!(p.col_sums(), &[24, 28, 32, 36]);
        assert_eq!(unpack(&p), qm);
    }

    #[test]
    fn pack_rejects_zero_sizes() {
        let qm = QuantizedMatrix::from_parts(1, 1, vec![0], vec![1.0], vec![0.0]).unwrap();
        assert!(pack(&qm, 0, 1).is_err());
        assert!(pack(&qm, 1, 0).is_err());
    }

    #[test]
    fn from_parts_validates() {
        assert!(QuantizedMatrix::from_parts(2, 2, vec![0; 3], vec![1.0; 2], vec![0.0; 2]).is_err());
        assert!(QuantizedMatrix::from_parts(1, 1, vec![0], vec![0.0], vec![0.0]).is_err());
        assert!(QuantizedMatrix::from_parts(1, 1, vec![0], vec![1.0], vec![f32::NAN]).is_err());
    }

    #[test]
    fn qgemm_zero_activations() {
        // every activation equals its zeropoint after quantization
        let x = Tensor::<f32>::zeros(vec![3, 4]);
        let qa = quantize_activations(&x).unwrap();
        let w = Tensor::from_fn(vec![4, 5], |i| (i as f32 * 0.3).cos());
        let p = PackedMatrix::from_weights(&w).unwrap();
        let c: Tensor<f32> = qgemm(&qa, &p).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qgemm_2x2x2_matches_dequantized_product() {
        let x = Tensor::from_rows(&[[0.3f32, -1.2], [2.0, 0.7]]).unwrap();
        let w = Tensor::from_rows(&[[0.5f32, -0.25], [1.5, 0.75]]).unwrap();
        let qa = quantize_activations(&x).unwrap();
        let qm = quantize_weights(&w).unwrap();
        let p = pack(&qm, 8, 32).unwrap();
        let c: Tensor<f64> = qgemm(&qa, &p).unwrap();
        let oracle = matmul(&qa.dequantize::<f64>(), &dequantize_weights::<f64>(&qm)).unwrap();
        for (a, b) in c.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn dispatched_kernel_matches_portable_kernel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (m, k, n, pw, rb) in [(1, 1, 1, 8, 32), (5, 33, 17, 8, 32), (9, 7, 8, 8, 3), (4, 64, 24, 8, 32), (3, 10, 5, 2, 4)] {
            let a: Vec<u8> = (0..m * k).map(|_| rng.gen()).collect();
            let q: Vec<i8> = (0..k * n).map(|_| rng.gen()).collect();
            let qm = QuantizedMatrix::from_parts(k, n, q, vec![1.0; n], vec![0.0; n]).unwrap();
            let p = pack(&qm, pw, rb).unwrap();
            let (mut fast, mut portable) = (vec![0i32; m * n], vec![0i32; m * n]);
            kernel::accumulate(&a, &p, &mut fast, m);
            kernel::accumulate_generic(&a, &p, &mut portable, m);
            assert_eq!(fast, portable, "{m}x{k}x{n}");
            let exact: Vec<i32> = (0..m * n)
                .map(|idx| (0..k).map(|kk| a[idx / n * k + kk] as i32 * qm.q()[kk * n + idx % n] as i32).sum())
                .collect();
            assert_eq!(fast, exact);
        }
    }

    #[test]
    fn qgemm_shape_mismatch() {
        let qa = quantize_activations(&Tensor::<f32>::zeros(vec![2, 3])).unwrap();
        let p = PackedMatrix::from_weights(&Tensor::<f32>::identity(4)).unwrap();
        assert!(qgemm::<f32>(&qa, &p).is_err());
    }
}
