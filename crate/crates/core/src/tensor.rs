//! Dense row-major tensors and the float kernels used by the forward pass.
//!
//! These kernels double as the reference path for the int8 GEMM: every loop
//! runs in a fixed order, so a given input always produces the same bits, and
//! each output row of [`matmul`] depends only on the matching input row.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Default epsilon for both layer-normalization variants.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        match self.data.len().checked_div(self.cols()) {
            Some(r) => r,
            None => self.shape[..self.shape.len().saturating_sub(1)].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(shape_err(format!(
            "matmul inner dimensions disagree: {m}x{k} * {kb}x{n}"
        )));
    }
    let mut out = vec![T::zero(); m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a · b`. Every element accumulates its products in increasing `k`
/// order starting from its initial value, whatever the tiling, so a row's
/// result never depends on how many rows are multiplied with it.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { matmul_avx2(a, b, out, m, k, n) };
            return;
        }
    }
    matmul_tiled(a, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    matmul_tiled(a, b, out, m, k, n)
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 16;
const ROW_BLOCK: usize = 64;

#[inline(always)]
fn matmul_tiled<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    let b = &b[..k * n];
    let full_cols = n - n % TILE_COLS;
    for i_block in (0..m).step_by(ROW_BLOCK) {
        let i_end = (i_block + ROW_BLOCK).min(m);
        for j0 in (0..full_cols).step_by(TILE_COLS) {
            let mut i0 = i_block;
            while i0 + TILE_ROWS <= i_end {
                tile::<T, TILE_ROWS>(a, b, out, i0, k, n, j0);
                i0 += TILE_ROWS;
            }
            for i in i0..i_end {
                tile::<T, 1>(a, b, out, i, k, n, j0);
            }
        }
        if full_cols < n {
            for i in i_block..i_end {
                let orow = &mut out[i * n + full_cols..(i + 1) * n];
                for (&av, brow) in a[i * k..(i + 1) * k].iter().zip(b.chunks_exact(n)) {
                    for (o, &bv) in orow.iter_mut().zip(&brow[full_cols..]) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
}

/// Rows `i0..i0 + R`, columns `j0..j0 + TILE_COLS`, accumulated in registers.
#[inline(always)]
fn tile<T: Scalar, const R: usize>(a: &[T], b: &[T], out: &mut [T], i0: usize, k: usize, n: usize, j0: usize) {
    let rows: [&[T]; R] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
    let mut acc = [[T::zero(); TILE_COLS]; R];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS]);
    }
    for (kk, brow) in b.chunks_exact(n).enumerate() {
        let bt: &[T; TILE_COLS] = brow[j0..j0 + TILE_COLS].try_into().expect("full tile");
        for r in 0..R {
            let av = rows[r][kk];
            for (o, &bv) in acc[r].iter_mut().zip(bt) {
                *o += av * bv;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS].copy_from_slice(row);
    }
}

/// Softmax along `axis`, with the per-slice maximum subtracted first.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let rank = x.shape.len();
    if axis >= rank {
        return Err(shape_err(format!("softmax axis {axis} out of range for rank {rank}")));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (t, b) in buf.iter_mut().enumerate() {
                *b = x.data[base + t * inner];
            }
            softmax_in_place(&mut buf);
            for (t, b) in buf.iter().enumerate() {
                out.data[base + t * inner] = *b;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise `log_softmax`, used only where scores must be compared across rows.
pub fn log_softmax_row<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = v.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    v.iter().map(|&x| x - lse).collect()
}

/// Shifted mean: exact for constant rows, where a plain sum/len may round.
#[inline]
pub(crate) fn row_mean<T: Scalar>(row: &[T]) -> T {
    let pivot = row[0];
    let shifted: T = row.iter().map(|&x| x - pivot).sum();
    pivot + shifted / T::lit(row.len() as f64)
}

fn check_norm_params<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T]) -> Result<usize> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(format!(
            "norm params of length {}/{} for rows of width {d}",
            gain.len(),
            bias.len()
        )));
    }
    Ok(d)
}

/// Standard layer normalization over the last dimension (population variance).
pub fn layer_norm_l2<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T], eps: T) -> Result<Tensor<T>> {
    let d = check_norm_params(x, gain, bias)?;
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    let n = T::lit(d as f64);
    for row in out.data.chunks_mut(d) {
        let mu = row_mean(row);
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
            *v = g * (*v - mu) * inv + b;
        }
    }
    Ok(out)
}

/// Layer normalization by mean absolute deviation:
/// `gain * (x - mean) / (mean|x - mean| + eps) + bias`.
pub fn layer_norm_l1<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T], eps: T) -> Result<Tensor<T>> {
    let d = check_norm_params(x, gain, bias)?;
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    let n = T::lit(d as f64);
    for row in out.data.chunks_mut(d) {
        let mu = row_mean(row);
        let mad = row.iter().map(|&v| (v - mu).abs()).sum::<T>() / n;
        let inv = T::one() / (mad + eps);
        for ((v, &g), &b) in row.iter_mut().zip(gain).zip(bias) {
            *v = g * (*v - mu) * inv + b;
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    relu_in_place(&mut out);
    out
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

pub(crate) fn add_row_bias<T: Scalar>(x: &mut Tensor<T>, bias: &[T]) {
    let c = x.cols();
    debug_assert_eq!(c, bias.len());
    for row in x.data.chunks_mut(c.max(1)) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn add_assign<T: Scalar>(x: &mut Tensor<T>, y: &Tensor<T>) {
    debug_assert_eq!(x.shape, y.shape);
    for (a, &b) in x.data.iter_mut().zip(&y.data) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let m = t(&[&[1., 2.], &[3., 4.]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
        let p = matmul(&m, &t(&[&[5., 6.], &[7., 8.]])).unwrap();
        assert_eq!(p.data(), &[19., 22., 43., 50.]);
        let z = matmul(&Tensor::<f32>::zeros(vec![3, 4]), &Tensor::from_fn(vec![4, 2], |i| i as f32)).unwrap();
        assert_eq!(z.shape(), &[3, 2]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiled_matmul_matches_naive_order_bitwise() {
        for (m, k, n) in [(1, 1, 1), (5, 7, 16), (9, 33, 37), (70, 3, 20), (4, 16, 48)] {
            let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 101) as f32 - 50.0) / 7.0).collect();
            let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 97) as f32 - 48.0) / 11.0).collect();
            let mut naive = vec![0.5f32; m * n];
            for i in 0..m {
                for kk in 0..k {
                    for j in 0..n {
                        naive[i * n + j] += a[i * k + kk] * b[kk * n + j];
                    }
                }
            }
            let mut tiled = vec![0.5f32; m * n];
            matmul_into(&a, &b, &mut tiled, m, k, n);
            assert_eq!(tiled, naive, "{m}x{k}x{n}");
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &a), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn matmul_identity_right_is_exact() {
        let a = Tensor::from_fn(vec![5, 7], |i| (i as f32 * 0.37).sin() * 1e3);
        assert_eq!(matmul(&a, &Tensor::identity(7)).unwrap(), a);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[&[0., 0., 0., 0.]]), 1).unwrap();
        assert!(close(s.data(), &[0.25; 4], 1e-7));
        let s = softmax(&t(&[&[1000., 0.]]), 1).unwrap();
        assert!(close(s.data(), &[1.0, 0.0], 1e-6));
        let s = softmax(&t(&[&[1., 2., 3.]]), 1).unwrap();
        assert!(close(s.data(), &[0.09003, 0.24473, 0.66524], 1e-5));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[&[1., 5.], &[1., 5.]]);
        let s = softmax(&x, 0).unwrap();
        assert!(close(s.data(), &[0.5; 4], 1e-7));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let one = [1.0f32; 3];
        let zero = [0.0f32; 3];
        let c = layer_norm_l2(&t(&[&[5., 5., 5.]]), &one, &zero, 1e-6).unwrap();
        assert_eq!(c.data(), &[0., 0., 0.]);
        let c = layer_norm_l1(&t(&[&[5., 5., 5.]]), &one, &zero, 1e-6).unwrap();
        assert_eq!(c.data(), &[0., 0., 0.]);

        let x = t(&[&[1., 3.]]);
        let l2 = layer_norm_l2(&x, &[1., 1.], &[0., 0.], 1e-6).unwrap();
        assert!(close(l2.data(), &[-1., 1.], 1e-5));
        let l2 = layer_norm_l2(&x, &[2., 2.], &[1., 1.], 1e-6).unwrap();
        assert!(close(l2.data(), &[-1., 3.], 1e-5));
        let l1 = layer_norm_l1(&x, &[1., 1.], &[0., 0.], 1e-6).unwrap();
        assert!(close(l1.data(), &[-1., 1.], 1e-5));
        let l1 = layer_norm_l1(&t(&[&[10., 30.]]), &[1., 1.], &[0., 0.], 1e-6).unwrap();
        assert!(close(l1.data(), &[-1., 1.], 1e-6));
    }

    #[test]
    fn constant_rows_map_to_bias_exactly() {
        let x = t(&[&[0.1, 0.1, 0.1], &[-7.3, -7.3, -7.3]]);
        let g = [1.5f32, 2.0, -1.0];
        let b = [0.25f32, -3.0, 9.5];
        for y in [
            layer_norm_l1(&x, &g, &b, 1e-6).unwrap(),
            layer_norm_l2(&x, &g, &b, 1e-6).unwrap(),
        ] {
            assert_eq!(y.row(0), &b);
            assert_eq!(y.row(1), &b);
        }
    }

    #[test]
    fn norm_param_length_checked() {
        assert!(layer_norm_l1(&t(&[&[1., 2.]]), &[1.], &[0.], 1e-6).is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[&[-1., 0., 2.]])).data(), &[0., 0., 2.]);
        assert_eq!(relu(&t(&[&[-1., -0.5]])).data(), &[0., 0.]);
    }

    #[test]
    fn transpose_and_cast() {
        let x = t(&[&[1., 2., 3.], &[4., 5., 6.]]);
        let tx = x.transpose().unwrap();
        assert_eq!(tx.shape(), &[3, 2]);
        assert_eq!(tx.data(), &[1., 4., 2., 5., 3., 6.]);
        let d: Tensor<f64> = x.cast();
        assert_eq!(d.data()[5], 6.0);
    }
}
