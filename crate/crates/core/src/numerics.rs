//! Dense kernels shared by every cache strategy.
//!
//! All strategies route through these functions so that identical inputs are
//! reduced in an identical order. Summations always run with the innermost
//! index ascending from a `+0.0` accumulator.

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type used throughout the model and caches.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    const BYTES: usize;
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Raw bit pattern widened to 64 bits, for bit-identity checks and checksums.
    fn bits(self) -> u64;
}

impl Element for f32 {
    const BYTES: usize = 4;
    const PRECISION: Precision = Precision::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Element for f64 {
    const BYTES: usize = 8;
    const PRECISION: Precision = Precision::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Element> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// Matrix product. Each output element accumulates over the inner index in
/// ascending order, so a row of the result depends only on the matching row of `a`.
pub fn matmul<T: Element>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        vec_mat_into(a.row(i), b, out.row_mut(i));
    }
    Ok(out)
}

/// `out = x · w`, with `out` pre-zeroed by the caller. Loop order i-k-j keeps
/// the per-element summation order ascending in k.
pub(crate) fn vec_mat_into<T: Element>(x: &[T], w: &Matrix<T>, out: &mut [T]) {
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    for (k, &xk) in x.iter().enumerate() {
        let wrow = w.row(k);
        for (o, &wkj) in out.iter_mut().zip(wrow) {
            *o = *o + xk * wkj;
        }
    }
}

/// Row-major boolean matrix; `true` marks a visible (query, key) cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Lower-triangular mask of a plain causal self-attention.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_true(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }
}

/// Accumulating counter of computed (query, key) cells.
#[derive(Debug, Default)]
pub struct CellCounter(AtomicU64);

impl CellCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// A sequence of equally wide rows. Lets the attention kernel read keys from
/// several physical blocks without copying them.
pub trait RowSource<T> {
    fn n_rows(&self) -> usize;
    fn width(&self) -> usize;
    fn row(&self, i: usize) -> &[T];
}

impl<T: Element> RowSource<T> for Matrix<T> {
    fn n_rows(&self) -> usize {
        self.rows
    }
    fn width(&self) -> usize {
        self.cols
    }
    fn row(&self, i: usize) -> &[T] {
        Matrix::row(self, i)
    }
}

/// Two contiguous row blocks read back to back: `head` rows first, then `tail`.
#[derive(Debug, Clone, Copy)]
pub struct SegmentedRows<'a, T> {
    head: &'a [T],
    tail: &'a [T],
    width: usize,
}

impl<'a, T> SegmentedRows<'a, T> {
    pub fn new(head: &'a [T], tail: &'a [T], width: usize) -> Self {
        debug_assert!(width > 0);
        debug_assert_eq!(head.len() % width, 0);
        debug_assert_eq!(tail.len() % width, 0);
        Self { head, tail, width }
    }
}

impl<T> RowSource<T> for SegmentedRows<'_, T> {
    fn n_rows(&self) -> usize {
        (self.head.len() + self.tail.len()) / self.width
    }
    fn width(&self) -> usize {
        self.width
    }
    fn row(&self, i: usize) -> &[T] {
        let head_rows = self.head.len() / self.width;
        if i < head_rows {
            &self.head[i * self.width..(i + 1) * self.width]
        } else {
            let j = i - head_rows;
            &self.tail[j * self.width..(j + 1) * self.width]
        }
    }
}

/// Softmax of one row in place. `-inf` entries map to exactly zero.
pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) -> std::result::Result<(), ()> {
    let mut max = T::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return Err(());
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        let e = if *x == T::neg_infinity() {
            T::zero()
        } else {
            (*x - max).exp()
        };
        *x = e;
        sum = sum + e;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    Ok(())
}

pub fn softmax_rows<T: Element>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r)).map_err(|_| Error::MaskedRow { row: r })?;
    }
    Ok(out)
}

pub fn rms_norm<T: Element>(x: &[T], gamma: &[T], eps: T) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); x.len()];
    rms_norm_into(x, gamma, eps, &mut out)?;
    Ok(out)
}

pub(crate) fn rms_norm_into<T: Element>(x: &[T], gamma: &[T], eps: T, out: &mut [T]) -> Result<()> {
    if x.len() != gamma.len() || x.len() != out.len() {
        return Err(Error::Shape(format!(
            "rms_norm over {} elements with {} gains",
            x.len(),
            gamma.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("rms_norm over an empty vector".into()));
    }
    let mut sq = T::zero();
    for &v in x {
        sq = sq + v * v;
    }
    let denom = (sq / T::from_f64(x.len() as f64) + eps).sqrt();
    if denom == T::zero() {
        return Err(Error::DivisionByZero("rms_norm"));
    }
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gamma) {
        *o = g * v / denom;
    }
    Ok(())
}

/// Per-pair rotation frequencies `base^(-2i/d)`.
pub(crate) fn rope_frequencies(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2)
        .map(|i| base.powf(-((2 * i) as f64) / d as f64))
        .collect()
}

/// Rotates consecutive feature pairs of `x` by `pos * freq[i]`.
pub(crate) fn rope_rotate<T: Element>(x: &mut [T], pos: usize, freqs: &[f64]) {
    debug_assert_eq!(x.len(), freqs.len() * 2);
    if pos == 0 {
        return;
    }
    for (i, &f) in freqs.iter().enumerate() {
        let angle = pos as f64 * f;
        let (s, c) = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

/// Applies rotary position embedding to each row of `x` at its position id.
pub fn rope_apply<T: Element>(x: &Matrix<T>, positions: &[usize], base: f64) -> Result<Matrix<T>> {
    if !x.cols.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "rope over odd head dimension {}",
            x.cols
        )));
    }
    if positions.len() != x.rows {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows
        )));
    }
    let freqs = rope_frequencies(x.cols, base);
    let mut out = x.clone();
    for (r, &p) in positions.iter().enumerate() {
        rope_rotate(out.row_mut(r), p, &freqs);
    }
    Ok(out)
}

/// Scaled dot-product attention with a boolean visibility mask.
///
/// Masked cells are never scored: they enter the softmax as `-inf` and are
/// skipped in the value sum, so they contribute exactly nothing. The counter
/// grows by the number of visible cells.
pub fn masked_attention<T, K, V>(
    q: &Matrix<T>,
    k: &K,
    v: &V,
    mask: &BoolMatrix,
    scale: T,
    counter: &CellCounter,
) -> Result<Matrix<T>>
where
    T: Element,
    K: RowSource<T> + ?Sized,
    V: RowSource<T> + ?Sized,
{
    if q.cols != k.width() {
        return Err(Error::Shape(format!(
            "query width {} vs key width {}",
            q.cols,
            k.width()
        )));
    }
    let nk = k.n_rows();
    if v.n_rows() != nk || mask.cols != nk || mask.rows != q.rows {
        return Err(Error::Shape(format!(
            "attention with {} keys, {} values, {}x{} mask for {} queries",
            nk,
            v.n_rows(),
            mask.rows,
            mask.cols,
            q.rows
        )));
    }
    let dv = v.width();
    let mut out = Matrix::zeros(q.rows, dv);
    let mut scores = vec![T::neg_infinity(); nk];
    let mut visible = 0u64;
    for i in 0..q.rows {
        let qi = q.row(i);
        let mrow = mask.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            if mrow[j] {
                let mut dot = T::zero();
                for (&a, &b) in qi.iter().zip(k.row(j)) {
                    dot = dot + a * b;
                }
                *s = dot * scale;
                visible += 1;
            } else {
                *s = T::neg_infinity();
            }
        }
        softmax_in_place(&mut scores).map_err(|_| Error::MaskedRow { row: i })?;
        let orow = out.row_mut(i);
        for (j, &p) in scores.iter().enumerate() {
            if !mrow[j] {
                continue;
            }
            for (o, &vv) in orow.iter_mut().zip(v.row(j)) {
                *o = *o + p * vv;
            }
        }
    }
    counter.add(visible);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(
            a.matmul(&Matrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0], &[1000.0, 1000.0]])).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        let s = softmax_rows(&m(&[&[0.0, f64::NEG_INFINITY, 0.0]])).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let r = softmax_rows(&m(&[&[1.0], &[f64::NEG_INFINITY]]));
        assert_eq!(r, Err(Error::MaskedRow { row: 1 }));
    }

    #[test]
    fn rms_norm_examples() {
        let ones = [1.0f64; 4];
        assert_eq!(rms_norm(&ones, &ones, 0.0).unwrap(), ones.to_vec());
        let g = [0.5, -2.0, 3.0];
        for c in [-3.5f64, 0.25, 7.0] {
            let out = rms_norm(&[c; 3], &g, 0.0).unwrap();
            for (o, gi) in out.iter().zip(g) {
                assert!((o - c.signum() * gi).abs() < 1e-12);
            }
        }
        let out = rms_norm(&[3.0f64, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((out[0] - 0.84853).abs() < 1e-4);
        assert!((out[1] - 1.13137).abs() < 1e-4);
        assert_eq!(
            rms_norm(&[0.0f32; 3], &[1.0; 3], 0.0),
            Err(Error::DivisionByZero("rms_norm"))
        );
    }

    #[test]
    fn rope_examples() {
        let x = m(&[&[0.3, -1.2, 2.0, 0.7]]);
        assert_eq!(rope_apply(&x, &[0], 10000.0).unwrap(), x);
        let r = rope_apply(&m(&[&[1.0, 0.0]]), &[1], 123.0).unwrap();
        assert!((r.get(0, 0) - 1f64.cos()).abs() < 1e-12);
        assert!((r.get(0, 1) - 1f64.sin()).abs() < 1e-12);
        let odd = Matrix::<f32>::zeros(1, 3);
        assert!(matches!(
            rope_apply(&odd, &[1], 10000.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn attention_single_key_returns_value() {
        let c = CellCounter::new();
        let q = m(&[&[0.3, -0.2]]);
        let k = m(&[&[1.0, 2.0]]);
        let v = m(&[&[4.0, -5.0, 6.0]]);
        let o = masked_attention(&q, &k, &v, &BoolMatrix::new(1, 1, true), 0.5, &c).unwrap();
        assert_eq!(o, v);
        assert_eq!(c.get(), 1);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let c = CellCounter::new();
        let q = m(&[&[0.3, -0.2]]);
        let k = m(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let v = m(&[&[4.0, -6.0], &[2.0, 8.0]]);
        let o = masked_attention(&q, &k, &v, &BoolMatrix::new(1, 2, true), 1.0, &c).unwrap();
        assert_eq!(o.row(0), &[3.0, 1.0]);
    }

    #[test]
    fn attention_causal_count_and_masked_row() {
        let c = CellCounter::new();
        let x = m(&[&[0.1, 0.2], &[0.3, -0.1], &[-0.5, 0.4]]);
        masked_attention(&x, &x, &x, &BoolMatrix::causal(3), 1.0, &c).unwrap();
        assert_eq!(c.get(), 6);
        let mut mask = BoolMatrix::causal(3);
        mask.set(0, 0, false);
        assert_eq!(
            masked_attention(&x, &x, &x, &mask, 1.0, &c),
            Err(Error::MaskedRow { row: 0 })
        );
    }

    #[test]
    fn segmented_rows_match_contiguous_matrix() {
        let full = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let seg = SegmentedRows::new(&full.data()[..2], &full.data()[2..], 2);
        assert_eq!(seg.n_rows(), 3);
        for i in 0..3 {
            assert_eq!(seg.row(i), full.row(i));
        }
    }
}
