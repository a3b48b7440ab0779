//! Dense vector/matrix primitives shared by every other module.
//!
//! All arithmetic is `f64` and all reductions run in a fixed index order, so
//! results are bit-reproducible for a given input.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Beta, Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as a degenerate (zero) feature.
pub const ZERO_NORM: f64 = 1e-12;

/// Floor applied to `q` before taking logs in [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// Row sums of a distribution must be within this of one.
pub const DIST_TOL: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix construction"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0×0 matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context: "add_scaled",
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every row has unit Euclidean norm within `tol`.
    pub fn rows_unit_norm(&self, tol: f64) -> bool {
        self.iter_rows().all(|r| (norm(r) - 1.0).abs() <= tol)
    }
}

/// Row-stochastic matrix: entries in `[0, 1]`, each row summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix {
    inner: DenseMatrix,
}

impl ProbMatrix {
    /// Validates that `m` is row-stochastic.
    pub fn new(m: DenseMatrix) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            check_distribution(row).map_err(|e| match e {
                Error::NotADistribution(msg) => Error::NotADistribution(format!("row {i}: {msg}")),
                other => other,
            })?;
        }
        Ok(Self { inner: m })
    }

    #[inline]
    pub fn matrix(&self) -> &DenseMatrix {
        &self.inner
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.inner
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        self.inner.row(r)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.inner.cols()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::NotADistribution("entry outside [0, 1]".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::NotADistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// Seeded, platform-independent generator.
///
/// Backed by xoshiro256++ with the state expanded from the 64-bit seed by
/// SplitMix64 (`rand_xoshiro`'s `seed_from_u64`). Identical seeds give
/// identical streams on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream derived from the original seed and `stream`.
    /// Does not depend on how much of the parent stream was consumed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(stream.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// Draw from Beta(a, b); both parameters must be positive.
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        Beta::new(a, b)
            .expect("beta parameters validated by caller")
            .sample(&mut self.inner)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let n = norm(v);
    if n < ZERO_NORM || !n.is_finite() {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if n < ZERO_NORM {
            return Err(Error::ZeroVector { norm: n });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise `softmax(logits / tau)` with per-row max subtraction.
pub fn softmax_rows(logits: &DenseMatrix, tau: f64) -> Result<ProbMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits"));
    }
    let mut out = DenseMatrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), tau, out.row_mut(r));
    }
    Ok(ProbMatrix { inner: out })
}

fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `KL(p ‖ q)` with `0·ln(0/q) = 0` and `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(kl_unchecked(p, q))
}

pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum()
}

/// `out[i][j] = U_i · W_j`.
pub fn pairwise_logits(u: &DenseMatrix, w: &DenseMatrix) -> Result<DenseMatrix> {
    if u.cols() != w.cols() {
        return Err(Error::DimensionMismatch {
            expected: u.cols(),
            actual: w.cols(),
        });
    }
    let mut out = DenseMatrix::zeros(u.rows(), w.rows());
    for i in 0..u.rows() {
        let ui = u.row(i);
        for j in 0..w.rows() {
            out.set(i, j, dot(ui, w.row(j)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-6);
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&DenseMatrix::zeros(1, 3), 2.5).unwrap();
        for v in p.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_rows(&DenseMatrix::from_rows(&[vec![5.0]]).unwrap(), 1.0).unwrap();
        assert_eq!(p.row(0), &[1.0]);
        let p = softmax_rows(&DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), 1.0).unwrap();
        assert!((p.row(0)[0] - 0.731_059).abs() < 1e-6);
        assert!((p.row(0)[1] - 0.268_941).abs() < 1e-6);
        assert!(matches!(
            softmax_rows(&DenseMatrix::zeros(1, 2), 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(kl_divergence(&[0.25, 0.75], &[0.25, 0.75]).unwrap(), 0.0);
        assert!(matches!(
            kl_divergence(&[0.5, 0.4], &[0.5, 0.5]),
            Err(Error::NotADistribution(_))
        ));
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
        // zero q entries are floored rather than producing infinities
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn pairwise_examples() {
        let i2 = DenseMatrix::identity(2);
        assert_eq!(pairwise_logits(&i2, &i2).unwrap(), i2);
        let u = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(pairwise_logits(&u, &w).unwrap().data(), &[2.0, 3.0]);
        let empty = DenseMatrix::zeros(0, 2);
        assert_eq!(pairwise_logits(&empty, &w).unwrap().shape(), (0, 2));
        assert!(pairwise_logits(&DenseMatrix::zeros(1, 3), &w).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.row(2), &[5.0, 6.0, 4.0]);
        assert_eq!(a.transpose().t_matmul(&b).unwrap(), ab);
    }

    #[test]
    fn rng_is_deterministic_and_forks_independent() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let f1 = a.fork(3).next_u64();
        let f2 = SeededRng::new(7).fork(3).next_u64();
        assert_eq!(f1, f2);
        assert_ne!(SeededRng::new(7).fork(4).next_u64(), f2);
        let mut p = SeededRng::new(1).permutation(10);
        p.sort_unstable();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e4f64..1e4, 1..12)
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in row_strategy(), tau in 1e-3f64..100.0) {
            let m = DenseMatrix::from_rows(&[row]).unwrap();
            let p = softmax_rows(&m, tau).unwrap();
            let s: f64 = p.row(0).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-50f64..50.0, 1..10), shift in -1e3f64..1e3) {
            let a = DenseMatrix::from_rows(std::slice::from_ref(&row)).unwrap();
            let b = DenseMatrix::from_rows(&[row.iter().map(|v| v + shift).collect()]).unwrap();
            let pa = softmax_rows(&a, 1.0).unwrap();
            let pb = softmax_rows(&b, 1.0).unwrap();
            prop_assert!(pa.matrix().max_abs_diff(pb.matrix()) < 1e-9);
        }

        #[test]
        fn cosine_scale_invariant(
            a in prop::collection::vec(-10f64..10.0, 3),
            b in prop::collection::vec(-10f64..10.0, 3),
            l in 0.01f64..100.0,
            m in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
            let la: Vec<f64> = a.iter().map(|x| x * l).collect();
            let mb: Vec<f64> = b.iter().map(|x| x * m).collect();
            let c1 = cosine_sim(&a, &b).unwrap();
            let c2 = cosine_sim(&la, &mb).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-9);
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-100f64..100.0, 1..16)) {
            prop_assume!(norm(&v) > 1e-6);
            let n1 = l2_normalize(&v).unwrap();
            let n2 = l2_normalize(&n1).unwrap();
            for (a, b) in n1.iter().zip(&n2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
