//! Dense linear algebra, selection, decomposition and random number primitives.
//!
//! Everything here is `f64` and single-threaded. Ties are always broken in
//! favour of the lowest index.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense vector of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("vector must have positive length"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite vector entry at {i}")));
        }
        Ok(Vector(data))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    /// Wraps data produced by arithmetic on finite inputs.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Vector(data)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract("matrix dimensions must be positive"));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite matrix entry at {i}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| {
                (i + 1..self.cols).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol)
            })
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    reduce_lanes(&acc) + tail
}

#[inline(always)]
fn reduce_lanes(acc: &[f64; 8]) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Two dot products sharing the left operand, each bit-identical to [`dot`].
#[inline(always)]
fn dot2(a: &[f64], b0: &[f64], b1: &[f64]) -> (f64, f64) {
    let (mut s0, mut s1) = ([0.0f64; 8], [0.0f64; 8]);
    let ca = a.chunks_exact(8);
    let c0 = b0.chunks_exact(8);
    let c1 = b1.chunks_exact(8);
    let (mut t0, mut t1) = (0.0, 0.0);
    for ((x, y0), y1) in ca.remainder().iter().zip(c0.remainder()).zip(c1.remainder()) {
        t0 += x * y0;
        t1 += x * y1;
    }
    for ((x, y0), y1) in ca.zip(c0).zip(c1) {
        for l in 0..8 {
            s0[l] += x[l] * y0[l];
            s1[l] += x[l] * y1[l];
        }
    }
    (reduce_lanes(&s0) + t0, reduce_lanes(&s1) + t1)
}

#[inline(always)]
fn gemm_nt_body(a: &[f64], b: &[f64], k: usize, c: &mut [f64]) {
    let n = b.len() / k;
    for (ai, ci) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        let mut rows = b.chunks_exact(k);
        let mut out = ci.iter_mut();
        while let (Some(b0), Some(b1)) = (rows.next(), rows.next()) {
            let (d0, d1) = dot2(ai, b0, b1);
            *out.next().unwrap() = d0;
            *out.next().unwrap() = d1;
        }
        if let Some(o) = out.next() {
            *o = dot(ai, &b[(n - 1) * k..]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_nt_avx2(a: &[f64], b: &[f64], k: usize, c: &mut [f64]) {
    gemm_nt_body(a, b, k, c)
}

/// `c = a · bᵀ` for row-major `a` (m x k) and `b` (n x k); `c` is m x n.
/// Every entry equals `dot` of the corresponding rows exactly.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], k: usize, c: &mut [f64]) {
    if k == 0 {
        c.fill(0.0);
        return;
    }
    debug_assert_eq!(a.len() % k, 0);
    debug_assert_eq!(b.len() % k, 0);
    debug_assert_eq!(c.len(), (a.len() / k) * (b.len() / k));
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { gemm_nt_avx2(a, b, k, c) };
    }
    gemm_nt_body(a, b, k, c)
}

/// Row-major transpose of an `rows x cols` block.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut t = vec![0.0; a.len()];
    for (r, row) in a.chunks_exact(cols.max(1)).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[c * rows + r] = v;
        }
    }
    t
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Writes `m · v` into `out` without allocating.
#[inline]
pub(crate) fn matvec_into(m: &Matrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, v.len());
    debug_assert_eq!(m.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), v);
    }
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::contract(format!(
            "matvec: matrix has {} columns, vector has length {}",
            m.cols,
            v.len()
        )));
    }
    let mut out = vec![0.0; m.rows];
    matvec_into(m, v, &mut out);
    Ok(Vector::from_raw(out))
}

/// `true` when `(a, ia)` ranks strictly ahead of `(b, ib)`: larger value, then lower index.
#[inline]
fn ranks_ahead(a: f64, ia: usize, b: f64, ib: usize) -> bool {
    a > b || (a == b && ia < ib)
}

/// Indices of the `k` largest values, sorted ascending by index.
pub fn top_k_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::contract(format!(
            "top_k: k = {k} outside 1..={}",
            values.len()
        )));
    }
    Ok(top_k_unchecked(values, k))
}

pub(crate) fn top_k_unchecked(values: &[f64], k: usize) -> Vec<usize> {
    // Insertion into a rank-ordered buffer of length k: O(N k), which beats a
    // sort for the small k used in routing.
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (i, &v) in values.iter().enumerate() {
        if best.len() == k {
            let last = best[k - 1];
            if !ranks_ahead(v, i, values[last], last) {
                continue;
            }
            best.pop();
        }
        let pos = best
            .iter()
            .position(|&j| ranks_ahead(v, i, values[j], j))
            .unwrap_or(best.len());
        best.insert(pos, i);
    }
    best.sort_unstable();
    best
}

/// Softmax restricted to `subset`; entries outside the subset are zero.
pub fn softmax_over(values: &[f64], subset: &[usize]) -> Result<Vector> {
    if subset.is_empty() {
        return Err(Error::contract("softmax_over: empty subset"));
    }
    let mut seen = vec![false; values.len()];
    for &i in subset {
        if i >= values.len() || seen[i] {
            return Err(Error::contract(format!(
                "softmax_over: index {i} repeated or out of range"
            )));
        }
        seen[i] = true;
    }
    Ok(Vector::from_raw(softmax_over_unchecked(values, subset)))
}

pub(crate) fn softmax_over_unchecked(values: &[f64], subset: &[usize]) -> Vec<f64> {
    let max = subset
        .iter()
        .map(|&i| values[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; values.len()];
    let mut total = 0.0;
    for &i in subset {
        let e = (values[i] - max).exp();
        out[i] = e;
        total += e;
    }
    for &i in subset {
        out[i] /= total;
    }
    out
}

/// Dense softmax over all entries.
pub(crate) fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition.
pub fn sym_eigen(m: &Matrix) -> Result<SymEigen> {
    let n = m.rows;
    if m.rows != m.cols {
        return Err(Error::contract("sym_eigen: matrix is not square"));
    }
    let scale = m.data.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    if !m.is_symmetric(1e-12 * scale) {
        return Err(Error::contract("sym_eigen: matrix is not symmetric"));
    }

    let mut a = m.clone();
    // Start exactly symmetric.
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = Matrix::identity(n);
    let target = 1e-12 * m.frobenius_norm().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) < target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate_columns(&mut a, p, q, c, s);
                rotate_rows(&mut a, p, q, c, s);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, dst, v.get(r, src));
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn sym_eigenvalues(m: &Matrix) -> Result<Vector> {
    sym_eigen(m).map(|e| Vector::from_raw(e.values))
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.rows {
        for j in 0..a.cols {
            if i != j {
                sum += a.get(i, j) * a.get(i, j);
            }
        }
    }
    sum.sqrt()
}

fn rotate_columns(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..a.rows {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
}

fn rotate_rows(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..a.cols {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
}

/// SplitMix64 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)` from the top 53 bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller. Consumes exactly two uniforms.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_uniform(); // (0, 1]
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_uniform() * n as f64) as usize).min(n - 1)
    }

    /// Derives an independent stream, advancing `self` by one draw.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}
