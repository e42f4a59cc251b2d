//! Dense row-major `f64` tensors.

use crate::error::{shape_err, Error, Result};

/// Dense tensor of 64-bit reals stored row-major.
///
/// `product(shape) == data.len()` always holds; constructors enforce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor rank is at least 1")
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[r * c..(r + 1) * c]
    }

    /// Matrix dims `(rows, cols)`; errors unless rank is 2.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for axis of size {d}");
            acc * d + i
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Errors with `what` in the message when any entry is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", self.data[i]))),
        }
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul inner dims differ: [{m},{k}] x [{k2},{n}]"));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }
}

/// Inner loops shared by the eager and recorded paths. All of them keep a
/// fixed summation order so results are bit-reproducible.
pub(crate) mod kernels {
    /// `c[m,n] += a[m,k] * b[k,n]`
    pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let c_row = &mut c[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            axpy_rows(a_row, b, c_row, n);
        }
    }

    /// `c += sum_p coef[p] * rows[p]`, each element accumulated in
    /// ascending `p`. Four rows are streamed per pass over `c`.
    fn axpy_rows(coef: &[f64], rows: &[f64], c: &mut [f64], n: usize) {
        let k = coef.len();
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (coef[p], coef[p + 1], coef[p + 2], coef[p + 3]);
            let b0 = &rows[p * n..(p + 1) * n];
            let b1 = &rows[(p + 1) * n..(p + 2) * n];
            let b2 = &rows[(p + 2) * n..(p + 3) * n];
            let b3 = &rows[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                let mut v = c[j];
                v += a0 * b0[j];
                v += a1 * b1[j];
                v += a2 * b2[j];
                v += a3 * b3[j];
                c[j] = v;
            }
            p += 4;
        }
        for p in p..k {
            let av = coef[p];
            for (cv, &bv) in c.iter_mut().zip(&rows[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }

    /// `da[m,k] += dc[m,n] * b[k,n]^T`
    pub fn matmul_nt_acc(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let dc_row = &dc[i * n..(i + 1) * n];
            let da_row = &mut da[i * k..(i + 1) * k];
            for (p, dv) in da_row.iter_mut().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                *dv += dot(dc_row, b_row);
            }
        }
    }

    /// `db[k,n] += a[m,k]^T * dc[m,n]`
    pub fn matmul_tn_acc(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
        let mut col = vec![0.0; m];
        for p in 0..k {
            for (i, v) in col.iter_mut().enumerate() {
                *v = a[i * k + p];
            }
            axpy_rows(&col, dc, &mut db[p * n..(p + 1) * n], n);
        }
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        // four independent accumulators, combined in a fixed order
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            let o = c * 4;
            acc[0] += a[o] * b[o];
            acc[1] += a[o + 1] * b[o + 1];
            acc[2] += a[o + 2] * b[o + 2];
            acc[3] += a[o + 3] * b[o + 3];
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for o in chunks * 4..a.len() {
            s += a[o] * b[o];
        }
        s
    }
}
