//! Minimal dense f64 tensor used by every other module.
//!
//! The representation is a flat row-major buffer plus a shape vector. All
//! reduction loops run in a fixed order so results are bit-identical across
//! runs and thread counts.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that `data` matches `shape` and contains
    /// only finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeError(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.validate_finite("tensor construction")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    /// Rank-1 tensor from a plain vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Rank-2 tensor from rows. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::ShapeError(format!(
                    "ragged rows: expected {} columns, got {}",
                    n_cols,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![n_rows, n_cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows of a rank-2 tensor.
    pub fn n_rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "n_rows needs a rank-2 tensor");
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn n_cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "n_cols needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    /// Borrows row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row access needs a rank-2 tensor");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (idx, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{context}: element {idx} is {v}"
                )));
            }
        }
        Ok(())
    }

    /// Euclidean norm over all elements. Errors on an empty tensor.
    pub fn l2_norm(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::EmptyTensor("l2_norm of empty tensor".into()));
        }
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        Ok(acc.sqrt())
    }

    /// Keeps the elements whose absolute value lies strictly below the
    /// nearest-rank `p`-th percentile of absolute values, in flat storage
    /// order. The threshold is the `ceil(p * n)`-th smallest absolute value.
    ///
    /// Two fallbacks guarantee a non-empty result: tensors with fewer than 20
    /// elements are returned whole, and if the strict comparison keeps
    /// nothing (for example when every element is equal) the whole tensor is
    /// returned as well.
    pub fn percentile_filter(&self, p: f64) -> Result<Tensor> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::BadPercentile(p));
        }
        if self.data.is_empty() {
            return Err(Error::EmptyTensor("percentile_filter of empty tensor".into()));
        }
        let n = self.data.len();
        if n < 20 {
            return Tensor::vector(self.data.clone());
        }
        let threshold = nearest_rank_abs_threshold(&self.data, p);
        let kept: Vec<f64> = self
            .data
            .iter()
            .copied()
            .filter(|v| v.abs() < threshold)
            .collect();
        if kept.is_empty() {
            return Tensor::vector(self.data.clone());
        }
        Tensor::vector(kept)
    }

    /// Returns the leading `[c_out, c_in]` submatrix of a rank-2 tensor.
    pub fn slice2d(&self, c_out: usize, c_in: usize) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::SliceBounds(format!(
                "slice2d needs a rank-2 tensor, got rank {}",
                self.rank()
            )));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        if c_out < 1 || c_out > rows || c_in < 1 || c_in > cols {
            return Err(Error::SliceBounds(format!(
                "requested [{c_out}, {c_in}] from a [{rows}, {cols}] tensor"
            )));
        }
        let mut data = Vec::with_capacity(c_out * c_in);
        for i in 0..c_out {
            let start = i * cols;
            data.extend_from_slice(&self.data[start..start + c_in]);
        }
        Ok(Tensor {
            shape: vec![c_out, c_in],
            data,
        })
    }

    /// In-place `self += scale * other`. Shapes must match exactly.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(
            self.shape, other.shape,
            "add_scaled shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale_in_place(&mut self, scale: f64) {
        for v in &mut self.data {
            *v *= scale;
        }
    }

    /// Elementwise difference `self - other` as a new tensor.
    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "sub shape mismatch: {:?} vs {:?}",
            self.shape, other.shape
        );
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Largest absolute elementwise difference against another tensor of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Nearest-rank percentile threshold over absolute values: the
/// `ceil(p * n)`-th smallest absolute value. The tiny epsilon keeps a product
/// like `0.95 * 100` from drifting just above the integer it represents.
pub(crate) fn nearest_rank_abs_threshold(values: &[f64], p: f64) -> f64 {
    let n = values.len();
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_unstable_by(f64::total_cmp);
    let rank = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let rank = rank.min(n);
    abs[rank - 1]
}

/// `x @ w^T` for `x: [n, i]`, `w: [o, i]` -> `[n, o]`.
pub fn matmul_nt(x: &Tensor, w: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2);
    assert_eq!(w.rank(), 2);
    let (n, i) = (x.shape[0], x.shape[1]);
    let (o, wi) = (w.shape[0], w.shape[1]);
    assert_eq!(i, wi, "matmul_nt inner dimension mismatch");
    let mut out = Tensor::zeros(vec![n, o]);
    for r in 0..n {
        let xr = &x.data[r * i..(r + 1) * i];
        for c in 0..o {
            let wc = &w.data[c * i..(c + 1) * i];
            let mut acc = 0.0;
            for k in 0..i {
                acc += xr[k] * wc[k];
            }
            out.data[r * o + c] = acc;
        }
    }
    out
}

/// `a^T @ x` for `a: [n, o]`, `x: [n, i]` -> `[o, i]`.
pub fn matmul_tn(a: &Tensor, x: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2);
    assert_eq!(x.rank(), 2);
    let (n, o) = (a.shape[0], a.shape[1]);
    let (xn, i) = (x.shape[0], x.shape[1]);
    assert_eq!(n, xn, "matmul_tn batch dimension mismatch");
    let mut out = Tensor::zeros(vec![o, i]);
    for r in 0..n {
        let ar = &a.data[r * o..(r + 1) * o];
        let xr = &x.data[r * i..(r + 1) * i];
        for c in 0..o {
            let av = ar[c];
            if av == 0.0 {
                continue;
            }
            let dst = &mut out.data[c * i..(c + 1) * i];
            for k in 0..i {
                dst[k] += av * xr[k];
            }
        }
    }
    out
}

/// `a @ w` for `a: [n, o]`, `w: [o, i]` -> `[n, i]`.
pub fn matmul_nn(a: &Tensor, w: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2);
    assert_eq!(w.rank(), 2);
    let (n, o) = (a.shape[0], a.shape[1]);
    let (wo, i) = (w.shape[0], w.shape[1]);
    assert_eq!(o, wo, "matmul_nn inner dimension mismatch");
    let mut out = Tensor::zeros(vec![n, i]);
    for r in 0..n {
        let ar = &a.data[r * o..(r + 1) * o];
        for c in 0..o {
            let av = ar[c];
            if av == 0.0 {
                continue;
            }
            let wr = &w.data[c * i..(c + 1) * i];
            let dst = &mut out.data[r * i..(r + 1) * i];
            for k in 0..i {
                dst[k] += av * wr[k];
            }
        }
    }
    out
}
