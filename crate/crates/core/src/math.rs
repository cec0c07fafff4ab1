//! Dense row-major matrices and the hand-paired forward/backward rules the
//! cascade network is assembled from.
//!
//! Every backward rule here is checked against central finite differences in
//! the tests below; [`finite_diff_check`] is the same checker the CLI exposes.

use rayon::prelude::*;

use crate::error::{HdcError, Result};

/// Rows at or below this norm cannot be normalized.
pub const NORM_EPSILON: f64 = 1e-12;

/// Below this many multiply-adds a product runs on the calling thread.
const PARALLEL_FLOPS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HdcError::dim(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HdcError::Numeric(format!(
                "entry ({}, {}) is {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(HdcError::dim(
                "Matrix::from_rows",
                format!("row {bad} has {} columns, expected {cols}", rows[bad].len()),
            ));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(HdcError::Index {
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    /// Column range `[start, end)` as a new matrix.
    pub fn column_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(HdcError::dim(
                "Matrix::column_slice",
                format!("columns {start}..{end} of {}", self.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Self {
            rows: self.rows,
            cols: end - start,
            data,
        })
    }

    /// Horizontal concatenation.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Self> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(HdcError::dim("Matrix::hconcat", "row counts differ"));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Self { rows, cols, data })
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

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(HdcError::dim(
                "Matrix::add_assign",
                format!("{:?} += {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(self, op: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(HdcError::Numeric(format!(
                "{op} produced a non-finite entry"
            )))
        }
    }
}

/// `a · b`, row-parallel for large products. Each output entry is summed in
/// ascending inner index order regardless of thread count.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(HdcError::dim(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, inner, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    if m == 0 {
        return Ok(out);
    }
    let kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a.data[i * inner..(i + 1) * inner];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[t * m..(t + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if n * inner * m >= PARALLEL_FLOPS {
        out.data.par_chunks_mut(m).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(m).enumerate().for_each(kernel);
    }
    Ok(out)
}

/// `Y = X·W + b` with `b` broadcast over rows.
pub fn linear_forward(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols {
        return Err(HdcError::dim(
            "linear_forward",
            format!("bias of length {} for {} outputs", b.len(), w.cols),
        ));
    }
    let mut y = matmul(x, w)?;
    if w.cols > 0 {
        for row in y.data.chunks_mut(w.cols) {
            for (v, bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
    }
    y.ensure_finite("linear_forward")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

/// Backward rule for [`linear_forward`]: `dX = dY·Wᵀ`, `dW = Xᵀ·dY`, `db = Σ_rows dY`.
pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
    if x.cols != w.rows || dy.rows != x.rows || dy.cols != w.cols {
        return Err(HdcError::dim(
            "linear_backward",
            format!("x {:?}, w {:?}, dy {:?}", x.shape(), w.shape(), dy.shape()),
        ));
    }
    let dx = matmul(dy, &w.transpose())?;
    let dw = matmul(&x.transpose(), dy)?;
    let mut db = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        for (acc, v) in db.iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// `pre_activation` is the input that was given to [`relu_forward`].
pub fn relu_backward(pre_activation: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if pre_activation.shape() != dy.shape() {
        return Err(HdcError::dim(
            "relu_backward",
            format!("{:?} vs {:?}", pre_activation.shape(), dy.shape()),
        ));
    }
    Ok(Matrix {
        rows: dy.rows,
        cols: dy.cols,
        data: pre_activation
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Row-normalized matrix together with the original row norms, which the
/// backward rule needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub output: Matrix,
    pub norms: Vec<f64>,
}

pub fn l2_normalize_rows(x: &Matrix) -> Result<Normalized> {
    let mut output = x.clone();
    let mut norms = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = output.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= NORM_EPSILON {
            return Err(HdcError::DegenerateRow { row: r, norm });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok(Normalized { output, norms })
}

/// Applies the per-row Jacobian `(I − x̂x̂ᵀ)/‖x‖` to `dy`.
pub fn l2_normalize_backward(normalized: &Normalized, dy: &Matrix) -> Result<Matrix> {
    let out = &normalized.output;
    if out.shape() != dy.shape() || normalized.norms.len() != out.rows {
        return Err(HdcError::dim(
            "l2_normalize_backward",
            format!("{:?} vs {:?}", out.shape(), dy.shape()),
        ));
    }
    let mut dx = Matrix::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let unit = out.row(r);
        let g = dy.row(r);
        let proj: f64 = unit.iter().zip(g).map(|(u, g)| u * g).sum();
        let inv = 1.0 / normalized.norms[r];
        for ((d, &u), &gv) in dx.row_mut(r).iter_mut().zip(unit).zip(g) {
            *d = (gv - u * proj) * inv;
        }
    }
    Ok(dx)
}

/// Euclidean distance between two rows (not squared). Symmetric exactly:
/// `(a−b)² == (b−a)²` in IEEE arithmetic.
pub fn row_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn pairwise_distance(f: &Matrix, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            for idx in [i, j] {
                if idx >= f.rows {
                    return Err(HdcError::Index {
                        index: idx,
                        len: f.rows,
                    });
                }
            }
            Ok(row_distance(f.row(i), f.row(j)))
        })
        .collect()
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
    pub analytic_value: f64,
    pub numeric_value: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every coordinate.
pub fn central_differences<F>(mut loss_fn: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if step.is_nan() || step <= 0.0 {
        return Err(HdcError::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = loss_fn(&probe);
        probe[i] = params[i] - step;
        let down = loss_fn(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(HdcError::Numeric(format!(
                "loss not finite while perturbing parameter {i}"
            )));
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Compares `analytic` against central differences of `loss_fn` around
/// `params`, one coordinate at a time.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(HdcError::dim(
            "finite_diff_check",
            format!(
                "{} parameters, {} gradient entries",
                params.len(),
                analytic.len()
            ),
        ));
    }
    let numeric = central_differences(loss_fn, params, step)?;
    Ok(compare_gradients(analytic, &numeric))
}

/// Worst coordinate of `reference` against `numeric` by [`relative_error`].
pub fn compare_gradients(reference: &[f64], numeric: &[f64]) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter_index: 0,
        analytic_value: reference.first().copied().unwrap_or(0.0),
        numeric_value: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in reference.iter().zip(numeric).enumerate() {
        let err = relative_error(a, n);
        if err > report.max_relative_error {
            report = GradCheckReport {
                max_relative_error: err,
                worst_parameter_index: i,
                analytic_value: a,
                numeric_value: n,
            };
        }
    }
    report
}
