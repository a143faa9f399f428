//! Dense f64 kernels: a row-major matrix, probability vectors, the softmax /
//! cross-entropy / KL family, and the central-difference gradient oracle.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vec64 = Vec<f64>;

/// Probabilities are clamped to this floor before any logarithm.
pub const LOG_FLOOR: f64 = 1e-300;

/// Norms below this are treated as zero by `cosine_similarity`.
pub const ZERO_NORM: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec64> {
        if x.len() != self.cols {
            return Err(invalid(format!(
                "matvec: {}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot_unchecked(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec64> {
        if y.len() != self.rows {
            return Err(invalid(format!(
                "matvec_t: ({}x{})ᵀ times vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }

    /// `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(invalid(format!(
                "outer product {}x{} into {}x{}",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            )));
        }
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &vc) in row.iter_mut().zip(v) {
                *w += s * vc;
            }
        }
        Ok(())
    }

    /// Copy of the column range `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Result<Mat64> {
        if start > end || end > self.cols {
            return Err(invalid(format!(
                "column range {start}..{end} out of bounds for {} columns",
                self.cols
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Mat64 {
            rows: self.rows,
            cols: width,
            data,
        })
    }

    pub fn dot(&self, other: &Mat64) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(invalid(format!(
                "dot of {:?} and {:?} matrices",
                self.shape(),
                other.shape()
            )));
        }
        Ok(dot_unchecked(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        dot_unchecked(&self.data, &self.data)
    }
}

/// A probability vector produced by [`softmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec64);

impl ProbVec {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Validates an externally supplied distribution.
    pub fn try_from_vec(values: Vec64) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("empty probability vector"));
        }
        if values.iter().any(|&p| !p.is_finite() || !(0.0..=1.0).contains(&p)) {
            return Err(invalid("probability entries must lie in [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self(values))
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// `ln(max(p_i, LOG_FLOOR))`.
    pub fn ln_at(&self, i: usize) -> f64 {
        self.0[i].max(LOG_FLOOR).ln()
    }
}

pub fn softmax(logits: &[f64]) -> Result<ProbVec> {
    if logits.len() < 2 {
        return Err(invalid("softmax needs at least two logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(invalid("softmax input contains non-finite values"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec64 = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbVec(exps.into_iter().map(|e| e / sum).collect()))
}

pub fn cross_entropy(p: &ProbVec, label: usize) -> Result<f64> {
    if label >= p.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} classes",
            p.len()
        )));
    }
    Ok(-p.ln_at(label))
}

/// `KL(p ‖ q) = Σ p log(p/q)` in nats.
pub fn kl_divergence(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid(format!(
            "KL between distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let kl: f64 = (0..p.len())
        .filter(|&i| p.0[i] > 0.0)
        .map(|i| p.0[i] * (p.ln_at(i) - q.ln_at(i)))
        .sum();
    // Rounding can leave tiny negative values near p == q.
    Ok(kl.max(0.0))
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "dot of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot_unchecked(a, b))
}

pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// Cosine of the angle between `a` and `b`; 0 when either is (numerically) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = dot(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Central-difference gradient of `loss` at `params`.
pub fn finite_difference_grad<F>(mut loss: F, params: &[f64], epsilon: f64) -> Result<Vec64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(invalid(format!(
            "finite-difference epsilon {epsilon} outside [1e-8, 1e-3]"
        )));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = loss(&probe)?;
        probe[i] = orig - epsilon;
        let minus = loss(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure(format!(
                "non-finite loss probing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}
