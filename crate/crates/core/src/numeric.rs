//! Dense 64-bit vector and matrix arithmetic with hand-written backward rules.
//!
//! Every differentiable operation here comes as a forward function plus a
//! `*_backward` companion mapping an output cotangent to input cotangents.
//! [`finite_difference_check`] verifies any such pair against central
//! differences.
//!
//! Normalizing sums (softmax, log-sum-exp) are accumulated in ascending order
//! of the summands, which makes them exactly invariant to input permutation.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

/// Denominator guard for cosine similarity of (near) zero vectors.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector {
    values: Vec<f64>,
}

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("vector"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim.max(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.values
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid(format!("matrix shape {rows}x{cols} must be positive")));
        }
        check_dim("matrix values", rows * cols, values.len())?;
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("matrix rows"))?;
        let cols = first.len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("matrix row", cols, r.len())?;
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `out = W x`, with `out` overwritten.
    pub(crate) fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    pub(crate) fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_into(x, &mut out);
        out
    }

    /// `out += Wᵀ g`.
    pub(crate) fn transpose_matvec_acc(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += gr * w;
            }
        }
    }
}

/// `acc += g xᵀ` for a row-major `acc` of shape `len(g) × len(x)`.
pub(crate) fn outer_acc(acc: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        for (a, &xv) in acc[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *a += gr * xv;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Sum in ascending order; the result depends only on the multiset of values.
pub(crate) fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// First index of the maximum (lowest index wins ties).
pub(crate) fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity on raw slices of equal length.
pub(crate) fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let denom = (norm(x) * norm(y)).max(COSINE_EPS);
    (dot(x, y) / denom).clamp(-1.0, 1.0)
}

/// Accumulates `dout · ∂cos/∂x` into `dx` and `dout · ∂cos/∂y` into `dy`.
pub(crate) fn cosine_backward_acc(x: &[f64], y: &[f64], dout: f64, dx: &mut [f64], dy: &mut [f64]) {
    let nx = norm(x);
    let ny = norm(y);
    let prod = nx * ny;
    if prod > COSINE_EPS {
        let c = dot(x, y) / prod;
        let inv = dout / prod;
        let cx = dout * c / (nx * nx);
        let cy = dout * c / (ny * ny);
        for i in 0..x.len() {
            dx[i] += inv * y[i] - cx * x[i];
            dy[i] += inv * x[i] - cy * y[i];
        }
    } else {
        let inv = dout / COSINE_EPS;
        axpy(inv, y, dx);
        axpy(inv, x, dy);
    }
}

pub fn cosine_similarity(x: &DenseVector, y: &DenseVector) -> Result<f64> {
    check_dim("cosine_similarity", x.dim(), y.dim())?;
    Ok(cosine(x.as_slice(), y.as_slice()))
}

pub fn cosine_backward(x: &DenseVector, y: &DenseVector, dout: f64) -> Result<(DenseVector, DenseVector)> {
    check_dim("cosine_backward", x.dim(), y.dim())?;
    let mut dx = vec![0.0; x.dim()];
    let mut dy = vec![0.0; y.dim()];
    cosine_backward_acc(x.as_slice(), y.as_slice(), dout, &mut dx, &mut dy);
    Ok((DenseVector { values: dx }, DenseVector { values: dy }))
}

fn softmax_unchecked(values: &[f64], gamma: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = values.iter().map(|&v| (gamma * (v - max)).exp()).collect();
    let total = ordered_sum(&mut weights.clone());
    for w in &mut weights {
        *w /= total;
    }
    weights
}

/// `(1/γ) log Σ exp(γ vᵢ)`, shifted by the maximum and evaluated with `ln_1p`.
pub fn stable_logsumexp(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("logsumexp values"));
    }
    if gamma.is_nan() || gamma <= 0.0 || !gamma.is_finite() {
        return Err(invalid(format!("logsumexp scale must be positive and finite, got {gamma}")));
    }
    let k = first_argmax(values);
    let max = values[k];
    let mut rest: Vec<f64> = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != k)
        .map(|(_, &v)| (gamma * (v - max)).exp())
        .collect();
    Ok(ordered_sum(&mut rest).ln_1p() / gamma + max)
}

/// Gradient of [`stable_logsumexp`] with respect to its inputs: `softmax(γ v)`.
pub fn logsumexp_backward(values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("logsumexp values"));
    }
    if gamma.is_nan() || gamma <= 0.0 || !gamma.is_finite() {
        return Err(invalid(format!("logsumexp scale must be positive and finite, got {gamma}")));
    }
    Ok(softmax_unchecked(values, gamma))
}

/// `softmax(γ v)`. `γ = 0` gives uniform weights.
pub fn stable_softmax(values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("softmax values"));
    }
    if !gamma.is_finite() {
        return Err(invalid(format!("softmax scale must be finite, got {gamma}")));
    }
    Ok(softmax_unchecked(values, gamma))
}

/// Input cotangent of `w = softmax(γ v)` given the output cotangent `dw`.
pub fn softmax_backward(weights: &[f64], dweights: &[f64], gamma: f64) -> Vec<f64> {
    let centre = dot(weights, dweights);
    weights
        .iter()
        .zip(dweights)
        .map(|(&w, &g)| gamma * w * (g - centre))
        .collect()
}

pub fn linear_transform(w: &DenseMatrix, b: Option<&DenseVector>, x: &DenseVector) -> Result<DenseVector> {
    check_dim("linear_transform input", w.cols(), x.dim())?;
    let mut out = w.matvec(x.as_slice());
    if let Some(b) = b {
        check_dim("linear_transform bias", w.rows(), b.dim())?;
        axpy(1.0, b.as_slice(), &mut out);
    }
    Ok(DenseVector { values: out })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
    pub input: DenseVector,
}

pub fn linear_backward(w: &DenseMatrix, x: &DenseVector, dout: &DenseVector) -> Result<LinearGrad> {
    check_dim("linear_backward input", w.cols(), x.dim())?;
    check_dim("linear_backward cotangent", w.rows(), dout.dim())?;
    let mut weight = DenseMatrix::zeros(w.rows(), w.cols());
    outer_acc(&mut weight.values, dout.as_slice(), x.as_slice());
    let mut input = vec![0.0; w.cols()];
    w.transpose_matvec_acc(dout.as_slice(), &mut input);
    Ok(LinearGrad {
        weight,
        bias: dout.clone(),
        input: DenseVector { values: input },
    })
}

/// Mean and population variance.
pub fn population_stats(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("population_stats values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// A scalar function with an analytic gradient.
pub trait ScalarFunction {
    fn value(&self, point: &[f64]) -> f64;
    fn gradient(&self, point: &[f64]) -> Vec<f64>;
}

/// Adapts a value closure and a gradient closure into a [`ScalarFunction`].
pub struct FnWithGrad<F, G>(pub F, pub G);

impl<F, G> ScalarFunction for FnWithGrad<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, point: &[f64]) -> f64 {
        (self.0)(point)
    }

    fn gradient(&self, point: &[f64]) -> Vec<f64> {
        (self.1)(point)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub pass: bool,
}

/// Compares the analytic gradient of `f` at `point` with central differences.
///
/// The relative error of coordinate `i` is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check<F: ScalarFunction + ?Sized>(
    f: &F,
    point: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(invalid(format!("finite difference step must be positive, got {step}")));
    }
    let analytic = f.gradient(point);
    check_dim("finite_difference_check gradient", point.len(), analytic.len())?;
    let mut probe = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut max_relative_error = 0.0_f64;
    let mut worst_coordinate = 0;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f.value(&probe);
        probe[i] = point[i] - step;
        let down = f.value(&probe);
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i });
        }
        let n = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_relative_error {
            max_relative_error = rel;
            worst_coordinate = i;
        }
        numeric.push(n);
    }
    Ok(GradCheckReport {
        max_relative_error,
        worst_coordinate,
        analytic,
        numeric,
        pass: max_relative_error < tolerance,
    })
}
