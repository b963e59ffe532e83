//! Resilient aggregation of equally shaped matrices.
//!
//! A rule `F` is `(f, λ)`-resilient when, whatever `f` of the `M` inputs
//! are, `‖F(G₁..G_M) − Ḡ_H‖ ≤ λ · max_{i,j∈H} ‖G_i − G_j‖` where `Ḡ_H`
//! is the mean of the honest inputs. Theoretical orders: CWTM is
//! `O(f/m)`, CWMed and the geometric median are `O(1)`. The constant is
//! never assumed here; [`empirical_resilience`] measures it.

use std::borrow::Borrow;
use std::cmp::Ordering;

use crate::mat::{frob_sq, spectral_norm, Mat};

pub const GEOMEDIAN_TOL: f64 = 1e-9;
pub const GEOMEDIAN_MAX_ITER: usize = 1_000;
/// Added to Weiszfeld distances so an iterate landing on an input stays finite.
const WEISZFELD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregateError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("input {index} is {got:?}, expected {expected:?}")]
    ShapeMismatch { index: usize, expected: (usize, usize), got: (usize, usize) },
    #[error("cannot trim {trim} per side from {count} inputs")]
    TrimTooLarge { trim: usize, count: usize },
    #[error("invalid rule parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationRule {
    Mean,
    /// Coordinate-wise trimmed mean dropping `trim` values from each end.
    Cwtm { trim: usize },
    /// Coordinate-wise median.
    CwMed,
    /// Geometric median via Weiszfeld iterations.
    GeoMedian { tol: f64, max_iter: usize },
    /// Per coordinate, mean of the `M − f` values closest to the median.
    MeaMed { f: usize },
}

impl AggregationRule {
    pub fn geomedian() -> Self {
        Self::GeoMedian { tol: GEOMEDIAN_TOL, max_iter: GEOMEDIAN_MAX_ITER }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Cwtm { .. } => "cwtm",
            Self::CwMed => "cwmed",
            Self::GeoMedian { .. } => "geomedian",
            Self::MeaMed { .. } => "meamed",
        }
    }
}

fn check_inputs<M: Borrow<Mat>>(inputs: &[M]) -> Result<(usize, usize), AggregateError> {
    let first = inputs.first().ok_or(AggregateError::Empty)?.borrow();
    let shape = first.shape();
    for (index, m) in inputs.iter().enumerate() {
        let got = m.borrow().shape();
        if got != shape {
            return Err(AggregateError::ShapeMismatch { index, expected: shape, got });
        }
    }
    Ok(shape)
}

fn sort_floats(values: &mut [f64]) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Apply `reduce` to every coordinate's column of values.
fn coordinatewise<M: Borrow<Mat>>(
    inputs: &[M],
    shape: (usize, usize),
    mut reduce: impl FnMut(&mut [f64]) -> f64,
) -> Mat {
    let mut column = vec![0.0; inputs.len()];
    Mat::from_fn(shape.0, shape.1, |r, c| {
        for (slot, m) in column.iter_mut().zip(inputs) {
            *slot = m.borrow()[(r, c)];
        }
        reduce(&mut column)
    })
}

/// Aggregate `inputs` with `rule`.
pub fn aggregate<M: Borrow<Mat>>(rule: &AggregationRule, inputs: &[M]) -> Result<Mat, AggregateError> {
    let shape = check_inputs(inputs)?;
    let count = inputs.len();
    match *rule {
        AggregationRule::Mean => Ok(mean(inputs, shape)),
        AggregationRule::Cwtm { trim } => {
            if count <= 2 * trim {
                return Err(AggregateError::TrimTooLarge { trim, count });
            }
            Ok(coordinatewise(inputs, shape, |values| {
                sort_floats(values);
                let kept = &values[trim..count - trim];
                kept.iter().sum::<f64>() / kept.len() as f64
            }))
        }
        AggregationRule::CwMed => Ok(coordinatewise(inputs, shape, |values| {
            sort_floats(values);
            median_sorted(values)
        })),
        AggregationRule::MeaMed { f } => {
            if f >= count {
                return Err(AggregateError::TrimTooLarge { trim: f, count });
            }
            Ok(coordinatewise(inputs, shape, |values| {
                sort_floats(values);
                let med = median_sorted(values);
                // Closest to the median first; ties resolved by value so the
                // choice never depends on input order.
                values.sort_by(|a, b| {
                    (a - med)
                        .abs()
                        .partial_cmp(&(b - med).abs())
                        .unwrap_or(Ordering::Equal)
                        .then(a.partial_cmp(b).unwrap_or(Ordering::Equal))
                });
                let kept = &values[..count - f];
                kept.iter().sum::<f64>() / kept.len() as f64
            }))
        }
        AggregationRule::GeoMedian { tol, max_iter } => {
            if !(tol > 0.0) {
                return Err(AggregateError::InvalidParameter(format!("geomedian tol must be positive, got {tol}")));
            }
            Ok(geometric_median(inputs, shape, tol, max_iter))
        }
    }
}

fn mean<M: Borrow<Mat>>(inputs: &[M], shape: (usize, usize)) -> Mat {
    let mut acc = Mat::zeros(shape.0, shape.1);
    for m in inputs {
        acc += m.borrow();
    }
    acc / inputs.len() as f64
}

fn geometric_median<M: Borrow<Mat>>(inputs: &[M], shape: (usize, usize), tol: f64, max_iter: usize) -> Mat {
    let mut y = mean(inputs, shape);
    for _ in 0..max_iter {
        let mut numer = Mat::zeros(shape.0, shape.1);
        let mut weight_sum = 0.0;
        for m in inputs {
            let m = m.borrow();
            let w = 1.0 / (frob_sq(&(m - &y)).sqrt() + WEISZFELD_EPS);
            numer += m * w;
            weight_sum += w;
        }
        let next = numer / weight_sum;
        let step = frob_sq(&(&next - &y)).sqrt();
        y = next;
        // step · Σw is the norm of the Weiszfeld gradient at the old iterate.
        if step <= tol / weight_sum.max(1.0) {
            break;
        }
    }
    y
}

/// Norm of `Σ (G_i − y)/‖G_i − y‖`, the first-order optimality residual of
/// a geometric median candidate `y`.
pub fn weiszfeld_residual<M: Borrow<Mat>>(inputs: &[M], y: &Mat) -> f64 {
    let mut grad = Mat::zeros(y.nrows(), y.ncols());
    for m in inputs {
        let d = m.borrow() - y;
        let norm = frob_sq(&d).sqrt();
        if norm > 0.0 {
            grad += d / norm;
        }
    }
    frob_sq(&grad).sqrt()
}

fn resilience_ratio<M: Borrow<Mat>>(
    rule: &AggregationRule,
    inputs: &[M],
    honest_idx: &[usize],
    norm: impl Fn(&Mat) -> f64,
) -> Result<f64, AggregateError> {
    if honest_idx.is_empty() {
        return Err(AggregateError::InvalidParameter("honest set is empty".into()));
    }
    let out = aggregate(rule, inputs)?;
    let honest: Vec<&Mat> = honest_idx.iter().map(|&i| inputs[i].borrow()).collect();
    let honest_mean = mean(&honest, out.shape());
    let deviation = norm(&(&out - &honest_mean));
    let mut diameter: f64 = 0.0;
    for i in 0..honest.len() {
        for j in i + 1..honest.len() {
            diameter = diameter.max(norm(&(honest[i] - honest[j])));
        }
    }
    if diameter == 0.0 {
        let scale = 1.0 + norm(&honest_mean);
        return Ok(if deviation <= 1e-12 * scale { 0.0 } else { f64::INFINITY });
    }
    Ok(deviation / diameter)
}

/// `‖F(inputs) − mean(honest)‖ / max_{i,j∈H} ‖G_i − G_j‖` in spectral
/// norm. A zero honest diameter with (numerically) zero deviation gives 0.
pub fn empirical_resilience<M: Borrow<Mat>>(
    rule: &AggregationRule,
    inputs: &[M],
    honest_idx: &[usize],
) -> Result<f64, AggregateError> {
    resilience_ratio(rule, inputs, honest_idx, spectral_norm)
}

/// Same ratio measured in Frobenius norm.
pub fn empirical_resilience_frobenius<M: Borrow<Mat>>(
    rule: &AggregationRule,
    inputs: &[M],
    honest_idx: &[usize],
) -> Result<f64, AggregateError> {
    resilience_ratio(rule, inputs, honest_idx, |m| frob_sq(m).sqrt())
}
