//! Dense vectors and matrices, stable softmax, distances, RMS normalisation
//! and reduced-precision emulation.
//!
//! Vectors are plain `[f64]` slices; [`Mat64`] is a row-major dense matrix.
//! Everything here is a pure function of its inputs.

mod matrix;
mod precision;

pub use matrix::Mat64;
pub use precision::{round_slice, round_slice_strict, round_to_format, round_to_format_strict, FloatFormat};

use crate::error::{LabError, Result};

/// Stabiliser inside [`rms_norm`].
pub const RMS_EPS: f64 = 1e-6;

/// Tolerance on `sum == 1` when a slice is required to be a distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LabError::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Softmax with max-subtraction.
///
/// The output is strictly positive and sums to one up to rounding; adding a
/// constant to every entry leaves it unchanged.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(LabError::contract("softmax of an empty vector"));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(LabError::contract(format!("softmax input contains {bad}")));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, &mut out);
    Ok(out)
}

/// In-place softmax kernel used on hot paths where the input is already known
/// to be finite and non-empty.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    let inv = 1.0 / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOL || p.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(LabError::NotDistribution { sum });
    }
    Ok(())
}

/// Total variation `sum_i |p_i - q_i|` without the conventional one-half
/// factor, so the range is `[0, 2]`.
pub fn total_variation(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

pub fn l1_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

pub fn linf_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `scale * x / sqrt(mean(x^2) + RMS_EPS)`.
///
/// The zero vector maps to the zero vector. Panics on an empty input.
pub fn rms_norm(x: &[f64], scale: f64) -> Vec<f64> {
    assert!(!x.is_empty(), "rms_norm of an empty vector");
    let factor = scale * rms_inverse(x);
    x.iter().map(|v| v * factor).collect()
}

/// `1 / sqrt(mean(x^2) + RMS_EPS)`.
pub(crate) fn rms_inverse(x: &[f64]) -> f64 {
    let mean_sq = dot(x, x) / x.len() as f64;
    1.0 / (mean_sq + RMS_EPS).sqrt()
}

/// Median of a non-empty sample; the mean of the two middle values for even
/// sizes. NaNs are not expected.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
