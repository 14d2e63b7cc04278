//! Positional encodings behind one attention-score interface.
//!
//! Every scheme is expressed as a per-position transform of queries and keys
//! plus an additive score bias:
//!
//! * `NoPE`: identity, no bias.
//! * `Sinusoidal`: the bounded sinusoid table `s_m` is added to the query and
//!   the key.
//! * `RoPE`: coordinate pairs `(2t, 2t+1)` are rotated by `m * theta_t` with
//!   `theta_t = base^(-2t/dim)`.
//! * `ALiBi`: identity transform, bias `-slope * (i - j)`.
//!
//! Scores are scaled by `1/sqrt(dim)`. Positions are 0-indexed.

use std::fmt;
use std::str::FromStr;

use crate::error::{LabError, Result};
use crate::numerics::dot;

pub const DEFAULT_BASE_THETA: f64 = 10_000.0;
/// Single-head ALiBi slope, `2^-8`.
pub const DEFAULT_ALIBI_SLOPE: f64 = 1.0 / 256.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PeScheme {
    NoPe,
    Sinusoidal { base_theta: f64 },
    Rope { base_theta: f64 },
    Alibi { slope: f64 },
}

impl PeScheme {
    pub fn tag(&self) -> &'static str {
        match self {
            PeScheme::NoPe => "nope",
            PeScheme::Sinusoidal { .. } => "ape",
            PeScheme::Rope { .. } => "rope",
            PeScheme::Alibi { .. } => "alibi",
        }
    }

    pub fn sinusoidal() -> Self {
        PeScheme::Sinusoidal {
            base_theta: DEFAULT_BASE_THETA,
        }
    }

    pub fn rope() -> Self {
        PeScheme::Rope {
            base_theta: DEFAULT_BASE_THETA,
        }
    }

    pub fn alibi() -> Self {
        PeScheme::Alibi {
            slope: DEFAULT_ALIBI_SLOPE,
        }
    }

    /// The four schemes with default parameters.
    pub fn all_default() -> [PeScheme; 4] {
        [PeScheme::NoPe, PeScheme::sinusoidal(), PeScheme::rope(), PeScheme::alibi()]
    }

    /// Parses a tag, taking `theta` / `slope` overrides where they apply.
    pub fn from_tag(tag: &str, theta: Option<f64>, slope: Option<f64>) -> Result<Self> {
        let scheme = match tag.to_ascii_lowercase().as_str() {
            "nope" | "none" => PeScheme::NoPe,
            "ape" | "sinusoidal" | "sin" => PeScheme::Sinusoidal {
                base_theta: theta.unwrap_or(DEFAULT_BASE_THETA),
            },
            "rope" => PeScheme::Rope {
                base_theta: theta.unwrap_or(DEFAULT_BASE_THETA),
            },
            "alibi" => PeScheme::Alibi {
                slope: slope.unwrap_or(DEFAULT_ALIBI_SLOPE),
            },
            other => {
                return Err(LabError::validation(format!(
                    "unknown positional encoding '{other}' (expected nope, ape, rope or alibi)"
                )))
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PeScheme::Sinusoidal { base_theta } | PeScheme::Rope { base_theta } if !(base_theta > 1.0) => Err(
                LabError::validation(format!("base theta must exceed 1, got {base_theta}")),
            ),
            PeScheme::Alibi { slope } if !(slope > 0.0 && slope.is_finite()) => Err(LabError::validation(format!(
                "ALiBi slope must be positive, got {slope}"
            ))),
            _ => Ok(()),
        }
    }

    /// Relative schemes give scores that depend on positions only through
    /// `i - j`.
    pub fn is_relative(&self) -> bool {
        matches!(self, PeScheme::NoPe | PeScheme::Rope { .. } | PeScheme::Alibi { .. })
    }
}

impl fmt::Display for PeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PeScheme {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        PeScheme::from_tag(s, None, None)
    }
}

/// A scheme bound to a head dimension, with its frequency table.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    scheme: PeScheme,
    dim: usize,
    /// `theta_t` for `t = 0..dim/2`; empty for schemes without frequencies.
    freqs: Vec<f64>,
}

impl PositionalEncoding {
    pub fn new(scheme: PeScheme, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(LabError::validation(format!(
                "positional encoding dimension must be positive and even, got {dim}"
            )));
        }
        scheme.validate()?;
        let freqs = match scheme {
            PeScheme::Sinusoidal { base_theta } | PeScheme::Rope { base_theta } => (0..dim / 2)
                .map(|t| base_theta.powf(-2.0 * t as f64 / dim as f64))
                .collect(),
            _ => Vec::new(),
        };
        Ok(PositionalEncoding { scheme, dim, freqs })
    }

    pub fn scheme(&self) -> PeScheme {
        self.scheme
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sinusoid row `s_m`: `sin(m theta_t)` at `2t`, `cos(m theta_t)` at `2t+1`.
    /// Uses the default base when the scheme has no frequencies of its own.
    pub fn sinusoid(&self, pos: usize) -> Vec<f64> {
        if self.freqs.is_empty() {
            sinusoid_row(self.dim, DEFAULT_BASE_THETA, pos)
        } else {
            let mut out = vec![0.0; self.dim];
            fill_sinusoid(&self.freqs, pos, &mut out);
            out
        }
    }

    fn rotate(&self, x: &[f64], pos: usize, out: &mut [f64]) {
        for (t, f) in self.freqs.iter().enumerate() {
            let (s, c) = (pos as f64 * f).sin_cos();
            let (a, b) = (x[2 * t], x[2 * t + 1]);
            out[2 * t] = a * c - b * s;
            out[2 * t + 1] = a * s + b * c;
        }
    }

    /// Position-dependent transform of a query or key vector.
    pub fn encode_into(&self, x: &[f64], pos: usize, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        match self.scheme {
            PeScheme::NoPe | PeScheme::Alibi { .. } => out.copy_from_slice(x),
            PeScheme::Sinusoidal { .. } => {
                for (t, f) in self.freqs.iter().enumerate() {
                    let (s, c) = (pos as f64 * f).sin_cos();
                    out[2 * t] = x[2 * t] + s;
                    out[2 * t + 1] = x[2 * t + 1] + c;
                }
            }
            PeScheme::Rope { .. } => self.rotate(x, pos, out),
        }
    }

    pub fn encode(&self, x: &[f64], pos: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.encode_into(x, pos, &mut out);
        out
    }

    /// Derivative of [`Self::encode_into`] applied to a tangent vector. The
    /// transforms are affine, so this is the linear part.
    pub fn encode_tangent_into(&self, dx: &[f64], pos: usize, out: &mut [f64]) {
        match self.scheme {
            PeScheme::Rope { .. } => self.rotate(dx, pos, out),
            _ => out.copy_from_slice(dx),
        }
    }

    /// Additive score bias for query position `i` and key position `j`.
    pub fn bias(&self, i: usize, j: usize) -> f64 {
        match self.scheme {
            PeScheme::Alibi { slope } => -slope * (i as f64 - j as f64),
            _ => 0.0,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }

    /// Causal attention score between a query at `i` and a key at `j <= i`.
    pub fn score(&self, q: &[f64], k: &[f64], i: usize, j: usize) -> Result<f64> {
        if j > i {
            return Err(LabError::Causal { query: i, key: j });
        }
        self.score_unmasked(q, k, i, j)
    }

    /// Score without the causal check, for bidirectional attention.
    pub fn score_unmasked(&self, q: &[f64], k: &[f64], i: usize, j: usize) -> Result<f64> {
        for v in [q, k] {
            if v.len() != self.dim {
                return Err(LabError::LengthMismatch {
                    expected: self.dim,
                    actual: v.len(),
                });
            }
        }
        let qe = self.encode(q, i);
        let ke = self.encode(k, j);
        Ok(dot(&qe, &ke) * self.scale() + self.bias(i, j))
    }

    /// `|score(q, k, i, i - delta) - score_NoPE(q, k)|` for
    /// `delta = 0..=max_dist`, with the query placed at `i = max_dist`.
    pub fn decay_profile(&self, q: &[f64], k: &[f64], max_dist: usize) -> Result<Vec<f64>> {
        if max_dist == 0 {
            return Err(LabError::contract("decay profile needs max_dist >= 1"));
        }
        let plain = PositionalEncoding::new(PeScheme::NoPe, self.dim)?.score(q, k, 0, 0)?;
        let i = max_dist;
        (0..=max_dist)
            .map(|delta| Ok((self.score(q, k, i, i - delta)? - plain).abs()))
            .collect()
    }

    /// Mean of [`Self::decay_profile`] over `(q, k)` sample pairs.
    pub fn mean_decay_profile(&self, pairs: &[(Vec<f64>, Vec<f64>)], max_dist: usize) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(LabError::contract("decay profile needs at least one sample"));
        }
        let mut acc = vec![0.0; max_dist + 1];
        for (q, k) in pairs {
            for (a, v) in acc.iter_mut().zip(self.decay_profile(q, k, max_dist)?) {
                *a += v;
            }
        }
        let m = pairs.len() as f64;
        Ok(acc.into_iter().map(|v| v / m).collect())
    }
}

fn fill_sinusoid(freqs: &[f64], pos: usize, out: &mut [f64]) {
    for (t, f) in freqs.iter().enumerate() {
        let (s, c) = (pos as f64 * f).sin_cos();
        out[2 * t] = s;
        out[2 * t + 1] = c;
    }
}

/// Sinusoid table row for position `pos`, width `dim`, base `base_theta`.
pub fn sinusoid_row(dim: usize, base_theta: f64, pos: usize) -> Vec<f64> {
    let freqs: Vec<f64> = (0..dim / 2).map(|t| base_theta.powf(-2.0 * t as f64 / dim as f64)).collect();
    let mut out = vec![0.0; dim];
    fill_sinusoid(&freqs, pos, &mut out);
    out
}

/// Whether a measured profile decays: the mean over its last quarter is
/// below `ratio` times the mean over its first quarter (excluding `delta =
/// 0`).
pub fn profile_decays(profile: &[f64], ratio: f64) -> bool {
    if profile.len() < 5 {
        return false;
    }
    let body = &profile[1..];
    let quarter = (body.len() / 4).max(1);
    let head: f64 = body[..quarter].iter().sum::<f64>() / quarter as f64;
    let tail: f64 = body[body.len() - quarter..].iter().sum::<f64>() / quarter as f64;
    tail < ratio * head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_norm;
    use crate::rng::{stream, LabRng};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sample(dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut r = LabRng::new(seed, stream::DATA);
        (r.gaussian_vec(dim, 1.0), r.gaussian_vec(dim, 1.0))
    }

    #[test]
    fn rope_equal_positions_cancel() {
        let pe = PositionalEncoding::new(PeScheme::rope(), 16).unwrap();
        let (q, k) = sample(16, 1);
        let plain = dot(&q, &k) / 4.0;
        for i in [0, 3, 1000] {
            assert_abs_diff_eq!(pe.score(&q, &k, i, i).unwrap(), plain, epsilon = 1e-12);
        }
    }

    #[test]
    fn alibi_definition() {
        let pe = PositionalEncoding::new(PeScheme::Alibi { slope: 0.5 }, 4).unwrap();
        let q = [1.0, 0.0, 0.0, 0.0];
        let k = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(pe.score(&q, &k, 5, 2).unwrap(), -1.5);
    }

    #[test]
    fn causal_violation_rejected() {
        let pe = PositionalEncoding::new(PeScheme::NoPe, 4).unwrap();
        assert!(matches!(
            pe.score(&[0.0; 4], &[0.0; 4], 1, 2),
            Err(LabError::Causal { query: 1, key: 2 })
        ));
        assert!(pe.score_unmasked(&[0.0; 4], &[0.0; 4], 1, 2).is_ok());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(PositionalEncoding::new(PeScheme::NoPe, 3).is_err());
        assert!(PositionalEncoding::new(PeScheme::Alibi { slope: 0.0 }, 4).is_err());
        assert!(PositionalEncoding::new(PeScheme::Rope { base_theta: 1.0 }, 4).is_err());
        assert!(PeScheme::from_tag("xpos", None, None).is_err());
        assert_eq!(
            PeScheme::from_tag("rope", Some(500.0), None).unwrap(),
            PeScheme::Rope { base_theta: 500.0 }
        );
    }

    #[test]
    fn sinusoid_table_bounded() {
        let pe = PositionalEncoding::new(PeScheme::sinusoidal(), 64).unwrap();
        let mut pos = 0usize;
        while pos <= 1_000_000 {
            assert!(pe.sinusoid(pos).iter().all(|v| (-1.0..=1.0).contains(v)));
            pos = pos * 3 + 1;
        }
        assert!(pe.sinusoid(1_000_000).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn decay_profile_nope_and_alibi() {
        let (q, k) = sample(8, 2);
        let nope = PositionalEncoding::new(PeScheme::NoPe, 8).unwrap();
        assert!(nope.decay_profile(&q, &k, 10).unwrap().iter().all(|v| *v == 0.0));

        let alibi = PositionalEncoding::new(PeScheme::Alibi { slope: 0.25 }, 8).unwrap();
        for (delta, v) in alibi.decay_profile(&q, &k, 10).unwrap().into_iter().enumerate() {
            assert_abs_diff_eq!(v, 0.25 * delta as f64, epsilon = 1e-12);
        }
        assert!(nope.decay_profile(&q, &k, 0).is_err());
    }

    #[test]
    fn rope_mean_profile_is_measurable() {
        let pe = PositionalEncoding::new(PeScheme::rope(), 64).unwrap();
        let pairs: Vec<_> = (0..1000).map(|s| sample(64, s)).collect();
        let profile = pe.mean_decay_profile(&pairs, 64).unwrap();
        assert_eq!(profile.len(), 65);
        assert_eq!(profile[0], profile[0].abs());
        assert!(profile.iter().all(|v| v.is_finite()));
        assert!(profile[0] < 1e-12);
    }

    #[test]
    fn profile_decay_predicate() {
        let decaying: Vec<f64> = (0..40).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let growing: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert!(profile_decays(&decaying, 0.5));
        assert!(!profile_decays(&growing, 0.5));
    }

    #[test]
    fn rope_rotation_orthogonal_at_far_positions() {
        let pe = PositionalEncoding::new(PeScheme::rope(), 32).unwrap();
        let (q, _) = sample(32, 9);
        let n = l2_norm(&q);
        for m in [0usize, 1, 17, 4096, 65_537, 100_000] {
            assert_abs_diff_eq!(l2_norm(&pe.encode(&q, m)), n, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rope_preserves_norm(seed in 0u64..1000, m in 0usize..100_000) {
            let pe = PositionalEncoding::new(PeScheme::rope(), 16).unwrap();
            let (q, _) = sample(16, seed);
            prop_assert!((l2_norm(&pe.encode(&q, m)) - l2_norm(&q)).abs() <= 1e-12);
        }

        #[test]
        fn relative_schemes_shift_invariant(seed in 0u64..1000, i in 0usize..200, back in 0usize..200, t in 0usize..5000) {
            let j = i.saturating_sub(back);
            let (q, k) = sample(16, seed);
            for scheme in [PeScheme::rope(), PeScheme::alibi(), PeScheme::NoPe] {
                let pe = PositionalEncoding::new(scheme, 16).unwrap();
                let a = pe.score(&q, &k, i, j).unwrap();
                let b = pe.score(&q, &k, i + t, j + t).unwrap();
                prop_assert!((a - b).abs() <= 1e-10, "{scheme}: {a} vs {b}");
            }
        }
    }
}
