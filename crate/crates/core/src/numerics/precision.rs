//! Storage-precision emulation: round a binary64 value onto the grid of a
//! narrower IEEE-style format and carry it on as binary64.

use std::fmt;
use std::str::FromStr;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FloatFormat {
    Binary64,
    Binary32,
    BFloat16,
    Binary16,
}

impl FloatFormat {
    pub const ALL: [FloatFormat; 4] = [
        FloatFormat::Binary64,
        FloatFormat::Binary32,
        FloatFormat::BFloat16,
        FloatFormat::Binary16,
    ];

    /// Explicit (stored) mantissa bits.
    pub fn mantissa_bits(self) -> u32 {
        match self {
            FloatFormat::Binary64 => 52,
            FloatFormat::Binary32 => 23,
            FloatFormat::BFloat16 => 7,
            FloatFormat::Binary16 => 10,
        }
    }

    pub fn exponent_bits(self) -> u32 {
        match self {
            FloatFormat::Binary64 => 11,
            FloatFormat::Binary32 => 8,
            FloatFormat::BFloat16 => 8,
            FloatFormat::Binary16 => 5,
        }
    }

    /// Short tag used on the command line and in CSV output.
    pub fn tag(self) -> &'static str {
        match self {
            FloatFormat::Binary64 => "f64",
            FloatFormat::Binary32 => "f32",
            FloatFormat::BFloat16 => "bf16",
            FloatFormat::Binary16 => "f16",
        }
    }

    fn max_exponent(self) -> i32 {
        (1 << (self.exponent_bits() - 1)) - 1
    }

    fn min_exponent(self) -> i32 {
        1 - self.max_exponent()
    }

    /// Largest finite value of the format.
    pub fn max_finite(self) -> f64 {
        let m = self.mantissa_bits() as i32;
        (2.0 - pow2(-m)) * pow2(self.max_exponent())
    }

    /// Distance from 1.0 to the next representable value.
    pub fn epsilon(self) -> f64 {
        pow2(-(self.mantissa_bits() as i32))
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FloatFormat {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f64" | "binary64" | "fp64" | "double" => Ok(FloatFormat::Binary64),
            "f32" | "binary32" | "fp32" | "single" => Ok(FloatFormat::Binary32),
            "bf16" | "bfloat16" => Ok(FloatFormat::BFloat16),
            "f16" | "binary16" | "fp16" | "half" => Ok(FloatFormat::Binary16),
            other => Err(LabError::validation(format!(
                "unknown precision '{other}' (expected f64, f32, bf16 or f16)"
            ))),
        }
    }
}

/// Exact power of two for exponents inside the binary64 normal range.
fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Rounds `x` to nearest, ties to even, on the grid of `fmt`, including its
/// subnormal range. Values past the largest finite number become signed
/// infinities; NaN and infinities pass through.
pub fn round_to_format(x: f64, fmt: FloatFormat) -> f64 {
    if fmt == FloatFormat::Binary64 || x == 0.0 || !x.is_finite() {
        return x;
    }
    let mantissa = fmt.mantissa_bits() as i32;
    let biased = ((x.to_bits() >> 52) & 0x7ff) as i32;
    // binary64 subnormals sit far below every narrower format's grid.
    let exponent = if biased == 0 { -1023 } else { biased - 1023 };
    let quantum = exponent.max(fmt.min_exponent()) - mantissa;
    let rounded = (x * pow2(-quantum)).round_ties_even() * pow2(quantum);
    if rounded.abs() > fmt.max_finite() {
        f64::INFINITY.copysign(x)
    } else {
        rounded
    }
}

/// Like [`round_to_format`], but overflow is an error.
pub fn round_to_format_strict(x: f64, fmt: FloatFormat) -> Result<f64> {
    if !x.is_finite() {
        return Err(LabError::contract(format!("cannot round non-finite value {x}")));
    }
    let r = round_to_format(x, fmt);
    if r.is_infinite() {
        return Err(LabError::Overflow {
            value: x,
            format: fmt.tag(),
        });
    }
    Ok(r)
}

pub fn round_slice(values: &mut [f64], fmt: FloatFormat) {
    if fmt == FloatFormat::Binary64 {
        return;
    }
    for v in values {
        *v = round_to_format(*v, fmt);
    }
}

/// Rounds in place, reporting the index of the first overflowing entry.
pub fn round_slice_strict(values: &mut [f64], fmt: FloatFormat) -> std::result::Result<(), usize> {
    if fmt == FloatFormat::Binary64 {
        return Ok(());
    }
    for (i, v) in values.iter_mut().enumerate() {
        *v = round_to_format(*v, fmt);
        if !v.is_finite() {
            return Err(i);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent bit-level bfloat16 oracle for values in the bfloat16 normal
    /// range: truncate the binary64 significand to 7 bits with round to
    /// nearest even on the discarded 45 bits.
    fn bf16_oracle(x: f64) -> f64 {
        let bits = x.to_bits();
        let drop = 52 - 7;
        let mask = (1u64 << drop) - 1;
        let half = 1u64 << (drop - 1);
        let low = bits & mask;
        let mut kept = bits & !mask;
        let lsb = (kept >> drop) & 1;
        if low > half || (low == half && lsb == 1) {
            kept += 1u64 << drop;
        }
        f64::from_bits(kept)
    }

    #[test]
    fn format_parameters() {
        let expected = [(52, 11), (23, 8), (7, 8), (10, 5)];
        for (fmt, (m, e)) in FloatFormat::ALL.iter().zip(expected) {
            assert_eq!((fmt.mantissa_bits(), fmt.exponent_bits()), (m, e));
        }
        assert_eq!(FloatFormat::Binary16.max_finite(), 65504.0);
        assert_eq!(FloatFormat::Binary32.max_finite(), f32::MAX as f64);
        assert_eq!(FloatFormat::BFloat16.epsilon(), 2f64.powi(-7));
    }

    #[test]
    fn parse_tags() {
        assert_eq!("bf16".parse::<FloatFormat>().unwrap(), FloatFormat::BFloat16);
        assert_eq!("Binary32".parse::<FloatFormat>().unwrap(), FloatFormat::Binary32);
        assert!("f8".parse::<FloatFormat>().is_err());
        for f in FloatFormat::ALL {
            assert_eq!(f.tag().parse::<FloatFormat>().unwrap(), f);
        }
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_to_format(1.0 + 2f64.powi(-9), FloatFormat::BFloat16), 1.0);
        assert_eq!(round_to_format(0.1, FloatFormat::Binary64), 0.1);
        let expected = bf16_oracle(0.1);
        assert_eq!(expected, 0.10009765625);
        assert_eq!(round_to_format(0.1, FloatFormat::BFloat16), expected);
    }

    #[test]
    fn ties_go_to_even() {
        // Halfway between 1 and 1 + 2^-7: even mantissa is 1.0.
        assert_eq!(round_to_format(1.0 + 2f64.powi(-8), FloatFormat::BFloat16), 1.0);
        // Halfway between 1 + 2^-7 and 1 + 2^-6: even mantissa is 1 + 2^-6.
        let x = 1.0 + 3.0 * 2f64.powi(-8);
        assert_eq!(round_to_format(x, FloatFormat::BFloat16), 1.0 + 2f64.powi(-6));
    }

    #[test]
    fn overflow_and_subnormals() {
        assert_eq!(round_to_format(70000.0, FloatFormat::Binary16), f64::INFINITY);
        assert_eq!(round_to_format(-70000.0, FloatFormat::Binary16), f64::NEG_INFINITY);
        assert!(matches!(
            round_to_format_strict(1e39, FloatFormat::BFloat16),
            Err(LabError::Overflow { .. })
        ));
        assert_eq!(round_to_format_strict(65504.0, FloatFormat::Binary16).unwrap(), 65504.0);
        // Smallest binary16 subnormal is 2^-24; half of it ties to zero.
        assert_eq!(round_to_format(2f64.powi(-25), FloatFormat::Binary16), 0.0);
        assert_eq!(round_to_format(1.5 * 2f64.powi(-25), FloatFormat::Binary16), 2f64.powi(-24));
        assert_eq!(round_to_format(1e-300, FloatFormat::Binary32), 0.0);
        assert_eq!(round_to_format(f64::MIN_POSITIVE / 4.0, FloatFormat::BFloat16), 0.0);
    }

    #[test]
    fn slice_rounding_reports_overflow_index() {
        let mut v = [1.0, 2.0, 1e6, 3.0];
        assert_eq!(round_slice_strict(&mut v, FloatFormat::Binary16), Err(2));
        let mut w = [0.1, 0.2];
        round_slice(&mut w, FloatFormat::BFloat16);
        assert_eq!(w[0], 0.10009765625);
    }

    proptest! {
        #[test]
        fn binary32_matches_hardware_cast(x in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL) {
            let hw = x as f32 as f64;
            prop_assert_eq!(round_to_format(x, FloatFormat::Binary32).to_bits(), hw.to_bits());
        }

        #[test]
        fn bfloat16_matches_bit_oracle(x in -1e30f64..1e30) {
            prop_assume!(x.abs() > 1e-30);
            prop_assert_eq!(round_to_format(x, FloatFormat::BFloat16), bf16_oracle(x));
        }

        #[test]
        fn rounding_is_idempotent(x in -1e4f64..1e4, which in 0usize..4) {
            let fmt = FloatFormat::ALL[which];
            let once = round_to_format(x, fmt);
            prop_assert_eq!(round_to_format(once, fmt).to_bits(), once.to_bits());
        }

        #[test]
        fn rounding_is_monotone(a in -1e4f64..1e4, b in -1e4f64..1e4, which in 0usize..4) {
            let fmt = FloatFormat::ALL[which];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(round_to_format(lo, fmt) <= round_to_format(hi, fmt));
        }
    }
}
