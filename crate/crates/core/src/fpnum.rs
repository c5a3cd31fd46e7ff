//! Simulated floating-point formats `fp(e, m, b)`.
//!
//! A format has a sign bit, `e` exponent bits, `m` mantissa bits and an extra
//! exponent bias `b` on top of the usual `2^(e-1) - 1`. Every exponent code
//! encodes finite values (no infinities, no NaNs) and code 0 holds zero and the
//! subnormals. Values are carried as `f64` and constrained to the representable
//! set of the format, so a format is only accepted when every one of its values
//! is exactly an `f64`.
//!
//! Rounding is round-to-nearest, ties to the neighbour with the even encoding.
//! Magnitudes above the largest representable value saturate and are reported
//! as overflows.

use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

/// Largest bitwidth [`FpFormat::enumerate_values`] will expand.
pub const MAX_ENUMERATION_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("exponent field needs at least one bit")]
    NoExponentBits,
    #[error("fp({exp_bits},{man_bits},{extra_bias}) cannot be carried exactly in f64")]
    OutOfCarrierRange {
        exp_bits: u32,
        man_bits: u32,
        extra_bias: i32,
    },
    #[error("refusing to enumerate a {bits}-bit format (limit {MAX_ENUMERATION_BITS})")]
    EnumerationRefused { bits: u32 },
    #[error("cannot round non-finite value {0}")]
    NonFinite(f64),
}

/// A floating-point format with `exp_bits` exponent bits, `man_bits` mantissa
/// bits and an additional exponent bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FpFormat {
    exp_bits: u32,
    man_bits: u32,
    extra_bias: i32,
}

/// Result of rounding a single value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    pub value: f64,
    pub overflowed: bool,
    pub underflowed_to_zero: bool,
}

/// Per-tensor counters collected while rounding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundStats {
    pub overflows: usize,
    pub underflows: usize,
    pub elements: usize,
}

impl RoundStats {
    pub fn overflow_ratio(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.overflows as f64 / self.elements as f64
        }
    }

    fn record(&mut self, outcome: &RoundOutcome) {
        self.elements += 1;
        self.overflows += usize::from(outcome.overflowed);
        self.underflows += usize::from(outcome.underflowed_to_zero);
    }
}

impl FpFormat {
    /// IEEE single precision layout, `fp(8, 23, 0)`.
    pub const FP32: FpFormat = FpFormat {
        exp_bits: 8,
        man_bits: 23,
        extra_bias: 0,
    };

    pub fn new(exp_bits: u32, man_bits: u32, extra_bias: i32) -> Result<Self, FormatError> {
        if exp_bits == 0 {
            return Err(FormatError::NoExponentBits);
        }
        let out_of_range = FormatError::OutOfCarrierRange {
            exp_bits,
            man_bits,
            extra_bias,
        };
        // 2^(e-1) must fit comfortably in i64 before we look at the range.
        if exp_bits > 12 || man_bits > 52 {
            return Err(out_of_range);
        }
        let fmt = FpFormat {
            exp_bits,
            man_bits,
            extra_bias,
        };
        let max_exp = fmt.max_exponent();
        let min_sub_exp = fmt.min_normal_exponent() - man_bits as i64;
        if max_exp > 1023 || min_sub_exp < -1074 {
            return Err(out_of_range);
        }
        Ok(fmt)
    }

    pub fn exp_bits(&self) -> u32 {
        self.exp_bits
    }

    pub fn man_bits(&self) -> u32 {
        self.man_bits
    }

    pub fn extra_bias(&self) -> i32 {
        self.extra_bias
    }

    pub fn bitwidth(&self) -> u32 {
        1 + self.exp_bits + self.man_bits
    }

    pub fn base_bias(&self) -> i64 {
        (1i64 << (self.exp_bits - 1)) - 1
    }

    /// Unbiased exponent of exponent code 1 (also the scale of the subnormals).
    fn min_normal_exponent(&self) -> i64 {
        1 - self.base_bias() - self.extra_bias as i64
    }

    /// Unbiased exponent of the all-ones exponent code.
    fn max_exponent(&self) -> i64 {
        (1i64 << self.exp_bits) - 1 - self.base_bias() - self.extra_bias as i64
    }

    pub fn max_magnitude(&self) -> f64 {
        // (2 - 2^-m) * 2^E, computed as (2^(m+1) - 1) * 2^(E - m) to stay exact.
        ((1u64 << (self.man_bits + 1)) - 1) as f64 * pow2(self.max_exponent() - self.man_bits as i64)
    }

    pub fn min_subnormal(&self) -> f64 {
        pow2(self.min_normal_exponent() - self.man_bits as i64)
    }

    pub fn min_normal(&self) -> f64 {
        pow2(self.min_normal_exponent())
    }

    /// Rounds `x` to the nearest representable value (ties to even encoding),
    /// saturating at `±max_magnitude`.
    pub fn round(&self, x: f64) -> Result<RoundOutcome, FormatError> {
        if !x.is_finite() {
            return Err(FormatError::NonFinite(x));
        }
        let magnitude = x.abs();
        let max = self.max_magnitude();
        if magnitude > max {
            return Ok(RoundOutcome {
                value: max.copysign(x),
                overflowed: true,
                underflowed_to_zero: false,
            });
        }
        if magnitude == 0.0 {
            return Ok(RoundOutcome {
                value: 0.0,
                overflowed: false,
                underflowed_to_zero: false,
            });
        }

        let min_exp = self.min_normal_exponent();
        let exp = floor_log2(magnitude).max(min_exp);
        let quantum_exp = exp - self.man_bits as i64;
        // `magnitude / quantum` is exact: a power-of-two scaling into [0, 2^(m+1)).
        let scaled = scale_by_pow2(magnitude, -quantum_exp);
        let below = libm::floor(scaled);
        let frac = scaled - below;
        let units = if frac < 0.5 {
            below
        } else if frac > 0.5 {
            below + 1.0
        } else {
            // The two neighbours have consecutive encodings; keep the even one.
            let below_code_parity = if self.man_bits == 0 {
                ((exp - min_exp) as u64 + below as u64) & 1
            } else {
                below as u64 & 1
            };
            if below_code_parity == 0 {
                below
            } else {
                below + 1.0
            }
        };
        let value = units * pow2(quantum_exp);
        Ok(RoundOutcome {
            value: if value == 0.0 { 0.0 } else { value.copysign(x) },
            overflowed: false,
            underflowed_to_zero: value == 0.0,
        })
    }

    /// Rounds in place, returning the per-tensor counters.
    pub fn round_slice(&self, xs: &mut [f64]) -> Result<RoundStats, FormatError> {
        let mut stats = RoundStats::default();
        for x in xs.iter_mut() {
            let outcome = self.round(*x)?;
            stats.record(&outcome);
            *x = outcome.value;
        }
        Ok(stats)
    }

    /// Elementwise rounding of a tensor, returning the rounded copy and the
    /// overflow count / element count pair.
    pub fn round_tensor(&self, xs: &[f64]) -> Result<(Vec<f64>, RoundStats), FormatError> {
        let mut out = xs.to_vec();
        let stats = self.round_slice(&mut out)?;
        Ok((out, stats))
    }

    pub fn is_representable(&self, x: f64) -> bool {
        matches!(self.round(x), Ok(o) if o.value == x && !o.overflowed)
    }

    /// Every representable value in ascending order, with `±0` collapsed.
    pub fn enumerate_values(&self) -> Result<Vec<f64>, FormatError> {
        let bits = self.bitwidth();
        if bits > MAX_ENUMERATION_BITS {
            return Err(FormatError::EnumerationRefused { bits });
        }
        let positive: Vec<f64> = (1..1u64 << (self.exp_bits + self.man_bits))
            .map(|code| self.decode_magnitude(code))
            .collect();
        let mut values = Vec::with_capacity(2 * positive.len() + 1);
        values.extend(positive.iter().rev().map(|v| -v));
        values.push(0.0);
        values.extend(positive);
        Ok(values)
    }

    /// Value of a sign-less encoding `exponent_code << m | mantissa`.
    pub fn decode_magnitude(&self, code: u64) -> f64 {
        let mantissa = code & ((1u64 << self.man_bits) - 1);
        let exp_code = (code >> self.man_bits) as i64;
        let scale = self.min_normal_exponent() - self.man_bits as i64;
        if exp_code == 0 {
            mantissa as f64 * pow2(scale)
        } else {
            ((1u64 << self.man_bits) + mantissa) as f64 * pow2(scale + exp_code - 1)
        }
    }
}

impl fmt::Display for FpFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fp({},{},{})", self.exp_bits, self.man_bits, self.extra_bias)
    }
}

/// Exact `2^k` for any `k` in the f64 range (subnormals included).
pub(crate) fn pow2(k: i64) -> f64 {
    if k > 1023 {
        f64::INFINITY
    } else if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else if k >= -1074 {
        f64::from_bits(1u64 << (k + 1074))
    } else {
        0.0
    }
}

/// `x * 2^k` without forming an overflowing intermediate power.
fn scale_by_pow2(x: f64, k: i64) -> f64 {
    if k > 1023 {
        x * pow2(1023) * pow2(k - 1023)
    } else {
        x * pow2(k)
    }
}

/// `floor(log2(a))` for finite `a > 0`, read off the bit pattern.
fn floor_log2(a: f64) -> i64 {
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i64;
    if biased == 0 {
        let mantissa = bits & ((1u64 << 52) - 1);
        (63 - mantissa.leading_zeros() as i64) - 1074
    } else {
        biased - 1023
    }
}
