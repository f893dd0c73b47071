//! Float/fixed-point conversion for switch-side integer aggregation.
//!
//! A static global scale `2^frac_bits` is used. Inputs are clamped to
//! `±2^(31-f)/N` so that the sum of `N` converted vectors stays inside the
//! 32-bit accumulator of the switch.

use thiserror::Error;

pub const DEFAULT_FRAC_BITS: u32 = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("frac_bits must be in 1..=28, got {0}")]
    FracBits(u32),
    #[error("num_workers must be >= 1")]
    NoWorkers,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    frac_bits: u32,
    num_workers: u32,
}

impl QuantConfig {
    pub fn new(frac_bits: u32, num_workers: u32) -> Result<Self, QuantError> {
        if !(1..=28).contains(&frac_bits) {
            return Err(QuantError::FracBits(frac_bits));
        }
        if num_workers == 0 {
            return Err(QuantError::NoWorkers);
        }
        Ok(QuantConfig { frac_bits, num_workers })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn num_workers(&self) -> u32 {
        self.num_workers
    }

    /// `2^f`
    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }

    /// `2^(31-f) / N`
    pub fn clamp_bound(&self) -> f64 {
        (1u64 << (31 - self.frac_bits)) as f64 / self.num_workers as f64
    }

    /// Exact real value of one fixed-point integer.
    pub fn dequantize_exact(&self, v: i64) -> f64 {
        v as f64 / self.scale()
    }
}

/// Converts to fixed point with round-to-nearest-even; returns the number of
/// clamped elements alongside.
pub fn to_fixed(values: &[f32], cfg: &QuantConfig) -> (Vec<i32>, usize) {
    let mut out = Vec::with_capacity(values.len());
    let clamped = to_fixed_into(values, cfg, &mut out);
    (out, clamped)
}

pub fn to_fixed_into(values: &[f32], cfg: &QuantConfig, out: &mut Vec<i32>) -> usize {
    let bound = cfg.clamp_bound();
    let scale = cfg.scale();
    let mut clamped = 0;
    for &v in values {
        // f64 holds every f32 exactly, and scaling by a power of two is exact.
        let mut x = v as f64;
        if x.is_nan() {
            x = 0.0;
            clamped += 1;
        } else if x > bound {
            x = bound;
            clamped += 1;
        } else if x < -bound {
            x = -bound;
            clamped += 1;
        }
        // `as` saturates; only N = 1 at the positive bound reaches 2^31.
        out.push((x * scale).round_ties_even() as i32);
    }
    clamped
}

pub fn from_fixed(values: &[i32], cfg: &QuantConfig) -> Vec<f32> {
    let mut out = Vec::with_capacity(values.len());
    from_fixed_into(values, cfg, &mut out);
    out
}

pub fn from_fixed_into(values: &[i32], cfg: &QuantConfig, out: &mut Vec<f32>) {
    let scale = cfg.scale();
    out.extend(values.iter().map(|&v| (v as f64 / scale) as f32));
}

/// Elementwise wrapping sum, the integer arithmetic the switch performs.
pub fn sum_fixed<'a>(vectors: impl IntoIterator<Item = &'a [i32]>, len: usize) -> Vec<i32> {
    let mut acc = vec![0i32; len];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a = a.wrapping_add(*x);
        }
    }
    acc
}
