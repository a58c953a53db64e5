//! Fixed-point and power-of-two projection quantizers.
//!
//! Fixed, `m` bits: levels `±α·k/n`, `n = 2^{m−1} − 1`, `k = 0..=n`.
//! PoT, `m` bits: `0` and `±α·2^e`, `e ∈ [−(2^{m−1} − 2), 0]`.
//! Rounding is half away from zero everywhere.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activation bit width shared by all three candidates.
pub const ACT_BITS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    PoT,
    Fixed,
}

/// One of the three row candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuantSpec {
    #[serde(rename = "PoT-W4A4")]
    PotW4A4,
    #[serde(rename = "Fixed-W4A4")]
    FixedW4A4,
    #[serde(rename = "Fixed-W8A4")]
    FixedW8A4,
}

impl QuantSpec {
    pub const ALL: [QuantSpec; 3] = [QuantSpec::PotW4A4, QuantSpec::FixedW4A4, QuantSpec::FixedW8A4];

    pub fn scheme(self) -> Scheme {
        match self {
            QuantSpec::PotW4A4 => Scheme::PoT,
            _ => Scheme::Fixed,
        }
    }

    pub fn weight_bits(self) -> u32 {
        match self {
            QuantSpec::FixedW8A4 => 8,
            _ => 4,
        }
    }

    pub fn act_bits(self) -> u32 {
        ACT_BITS
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantSpec::PotW4A4 => "PoT-W4A4",
            QuantSpec::FixedW4A4 => "Fixed-W4A4",
            QuantSpec::FixedW8A4 => "Fixed-W8A4",
        }
    }

    /// Builds a spec from its parts; only the three candidates exist.
    pub fn from_parts(scheme: Scheme, weight_bits: u32, act_bits: u32) -> Result<Self> {
        match (scheme, weight_bits, act_bits) {
            (Scheme::PoT, 4, ACT_BITS) => Ok(QuantSpec::PotW4A4),
            (Scheme::Fixed, 4, ACT_BITS) => Ok(QuantSpec::FixedW4A4),
            (Scheme::Fixed, 8, ACT_BITS) => Ok(QuantSpec::FixedW8A4),
            _ => Err(Error::InvalidArgument(format!(
                "no candidate {scheme:?}-W{weight_bits}A{act_bits}"
            ))),
        }
    }

    /// Projects `w` onto this spec's level set with scale `alpha`.
    pub fn quantize(self, w: f64, alpha: f64) -> f64 {
        match self.scheme() {
            Scheme::PoT => quantize_pot(w, self.weight_bits(), alpha),
            Scheme::Fixed => quantize_fixed(w, self.weight_bits(), alpha),
        }
    }

    /// Signed level index of `w`; see [`QuantizedRow`] for the encoding.
    pub fn code(self, w: f64, alpha: f64) -> i32 {
        match self.scheme() {
            Scheme::PoT => pot_code(w, self.weight_bits(), alpha),
            Scheme::Fixed => fixed_code(w, self.weight_bits(), alpha),
        }
    }

    pub fn dequantize(self, code: i32, alpha: f64) -> f64 {
        match self.scheme() {
            Scheme::PoT => pot_value(code, self.weight_bits(), alpha),
            Scheme::Fixed => fixed_value(code, fixed_max_code(self.weight_bits()), alpha),
        }
    }

    pub fn levels(self, alpha: f64) -> Vec<f64> {
        match self.scheme() {
            Scheme::PoT => pot_levels(self.weight_bits(), alpha),
            Scheme::Fixed => fixed_levels(self.weight_bits(), alpha),
        }
        .expect("candidate bit widths are valid")
    }
}

impl fmt::Display for QuantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuantSpec::ALL
            .into_iter()
            .find(|q| q.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown quantization spec `{s}`")))
    }
}

pub fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero.
    x.round()
}

fn check_fixed_bits(m: u32) -> Result<()> {
    if (2..=16).contains(&m) {
        Ok(())
    } else {
        Err(Error::InvalidBits { scheme: "Fixed", bits: m })
    }
}

fn check_pot_bits(m: u32) -> Result<()> {
    if (2..=8).contains(&m) {
        Ok(())
    } else {
        Err(Error::InvalidBits { scheme: "PoT", bits: m })
    }
}

/// Largest Fixed code, `2^{m−1} − 1`.
pub fn fixed_max_code(m: u32) -> i32 {
    (1i32 << (m - 1)) - 1
}

/// Smallest PoT exponent, `−(2^{m−1} − 2)`.
pub fn pot_min_exp(m: u32) -> i32 {
    -((1i32 << (m - 1)) - 2)
}

// Level `k` of `n` on a scale. The top level is the scale itself so that
// outputs never leave `[−scale, scale]` through rounding.
fn fixed_value(k: i32, n: i32, scale: f64) -> f64 {
    if k == n {
        scale
    } else if k == -n {
        -scale
    } else {
        scale * k as f64 / n as f64
    }
}

pub fn fixed_levels(m: u32, alpha: f64) -> Result<Vec<f64>> {
    check_fixed_bits(m)?;
    check_alpha(alpha)?;
    let n = fixed_max_code(m);
    Ok((-n..=n).map(|k| fixed_value(k, n, alpha)).collect())
}

pub fn pot_levels(m: u32, alpha: f64) -> Result<Vec<f64>> {
    check_pot_bits(m)?;
    check_alpha(alpha)?;
    let emax = 1 - pot_min_exp(m);
    Ok((-emax..=emax).map(|c| pot_value(c, m, alpha)).collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("scale must be positive, got {alpha}")))
    }
}

/// Fixed code in `[−n, n]` of `w` after clipping to `[−α, α]`.
pub fn fixed_code(w: f64, m: u32, alpha: f64) -> i32 {
    let n = fixed_max_code(m);
    let c = w.clamp(-alpha, alpha);
    round_half_away(c * n as f64 / alpha) as i32
}

pub fn quantize_fixed(w: f64, m: u32, alpha: f64) -> f64 {
    fixed_value(fixed_code(w, m, alpha), fixed_max_code(m), alpha)
}

/// PoT code: `0` for the zero level, otherwise `sign · (e − e_min + 1)`,
/// so 4-bit codes lie in `[−7, 7]`.
pub fn pot_code(w: f64, m: u32, alpha: f64) -> i32 {
    let emin = pot_min_exp(m);
    let c = w.clamp(-alpha, alpha);
    if c == 0.0 {
        return 0;
    }
    let r = (c.abs() / alpha).log2();
    if r < emin as f64 - 0.5 {
        return 0;
    }
    let e = (round_half_away(r) as i32).clamp(emin, 0);
    let mag = e - emin + 1;
    if c < 0.0 {
        -mag
    } else {
        mag
    }
}

/// Exponent of a nonzero PoT code.
pub fn pot_exponent(code: i32, m: u32) -> i32 {
    code.abs() - 1 + pot_min_exp(m)
}

fn pot_value(code: i32, m: u32, alpha: f64) -> f64 {
    if code == 0 {
        return 0.0;
    }
    let v = alpha * 2f64.powi(pot_exponent(code, m));
    if code < 0 {
        -v
    } else {
        v
    }
}

pub fn quantize_pot(w: f64, m: u32, alpha: f64) -> f64 {
    pot_value(pot_code(w, m, alpha), m, alpha)
}

/// Unsigned code in `[0, 2^bits − 1]`; values above `clip` saturate.
pub fn activation_code(x: f64, bits: u32, clip: f64) -> u32 {
    let steps = ((1u32 << bits) - 1) as f64;
    round_half_away(x.clamp(0.0, clip) * steps / clip) as u32
}

pub fn activation_value(code: u32, bits: u32, clip: f64) -> f64 {
    let steps = (1i32 << bits) - 1;
    fixed_value(code as i32, steps, clip)
}

pub fn quantize_activation_value(x: f64, bits: u32, clip: f64) -> f64 {
    activation_value(activation_code(x, bits, clip), bits, clip)
}

pub fn quantize_activation(x: &Tensor, bits: u32, clip: f64) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| quantize_activation_value(v, bits, clip))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Grid factors applied to `max|w|` by [`calibrate_alpha`]; `max|w|` itself
/// is tried first.
pub const CALIBRATION_GRID: usize = 64;

fn mse(row: &[f64], spec: QuantSpec, alpha: f64) -> f64 {
    row.iter()
        .map(|&w| {
            let d = spec.quantize(w, alpha) - w;
            d * d
        })
        .sum::<f64>()
        / row.len() as f64
}

/// Scale minimizing the row's mean squared quantization error over
/// `max|w|` and 64 evenly spaced candidates in `[0.5·max|w|, 1.5·max|w|]`.
/// An all-zero (or empty) row gets `1`.
pub fn calibrate_alpha(row: &[f64], spec: QuantSpec) -> f64 {
    let max = row.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 || !max.is_finite() {
        return 1.0;
    }
    let candidates = std::iter::once(max).chain(
        (0..CALIBRATION_GRID).map(|i| max * (0.5 + i as f64 / (CALIBRATION_GRID - 1) as f64)),
    );
    let mut best = (f64::INFINITY, max);
    for alpha in candidates {
        let e = mse(row, spec, alpha);
        if e < best.0 {
            best = (e, alpha);
        }
    }
    best.1
}

/// A quantized row: level codes plus the row's scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedRow {
    pub codes: Vec<i32>,
    pub scale: f64,
    pub spec: QuantSpec,
}

impl QuantizedRow {
    pub fn quantize(row: &[f64], spec: QuantSpec, alpha: f64) -> Self {
        Self {
            codes: row.iter().map(|&w| spec.code(w, alpha)).collect(),
            scale: alpha,
            spec,
        }
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| self.spec.dequantize(c, self.scale))
            .collect()
    }
}
