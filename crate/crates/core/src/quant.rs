//! Per-tensor min/scale quantization and activation importance metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bitcodec::{float_to_uint_exact, uint_to_float_exact};
use crate::reduce::Reducer;
use crate::{Error, Result};

/// Storage precision of an activation. Zero means "not stored", 32 means the
/// raw float bits are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Bitwidth(u8);

impl Bitwidth {
    pub const SKIP: Bitwidth = Bitwidth(0);
    pub const B2: Bitwidth = Bitwidth(2);
    pub const B4: Bitwidth = Bitwidth(4);
    pub const B8: Bitwidth = Bitwidth(8);
    pub const FULL: Bitwidth = Bitwidth(32);

    /// The packed widths, narrowest first.
    pub const PACKED: [Bitwidth; 3] = [Bitwidth::B2, Bitwidth::B4, Bitwidth::B8];

    pub fn new(bits: u8) -> Result<Self> {
        match bits {
            0 | 2 | 4 | 8 | 32 => Ok(Bitwidth(bits)),
            _ => Err(Error::invalid(format!("unsupported bit-width {bits}"))),
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_packed(self) -> bool {
        matches!(self.0, 2 | 4 | 8)
    }

    /// Largest quantized value, `2^b - 1`.
    pub fn max_level(self) -> u32 {
        debug_assert!(self.is_packed());
        (1u32 << self.0) - 1
    }

    /// Next rung down the storage ladder: 32 → 8 → 4 → 2. `None` at 2 (the
    /// next step is eviction) and at 0.
    pub fn step_down(self) -> Option<Bitwidth> {
        match self.0 {
            32 => Some(Bitwidth::B8),
            8 => Some(Bitwidth::B4),
            4 => Some(Bitwidth::B2),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Bitwidth {
    type Error = Error;

    fn try_from(bits: u8) -> Result<Self> {
        Bitwidth::new(bits)
    }
}

impl From<Bitwidth> for u8 {
    fn from(b: Bitwidth) -> u8 {
        b.0
    }
}

impl fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Flat `f32` values with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    values: Vec<f32>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(values: Vec<f32>, shape: Vec<usize>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("shape dimensions must be positive"));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self { values, shape })
    }

    pub fn from_vec(values: Vec<f32>) -> Self {
        let shape = vec![values.len()];
        Self { values, shape }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bitwidth: Bitwidth,
    pub min: f32,
    pub scale: f32,
}

impl QuantParams {
    /// Passthrough parameters for 32-bit storage.
    pub fn full() -> Self {
        Self {
            bitwidth: Bitwidth::FULL,
            min: 0.0,
            scale: 1.0,
        }
    }
}

fn check_finite(x: &[f32]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid("empty tensor"));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite value {} at index {i}", x[i])));
    }
    Ok(())
}

fn check_packed(b: Bitwidth) -> Result<()> {
    if b.is_packed() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bit-width {b} is not quantizable")))
    }
}

/// `(b, min, (max - min) / (2^b - 1))`, with min and max taken by the
/// default reducer.
pub fn compute_qparams(x: &[f32], b: Bitwidth) -> Result<QuantParams> {
    compute_qparams_with(&Reducer::default(), x, b)
}

pub fn compute_qparams_with(reducer: &Reducer, x: &[f32], b: Bitwidth) -> Result<QuantParams> {
    check_packed(b)?;
    check_finite(x)?;
    let (min, max) = reducer.min_max(x)?;
    Ok(qparams_from_range(min, max, b))
}

/// Parameters for a known range. A constant range gives scale 0.
pub fn qparams_from_range(min: f32, max: f32, b: Bitwidth) -> QuantParams {
    let scale = if max == min {
        0.0
    } else {
        // f64 keeps (max - min) from overflowing for extreme finite inputs.
        ((max as f64 - min as f64) / b.max_level() as f64) as f32
    };
    QuantParams {
        bitwidth: b,
        min,
        scale,
    }
}

/// `round((x - min) / scale)` with ties away from zero, clamped to
/// `[0, 2^b - 1]`. All zeros when `scale == 0`.
pub fn quantize(x: &[f32], q: &QuantParams) -> Result<Vec<u32>> {
    check_packed(q.bitwidth)?;
    if q.scale == 0.0 {
        return Ok(vec![0; x.len()]);
    }
    let top = q.bitwidth.max_level() as f32;
    Ok(x
        .iter()
        .map(|&v| {
            let level = ((v - q.min) / q.scale).round().clamp(0.0, top);
            float_to_uint_exact(level)
        })
        .collect())
}

/// `Q * scale + min`.
pub fn dequantize(q_values: &[u32], q: &QuantParams) -> Result<Vec<f32>> {
    check_packed(q.bitwidth)?;
    let top = q.bitwidth.max_level();
    if let Some(i) = q_values.iter().position(|&v| v > top) {
        return Err(Error::corrupt(format!(
            "quantized value {} at index {i} exceeds {top}",
            q_values[i]
        )));
    }
    Ok(q_values
        .iter()
        .map(|&v| uint_to_float_exact(v) * q.scale + q.min)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ImportanceMetric {
    Range,
    Magnitude,
    #[default]
    QuantErrorEstimate,
}

impl FromStr for ImportanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "range" => Ok(ImportanceMetric::Range),
            "magnitude" => Ok(ImportanceMetric::Magnitude),
            "qerr" => Ok(ImportanceMetric::QuantErrorEstimate),
            _ => Err(Error::invalid(format!("unknown importance metric `{s}`"))),
        }
    }
}

/// Importance of an activation under `metric`.
///
/// * `Range`: `max - min`.
/// * `Magnitude`: L2 norm.
/// * `QuantErrorEstimate`: half the 4-bit step times `sqrt(numel)`, the
///   expected L2 quantization error at 4 bits.
pub fn importance(x: &[f32], metric: ImportanceMetric) -> Result<f64> {
    importance_with(&Reducer::default(), x, metric)
}

pub fn importance_with(reducer: &Reducer, x: &[f32], metric: ImportanceMetric) -> Result<f64> {
    check_finite(x)?;
    Ok(match metric {
        ImportanceMetric::Range => {
            let (min, max) = reducer.min_max(x)?;
            max as f64 - min as f64
        }
        ImportanceMetric::Magnitude => x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt(),
        ImportanceMetric::QuantErrorEstimate => {
            let (min, max) = reducer.min_max(x)?;
            let step = (max as f64 - min as f64) / Bitwidth::B4.max_level() as f64;
            step / 2.0 * (x.len() as f64).sqrt()
        }
    })
}

pub const DEFAULT_EMA_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub current: f64,
    pub moving_average: f64,
    pub decay: f64,
}

impl Default for ImportanceState {
    fn default() -> Self {
        Self::new(DEFAULT_EMA_DECAY)
    }
}

impl ImportanceState {
    pub fn new(decay: f64) -> Self {
        Self {
            current: 0.0,
            moving_average: 0.0,
            decay,
        }
    }

    pub fn ema_update(self, observed: f64) -> Result<Self> {
        if !(observed >= 0.0) {
            return Err(Error::invalid(format!("importance must be non-negative, got {observed}")));
        }
        Ok(Self {
            current: observed,
            moving_average: self.decay * self.moving_average + (1.0 - self.decay) * observed,
            decay: self.decay,
        })
    }
}
