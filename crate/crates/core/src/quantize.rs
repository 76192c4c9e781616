//! Deterministic fixed-point quantizers for weights and activations, plus the
//! straight-through mask used only by the baseline trainer.
//!
//! `fixed_point_round` maps `z in [0,1]` onto the uniform k-bit grid
//! `{i / (2^k - 1)}` with half-away-from-zero tie breaking, which is what
//! `f32::round`/`f64::round` implement, so outputs are bit-exact across
//! platforms. Weights pass through a tanh squash normalized by the
//! tensor-wide maximum before rounding and are mapped affinely onto
//! `[-1, 1]`; activations are clipped to `[0, 1]` first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAX_BITS: u32 = 32;

/// Per-layer bitwidths. `None` marks a layer kept in high precision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    entries: Vec<Option<u32>>,
    default_bits: u32,
}

impl QuantSpec {
    /// Build from a bits list where 0 means high precision.
    pub fn from_bits(bits: &[u32], default_bits: u32) -> Result<Self> {
        validate_bits(default_bits)?;
        for (i, &k) in bits.iter().enumerate() {
            if k > MAX_BITS {
                return Err(Error::Input(format!(
                    "layer {} bitwidth {k} exceeds maximum {MAX_BITS}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            entries: bits
                .iter()
                .map(|&k| if k == 0 { None } else { Some(k) })
                .collect(),
            default_bits,
        })
    }

    /// Default spec for `layer_count` layers: every layer quantized at
    /// `default_bits` except the first and last, which stay high precision.
    pub fn default_for(layer_count: usize, default_bits: u32) -> Result<Self> {
        validate_bits(default_bits)?;
        let entries = (0..layer_count)
            .map(|i| {
                if i == 0 || i + 1 == layer_count {
                    None
                } else {
                    Some(default_bits)
                }
            })
            .collect();
        Ok(Self {
            entries,
            default_bits,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn enabled(&self, layer: usize) -> bool {
        self.entries[layer].is_some()
    }

    pub fn bits(&self, layer: usize) -> Option<u32> {
        self.entries[layer]
    }

    /// Bitwidth used for epsilon defaults: the layer's own bits if quantized,
    /// the global default otherwise.
    pub fn bits_or_default(&self, layer: usize) -> u32 {
        self.entries[layer].unwrap_or(self.default_bits)
    }

    pub fn default_bits(&self) -> u32 {
        self.default_bits
    }

    pub fn set(&mut self, layer: usize, enabled: bool, bits: u32) -> Result<()> {
        if layer >= self.entries.len() {
            return Err(Error::Input(format!(
                "unknown layer id {layer} (model has {} layers)",
                self.entries.len()
            )));
        }
        if enabled {
            validate_bits(bits)?;
            self.entries[layer] = Some(bits);
        } else {
            self.entries[layer] = None;
        }
        Ok(())
    }

    /// Bits-list view (0 = high precision), the form used by config files.
    pub fn to_bits(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.unwrap_or(0)).collect()
    }
}

fn validate_bits(k: u32) -> Result<()> {
    if !(1..=MAX_BITS).contains(&k) {
        return Err(Error::Input(format!(
            "bitwidth must lie in 1..={MAX_BITS}, got {k}"
        )));
    }
    Ok(())
}

/// Number of grid intervals for k bits: `2^k - 1`.
fn levels<R: Real>(k: u32) -> R {
    R::from_f64(((1u64 << k) - 1) as f64)
}

/// Round `z in [0, 1]` to the k-bit fixed-point grid `{i / (2^k - 1)}`.
pub fn fixed_point_round<R: Real>(z: R, k: u32) -> Result<R> {
    validate_bits(k)?;
    if z < R::zero() || z > R::one() {
        return Err(Error::Contract(format!(
            "fixed_point_round input {z} outside [0, 1]; clip before rounding"
        )));
    }
    let g = levels::<R>(k);
    Ok((z * g).round() / g)
}

/// Quantize a weight tensor onto the 2^k-level grid in `[-1, 1]` via the
/// tanh squash `2 r(1/2 + tanh(w) / (2 max|tanh(w)|)) - 1`. An all-zero
/// tensor maps to itself (the normalization would otherwise divide by zero).
pub fn quantize_weights<R: Real>(w: &Tensor<R>, k: u32) -> Result<Tensor<R>> {
    validate_bits(k)?;
    let mut max_abs = R::zero();
    for &v in w.data() {
        let a = v.tanh().abs();
        if a > max_abs {
            max_abs = a;
        }
    }
    if max_abs == R::zero() {
        return Ok(Tensor::zeros(w.shape().to_vec()));
    }
    let g = levels::<R>(k);
    let half = R::from_f64(0.5);
    let two = R::from_f64(2.0);
    Ok(w.map(|v| {
        let unit = half + v.tanh() / (two * max_abs);
        two * ((unit * g).round() / g) - R::one()
    }))
}

/// Quantize activations: clip to `[0, 1]`, then round to the k-bit grid.
pub fn quantize_activations<R: Real>(a: &Tensor<R>, k: u32) -> Result<Tensor<R>> {
    validate_bits(k)?;
    let g = levels::<R>(k);
    Ok(a.map(|v| {
        let clipped = v.max(R::zero()).min(R::one());
        (clipped * g).round() / g
    }))
}

/// Straight-through mask for the activation quantizer: gradients pass where
/// the pre-quantization input lies in `[0, 1]` and vanish outside. Used only
/// by the baseline trainer.
pub fn ste_backward<R: Real>(
    grad_out: &Tensor<R>,
    pre_quant_input: &Tensor<R>,
) -> Result<Tensor<R>> {
    grad_out.zip_map(pre_quant_input, |g, x| {
        if x >= R::zero() && x <= R::one() {
            g
        } else {
            R::zero()
        }
    })
}

/// Straight-through weight-quantizer backward for the baseline trainer:
/// the rounding stage passes gradients through, leaving the derivative of
/// the tanh squash with the normalization treated as a constant.
pub fn ste_weight_backward<R: Real>(grad_wq: &Tensor<R>, w: &Tensor<R>) -> Result<Tensor<R>> {
    let mut max_abs = R::zero();
    for &v in w.data() {
        let a = v.tanh().abs();
        if a > max_abs {
            max_abs = a;
        }
    }
    if max_abs == R::zero() {
        return Ok(Tensor::zeros(w.shape().to_vec()));
    }
    grad_wq.zip_map(w, |g, v| {
        let t = v.tanh();
        g * (R::one() - t * t) / max_abs
    })
}
