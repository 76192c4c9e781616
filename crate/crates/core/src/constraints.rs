//! Proximity constraints between the full-precision model and its shadow:
//! per-layer mean-squared distances, the cross-entropy output distance,
//! epsilon defaults, and slack bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::QuantSpec;
use crate::tensor::{Real, Tensor};

/// Normalization of the layerwise squared distance. `PerElement` divides by
/// batch times layer width so one epsilon can serve layers of different
/// sizes; `PerSampleL2` keeps the raw squared norm averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MseNorm {
    #[default]
    PerElement,
    PerSampleL2,
}

pub const LOG_FLOOR: f64 = 1e-12;

/// Bounds and distance options for one training run: one layerwise
/// constraint per interior layer (when enabled) plus the output constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    /// `(layer id, epsilon)` for each constrained interior layer, ascending.
    pub layer_eps: Vec<(usize, f64)>,
    pub eps_out: f64,
    pub mse_norm: MseNorm,
    pub log_floor: f64,
}

impl ConstraintSet {
    /// Default bounds: epsilon of each interior layer (and the output) is
    /// `1/(2^k - 1)` at that layer's bitwidth, falling back to the global
    /// default bitwidth for high-precision layers. Whether the layerwise
    /// constraints actually carry multipliers is the trainer's choice; the
    /// bounds are always available for slack reporting.
    pub fn from_quant_spec(quant: &QuantSpec) -> Result<Self> {
        let mut layer_eps = Vec::new();
        for layer in 0..quant.len().saturating_sub(1) {
            layer_eps.push((layer, default_epsilon(quant.bits_or_default(layer))?));
        }
        Ok(Self {
            layer_eps,
            eps_out: default_epsilon(quant.default_bits())?,
            mse_norm: MseNorm::default(),
            log_floor: LOG_FLOOR,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for &(layer, eps) in &self.layer_eps {
            if eps < 0.0 {
                return Err(Error::Input(format!(
                    "epsilon for layer {} must be nonnegative, got {eps}",
                    layer + 1
                )));
            }
        }
        if self.eps_out < 0.0 {
            return Err(Error::Input(format!(
                "output epsilon must be nonnegative, got {}",
                self.eps_out
            )));
        }
        Ok(())
    }

    pub fn set_all_layer_eps(&mut self, eps: f64) {
        for entry in &mut self.layer_eps {
            entry.1 = eps;
        }
    }
}

/// `1 / (2^k - 1)`: the smallest positive value representable on the k-bit
/// grid, the natural scale for activation proximity.
pub fn default_epsilon(k: u32) -> Result<f64> {
    if !(1..=crate::quantize::MAX_BITS).contains(&k) {
        return Err(Error::Input(format!(
            "bitwidth must lie in 1..={}, got {k}",
            crate::quantize::MAX_BITS
        )));
    }
    Ok(1.0 / (((1u64 << k) - 1) as f64))
}

/// Mean squared distance between a hybrid layer output and its quantized
/// counterpart. Gradients belong to the hybrid argument only; see
/// [`layer_distance_grad`].
pub fn layer_distance<R: Real>(
    z_hybrid: &Tensor<R>,
    z_quant: &Tensor<R>,
    norm: MseNorm,
) -> Result<f64> {
    if z_hybrid.shape() != z_quant.shape() {
        return Err(Error::Dimension(format!(
            "layer distance on mismatched shapes {:?} vs {:?}",
            z_hybrid.shape(),
            z_quant.shape()
        )));
    }
    let mut sq = 0.0f64;
    for (&a, &b) in z_hybrid.data().iter().zip(z_quant.data()) {
        let d = a.to_f64_v() - b.to_f64_v();
        sq += d * d;
    }
    let batch = z_hybrid.rows() as f64;
    Ok(match norm {
        MseNorm::PerElement => sq / z_hybrid.numel() as f64,
        MseNorm::PerSampleL2 => sq / batch,
    })
}

/// Gradient of [`layer_distance`] with respect to the hybrid argument.
pub fn layer_distance_grad<R: Real>(
    z_hybrid: &Tensor<R>,
    z_quant: &Tensor<R>,
    norm: MseNorm,
) -> Result<Tensor<R>> {
    let scale = match norm {
        MseNorm::PerElement => 2.0 / z_hybrid.numel() as f64,
        MseNorm::PerSampleL2 => 2.0 / z_hybrid.rows() as f64,
    };
    let s = R::from_f64(scale);
    z_hybrid.zip_map(z_quant, |a, b| s * (a - b))
}

fn check_simplex_rows<R: Real>(p: &Tensor<R>, what: &str) -> Result<()> {
    for i in 0..p.rows() {
        let sum: f64 = p.row(i).iter().map(|v| v.to_f64_v()).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!(
                "{what} row {i} sums to {sum}, not a probability row"
            )));
        }
    }
    Ok(())
}

/// Batch-mean cross-entropy distance `-sum_i p_full,i log(max(p_quant,i, floor))`
/// between output distributions. Both inputs must be probability rows.
pub fn output_distance<R: Real>(
    p_full: &Tensor<R>,
    p_quant: &Tensor<R>,
    log_floor: f64,
) -> Result<f64> {
    if p_full.shape() != p_quant.shape() {
        return Err(Error::Dimension(format!(
            "output distance on mismatched shapes {:?} vs {:?}",
            p_full.shape(),
            p_quant.shape()
        )));
    }
    check_simplex_rows(p_full, "p_full")?;
    check_simplex_rows(p_quant, "p_quant")?;
    let mut total = 0.0f64;
    for (&p, &q) in p_full.data().iter().zip(p_quant.data()) {
        total -= p.to_f64_v() * q.to_f64_v().max(log_floor).ln();
    }
    Ok(total / p_full.rows() as f64)
}

/// Gradient of [`output_distance`] with respect to the *logits* behind
/// `p_full` (the quantized side is a constant). With `c_i = log(max(q_i,
/// floor))`, the softmax Jacobian gives `d/dlogit_j = p_j (sum_i p_i c_i -
/// c_j) / B`.
pub fn output_distance_grad_logits<R: Real>(
    p_full: &Tensor<R>,
    p_quant: &Tensor<R>,
    log_floor: f64,
) -> Result<Tensor<R>> {
    let (b, k) = (p_full.rows(), p_full.row_width());
    let mut grad = Tensor::zeros(vec![b, k]);
    let batch = R::from_f64(b as f64);
    for i in 0..b {
        let prow = p_full.row(i);
        let qrow = p_quant.row(i);
        let mut dot = R::zero();
        for j in 0..k {
            dot += prow[j] * R::from_f64(qrow[j].to_f64_v().max(log_floor).ln());
        }
        for j in 0..k {
            let c = R::from_f64(qrow[j].to_f64_v().max(log_floor).ln());
            grad.data_mut()[i * k + j] = prow[j] * (dot - c) / batch;
        }
    }
    Ok(grad)
}

/// Running sums for dataset-mean distances over an evaluation pass.
#[derive(Debug, Clone, Default)]
pub struct DistanceAccumulator {
    /// `(layer id, weighted distance sum)` aligned with the constraint set.
    layer_sums: Vec<(usize, f64)>,
    output_sum: f64,
    samples: usize,
}

impl DistanceAccumulator {
    pub fn new(layer_ids: &[usize]) -> Self {
        Self {
            layer_sums: layer_ids.iter().map(|&l| (l, 0.0)).collect(),
            output_sum: 0.0,
            samples: 0,
        }
    }

    /// Add one batch's mean distances, weighted by its size.
    pub fn add_batch(&mut self, layer_distances: &[(usize, f64)], output: f64, batch_size: usize) {
        let w = batch_size as f64;
        for (slot, &(layer, d)) in self.layer_sums.iter_mut().zip(layer_distances) {
            debug_assert_eq!(slot.0, layer);
            slot.1 += d * w;
        }
        self.output_sum += output * w;
        self.samples += batch_size;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn mean_layer_distances(&self) -> Vec<(usize, f64)> {
        let n = self.samples as f64;
        self.layer_sums.iter().map(|&(l, s)| (l, s / n)).collect()
    }

    pub fn mean_output_distance(&self) -> f64 {
        self.output_sum / self.samples as f64
    }
}

/// Distances, bounds and slacks from one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SlackReport {
    /// `(layer id, mean distance, epsilon, slack)` per constrained layer.
    pub layers: Vec<LayerSlack>,
    pub output_distance: f64,
    pub eps_out: f64,
    pub output_slack: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSlack {
    pub layer: usize,
    pub distance: f64,
    pub eps: f64,
    pub slack: f64,
}

/// Slack = dataset-mean distance minus epsilon, signed and unclipped.
pub fn compute_slacks(acc: &DistanceAccumulator, set: &ConstraintSet) -> Result<SlackReport> {
    if acc.samples() == 0 {
        return Err(Error::Input("slack evaluation saw zero samples".into()));
    }
    let means = acc.mean_layer_distances();
    if means.len() != set.layer_eps.len() {
        return Err(Error::Input(format!(
            "{} accumulated layers but {} constraints",
            means.len(),
            set.layer_eps.len()
        )));
    }
    let layers = means
        .iter()
        .zip(&set.layer_eps)
        .map(|(&(layer, distance), &(cl, eps))| {
            debug_assert_eq!(layer, cl);
            LayerSlack {
                layer,
                distance,
                eps,
                slack: distance - eps,
            }
        })
        .collect();
    let output_distance = acc.mean_output_distance();
    Ok(SlackReport {
        layers,
        output_distance,
        eps_out: set.eps_out,
        output_slack: output_distance - set.eps_out,
        samples: acc.samples(),
    })
}
