//! Paired full-precision and quantized forward machinery.
//!
//! A model is an ordered list of blocks; each block is one function of the
//! composed predictor (linear op, optional batch norm, activation). Every
//! forward computes three chains:
//!
//! * the full-precision chain `z_l`,
//! * the quantized chain `z^q_l`, rebuilt from `q_w(theta)` on every call and
//!   running on its own batch-norm statistics,
//! * hybrid evaluations `f_l(z^q_{l-1})` — the full-precision block applied
//!   to the quantized chain's previous activation.
//!
//! Gradients flow only through the full chain and the hybrids; the quantized
//! chain is treated as a constant of the parameters (detached-shadow
//! contract), so no straight-through estimation is ever involved here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gradcheck::ParamAccess;
use crate::layers::{
    activation_backward, activation_forward, ActCache, Activation, BatchNorm, BatchNormCache,
    Conv2d, ConvCache, Dense, DenseCache, Mode, Param, Precision,
};
use crate::loss::softmax;
use crate::quantize::{quantize_activations, quantize_weights, ste_backward, QuantSpec};
use crate::tensor::{argmax, Real, Tensor};

// ---------------------------------------------------------------------------
// Model description
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    Dense {
        out: usize,
    },
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub act: Activation,
    pub norm: bool,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dims: Vec<usize>,
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
}

impl ModelSpec {
    /// A bias-free dense stack builder used widely in tests: hidden layers
    /// activate with clip-to-`[0,1]`, the head emits raw logits.
    pub fn dense_stack(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut blocks: Vec<BlockSpec> = hidden
            .iter()
            .map(|&h| BlockSpec {
                kind: BlockKind::Dense { out: h },
                act: Activation::Clip,
                norm: false,
                bias: true,
            })
            .collect();
        blocks.push(BlockSpec {
            kind: BlockKind::Dense { out: classes },
            act: Activation::None,
            norm: false,
            bias: true,
        });
        Self {
            input_dims: vec![input],
            classes,
            blocks,
        }
    }
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum BlockOp<R: Real> {
    Dense(Dense<R>),
    Conv(Conv2d<R>),
}

impl<R: Real> BlockOp<R> {
    fn weight(&self) -> &Param<R> {
        match self {
            BlockOp::Dense(d) => &d.weight,
            BlockOp::Conv(c) => &c.weight,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<R: Real> {
    pub op: BlockOp<R>,
    pub norm: Option<BatchNorm<R>>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
enum OpCache<R: Real> {
    Dense(DenseCache<R>),
    Conv(ConvCache<R>),
}

/// Everything a block backward needs from its forward.
#[derive(Debug, Clone)]
pub struct BlockCache<R: Real> {
    input_shape: Vec<usize>,
    op: OpCache<R>,
    bn: Option<BatchNormCache<R>>,
    act: ActCache<R>,
    /// Quantized weights actually applied (quantized path only).
    applied_weight: Option<Tensor<R>>,
    /// Activation output before `q_a` (quantized path only).
    pre_qa: Option<Tensor<R>>,
}

/// Which of the three chains a block forward serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Full,
    Quant,
    Hybrid,
}

impl<R: Real> Block<R> {
    fn forward_path(
        &mut self,
        input: &Tensor<R>,
        path: PathKind,
        mode: Mode,
        update_stats: bool,
        bits: Option<u32>,
        is_last: bool,
    ) -> Result<(Tensor<R>, BlockCache<R>)> {
        let applied_weight = if path == PathKind::Quant {
            match bits {
                Some(k) => Some(quantize_weights(&self.op.weight().value, k)?),
                None => None,
            }
        } else {
            None
        };
        let (pre_norm, op_cache) = match &self.op {
            BlockOp::Dense(d) => {
                let (out, cache) = d.forward_with(input, applied_weight.as_ref())?;
                (out, OpCache::Dense(cache))
            }
            BlockOp::Conv(c) => {
                let (out, cache) = c.forward_with(input, applied_weight.as_ref())?;
                (out, OpCache::Conv(cache))
            }
        };
        let (pre_act, bn_cache) = match &mut self.norm {
            Some(bn) => {
                // a layer's precision level decides its statistics: the
                // quantized chain and the hybrid read quantized-path state
                // only where the layer actually runs quantized
                let precision = match path {
                    PathKind::Full => Precision::Full,
                    _ if bits.is_some() => Precision::Quant,
                    _ => Precision::Full,
                };
                let (out, cache) = bn.forward(&pre_norm, mode, precision, update_stats)?;
                (out, Some(cache))
            }
            None => (pre_norm, None),
        };
        let (activated, act_cache) = activation_forward(self.act, &pre_act);
        let (out, pre_qa) = if path == PathKind::Quant && !is_last {
            match bits {
                Some(k) => (quantize_activations(&activated, k)?, Some(activated)),
                None => (activated, None),
            }
        } else {
            (activated, None)
        };
        Ok((
            out,
            BlockCache {
                input_shape: input.shape().to_vec(),
                op: op_cache,
                bn: bn_cache,
                act: act_cache,
                applied_weight,
                pre_qa,
            },
        ))
    }

    /// Backward for the full and hybrid chains (plain weights).
    fn backward_plain(&mut self, grad: &Tensor<R>, cache: &BlockCache<R>) -> Result<Tensor<R>> {
        let g = activation_backward(grad, &cache.act)?;
        let g = match (&mut self.norm, &cache.bn) {
            (Some(bn), Some(bc)) => bn.backward(&g, bc)?,
            _ => g,
        };
        let grad_in = match (&mut self.op, &cache.op) {
            (BlockOp::Dense(d), OpCache::Dense(dc)) => d.backward(&g, dc)?,
            (BlockOp::Conv(c), OpCache::Conv(cc)) => c.backward(&g, cc)?,
            _ => unreachable!("cache kind matches op kind"),
        };
        grad_in.reshape(cache.input_shape.clone())
    }

    /// Backward through the quantized chain with straight-through masks;
    /// only the baseline trainer uses this.
    fn backward_ste(&mut self, grad: &Tensor<R>, cache: &BlockCache<R>) -> Result<Tensor<R>> {
        let g = match &cache.pre_qa {
            Some(pre) => ste_backward(grad, pre)?,
            None => grad.clone(),
        };
        let g = activation_backward(&g, &cache.act)?;
        let g = match (&mut self.norm, &cache.bn) {
            (Some(bn), Some(bc)) => bn.backward(&g, bc)?,
            _ => g,
        };
        let grad_in = match (&mut self.op, &cache.op) {
            (BlockOp::Dense(d), OpCache::Dense(dc)) => match &cache.applied_weight {
                Some(w) => d.backward_ste(&g, dc, w)?,
                None => d.backward(&g, dc)?,
            },
            (BlockOp::Conv(c), OpCache::Conv(cc)) => match &cache.applied_weight {
                Some(w) => c.backward_ste(&g, cc, w)?,
                None => c.backward(&g, cc)?,
            },
            _ => unreachable!("cache kind matches op kind"),
        };
        grad_in.reshape(cache.input_shape.clone())
    }

    fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        let mut out = Vec::new();
        match &mut self.op {
            BlockOp::Dense(d) => {
                out.push(&mut d.weight);
                if let Some(b) = &mut d.bias {
                    out.push(b);
                }
            }
            BlockOp::Conv(c) => {
                out.push(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    out.push(b);
                }
            }
        }
        if let Some(bn) = &mut self.norm {
            out.push(&mut bn.scale);
            out.push(&mut bn.shift);
        }
        out
    }

    fn params(&self) -> Vec<&Param<R>> {
        let mut out = Vec::new();
        match &self.op {
            BlockOp::Dense(d) => {
                out.push(&d.weight);
                if let Some(b) = &d.bias {
                    out.push(b);
                }
            }
            BlockOp::Conv(c) => {
                out.push(&c.weight);
                if let Some(b) = &c.bias {
                    out.push(b);
                }
            }
        }
        if let Some(bn) = &self.norm {
            out.push(&bn.scale);
            out.push(&bn.shift);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Shadow model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ShadowModel<R: Real> {
    pub spec: ModelSpec,
    pub blocks: Vec<Block<R>>,
    pub quant: QuantSpec,
}

/// Trace of one dual forward pass: the two chains, the hybrids, and (when
/// requested) the caches needed to backpropagate through the full chain and
/// each hybrid block.
#[derive(Debug, Clone)]
pub struct DualTrace<R: Real> {
    /// `z_l` for every block, last entry = full-precision logits.
    pub full: Vec<Tensor<R>>,
    /// `z^q_l` for every block, last entry = quantized logits.
    pub quant: Vec<Tensor<R>>,
    /// `f_l(z^q_{l-1})` for every interior block.
    pub hybrid: Vec<Tensor<R>>,
    pub full_caches: Option<Vec<BlockCache<R>>>,
    pub hybrid_caches: Option<Vec<BlockCache<R>>>,
}

impl<R: Real> DualTrace<R> {
    pub fn logits_full(&self) -> &Tensor<R> {
        self.full.last().expect("model has at least one block")
    }

    pub fn logits_quant(&self) -> &Tensor<R> {
        self.quant.last().expect("model has at least one block")
    }

    /// FNV-1a hash over the quantized chain's values. Two evaluations with
    /// the same fingerprint saw a bit-identical quantized chain, which is
    /// what makes finite differences of the Lagrangian valid at a point.
    pub fn quant_fingerprint(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for t in &self.quant {
            for &v in t.data() {
                for byte in v.to_f64_v().to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        hash
    }
}

impl<R: Real> ShadowModel<R> {
    /// Build a seeded model. Weights draw from a normal with
    /// `std = sqrt(2 / fan_in)`; biases start at zero.
    pub fn build(spec: ModelSpec, quant: QuantSpec, seed: u64) -> Result<Self> {
        if spec.blocks.is_empty() {
            return Err(Error::Input("model needs at least one layer".into()));
        }
        if quant.len() != spec.blocks.len() {
            return Err(Error::Input(format!(
                "bits list length {} does not match layer count {}",
                quant.len(),
                spec.blocks.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut dims = spec.input_dims.clone();
        for (i, bs) in spec.blocks.iter().enumerate() {
            let name = format!("layer{}", i + 1);
            let (op, out_dims, channels) = match bs.kind {
                BlockKind::Dense { out } => {
                    let fan_in: usize = dims.iter().product();
                    let weight = init_tensor(&mut rng, vec![fan_in, out], fan_in);
                    let bias = bs.bias.then(|| Tensor::zeros(vec![out]));
                    (
                        BlockOp::Dense(Dense::new(&name, weight, bias)),
                        vec![out],
                        out,
                    )
                }
                BlockKind::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    if dims.len() != 3 {
                        return Err(Error::Input(format!(
                            "layer {}: conv needs [C,H,W] input dims, got {dims:?}",
                            i + 1
                        )));
                    }
                    let (c, h, w) = (dims[0], dims[1], dims[2]);
                    let fan_in = c * kernel * kernel;
                    let weight = init_tensor(&mut rng, vec![out, c, kernel, kernel], fan_in);
                    let bias = bs.bias.then(|| Tensor::zeros(vec![out]));
                    let hp = h + 2 * padding;
                    let wp = w + 2 * padding;
                    if kernel > hp || kernel > wp {
                        return Err(Error::Input(format!(
                            "layer {}: kernel {kernel} does not fit input {h}x{w} with padding {padding}",
                            i + 1
                        )));
                    }
                    let oh = (hp - kernel) / stride + 1;
                    let ow = (wp - kernel) / stride + 1;
                    (
                        BlockOp::Conv(Conv2d::new(&name, weight, bias, stride, padding)),
                        vec![out, oh, ow],
                        out,
                    )
                }
            };
            let norm = bs
                .norm
                .then(|| BatchNorm::new(format!("{name}.bn"), channels));
            blocks.push(Block {
                op,
                norm,
                act: bs.act,
            });
            dims = out_dims;
        }
        let final_width: usize = dims.iter().product();
        if final_width != spec.classes {
            return Err(Error::Input(format!(
                "final layer width {final_width} does not match class count {}",
                spec.classes
            )));
        }
        Ok(Self {
            spec,
            blocks,
            quant,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    /// Interior block indices, the ones layerwise constraints attach to.
    pub fn interior_ids(&self) -> Vec<usize> {
        (0..self.layer_count().saturating_sub(1)).collect()
    }

    pub fn set_precision(&mut self, layer: usize, enabled: bool, bits: u32) -> Result<()> {
        self.quant.set(layer, enabled, bits)
    }

    pub fn zero_grads(&mut self) {
        for block in &mut self.blocks {
            for p in block.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<R>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect()
    }

    /// Dual forward pass over one batch.
    pub fn forward_pair(
        &mut self,
        input: &Tensor<R>,
        mode: Mode,
        update_stats: bool,
        want_caches: bool,
    ) -> Result<DualTrace<R>> {
        let count = self.blocks.len();
        let mut full: Vec<Tensor<R>> = Vec::with_capacity(count);
        let mut quant: Vec<Tensor<R>> = Vec::with_capacity(count);
        let mut hybrid: Vec<Tensor<R>> = Vec::with_capacity(count.saturating_sub(1));
        let mut full_caches = Vec::with_capacity(count);
        let mut hybrid_caches = Vec::with_capacity(count.saturating_sub(1));
        for l in 0..count {
            let is_last = l + 1 == count;
            let bits = self.quant.bits(l);
            let full_in = if l == 0 {
                input.clone()
            } else {
                full[l - 1].clone()
            };
            let quant_in = if l == 0 {
                input.clone()
            } else {
                quant[l - 1].clone()
            };
            let block = &mut self.blocks[l];
            let (zf, fc) =
                block.forward_path(&full_in, PathKind::Full, mode, update_stats, bits, is_last)?;
            // high-precision layers in the quantized chain read full-path
            // statistics, which the full chain just updated
            let quant_update = update_stats && bits.is_some();
            let (zq, _) = block.forward_path(
                &quant_in,
                PathKind::Quant,
                mode,
                quant_update,
                bits,
                is_last,
            )?;
            if !is_last {
                let (zh, hc) =
                    block.forward_path(&quant_in, PathKind::Hybrid, mode, false, bits, is_last)?;
                hybrid.push(zh);
                if want_caches {
                    hybrid_caches.push(hc);
                }
            }
            full.push(zf);
            quant.push(zq);
            if want_caches {
                full_caches.push(fc);
            }
        }
        Ok(DualTrace {
            full,
            quant,
            hybrid,
            full_caches: want_caches.then_some(full_caches),
            hybrid_caches: want_caches.then_some(hybrid_caches),
        })
    }

    /// Full-precision chain only (plain supervised training).
    pub fn forward_full(
        &mut self,
        input: &Tensor<R>,
        mode: Mode,
        update_stats: bool,
    ) -> Result<(Tensor<R>, Vec<BlockCache<R>>)> {
        let count = self.blocks.len();
        let mut caches = Vec::with_capacity(count);
        let mut x = input.clone();
        for l in 0..count {
            let is_last = l + 1 == count;
            let block = &mut self.blocks[l];
            let (out, cache) =
                block.forward_path(&x, PathKind::Full, mode, update_stats, None, is_last)?;
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    /// Quantized chain only, caching for straight-through backward (baseline).
    pub fn forward_quant(
        &mut self,
        input: &Tensor<R>,
        mode: Mode,
        update_stats: bool,
    ) -> Result<(Tensor<R>, Vec<BlockCache<R>>)> {
        let count = self.blocks.len();
        let mut caches = Vec::with_capacity(count);
        let mut x = input.clone();
        for l in 0..count {
            let is_last = l + 1 == count;
            let bits = self.quant.bits(l);
            let block = &mut self.blocks[l];
            let (out, cache) =
                block.forward_path(&x, PathKind::Quant, mode, update_stats, bits, is_last)?;
            caches.push(cache);
            x = out;
        }
        Ok((x, caches))
    }

    /// Backpropagate a logit gradient through the full-precision chain,
    /// accumulating parameter gradients.
    pub fn backward_full(
        &mut self,
        grad_logits: &Tensor<R>,
        caches: &[BlockCache<R>],
    ) -> Result<()> {
        let mut grad = grad_logits.clone();
        for (block, cache) in self.blocks.iter_mut().zip(caches).rev() {
            grad = block.backward_plain(&grad, cache)?;
        }
        Ok(())
    }

    /// Backpropagate a hybrid-output gradient through interior block `layer`
    /// only; the gradient toward `z^q_{l-1}` is discarded (detached shadow).
    pub fn backward_hybrid(
        &mut self,
        layer: usize,
        grad: &Tensor<R>,
        caches: &[BlockCache<R>],
    ) -> Result<()> {
        let _detached = self.blocks[layer].backward_plain(grad, &caches[layer])?;
        Ok(())
    }

    /// Straight-through backward over the whole quantized chain (baseline).
    pub fn backward_quant_ste(
        &mut self,
        grad_logits: &Tensor<R>,
        caches: &[BlockCache<R>],
    ) -> Result<()> {
        let mut grad = grad_logits.clone();
        for (block, cache) in self.blocks.iter_mut().zip(caches).rev() {
            grad = block.backward_ste(&grad, cache)?;
        }
        Ok(())
    }

    /// Argmax accuracy of the quantized model in eval mode (running
    /// statistics frozen); ties resolve to the lowest class id.
    pub fn quantized_eval_accuracy(&mut self, dataset: &Dataset) -> Result<f64> {
        self.eval_accuracy(dataset, PathKind::Quant)
    }

    pub fn full_eval_accuracy(&mut self, dataset: &Dataset) -> Result<f64> {
        self.eval_accuracy(dataset, PathKind::Full)
    }

    fn eval_accuracy(&mut self, dataset: &Dataset, path: PathKind) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Input(
                "cannot evaluate accuracy on an empty dataset".into(),
            ));
        }
        let mut correct = 0usize;
        let batch = 256usize;
        let mut start = 0usize;
        while start < dataset.len() {
            let end = (start + batch).min(dataset.len());
            let indices: Vec<usize> = (start..end).collect();
            let x = dataset.features.gather_rows(&indices).cast::<R>();
            let logits = match path {
                PathKind::Quant => self.forward_quant(&x, Mode::Eval, false)?.0,
                _ => self.forward_full(&x, Mode::Eval, false)?.0,
            };
            for (row, &i) in (0..logits.rows()).zip(&indices) {
                if argmax(logits.row(row)) == dataset.labels[i] {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Softmax probabilities of both outputs, for the output-distance
    /// constraint.
    pub fn output_probs(&self, trace: &DualTrace<R>) -> Result<(Tensor<R>, Tensor<R>)> {
        Ok((
            softmax(trace.logits_full())?,
            softmax(trace.logits_quant())?,
        ))
    }
}

fn init_tensor<R: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<R> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<R> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            R::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape, data).expect("init shape is consistent")
}

impl<R: Real> ParamAccess for ShadowModel<R> {
    fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.params())
            .map(|p| p.value.numel())
            .sum()
    }

    fn param_get(&self, index: usize) -> f64 {
        let mut i = index;
        for block in &self.blocks {
            for p in block.params() {
                if i < p.value.numel() {
                    return p.value.data()[i].to_f64_v();
                }
                i -= p.value.numel();
            }
        }
        panic!("parameter index {index} out of range");
    }

    fn param_set(&mut self, index: usize, value: f64) {
        let mut i = index;
        for block in &mut self.blocks {
            for p in block.params_mut() {
                if i < p.value.numel() {
                    p.value.data_mut()[i] = R::from_f64(value);
                    return;
                }
                i -= p.value.numel();
            }
        }
        panic!("parameter index {index} out of range");
    }

    fn grad_get(&self, index: usize) -> f64 {
        let mut i = index;
        for block in &self.blocks {
            for p in block.params() {
                if i < p.value.numel() {
                    return p.grad.data()[i].to_f64_v();
                }
                i -= p.value.numel();
            }
        }
        panic!("parameter index {index} out of range");
    }
}
