//! Differentiable layer primitives with explicit forward and backward passes.
//!
//! Every forward returns its output together with the cache the matching
//! backward consumes, so a missing cache is unrepresentable. Backward passes
//! accumulate parameter gradients in place and return the gradient with
//! respect to the layer input.

use crate::error::{Error, Result};
use crate::tensor::{column_sums, matmul, matmul_nt, matmul_tn, Real, Tensor};

/// A named parameter tensor with its gradient accumulator and the optimizer
/// moment buffers, all shape-matched and zero-initialized.
#[derive(Debug, Clone)]
pub struct Param<R: Real> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
    pub m: Tensor<R>,
    pub v: Tensor<R>,
}

impl<R: Real> Param<R> {
    pub fn new(name: impl Into<String>, value: Tensor<R>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(R::zero());
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dense<R: Real> {
    pub name: String,
    pub weight: Param<R>,
    pub bias: Option<Param<R>>,
}

#[derive(Debug, Clone)]
pub struct DenseCache<R: Real> {
    /// Input flattened to `[B, n]`.
    input: Tensor<R>,
}

impl<R: Real> Dense<R> {
    pub fn new(name: impl Into<String>, weight: Tensor<R>, bias: Option<Tensor<R>>) -> Self {
        let name = name.into();
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Param::new(format!("{name}.bias"), b)),
            name,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    fn flatten_input(&self, input: &Tensor<R>) -> Result<Tensor<R>> {
        let b = input.rows();
        let width = input.row_width();
        if width != self.in_features() {
            return Err(Error::Dimension(format!(
                "layer {}: input width {width} does not match weight shape {}x{}",
                self.name,
                self.in_features(),
                self.out_features()
            )));
        }
        input.reshape(vec![b, width])
    }

    /// `out = input . W + bias`, optionally with substituted weights
    /// (the quantized path passes `q_w(W)` here).
    pub fn forward_with(
        &self,
        input: &Tensor<R>,
        weight_override: Option<&Tensor<R>>,
    ) -> Result<(Tensor<R>, DenseCache<R>)> {
        let flat = self.flatten_input(input)?;
        let w = weight_override.unwrap_or(&self.weight.value);
        let mut out = matmul(&flat, w)?;
        if let Some(bias) = &self.bias {
            let m = self.out_features();
            for i in 0..out.rows() {
                let row = &mut out.data_mut()[i * m..(i + 1) * m];
                for (o, &b) in row.iter_mut().zip(bias.value.data()) {
                    *o += b;
                }
            }
        }
        Ok((out, DenseCache { input: flat }))
    }

    pub fn forward(&self, input: &Tensor<R>) -> Result<(Tensor<R>, DenseCache<R>)> {
        self.forward_with(input, None)
    }

    /// Standard backward: accumulates `dW = input^T . grad_out` and the bias
    /// column sums, returns `grad_in = grad_out . W^T`.
    pub fn backward(&mut self, grad_out: &Tensor<R>, cache: &DenseCache<R>) -> Result<Tensor<R>> {
        let dw = matmul_tn(&cache.input, grad_out)?;
        self.weight.grad.add_scaled(&dw, R::one());
        if let Some(bias) = &mut self.bias {
            let db = column_sums(grad_out)?;
            bias.grad.add_scaled(&db, R::one());
        }
        matmul_nt(grad_out, &self.weight.value)
    }

    /// Backward for the baseline trainer's quantized forward: the weight
    /// gradient is routed through the straight-through weight quantizer and
    /// `grad_in` uses the substituted weights actually applied in the forward.
    pub fn backward_ste(
        &mut self,
        grad_out: &Tensor<R>,
        cache: &DenseCache<R>,
        applied_weight: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        let dwq = matmul_tn(&cache.input, grad_out)?;
        let dw = crate::quantize::ste_weight_backward(&dwq, &self.weight.value)?;
        self.weight.grad.add_scaled(&dw, R::one());
        if let Some(bias) = &mut self.bias {
            let db = column_sums(grad_out)?;
            bias.grad.add_scaled(&db, R::one());
        }
        matmul_nt(grad_out, applied_weight)
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d<R: Real> {
    pub name: String,
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Param<R>,
    pub bias: Option<Param<R>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<R: Real> {
    input: Tensor<R>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl<R: Real> Conv2d<R> {
    pub fn new(
        name: impl Into<String>,
        weight: Tensor<R>,
        bias: Option<Tensor<R>>,
        stride: usize,
        padding: usize,
    ) -> Self {
        let name = name.into();
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.map(|b| Param::new(format!("{name}.bias"), b)),
            stride,
            padding,
            name,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn geometry(&self, input: &Tensor<R>) -> Result<ConvGeometry> {
        let shape = input.shape();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "layer {}: expected 4-D input [B,C,H,W], got {shape:?}",
                self.name
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let ws = self.weight.value.shape();
        if ws[1] != c {
            return Err(Error::Dimension(format!(
                "layer {}: input channels {c} do not match kernel channels {}",
                self.name, ws[1]
            )));
        }
        let (kh, kw) = (ws[2], ws[3]);
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if kh > hp || kw > wp {
            return Err(Error::Dimension(format!(
                "layer {}: kernel {kh}x{kw} does not fit padded input {hp}x{wp}",
                self.name
            )));
        }
        let oh = (hp - kh) / self.stride + 1;
        let ow = (wp - kw) / self.stride + 1;
        if oh == 0 || ow == 0 {
            return Err(Error::Dimension(format!(
                "layer {}: non-positive output dims {oh}x{ow}",
                self.name
            )));
        }
        Ok(ConvGeometry {
            b,
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
        })
    }

    pub fn forward_with(
        &self,
        input: &Tensor<R>,
        weight_override: Option<&Tensor<R>>,
    ) -> Result<(Tensor<R>, ConvCache<R>)> {
        let ConvGeometry {
            b,
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
        } = self.geometry(input)?;
        let oc = self.out_channels();
        let kernel = weight_override.unwrap_or(&self.weight.value);
        let kdat = kernel.data();
        let idat = input.data();
        let mut out = vec![R::zero(); b * oc * oh * ow];
        let pad = self.padding as isize;
        for bi in 0..b {
            for o in 0..oc {
                let bias = self.bias.as_ref().map_or(R::zero(), |p| p.value.data()[o]);
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias;
                        for ci in 0..c {
                            for u in 0..kh {
                                let y = (i * self.stride + u) as isize - pad;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let x = (j * self.stride + v) as isize - pad;
                                    if x < 0 || x >= w as isize {
                                        continue;
                                    }
                                    let iv =
                                        idat[((bi * c + ci) * h + y as usize) * w + x as usize];
                                    let kv = kdat[((o * c + ci) * kh + u) * kw + v];
                                    acc += iv * kv;
                                }
                            }
                        }
                        out[((bi * oc + o) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Ok((
            Tensor::new(vec![b, oc, oh, ow], out)?,
            ConvCache {
                input: input.clone(),
            },
        ))
    }

    pub fn forward(&self, input: &Tensor<R>) -> Result<(Tensor<R>, ConvCache<R>)> {
        self.forward_with(input, None)
    }

    fn backward_impl(
        &mut self,
        grad_out: &Tensor<R>,
        cache: &ConvCache<R>,
        applied_weight: Option<&Tensor<R>>,
        ste_weights: bool,
    ) -> Result<Tensor<R>> {
        let input = &cache.input;
        let ConvGeometry {
            b,
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
        } = self.geometry(input)?;
        let oc = self.out_channels();
        let kernel = applied_weight.unwrap_or(&self.weight.value).clone();
        let kdat = kernel.data();
        let idat = input.data();
        let gdat = grad_out.data();
        let mut dkernel = vec![R::zero(); oc * c * kh * kw];
        let mut dbias = vec![R::zero(); oc];
        let mut dinput = vec![R::zero(); b * c * h * w];
        let pad = self.padding as isize;
        for bi in 0..b {
            for o in 0..oc {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = gdat[((bi * oc + o) * oh + i) * ow + j];
                        if g == R::zero() {
                            continue;
                        }
                        dbias[o] += g;
                        for ci in 0..c {
                            for u in 0..kh {
                                let y = (i * self.stride + u) as isize - pad;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let x = (j * self.stride + v) as isize - pad;
                                    if x < 0 || x >= w as isize {
                                        continue;
                                    }
                                    let ii = ((bi * c + ci) * h + y as usize) * w + x as usize;
                                    let ki = ((o * c + ci) * kh + u) * kw + v;
                                    dkernel[ki] += g * idat[ii];
                                    dinput[ii] += g * kdat[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
        let dk = Tensor::new(self.weight.value.shape().to_vec(), dkernel)?;
        if ste_weights {
            let dk = crate::quantize::ste_weight_backward(&dk, &self.weight.value)?;
            self.weight.grad.add_scaled(&dk, R::one());
        } else {
            self.weight.grad.add_scaled(&dk, R::one());
        }
        if let Some(bias) = &mut self.bias {
            bias.grad
                .add_scaled(&Tensor::new(vec![oc], dbias)?, R::one());
        }
        Tensor::new(vec![b, c, h, w], dinput)
    }

    pub fn backward(&mut self, grad_out: &Tensor<R>, cache: &ConvCache<R>) -> Result<Tensor<R>> {
        self.backward_impl(grad_out, cache, None, false)
    }

    pub fn backward_ste(
        &mut self,
        grad_out: &Tensor<R>,
        cache: &ConvCache<R>,
        applied_weight: &Tensor<R>,
    ) -> Result<Tensor<R>> {
        self.backward_impl(grad_out, cache, Some(applied_weight), true)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Train/eval switch for statistics-bearing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one precision level.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<R: Real> {
    pub running_mean: Tensor<R>,
    pub running_var: Tensor<R>,
}

impl<R: Real> BatchNormState<R> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], R::one()),
        }
    }
}

/// Batch normalization with shared affine parameters and one running-stats
/// state per precision level. Batch variance is the biased (population)
/// estimate, floored by `eps` inside the square root.
#[derive(Debug, Clone)]
pub struct BatchNorm<R: Real> {
    pub name: String,
    pub scale: Param<R>,
    pub shift: Param<R>,
    pub full_state: BatchNormState<R>,
    pub quant_state: BatchNormState<R>,
    pub momentum: R,
    pub eps: R,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<R: Real> {
    xhat: Tensor<R>,
    inv_std: Vec<R>,
    mode: Mode,
}

/// Which running-statistics buffer a forward pass reads or writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Full,
    Quant,
}

impl<R: Real> BatchNorm<R> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            scale: Param::new(
                format!("{name}.scale"),
                Tensor::full(vec![channels], R::one()),
            ),
            shift: Param::new(format!("{name}.shift"), Tensor::zeros(vec![channels])),
            full_state: BatchNormState::new(channels),
            quant_state: BatchNormState::new(channels),
            momentum: R::from_f64(0.1),
            eps: R::from_f64(1e-5),
            name,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.numel()
    }

    pub fn state(&self, precision: Precision) -> &BatchNormState<R> {
        match precision {
            Precision::Full => &self.full_state,
            Precision::Quant => &self.quant_state,
        }
    }

    /// Per-channel layout: 2-D inputs normalize over rows, 4-D inputs over
    /// batch and spatial positions.
    fn channel_layout(&self, input: &Tensor<R>) -> Result<(usize, usize, usize)> {
        let shape = input.shape();
        match shape.len() {
            2 => {
                if shape[1] != self.channels() {
                    return Err(Error::Dimension(format!(
                        "layer {}: {} channels expected, input has {}",
                        self.name,
                        self.channels(),
                        shape[1]
                    )));
                }
                // (channels, positions-per-channel-per-row stride helpers)
                Ok((shape[1], shape[0], 1))
            }
            4 => {
                if shape[1] != self.channels() {
                    return Err(Error::Dimension(format!(
                        "layer {}: {} channels expected, input has {}",
                        self.name,
                        self.channels(),
                        shape[1]
                    )));
                }
                Ok((shape[1], shape[0], shape[2] * shape[3]))
            }
            _ => Err(Error::Dimension(format!(
                "layer {}: batch norm supports 2-D or 4-D inputs, got {shape:?}",
                self.name
            ))),
        }
    }

    fn for_each_channel_index(
        input: &Tensor<R>,
        channels: usize,
        batch: usize,
        spatial: usize,
        ch: usize,
        mut f: impl FnMut(usize),
    ) {
        if input.shape().len() == 2 {
            for b in 0..batch {
                f(b * channels + ch);
            }
        } else {
            for b in 0..batch {
                let base = (b * channels + ch) * spatial;
                for s in 0..spatial {
                    f(base + s);
                }
            }
        }
    }

    pub fn forward(
        &mut self,
        input: &Tensor<R>,
        mode: Mode,
        precision: Precision,
        update_stats: bool,
    ) -> Result<(Tensor<R>, BatchNormCache<R>)> {
        let (channels, batch, spatial) = self.channel_layout(input)?;
        let count = R::from_f64((batch * spatial) as f64);
        let mut out = Tensor::zeros(input.shape().to_vec());
        let mut xhat = Tensor::zeros(input.shape().to_vec());
        let mut inv_std = vec![R::zero(); channels];
        for ch in 0..channels {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = R::zero();
                    Self::for_each_channel_index(input, channels, batch, spatial, ch, |i| {
                        sum += input.data()[i];
                    });
                    let mean = sum / count;
                    let mut sq = R::zero();
                    Self::for_each_channel_index(input, channels, batch, spatial, ch, |i| {
                        let d = input.data()[i] - mean;
                        sq += d * d;
                    });
                    (mean, sq / count)
                }
                Mode::Eval => {
                    let state = self.state(precision);
                    (state.running_mean.data()[ch], state.running_var.data()[ch])
                }
            };
            if mode == Mode::Train && update_stats {
                let state = match precision {
                    Precision::Full => &mut self.full_state,
                    Precision::Quant => &mut self.quant_state,
                };
                let om = R::one() - self.momentum;
                state.running_mean.data_mut()[ch] =
                    om * state.running_mean.data()[ch] + self.momentum * mean;
                state.running_var.data_mut()[ch] =
                    om * state.running_var.data()[ch] + self.momentum * var;
            }
            let istd = R::one() / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.scale.value.data()[ch];
            let b = self.shift.value.data()[ch];
            Self::for_each_channel_index(input, channels, batch, spatial, ch, |i| {
                let xh = (input.data()[i] - mean) * istd;
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g * xh + b;
            });
        }
        Ok((
            out,
            BatchNormCache {
                xhat,
                inv_std,
                mode,
            },
        ))
    }

    /// Backward through the affine map and, in train mode, through the batch
    /// statistics. Eval mode treats the normalization as a frozen affine map.
    pub fn backward(
        &mut self,
        grad_out: &Tensor<R>,
        cache: &BatchNormCache<R>,
    ) -> Result<Tensor<R>> {
        let (channels, batch, spatial) = self.channel_layout(grad_out)?;
        let count = R::from_f64((batch * spatial) as f64);
        let mut grad_in = Tensor::zeros(grad_out.shape().to_vec());
        for ch in 0..channels {
            let g = self.scale.value.data()[ch];
            let istd = cache.inv_std[ch];
            let mut sum_dy = R::zero();
            let mut sum_dy_xhat = R::zero();
            Self::for_each_channel_index(grad_out, channels, batch, spatial, ch, |i| {
                let dy = grad_out.data()[i];
                sum_dy += dy;
                sum_dy_xhat += dy * cache.xhat.data()[i];
            });
            self.shift.grad.data_mut()[ch] += sum_dy;
            self.scale.grad.data_mut()[ch] += sum_dy_xhat;
            match cache.mode {
                Mode::Train => {
                    Self::for_each_channel_index(grad_out, channels, batch, spatial, ch, |i| {
                        let dy = grad_out.data()[i];
                        let xh = cache.xhat.data()[i];
                        grad_in.data_mut()[i] =
                            g * istd * (dy - sum_dy / count - xh * sum_dy_xhat / count);
                    });
                }
                Mode::Eval => {
                    Self::for_each_channel_index(grad_out, channels, batch, spatial, ch, |i| {
                        grad_in.data_mut()[i] = grad_out.data()[i] * g * istd;
                    });
                }
            }
        }
        Ok(grad_in)
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
    /// Clip to `[0, 1]`; the pre-quantization activation.
    Clip,
}

#[derive(Debug, Clone)]
pub struct ActCache<R: Real> {
    pre: Tensor<R>,
    act: Activation,
}

pub fn activation_forward<R: Real>(act: Activation, input: &Tensor<R>) -> (Tensor<R>, ActCache<R>) {
    let out = match act {
        Activation::None => input.clone(),
        Activation::Relu => input.map(|v| v.max(R::zero())),
        Activation::Clip => input.map(|v| v.max(R::zero()).min(R::one())),
    };
    (
        out,
        ActCache {
            pre: input.clone(),
            act,
        },
    )
}

pub fn activation_backward<R: Real>(
    grad_out: &Tensor<R>,
    cache: &ActCache<R>,
) -> Result<Tensor<R>> {
    match cache.act {
        Activation::None => Ok(grad_out.clone()),
        Activation::Relu => {
            grad_out.zip_map(&cache.pre, |g, x| if x > R::zero() { g } else { R::zero() })
        }
        Activation::Clip => grad_out.zip_map(&cache.pre, |g, x| {
            if x >= R::zero() && x <= R::one() {
                g
            } else {
                R::zero()
            }
        }),
    }
}
