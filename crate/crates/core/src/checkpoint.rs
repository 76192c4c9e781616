//! Binary checkpoints: `"PDQAT1"` magic, a little-endian version word, the
//! layer table, named 32-bit-real arrays (parameters plus both batch-norm
//! states), the dual state, and an echo of the run configuration. Round
//! trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::quantize::QuantSpec;
use crate::shadow::{BlockKind, BlockOp, BlockSpec, ModelSpec, ShadowModel};
use crate::tensor::{Real, Tensor};
use crate::trainer::{DualSnapshot, DualState};

pub const MAGIC: &[u8; 6] = b"PDQAT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub bits: Vec<u32>,
    pub default_bits: u32,
    pub arrays: Vec<NamedArray>,
    pub duals: Option<DualState>,
    pub config_echo: String,
}

// ---------------------------------------------------------------------------
// Byte plumbing
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.offset {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint at byte offset {}",
                self.path, self.offset
            )));
        }
        let s = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.offset
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}

fn act_tag(act: Activation) -> u8 {
    match act {
        Activation::None => 0,
        Activation::Relu => 1,
        Activation::Clip => 2,
    }
}

fn act_from_tag(tag: u8, path: &str) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::None),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Clip),
        _ => Err(Error::Format(format!(
            "{path}: unknown activation tag {tag}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Save
// ---------------------------------------------------------------------------

/// Collect every persistent array of a model under stable names.
pub fn model_arrays<R: Real>(model: &ShadowModel<R>) -> Vec<NamedArray> {
    let mut arrays = Vec::new();
    let mut push = |name: String, t: &Tensor<R>| {
        arrays.push(NamedArray {
            name,
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.to_f64_v() as f32).collect(),
        });
    };
    for (i, block) in model.blocks.iter().enumerate() {
        let prefix = format!("layer{}", i + 1);
        match &block.op {
            BlockOp::Dense(d) => {
                push(format!("{prefix}.weight"), &d.weight.value);
                if let Some(b) = &d.bias {
                    push(format!("{prefix}.bias"), &b.value);
                }
            }
            BlockOp::Conv(c) => {
                push(format!("{prefix}.weight"), &c.weight.value);
                if let Some(b) = &c.bias {
                    push(format!("{prefix}.bias"), &b.value);
                }
            }
        }
        if let Some(bn) = &block.norm {
            push(format!("{prefix}.bn.scale"), &bn.scale.value);
            push(format!("{prefix}.bn.shift"), &bn.shift.value);
            push(
                format!("{prefix}.bn.full.running_mean"),
                &bn.full_state.running_mean,
            );
            push(
                format!("{prefix}.bn.full.running_var"),
                &bn.full_state.running_var,
            );
            push(
                format!("{prefix}.bn.quant.running_mean"),
                &bn.quant_state.running_mean,
            );
            push(
                format!("{prefix}.bn.quant.running_var"),
                &bn.quant_state.running_var,
            );
        }
    }
    arrays
}

pub fn save_checkpoint<R: Real>(
    path: &Path,
    model: &ShadowModel<R>,
    duals: Option<&DualState>,
    config_echo: &str,
) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    // layer table
    let spec = &model.spec;
    w.u32(spec.input_dims.len() as u32);
    for &d in &spec.input_dims {
        w.u32(d as u32);
    }
    w.u32(spec.classes as u32);
    w.u32(model.quant.default_bits());
    let bits = model.quant.to_bits();
    w.u32(spec.blocks.len() as u32);
    for (bs, &b) in spec.blocks.iter().zip(&bits) {
        match bs.kind {
            BlockKind::Dense { out } => {
                w.u8(0);
                w.u32(out as u32);
            }
            BlockKind::Conv {
                out,
                kernel,
                stride,
                padding,
            } => {
                w.u8(1);
                w.u32(out as u32);
                w.u32(kernel as u32);
                w.u32(stride as u32);
                w.u32(padding as u32);
            }
        }
        w.u8(act_tag(bs.act));
        w.u8(bs.norm as u8);
        w.u8(bs.bias as u8);
        w.u32(b);
    }

    // named arrays
    let arrays = model_arrays(model);
    w.u32(arrays.len() as u32);
    for a in &arrays {
        w.bytes(a.name.as_bytes());
        w.u32(a.dims.len() as u32);
        for &d in &a.dims {
            w.u32(d as u32);
        }
        for &v in &a.data {
            w.f32(v);
        }
    }

    // duals
    match duals {
        Some(d) => {
            w.u8(1);
            w.u32(d.layer_lambdas.len() as u32);
            for &(layer, lambda) in &d.layer_lambdas {
                w.u32(layer as u32);
                w.f64(lambda);
            }
            w.f64(d.lambda_out);
            w.f64(d.dual_lr);
            w.u32(d.trajectory.len() as u32);
            for snap in &d.trajectory {
                for &v in &snap.layer_lambdas {
                    w.f64(v);
                }
                w.f64(snap.lambda_out);
            }
        }
        None => w.u8(0),
    }

    w.bytes(config_echo.as_bytes());
    fs::write(path, &w.buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Load
// ---------------------------------------------------------------------------

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf =
        fs::read(path).map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut r = Reader {
        buf: &buf,
        offset: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(6)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?} (expected {:?})",
            r.path,
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }

    let rank = r.u32()? as usize;
    let input_dims: Vec<usize> = (0..rank)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let classes = r.u32()? as usize;
    let default_bits = r.u32()?;
    let block_count = r.u32()? as usize;
    let mut blocks = Vec::new();
    let mut bits = Vec::new();
    for _ in 0..block_count {
        let kind = match r.u8()? {
            0 => BlockKind::Dense {
                out: r.u32()? as usize,
            },
            1 => BlockKind::Conv {
                out: r.u32()? as usize,
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
                padding: r.u32()? as usize,
            },
            tag => {
                return Err(Error::Format(format!(
                    "{}: unknown layer kind tag {tag}",
                    r.path
                )))
            }
        };
        let act = act_from_tag(r.u8()?, &r.path)?;
        let norm = r.u8()? != 0;
        let bias = r.u8()? != 0;
        blocks.push(BlockSpec {
            kind,
            act,
            norm,
            bias,
        });
        bits.push(r.u32()?);
    }

    let array_count = r.u32()? as usize;
    let mut arrays = Vec::new();
    for _ in 0..array_count {
        let name = String::from_utf8(r.bytes()?)
            .map_err(|_| Error::Format(format!("{}: non-UTF-8 array name", r.path)))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        // checked size, bounded by the bytes actually present
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= r.remaining() / 4)
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: array {name:?} claims shape {dims:?}, larger than the file",
                    r.path
                ))
            })?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f32()?);
        }
        arrays.push(NamedArray { name, dims, data });
    }

    let duals = match r.u8()? {
        0 => None,
        _ => {
            let n = r.u32()? as usize;
            if n > r.remaining() / 12 {
                return Err(Error::Format(format!(
                    "{}: dual state claims {n} multipliers, larger than the file",
                    r.path
                )));
            }
            let mut layer_lambdas = Vec::with_capacity(n);
            for _ in 0..n {
                let layer = r.u32()? as usize;
                let lambda = r.f64()?;
                layer_lambdas.push((layer, lambda));
            }
            let lambda_out = r.f64()?;
            let dual_lr = r.f64()?;
            let epochs = r.u32()? as usize;
            if epochs > r.remaining() / ((n + 1) * 8) {
                return Err(Error::Format(format!(
                    "{}: dual trajectory claims {epochs} epochs, larger than the file",
                    r.path
                )));
            }
            let mut trajectory = Vec::with_capacity(epochs);
            for _ in 0..epochs {
                let mut snap = Vec::with_capacity(n);
                for _ in 0..n {
                    snap.push(r.f64()?);
                }
                let out = r.f64()?;
                trajectory.push(DualSnapshot {
                    layer_lambdas: snap,
                    lambda_out: out,
                });
            }
            Some(DualState {
                layer_lambdas,
                lambda_out,
                dual_lr,
                trajectory,
            })
        }
    };

    let config_echo = String::from_utf8(r.bytes()?)
        .map_err(|_| Error::Format(format!("{}: non-UTF-8 config echo", r.path)))?;

    Ok(Checkpoint {
        spec: ModelSpec {
            input_dims,
            classes,
            blocks,
        },
        bits,
        default_bits,
        arrays,
        duals,
        config_echo,
    })
}

impl Checkpoint {
    /// Rebuild the model and restore every named array into it.
    pub fn to_model(&self) -> Result<ShadowModel<f32>> {
        let quant = QuantSpec::from_bits(&self.bits, self.default_bits)?;
        let mut model = ShadowModel::<f32>::build(self.spec.clone(), quant, 0)?;
        for array in &self.arrays {
            restore_array(&mut model, array)?;
        }
        Ok(model)
    }
}

fn restore_array(model: &mut ShadowModel<f32>, array: &NamedArray) -> Result<()> {
    let target = locate_tensor(model, &array.name).ok_or_else(|| {
        Error::Format(format!(
            "checkpoint array {:?} has no destination",
            array.name
        ))
    })?;
    if target.shape() != array.dims.as_slice() {
        return Err(Error::Format(format!(
            "checkpoint array {:?} shape {:?} does not match model shape {:?}",
            array.name,
            array.dims,
            target.shape()
        )));
    }
    for (slot, &v) in target.data_mut().iter_mut().zip(&array.data) {
        *slot = v;
    }
    Ok(())
}

fn locate_tensor<'a>(model: &'a mut ShadowModel<f32>, name: &str) -> Option<&'a mut Tensor<f32>> {
    let (layer, rest) = name.split_once('.')?;
    let index: usize = layer
        .strip_prefix("layer")?
        .parse::<usize>()
        .ok()?
        .checked_sub(1)?;
    let block = model.blocks.get_mut(index)?;
    match rest {
        "weight" => Some(match &mut block.op {
            BlockOp::Dense(d) => &mut d.weight.value,
            BlockOp::Conv(c) => &mut c.weight.value,
        }),
        "bias" => match &mut block.op {
            BlockOp::Dense(d) => d.bias.as_mut().map(|b| &mut b.value),
            BlockOp::Conv(c) => c.bias.as_mut().map(|b| &mut b.value),
        },
        "bn.scale" => block.norm.as_mut().map(|bn| &mut bn.scale.value),
        "bn.shift" => block.norm.as_mut().map(|bn| &mut bn.shift.value),
        "bn.full.running_mean" => block
            .norm
            .as_mut()
            .map(|bn| &mut bn.full_state.running_mean),
        "bn.full.running_var" => block.norm.as_mut().map(|bn| &mut bn.full_state.running_var),
        "bn.quant.running_mean" => block
            .norm
            .as_mut()
            .map(|bn| &mut bn.quant_state.running_mean),
        "bn.quant.running_var" => block
            .norm
            .as_mut()
            .map(|bn| &mut bn.quant_state.running_var),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};
    use crate::shadow::BlockSpec;

    fn sample_model() -> ShadowModel<f32> {
        let spec = ModelSpec {
            input_dims: vec![2],
            classes: 2,
            blocks: vec![
                BlockSpec {
                    kind: BlockKind::Dense { out: 5 },
                    act: Activation::Clip,
                    norm: true,
                    bias: true,
                },
                BlockSpec {
                    kind: BlockKind::Dense { out: 2 },
                    act: Activation::None,
                    norm: false,
                    bias: true,
                },
            ],
        };
        let quant = QuantSpec::from_bits(&[0, 2], 2).unwrap();
        ShadowModel::build(spec, quant, 77).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let model = sample_model();
        let mut duals = DualState::new(&model.interior_ids(), 0.01);
        duals.layer_lambdas[0].1 = 0.375;
        duals.record_epoch();
        duals.lambda_out = 1.25;
        duals.record_epoch();
        save_checkpoint(&path, &model, Some(&duals), "[train]\nepochs = 3\n").unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.spec, model.spec);
        assert_eq!(ck.bits, model.quant.to_bits());
        assert_eq!(ck.arrays, model_arrays(&model));
        assert_eq!(ck.duals.as_ref().unwrap(), &duals);
        assert_eq!(ck.config_echo, "[train]\nepochs = 3\n");

        let restored = ck.to_model().unwrap();
        assert_eq!(model_arrays(&restored), model_arrays(&model));
    }

    #[test]
    fn round_trip_preserves_quantized_accuracy_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut model = sample_model();
        let data = gen_synthetic(SyntheticKind::Blobs, 50, 2, 0.5, 8).unwrap();
        let before = model.quantized_eval_accuracy(&data).unwrap();
        save_checkpoint(&path, &model, None, "").unwrap();
        let mut restored = load_checkpoint(&path).unwrap().to_model().unwrap();
        let after = restored.quantized_eval_accuracy(&data).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let model = sample_model();
        save_checkpoint(&path, &model, None, "").unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[..6].copy_from_slice(b"XXXXX1");
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn version_bump_is_an_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.bin");
        let model = sample_model();
        save_checkpoint(&path, &model, None, "").unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[6..10].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            matches!(
                err,
                Error::UnsupportedVersion {
                    found: 2,
                    expected: 1
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn truncation_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.bin");
        let model = sample_model();
        save_checkpoint(&path, &model, None, "").unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    /// Freeze the on-disk layout: a minimal model serializes to exactly
    /// these bytes.
    #[test]
    fn golden_byte_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("golden.bin");
        let spec = ModelSpec {
            input_dims: vec![1],
            classes: 2,
            blocks: vec![BlockSpec {
                kind: BlockKind::Dense { out: 2 },
                act: Activation::None,
                norm: false,
                bias: false,
            }],
        };
        let quant = QuantSpec::from_bits(&[0], 2).unwrap();
        let mut model = ShadowModel::<f32>::build(spec, quant, 0).unwrap();
        if let BlockOp::Dense(d) = &mut model.blocks[0].op {
            d.weight.value = Tensor::new(vec![1, 2], vec![0.5, -1.5]).unwrap();
        }
        save_checkpoint(&path, &model, None, "").unwrap();

        let mut expect = Vec::new();
        expect.extend_from_slice(b"PDQAT1");
        expect.extend_from_slice(&1u32.to_le_bytes()); // version
        expect.extend_from_slice(&1u32.to_le_bytes()); // input rank
        expect.extend_from_slice(&1u32.to_le_bytes()); // input dim
        expect.extend_from_slice(&2u32.to_le_bytes()); // classes
        expect.extend_from_slice(&2u32.to_le_bytes()); // default bits
        expect.extend_from_slice(&1u32.to_le_bytes()); // block count
        expect.push(0); // dense
        expect.extend_from_slice(&2u32.to_le_bytes()); // out
        expect.push(0); // act none
        expect.push(0); // norm
        expect.push(0); // bias
        expect.extend_from_slice(&0u32.to_le_bytes()); // bits (high precision)
        expect.extend_from_slice(&1u32.to_le_bytes()); // array count
        expect.extend_from_slice(&13u32.to_le_bytes());
        expect.extend_from_slice(b"layer1.weight");
        expect.extend_from_slice(&2u32.to_le_bytes()); // rank
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&0.5f32.to_le_bytes());
        expect.extend_from_slice(&(-1.5f32).to_le_bytes());
        expect.push(0); // no duals
        expect.extend_from_slice(&0u32.to_le_bytes()); // empty echo
        assert_eq!(fs::read(&path).unwrap(), expect);
    }

    /// No claimed count or shape in a corrupted file may drive allocation
    /// past what the file actually contains.
    #[test]
    fn hostile_byte_flips_never_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flip.bin");
        let model = sample_model();
        let mut duals = DualState::new(&model.interior_ids(), 0.01);
        duals.record_epoch();
        save_checkpoint(&path, &model, Some(&duals), "echo").unwrap();
        let original = fs::read(&path).unwrap();
        // set every u32-aligned position to an extreme value, one at a time
        for pos in (6..original.len().saturating_sub(4)).step_by(4) {
            let mut bytes = original.clone();
            bytes[pos..pos + 4].copy_from_slice(&0xFFFF_FFFFu32.to_le_bytes());
            fs::write(&path, &bytes).unwrap();
            let _ = load_checkpoint(&path); // must return, never panic or OOM
        }
    }
}
