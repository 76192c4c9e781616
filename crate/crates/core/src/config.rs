//! Run configuration files: strict TOML with unknown keys rejected before
//! any computation. Defaults: primal learning rate 0.001 with decay 0.1 at
//! epochs 50/75/90, dual learning rate 0.01, early stopping on validation
//! accuracy, first/last layers in high precision, and epsilon bounds of
//! `1/(2^k - 1)` at each layer's bitwidth.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::constraints::{ConstraintSet, MseNorm};
use crate::data::{self, Dataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::optim::AdamConfig;
use crate::quantize::QuantSpec;
use crate::shadow::{BlockKind, BlockSpec, ModelSpec};
use crate::trainer::TrainRunConfig;

/// Environment variable that overrides `[output] dir`.
pub const OUT_DIR_ENV: &str = "PDQAT_OUT_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub quant: QuantSection,
    pub train: TrainSection,
    #[serde(default)]
    pub constraints: ConstraintsSection,
    pub data: Option<DataSection>,
    pub output: OutputSection,
    #[serde(skip)]
    raw: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Feature dims per sample, e.g. `[2]` or `[1, 28, 28]`.
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerCfg>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCfg {
    pub kind: String,
    pub out: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    pub act: Option<String>,
    pub norm: Option<bool>,
    pub bias: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    /// Per-layer bitwidths, 0 = high precision. Defaults to `default_bits`
    /// everywhere except the first and last layers.
    pub bits: Option<Vec<u32>>,
    pub default_bits: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub dual_lr: Option<f64>,
    pub early_stop: Option<bool>,
    pub patience: Option<usize>,
    pub val_fraction: Option<f64>,
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub lr_decay_factor: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    pub layerwise: Option<bool>,
    /// One shared bound for every layerwise constraint; per-layer defaults
    /// apply when absent.
    pub eps_layer: Option<f64>,
    pub eps_out: Option<f64>,
    pub mse_norm: Option<MseNorm>,
    pub log_floor: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// `blobs`, `spirals`, `csv`, or `idx`.
    pub kind: String,
    pub classes: Option<usize>,
    pub n_per_class: Option<usize>,
    pub noise: Option<f64>,
    /// Dataset seed; defaults to the training seed.
    pub seed: Option<u64>,
    pub test_fraction: Option<f64>,
    pub normalize: Option<bool>,
    pub path: Option<String>,
    pub label_column: Option<String>,
    pub train_images: Option<String>,
    pub train_labels: Option<String>,
    pub test_images: Option<String>,
    pub test_labels: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.raw = text.to_string();
        config.validate()?;
        Ok(config)
    }

    /// The original TOML text, echoed into checkpoints.
    pub fn raw(&self) -> &str {
        &self.raw
    }

    fn validate(&self) -> Result<()> {
        self.model_spec()?;
        let quant = self.quant_spec()?;
        self.constraint_set(&quant)?;
        self.train_config()?.validate()?;
        if let Some(data) = &self.data {
            data.validate()?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        if self.model.layers.is_empty() {
            return Err(Error::Config("model.layers must not be empty".into()));
        }
        let mut blocks = Vec::with_capacity(self.model.layers.len());
        for (i, layer) in self.model.layers.iter().enumerate() {
            let at = |opt: Option<usize>, what: &str| {
                opt.ok_or_else(|| {
                    Error::Config(format!(
                        "layer {}: {what} is required for kind {:?}",
                        i + 1,
                        layer.kind
                    ))
                })
            };
            let kind = match layer.kind.as_str() {
                "dense" => {
                    if layer.kernel.is_some() || layer.stride.is_some() || layer.pad.is_some() {
                        return Err(Error::Config(format!(
                            "layer {}: kernel/stride/pad are not valid for dense layers",
                            i + 1
                        )));
                    }
                    BlockKind::Dense {
                        out: at(layer.out, "out")?,
                    }
                }
                "conv" => BlockKind::Conv {
                    out: at(layer.out, "out")?,
                    kernel: at(layer.kernel, "kernel")?,
                    stride: layer.stride.unwrap_or(1),
                    padding: layer.pad.unwrap_or(0),
                },
                other => {
                    return Err(Error::Config(format!(
                        "layer {}: unknown kind {other:?} (expected dense or conv)",
                        i + 1
                    )))
                }
            };
            let act = match layer.act.as_deref() {
                None | Some("none") => Activation::None,
                Some("relu") => Activation::Relu,
                Some("clip") => Activation::Clip,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "layer {}: unknown activation {other:?} (expected none, relu, clip)",
                        i + 1
                    )))
                }
            };
            blocks.push(BlockSpec {
                kind,
                act,
                norm: layer.norm.unwrap_or(false),
                bias: layer.bias.unwrap_or(true),
            });
        }
        Ok(ModelSpec {
            input_dims: self.model.input.clone(),
            classes: self.model.classes,
            blocks,
        })
    }

    pub fn quant_spec(&self) -> Result<QuantSpec> {
        let default_bits = self.quant.default_bits.unwrap_or(2);
        match &self.quant.bits {
            Some(bits) => {
                if bits.len() != self.model.layers.len() {
                    return Err(Error::Config(format!(
                        "quant.bits has {} entries for {} layers",
                        bits.len(),
                        self.model.layers.len()
                    )));
                }
                QuantSpec::from_bits(bits, default_bits)
            }
            None => QuantSpec::default_for(self.model.layers.len(), default_bits),
        }
    }

    pub fn train_config(&self) -> Result<TrainRunConfig> {
        let t = &self.train;
        let mut adam = AdamConfig {
            lr: t.lr.unwrap_or(0.001),
            ..AdamConfig::default()
        };
        if let Some(b1) = t.beta1 {
            adam.beta1 = b1;
        }
        if let Some(b2) = t.beta2 {
            adam.beta2 = b2;
        }
        if let Some(epochs) = &t.lr_decay_epochs {
            adam.decay_epochs = epochs.clone();
        }
        if let Some(f) = t.lr_decay_factor {
            adam.decay_factor = f;
        }
        Ok(TrainRunConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam,
            dual_lr: t.dual_lr.unwrap_or(0.01),
            seed: t.seed,
            layerwise: self.constraints.layerwise.unwrap_or(true),
            early_stop: t.early_stop.unwrap_or(true),
            patience: t.patience.unwrap_or(10),
            val_fraction: t.val_fraction.unwrap_or(0.15),
            dual_updates: true,
        })
    }

    pub fn constraint_set(&self, quant: &QuantSpec) -> Result<ConstraintSet> {
        let mut set = ConstraintSet::from_quant_spec(quant)?;
        if let Some(eps) = self.constraints.eps_layer {
            set.set_all_layer_eps(eps);
        }
        if let Some(eps) = self.constraints.eps_out {
            set.eps_out = eps;
        }
        if let Some(norm) = self.constraints.mse_norm {
            set.mse_norm = norm;
        }
        if let Some(floor) = self.constraints.log_floor {
            set.log_floor = floor;
        }
        set.validate()?;
        Ok(set)
    }

    /// Resolved output directory: the environment override wins.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var(OUT_DIR_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&self.output.dir),
        }
    }

    /// Load or generate the `(train, test)` datasets this run works on.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let section = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [data] section".into()))?;
        section.load(self.train.seed)
    }
}

impl DataSection {
    fn validate(&self) -> Result<()> {
        match self.kind.as_str() {
            "blobs" | "spirals" => Ok(()),
            "csv" => {
                if self.path.is_none() || self.label_column.is_none() {
                    return Err(Error::Config("csv data needs path and label_column".into()));
                }
                Ok(())
            }
            "idx" => {
                if self.train_images.is_none() || self.train_labels.is_none() {
                    return Err(Error::Config(
                        "idx data needs train_images and train_labels".into(),
                    ));
                }
                Ok(())
            }
            other => Err(Error::Config(format!(
                "unknown data kind {other:?} (expected blobs, spirals, csv, idx)"
            ))),
        }
    }

    fn load(&self, train_seed: u64) -> Result<(Dataset, Dataset)> {
        let seed = self.seed.unwrap_or(train_seed);
        let test_fraction = self.test_fraction.unwrap_or(0.2);
        if !(0.0 < test_fraction && test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let (mut train, mut test) = match self.kind.as_str() {
            "blobs" | "spirals" => {
                let kind = if self.kind == "blobs" {
                    SyntheticKind::Blobs
                } else {
                    SyntheticKind::Spirals
                };
                let full = data::gen_synthetic(
                    kind,
                    self.n_per_class.unwrap_or(500),
                    self.classes.unwrap_or(2),
                    self.noise.unwrap_or(0.5),
                    seed,
                )?;
                let test_len = ((full.len() as f64) * test_fraction).round() as usize;
                let test_len = test_len.clamp(1, full.len() - 1);
                full.split(test_len, data::derive_seed(seed, 0x74657374))?
            }
            "csv" => {
                let full = data::load_csv(
                    Path::new(self.path.as_ref().unwrap()),
                    self.label_column.as_ref().unwrap(),
                )?;
                let test_len = ((full.len() as f64) * test_fraction).round() as usize;
                let test_len = test_len.clamp(1, full.len() - 1);
                full.split(test_len, data::derive_seed(seed, 0x74657374))?
            }
            "idx" => {
                let train = data::load_idx(
                    Path::new(self.train_images.as_ref().unwrap()),
                    Path::new(self.train_labels.as_ref().unwrap()),
                )?;
                match (&self.test_images, &self.test_labels) {
                    (Some(ti), Some(tl)) => (train, data::load_idx(Path::new(ti), Path::new(tl))?),
                    _ => {
                        let test_len = (((train.len() as f64) * test_fraction).round() as usize)
                            .clamp(1, train.len() - 1);
                        train.split(test_len, data::derive_seed(seed, 0x74657374))?
                    }
                }
            }
            _ => unreachable!("validated kinds"),
        };
        if self.normalize.unwrap_or(false) {
            let norm = data::fit_standardization(&train);
            data::apply_standardization(&mut train, &norm);
            data::apply_standardization(&mut test, &norm);
        }
        Ok((train, test))
    }
}
