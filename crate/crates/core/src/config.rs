//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! ablation = "full"            # full | no_transformer | no_gat | no_backbone
//!
//! [input]                      # in_channels, height, width, num_classes
//! [backbone]                   # layers = [{ out_channels = 16, kernel = 3, stride = 2 }, ...]
//! [patching]                   # k
//! [graph]                      # mode = "moore" | "knn", knn_k, sigma_sq = "auto" | number
//! [gat]                        # d_in, d_hidden, d_out, layers, heads, first_layer, ...
//! [transformer]                # d_model, heads, layers, d_ff, pos_encoding, pool_first
//! [optim]                      # lr0, weight_decay, ..., batch_size, total_epochs
//! [dataset]                    # kind = "synthetic" | "cifar10" | "sgt_dir", ...
//! ```
//!
//! Every section is optional. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{self, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gat::GatStackConfig;
use crate::model::{Ablation, Geometry, GraphConfig, ModelConfig, SagVit};
use crate::params::ParamStore;
use crate::train::OptimSpec;
use crate::transformer::TransformerConfig;

/// Batch size used for the raw-patch ablation unless set explicitly.
pub const NO_BACKBONE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        InputConfig {
            in_channels: m.in_channels,
            height: m.height,
            width: m.width,
            num_classes: m.num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchingConfig {
    pub k: usize,
}

impl Default for PatchingConfig {
    fn default() -> Self {
        PatchingConfig { k: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        split: Split,
        /// Use only the first `limit` images.
        #[serde(default)]
        limit: Option<usize>,
    },
    SgtDir {
        dir: PathBuf,
    },
}

fn default_classes() -> usize {
    SyntheticSpec::default().classes
}
fn default_per_class() -> usize {
    SyntheticSpec::default().per_class
}
fn default_size() -> usize {
    SyntheticSpec::default().size
}
fn default_channels() -> usize {
    SyntheticSpec::default().channels
}
fn default_noise() -> f64 {
    SyntheticSpec::default().noise
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: default_classes(),
            per_class: default_per_class(),
            size: default_size(),
            channels: default_channels(),
            noise: default_noise(),
            seed: None,
        }
    }
}

/// The `[optim]` section: the optimizer spec with an optional batch size
/// whose default depends on the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub clip_norm: f64,
    pub batch_size: Option<usize>,
    pub decoupled_weight_decay: bool,
    pub stop_at_macro_f1: Option<f64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        let o = OptimSpec::default();
        OptimSection {
            lr0: o.lr0,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            warmup_epochs: o.warmup_epochs,
            total_epochs: o.total_epochs,
            clip_norm: o.clip_norm,
            batch_size: None,
            decoupled_weight_decay: o.decoupled_weight_decay,
            stop_at_macro_f1: o.stop_at_macro_f1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub input: InputConfig,
    pub backbone: BackboneConfig,
    pub patching: PatchingConfig,
    pub graph: GraphConfig,
    pub gat: GatStackConfig,
    pub transformer: TransformerConfig,
    pub optim: OptimSection,
    pub dataset: DatasetSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.input.in_channels,
            height: self.input.height,
            width: self.input.width,
            num_classes: self.input.num_classes,
            patch_size: self.patching.k,
            ablation: self.ablation,
            backbone: self.backbone.clone(),
            graph: self.graph,
            gat: self.gat.clone(),
            transformer: self.transformer.clone(),
        }
    }

    pub fn optim(&self) -> OptimSpec {
        let o = &self.optim;
        let default_batch = match self.ablation {
            Ablation::NoBackbone => NO_BACKBONE_BATCH,
            _ => OptimSpec::default().batch_size,
        };
        OptimSpec {
            lr0: o.lr0,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            warmup_epochs: o.warmup_epochs,
            total_epochs: o.total_epochs,
            clip_norm: o.clip_norm,
            batch_size: o.batch_size.unwrap_or(default_batch),
            decoupled_weight_decay: o.decoupled_weight_decay,
            stop_at_macro_f1: o.stop_at_macro_f1,
        }
    }

    /// Side length the synthetic images must be a multiple of.
    pub fn spatial_multiple(&self) -> usize {
        let m = self.model();
        match self.ablation {
            Ablation::NoBackbone => m.effective_patch_size(),
            _ => m.backbone.total_stride() * m.effective_patch_size(),
        }
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<Geometry> {
        let geometry = self.model().validate()?;
        self.optim().validate()?;
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                size,
                channels,
                ..
            } => {
                if *classes != self.input.num_classes {
                    return Err(Error::config(format!(
                        "dataset.classes ({classes}) differs from input.num_classes ({})",
                        self.input.num_classes
                    )));
                }
                if *size != self.input.height || *size != self.input.width || *channels != self.input.in_channels {
                    return Err(Error::config(format!(
                        "dataset produces {channels}x{size}x{size} images, input expects {}x{}x{}",
                        self.input.in_channels, self.input.height, self.input.width
                    )));
                }
            }
            DatasetSpec::Cifar10 { .. } => {
                if self.input.in_channels != 3 || self.input.height != 32 || self.input.width != 32 {
                    return Err(Error::config("CIFAR-10 images are 3x32x32; set input accordingly"));
                }
                if self.input.num_classes != 10 {
                    return Err(Error::config("CIFAR-10 has 10 classes; set input.num_classes = 10"));
                }
            }
            DatasetSpec::SgtDir { .. } => {}
        }
        Ok(geometry)
    }

    /// Freshly initialized model; parameters depend only on `seed`.
    pub fn init_model(&self) -> Result<(SagVit, ParamStore)> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let model = SagVit::init(&self.model(), &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let data = match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                size,
                channels,
                noise,
                seed,
            } => data::gen_synthetic(
                &SyntheticSpec {
                    classes: *classes,
                    per_class: *per_class,
                    size: *size,
                    channels: *channels,
                    noise: *noise,
                    seed: seed.unwrap_or(self.seed),
                },
                self.spatial_multiple(),
            )?,
            DatasetSpec::Cifar10 { dir, split, limit } => {
                let d = data::load_cifar10(dir, *split)?;
                match limit {
                    Some(n) => d.take(*n),
                    None => d,
                }
            }
            DatasetSpec::SgtDir { dir } => data::load_sgt_dir(dir, self.input.num_classes)?,
        };
        if let Some(shape) = data.image_shape() {
            let want = [self.input.in_channels, self.input.height, self.input.width];
            if shape != want {
                return Err(Error::shape("dataset images vs input", shape, &want));
            }
        }
        Ok(data)
    }
}
