//! Convolutional feature extractor producing the feature map fed to patching.
//!
//! A small stack of strided convolutions stands in for a large pretrained
//! CNN. Precomputed feature maps from any external network can be injected
//! through [`load_feature_map`].

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sgt;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// An input image `[C×H×W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub data: Tensor,
    pub label: Option<usize>,
}

impl Image {
    pub fn new(data: Tensor, label: Option<usize>) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::contract(format!("image must be C×H×W, got {:?}", data.shape())));
        }
        Ok(Image { data, label })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Spatial activations `[D×H'×W']` with `H' = H / stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::contract(format!("feature map must be D×H×W, got {:?}", data.shape())));
        }
        if stride == 0 {
            return Err(Error::contract("feature map stride must be positive"));
        }
        Ok(FeatureMap { data, stride })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Defaults to `kernel / 2`.
    #[serde(default)]
    pub padding: Option<usize>,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

impl ConvLayerSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, activation: Activation) -> Self {
        ConvLayerSpec {
            out_channels,
            kernel,
            stride,
            activation,
            padding: None,
        }
    }

    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: Vec<ConvLayerSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: vec![
                ConvLayerSpec::new(16, 3, 2, Activation::Relu),
                ConvLayerSpec::new(32, 3, 2, Activation::Relu),
                ConvLayerSpec::new(64, 3, 1, Activation::Relu),
            ],
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Checks every layer maps `H` to exactly `H / stride`, so the whole
    /// stack maps `H×W` to `H/s × W/s`. Returns the per-layer output extents.
    pub fn validate(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        if self.layers.is_empty() {
            return Err(Error::config("backbone.layers: at least one layer is required"));
        }
        let s = self.total_stride();
        if s == 0 || height % s != 0 || width % s != 0 {
            return Err(Error::config(format!(
                "backbone: input {height}x{width} is not divisible by total stride {s}"
            )));
        }
        let (mut h, mut w) = (height, width);
        let mut extents = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::config(format!(
                    "backbone.layers[{i}]: out_channels, kernel and stride must be positive"
                )));
            }
            let p = l.padding();
            if l.kernel > h + 2 * p || l.kernel > w + 2 * p {
                return Err(Error::config(format!(
                    "backbone.layers[{i}]: kernel {} exceeds padded input {}x{}",
                    l.kernel,
                    h + 2 * p,
                    w + 2 * p
                )));
            }
            let ho = (h + 2 * p - l.kernel) / l.stride + 1;
            let wo = (w + 2 * p - l.kernel) / l.stride + 1;
            if h % l.stride != 0 || w % l.stride != 0 || ho != h / l.stride || wo != w / l.stride {
                return Err(Error::config(format!(
                    "backbone.layers[{i}]: {h}x{w} -> {ho}x{wo} does not divide evenly by stride {} \
                     (input {height}x{width}, total stride {s})",
                    l.stride
                )));
            }
            h = ho;
            w = wo;
            extents.push((h, w));
        }
        Ok(extents)
    }
}

/// Registered backbone parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    /// Registers `backbone.conv{i}.weight` / `.bias` with He-normal weights
    /// and zero biases.
    pub fn init(
        config: &BackboneConfig,
        in_channels: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut cin = in_channels;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, l) in config.layers.iter().enumerate() {
            let fan_in = (cin * l.kernel * l.kernel) as f64;
            let w = Tensor::randn(&[l.out_channels, cin, l.kernel, l.kernel], (2.0 / fan_in).sqrt(), rng);
            let wid = store.insert(format!("backbone.conv{i}.weight"), w)?;
            let bid = store.insert(format!("backbone.conv{i}.bias"), Tensor::zeros(&[l.out_channels]))?;
            layers.push((wid, bid));
            cin = l.out_channels;
        }
        Ok(Backbone {
            config: config.clone(),
            layers,
        })
    }

    /// Looks up already-registered parameters.
    pub fn bind(config: &BackboneConfig, store: &ParamStore) -> Result<Self> {
        let layers = (0..config.layers.len())
            .map(|i| {
                let w = lookup(store, &format!("backbone.conv{i}.weight"))?;
                let b = lookup(store, &format!("backbone.conv{i}.bias"))?;
                Ok((w, b))
            })
            .collect::<Result<_>>()?;
        Ok(Backbone {
            config: config.clone(),
            layers,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (spec, &(w, b)) in self.config.layers.iter().zip(&self.layers) {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            h = tape.conv2d(h, w, Some(b), spec.stride, spec.padding())?;
            if spec.activation == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Runs the stack on one image outside of any training context.
    pub fn extract_features(&self, img: &Image, store: &ParamStore) -> Result<FeatureMap> {
        self.config.validate(img.height(), img.width())?;
        let mut tape = Tape::new();
        let x = tape.constant(img.data.clone());
        let out = self.forward(&mut tape, store, x)?;
        FeatureMap::new(tape.value(out).clone(), self.config.total_stride())
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
}

/// Writes a feature map as a rank-3 SGT file.
pub fn save_feature_map(path: impl AsRef<Path>, fm: &FeatureMap) -> Result<()> {
    sgt::write_sgt(path, &fm.data)
}

/// Loads a rank-3 SGT file as a feature map.
///
/// The SGT container carries no metadata, so the map is taken to be its own
/// input grid (stride 1); use [`load_feature_map_with_stride`] when the
/// producing network's stride matters.
pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    load_feature_map_with_stride(path, 1)
}

pub fn load_feature_map_with_stride(path: impl AsRef<Path>, stride: usize) -> Result<FeatureMap> {
    let path = path.as_ref();
    let t = sgt::read_sgt(path)?;
    if t.rank() != 3 {
        return Err(Error::format(path, format!("feature map must be rank 3, found rank {}", t.rank())));
    }
    FeatureMap::new(t, stride)
}
