//! The assembled classifier and its ablation variants.
//!
//! ```text
//! image → backbone → unfold(k) → patch graph → GAT stack → bridge
//!       → + P → encoder blocks → mean pool → linear → softmax
//! ```
//!
//! `no_transformer` pools the GAT output directly, `no_gat` feeds patch rows
//! straight to the bridge, and `no_backbone` cuts the raw image into 4×4
//! patches.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Image};
use crate::error::{Error, Result};
use crate::gat::{GatStack, GatStackConfig, LayerAttention};
use crate::graph::{build_graph, NeighborhoodMode, NeighborhoodSpec, PatchGraph, SigmaSq};
use crate::params::{ParamId, ParamStore};
use crate::patching::{unfold_var, PatchGrid, PatchMatrix};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{Encoder, HeadParams, TransformerConfig};

/// Patch size used when the backbone is removed.
pub const RAW_PATCH_SIZE: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoTransformer,
    NoGat,
    NoBackbone,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoTransformer,
        Ablation::NoGat,
        Ablation::NoBackbone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTransformer => "no_transformer",
            Ablation::NoGat => "no_gat",
            Ablation::NoBackbone => "no_backbone",
        }
    }

    pub fn has_backbone(self) -> bool {
        self != Ablation::NoBackbone
    }

    pub fn has_gat(self) -> bool {
        self != Ablation::NoGat
    }

    pub fn has_transformer(self) -> bool {
        self != Ablation::NoTransformer
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "ablation must be one of full, no_transformer, no_gat, no_backbone; got `{s}`"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub mode: NeighborhoodMode,
    pub knn_k: usize,
    pub sigma_sq: SigmaSq,
}

impl Default for GraphConfig {
    fn default() -> Self {
        let spec = NeighborhoodSpec::default();
        GraphConfig {
            mode: spec.mode,
            knn_k: spec.knn_k,
            sigma_sq: SigmaSq::Auto,
        }
    }
}

impl GraphConfig {
    pub fn spec(&self) -> NeighborhoodSpec {
        NeighborhoodSpec {
            mode: self.mode,
            knn_k: self.knn_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub ablation: Ablation,
    pub backbone: BackboneConfig,
    pub graph: GraphConfig,
    pub gat: GatStackConfig,
    pub transformer: TransformerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            height: 32,
            width: 32,
            num_classes: 2,
            patch_size: 4,
            ablation: Ablation::Full,
            backbone: BackboneConfig::default(),
            graph: GraphConfig::default(),
            gat: GatStackConfig::default(),
            transformer: TransformerConfig::default(),
        }
    }
}

/// Shapes implied by a validated [`ModelConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    /// Channels and extents of the map that gets patched.
    pub map: (usize, usize, usize),
    pub grid: PatchGrid,
    /// Width of one patch row, `D·k²`.
    pub patch_dim: usize,
    /// Width of the tokens entering the bridge or the pooling step.
    pub node_dim: usize,
}

impl Geometry {
    pub fn num_nodes(&self) -> usize {
        self.grid.num_nodes()
    }
}

impl ModelConfig {
    /// Patch size after the ablation has had its say.
    pub fn effective_patch_size(&self) -> usize {
        if self.ablation.has_backbone() {
            self.patch_size
        } else {
            RAW_PATCH_SIZE
        }
    }

    /// Checks the whole dimension chain and returns the implied shapes.
    pub fn validate(&self) -> Result<Geometry> {
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("model.in_channels, model.height and model.width must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("model.num_classes must be >= 2, got {}", self.num_classes)));
        }
        let map = if self.ablation.has_backbone() {
            self.backbone.validate(self.height, self.width)?;
            let s = self.backbone.total_stride();
            (self.backbone.out_channels(), self.height / s, self.width / s)
        } else {
            (self.in_channels, self.height, self.width)
        };
        let k = self.effective_patch_size();
        let grid = PatchGrid::new(map.0, map.1, map.2, k)
            .map_err(|e| Error::config(format!("model.patch_size: {}", strip_config(&e))))?;
        let patch_dim = grid.feature_dim();
        let node_dim = if self.ablation.has_gat() {
            self.gat.validate(patch_dim)?;
            if self.graph.mode == NeighborhoodMode::Knn
                && (self.graph.knn_k == 0 || self.graph.knn_k >= grid.num_nodes())
            {
                return Err(Error::config(format!(
                    "graph.knn_k must be in 1..{} for a {}x{} patch grid, got {}",
                    grid.num_nodes(),
                    grid.rows,
                    grid.cols,
                    self.graph.knn_k
                )));
            }
            self.gat.d_out
        } else {
            patch_dim
        };
        if self.ablation.has_transformer() {
            self.transformer.validate()?;
        }
        Ok(Geometry {
            map,
            grid,
            patch_dim,
            node_dim,
        })
    }
}

fn strip_config(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Everything one forward pass exposes besides the logits.
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Pooled representation `z`, `[1×d]`.
    pub pooled: Var,
    /// Final per-node tokens before pooling.
    pub tokens: Var,
    pub graph: Option<PatchGraph>,
    pub gat_attention: Vec<LayerAttention>,
    /// Per encoder block, per head, the `[n×n]` attention matrix.
    pub encoder_attention: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct SagVit {
    pub config: ModelConfig,
    pub geometry: Geometry,
    backbone: Option<Backbone>,
    gat: Option<GatStack>,
    bridge: Option<(ParamId, ParamId)>,
    encoder: Option<Encoder>,
    head: HeadParams,
}

impl SagVit {
    /// Registers a freshly initialized model in `store`.
    pub fn init(config: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let geometry = config.validate()?;
        let n = geometry.num_nodes();
        let backbone = match config.ablation.has_backbone() {
            true => Some(Backbone::init(&config.backbone, config.in_channels, store, rng)?),
            false => None,
        };
        let gat = match config.ablation.has_gat() {
            true => Some(GatStack::init(&config.gat, geometry.patch_dim, store, rng)?),
            false => None,
        };
        let (bridge, encoder, head_dim) = if config.ablation.has_transformer() {
            let d_model = config.transformer.d_model;
            let bridge = if geometry.node_dim != d_model {
                let bound = (6.0 / (geometry.node_dim + d_model) as f64).sqrt();
                Some((
                    store.insert("bridge.weight", Tensor::uniform(&[d_model, geometry.node_dim], bound, rng))?,
                    store.insert("bridge.bias", Tensor::zeros(&[d_model]))?,
                ))
            } else {
                None
            };
            let encoder = Encoder::init(&config.transformer, n, store, rng)?;
            (bridge, Some(encoder), d_model)
        } else {
            (None, None, geometry.node_dim)
        };
        let head = HeadParams::init(head_dim, config.num_classes, store, rng)?;
        Ok(SagVit {
            config: config.clone(),
            geometry,
            backbone,
            gat,
            bridge,
            encoder,
            head,
        })
    }

    /// Binds to parameters already present in `store` (e.g. a checkpoint).
    pub fn bind(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let geometry = config.validate()?;
        let n = geometry.num_nodes();
        let backbone = match config.ablation.has_backbone() {
            true => Some(Backbone::bind(&config.backbone, store)?),
            false => None,
        };
        let gat = match config.ablation.has_gat() {
            true => Some(GatStack::bind(&config.gat, geometry.patch_dim, store)?),
            false => None,
        };
        let (bridge, encoder) = if config.ablation.has_transformer() {
            let bridge = match geometry.node_dim != config.transformer.d_model {
                true => Some((
                    crate::backbone::lookup(store, "bridge.weight")?,
                    crate::backbone::lookup(store, "bridge.bias")?,
                )),
                false => None,
            };
            (bridge, Some(Encoder::bind(&config.transformer, n, store)?))
        } else {
            (None, None)
        };
        let model = SagVit {
            config: config.clone(),
            geometry,
            backbone,
            gat,
            bridge,
            encoder,
            head: HeadParams::bind(config.num_classes, store)?,
        };
        model.check_shapes(store)?;
        Ok(model)
    }

    fn check_shapes(&self, store: &ParamStore) -> Result<()> {
        let mut scratch = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        SagVit::init(&self.config, &mut scratch, &mut rng)?;
        if scratch.len() != store.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: configuration defines {} tensors, store holds {}",
                scratch.len(),
                store.len()
            )));
        }
        for (_, p) in scratch.iter() {
            let have = store
                .by_name(&p.name)
                .ok_or_else(|| Error::config(format!("missing parameter `{}`", p.name)))?;
            if have.shape() != p.value.shape() {
                return Err(Error::shape(
                    "parameter shape vs configuration",
                    have.shape(),
                    p.value.shape(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Backbone and unfold: the `[|V|×D·k²]` patch rows of one image.
    pub fn patches(&self, tape: &mut Tape, store: &ParamStore, img: &Image) -> Result<(Var, PatchGrid)> {
        let c = &self.config;
        if img.channels() != c.in_channels || img.height() != c.height || img.width() != c.width {
            return Err(Error::shape(
                "model input",
                img.data.shape(),
                &[c.in_channels, c.height, c.width],
            ));
        }
        let x = tape.constant(img.data.clone());
        let map = match &self.backbone {
            Some(b) => b.forward(tape, store, x)?,
            None => x,
        };
        unfold_var(tape, map, self.config.effective_patch_size())
    }

    /// Builds the patch graph from the current patch values. The graph's
    /// weights are constants as far as gradients are concerned.
    pub fn graph_for(&self, tape: &Tape, x: Var, grid: PatchGrid) -> Result<Option<PatchGraph>> {
        if self.gat.is_none() {
            return Ok(None);
        }
        let pm = PatchMatrix {
            x: tape.value(x).clone(),
            grid,
        };
        build_graph(&pm, self.config.graph.spec(), self.config.graph.sigma_sq).map(Some)
    }

    pub fn forward_full(&self, tape: &mut Tape, store: &ParamStore, img: &Image) -> Result<Forward> {
        let (x, grid) = self.patches(tape, store, img)?;
        let graph = self.graph_for(tape, x, grid)?;
        let mut fwd = self.forward_nodes(tape, store, graph.as_ref(), x)?;
        fwd.graph = graph;
        Ok(fwd)
    }

    /// Everything after graph construction: `x` holds one row per node of
    /// `graph` (which may be `None` only when the GAT is ablated).
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: Option<&PatchGraph>,
        x: Var,
    ) -> Result<Forward> {
        let (mut h, gat_attention) = match (&self.gat, graph) {
            (Some(gat), Some(g)) => gat.forward(tape, store, g, x)?,
            (Some(_), None) => return Err(Error::contract("GAT stage requires a patch graph")),
            (None, _) => (x, Vec::new()),
        };
        if let Some((w, b)) = self.bridge {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            h = tape.linear(h, w, Some(b))?;
        }
        let (tokens, pooled, encoder_attention) = match &self.encoder {
            Some(enc) => {
                let h = enc.add_position(tape, store, h)?;
                if enc.config.pool_first {
                    let z = tape.mean_rows(h)?;
                    let (z, maps) = enc.blocks_forward(tape, store, z)?;
                    (h, z, maps)
                } else {
                    let (t, maps) = enc.blocks_forward(tape, store, h)?;
                    let z = tape.mean_rows(t)?;
                    (t, z, maps)
                }
            }
            None => (h, tape.mean_rows(h)?, Vec::new()),
        };
        let logits = self.head.logits(tape, store, pooled)?;
        Ok(Forward {
            logits,
            pooled,
            tokens,
            graph: None,
            gat_attention,
            encoder_attention,
        })
    }

    /// Cross-entropy of one labelled image.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, img: &Image, label: usize) -> Result<Var> {
        let f = self.forward_full(tape, store, img)?;
        tape.cross_entropy(f.logits, &[label])
    }

    /// Class probabilities of one image.
    pub fn predict(&self, store: &ParamStore, img: &Image) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = self.forward_full(&mut tape, store, img)?;
        let p = tape.softmax(f.logits, 1)?;
        Ok(tape.value(p).data().to_vec())
    }

    /// Matrix-product FLOPs of one forward pass, following the same
    /// convention as [`Tape::flops`].
    pub fn flops(&self) -> u64 {
        let c = &self.config;
        let g = &self.geometry;
        let n = g.num_nodes();
        let mut total = 0u64;
        if self.backbone.is_some() {
            let extents = c.backbone.validate(c.height, c.width).expect("validated at construction");
            let mut cin = c.in_channels;
            for (l, (ho, wo)) in c.backbone.layers.iter().zip(extents) {
                total += 2 * (l.out_channels * cin * l.kernel * l.kernel * ho * wo) as u64;
                cin = l.out_channels;
            }
        }
        if let Some(gat) = &self.gat {
            total += gat.flops(n);
        }
        if self.bridge.is_some() {
            total += 2 * (n * g.node_dim * c.transformer.d_model) as u64;
        }
        let head_in = match &self.encoder {
            Some(enc) => {
                total += enc.flops(if c.transformer.pool_first { 1 } else { n });
                c.transformer.d_model
            }
            None => g.node_dim,
        };
        total + 2 * (head_in * c.num_classes) as u64
    }
}
