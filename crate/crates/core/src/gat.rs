//! Multi-head graph attention over patch graphs, plus the mean-aggregating
//! graph convolution that can open the stack.
//!
//! For head `i`, node `u` attends over its neighbours `v ∈ N(u)` with
//!
//! ```text
//! e_uv = LeakyReLU(a_srcᵀ W x_u + a_dstᵀ W x_v)      (= aᵀ [W x_u ‖ W x_v])
//! α_uv = softmax_v(e_uv)
//! x'_u = ReLU(Σ_v α_uv W x_v)
//! ```
//!
//! and the heads' outputs are concatenated.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::lookup;
use crate::error::{Error, Result};
use crate::graph::PatchGraph;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstLayer {
    #[default]
    Graphconv,
    Gat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatStackConfig {
    /// Input width. Derived from the patch features when absent; when given
    /// it must agree with them.
    pub d_in: Option<usize>,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Number of GAT layers (hidden layers plus the output layer).
    pub layers: usize,
    pub heads: usize,
    pub first_layer: FirstLayer,
    pub leaky_slope: f64,
    /// Let every node attend to itself as well as its neighbours.
    pub self_loops: bool,
    /// Add `ln w_uv` from the similarity weights to the attention scores.
    pub use_edge_weight_bias: bool,
}

impl Default for GatStackConfig {
    fn default() -> Self {
        GatStackConfig {
            d_in: None,
            d_hidden: 64,
            d_out: 64,
            layers: 2,
            heads: 4,
            first_layer: FirstLayer::Graphconv,
            leaky_slope: 0.2,
            self_loops: false,
            use_edge_weight_bias: false,
        }
    }
}

impl GatStackConfig {
    pub fn validate(&self, d_in: usize) -> Result<()> {
        if let Some(declared) = self.d_in {
            if declared != d_in {
                return Err(Error::config(format!(
                    "gat.d_in: patch features have width {d_in}, config declares {declared}"
                )));
            }
        }
        if self.layers == 0 {
            return Err(Error::config("gat.layers must be >= 1"));
        }
        if self.heads == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return Err(Error::config("gat.heads, gat.d_hidden and gat.d_out must be positive"));
        }
        if self.d_hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "gat.d_hidden ({}) must be divisible by gat.heads ({})",
                self.d_hidden, self.heads
            )));
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::config("gat.leaky_slope must be >= 0"));
        }
        Ok(())
    }

    /// Message-passing depth of the stack: the opening layer plus
    /// `layers` GAT layers.
    pub fn hops(&self) -> usize {
        self.layers + 1
    }
}

/// Parameters of one multi-head GAT layer.
#[derive(Clone, Debug)]
pub struct GatLayerParams {
    /// Per head: `W [F'×D_in]` and `a [2F']`.
    pub heads: Vec<(ParamId, ParamId)>,
    pub d_in: usize,
    pub out_per_head: usize,
    pub leaky_slope: f64,
    pub self_loops: bool,
    pub use_edge_weight_bias: bool,
}

impl GatLayerParams {
    pub fn init(
        prefix: &str,
        d_in: usize,
        out_per_head: usize,
        heads: usize,
        cfg: &GatStackConfig,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound_w = (6.0 / (d_in + out_per_head) as f64).sqrt();
        let bound_a = (6.0 / (2 * out_per_head + 1) as f64).sqrt();
        let ids = (0..heads)
            .map(|h| {
                let w = store.insert(
                    format!("{prefix}.head{h}.weight"),
                    Tensor::uniform(&[out_per_head, d_in], bound_w, rng),
                )?;
                let a = store.insert(
                    format!("{prefix}.head{h}.attn"),
                    Tensor::uniform(&[2 * out_per_head], bound_a, rng),
                )?;
                Ok((w, a))
            })
            .collect::<Result<_>>()?;
        Ok(Self::with_ids(ids, d_in, out_per_head, cfg))
    }

    pub fn bind(
        prefix: &str,
        d_in: usize,
        out_per_head: usize,
        heads: usize,
        cfg: &GatStackConfig,
        store: &ParamStore,
    ) -> Result<Self> {
        let ids = (0..heads)
            .map(|h| {
                Ok((
                    lookup(store, &format!("{prefix}.head{h}.weight"))?,
                    lookup(store, &format!("{prefix}.head{h}.attn"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self::with_ids(ids, d_in, out_per_head, cfg))
    }

    fn with_ids(heads: Vec<(ParamId, ParamId)>, d_in: usize, out_per_head: usize, cfg: &GatStackConfig) -> Self {
        GatLayerParams {
            heads,
            d_in,
            out_per_head,
            leaky_slope: cfg.leaky_slope,
            self_loops: cfg.self_loops,
            use_edge_weight_bias: cfg.use_edge_weight_bias,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.out_per_head
    }
}

/// Attention coefficients of one layer, per head, aligned with `edges`
/// (`(u, v)`: node `u` attends to `v`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAttention {
    pub layer: String,
    pub edges: Vec<(usize, usize)>,
    pub alphas: Vec<Vec<f64>>,
}

/// The pairs each node attends over: graph edges, then self-loops if enabled.
fn attention_edges(g: &PatchGraph, self_loops: bool) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut pairs: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.u, e.v)).collect();
    let mut log_w: Vec<f64> = g.edges.iter().map(|e| e.weight.ln()).collect();
    if self_loops {
        pairs.extend((0..g.num_nodes).map(|u| (u, u)));
        log_w.extend(std::iter::repeat_n(0.0, g.num_nodes));
    }
    (pairs, log_w)
}

/// One multi-head GAT layer. Nodes without neighbours aggregate the zero
/// vector and have no coefficients.
pub fn gat_attention(
    tape: &mut Tape,
    store: &ParamStore,
    g: &PatchGraph,
    x: Var,
    params: &GatLayerParams,
    name: &str,
) -> Result<(Var, LayerAttention)> {
    let n = g.num_nodes;
    let s = tape.shape(x).to_vec();
    if s != [n, params.d_in] {
        return Err(Error::shape("gat_attention", &s, &[n, params.d_in]));
    }
    let f = params.out_per_head;
    let (pairs, log_w) = attention_edges(g, params.self_loops);
    let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let segments = Arc::new(src.clone());

    let mut outputs = Vec::with_capacity(params.heads.len());
    let mut alphas = Vec::with_capacity(params.heads.len());
    for &(wid, aid) in &params.heads {
        let w = tape.param(store, wid);
        let h = tape.linear(x, w, None)?;
        if pairs.is_empty() {
            outputs.push(tape.constant(Tensor::zeros(&[n, f])));
            alphas.push(Vec::new());
            continue;
        }
        let a = tape.param(store, aid);
        let a_src = tape.gather(a, Arc::new((0..f).collect()), &[f, 1])?;
        let a_dst = tape.gather(a, Arc::new((f..2 * f).collect()), &[f, 1])?;
        let s_src = tape.matmul(h, a_src)?;
        let s_dst = tape.matmul(h, a_dst)?;
        let e_src = tape.gather(s_src, Arc::new(src.clone()), &[pairs.len()])?;
        let e_dst = tape.gather(s_dst, Arc::new(dst.clone()), &[pairs.len()])?;
        let raw = tape.add(e_src, e_dst)?;
        let mut scores = tape.leaky_relu(raw, params.leaky_slope)?;
        if params.use_edge_weight_bias {
            let bias = tape.constant(Tensor::new(vec![pairs.len()], log_w.clone())?);
            scores = tape.add(scores, bias)?;
        }
        let alpha = tape.segment_softmax(scores, segments.clone())?;
        alphas.push(tape.value(alpha).data().to_vec());
        let messages = tape.gather_rows(h, &dst)?;
        let weighted = tape.mul_rows(messages, alpha)?;
        let agg = tape.scatter_add_rows(weighted, &src, n)?;
        outputs.push(tape.relu(agg));
    }
    let out = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat_cols(&outputs)?
    };
    Ok((
        out,
        LayerAttention {
            layer: name.to_string(),
            edges: pairs,
            alphas,
        },
    ))
}

/// `x'_u = W · mean_{v ∈ N(u) ∪ {u}} x_v`, with `W [d_out×d_in]`.
pub fn graph_conv(tape: &mut Tape, g: &PatchGraph, x: Var, weight: Var) -> Result<Var> {
    let n = g.num_nodes;
    let neighbors = g.neighbors();
    let mut members = Vec::with_capacity(n + g.edges.len());
    let mut targets = Vec::with_capacity(n + g.edges.len());
    let mut scale = Vec::with_capacity(n + g.edges.len());
    for (u, nb) in neighbors.iter().enumerate() {
        let inv = 1.0 / (nb.len() + 1) as f64;
        for &v in std::iter::once(&u).chain(nb) {
            members.push(v);
            targets.push(u);
            scale.push(inv);
        }
    }
    let gathered = tape.gather_rows(x, &members)?;
    let scale = tape.constant(Tensor::new(vec![scale.len()], scale)?);
    let scaled = tape.mul_rows(gathered, scale)?;
    let mean = tape.scatter_add_rows(scaled, &targets, n)?;
    tape.linear(mean, weight, None)
}

#[derive(Clone, Debug)]
enum Opening {
    GraphConv(ParamId),
    Gat(GatLayerParams),
}

/// The full node-encoding stack: opening layer, `layers − 1` hidden GAT
/// layers, and a single-head output GAT layer of width `d_out`.
#[derive(Clone, Debug)]
pub struct GatStack {
    pub config: GatStackConfig,
    pub d_in: usize,
    opening: Opening,
    hidden: Vec<GatLayerParams>,
    output: GatLayerParams,
}

impl GatStack {
    pub fn init(cfg: &GatStackConfig, d_in: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(d_in)?;
        let per_head = cfg.d_hidden / cfg.heads;
        let opening = match cfg.first_layer {
            FirstLayer::Graphconv => {
                let bound = (6.0 / (d_in + cfg.d_hidden) as f64).sqrt();
                Opening::GraphConv(store.insert(
                    "gat.graphconv.weight",
                    Tensor::uniform(&[cfg.d_hidden, d_in], bound, rng),
                )?)
            }
            FirstLayer::Gat => Opening::Gat(GatLayerParams::init("gat.in", d_in, per_head, cfg.heads, cfg, store, rng)?),
        };
        let hidden = (0..cfg.layers - 1)
            .map(|l| GatLayerParams::init(&format!("gat.hidden{l}"), cfg.d_hidden, per_head, cfg.heads, cfg, store, rng))
            .collect::<Result<_>>()?;
        let output = GatLayerParams::init("gat.out", cfg.d_hidden, cfg.d_out, 1, cfg, store, rng)?;
        Ok(GatStack {
            config: cfg.clone(),
            d_in,
            opening,
            hidden,
            output,
        })
    }

    pub fn bind(cfg: &GatStackConfig, d_in: usize, store: &ParamStore) -> Result<Self> {
        cfg.validate(d_in)?;
        let per_head = cfg.d_hidden / cfg.heads;
        let opening = match cfg.first_layer {
            FirstLayer::Graphconv => Opening::GraphConv(lookup(store, "gat.graphconv.weight")?),
            FirstLayer::Gat => Opening::Gat(GatLayerParams::bind("gat.in", d_in, per_head, cfg.heads, cfg, store)?),
        };
        let hidden = (0..cfg.layers - 1)
            .map(|l| GatLayerParams::bind(&format!("gat.hidden{l}"), cfg.d_hidden, per_head, cfg.heads, cfg, store))
            .collect::<Result<_>>()?;
        let output = GatLayerParams::bind("gat.out", cfg.d_hidden, cfg.d_out, 1, cfg, store)?;
        Ok(GatStack {
            config: cfg.clone(),
            d_in,
            opening,
            hidden,
            output,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &PatchGraph,
        x: Var,
    ) -> Result<(Var, Vec<LayerAttention>)> {
        let mut attn = Vec::new();
        let mut h = match &self.opening {
            Opening::GraphConv(w) => {
                let w = tape.param(store, *w);
                graph_conv(tape, g, x, w)?
            }
            Opening::Gat(p) => {
                let (h, a) = gat_attention(tape, store, g, x, p, "gat.in")?;
                attn.push(a);
                h
            }
        };
        // Each head already applies ReLU, so the hidden layers' outer
        // activation would be a no-op.
        for (l, p) in self.hidden.iter().enumerate() {
            let (next, a) = gat_attention(tape, store, g, h, p, &format!("gat.hidden{l}"))?;
            attn.push(a);
            h = next;
        }
        let (out, a) = gat_attention(tape, store, g, h, &self.output, "gat.out")?;
        attn.push(a);
        Ok((out, attn))
    }

    /// Matrix-product FLOPs of one forward pass over `n` nodes.
    pub fn flops(&self, n: usize) -> u64 {
        let layer = |p: &GatLayerParams| -> u64 {
            let f = p.out_per_head as u64;
            p.heads.len() as u64 * (2 * n as u64 * p.d_in as u64 * f + 2 * (2 * n as u64 * f))
        };
        let opening = match &self.opening {
            Opening::GraphConv(_) => 2 * (n * self.d_in * self.config.d_hidden) as u64,
            Opening::Gat(p) => layer(p),
        };
        opening + self.hidden.iter().map(layer).sum::<u64>() + layer(&self.output)
    }
}
