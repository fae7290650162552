//! Reference implementations and fixtures shared by the integration tests
//! and the acceptance runner.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sagvit::backbone::{Activation, BackboneConfig, ConvLayerSpec, Image};
use sagvit::gat::{FirstLayer, GatLayerParams, GatStackConfig};
use sagvit::gradcheck::{grad_check, GradCheckReport};
use sagvit::graph::{Edge, NeighborhoodMode, PatchGraph, SigmaSq};
use sagvit::model::{Ablation, GraphConfig, ModelConfig, SagVit};
use sagvit::transformer::{PosEncoding, TransformerConfig};
use sagvit::{ParamStore, Result, Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// All ordered pairs at Chebyshev distance exactly 1, by a double loop.
pub fn brute_moore(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let n = rows * cols;
    let mut out = Vec::new();
    for u in 0..n {
        for v in 0..n {
            let (ur, uc) = ((u / cols) as i64, (u % cols) as i64);
            let (vr, vc) = ((v / cols) as i64, (v % cols) as i64);
            if u != v && (ur - vr).abs().max((uc - vc).abs()) <= 1 {
                out.push((u, v));
            }
        }
    }
    out
}

/// For each node, sort every other node by (Euclidean distance, index) and
/// keep the first `k`.
pub fn brute_knn(rows: usize, cols: usize, k: usize) -> Vec<(usize, usize)> {
    let n = rows * cols;
    let mut out = Vec::new();
    for u in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&v| v != u)
            .map(|v| {
                let dr = (u / cols) as f64 - (v / cols) as f64;
                let dc = (u % cols) as f64 - (v % cols) as f64;
                (dr.hypot(dc), v)
            })
            .collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(others[..k].iter().map(|&(_, v)| (u, v)));
    }
    out
}

pub fn gaussian_weight(a: &[f64], b: &[f64], sigma_sq: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (-d2 / sigma_sq).exp()
}

/// Random directed graph without self loops; every node is a source with
/// probability `p_edge` per candidate target.
pub fn random_graph(n: usize, d: usize, p_edge: f64, rng: &mut impl Rng) -> PatchGraph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && rng.random::<f64>() < p_edge {
                edges.push(Edge {
                    u,
                    v,
                    weight: rng.random_range(0.05..1.0),
                });
            }
        }
    }
    let features = Tensor::uniform(&[n, d], 1.0, rng);
    PatchGraph::new(n, edges, 1.0, features).unwrap()
}

pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Masked dense GAT layer: scores for all pairs, `-inf` outside the
/// neighbourhood, row softmax, ReLU of the weighted sum, heads concatenated.
pub fn dense_gat(store: &ParamStore, params: &GatLayerParams, g: &PatchGraph, x: &Tensor) -> Tensor {
    let n = g.num_nodes;
    let mut mask = vec![vec![None; n]; n];
    for e in &g.edges {
        mask[e.u][e.v] = Some(e.weight.ln());
    }
    if params.self_loops {
        for (u, row) in mask.iter_mut().enumerate() {
            row[u] = Some(0.0);
        }
    }
    let f = params.out_per_head;
    let mut out = vec![vec![0.0; f * params.heads.len()]; n];
    for (hi, &(wid, aid)) in params.heads.iter().enumerate() {
        let w = store.value(wid);
        let a = store.value(aid).data();
        let h: Vec<Vec<f64>> = (0..n)
            .map(|u| (0..f).map(|o| (0..params.d_in).map(|i| w.at2(o, i) * x.at2(u, i)).sum()).collect())
            .collect();
        for u in 0..n {
            let mut scores = vec![f64::NEG_INFINITY; n];
            for v in 0..n {
                if let Some(lw) = mask[u][v] {
                    let s: f64 = (0..f).map(|o| a[o] * h[u][o] + a[f + o] * h[v][o]).sum();
                    let s = if s > 0.0 { s } else { params.leaky_slope * s };
                    scores[v] = s + if params.use_edge_weight_bias { lw } else { 0.0 };
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for o in 0..f {
                let agg: f64 = (0..n).map(|v| (scores[v] - m).exp() / z * h[v][o]).sum();
                out[u][hi * f + o] = agg.max(0.0);
            }
        }
    }
    Tensor::from_rows(&out)
}

/// 1×16×16 input, every learned width at most 8.
pub fn tiny_config(ablation: Ablation, mode: NeighborhoodMode) -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        height: 16,
        width: 16,
        num_classes: 3,
        patch_size: 2,
        ablation,
        backbone: BackboneConfig {
            layers: vec![
                ConvLayerSpec::new(4, 3, 2, Activation::Relu),
                ConvLayerSpec::new(2, 3, 1, Activation::None),
            ],
        },
        graph: GraphConfig {
            mode,
            knn_k: 5,
            sigma_sq: SigmaSq::Auto,
        },
        gat: GatStackConfig {
            d_hidden: 8,
            d_out: 6,
            layers: 2,
            heads: 2,
            ..GatStackConfig::default()
        },
        transformer: TransformerConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 8,
            ..TransformerConfig::default()
        },
    }
}

/// Variants of [`tiny_config`] exercising every optional branch.
pub fn tiny_variants(ablation: Ablation, mode: NeighborhoodMode) -> Vec<(String, ModelConfig)> {
    let base = tiny_config(ablation, mode);
    let mut alt = base.clone();
    alt.gat.first_layer = FirstLayer::Gat;
    alt.gat.use_edge_weight_bias = true;
    alt.gat.self_loops = true;
    alt.transformer.pos_encoding = PosEncoding::Learned;
    alt.transformer.pool_first = true;
    let name = |tag: &str| format!("{}/{mode:?}/{tag}", ablation.as_str());
    vec![(name("default"), base), (name("gat-first,bias,loops,learned,pool-first"), alt)]
}

pub fn random_image(cfg: &ModelConfig, rng: &mut impl Rng) -> Image {
    let t = Tensor::uniform(&[cfg.in_channels, cfg.height, cfg.width], 1.0, rng);
    Image::new(t.map(|v| 0.5 + 0.5 * v), None).unwrap()
}

/// Central-difference check of the cross-entropy loss with respect to every
/// parameter. The patch graph is built once from the unperturbed model, as
/// the tape treats it as a constant.
pub fn pipeline_grad_check(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let model = SagVit::init(cfg, &mut store, &mut r)?;
    // Non-zero biases so their gradients are not trivially checked at zero.
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).name.ends_with("bias") {
            let noise = Tensor::uniform(store.value(id).shape(), 0.1, &mut r);
            *store.value_mut(id) = noise;
        }
    }
    let img = random_image(cfg, &mut r);
    let graph = {
        let mut t = Tape::new();
        let (x, grid) = model.patches(&mut t, &store, &img)?;
        model.graph_for(&t, x, grid)?
    };
    grad_check(&mut store, 1e-5, |t, s| {
        let (x, _) = model.patches(t, s, &img)?;
        let f = model.forward_nodes(t, s, graph.as_ref(), x)?;
        t.cross_entropy(f.logits, &[1])
    })
}

/// Parameter total derived by hand from the configuration.
pub fn hand_param_count(c: &ModelConfig) -> usize {
    let (d_map, h_map, k) = match c.ablation {
        Ablation::NoBackbone => (c.in_channels, c.height, 4),
        _ => (
            c.backbone.layers.last().unwrap().out_channels,
            c.height / c.backbone.layers.iter().map(|l| l.stride).product::<usize>(),
            c.patch_size,
        ),
    };
    let n = (h_map / k) * (c.width * h_map / c.height / k);
    let patch_dim = d_map * k * k;
    let mut total = 0;
    if c.ablation != Ablation::NoBackbone {
        let mut cin = c.in_channels;
        for l in &c.backbone.layers {
            total += l.out_channels * cin * l.kernel * l.kernel + l.out_channels;
            cin = l.out_channels;
        }
    }
    let mut node_dim = patch_dim;
    if c.ablation != Ablation::NoGat {
        let g = &c.gat;
        let per_head = g.d_hidden / g.heads;
        let gat_layer = |heads: usize, f: usize, d_in: usize| heads * (f * d_in + 2 * f);
        total += match g.first_layer {
            FirstLayer::Graphconv => g.d_hidden * patch_dim,
            FirstLayer::Gat => gat_layer(g.heads, per_head, patch_dim),
        };
        total += (g.layers - 1) * gat_layer(g.heads, per_head, g.d_hidden);
        total += gat_layer(1, g.d_out, g.d_hidden);
        node_dim = g.d_out;
    }
    let mut head_in = node_dim;
    if c.ablation != Ablation::NoTransformer {
        let t = &c.transformer;
        let d = t.d_model;
        if node_dim != d {
            total += d * node_dim + d;
        }
        if t.pos_encoding == PosEncoding::Learned {
            total += n * d;
        }
        total += t.layers * (4 * d + 4 * d * d + (t.d_ff * d + t.d_ff) + (d * t.d_ff + d));
        head_in = d;
    }
    total + c.num_classes * head_in + c.num_classes
}
