//! Graph attention and self-attention properties.

mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sagvit::gat::{gat_attention, GatLayerParams, GatStack, GatStackConfig, LayerAttention};
use sagvit::graph::PatchGraph;
use sagvit::transformer::{self_attention, AttentionParams};
use sagvit::{ParamStore, Tape, Tensor};

fn layer(d_in: usize, f: usize, heads: usize, cfg: &GatStackConfig, seed: u64) -> (ParamStore, GatLayerParams) {
    let mut store = ParamStore::new();
    let p = GatLayerParams::init("l", d_in, f, heads, cfg, &mut store, &mut rng(seed)).unwrap();
    (store, p)
}

fn run_layer(store: &ParamStore, p: &GatLayerParams, g: &PatchGraph) -> (Tensor, LayerAttention) {
    let mut t = Tape::new();
    let x = t.constant(g.features.clone());
    let (out, a) = gat_attention(&mut t, store, g, x, p, "l").unwrap();
    (t.value(out).clone(), a)
}

fn coefficient_sums(a: &LayerAttention) -> Vec<BTreeMap<usize, f64>> {
    a.alphas
        .iter()
        .map(|alphas| {
            let mut sums = BTreeMap::new();
            for (&(u, _), &al) in a.edges.iter().zip(alphas) {
                *sums.entry(u).or_insert(0.0) += al;
            }
            sums
        })
        .collect()
}

#[test]
fn matches_masked_dense_reference() {
    for n in 1..=9 {
        for seed in 0..50u64 {
            let mut r = rng(seed * 31 + n as u64);
            let cfg = GatStackConfig {
                self_loops: seed % 3 == 0,
                use_edge_weight_bias: seed % 2 == 0,
                leaky_slope: r.random_range(0.01..0.5),
                ..GatStackConfig::default()
            };
            let g = random_graph(n, 4, r.random_range(0.1..0.9), &mut r);
            let (store, p) = layer(4, 3, 2, &cfg, seed);
            let (out, _) = run_layer(&store, &p, &g);
            let want = dense_gat(&store, &p, &g, &g.features);
            assert!(out.max_abs_diff(&want) <= 1e-10, "n={n} seed={seed}");
        }
    }
}

proptest! {
    #[test]
    fn coefficients_sum_to_one_per_node_and_head(
        n in 2usize..12, p_edge in 0.1f64..1.0, heads in 1usize..4, seed in any::<u64>(), loops in any::<bool>(),
    ) {
        let mut r = rng(seed);
        let g = random_graph(n, 3, p_edge, &mut r);
        let cfg = GatStackConfig { self_loops: loops, ..GatStackConfig::default() };
        let (store, p) = layer(3, 2, heads, &cfg, seed);
        let (_, a) = run_layer(&store, &p, &g);
        for sums in coefficient_sums(&a) {
            for s in sums.values() {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn stack_is_permutation_equivariant(n in 2usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(n, 4, 0.4, &mut r);
        let cfg = GatStackConfig { d_hidden: 6, d_out: 5, heads: 2, layers: 2, ..GatStackConfig::default() };
        let mut store = ParamStore::new();
        let stack = GatStack::init(&cfg, 4, &mut store, &mut r).unwrap();
        let perm = random_permutation(n, &mut r);
        let forward = |g: &PatchGraph| {
            let mut t = Tape::new();
            let x = t.constant(g.features.clone());
            let (y, _) = stack.forward(&mut t, &store, g, x).unwrap();
            t.value(y).clone()
        };
        let (y, yp) = (forward(&g), forward(&g.permuted(&perm).unwrap()));
        for (i, &pi) in perm.iter().enumerate() {
            for (a, b) in y.row(i).iter().zip(yp.row(pi)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn self_attention_rows_sum_to_one(n in 1usize..10, heads in 1usize..4, seed in any::<u64>()) {
        let d = 2 * heads;
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let p = AttentionParams::init("a", d, heads, &mut store, &mut r).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::uniform(&[n, d], 3.0, &mut r));
        let (_, maps) = self_attention(&mut t, &store, x, &p).unwrap();
        prop_assert_eq!(maps.len(), heads);
        for m in maps {
            for row in 0..n {
                prop_assert!((m.row(row).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn coefficients_ignore_a_shared_score_shift() {
    // Shifting a_dst by c·e with h_v·e constant over v shifts every score of
    // a node's neighbourhood by the same amount; with slope 1 the leaky ReLU
    // is linear so the shift survives to the softmax unchanged.
    let mut r = rng(3);
    let cfg = GatStackConfig {
        leaky_slope: 1.0,
        ..GatStackConfig::default()
    };
    let n = 6;
    let (mut store, p) = layer(2, 2, 1, &cfg, 1);
    let (wid, aid) = p.heads[0];
    // W maps (s, 1) to (s, 1 - s), whose components always sum to 1.
    *store.value_mut(wid) = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 1.0]).unwrap();
    let feats: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-1.0..1.0), 1.0]).collect();
    let mut g = random_graph(n, 2, 0.7, &mut r);
    g.features = Tensor::from_rows(&feats);
    let (_, base) = run_layer(&store, &p, &g);
    let a = store.value_mut(aid).data_mut();
    a[2] += 0.8;
    a[3] += 0.8;
    let (_, shifted) = run_layer(&store, &p, &g);
    assert!(!base.alphas[0].is_empty());
    for (x, y) in base.alphas[0].iter().zip(&shifted.alphas[0]) {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}
