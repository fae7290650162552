//! End-to-end checks across the whole model: gradients, locality,
//! permutation symmetry, accounting and short training runs.

mod common;

use common::*;
use sagvit::data::{gen_synthetic, SyntheticSpec};
use sagvit::gat::GatStack;
use sagvit::graph::{build_graph, NeighborhoodMode, SigmaSq};
use sagvit::model::{Ablation, SagVit};
use sagvit::train::{self, count_params, estimate_flops, OptimSpec};
use sagvit::transformer::PosEncoding;
use sagvit::{ParamStore, Tape, Tensor};

fn grad_check_all(ablation: Ablation) {
    for mode in [NeighborhoodMode::Moore, NeighborhoodMode::Knn] {
        for (name, cfg) in tiny_variants(ablation, mode) {
            let report = pipeline_grad_check(&cfg, 11).unwrap();
            assert!(report.passes(1e-4), "{name}: {:?}", report.worst());
        }
    }
}

#[test]
fn gradients_full() {
    grad_check_all(Ablation::Full);
}

#[test]
fn gradients_no_transformer() {
    grad_check_all(Ablation::NoTransformer);
}

#[test]
fn gradients_no_gat() {
    grad_check_all(Ablation::NoGat);
}

#[test]
fn gradients_no_backbone() {
    grad_check_all(Ablation::NoBackbone);
}

/// Breadth-first hop distances from `src`.
fn hops_from(g: &sagvit::graph::PatchGraph, src: usize) -> Vec<usize> {
    let nbrs = g.neighbors();
    let mut dist = vec![usize::MAX; g.num_nodes];
    dist[src] = 0;
    let mut frontier = vec![src];
    while let Some(u) = frontier.pop() {
        for &v in &nbrs[u] {
            if dist[v] == usize::MAX || dist[v] > dist[u] + 1 {
                dist[v] = dist[u] + 1;
                frontier.push(v);
            }
        }
    }
    dist
}

#[test]
fn gat_output_is_local() {
    let mut r = rng(5);
    let cfg = tiny_config(Ablation::Full, NeighborhoodMode::Moore).gat;
    let mut store = ParamStore::new();
    let stack = GatStack::init(&cfg, 3, &mut store, &mut r).unwrap();
    // A 1×9 strip: hop distance equals column distance.
    let grid = sagvit::patching::PatchGrid::of_size(1, 9);
    let feats = Tensor::uniform(&[9, 3], 1.0, &mut r);
    let pm = sagvit::patching::PatchMatrix { x: feats, grid };
    let g = build_graph(&pm, Default::default(), SigmaSq::Fixed(1.0)).unwrap();
    let run = |g: &sagvit::graph::PatchGraph| {
        let mut t = Tape::new();
        let x = t.constant(g.features.clone());
        let (out, _) = stack.forward(&mut t, &store, g, x).unwrap();
        t.value(out).clone()
    };
    let base = run(&g);
    let reach = cfg.hops();
    let dist = hops_from(&g, 0);
    for far in 0..9 {
        let mut g2 = g.clone();
        for v in g2.features.data_mut()[far * 3..far * 3 + 3].iter_mut() {
            *v += 0.75;
        }
        let out = run(&g2);
        let changed = out.row(0).iter().zip(base.row(0)).any(|(a, b)| a != b);
        if dist[far] > reach {
            assert!(!changed, "node {far} at distance {} moved node 0", dist[far]);
        }
        if far == 0 {
            assert!(changed);
        }
    }
}

#[test]
fn classifier_is_permutation_invariant_without_positions() {
    let mut r = rng(9);
    for ablation in [Ablation::Full, Ablation::NoTransformer] {
        let mut cfg = tiny_config(ablation, NeighborhoodMode::Moore);
        cfg.transformer.pos_encoding = PosEncoding::None;
        let mut store = ParamStore::new();
        let model = SagVit::init(&cfg, &mut store, &mut r).unwrap();
        let img = random_image(&cfg, &mut r);
        let mut t = Tape::new();
        let (x, grid) = model.patches(&mut t, &store, &img).unwrap();
        let g = model.graph_for(&t, x, grid).unwrap().unwrap();
        let f = model.forward_nodes(&mut t, &store, Some(&g), x).unwrap();
        let base = t.value(f.logits).clone();
        for _ in 0..5 {
            let perm = random_permutation(g.num_nodes, &mut r);
            let gp = g.permuted(&perm).unwrap();
            let mut t = Tape::new();
            let xp = t.constant(gp.features.clone());
            let f = model.forward_nodes(&mut t, &store, Some(&gp), xp).unwrap();
            assert!(t.value(f.logits).max_abs_diff(&base) <= 1e-9);
        }
    }
}

#[test]
fn parameter_count_matches_hand_formula() {
    for ablation in Ablation::ALL {
        for mode in [NeighborhoodMode::Moore, NeighborhoodMode::Knn] {
            for (name, cfg) in tiny_variants(ablation, mode) {
                let mut store = ParamStore::new();
                SagVit::init(&cfg, &mut store, &mut rng(0)).unwrap();
                assert_eq!(count_params(&store), hand_param_count(&cfg), "{name}");
            }
        }
    }
    let mut store = ParamStore::new();
    let cfg = sagvit::model::ModelConfig::default();
    SagVit::init(&cfg, &mut store, &mut rng(0)).unwrap();
    assert_eq!(count_params(&store), hand_param_count(&cfg));
}

#[test]
fn flop_estimate_matches_tape() {
    for ablation in Ablation::ALL {
        let cfg = tiny_config(ablation, NeighborhoodMode::Knn);
        let mut store = ParamStore::new();
        let model = SagVit::init(&cfg, &mut store, &mut rng(1)).unwrap();
        let mut t = Tape::new();
        model.forward_full(&mut t, &store, &random_image(&cfg, &mut rng(2))).unwrap();
        let (est, tape) = (estimate_flops(&model) as f64, t.flops() as f64);
        assert!((est - tape).abs() <= 1e-3 * tape, "{ablation}: {est} vs {tape}");
    }
}

fn toy_data(per_class: usize) -> sagvit::data::Dataset {
    gen_synthetic(
        &SyntheticSpec {
            per_class,
            size: 16,
            channels: 1,
            classes: 3,
            ..SyntheticSpec::default()
        },
        4,
    )
    .unwrap()
}

#[test]
fn training_loss_decreases() {
    let cfg = tiny_config(Ablation::Full, NeighborhoodMode::Moore);
    let data = toy_data(6);
    let mut store = ParamStore::new();
    let model = SagVit::init(&cfg, &mut store, &mut rng(4)).unwrap();
    let spec = OptimSpec {
        lr0: 3e-3,
        warmup_epochs: 0,
        total_epochs: 10,
        batch_size: 18,
        ..OptimSpec::default()
    };
    let out = train::train_loop(&model, &mut store, &data, &spec, 4, |_, _, _| Ok(())).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn training_is_reproducible() {
    let cfg = tiny_config(Ablation::Full, NeighborhoodMode::Knn);
    let data = toy_data(4);
    let spec = OptimSpec {
        total_epochs: 3,
        warmup_epochs: 1,
        batch_size: 5,
        ..OptimSpec::default()
    };
    let run = || {
        let mut store = ParamStore::new();
        let model = SagVit::init(&cfg, &mut store, &mut rng(8)).unwrap();
        let out = train::train_loop(&model, &mut store, &data, &spec, 8, |_, _, _| Ok(())).unwrap();
        (store, out.history.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert!(a.bit_eq(&b));
    assert_eq!(la, lb);
}

#[test]
fn raw_patch_path_reaches_the_same_stages() {
    let full = tiny_config(Ablation::Full, NeighborhoodMode::Moore);
    let raw = tiny_config(Ablation::NoBackbone, NeighborhoodMode::Moore);
    let (gf, gr) = (full.validate().unwrap(), raw.validate().unwrap());
    assert_eq!(gr.map, (1, 16, 16));
    assert_eq!(gr.patch_dim, 16);
    assert_eq!(gr.grid.num_nodes(), 16);
    let (mut sf, mut sr) = (ParamStore::new(), ParamStore::new());
    SagVit::init(&full, &mut sf, &mut rng(0)).unwrap();
    SagVit::init(&raw, &mut sr, &mut rng(0)).unwrap();
    let downstream = |s: &ParamStore| -> Vec<String> {
        s.names()
            .filter(|n| !n.starts_with("backbone.") && !n.starts_with("gat.graphconv"))
            .map(|n| format!("{n}:{:?}", s.by_name(n).unwrap().shape()))
            .collect()
    };
    assert_eq!(downstream(&sf), downstream(&sr));
    assert_eq!(gf.node_dim, gr.node_dim);
}
