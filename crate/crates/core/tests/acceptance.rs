//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails. Tolerances are fixed below.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use sagvit::checkpoint::{save_checkpoint, CheckpointInfo};
use sagvit::config::RunConfig;
use sagvit::data::{parse_cifar10_batch, CIFAR_BATCH_BYTES};
use sagvit::export;
use sagvit::gat::{gat_attention, GatLayerParams, GatStack, GatStackConfig};
use sagvit::graph::{build_graph, knn_edges, moore_edges, NeighborhoodMode, NeighborhoodSpec, SigmaSq};
use sagvit::model::{Ablation, ModelConfig, SagVit};
use sagvit::patching::{fold, unfold, PatchGrid, PatchMatrix};
use sagvit::backbone::{FeatureMap, Image};
use sagvit::train::{self, OptimSpec};
use sagvit::transformer::{self_attention, AttentionParams, PosEncoding};
use sagvit::{sgt, ParamStore, Tape, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const WEIGHT_TOL: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-9;
const EQUIVARIANCE_TOL: f64 = 1e-9;
const DENSE_TOL: f64 = 1e-10;
const TARGET_F1: f64 = 0.99;
const MAX_EPOCHS: usize = 200;
const LEARN_BUDGET: Duration = Duration::from_secs(300);
const CLIP_SLACK: f64 = 1e-12;
const FLOP_REL_TOL: f64 = 1e-3;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    for ablation in Ablation::ALL {
        for mode in [NeighborhoodMode::Moore, NeighborhoodMode::Knn] {
            for (name, cfg) in tiny_variants(ablation, mode) {
                let report = pipeline_grad_check(&cfg, 11).map_err(|e| format!("{name}: {e}"))?;
                check(report.passes(GRAD_TOL), || format!("{name}: {:?}", report.worst()))?;
                worst = worst.max(report.max_rel_err());
                count += 1;
            }
        }
    }
    let took = start.elapsed();
    check(took < GRAD_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{count} configurations, max rel err {worst:.2e}, {:.1}s", took.as_secs_f64()))
}

fn graph_oracles() -> Outcome {
    let mut grids = 0;
    for rows in 1..=6 {
        for cols in 1..=6 {
            let grid = PatchGrid::of_size(rows, cols);
            check(moore_edges(&grid) == brute_moore(rows, cols), || format!("moore {rows}x{cols}"))?;
            for k in 1..rows * cols {
                let got = knn_edges(&grid, k).map_err(|e| e.to_string())?;
                check(got == brute_knn(rows, cols, k), || format!("knn {rows}x{cols} k={k}"))?;
            }
            grids += 1;
        }
    }
    let mut worst = 0.0f64;
    let mut r = rng(77);
    for (rows, cols) in [(2, 2), (3, 4), (6, 6), (5, 1)] {
        let pm = PatchMatrix {
            x: Tensor::uniform(&[rows * cols, 9], 1.5, &mut r),
            grid: PatchGrid::of_size(rows, cols),
        };
        for spec in [NeighborhoodSpec::moore(), NeighborhoodSpec::knn(rows * cols - 1)] {
            for sigma in [SigmaSq::Auto, SigmaSq::Fixed(2.5)] {
                let g = build_graph(&pm, spec, sigma).map_err(|e| e.to_string())?;
                for e in &g.edges {
                    let want = gaussian_weight(pm.x.row(e.u), pm.x.row(e.v), g.sigma_sq);
                    worst = worst.max((e.weight - want).abs());
                }
            }
        }
    }
    check(worst <= WEIGHT_TOL, || format!("weight error {worst:.2e}"))?;
    Ok(format!("{grids} grids, all k; weight error {worst:.2e}"))
}

fn attention_normalization() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(1..14);
        let heads = r.random_range(1..5);
        let cfg = GatStackConfig {
            self_loops: r.random(),
            use_edge_weight_bias: r.random(),
            leaky_slope: r.random_range(0.0..1.0),
            ..GatStackConfig::default()
        };
        let g = random_graph(n, 5, r.random_range(0.05..1.0), &mut r);
        let mut store = ParamStore::new();
        let p = GatLayerParams::init("l", 5, 3, heads, &cfg, &mut store, &mut r).map_err(|e| e.to_string())?;
        let mut t = Tape::new();
        let x = t.constant(g.features.clone());
        let (_, att) = gat_attention(&mut t, &store, &g, x, &p, "l").map_err(|e| e.to_string())?;
        for alphas in &att.alphas {
            let mut sums = vec![None::<f64>; n];
            for (&(u, _), a) in att.edges.iter().zip(alphas) {
                *sums[u].get_or_insert(0.0) += a;
            }
            for s in sums.into_iter().flatten() {
                worst = worst.max((s - 1.0).abs());
            }
        }

        let d = 2 * heads;
        let ap = AttentionParams::init("a", d, heads, &mut store, &mut r).map_err(|e| e.to_string())?;
        let x = t.constant(Tensor::uniform(&[n, d], 4.0, &mut r));
        let (_, maps) = self_attention(&mut t, &store, x, &ap).map_err(|e| e.to_string())?;
        for m in maps {
            for row in 0..n {
                worst = worst.max((m.row(row).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    check(worst <= NORMALIZATION_TOL, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("100 configurations, max |sum - 1| = {worst:.2e}"))
}

fn equivariance() -> Outcome {
    let mut cfg = tiny_config(Ablation::Full, NeighborhoodMode::Moore);
    cfg.transformer.pos_encoding = PosEncoding::None;
    let d_in = cfg.validate().map_err(|e| e.to_string())?.patch_dim;
    let mut store = ParamStore::new();
    let model = SagVit::init(&cfg, &mut store, &mut rng(5)).map_err(|e| e.to_string())?;
    let stack = GatStack::bind(&cfg.gat, d_in, &store).map_err(|e| e.to_string())?;
    let (mut gat_err, mut cls_err) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut r = rng(2000 + seed);
        let n = r.random_range(2..16);
        let g = random_graph(n, d_in, r.random_range(0.1..0.8), &mut r);
        let perm = random_permutation(n, &mut r);
        let gp = g.permuted(&perm).map_err(|e| e.to_string())?;
        let run = |g: &sagvit::graph::PatchGraph| -> sagvit::Result<(Tensor, Tensor)> {
            let mut t = Tape::new();
            let x = t.constant(g.features.clone());
            let (h, _) = stack.forward(&mut t, &store, g, x)?;
            let f = model.forward_nodes(&mut t, &store, Some(g), x)?;
            Ok((t.value(h).clone(), t.value(f.logits).clone()))
        };
        let ((h, logits), (hp, logits_p)) = (run(&g).map_err(|e| e.to_string())?, run(&gp).map_err(|e| e.to_string())?);
        for (i, &pi) in perm.iter().enumerate() {
            for (a, b) in h.row(i).iter().zip(hp.row(pi)) {
                gat_err = gat_err.max((a - b).abs());
            }
        }
        cls_err = cls_err.max(logits.max_abs_diff(&logits_p));
    }
    check(gat_err <= EQUIVARIANCE_TOL && cls_err <= EQUIVARIANCE_TOL, || {
        format!("gat {gat_err:.2e}, classifier {cls_err:.2e}")
    })?;
    Ok(format!("20 graphs; gat {gat_err:.2e}, classifier {cls_err:.2e}"))
}

fn dense_mask_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=9 {
        for seed in 0..50u64 {
            let mut r = rng(3000 + 97 * n as u64 + seed);
            let cfg = GatStackConfig {
                self_loops: seed % 3 == 0,
                use_edge_weight_bias: seed % 2 == 1,
                leaky_slope: r.random_range(0.01..0.5),
                ..GatStackConfig::default()
            };
            let g = random_graph(n, 4, r.random_range(0.0..1.0), &mut r);
            let mut store = ParamStore::new();
            let p = GatLayerParams::init("l", 4, 3, 2, &cfg, &mut store, &mut r).map_err(|e| e.to_string())?;
            let mut t = Tape::new();
            let x = t.constant(g.features.clone());
            let (out, _) = gat_attention(&mut t, &store, &g, x, &p, "l").map_err(|e| e.to_string())?;
            worst = worst.max(t.value(out).max_abs_diff(&dense_gat(&store, &p, &g, &g.features)));
            cases += 1;
        }
    }
    check(worst <= DENSE_TOL, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("{cases} graphs, max deviation {worst:.2e}"))
}

fn mean_epoch_seconds(cfg: &RunConfig, epochs: usize) -> Result<f64, String> {
    let data = cfg.load_dataset().map_err(|e| e.to_string())?;
    let (model, mut store) = cfg.init_model().map_err(|e| e.to_string())?;
    let spec = OptimSpec {
        total_epochs: epochs,
        warmup_epochs: 1,
        ..cfg.optim()
    };
    let out = train::train_loop(&model, &mut store, &data, &spec, cfg.seed, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
    Ok(out.history.iter().map(|r| r.epoch_seconds).sum::<f64>() / epochs as f64)
}

fn end_to_end_learning() -> Outcome {
    let cfg = RunConfig::default();
    let data = cfg.load_dataset().map_err(|e| e.to_string())?;
    check(data.len() == 64 && data.image_shape() == Some(&[3, 32, 32]), || "unexpected dataset".into())?;
    let (model, mut store) = cfg.init_model().map_err(|e| e.to_string())?;
    let spec = OptimSpec {
        total_epochs: MAX_EPOCHS,
        stop_at_macro_f1: Some(TARGET_F1),
        ..cfg.optim()
    };
    let start = Instant::now();
    let out = train::thread_pool()
        .and_then(|p| p.install(|| train::train_loop(&model, &mut store, &data, &spec, cfg.seed, |_, _, _| Ok(()))))
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let last = out.history.last().ok_or("no epochs ran")?;
    check(last.macro_f1 >= TARGET_F1, || format!("macro F1 {} after {} epochs", last.macro_f1, last.epoch))?;
    check(took < LEARN_BUDGET, || format!("took {took:?}"))?;

    let mut raw = cfg.clone();
    raw.ablation = Ablation::NoBackbone;
    let (full_s, raw_s) = (mean_epoch_seconds(&cfg, 3)?, mean_epoch_seconds(&raw, 3)?);
    check(raw_s > full_s, || format!("no_backbone {raw_s:.3}s/epoch vs full {full_s:.3}s/epoch"))?;
    Ok(format!(
        "macro F1 {:.4} at epoch {} in {:.1}s; epoch time full {:.3}s, no_backbone {:.3}s",
        last.macro_f1,
        last.epoch,
        took.as_secs_f64(),
        full_s,
        raw_s
    ))
}

fn schedule_and_clipping() -> Outcome {
    let s = OptimSpec::default();
    for (epoch, want) in [(5.0, 0.0005), (10.0, 0.001), (128.0, 0.0)] {
        let got = train::lr_at(epoch, &s);
        check(got == want, || format!("lr_at({epoch}) = {got}, want {want}"))?;
    }
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let scale = 10f64.powf(r.random_range(-6.0..8.0));
        let mut grads: Vec<Tensor> = (0..r.random_range(1..6))
            .map(|_| Tensor::uniform(&[r.random_range(1..30)], scale, &mut r))
            .collect();
        train::clip_gradients(&mut grads, s.clip_norm);
        worst = worst.max(train::global_norm(&grads));
    }
    check(worst <= s.clip_norm + CLIP_SLACK, || format!("post-clip norm {worst}"))?;
    Ok(format!("schedule points exact; max post-clip norm {worst:.17}"))
}

fn unfold_fold() -> Outcome {
    let mut r = rng(6);
    for i in 0..1000 {
        let (d, k) = (r.random_range(1..5), r.random_range(1..5));
        let (rows, cols) = (r.random_range(1..6), r.random_range(1..6));
        let t = Tensor::randn(&[d, rows * k, cols * k], 10.0, &mut r);
        let fm = FeatureMap::new(t, 1).map_err(|e| e.to_string())?;
        let back = unfold(&fm, k).and_then(|pm| fold(&pm)).map_err(|e| e.to_string())?;
        check(back.data.bit_eq(&fm.data), || format!("map {i} differs after round trip"))?;
    }
    Ok("1000 maps bitwise identical".into())
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 21;
    cfg.optim.total_epochs = 3;
    cfg.optim.warmup_epochs = 1;
    cfg.optim.batch_size = Some(16);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |dir: &Path| -> Result<String, String> {
        let data = cfg.load_dataset().map_err(|e| e.to_string())?;
        let (model, mut store) = cfg.init_model().map_err(|e| e.to_string())?;
        let mut csv = format!("{}\n", export::METRICS_HEADER);
        let out = train::train_loop(&model, &mut store, &data, &cfg.optim(), cfg.seed, |r, _, _| {
            csv.push_str(&export::metrics_row(r));
            csv.push('\n');
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        let info = CheckpointInfo {
            epoch: out.state.epoch,
            step: out.state.step,
            macro_f1: out.history.last().map(|r| r.macro_f1),
        };
        save_checkpoint(dir, &cfg, &store, info).map_err(|e| e.to_string())?;
        Ok(csv)
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (csv_a, csv_b) = (run(&a)?, run(&b)?);
    let strip = |csv: &str| -> Vec<String> { csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_owned()).collect() };
    check(strip(&csv_a) == strip(&csv_b), || "metrics differ".into())?;
    let mut files = 0;
    for entry in std::fs::read_dir(&a).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let (x, y) = (std::fs::read(a.join(&name)), std::fs::read(b.join(&name)));
        check(matches!((&x, &y), (Ok(x), Ok(y)) if x == y), || format!("{name:?} differs"))?;
        files += 1;
    }
    Ok(format!("{files} checkpoint files bitwise equal; metrics equal apart from timing column"))
}

fn landscape_contract() -> Outcome {
    let cfg = tiny_config(Ablation::Full, NeighborhoodMode::Knn);
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let model = SagVit::init(&cfg, &mut store, &mut r).map_err(|e| e.to_string())?;
    let imgs: Vec<Image> = (0..6).map(|_| random_image(&cfg, &mut r)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let before = store.clone();
    let loss = train::batch_loss(&model, &store, &refs, &labels).map_err(|e| e.to_string())?;
    let spec = train::LandscapeSpec {
        grid: 7,
        radius: 0.5,
        seed: 3,
        prefix: None,
    };
    let grid = train::loss_landscape_scan(&model, &mut store, &refs, &labels, &spec).map_err(|e| e.to_string())?;
    let center = grid.at2(3, 3);
    check(center.to_bits() == loss.to_bits(), || format!("center {center} vs loss {loss}"))?;
    check(store.bit_eq(&before), || "parameters changed".into())?;
    Ok(format!("center {center} equals loss; parameters restored"))
}

fn accounting() -> Outcome {
    let mut configs = vec![
        ("default", ModelConfig::default()),
        ("tiny", tiny_config(Ablation::Full, NeighborhoodMode::Moore)),
    ];
    let mut alt = tiny_variants(Ablation::NoTransformer, NeighborhoodMode::Knn).remove(1).1;
    alt.ablation = Ablation::Full;
    configs.push(("tiny-gat-first-learned", alt));
    let mut counts = Vec::new();
    for (name, cfg) in &configs {
        let mut store = ParamStore::new();
        SagVit::init(cfg, &mut store, &mut rng(0)).map_err(|e| e.to_string())?;
        let (got, want) = (train::count_params(&store), hand_param_count(cfg));
        check(got == want, || format!("{name}: {got} vs hand {want}"))?;
        counts.push(format!("{name}={got}"));
    }
    let mut worst = 0.0f64;
    for ablation in Ablation::ALL {
        for (_, mut cfg) in configs.clone() {
            cfg.ablation = ablation;
            let mut store = ParamStore::new();
            let model = SagVit::init(&cfg, &mut store, &mut rng(1)).map_err(|e| e.to_string())?;
            let mut t = Tape::new();
            model
                .forward_full(&mut t, &store, &random_image(&cfg, &mut rng(2)))
                .map_err(|e| e.to_string())?;
            let (est, tape) = (train::estimate_flops(&model) as f64, t.flops() as f64);
            worst = worst.max((est - tape).abs() / tape);
        }
    }
    check(worst <= FLOP_REL_TOL, || format!("flop rel err {worst:.2e}"))?;
    Ok(format!("params {}; flop rel err {worst:.2e}", counts.join(", ")))
}

fn formats() -> Outcome {
    let mut r = rng(9);
    for i in 0..200 {
        let shape: Vec<usize> = (0..r.random_range(0..5)).map(|_| r.random_range(1..5)).collect();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| f64::from_bits(r.random())).collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        let back = sgt::decode(&sgt::encode(&t), Path::new("mem")).map_err(|e| e.to_string())?;
        check(back.bit_eq(&t), || format!("tensor {i} changed"))?;
    }
    check(CIFAR_BATCH_BYTES == 30_730_000, || format!("batch size {CIFAR_BATCH_BYTES}"))?;
    let bytes = vec![3u8; CIFAR_BATCH_BYTES];
    let ok = parse_cifar10_batch(&bytes, Path::new("b.bin")).map_err(|e| e.to_string())?;
    check(ok.len() == 10_000, || format!("{} records", ok.len()))?;
    for keep in [0, 1, 3073, CIFAR_BATCH_BYTES - 1] {
        check(parse_cifar10_batch(&bytes[..keep], Path::new("b.bin")).is_err(), || {
            format!("truncation to {keep} bytes accepted")
        })?;
    }
    Ok("200 tensors bitwise; CIFAR size enforced, truncations rejected".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient correctness", gradient_correctness),
        ("graph oracles", graph_oracles),
        ("attention normalization", attention_normalization),
        ("equivariance", equivariance),
        ("dense-mask oracle", dense_mask_oracle),
        ("end-to-end learning", end_to_end_learning),
        ("schedule and clipping", schedule_and_clipping),
        ("unfold/fold bijection", unfold_fold),
        ("determinism", determinism),
        ("loss-landscape contract", landscape_contract),
        ("accounting", accounting),
        ("formats", formats),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
