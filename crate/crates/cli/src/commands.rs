//! Verb implementations. Each returns `anyhow::Result` so library errors
//! keep their type for the exit-code mapping in `main`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sagvit::checkpoint::{self, CheckpointInfo};
use sagvit::config::RunConfig;
use sagvit::data::{self, Dataset};
use sagvit::export;
use sagvit::graph::build_graph;
use sagvit::model::SagVit;
use sagvit::patching::PatchMatrix;
use sagvit::train::{self, LandscapeSpec, MetricsReport};
use sagvit::transformer::token_correlation;
use sagvit::{sgt, Error, ParamStore, Tape};
use serde_json::json;

use crate::Overrides;

fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(a) = o.ablation {
        cfg.ablation = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = cfg.load_dataset()?;
    data.require_nonempty()?;
    Ok(data)
}

fn restore(dir: &Path) -> Result<(RunConfig, SagVit, ParamStore)> {
    let (cfg, store, _) = checkpoint::load_checkpoint(dir)?;
    cfg.validate()?;
    let model = SagVit::bind(&cfg.model(), &store)?;
    Ok((cfg, model, store))
}

fn create_run_dir(parent: &Path, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let base = format!("run-{stamp}-seed{seed}");
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    unreachable!()
}

pub fn train(o: &Overrides, out: &Path) -> Result<()> {
    let cfg = resolve_config(o)?;
    let spec = cfg.optim();
    let data = load_data(&cfg)?;
    let (model, mut store) = cfg.init_model()?;
    let dir = create_run_dir(out, cfg.seed)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(csv, "{}", export::METRICS_HEADER)?;
    csv.flush()?;
    let best_dir = dir.join("checkpoint").join("best");
    let steps_per_epoch = data.len().div_ceil(spec.batch_size) as u64;

    let outcome = train::thread_pool()?.install(|| {
        train::train_loop(&model, &mut store, &data, &spec, cfg.seed, |r, params, improved| {
            writeln!(csv, "{}", export::metrics_row(r))?;
            csv.flush()?;
            eprintln!(
                "epoch {:>4}  loss {:.6}  macro_f1 {:.4}  lr {:.3e}  {:.1} img/s",
                r.epoch, r.loss, r.macro_f1, r.lr, r.throughput
            );
            if improved {
                let info = CheckpointInfo {
                    epoch: r.epoch,
                    step: r.epoch as u64 * steps_per_epoch,
                    macro_f1: Some(r.macro_f1),
                };
                checkpoint::save_checkpoint(&best_dir, &cfg, params, info)?;
            }
            Ok(())
        })
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let _ = fs::write(dir.join("error.txt"), format!("{e}\n"));
            return Err(e.into());
        }
    };
    let last = outcome.history.last().cloned();
    checkpoint::save_checkpoint(
        dir.join("checkpoint").join("final"),
        &cfg,
        &store,
        CheckpointInfo {
            epoch: outcome.state.epoch,
            step: outcome.state.step,
            macro_f1: last.as_ref().map(|r| r.macro_f1),
        },
    )?;
    let stats = train::model_stats(&model, &store);
    let summary = json!({
        "seed": cfg.seed,
        "ablation": cfg.ablation.as_str(),
        "epochs": outcome.state.epoch,
        "steps": outcome.state.step,
        "best_epoch": outcome.state.best_epoch,
        "best_macro_f1": outcome.state.best_macro_f1,
        "final_loss": last.as_ref().map(|r| r.loss),
        "final_macro_f1": last.as_ref().map(|r| r.macro_f1),
        "final_micro_f1": last.as_ref().map(|r| r.micro_f1),
        "params": stats.params,
        "flops": stats.flops,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{}", dir.display());
    Ok(())
}

fn report_json(r: &MetricsReport, images: usize) -> serde_json::Value {
    json!({
        "images": images,
        "loss": r.loss,
        "macro_f1": r.macro_f1,
        "micro_f1": r.micro_f1,
        "accuracy": r.accuracy,
        "throughput": r.throughput,
    })
}

pub fn eval(ckpt: &Path, config: Option<&Path>, baseline: Option<&Path>, out: &Path) -> Result<()> {
    let (mut cfg, model, store) = restore(ckpt)?;
    if let Some(p) = config {
        let other = RunConfig::load(p)?;
        cfg.dataset = other.dataset;
        cfg.validate()?;
    }
    let data = load_data(&cfg)?;
    let r = train::thread_pool()?.install(|| train::evaluate(&model, &store, &data, cfg.optim().batch_size))?;
    let mut report = report_json(&r, data.len());
    println!("images\t{}", data.len());
    println!("loss\t{}", r.loss);
    println!("macro_f1\t{}", r.macro_f1);
    println!("micro_f1\t{}", r.micro_f1);
    println!("accuracy\t{}", r.accuracy);
    println!("throughput\t{}", r.throughput);
    if let Some(b) = baseline {
        let text = fs::read_to_string(b).with_context(|| format!("reading {}", b.display()))?;
        let base: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::format(b, e.to_string()))?;
        let base_f1 = base["macro_f1"]
            .as_f64()
            .ok_or_else(|| Error::format(b, "missing numeric `macro_f1`"))?;
        let delta = r.macro_f1 - base_f1;
        println!("delta_macro_f1\t{delta}");
        report["baseline_macro_f1"] = json!(base_f1);
        report["delta_macro_f1"] = json!(delta);
    }
    fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(())
}

pub fn inspect(ckpt: Option<&Path>, o: &Overrides, image: usize, out: &Path) -> Result<()> {
    let (cfg, model, store) = match ckpt {
        Some(dir) => restore(dir)?,
        None => {
            let cfg = resolve_config(o)?;
            let (model, store) = cfg.init_model()?;
            (cfg, model, store)
        }
    };
    let data = load_data(&cfg)?;
    let img = data
        .images
        .get(image)
        .ok_or_else(|| Error::config(format!("--image {image} is out of range for {} images", data.len())))?;

    let mut tape = Tape::new();
    let (x, grid) = model.patches(&mut tape, &store, img)?;
    // Built even when the GAT is ablated, so the graph can still be inspected.
    let pm = PatchMatrix {
        x: tape.value(x).clone(),
        grid,
    };
    let graph = build_graph(&pm, cfg.graph.spec(), cfg.graph.sigma_sq)?;
    let fwd = model.forward_nodes(&mut tape, &store, Some(&graph), x)?;
    let probs = tape.softmax(fwd.logits, 1)?;

    fs::create_dir_all(out)?;
    fs::write(out.join("adjacency.csv"), export::adjacency_csv(&graph))?;
    fs::write(out.join("edges.tsv"), export::edge_tsv(&graph))?;
    fs::write(out.join("attention.tsv"), export::attention_tsv(&fwd.gat_attention))?;
    let corr = token_correlation(tape.value(fwd.tokens));
    fs::write(out.join("correlation.csv"), export::matrix_csv(&corr))?;
    sgt::write_sgt(out.join("embedding.sgt"), tape.value(fwd.pooled))?;
    sgt::write_sgt(out.join("tokens.sgt"), tape.value(fwd.tokens))?;

    println!("nodes\t{}", graph.num_nodes);
    println!("edges\t{}", graph.edges.len());
    println!("sigma_sq\t{}", graph.sigma_sq);
    println!("probabilities\t{:?}", tape.value(probs).data());
    println!("label\t{}", data.labels[image]);
    Ok(())
}

pub struct LandscapeArgs {
    pub grid: usize,
    pub radius: f64,
    pub seed: u64,
    pub samples: usize,
    pub prefix: Option<String>,
}

pub fn landscape(ckpt: &Path, a: LandscapeArgs, out: &Path) -> Result<()> {
    let (cfg, model, mut store) = restore(ckpt)?;
    let data = load_data(&cfg)?;
    let n = a.samples.clamp(1, data.len());
    let imgs: Vec<_> = data.images[..n].iter().collect();
    let labels = &data.labels[..n];
    let spec = LandscapeSpec {
        grid: a.grid,
        radius: a.radius,
        seed: a.seed,
        prefix: a.prefix,
    };
    let (loss, surface) = train::thread_pool()?.install(|| -> sagvit::Result<_> {
        let loss = train::batch_loss(&model, &store, &imgs, labels)?;
        let surface = train::loss_landscape_scan(&model, &mut store, &imgs, labels, &spec)?;
        Ok((loss, surface))
    })?;
    fs::write(out, export::matrix_csv(&surface))?;
    let c = a.grid / 2;
    println!("checkpoint_loss\t{loss}");
    println!("center_loss\t{}", surface.data()[c * a.grid + c]);
    Ok(())
}

pub fn gen_data(o: &Overrides, out: &Path) -> Result<()> {
    let cfg = resolve_config(o)?;
    let data = cfg.load_dataset()?;
    data::save_sgt_dir(out, &data)?;
    println!("{} images written to {}", data.len(), out.display());
    Ok(())
}

pub fn stats(o: &Overrides) -> Result<()> {
    let cfg = resolve_config(o)?;
    let (model, store) = cfg.init_model()?;
    let s = train::model_stats(&model, &store);
    println!("ablation\t{}", cfg.ablation);
    println!("params\t{}", s.params);
    println!("params_millions\t{}", s.param_count_millions);
    println!("flops\t{}", s.flops);
    println!("gflops\t{}", s.flops_giga);
    Ok(())
}
