//! Optimization and measurement: Adam with decoupled weight decay, the
//! warmup-cosine schedule, gradient clipping, F1 metrics, throughput,
//! parameter and FLOP accounting, the 2D loss-landscape scan and the
//! training loop.
//!
//! Samples in a batch are evaluated on separate tapes, possibly in
//! parallel. Their gradients are summed in sample order so results do not
//! depend on the thread count.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::SagVit;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Apply weight decay directly to the weights rather than through the
    /// gradient.
    pub decoupled_weight_decay: bool,
    /// Stop once the training-set macro F1 reaches this value.
    pub stop_at_macro_f1: Option<f64>,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            lr0: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 10,
            total_epochs: 128,
            clip_norm: 1.0,
            batch_size: 128,
            decoupled_weight_decay: true,
            stop_at_macro_f1: None,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::config("optim.total_epochs must be >= 1"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config(format!(
                "optim.warmup_epochs ({}) exceeds optim.total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("optim.clip_norm must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size must be >= 1"));
        }
        if !(self.lr0 >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("optim.lr0 and optim.weight_decay must be >= 0, optim.eps > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta1 and optim.beta2 must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch: linear warmup from 0 to `lr0`,
/// then cosine decay to 0 at `total_epochs`.
pub fn lr_at(epoch: f64, spec: &OptimSpec) -> f64 {
    let total = spec.total_epochs as f64;
    let warm = spec.warmup_epochs as f64;
    let e = epoch.clamp(0.0, total);
    if e < warm {
        spec.lr0 * e / warm
    } else if total == warm {
        spec.lr0
    } else {
        spec.lr0 * 0.5 * (1.0 + (PI * (e - warm) / (total - warm)).cos())
    }
}

/// Learning rate of step `batch` (0-based) of `epoch` (0-based) with
/// `batches` steps per epoch: the schedule at the step's end point.
pub fn step_lr(epoch: usize, batch: usize, batches: usize, spec: &OptimSpec) -> f64 {
    lr_at(epoch as f64 + (batch + 1) as f64 / batches as f64, spec)
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Optimizer and bookkeeping state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub seed: u64,
    pub best_macro_f1: f64,
    pub best_epoch: Option<usize>,
}

impl TrainState {
    pub fn new(store: &ParamStore, seed: u64) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            m: store.zeros_like(),
            v: store.zeros_like(),
            seed,
            best_macro_f1: f64::NEG_INFINITY,
            best_epoch: None,
        }
    }
}

/// One Adam update at learning rate `lr`.
pub fn adam_step(store: &mut ParamStore, state: &mut TrainState, spec: &OptimSpec, grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::contract(format!(
            "adam_step: {} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - spec.beta1.powi(t);
    let bc2 = 1.0 - spec.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.value_mut(id);
        let g = grads[i].data();
        if g.len() != p.numel() {
            return Err(Error::shape("adam_step", grads[i].shape(), p.shape()));
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let pd = p.data_mut();
        if spec.decoupled_weight_decay && spec.weight_decay != 0.0 {
            let shrink = lr * spec.weight_decay;
            pd.iter_mut().for_each(|w| *w -= shrink * *w);
        }
        for j in 0..pd.len() {
            let gj = if spec.decoupled_weight_decay {
                g[j]
            } else {
                g[j] + spec.weight_decay * pd[j]
            };
            m[j] = spec.beta1 * m[j] + (1.0 - spec.beta1) * gj;
            v[j] = spec.beta2 * v[j] + (1.0 - spec.beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            pd[j] -= lr * mh / (vh.sqrt() + spec.eps);
        }
    }
    Ok(())
}

fn check_lengths(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::contract("metrics of an empty prediction set are undefined"));
    }
    Ok(())
}

/// Unweighted mean of per-class F1; a class with `P + R = 0` scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check_lengths(preds, labels)?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::contract(format!("class index out of range for {classes} classes")));
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / classes as f64)
}

/// Micro-averaged F1, which for single-label classification equals accuracy.
pub fn micro_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    accuracy(preds, labels)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn images_per_second(images: usize, seconds: f64) -> f64 {
    images as f64 / seconds
}

/// Inference throughput over `images`, split into batches of `batch_size`;
/// the first `warmup_batches` batches are run but not timed.
pub fn measure_throughput(
    model: &SagVit,
    store: &ParamStore,
    images: &[Image],
    batch_size: usize,
    warmup_batches: usize,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let batches: Vec<&[Image]> = images.chunks(batch_size).collect();
    if batches.len() <= warmup_batches {
        return Err(Error::contract(format!(
            "no timed batches: {} batches with {warmup_batches} warmup",
            batches.len()
        )));
    }
    for b in &batches[..warmup_batches] {
        predict_batch(model, store, b)?;
    }
    let timed = &batches[warmup_batches..];
    let start = Instant::now();
    let mut count = 0;
    for b in timed {
        predict_batch(model, store, b)?;
        count += b.len();
    }
    Ok(images_per_second(count, start.elapsed().as_secs_f64().max(1e-12)))
}

/// Class probabilities per image, in input order.
pub fn predict_batch(model: &SagVit, store: &ParamStore, images: &[Image]) -> Result<Vec<Vec<f64>>> {
    images.par_iter().map(|img| model.predict(store, img)).collect()
}

/// Mean cross-entropy and per-parameter mean gradients over a batch.
pub fn batch_gradients(
    model: &SagVit,
    store: &ParamStore,
    images: &[&Image],
    labels: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::contract("batch_gradients needs a nonempty batch with one label per image"));
    }
    let per_sample: Vec<(f64, Vec<Tensor>)> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &label)| {
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, store, img, label)?;
            let grads = tape.backward(loss)?.param_grads(store);
            Ok((tape.value(loss).item(), grads))
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut total) = iter.next().expect("nonempty");
    for (l, grads) in iter {
        loss += l;
        for (acc, g) in total.iter_mut().zip(&grads) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    for g in total.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, total))
}

/// Mean cross-entropy over a batch without gradients.
pub fn batch_loss(model: &SagVit, store: &ParamStore, images: &[&Image], labels: &[usize]) -> Result<f64> {
    let losses: Vec<f64> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &label)| {
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, store, img, label)?;
            Ok(tape.value(loss).item())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub params: usize,
    pub param_count_millions: f64,
    pub flops: u64,
    pub flops_giga: f64,
}

pub fn count_params(store: &ParamStore) -> usize {
    store.numel()
}

/// Forward FLOPs for one image.
pub fn estimate_flops(model: &SagVit) -> u64 {
    model.flops()
}

pub fn model_stats(model: &SagVit, store: &ParamStore) -> ModelStats {
    let params = count_params(store);
    let flops = estimate_flops(model);
    ModelStats {
        params,
        param_count_millions: params as f64 / 1e6,
        flops,
        flops_giga: flops as f64 / 1e9,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSpec {
    pub grid: usize,
    pub radius: f64,
    pub seed: u64,
    /// Perturb only parameters whose name starts with this prefix.
    pub prefix: Option<String>,
}

/// Loss over `θ + α·d₁ + β·d₂` with `(α, β)` on an evenly spaced
/// `grid×grid` lattice over `[−radius, radius]²`. Each direction is drawn
/// from a standard normal and rescaled per parameter tensor to that
/// tensor's norm. Row `i` holds `α_i`, column `j` holds `β_j`. The
/// parameters are restored exactly afterwards.
pub fn loss_landscape_scan(
    model: &SagVit,
    store: &mut ParamStore,
    images: &[&Image],
    labels: &[usize],
    spec: &LandscapeSpec,
) -> Result<Tensor> {
    if spec.grid == 0 || spec.grid % 2 == 0 {
        return Err(Error::config(format!("landscape grid must be odd, got {}", spec.grid)));
    }
    if !(spec.radius >= 0.0) || !spec.radius.is_finite() {
        return Err(Error::config("landscape radius must be finite and >= 0"));
    }
    let base: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut direction = || -> Vec<Tensor> {
        store
            .iter()
            .map(|(_, p)| {
                let d = Tensor::randn(p.value.shape(), 1.0, &mut rng);
                let selected = spec.prefix.as_deref().is_none_or(|pre| p.name.starts_with(pre));
                let (pn, dn) = (p.value.norm(), d.norm());
                if !selected || pn == 0.0 || dn == 0.0 {
                    Tensor::zeros(p.value.shape())
                } else {
                    d.map(|v| v * pn / dn)
                }
            })
            .collect()
    };
    let d1 = direction();
    let d2 = direction();
    let c = (spec.grid / 2) as f64;
    let coord = |i: usize| if c == 0.0 { 0.0 } else { spec.radius * (i as f64 - c) / c };
    let ids: Vec<_> = store.ids().collect();
    let mut out = vec![0.0; spec.grid * spec.grid];
    let mut result = Ok(());
    'scan: for i in 0..spec.grid {
        for j in 0..spec.grid {
            let (a, b) = (coord(i), coord(j));
            for (k, &id) in ids.iter().enumerate() {
                let p = store.value_mut(id);
                if a == 0.0 && b == 0.0 {
                    p.data_mut().copy_from_slice(base[k].data());
                } else {
                    for (((w, &w0), &x), &y) in p.data_mut().iter_mut().zip(base[k].data()).zip(d1[k].data()).zip(d2[k].data()) {
                        *w = w0 + a * x + b * y;
                    }
                }
            }
            match batch_loss(model, store, images, labels) {
                Ok(l) => out[i * spec.grid + j] = l,
                Err(e) => {
                    result = Err(e);
                    break 'scan;
                }
            }
        }
    }
    for (k, &id) in ids.iter().enumerate() {
        store.value_mut(id).data_mut().copy_from_slice(base[k].data());
    }
    result?;
    Tensor::new(vec![spec.grid, spec.grid], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean training loss over the epoch's optimizer steps.
    pub loss: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Inference images per second of the evaluation pass.
    pub throughput: f64,
    pub epoch_seconds: f64,
}

/// Forward pass over a dataset: mean loss, macro/micro F1, accuracy and
/// throughput.
pub fn evaluate(model: &SagVit, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    data.require_nonempty()?;
    let start = Instant::now();
    let mut preds = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for (imgs, labels) in data.images.chunks(batch_size.max(1)).zip(data.labels.chunks(batch_size.max(1))) {
        let probs = predict_batch(model, store, imgs)?;
        for (p, &l) in probs.iter().zip(labels) {
            if l >= p.len() {
                return Err(Error::shape("label vs class count", &[l], &[p.len()]));
            }
            loss -= p[l].max(f64::MIN_POSITIVE).ln();
            preds.push(argmax(p));
        }
    }
    let secs = start.elapsed().as_secs_f64().max(1e-12);
    Ok(MetricsReport {
        epoch: 0,
        loss: loss / data.len() as f64,
        macro_f1: macro_f1(&preds, &data.labels, model.num_classes())?,
        micro_f1: micro_f1(&preds, &data.labels)?,
        accuracy: accuracy(&preds, &data.labels)?,
        lr: 0.0,
        throughput: images_per_second(data.len(), secs),
        epoch_seconds: secs,
    })
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<MetricsReport>,
    /// Parameters at the epoch with the best training macro F1.
    pub best: ParamStore,
}

/// Trains `store` in place. `on_epoch` sees every report together with the
/// current parameters and whether they are a new best.
pub fn train_loop(
    model: &SagVit,
    store: &mut ParamStore,
    data: &Dataset,
    spec: &OptimSpec,
    seed: u64,
    mut on_epoch: impl FnMut(&MetricsReport, &ParamStore, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    spec.validate()?;
    data.require_nonempty()?;
    let mut state = TrainState::new(store, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches = data.len().div_ceil(spec.batch_size);
    let mut history = Vec::with_capacity(spec.total_epochs);
    let mut best = store.clone();
    for epoch in 0..spec.total_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(spec.batch_size).enumerate() {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, mut grads) = batch_gradients(model, store, &imgs, &labels)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch: epoch + 1,
                    step: state.step as usize + 1,
                });
            }
            clip_gradients(&mut grads, spec.clip_norm);
            lr = step_lr(epoch, b, batches, spec);
            adam_step(store, &mut state, spec, &grads, lr)?;
            loss_sum += loss;
        }
        state.epoch = epoch + 1;
        let eval = evaluate(model, store, data, spec.batch_size)?;
        let report = MetricsReport {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            lr,
            epoch_seconds: start.elapsed().as_secs_f64(),
            ..eval
        };
        let improved = report.macro_f1 > state.best_macro_f1;
        if improved {
            state.best_macro_f1 = report.macro_f1;
            state.best_epoch = Some(epoch + 1);
            best = store.clone();
        }
        on_epoch(&report, store, improved)?;
        let done = spec.stop_at_macro_f1.is_some_and(|t| report.macro_f1 >= t);
        history.push(report);
        if done {
            break;
        }
    }
    Ok(TrainOutcome { state, history, best })
}

/// Rayon pool sized by `SAGVIT_THREADS` (default: available cores).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("SAGVIT_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("SAGVIT_THREADS must be a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> OptimSpec {
        OptimSpec::default()
    }

    #[test]
    fn schedule_points() {
        let s = spec();
        assert!((lr_at(5.0, &s) - 0.0005).abs() < 1e-15);
        assert_eq!(lr_at(10.0, &s), 0.001);
        assert!(lr_at(128.0, &s).abs() < 1e-18);
        assert_eq!(lr_at(0.0, &s), 0.0);
        let below = lr_at(10.0 - 1e-9, &s);
        let above = lr_at(10.0 + 1e-9, &s);
        assert!((below - 0.001).abs() < 1e-12 && (above - 0.001).abs() < 1e-12);
    }

    #[test]
    fn schedule_without_warmup_or_decay() {
        let s = OptimSpec {
            warmup_epochs: 0,
            ..spec()
        };
        assert_eq!(lr_at(0.0, &s), 0.001);
        let s = OptimSpec {
            warmup_epochs: 4,
            total_epochs: 4,
            ..spec()
        };
        assert_eq!(lr_at(4.0, &s), 0.001);
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::new(vec![2], vec![0.3, 0.4]).unwrap()];
        assert_eq!(clip_gradients(&mut g, 1.0), 0.5);
        assert_eq!(g[0].data(), &[0.3, 0.4]);
        let mut g = vec![Tensor::new(vec![2], vec![0.0, 4.0]).unwrap(), Tensor::scalar(0.0)];
        clip_gradients(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        assert_eq!(g[0].data(), &[0.0, 1.0]);
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = scalar_store(1.0);
        let mut st = TrainState::new(&store, 0);
        let sp = OptimSpec {
            weight_decay: 0.0,
            ..spec()
        };
        adam_step(&mut store, &mut st, &sp, &[Tensor::scalar(0.37)], 0.001).unwrap();
        let moved = 1.0 - store.by_name("p").unwrap().item();
        assert!((moved - 0.001 * 0.37 / (0.37 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut store = scalar_store(2.5);
        let mut st = TrainState::new(&store, 0);
        let sp = OptimSpec {
            weight_decay: 0.0,
            ..spec()
        };
        for _ in 0..5 {
            adam_step(&mut store, &mut st, &sp, &[Tensor::scalar(0.0)], 0.01).unwrap();
        }
        assert_eq!(store.by_name("p").unwrap().item(), 2.5);
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut store = scalar_store(2.0);
        let mut st = TrainState::new(&store, 0);
        adam_step(&mut store, &mut st, &spec(), &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(store.by_name("p").unwrap().item(), 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(macro_f1(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        let m = macro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((m - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!(macro_f1(&[], &[], 2).is_err());
        assert_eq!(micro_f1(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn throughput_definition() {
        assert_eq!(images_per_second(100, 2.0), 50.0);
    }
}
