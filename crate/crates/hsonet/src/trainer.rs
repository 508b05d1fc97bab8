//! Training loop, evaluation and prediction.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hsonet_core::loss::{compute_loss, ScheduleState};
use hsonet_core::metrics::{colorize, compute_metrics, confusion_slices, merge, ConfusionCounts, MetricReport};
use hsonet_core::nn::{Ctx, Mode};
use hsonet_core::raster::{
    images_to_tensor, masks_to_tensor, tensor_to_prob_maps, threshold, Grid, HardnessTag, ImagePair, LabeledPair,
    Mask, RgbImage,
};
use hsonet_core::synthdata::{AugmentParams, Transform};
use hsonet_core::{Graph, HsoNet, ParamStore, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};

/// One learning-curve line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    pub split: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oa: f64,
    pub miou: f64,
    pub iou: f64,
    pub kappa: f64,
    pub loss: f64,
}

impl CurveRow {
    pub const HEADER: [&'static str; 10] = ["step", "split", "P", "R", "F1", "OA", "mIOU", "IOU", "Kappa", "loss"];

    pub fn new(step: u64, split: &str, report: &MetricReport, loss: f64) -> Self {
        Self {
            step,
            split: split.to_string(),
            precision: report.precision,
            recall: report.recall,
            f1: report.f1,
            oa: report.oa,
            miou: report.miou,
            iou: report.iou,
            kappa: report.kappa,
            loss,
        }
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string(), self.split.clone()];
        for v in [self.precision, self.recall, self.f1, self.oa, self.miou, self.iou, self.kappa, self.loss] {
            r.push(v.to_string());
        }
        r
    }
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CurveRow::HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.record()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Random streams split off the run seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Sample = 2,
    Synth = 3,
}

/// Mixes the run seed with a stream id and two counters (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [stream as u64, a, b] {
        z = z.wrapping_add(v.wrapping_add(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Dataset order of `epoch`.
pub fn epoch_permutation(seed: u64, n: usize, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Shuffle, epoch, 0)));
    order
}

/// Dataset indices of step `t`: the steps walk through consecutive
/// per-epoch permutations, `batch` samples at a time.
pub fn batch_indices(seed: u64, n: usize, t: u64, batch: usize) -> Vec<usize> {
    let start = t * batch as u64;
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in start..start + batch as u64 {
        let epoch = k / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_permutation(seed, n, epoch)));
        }
        out.push(cached.as_ref().unwrap().1[(k % n as u64) as usize]);
    }
    out
}

/// Random crop (when configured) followed by random augmentation, seeded by
/// the run seed, the step and the slot within the batch.
pub fn prepare_sample(lp: &LabeledPair, cfg: &Config, t: u64, slot: usize) -> Result<LabeledPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Sample, t, slot as u64));
    let (w, h) = lp.dims();
    let mut out = match cfg.train.crop_size {
        Some(c) if c < w || c < h => {
            let (cw, ch) = (c.min(w), c.min(h));
            let x0 = rng.random_range(0..=w - cw);
            let y0 = rng.random_range(0..=h - ch);
            LabeledPair {
                pair: ImagePair {
                    t1: lp.pair.t1.crop(x0, y0, cw, ch)?,
                    t2: lp.pair.t2.crop(x0, y0, cw, ch)?,
                },
                mask: lp.mask.crop(x0, y0, cw, ch)?,
                hardness: lp.hardness.crop(x0, y0, cw, ch)?,
            }
        }
        _ => lp.clone(),
    };
    if cfg.train.augment {
        let (w, h) = out.dims();
        out = Transform::sample(&mut rng, &AugmentParams::default(), w == h).apply_pair(&out);
    }
    Ok(out)
}

fn batch_tensors(items: &[&LabeledPair]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let t1 = images_to_tensor(&items.iter().map(|lp| &lp.pair.t1).collect::<Vec<_>>())?;
    let t2 = images_to_tensor(&items.iter().map(|lp| &lp.pair.t2).collect::<Vec<_>>())?;
    let y = masks_to_tensor(&items.iter().map(|lp| &lp.mask).collect::<Vec<_>>())?;
    Ok((t1, t2, y))
}

fn prob_confusion(probs: &[f32], y: &[f32], thr: f64) -> Result<ConfusionCounts> {
    let pred: Vec<u8> = probs.iter().map(|&p| u8::from(p as f64 >= thr)).collect();
    let gt: Vec<u8> = y.iter().map(|&v| u8::from(v > 0.5)).collect();
    Ok(confusion_slices(&pred, &gt)?)
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Schedule step after the update.
    pub t: u64,
    pub loss: f64,
    pub lr: f64,
    pub indices: Vec<usize>,
    /// Training-batch confusion at the configured threshold.
    pub confusion: ConfusionCounts,
}

/// Progress notifications from [`Trainer::run`].
#[derive(Debug, Clone)]
pub enum Event<'a> {
    Step(&'a StepReport),
    Curve(&'a CurveRow),
}

/// Owns the network, its weights and the optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: HsoNet,
    ckpt: Checkpoint,
}

impl Trainer {
    /// Fresh run; `config` must already be resolved.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let (net, ckpt) = Checkpoint::init(config)?;
        Ok(Self { net, ckpt })
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Self {
            net: ckpt.network()?,
            ckpt,
        })
    }

    pub fn network(&self) -> &HsoNet {
        &self.net
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    pub fn config(&self) -> &Config {
        &self.ckpt.config
    }

    /// One optimizer step on the batch scheduled for the current `t`.
    pub fn step(&mut self, data: &[LabeledPair]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let cfg = &self.ckpt.config;
        let t = self.ckpt.t;
        let indices = batch_indices(cfg.seed, data.len(), t, cfg.train.batch_size);
        let samples = indices
            .iter()
            .enumerate()
            .map(|(slot, &i)| prepare_sample(&data[i], cfg, t, slot))
            .collect::<Result<Vec<_>>>()?;
        let (t1, t2, y) = batch_tensors(&samples.iter().collect::<Vec<_>>())?;

        let mut graph = Graph::new();
        let probs_var = {
            let mut cx = Ctx::new(&mut graph, &self.ckpt.params, Mode::Train);
            let a = cx.graph.input(t1);
            let b = cx.graph.input(t2);
            self.net.forward(&mut cx, a, b)?.prediction.probs
        };
        let probs = graph.value(probs_var).clone();
        let out = compute_loss(cfg.loss_kind(), probs.data(), y.data(), ScheduleState { t }, &cfg.loss_config())?;
        if !out.value.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                loss: out.value,
                indices,
            });
        }
        let confusion = prob_confusion(probs.data(), y.data(), cfg.train.threshold)?;
        let seed = Tensor::from_vec(probs.shape(), out.grad)?;
        let grads = graph.backward(probs_var, seed)?;
        let lr = cfg.lr_schedule().at(t);
        self.ckpt.adam.step(&mut self.ckpt.params, &grads, lr)?;
        self.net.commit_bn_stats(&mut graph, &mut self.ckpt.params);
        self.ckpt.t += 1;
        Ok(StepReport {
            t: self.ckpt.t,
            loss: out.value,
            lr,
            indices,
            confusion,
        })
    }

    /// Trains until `t` reaches the configured run length. Every
    /// `eval_interval` steps and at the end a `train` curve row (running
    /// loss and confusion since the previous row) is appended, plus a `val`
    /// row when a validation set is given. The checkpoint is written to
    /// `checkpoint_dir/latest.ckpt` at the same points.
    pub fn run(
        &mut self,
        train: &[LabeledPair],
        val: Option<&[LabeledPair]>,
        observer: &mut dyn FnMut(Event<'_>),
    ) -> Result<()> {
        let steps = self.ckpt.config.train.steps;
        let interval = self.ckpt.config.train.eval_interval;
        let mut loss_sum = 0.0;
        let mut loss_n = 0u64;
        let mut running = ConfusionCounts::ZERO;
        while self.ckpt.t < steps {
            let report = self.step(train)?;
            loss_sum += report.loss;
            loss_n += 1;
            running = merge(running, report.confusion)?;
            observer(Event::Step(&report));
            let t = report.t;
            if t == steps || (interval > 0 && t % interval == 0) {
                let row = CurveRow::new(t, "train", &compute_metrics(running)?, loss_sum / loss_n as f64);
                observer(Event::Curve(&row));
                self.ckpt.history.push(row);
                if let Some(val) = val.filter(|v| !v.is_empty()) {
                    let ev = evaluate(&self.net, &self.ckpt.params, val, &self.ckpt.config, t)?;
                    let row = CurveRow::new(t, "val", &ev.report()?, ev.loss);
                    observer(Event::Curve(&row));
                    self.ckpt.history.push(row);
                }
                if let Some(dir) = &self.ckpt.config.train.checkpoint_dir {
                    self.ckpt.save(&dir.join("latest.ckpt"))?;
                }
                loss_sum = 0.0;
                loss_n = 0;
                running = ConfusionCounts::ZERO;
            }
        }
        Ok(())
    }
}

/// Trains a fresh model on `train` and returns the final checkpoint.
pub fn train(
    mut config: Config,
    train: &[LabeledPair],
    val: Option<&[LabeledPair]>,
    observer: &mut dyn FnMut(Event<'_>),
) -> Result<Checkpoint> {
    config.resolve(train.len());
    let mut trainer = Trainer::new(config)?;
    if trainer.config().train.steps > 0 && train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    trainer.run(train, val, observer)?;
    Ok(trainer.into_checkpoint())
}

/// Confusion counts over a dataset, globally and per hardness tag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub overall: ConfusionCounts,
    /// Indexed by [`HardnessTag::code`].
    pub per_tag: [ConfusionCounts; 5],
    /// Union of all non-easy tags.
    pub hard: ConfusionCounts,
    /// Mean configured loss over the evaluated pixels.
    pub loss: f64,
}

impl Default for Evaluation {
    fn default() -> Self {
        Self {
            overall: ConfusionCounts::ZERO,
            per_tag: [ConfusionCounts::ZERO; 5],
            hard: ConfusionCounts::ZERO,
            loss: 0.0,
        }
    }
}

impl Evaluation {
    pub fn report(&self) -> Result<MetricReport> {
        Ok(compute_metrics(self.overall)?)
    }

    /// Adds the counts of one predicted/ground-truth pair.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, tags: &Grid<HardnessTag>) -> Result<()> {
        gt.same_dims(tags)
            .then_some(())
            .ok_or_else(|| Error::Usage("hardness map size differs from the mask".into()))?;
        let mut per_tag = [ConfusionCounts::ZERO; 5];
        for ((&p, &g), &tag) in pred.pixels().iter().zip(gt.pixels()).zip(tags.pixels()) {
            per_tag[tag.code() as usize].record(p != 0, g != 0);
        }
        let c = hsonet_core::metrics::confusion(pred, gt)?;
        self.overall = merge(self.overall, c)?;
        for tag in HardnessTag::ALL {
            let i = tag.code() as usize;
            self.per_tag[i] = merge(self.per_tag[i], per_tag[i])?;
            if tag.is_hard() {
                self.hard = merge(self.hard, per_tag[i])?;
            }
        }
        Ok(())
    }

    /// Combines evaluations of disjoint shards; the loss becomes the
    /// pixel-weighted mean.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        let (na, nb) = (self.overall.total() as f64, other.overall.total() as f64);
        let mut per_tag = self.per_tag;
        for (a, b) in per_tag.iter_mut().zip(other.per_tag) {
            *a = merge(*a, b)?;
        }
        Ok(Self {
            overall: merge(self.overall, other.overall)?,
            per_tag,
            hard: merge(self.hard, other.hard)?,
            loss: if na + nb > 0.0 {
                (self.loss * na + other.loss * nb) / (na + nb)
            } else {
                0.0
            },
        })
    }
}

/// Change probabilities for each pair, `eval_batch_size` pairs per pass.
pub fn predict_batch(net: &HsoNet, params: &ParamStore<f32>, pairs: &[&ImagePair]) -> Result<Vec<Grid<f64>>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let t1 = images_to_tensor(&pairs.iter().map(|p| &p.t1).collect::<Vec<_>>())?;
    let t2 = images_to_tensor(&pairs.iter().map(|p| &p.t2).collect::<Vec<_>>())?;
    Ok(tensor_to_prob_maps(&net.predict(params, t1, t2)?)?)
}

/// Thresholds predictions at `config.train.threshold` and accumulates
/// confusion counts; the loss is evaluated at schedule step `t`.
pub fn evaluate(
    net: &HsoNet,
    params: &ParamStore<f32>,
    data: &[LabeledPair],
    config: &Config,
    t: u64,
) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    let mut loss_sum = 0.0;
    let mut pixels = 0usize;
    for chunk in data.chunks(config.train.eval_batch_size.max(1)) {
        let items: Vec<&LabeledPair> = chunk.iter().collect();
        let (t1, t2, y) = batch_tensors(&items)?;
        let probs = net.predict(params, t1, t2)?;
        let out = compute_loss::<f32>(config.loss_kind(), probs.data(), y.data(), ScheduleState { t }, &config.loss_config())?;
        loss_sum += out.value * y.numel() as f64;
        pixels += y.numel();
        for (lp, p) in chunk.iter().zip(tensor_to_prob_maps(&probs)?) {
            ev.accumulate(&threshold(&p, config.train.threshold), &lp.mask, &lp.hardness)?;
        }
    }
    ev.loss = if pixels > 0 { loss_sum / pixels as f64 } else { 0.0 };
    Ok(ev)
}

/// Outputs for one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Grid<f64>,
    pub mask: Mask,
    /// Confusion colorization, present when ground truth was supplied.
    pub overlay: Option<RgbImage>,
}

pub fn predict(
    net: &HsoNet,
    params: &ParamStore<f32>,
    pair: &ImagePair,
    gt: Option<&Mask>,
    thr: f64,
) -> Result<Prediction> {
    let probs = predict_batch(net, params, &[pair])?.remove(0);
    let mask = threshold(&probs, thr);
    let overlay = gt.map(|g| colorize(&mask, g)).transpose()?;
    Ok(Prediction { probs, mask, overlay })
}

/// Writes the per-tag breakdown as JSON-ready values.
pub fn breakdown_json(ev: &Evaluation) -> Result<serde_json::Value> {
    let mut tags = serde_json::Map::new();
    let entry = |c: ConfusionCounts| -> Result<serde_json::Value> {
        let metrics = if c.total() > 0 {
            report_json(&compute_metrics(c)?)
        } else {
            serde_json::Value::Null
        };
        Ok(serde_json::json!({
            "pixels": c.total(),
            "tp": c.tp, "fp": c.fp, "fn": c.fn_, "tn": c.tn,
            "metrics": metrics,
        }))
    };
    for tag in HardnessTag::ALL {
        tags.insert(tag.name().to_string(), entry(ev.per_tag[tag.code() as usize])?);
    }
    tags.insert("hard".to_string(), entry(ev.hard)?);
    Ok(serde_json::Value::Object(tags))
}

/// The seven metrics keyed by their report names.
pub fn report_json(r: &MetricReport) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for (name, v) in MetricReport::FIELDS.iter().zip(r.values()) {
        m.insert(name.to_string(), serde_json::json!(v));
    }
    serde_json::Value::Object(m)
}

/// Non-finite loss diagnostic written next to the run outputs.
pub fn write_nonfinite_dump(path: &Path, err: &Error) -> Result<()> {
    if let Error::NonFinite { step, loss, indices } = err {
        let body = serde_json::json!({
            "step": step,
            "loss": loss.to_string(),
            "batch_indices": indices,
        });
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&body).unwrap()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|t| batch_indices(3, n, t, 4)).collect();
        seen.truncate(20);
        let (a, b) = seen.split_at(10);
        for half in [a, b] {
            let mut h = half.to_vec();
            h.sort();
            assert_eq!(h, (0..n).collect::<Vec<_>>());
        }
        assert_ne!(a, b);
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_counter() {
        let s = derive_seed(1, Stream::Sample, 0, 0);
        assert_ne!(s, derive_seed(1, Stream::Shuffle, 0, 0));
        assert_ne!(s, derive_seed(1, Stream::Sample, 1, 0));
        assert_ne!(s, derive_seed(1, Stream::Sample, 0, 1));
        assert_ne!(s, derive_seed(2, Stream::Sample, 0, 0));
    }
}
