//! The `hsonet` command: `synth | train | eval | predict | metrics`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure during training, 1 any other runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hsonet_core::metrics::{compute_metrics, confusion, merge, ConfusionCounts};
use hsonet_core::raster::{HardnessTag, ImagePair};
use hsonet_core::synthdata::{render, scene_spec};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, LossKindName, ScheduleName};
use crate::error::{Error, Result};
use crate::io;
use crate::trainer::{
    breakdown_json, derive_seed, evaluate, predict, report_json, write_curve, write_nonfinite_dump, Event, Stream,
    Trainer,
};

#[derive(Debug, Parser)]
#[command(name = "hsonet", version, about = "Bitemporal change detection with HSONet")]
pub struct Cli {
    /// TOML configuration file (CLI flags take precedence over it).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for weight init, data generation, shuffling and augmentation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "hsonet-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset folder.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Predict the change map of one image pair.
    Predict(PredictArgs),
    /// Score predicted masks against ground-truth masks.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of pairs to write.
    #[arg(long)]
    pub n: Option<usize>,
    /// Canvas width, a multiple of 32.
    #[arg(long)]
    pub width: Option<usize>,
    /// Canvas height, a multiple of 32.
    #[arg(long)]
    pub height: Option<usize>,
    /// Probability that a change is rendered as a hard case.
    #[arg(long)]
    pub hard_case_rate: Option<f64>,
    /// Probability of a global seasonal shift on the second image.
    #[arg(long)]
    pub seasonal_rate: Option<f64>,
    /// Sensor noise standard deviation in 8-bit units.
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Render clean images without shadows, occluders, seasonal shift or noise.
    #[arg(long)]
    pub no_perturb: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset folder.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset folder, evaluated at every curve row.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration is reused.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Run length in epochs; overrides --steps.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Pairs per optimizer step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 penalty added to the gradients.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Steps between x0.1 learning-rate decays (default: half the run).
    #[arg(long)]
    pub lr_step: Option<u64>,
    /// Steps between learning-curve rows.
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Train on random square crops of this side (a multiple of 32).
    #[arg(long)]
    pub crop_size: Option<usize>,
    /// Disable rotations, flips and central crops.
    #[arg(long)]
    pub no_augment: bool,
    /// bce, focal or eo.
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKindName>,
    /// Focusing factor of the hardness weights.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// linear, exponential, cosine or none.
    #[arg(long, value_parser = parse_schedule)]
    pub schedule: Option<ScheduleName>,
    /// Horizon of the loss schedule in steps.
    #[arg(long)]
    pub schedule_step: Option<u64>,
    /// Decoder width.
    #[arg(long)]
    pub decoder_dim: Option<usize>,
    /// Width of the deconvolution head.
    #[arg(long)]
    pub head_dim: Option<usize>,
    /// Binarization threshold for curve metrics.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled dataset folder.
    #[arg(long)]
    pub data: PathBuf,
    /// Binarization threshold (default: the checkpoint's).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write a confusion-colorized map per sample.
    #[arg(long)]
    pub colorize: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// First-date image.
    #[arg(long)]
    pub t1: PathBuf,
    /// Second-date image.
    #[arg(long)]
    pub t2: PathBuf,
    /// Ground-truth mask; enables the colorized confusion map.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Binarization threshold (default: the checkpoint's).
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Predicted mask PNG, or a folder of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth mask PNG, or a folder with matching file names.
    #[arg(long)]
    pub gt: PathBuf,
}

fn parse_loss(s: &str) -> std::result::Result<LossKindName, String> {
    match s {
        "bce" => Ok(LossKindName::Bce),
        "focal" => Ok(LossKindName::Focal),
        "eo" => Ok(LossKindName::Eo),
        _ => Err(format!("unknown loss {s:?} (expected bce, focal or eo)")),
    }
}

fn parse_schedule(s: &str) -> std::result::Result<ScheduleName, String> {
    match s {
        "linear" => Ok(ScheduleName::Linear),
        "exponential" => Ok(ScheduleName::Exponential),
        "cosine" => Ok(ScheduleName::Cosine),
        "none" => Ok(ScheduleName::None),
        _ => Err(format!("unknown schedule {s:?} (expected linear, exponential, cosine or none)")),
    }
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Predict(a) => cmd_predict(cli, a),
        Command::Metrics(a) => cmd_metrics(cli, a),
    }
}

/// Defaults, then the config file, then the global `--seed`.
fn base_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// What was run, with which resolved settings and when.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub build: String,
    pub seed: u64,
    pub config: &'a Config,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_unix: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_unix: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

pub fn build_id() -> String {
    match option_env!("HSONET_BUILD_REV") {
        Some(rev) => format!("hsonet {} ({rev})", env!("CARGO_PKG_VERSION")),
        None => format!("hsonet {}", env!("CARGO_PKG_VERSION")),
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    let s = &mut cfg.synth;
    set(&mut s.n, a.n);
    set(&mut s.width, a.width);
    set(&mut s.height, a.height);
    set(&mut s.hard_case_rate, a.hard_case_rate);
    set(&mut s.seasonal_rate, a.seasonal_rate);
    set(&mut s.noise_std, a.noise_std);
    if a.no_perturb {
        s.perturb = false;
    }
    cfg.synth_params()
        .validate()
        .map_err(|e| Error::Config(vec![e.to_string()]))?;
    let params = cfg.synth_params();

    create_dir(&cli.out)?;
    let mut samples = Vec::with_capacity(cfg.synth.n);
    for i in 0..cfg.synth.n {
        let seed = derive_seed(cfg.seed, Stream::Synth, i as u64, 0);
        let spec = scene_spec(seed, &params)?;
        let lp = render(&spec, params.perturb)?;
        let name = io::sample_name(i);
        io::write_sample(&cli.out, &name, &lp)?;
        let changed = lp.mask.pixels().iter().filter(|&&m| m != 0).count();
        let mut tags = serde_json::Map::new();
        for tag in HardnessTag::ALL {
            let n = lp.hardness.pixels().iter().filter(|&&t| t == tag).count();
            tags.insert(tag.name().to_string(), n.into());
        }
        samples.push(serde_json::json!({
            "name": name,
            "seed": seed,
            "objects": spec.objects.len(),
            "changes": spec.changes.len(),
            "hard_cases": spec.changes.iter().filter(|c| c.hard.is_some()).count(),
            "seasonal": spec.seasonal.is_some(),
            "changed_fraction": changed as f64 / lp.mask.pixels().len() as f64,
            "tag_pixels": tags,
        }));
    }
    // no timestamps: the folder is a pure function of seed and parameters
    let manifest = RunManifest {
        command: "synth",
        build: build_id(),
        seed: cfg.seed,
        config: &cfg,
        started_unix: None,
        finished_unix: None,
        extra: Some(serde_json::json!({ "samples": samples })),
    };
    write_json(&cli.out.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} pairs to {}", cfg.synth.n, cli.out.display());
    Ok(())
}

fn apply_train_flags(cfg: &mut Config, a: &TrainArgs) {
    let t = &mut cfg.train;
    set(&mut t.steps, a.steps);
    if a.epochs.is_some() {
        t.epochs = a.epochs;
    }
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.learning_rate, a.lr);
    set(&mut t.weight_decay, a.weight_decay);
    if a.lr_step.is_some() {
        t.lr_step = a.lr_step;
    }
    set(&mut t.eval_interval, a.eval_interval);
    if a.crop_size.is_some() {
        t.crop_size = a.crop_size;
    }
    if a.no_augment {
        t.augment = false;
    }
    set(&mut t.threshold, a.threshold);
    let l = &mut cfg.loss;
    set(&mut l.kind, a.loss);
    set(&mut l.gamma, a.gamma);
    set(&mut l.schedule, a.schedule);
    if a.schedule_step.is_some() {
        l.step = a.schedule_step;
    }
    set(&mut cfg.model.decoder_dim, a.decoder_dim);
    set(&mut cfg.model.head_dim, a.head_dim);
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    require_exists(&a.data, "dataset path")?;
    if let Some(v) = &a.val {
        require_exists(v, "validation dataset path")?;
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            set(&mut ckpt.config.train.steps, a.steps);
            Trainer::resume(ckpt)?
        }
        None => {
            let mut cfg = base_config(cli)?;
            apply_train_flags(&mut cfg, a);
            let n = io::load_folder(&a.data)?.len();
            cfg.resolve(n);
            cfg.validate()?;
            Trainer::new(cfg)?
        }
    };
    let train = io::load_folder(&a.data)?;
    if train.is_empty() && trainer.config().train.steps > trainer.checkpoint().t {
        return Err(Error::Usage(format!("dataset {} contains no samples", a.data.display())));
    }
    let val = a.val.as_deref().map(io::load_folder).transpose()?;

    create_dir(&cli.out)?;
    let started = now_unix();
    let config = trainer.config().clone();
    let manifest = |finished| RunManifest {
        command: "train",
        build: build_id(),
        seed: config.seed,
        config: &config,
        started_unix: Some(started),
        finished_unix: finished,
        extra: Some(serde_json::json!({
            "data": a.data,
            "val": a.val,
            "resume": a.resume,
        })),
    };
    write_json(&cli.out.join("manifest.json"), &manifest(None))?;
    std::fs::write(cli.out.join("config.toml"), config.to_toml_string())
        .map_err(|e| Error::io(cli.out.join("config.toml"), e))?;

    let steps = config.train.steps;
    let mut observer = |ev: Event<'_>| match ev {
        Event::Step(r) if r.t % 50 == 0 || r.t == steps => {
            eprintln!("step {}/{steps} loss {:.5} lr {:.2e}", r.t, r.loss, r.lr)
        }
        Event::Curve(row) => eprintln!(
            "[{}] step {} F1 {:.4} IoU {:.4} OA {:.4} loss {:.5}",
            row.split, row.step, row.f1, row.iou, row.oa, row.loss
        ),
        _ => {}
    };
    let result = trainer.run(&train.pairs, val.as_ref().map(|d| d.pairs.as_slice()), &mut observer);
    if let Err(e @ Error::NonFinite { .. }) = &result {
        write_nonfinite_dump(&cli.out.join("nonfinite.json"), e)?;
    }
    result?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&cli.out.join("model.ckpt"))?;
    write_curve(&cli.out.join("curve.csv"), &ckpt.history)?;
    write_json(&cli.out.join("manifest.json"), &manifest(Some(now_unix())))?;
    eprintln!("checkpoint written to {}", cli.out.join("model.ckpt").display());
    Ok(())
}

fn metrics_csv(path: &Path, step: u64, c: ConfusionCounts) -> Result<()> {
    let r = compute_metrics(c)?;
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["step".to_string()];
    header.extend(hsonet_core::metrics::MetricReport::FIELDS.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    let mut row = vec![step.to_string()];
    row.extend(r.values().iter().map(|v| v.to_string()));
    w.write_record(&row).map_err(csv_err)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    require_exists(&a.ckpt, "checkpoint")?;
    require_exists(&a.data, "dataset path")?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = io::load_folder(&a.data)?;
    if data.is_empty() {
        return Err(Error::Usage(format!("dataset {} contains no samples", a.data.display())));
    }
    let mut cfg = ckpt.config.clone();
    if let Some(file) = &cli.config {
        cfg.train.threshold = Config::load(file)?.train.threshold;
    }
    set(&mut cfg.train.threshold, a.threshold);
    cfg.validate()?;
    let net = ckpt.network()?;

    create_dir(&cli.out)?;
    let ev = evaluate(&net, &ckpt.params, &data.pairs, &cfg, ckpt.t)?;
    if a.colorize {
        let dir = cli.out.join("overlays");
        for (name, lp) in data.names.iter().zip(&data.pairs) {
            let p = predict(&net, &ckpt.params, &lp.pair, Some(&lp.mask), cfg.train.threshold)?;
            io::write_rgb(&dir.join(name), p.overlay.as_ref().expect("ground truth supplied"))?;
        }
    }
    metrics_csv(&cli.out.join("metrics.csv"), ckpt.t, ev.overall)?;
    let report = serde_json::json!({
        "checkpoint": a.ckpt,
        "data": a.data,
        "samples": data.len(),
        "step": ckpt.t,
        "threshold": cfg.train.threshold,
        "loss": ev.loss,
        "counts": { "tp": ev.overall.tp, "fp": ev.overall.fp, "fn": ev.overall.fn_, "tn": ev.overall.tn },
        "metrics": report_json(&ev.report()?),
        "hardness": breakdown_json(&ev)?,
    });
    write_json(&cli.out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report["metrics"]).unwrap());
    Ok(())
}

fn cmd_predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    require_exists(&a.ckpt, "checkpoint")?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut thr = ckpt.config.train.threshold;
    if let Some(file) = &cli.config {
        thr = Config::load(file)?.train.threshold;
    }
    set(&mut thr, a.threshold);
    if !(0.0..=1.0).contains(&thr) {
        return Err(Error::Config(vec![format!("threshold must lie in [0, 1], got {thr}")]));
    }
    let pair = ImagePair::new(io::read_rgb(&a.t1)?, io::read_rgb(&a.t2)?)?;
    let (w, h) = pair.dims();
    hsonet_core::encoder::check_divisible(h, w)?;
    let gt = a.gt.as_deref().map(io::read_mask).transpose()?;
    let net = ckpt.network()?;
    let p = predict(&net, &ckpt.params, &pair, gt.as_ref(), thr)?;
    create_dir(&cli.out)?;
    io::write_prob16(&cli.out.join("prob.png"), &p.probs)?;
    io::write_mask(&cli.out.join("mask.png"), &p.mask)?;
    if let Some(overlay) = &p.overlay {
        io::write_rgb(&cli.out.join("overlay.png"), overlay)?;
    }
    eprintln!("wrote predictions to {}", cli.out.display());
    Ok(())
}

fn mask_pairs(pred: &Path, gt: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    require_exists(pred, "prediction path")?;
    require_exists(gt, "ground-truth path")?;
    if pred.is_file() {
        return Ok(vec![(pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut names: Vec<_> = std::fs::read_dir(pred)
        .map_err(|e| Error::io(pred, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| n.to_string_lossy().to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let g = gt.join(&n);
            if g.is_file() {
                Ok((pred.join(&n), g))
            } else {
                Err(Error::load(&g, "missing ground truth for prediction"))
            }
        })
        .collect()
}

fn cmd_metrics(cli: &Cli, a: &MetricsArgs) -> Result<()> {
    let pairs = mask_pairs(&a.pred, &a.gt)?;
    if pairs.is_empty() {
        return Err(Error::Usage(format!("no prediction masks found in {}", a.pred.display())));
    }
    let mut total = ConfusionCounts::ZERO;
    for (p, g) in &pairs {
        let (pm, gm) = (io::read_mask(p)?, io::read_mask(g)?);
        let c = confusion(&pm, &gm).map_err(|e| Error::load(p, e.to_string()))?;
        total = merge(total, c)?;
    }
    create_dir(&cli.out)?;
    metrics_csv(&cli.out.join("metrics.csv"), 0, total)?;
    let report = serde_json::json!({
        "masks": pairs.len(),
        "counts": { "tp": total.tp, "fp": total.fp, "fn": total.fn_, "tn": total.tn },
        "metrics": report_json(&compute_metrics(total)?),
    });
    write_json(&cli.out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report["metrics"]).unwrap());
    Ok(())
}
