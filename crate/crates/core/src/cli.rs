//! Command-line front end: dataset generation, training, evaluation,
//! reconstruction rendering and the protocol sweep.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataio::{
    error_map, read_checkpoint, read_container, write_checkpoint, write_container, write_error_png, write_png,
    dataset_digest, NATURAL_COLOR,
};
use crate::datasim::{make_dataset, CloudMask, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::objectives::{evaluate_all, MetricSet, MetricsReport, ReportRow};
use crate::tensor::Tensor;
use crate::trainer::{
    evaluate_samples, loss_log_csv, predict, run_protocol, train_until, Experiment, ProtocolConfig, TrainState,
};

pub const THREADS_ENV: &str = "TUBELET_THREADS";
pub const FINAL_CHECKPOINT: &str = "checkpoint.tblt";
pub const LOSS_LOG: &str = "loss_log.csv";
/// Signed error that saturates the error-map colours.
pub const ERROR_MAP_LIMIT: f32 = 0.2;

#[derive(Debug, Parser)]
#[command(name = "tubelet", version, about = "Tubelet transformers for cloud-robust multispectral time-series reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic clouded dataset container.
    GenData(GenDataArgs),
    /// Train a model on a dataset container.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Render per-date input, reconstruction, error and target PNGs for one sample.
    Reconstruct(ReconstructArgs),
    /// Train and evaluate every variant × cloud count × seed and write the summary table.
    Protocol(ProtocolArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output container path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub clouds: Option<usize>,
    #[arg(long)]
    pub cloud_size: Option<f64>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Omit the SAR channels (optical-only dataset).
    #[arg(long)]
    pub no_sar: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset container.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; defaults to the configured out_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run of the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Stop after this many epochs in this invocation, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained checkpoint; required unless --identity is given.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for metrics.csv and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    pub identity: bool,
    /// Redraw the masks with this many clouds before evaluating.
    #[arg(long)]
    pub clouds: Option<usize>,
    #[arg(long)]
    pub cloud_size: Option<f64>,
    /// Seed of the redrawn masks.
    #[arg(long, default_value_t = 42)]
    pub mask_seed: u64,
    /// Which split to score: val, train or all.
    #[arg(long, default_value = "val")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample index within the container.
    #[arg(long)]
    pub sample: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the ground truth as the reconstruction.
    #[arg(long)]
    pub identity: bool,
    /// Bands mapped to red, green and blue.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [NATURAL_COLOR.0, NATURAL_COLOR.1, NATURAL_COLOR.2])]
    pub bands: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of seeds, counted up from the configured training seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [20usize, 30])]
    pub clouds: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_samples: Option<usize>,
}

/// Sizes the worker pool from `TUBELET_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool may already exist when called twice in one process; that is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Reconstruct(a) => reconstruct(&a),
        Command::Protocol(a) => protocol(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let d = &mut cfg.data;
    d.seed = a.seed.unwrap_or(d.seed);
    d.n_samples = a.n_samples.unwrap_or(d.n_samples);
    d.clouds = a.clouds.unwrap_or(d.clouds);
    d.cloud_size = a.cloud_size.unwrap_or(d.cloud_size);
    d.height = a.height.unwrap_or(d.height);
    d.width = a.width.unwrap_or(d.width);
    let d = &cfg.data;
    let mut data = make_dataset(d.seed, d.n_samples, d.height, d.width, d.clouds, d.cloud_size)?;
    if a.no_sar {
        data = data.without_sar();
    }
    write_container(&a.out, &data)?;
    let fractions: Vec<f64> = data
        .samples
        .iter()
        .map(|s| CloudMask { mask: s.mask.clone(), cloud_count: d.clouds, cloud_size: d.cloud_size, seed: 0 }.fraction())
        .collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    let min = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    let max = fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "samples {} train {} val {} clouds {} cloud_size {} sar {} masked_fraction mean {:.4} min {:.4} max {:.4} digest {} -> {}",
        data.len(),
        data.train().len(),
        data.val().len(),
        d.clouds,
        d.cloud_size,
        data.has_sar(),
        mean,
        min,
        max,
        dataset_digest(&data)?,
        a.out.display()
    );
    Ok(())
}

fn train_experiment(a: &TrainArgs) -> Result<(RunConfig, Experiment)> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.model.variant = v;
        cfg.model.t = None;
    }
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.lr = a.lr.unwrap_or(t.lr);
    t.seed = a.seed.unwrap_or(t.seed);
    t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
    let exp = cfg.experiment()?;
    Ok((cfg, exp))
}

/// Checks that a container fits the model's extents and inputs.
fn check_data(data: &Dataset, model: &ModelConfig) -> Result<()> {
    if model.uses_sar() && !data.has_sar() {
        return Err(Error::config("the configured variant fuses SAR, but the dataset container has no SAR channels"));
    }
    if let Some(s) = data.samples.first() {
        let got = (s.frames(), s.height(), s.width());
        if got != (model.frames, model.height, model.width) {
            return Err(Error::config(format!(
                "dataset samples are {}×{}×{} (T×H×W) but the model expects {}×{}×{}",
                got.0, got.1, got.2, model.frames, model.height, model.width
            )));
        }
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let (cfg, exp) = train_experiment(a)?;
    let data = read_container(&a.data)?;
    check_data(&data, &exp.model)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    create_dir(&out)?;
    let state = match &a.resume {
        Some(path) => {
            let (saved, state) = TrainState::from_checkpoint(&read_checkpoint(path)?)?;
            let mut comparable = saved.clone();
            comparable.train.epochs = exp.train.epochs;
            if comparable != exp {
                return Err(Error::config(format!("{} was written with a different configuration", path.display())));
            }
            state
        }
        None => TrainState::init(&exp)?,
    };
    let stop = a.stop_after.map(|n| state.epochs_done() + n);
    let total = exp.train.epochs;
    let every = exp.train.checkpoint_every;
    let final_state = train_until(&data, &exp, state, stop.unwrap_or(total), |s| {
        let e = s.log.last().expect("an epoch was just logged");
        let val = e.val.map(|m| format!(" val_mse {:.6} val_ssim {:.4}", m.mse, m.ssim)).unwrap_or_default();
        println!("epoch {}/{} lr {:.3e} loss {:.6}{val}", e.epoch + 1, total, e.lr, e.train_loss);
        if every > 0 && s.epochs_done() % every == 0 {
            let path = out.join(format!("checkpoint_e{:04}.tblt", s.epochs_done()));
            write_checkpoint(&path, &s.to_checkpoint(&exp)?)?;
        }
        Ok(())
    })?;
    write_checkpoint(&out.join(FINAL_CHECKPOINT), &final_state.to_checkpoint(&exp)?)?;
    write_text(&out.join(LOSS_LOG), &loss_log_csv(&final_state.log))?;
    println!("wrote {} and {} to {}", FINAL_CHECKPOINT, LOSS_LOG, out.display());
    Ok(())
}

/// Trained parameters, or `None` in identity mode.
fn load_model(checkpoint: Option<&Path>, identity: bool) -> Result<Option<(Experiment, TrainState)>> {
    match (checkpoint, identity) {
        (_, true) => Ok(None),
        (Some(p), false) => Ok(Some(TrainState::from_checkpoint(&read_checkpoint(p)?)?)),
        (None, false) => Err(Error::config("--checkpoint is required unless --identity is given")),
    }
}

fn select_split<'a>(data: &'a Dataset, split: &str) -> Result<&'a [Sample]> {
    let s = match split {
        "val" => data.val(),
        "train" => data.train(),
        "all" => &data.samples,
        other => return Err(Error::config(format!("unknown split {other:?}; expected val, train or all"))),
    };
    if s.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")));
    }
    Ok(s)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let model = load_model(a.checkpoint.as_deref(), a.identity)?;
    let mut data = read_container(&a.data)?;
    let default_clouds = model.as_ref().map_or(cfg.data.clouds, |(e, _)| e.clouds);
    let default_size = model.as_ref().map_or(cfg.data.cloud_size, |(e, _)| e.cloud_size);
    if let Some(c) = a.clouds {
        data = data.remask(a.mask_seed, c, a.cloud_size.unwrap_or(default_size))?;
    }
    let samples = select_split(&data, &a.split)?;
    let (variant, seed, metrics) = match &model {
        None => {
            let sets = samples
                .iter()
                .map(|s| evaluate_all(&s.target, &s.target, &s.mask))
                .collect::<Result<Vec<_>>>()?;
            ("identity".to_string(), None, MetricSet::mean(&sets).expect("non-empty split"))
        }
        Some((exp, state)) => {
            check_data(&data, &exp.model)?;
            let label = variant_label(&exp.model);
            (label, Some(exp.train.seed), evaluate_samples(samples, &state.params, &exp.model)?)
        }
    };
    let mut report = MetricsReport::default();
    report.push(ReportRow {
        variant,
        clouds: Some(a.clouds.unwrap_or(default_clouds) as u32),
        seed,
        split: a.split.clone(),
        metrics,
    });
    report.write(&a.out, "metrics")?;
    print!("{}", report.render_table());
    Ok(())
}

/// Report label of the variant a model configuration corresponds to.
fn variant_label(model: &ModelConfig) -> String {
    Variant::ALL
        .into_iter()
        .find(|v| v.uses_sar() == model.uses_sar() && v.temporal_span(model.frames) == model.temporal_span)
        .map_or_else(|| format!("custom-t{}", model.temporal_span), |v| v.label().to_string())
}

/// Date `t` of a `[T, C, H, W]` stack as `[C, H, W]`.
pub fn frame(stack: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    let s = stack.shape();
    let len = s[1] * s[2] * s[3];
    Tensor::new(vec![s[1], s[2], s[3]], stack.data()[t * len..(t + 1) * len].to_vec())
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<()> {
    let _ = RunConfig::load_or_default(a.config.as_deref())?;
    let model = load_model(a.checkpoint.as_deref(), a.identity)?;
    let data = read_container(&a.data)?;
    let sample = data
        .samples
        .get(a.sample)
        .ok_or_else(|| Error::config(format!("sample {} out of range for {} samples", a.sample, data.len())))?;
    let recon = match &model {
        None => sample.target.clone(),
        Some((exp, state)) => {
            check_data(&data, &exp.model)?;
            predict(sample, &state.params, &exp.model)?
        }
    };
    let bands = (a.bands[0], a.bands[1], a.bands[2]);
    create_dir(&a.out)?;
    for t in 0..sample.frames() {
        let target = frame(&sample.target, t)?;
        let rec = frame(&recon, t)?;
        let name = |kind: &str| a.out.join(format!("sample{:03}_t{t}_{kind}.png", a.sample));
        write_png(&frame(&sample.msi_clouded, t)?, bands, &name("input"))?;
        write_png(&rec, bands, &name("reconstruction"))?;
        write_error_png(&error_map(&rec, &target)?, ERROR_MAP_LIMIT, &name("error"))?;
        write_png(&target, bands, &name("target"))?;
    }
    println!("wrote {} PNGs to {}", 4 * sample.frames(), a.out.display());
    Ok(())
}

pub fn protocol(a: &ProtocolArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.data.n_samples = a.n_samples.unwrap_or(cfg.data.n_samples);
    let model = cfg.model_config()?;
    let pc = ProtocolConfig {
        variants: if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() },
        cloud_counts: a.clouds.clone(),
        seeds: (0..a.seeds as u64).map(|i| cfg.train.seed + i).collect(),
        data_seed: cfg.data.seed,
        n_samples: cfg.data.n_samples,
        cloud_size: cfg.data.cloud_size,
        model,
        train: cfg.train.clone(),
        loss: cfg.loss.clone(),
    };
    let result = run_protocol(&pc, |row| {
        println!(
            "{} clouds {} seed {} val_mse {:.6} val_ssim {:.4}",
            row.variant,
            row.clouds.unwrap_or_default(),
            row.seed.unwrap_or_default(),
            row.metrics.mse,
            row.metrics.ssim
        );
    })?;
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    result.runs.write(&out, "protocol_runs")?;
    result.table.write(&out, "protocol_table")?;
    let table = result.table.render_table();
    write_text(&out.join("protocol_table.txt"), &table)?;
    print!("{table}");
    Ok(())
}
