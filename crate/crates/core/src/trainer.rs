//! Adam optimization with step decay, the training and validation loops,
//! checkpoint state, and the multi-seed evaluation protocol.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Checkpoint;
use crate::datasim::{derive_seed, generate_cloud_mask, make_dataset, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{assemble_input, ModelConfig, ModelGraph, ModelParams, Variant};
use crate::objectives::{evaluate_all, multiscale_loss, LossConfig, MetricSet, MetricsReport, ReportRow};
use crate::tensor::{Float, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    pub decay_every: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Validation metrics are computed every this many epochs and after the last one.
    pub val_every: usize,
    /// Checkpoint cadence in epochs; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    /// Redraw every training mask at the start of each epoch.
    pub resample_clouds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            lr: 1e-3,
            gamma: 0.95,
            decay_every: 10,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            val_every: 10,
            checkpoint_every: 0,
            resample_clouds: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epochs", self.epochs), ("batch_size", self.batch_size), ("decay_every", self.decay_every), ("val_every", self.val_every)] {
            if v == 0 {
                return Err(Error::config(format!("train.{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("train.gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config("train.adam_epsilon must be positive"));
        }
        Ok(())
    }
}

/// `lr · γ^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr * config.gamma.powi((epoch / config.decay_every) as i32)
}

/// First and second moments, one tensor per parameter in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Float = f32> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> AdamState<F> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<F>> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        AdamState { step: 0, v: m.clone(), m }
    }

    pub fn for_params(params: &ModelParams<F>) -> Self {
        Self::new(params.iter().map(|(_, t)| t.shape()))
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// `params` and `grads` are aligned with the moments in `state`. Nothing is
/// modified when any gradient entry is non-finite.
pub fn adam_step<'a, F: Float + 'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<F>)>,
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let mut params: Vec<(&str, &mut Tensor<F>)> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("gradient of {name} has shape {:?}, expected {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(config.beta1), F::lit(config.beta2));
    let (c1, c2) = (F::lit(1.0 - config.beta1), F::lit(1.0 - config.beta2));
    let bc1 = F::lit(1.0 - config.beta1.powi(t));
    let bc2 = F::lit(1.0 - config.beta2.powi(t));
    let (lr, eps) = (F::lit(lr), F::lit(config.adam_epsilon));
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Cloud count and size used when training masks are redrawn.
    pub clouds: usize,
    pub cloud_size: f64,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<MetricSet>,
}

pub const LOSS_LOG_HEADER: &str = "epoch,lr,train_loss,val_mse,val_sam,val_psnr,val_ssim";

/// CSV rendering of a loss log.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    for e in log {
        let val = match &e.val {
            Some(m) => format!("{},{},{},{}", m.mse, m.sam, m.psnr, m.ssim),
            None => "-,-,-,-".to_string(),
        };
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.train_loss, val));
    }
    out
}

/// Parameters, optimizer moments, and the log of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    experiment: Experiment,
    step: u64,
    log: Vec<EpochLog>,
}

impl TrainState {
    pub fn init(experiment: &Experiment) -> Result<Self> {
        let params = ModelParams::init(&experiment.model, experiment.train.seed)?;
        let adam = AdamState::for_params(&params);
        Ok(TrainState { params, adam, log: Vec::new() })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    pub fn to_checkpoint(&self, experiment: &Experiment) -> Result<Checkpoint> {
        let meta = CheckpointMeta { experiment: experiment.clone(), step: self.adam.step, log: self.log.clone() };
        let mut tensors = IndexMap::new();
        for (name, t) in self.params.iter() {
            tensors.insert(name.to_string(), t.clone());
        }
        for (i, name) in self.params.names().enumerate() {
            tensors.insert(format!("adam.m.{name}"), self.adam.m[i].clone());
            tensors.insert(format!("adam.v.{name}"), self.adam.v[i].clone());
        }
        Ok(Checkpoint { meta: serde_json::to_value(meta)?, tensors })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Experiment, TrainState)> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())?;
        let mut named = ckpt.tensors.clone();
        let names: Vec<String> = meta.experiment.model.param_shapes().into_iter().map(|(n, _)| n).collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            for (slot, key) in [(&mut m, format!("adam.m.{name}")), (&mut v, format!("adam.v.{name}"))] {
                let t = named
                    .shift_remove(&key)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer entry {key}")))?;
                slot.push(t);
            }
        }
        let params = ModelParams::from_named(&meta.experiment.model, named)?;
        for ((name, p), (mi, vi)) in params.iter().zip(m.iter().zip(&v)) {
            if mi.shape() != p.shape() || vi.shape() != p.shape() {
                return Err(Error::Data(format!("optimizer moments of {name} do not match the parameter shape")));
            }
        }
        let state = TrainState { params, adam: AdamState { step: meta.step, m, v }, log: meta.log };
        Ok((meta.experiment, state))
    }
}

/// Model input for one sample under `config`; radar is passed only to fusion models.
fn sample_input<F: Float>(sample: &Sample, config: &ModelConfig) -> Result<Tensor<F>> {
    let sar = if config.uses_sar() {
        Some(sample.sar.as_ref().ok_or_else(|| Error::config("fusion variant requires SAR channels, but the dataset has none"))?)
    } else {
        None
    };
    assemble_input(&sample.msi_clouded.cast(), sar.map(Tensor::cast).as_ref(), &sample.mask.cast(), config)
}

/// Loss and gradients (in parameter order) for one sample.
fn sample_gradients(
    sample: &Sample,
    params: &ModelParams<f32>,
    experiment: &Experiment,
) -> Result<(f32, Vec<Tensor<f32>>)> {
    let input = sample_input::<f32>(sample, &experiment.model)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let x = tape.constant(input);
    let target = tape.constant(sample.target.clone());
    let out = {
        let mut g = ModelGraph { tape: &mut tape, params: &vars, config: &experiment.model };
        g.forward(x)?
    };
    let pred = tape.permute(out, &[1, 0, 2, 3])?;
    let loss = multiscale_loss(&mut tape, pred, target, &experiment.loss)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|(_, v)| grads.take(v)).collect()))
}

/// Model reconstruction of one sample as `[T, C, H, W]`.
pub fn predict(sample: &Sample, params: &ModelParams<f32>, config: &ModelConfig) -> Result<Tensor<f32>> {
    let input = sample_input::<f32>(sample, config)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(input);
    let mut g = ModelGraph { tape: &mut tape, params: &vars, config };
    let out = g.forward(x)?;
    let pred = g.tape.permute(out, &[1, 0, 2, 3])?;
    Ok(g.tape.value(pred).clone())
}

/// Mean of the per-sample metrics of `samples`.
pub fn evaluate_samples(samples: &[Sample], params: &ModelParams<f32>, config: &ModelConfig) -> Result<MetricSet> {
    let sets = samples
        .par_iter()
        .map(|s| evaluate_all(&predict(s, params, config)?, &s.target, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    MetricSet::mean(&sets).ok_or_else(|| Error::Data("no samples to evaluate".into()))
}

/// Mini-batches of shuffled indices for `epoch`; a trailing batch of one sample is dropped.
pub fn epoch_batches(n: usize, epoch: usize, config: &TrainConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM, epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks(config.batch_size)
        .filter(|b| b.len() == config.batch_size || b.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const RESAMPLE_STREAM: u64 = 0x5245_4d53;

/// Continues `state` until `experiment.train.epochs` epochs are complete.
/// `after_epoch` runs once per finished epoch, e.g. for logging or checkpoints.
pub fn train_from(
    dataset: &Dataset,
    experiment: &Experiment,
    state: TrainState,
    after_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    train_until(dataset, experiment, state, experiment.train.epochs, after_epoch)
}

/// Like [`train_from`] but returns once `until` epochs are complete, so that a
/// later call can continue the same schedule.
pub fn train_until(
    dataset: &Dataset,
    experiment: &Experiment,
    mut state: TrainState,
    until: usize,
    mut after_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    experiment.validate()?;
    let cfg = &experiment.train;
    if dataset.train().is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if experiment.model.uses_sar() && !dataset.has_sar() {
        return Err(Error::config("fusion variant requires SAR channels, but the dataset has none"));
    }
    for epoch in state.epochs_done()..until.min(cfg.epochs) {
        let resampled;
        let train: &[Sample] = if cfg.resample_clouds {
            resampled = dataset
                .train()
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let seed = derive_seed(cfg.seed, RESAMPLE_STREAM + epoch as u64, i as u64);
                    let m = generate_cloud_mask(seed, s.frames(), s.height(), s.width(), experiment.clouds, experiment.cloud_size)?;
                    s.with_mask(m.mask)
                })
                .collect::<Result<Vec<_>>>()?;
            &resampled
        } else {
            dataset.train()
        };
        let lr = lr_at(epoch, cfg);
        let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
        for (bi, batch) in epoch_batches(train.len(), epoch, cfg).iter().enumerate() {
            let params = &state.params;
            let per_sample = batch
                .par_iter()
                .map(|&i| sample_gradients(&train[i], params, experiment))
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            for (loss, g) in per_sample {
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {bi}")));
                }
                loss_sum += loss as f64;
                loss_count += 1;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let inv = 1.0 / batch.len() as f32;
            let grads: Vec<Tensor<f32>> = grads.expect("batches are non-empty").iter().map(|g| g.map(|v| v * inv)).collect();
            adam_step(state.params.iter_mut(), &grads, &mut state.adam, lr, cfg).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{msg} at epoch {epoch}, batch {bi}")),
                other => other,
            })?;
        }
        let last = epoch + 1 == cfg.epochs;
        let val = if !dataset.val().is_empty() && ((epoch + 1) % cfg.val_every == 0 || last) {
            Some(evaluate_samples(dataset.val(), &state.params, &experiment.model)?)
        } else {
            None
        };
        state.log.push(EpochLog { epoch, lr, train_loss: loss_sum / loss_count.max(1) as f64, val });
        after_epoch(&state)?;
    }
    Ok(state)
}

/// Trains from a fresh initialization.
pub fn train(
    dataset: &Dataset,
    experiment: &Experiment,
    after_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    train_from(dataset, experiment, TrainState::init(experiment)?, after_epoch)
}

/// Settings of a protocol sweep.
#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub variants: Vec<Variant>,
    pub cloud_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub n_samples: usize,
    pub cloud_size: f64,
    /// Model template; variant-specific fields are overwritten per cell.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

/// Per-run rows and the summary table of a protocol sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolResult {
    /// One row per (variant, cloud count, seed).
    pub runs: MetricsReport,
    /// Seed-averaged cells per (variant, cloud count) followed by one `(AVG)` row per variant.
    pub table: MetricsReport,
}

/// `template` specialised to `variant`.
pub fn variant_config(template: &ModelConfig, variant: Variant) -> ModelConfig {
    ModelConfig {
        sar_channels: if variant.uses_sar() { crate::model::SAR_BANDS } else { 0 },
        temporal_span: variant.temporal_span(template.frames),
        ..template.clone()
    }
}

/// Trains and evaluates every (variant, cloud count, seed) cell on the validation split.
pub fn run_protocol(config: &ProtocolConfig, mut progress: impl FnMut(&ReportRow)) -> Result<ProtocolResult> {
    if config.seeds.is_empty() || config.cloud_counts.is_empty() || config.variants.is_empty() {
        return Err(Error::config("protocol needs at least one variant, cloud count and seed"));
    }
    let mut runs = MetricsReport::default();
    let mut table = MetricsReport::default();
    let mut averages = Vec::new();
    for &variant in &config.variants {
        let model = variant_config(&config.model, variant);
        let mut cells = Vec::new();
        for &clouds in &config.cloud_counts {
            let data = make_dataset(config.data_seed, config.n_samples, model.height, model.width, clouds, config.cloud_size)?;
            let mut per_seed = Vec::new();
            for &seed in &config.seeds {
                let experiment = Experiment {
                    model: model.clone(),
                    train: TrainConfig { seed, ..config.train.clone() },
                    loss: config.loss.clone(),
                    clouds,
                    cloud_size: config.cloud_size,
                };
                let state = train(&data, &experiment, |_| Ok(()))?;
                let metrics = evaluate_samples(data.val(), &state.params, &model)?;
                let row = ReportRow {
                    variant: variant.label().to_string(),
                    clouds: Some(clouds as u32),
                    seed: Some(seed),
                    split: "val".into(),
                    metrics,
                };
                progress(&row);
                runs.push(row);
                per_seed.push(metrics);
            }
            let cell = MetricSet::mean(&per_seed).expect("seeds are non-empty");
            cells.push(cell);
            table.push(ReportRow {
                variant: variant.label().to_string(),
                clouds: Some(clouds as u32),
                seed: None,
                split: "val".into(),
                metrics: cell,
            });
        }
        averages.push(ReportRow {
            variant: format!("{} (AVG)", variant.label()),
            clouds: None,
            seed: None,
            split: "val".into(),
            metrics: MetricSet::mean(&cells).expect("cloud counts are non-empty"),
        });
    }
    table.rows.extend(averages);
    Ok(ProtocolResult { runs, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(9, &c), 1e-3);
        assert!((lr_at(10, &c) - 9.5e-4).abs() < 1e-18);
        assert!((lr_at(199, &c) - 1e-3 * 0.95f64.powi(19)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f64>::from_fn([3], |i| i as f64)];
        let before = p.clone();
        let mut st = AdamState::<f64>::new([p[0].shape()]);
        let c = TrainConfig::default();
        adam_step(p.iter_mut().map(|t| ("w", t)), &[Tensor::zeros([3])], &mut st, 1e-3, &c).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::<f64>::from_fn([4], |i| i as f64)];
        let mut st = AdamState::<f64>::new([p[0].shape()]);
        let c = TrainConfig::default();
        let g = Tensor::from_fn([4], |i| [0.5, -2.0, 3.0, -0.1][i]);
        adam_step(p.iter_mut().map(|t| ("w", t)), &[g.clone()], &mut st, 1e-3, &c).unwrap();
        for i in 0..4 {
            let moved = i as f64 - p[0].data()[i];
            assert!((moved.abs() - 1e-3).abs() < 1e-8, "{moved}");
            assert_eq!(moved.signum(), g.data()[i].signum());
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = vec![Tensor::<f32>::ones([2]), Tensor::<f32>::ones([1])];
        let mut st = AdamState::<f32>::new(p.iter().map(Tensor::shape).collect::<Vec<_>>());
        let grads = [Tensor::ones([2]), Tensor::new([1], vec![f32::NAN]).unwrap()];
        let names = ["a", "b"];
        let err = adam_step(names.iter().copied().zip(p.iter_mut()), &grads, &mut st, 1e-3, &TrainConfig::default())
            .unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains('b')), "{err}");
        assert_eq!(p[0], Tensor::ones([2]));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn batches_keep_pairs_and_drop_singletons() {
        let c = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        let b = epoch_batches(10, 0, &c);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4, 2]);
        let b = epoch_batches(9, 0, &c);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [4, 4]);
        assert_eq!(epoch_batches(9, 3, &c), epoch_batches(9, 3, &c));
        assert_ne!(epoch_batches(9, 3, &c), epoch_batches(9, 4, &c));
        let mut all: Vec<usize> = epoch_batches(10, 1, &c).concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { gamma: 1.5, ..TrainConfig::default() }.validate().is_err());
    }
}
