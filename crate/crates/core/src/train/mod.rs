//! Pretraining, probe training and the evaluation protocols.
//!
//! All randomness is derived from `TrainConfig::seed` through
//! [`rng::derive`] keyed by epoch and sample id, so a run resumed at an
//! epoch boundary replays the uninterrupted run exactly.

mod eval;
mod optim;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub use eval::{evaluate_classification, evaluate_reconstruction, evaluate_revision, evaluate_robustness, Protocol, EVAL_CHUNK};
pub use optim::{decay_excluded, Adam, AdamConfig, LrSchedule};

use crate::checkpoint::{Checkpoint, LoadMode, KIND_AUTOENCODER, KIND_PROBE, OPT_M_PREFIX, OPT_V_PREFIX};
use crate::corruption::{sample_training_chain, CorruptionKind, CorruptionSpec, TRAINING_KINDS};
use crate::data::{shuffled, ImageBatch};
use crate::error::{Error, Result};
use crate::model::{is_probe_param, Autoencoder, ProbeClassifier};
use crate::rng;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 11;
const CORRUPT_STREAM: u64 = 12;
const DETECT_STREAM: u64 = 13;

/// Learning rate used with the default batch of 64; scaled linearly with batch size.
pub const BASE_LR_PER_64: f64 = 1.5e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stops early after this many optimizer steps; the schedule ends there too.
    pub max_steps: Option<usize>,
    /// Training corruptions applied in sequence per image (1 = single corruption).
    pub corruptions_per_image: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 64,
            base_lr: BASE_LR_PER_64,
            weight_decay: 0.05,
            warmup_epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            max_steps: None,
            corruptions_per_image: 1,
        }
    }
}

impl TrainConfig {
    pub fn default_base_lr(batch_size: usize) -> f64 {
        BASE_LR_PER_64 * batch_size as f64 / 64.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("learning rate and weight decay must be finite"));
        }
        if self.corruptions_per_image == 0 {
            return Err(Error::config("corruptions_per_image must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(samples);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        let total = self.total_steps(samples);
        LrSchedule {
            base_lr: self.base_lr,
            warmup_steps: (self.warmup_epochs * self.steps_per_epoch(samples)).min(total.saturating_sub(1)),
            total_steps: total,
        }
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("max_steps", self.max_steps.map_or("none".into(), |m| m.to_string())),
            ("corruptions_per_image", self.corruptions_per_image.to_string()),
        ]
    }

    /// Overrides fields present in `kv`; unknown keys are left to the caller.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::config(format!("bad value {v:?} for {k}")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "epochs" => self.epochs = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "base_lr" => self.base_lr = parse(k, v)?,
                "weight_decay" => self.weight_decay = parse(k, v)?,
                "warmup_epochs" => self.warmup_epochs = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "beta1" => self.beta1 = parse(k, v)?,
                "beta2" => self.beta2 = parse(k, v)?,
                "eps" => self.eps = parse(k, v)?,
                "max_steps" => self.max_steps = if v == "none" { None } else { Some(parse(k, v)?) },
                "corruptions_per_image" => self.corruptions_per_image = parse(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().to_kv().into_iter().map(|(k, _)| k).collect()
    }
}

/// One optimizer step of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub synthetic: f64,
    pub anatomy: f64,
}

pub const HISTORY_HEADER: &str = "step,lr,loss_total,loss_rs,loss_ri";

/// Shortest round-trip float formatting, so parsing restores every value exactly.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let _ = writeln!(out, "{},{:?},{:?},{:?},{:?}", r.step, r.lr, r.total, r.synthetic, r.anatomy);
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<LossRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::config("loss history header mismatch"));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::config(format!("bad loss history line {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                total: num(f[2])?,
                synthetic: num(f[3])?,
                anatomy: num(f[4])?,
            })
        })
        .collect()
}

/// Corruption chain drawn for one image in one epoch.
pub fn training_chain(cfg: &TrainConfig, epoch: usize, sample_id: u64) -> Vec<CorruptionSpec> {
    sample_training_chain(
        rng::derive(cfg.seed, &[CORRUPT_STREAM, epoch as u64, sample_id]),
        cfg.corruptions_per_image,
    )
}

fn corrupt_chain(image: &[f32], chain: &[CorruptionSpec], dims: (usize, usize, usize)) -> Vec<f32> {
    let (c, h, w) = dims;
    chain
        .iter()
        .fold(image.to_vec(), |img, spec| spec.apply_image(&img, c, h, w, 0))
}

/// Autoencoder, optimizer and progress counters of a pretraining run.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub model: Autoencoder<f32>,
    pub optimizer: Adam<f32>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl Pretrainer {
    pub fn new(model: Autoencoder<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params(), config.adam(), |_| true);
        Ok(Pretrainer {
            model,
            optimizer,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn is_done(&self, samples: usize) -> bool {
        self.epoch >= self.config.epochs || self.step >= self.config.total_steps(samples)
    }

    /// One pass over `data` in the epoch's shuffled order.
    pub fn run_epoch(&mut self, data: &ImageBatch) -> Result<Vec<LossRecord>> {
        let n = data.len();
        let schedule = self.config.schedule(n);
        let order = shuffled(n, rng::derive(self.config.seed, &[SHUFFLE_STREAM, self.epoch as u64]));
        let dims = data.dims();
        let mut history = vec![];
        for chunk in order.chunks(self.config.batch_size) {
            if self.step >= schedule.total_steps {
                break;
            }
            let clean = data.select(chunk);
            let mut synthetic = Vec::with_capacity(clean.images.len());
            for (j, &id) in clean.ids.iter().enumerate() {
                let chain = training_chain(&self.config, self.epoch, id);
                synthetic.extend(corrupt_chain(clean.image(j), &chain, dims));
            }
            let synthetic = Tensor::new(clean.images.shape().to_vec(), synthetic)?;
            let lr = schedule.lr(self.step);
            let (loss, grads) = self.model.loss_and_grads(&clean.images, &synthetic)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("loss at step {}", self.step),
                });
            }
            self.optimizer.step(self.model.params_mut(), &grads, lr)?;
            history.push(LossRecord {
                step: self.step,
                lr,
                total: loss.total,
                synthetic: loss.synthetic,
                anatomy: loss.anatomy,
            });
            self.step += 1;
        }
        self.epoch += 1;
        Ok(history)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, data: &ImageBatch) -> Result<Vec<LossRecord>> {
        let mut history = vec![];
        while !self.is_done(data.len()) {
            history.extend(self.run_epoch(data)?);
        }
        Ok(history)
    }

    /// Parameters, optimizer moments and progress counters.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_params(self.model.config(), KIND_AUTOENCODER, self.model.params())?;
        ck.set("epoch", self.epoch);
        ck.set("step", self.step);
        ck.set("optimizer", 1);
        ck.set("opt_t", self.optimizer.t);
        for (k, v) in self.config.to_kv() {
            ck.set(&format!("train.{k}"), v);
        }
        let names: Vec<String> = self.model.params().iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            ck.push(format!("{OPT_M_PREFIX}{name}"), self.optimizer.m[i].clone())?;
            ck.push(format!("{OPT_V_PREFIX}{name}"), self.optimizer.v[i].clone())?;
        }
        Ok(ck)
    }

    /// Continues a run from [`Pretrainer::checkpoint`] output. `config`
    /// must describe the same run (epochs may be extended).
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        if !ck.has_optimizer() {
            return Err(Error::State("checkpoint has no optimizer state to resume from".into()));
        }
        let model = ck.load_autoencoder(None, LoadMode::Strict)?;
        let mut trainer = Pretrainer::new(model, config)?;
        let names: Vec<String> = trainer.model.params().iter().map(|(n, _)| n.to_string()).collect();
        let mut missing = vec![];
        for (i, name) in names.iter().enumerate() {
            match (
                ck.tensor(&format!("{OPT_M_PREFIX}{name}")),
                ck.tensor(&format!("{OPT_V_PREFIX}{name}")),
            ) {
                (Some(m), Some(v)) if m.shape() == trainer.optimizer.m[i].shape() && v.shape() == m.shape() => {
                    trainer.optimizer.m[i] = m.clone();
                    trainer.optimizer.v[i] = v.clone();
                }
                _ => missing.push(format!("optimizer moments for {name} missing or misshapen")),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Mismatch(missing));
        }
        trainer.optimizer.t = ck.get_parsed("opt_t")?;
        trainer.epoch = ck.get_parsed("epoch")?;
        trainer.step = ck.get_parsed("step")?;
        Ok(trainer)
    }
}

/// Pretrains `model` from scratch on `data`.
pub fn pretrain(model: Autoencoder<f32>, data: &ImageBatch, config: &TrainConfig) -> Result<(Pretrainer, Vec<LossRecord>)> {
    let mut trainer = Pretrainer::new(model, config.clone())?;
    let history = trainer.run(data)?;
    Ok((trainer, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTask {
    /// Dataset labels on clean inputs.
    Disease,
    /// Which training corruption (or none) the input carries; 8 classes.
    Detection,
}

impl ProbeTask {
    pub fn classes(self, dataset_classes: usize) -> usize {
        match self {
            ProbeTask::Disease => dataset_classes,
            ProbeTask::Detection => TRAINING_KINDS.len() + 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Disease => "disease",
            ProbeTask::Detection => "detect",
        }
    }
}

impl std::str::FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disease" => Ok(ProbeTask::Disease),
            "detect" | "detection" => Ok(ProbeTask::Detection),
            _ => Err(Error::config(format!(
                "unknown probe task {s:?} (expected disease or detect)"
            ))),
        }
    }
}

/// Corrupts every image for the detection task. Labels are stratified: in
/// a seeded order, position `p` gets class `p mod 8` (0 = clean), so class
/// counts differ by at most one. Severity is uniform over 1..=3.
pub fn detection_batch(images: &ImageBatch, seed: u64) -> Result<ImageBatch> {
    let (c, h, w) = images.dims();
    let classes = TRAINING_KINDS.len() as u64 + 1;
    let order = shuffled(images.len(), rng::derive(seed, &[DETECT_STREAM]));
    let mut label = vec![0usize; images.len()];
    for (p, &i) in order.iter().enumerate() {
        label[i] = p % classes as usize;
    }
    let mut data = Vec::with_capacity(images.images.len());
    let mut specs = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let s = rng::derive(seed, &[DETECT_STREAM, images.ids[i]]);
        let kind = CorruptionKind::from_detection_label(label[i]).expect("label below 8");
        let spec = if kind == CorruptionKind::Clean {
            CorruptionSpec::clean()
        } else {
            CorruptionSpec::new(kind, 1 + rng::below(s, 0, 0, 3) as u8, rng::bits(s, 1, 0))?
        };
        data.extend(spec.apply_image(images.image(i), c, h, w, 0));
        specs.push(Some(spec));
    }
    Ok(ImageBatch {
        images: Tensor::new(images.images.shape().to_vec(), data)?,
        labels: label,
        ids: images.ids.clone(),
        corruptions: specs,
    })
}

/// Frozen latents for every image, computed in chunks.
pub fn encode_all(probe: &ProbeClassifier<f32>, images: &ImageBatch) -> Result<Tensor<f32>> {
    let mut data = vec![];
    let mut shape = vec![];
    for start in (0..images.len()).step_by(EVAL_CHUNK) {
        let part = images.slice(start..(start + EVAL_CHUNK).min(images.len()));
        let z = probe.encode(&part.images)?;
        shape = z.shape().to_vec();
        data.extend_from_slice(z.data());
    }
    shape[0] = images.len();
    Tensor::new(shape, data)
}

fn gather_rows(latent: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let per: usize = latent.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&latent.data()[r * per..(r + 1) * per]);
    }
    let mut shape = latent.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("gathered rows")
}

/// One probe optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Trains the probe head with cross-entropy; encoder weights are never
/// touched. Disease inputs are clean; detection inputs are re-corrupted
/// every epoch.
pub fn train_probe(
    probe: &mut ProbeClassifier<f32>,
    data: &ImageBatch,
    task: ProbeTask,
    config: &TrainConfig,
) -> Result<Vec<ProbeRecord>> {
    config.validate()?;
    let n = data.len();
    let schedule = config.schedule(n);
    let mut opt = Adam::new(probe.params(), config.adam(), is_probe_param);
    let mut history = vec![];
    let mut step = 0;
    let mut cached: Option<(Tensor<f32>, Vec<usize>)> = None;
    for epoch in 0..config.epochs {
        if step >= schedule.total_steps {
            break;
        }
        let (latent, labels) = match task {
            ProbeTask::Disease => {
                if cached.is_none() {
                    cached = Some((encode_all(probe, data)?, data.labels.clone()));
                }
                cached.clone().expect("filled above")
            }
            ProbeTask::Detection => {
                let batch = detection_batch(data, rng::derive(config.seed, &[DETECT_STREAM, epoch as u64]))?;
                (encode_all(probe, &batch)?, batch.labels)
            }
        };
        let order = shuffled(n, rng::derive(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            if step >= schedule.total_steps {
                break;
            }
            let z = gather_rows(&latent, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let lr = schedule.lr(step);
            let (loss, grads) = probe.loss_and_grads(&z, &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("probe loss at step {step}"),
                });
            }
            opt.step(probe.params_mut(), &grads, lr)?;
            history.push(ProbeRecord { step, lr, loss });
            step += 1;
        }
    }
    Ok(history)
}

/// Probe checkpoint: encoder copy plus head, tagged with its task.
pub fn probe_checkpoint(probe: &ProbeClassifier<f32>, task: ProbeTask) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_params(probe.config(), KIND_PROBE, probe.params())?;
    ck.set("classes", probe.classes());
    ck.set("task", task.name());
    Ok(ck)
}

pub fn write_history(path: impl AsRef<Path>, history: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
