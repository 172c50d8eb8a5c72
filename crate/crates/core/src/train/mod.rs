//! Dataset assembly, the training loop and checkpoint persistence.

mod checkpoint;
mod data;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use data::{
    build_dataset, synth_dataset, synth_dataset_len, synth_stems, ExamplePair, SynthStems, SYNTH_PEAK,
    SYNTH_RATIO_DB,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioClip, CANONICAL_RATE};
use crate::dsp::stft;
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::model::{Model, ModelConfig};
use crate::tensor::{adam_step, AdamState, Mode, Tape, Tensor};

/// Where training examples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// `<root>/<song>/{mixture,vocals}.wav` stems.
    Stems(PathBuf),
    Synthetic { seed: u64, pairs: usize },
}

impl DataSource {
    pub fn load(&self, window_len: usize) -> Result<Vec<ExamplePair>> {
        match self {
            DataSource::Stems(root) => build_dataset(root, window_len),
            DataSource::Synthetic { seed, pairs } => synth_dataset_len(*seed, *pairs, window_len),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: DataSource,
    pub validation: Option<DataSource>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: DataSource::Synthetic { seed: 0, pairs: 8 },
            validation: None,
            epochs: 100,
            batch_size: 2,
            lr: 1e-4,
            seed: 0,
            model: ModelConfig::default(),
            checkpoint: None,
            loss_log: None,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "data_root",
    "synth_pairs",
    "synth_seed",
    "val_root",
    "val_synth_pairs",
    "val_synth_seed",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "checkpoint",
    "loss_log",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        self.model.validate()
    }

    /// Reads a flat `key=value` config. Model keys use the
    /// [`ModelConfig`] vocabulary; anything else is rejected.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = TRAIN_KEYS.iter().chain(ModelConfig::keys()).copied().collect();
        kv.reject_unknown(&known)?;
        let mut c = TrainConfig {
            model: ModelConfig::from_key_values(kv)?,
            ..TrainConfig::default()
        };
        let source = |root: &str, pairs: &str, seed: &str| -> Result<Option<DataSource>> {
            match (kv.get_str(root), kv.get::<usize>(pairs)?) {
                (Some(_), Some(_)) => Err(Error::config(format!("set either `{root}` or `{pairs}`, not both"))),
                (Some(r), None) => Ok(Some(DataSource::Stems(PathBuf::from(r)))),
                (None, Some(n)) => Ok(Some(DataSource::Synthetic {
                    seed: kv.get(seed)?.unwrap_or(0),
                    pairs: n,
                })),
                (None, None) => Ok(None),
            }
        };
        if let Some(d) = source("data_root", "synth_pairs", "synth_seed")? {
            c.data = d;
        }
        c.validation = source("val_root", "val_synth_pairs", "val_synth_seed")?;
        if let Some(v) = kv.get("epochs")? {
            c.epochs = v;
        }
        if let Some(v) = kv.get("batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = kv.get("lr")? {
            c.lr = v;
        }
        if let Some(v) = kv.get("seed")? {
            c.seed = v;
        }
        c.checkpoint = kv.get_str("checkpoint").map(PathBuf::from);
        c.loss_log = kv.get_str("loss_log").map(PathBuf::from);
        Ok(c)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.model.to_key_values();
        let mut put = |root: &str, pairs: &str, seed: &str, d: &DataSource| match d {
            DataSource::Stems(p) => kv.set(root, p.display()),
            DataSource::Synthetic { seed: s, pairs: n } => {
                kv.set(pairs, n);
                kv.set(seed, s);
            }
        };
        put("data_root", "synth_pairs", "synth_seed", &self.data);
        if let Some(v) = &self.validation {
            put("val_root", "val_synth_pairs", "val_synth_seed", v);
        }
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("seed", self.seed);
        if let Some(p) = &self.checkpoint {
            kv.set("checkpoint", p.display());
        }
        if let Some(p) = &self.loss_log {
            kv.set("loss_log", p.display());
        }
        kv
    }
}

/// A training example with its mixture and vocal magnitudes computed.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub wave: Vec<f32>,
    pub mix_mag: Vec<f32>,
    pub vocal_mag: Vec<f32>,
}

pub fn prepare(pairs: &[ExamplePair], cfg: &ModelConfig) -> Result<Vec<PreparedExample>> {
    let n = cfg.window_samples();
    pairs
        .iter()
        .map(|p| {
            if p.mixture.len() != n || p.vocal.len() != n {
                return Err(Error::config(format!(
                    "pair {} has {}/{} samples, model windows are {n}",
                    p.id,
                    p.mixture.len(),
                    p.vocal.len()
                )));
            }
            let mag = |x: &[f32]| -> Result<Vec<f32>> {
                Ok(stft(&AudioClip::new(x.to_vec(), CANONICAL_RATE)?, cfg.stft)?.magnitude_f32())
            };
            Ok(PreparedExample {
                id: p.id.clone(),
                wave: p.mixture.clone(),
                mix_mag: mag(&p.mixture)?,
                vocal_mag: mag(&p.vocal)?,
            })
        })
        .collect()
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn loss_log_csv(records: &[EpochRecord]) -> String {
    let with_val = records.iter().any(|r| r.val_loss.is_some());
    let mut out = String::from(if with_val {
        "epoch,step,train_loss,val_loss\n"
    } else {
        "epoch,step,train_loss\n"
    });
    for r in records {
        let _ = write!(out, "{},{},{:e}", r.epoch, r.step, r.train_loss);
        if with_val {
            match r.val_loss {
                Some(v) => {
                    let _ = write!(out, ",{v:e}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Model, optimiser and random streams of a training run.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    dropout_rng: ChaCha8Rng,
}

fn batch_tensors(batch: &[&PreparedExample], cfg: &ModelConfig) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let n = batch.len();
    let (f, t, s) = (cfg.freq_bins(), cfg.time_bins, cfg.window_samples());
    let cat = |get: fn(&PreparedExample) -> &Vec<f32>| batch.iter().flat_map(|e| get(e).iter().copied()).collect();
    Ok((
        Tensor::new(vec![n, 1, s], cat(|e| &e.wave))?,
        Tensor::new(vec![n, 1, f, t], cat(|e| &e.mix_mag))?,
        Tensor::new(vec![n, 1, f, t], cat(|e| &e.vocal_mag))?,
    ))
}

impl Trainer {
    /// Initialises the model from `seed`; dropout masks draw from a
    /// stream derived from the same seed.
    pub fn new(model: ModelConfig, lr: f64, seed: u64) -> Result<Self> {
        Ok(Trainer {
            model: Model::new(model, seed)?,
            adam: AdamState::new(lr),
            dropout_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
        })
    }

    /// Forward and backward over `batch`; gradients are accumulated on the
    /// model parameters. Returns the batch loss.
    pub fn accumulate(&mut self, batch: &[&PreparedExample], mode: Mode) -> Result<f64> {
        let (wave, mix, vocal) = batch_tensors(batch, &self.model.config)?;
        let mut tape = Tape::new();
        let (out, bound) = self
            .model
            .forward(&mut tape, &wave, &mix, mode, true, &mut self.dropout_rng)?;
        let target = tape.constant(vocal);
        let loss = tape.mse(out.estimate, target)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        self.model.params.collect_grads(&tape, &bound);
        Ok(value)
    }

    /// One optimiser step on `batch` in train mode.
    pub fn step(&mut self, batch: &[&PreparedExample]) -> Result<f64> {
        self.model.params.zero_grads();
        let loss = self.accumulate(batch, Mode::Train)?;
        if !loss.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {} on batch [{}]",
                self.adam.step + 1,
                ids.join(", ")
            )));
        }
        adam_step(&mut self.model.params.params_mut(), &mut self.adam)?;
        Ok(loss)
    }

    /// Mean eval-mode loss over `data`, one example at a time.
    pub fn evaluate(&mut self, data: &[PreparedExample]) -> Result<f64> {
        let mut total = 0.0;
        for e in data {
            let (wave, mix, vocal) = batch_tensors(&[e], &self.model.config)?;
            let mut tape = Tape::new();
            let (out, _) = self
                .model
                .forward(&mut tape, &wave, &mix, Mode::Eval, false, &mut self.dropout_rng)?;
            let target = tape.constant(vocal);
            let loss = tape.mse(out.estimate, target)?;
            total += tape.value(loss).data()[0] as f64;
        }
        Ok(total / data.len().max(1) as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.adam.step)
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimiser step, in order.
    pub step_losses: Vec<f64>,
}

/// Full training run: seeded init, per-epoch seeded shuffling, Adam on the
/// spectrogram MSE, per-epoch loss log and checkpoint.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let window = cfg.model.window_samples();
    let train_pairs = cfg.data.load(window)?;
    if train_pairs.is_empty() {
        return Err(Error::usage("training dataset is empty"));
    }
    let data = prepare(&train_pairs, &cfg.model)?;
    drop(train_pairs);
    let val = match &cfg.validation {
        Some(src) => Some(prepare(&src.load(window)?, &cfg.model)?),
        None => None,
    };
    train_prepared(cfg, &data, val.as_deref())
}

/// [`train`] on examples that are already prepared.
pub fn train_prepared(
    cfg: &TrainConfig,
    data: &[PreparedExample],
    val: Option<&[PreparedExample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::usage("training dataset is empty"));
    }
    let mut trainer = Trainer::new(cfg.model.clone(), cfg.lr, cfg.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = trainer.step(&batch).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {}: {msg}", batches + 1)),
                other => other,
            })?;
            step_losses.push(loss);
            total += loss;
            batches += 1;
        }
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(trainer.evaluate(v)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            step: trainer.adam.step,
            train_loss: total / batches as f64,
            val_loss,
        };
        info!(
            "epoch {epoch}/{}: train {:.6e}{}",
            cfg.epochs,
            record.train_loss,
            val_loss.map(|v| format!(", val {v:.6e}")).unwrap_or_default()
        );
        epochs.push(record);
        if let Some(p) = &cfg.loss_log {
            write_text(p, &loss_log_csv(&epochs))?;
        }
        if let Some(p) = &cfg.checkpoint {
            trainer.checkpoint().save(p)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        epochs,
        step_losses,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    checkpoint::write_atomic(path, text.as_bytes())
}
