//! Supervised training of the operator on Darcy samples: AdamW with a cosine
//! schedule, per-epoch validation, metrics CSV and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{
    encode_checkpoint, load_checkpoint, load_params_into, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::KvMap;
use crate::darcy::{DarcySample, Dataset, Field};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::OperatorModel;
use crate::rng;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,lr,train_mse,val_rel_mse,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Root of the shuffle and dropout streams.
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 3e-4,
            lr_min: 1e-6,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            train_fraction: 0.9,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) || !self.lr.is_finite() {
            return fail(format!("learning rates must be non-negative (lr {}, lr_min {})", self.lr, self.lr_min));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("weight decay must be non-negative and betas in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v > 0.0) || (t + v - 1.0).abs() > 1e-9 {
            return fail(format!("split fractions must be positive and sum to 1 (got {t} + {v})"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        map.set(format!("{prefix}epochs"), self.epochs);
        map.set(format!("{prefix}batch_size"), self.batch_size);
        map.set(format!("{prefix}lr"), self.lr);
        map.set(format!("{prefix}lr_min"), self.lr_min);
        map.set(format!("{prefix}weight_decay"), self.weight_decay);
        map.set(format!("{prefix}beta1"), self.beta1);
        map.set(format!("{prefix}beta2"), self.beta2);
        map.set(format!("{prefix}eps"), self.eps);
        map.set(format!("{prefix}seed"), self.seed);
        map.set(format!("{prefix}train_fraction"), self.train_fraction);
        map.set(format!("{prefix}val_fraction"), self.val_fraction);
    }

    pub fn read_kv(&mut self, map: &mut KvMap, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        map.take_into(&key("epochs"), &mut self.epochs)?;
        map.take_into(&key("batch_size"), &mut self.batch_size)?;
        map.take_into(&key("lr"), &mut self.lr)?;
        map.take_into(&key("lr_min"), &mut self.lr_min)?;
        map.take_into(&key("weight_decay"), &mut self.weight_decay)?;
        map.take_into(&key("beta1"), &mut self.beta1)?;
        map.take_into(&key("beta2"), &mut self.beta2)?;
        map.take_into(&key("eps"), &mut self.eps)?;
        map.take_into(&key("seed"), &mut self.seed)?;
        map.take_into(&key("train_fraction"), &mut self.train_fraction)?;
        map.take_into(&key("val_fraction"), &mut self.val_fraction)?;
        Ok(())
    }

    /// Index ranges of the train and validation splits: a prefix and the rest.
    pub fn split(&self, count: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let n_train = ((count as f64) * self.train_fraction).round() as usize;
        let n_train = n_train.min(count);
        if n_train == 0 || n_train == count {
            return Err(Error::Config(format!(
                "{count} samples cannot be split {}/{} into two non-empty parts",
                self.train_fraction, self.val_fraction
            )));
        }
        Ok((0..n_train, n_train..count))
    }
}

/// Position of a run; `epoch` counts completed epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub step: u64,
    pub best_val: f64,
    pub best_epoch: usize,
}

impl Default for Progress {
    fn default() -> Self {
        Self {
            epoch: 0,
            step: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
        }
    }
}

impl Progress {
    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        map.set(format!("{prefix}epoch"), self.epoch);
        map.set(format!("{prefix}step"), self.step);
        map.set(format!("{prefix}best_val"), self.best_val);
        map.set(format!("{prefix}best_epoch"), self.best_epoch);
    }

    pub fn read_kv(&mut self, map: &mut KvMap, prefix: &str) -> Result<()> {
        map.take_into(&format!("{prefix}epoch"), &mut self.epoch)?;
        map.take_into(&format!("{prefix}step"), &mut self.step)?;
        map.take_into(&format!("{prefix}best_val"), &mut self.best_val)?;
        map.take_into(&format!("{prefix}best_epoch"), &mut self.best_epoch)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_rel_mse: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.lr, self.train_mse, self.val_rel_mse, self.seconds
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best_val(&self) -> f64 {
        self.records.iter().map(|r| r.val_rel_mse).fold(f64::INFINITY, f64::min)
    }
}

/// `‖pred − truth‖₂ / ‖truth‖₂` over all grid values.
pub fn rel_mse(pred: &Field, truth: &Field) -> Result<f64> {
    if pred.n() != truth.n() {
        return Err(Error::ShapeMismatch {
            op: "rel_mse",
            lhs: vec![pred.n(), pred.n()],
            rhs: vec![truth.n(), truth.n()],
        });
    }
    let denom = truth.norm();
    if denom == 0.0 {
        return Err(Error::Numerical("relative error of a zero-norm reference".into()));
    }
    let num: f64 = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Per-sample relative errors in evaluation mode, in sample order.
pub fn evaluate(model: &OperatorModel, samples: &[DarcySample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| rel_mse(&model.predict(&s.a)?, &s.u))
        .collect()
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("mean over an empty set".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean relative error on `val` of predicting the per-cell mean solution of
/// `train` for every input.
pub fn mean_field_baseline(train: &[DarcySample], val: &[DarcySample]) -> Result<f64> {
    let first = train.first().ok_or_else(|| Error::Config("baseline needs training samples".into()))?;
    let n = first.u.n();
    let mut acc = vec![0.0; n * n];
    for s in train {
        for (a, v) in acc.iter_mut().zip(s.u.values()) {
            *a += v;
        }
    }
    let mean_u = Field::new(n, acc.into_iter().map(|v| v / train.len() as f64).collect())?;
    let errs = val.iter().map(|s| rel_mse(&mean_u, &s.u)).collect::<Result<Vec<_>>>()?;
    mean(&errs)
}

/// Input shift/scale from the mean/std of `a`, output scale from the RMS of `u`.
pub fn fit_normalization(model: &mut OperatorModel, train: &[DarcySample]) {
    let a: Vec<f64> = train.iter().flat_map(|s| s.a.values().iter().copied()).collect();
    let u_rms = (train.iter().flat_map(|s| s.u.values()).map(|v| v * v).sum::<f64>()
        / a.len().max(1) as f64)
        .sqrt();
    let a_mean = a.iter().sum::<f64>() / a.len().max(1) as f64;
    let a_std = (a.iter().map(|v| (v - a_mean) * (v - a_mean)).sum::<f64>() / a.len().max(1) as f64).sqrt();
    let cfg = &mut model.config;
    cfg.a_shift = a_mean;
    cfg.a_scale = if a_std > 0.0 { a_std } else { 1.0 };
    cfg.u_scale = if u_rms > 0.0 { u_rms } else { 1.0 };
}

/// Mutable training state; everything needed to resume lives here.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: OperatorModel,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub progress: Progress,
}

impl Trainer {
    /// Fresh run; normalisation is fitted on the training split of `data`.
    pub fn new(mut model: OperatorModel, config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let (train, _) = config.split(data.len())?;
        fit_normalization(&mut model, &data.samples[train]);
        let optimizer = Self::fresh_optimizer(&model, &config);
        Ok(Self {
            model,
            config,
            optimizer,
            progress: Progress::default(),
        })
    }

    /// Continues from a checkpoint; `epochs` may extend the run.
    pub fn resume(ckpt: Checkpoint, epochs: Option<usize>) -> Result<Self> {
        let mut config = ckpt.train;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        config.validate()?;
        let optimizer = match ckpt.optimizer {
            Some(o) => o,
            None => Self::fresh_optimizer(&ckpt.model, &config),
        };
        Ok(Self {
            model: ckpt.model,
            config,
            optimizer,
            progress: ckpt.progress,
        })
    }

    fn fresh_optimizer(model: &OperatorModel, config: &TrainConfig) -> AdamW {
        let named = model.params.named();
        let shapes: Vec<&[usize]> = named.iter().map(|(_, t)| t.shape()).collect();
        AdamW::new(config.adamw(), &shapes)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            progress: self.progress,
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Loss and gradients of one sample, on its own graph.
    fn sample_grad(&self, sample: &DarcySample, dropout_seed: u64) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g);
        let mut r = rng::rng_from(dropout_seed);
        let loss = self.model.sample_loss(&mut g, &p, sample, Some(&mut r))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        Ok((value, g.backward(loss)?.into_tensors()))
    }

    /// Runs the remaining epochs. With `out`, writes `metrics.csv` (appending
    /// on resume), `best.ckpt` and `last.ckpt` there after every epoch.
    pub fn run(&mut self, data: &Dataset, out: Option<&Path>) -> Result<RunMetrics> {
        let (train_range, val_range) = self.config.split(data.len())?;
        let train = &data.samples[train_range.clone()];
        let val = &data.samples[val_range];
        self.model.config.mixer_config(data.n)?;

        let steps_per_epoch = train.len().div_ceil(self.config.batch_size) as u64;
        let total_steps = steps_per_epoch * self.config.epochs as u64;
        let shuffle_root = rng::named_seed(self.config.seed, "shuffle");
        let dropout_root = rng::named_seed(self.config.seed, "dropout");

        let mut csv = match out {
            Some(dir) => Some(open_metrics(dir, self.progress.epoch > 0)?),
            None => None,
        };
        let mut metrics = RunMetrics::default();

        for epoch in self.progress.epoch..self.config.epochs {
            let started = Instant::now();
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng::rng_from(rng::indexed_seed(shuffle_root, epoch as u64)));

            let mut loss_sum = 0.0;
            let mut lr = self.config.lr;
            for batch in order.chunks(self.config.batch_size) {
                lr = cosine_lr(self.progress.step, total_steps, self.config.lr, self.config.lr_min);
                let step_root = rng::indexed_seed(dropout_root, self.progress.step);
                let results = batch
                    .par_iter()
                    .enumerate()
                    .map(|(k, &i)| self.sample_grad(&train[i], rng::indexed_seed(step_root, k as u64)))
                    .collect::<Result<Vec<_>>>()?;

                let mut grads: Option<Vec<Tensor>> = None;
                for (k, (loss, g)) in results.into_iter().enumerate() {
                    if !loss.is_finite() {
                        return Err(self.abort(out, epoch, train_range.start + batch[k], loss));
                    }
                    loss_sum += loss;
                    match grads.as_mut() {
                        None => grads = Some(g),
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                    }
                }
                let mut grads = grads.expect("non-empty batch");
                let inv = 1.0 / batch.len() as f64;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
                let mut params = Vec::new();
                self.model.params.for_each_mut(&mut |t| params.push(t));
                self.optimizer.step(params, &grads, lr)?;
                self.progress.step += 1;
            }

            let val_rel_mse = mean(&evaluate(&self.model, val)?)?;
            if !val_rel_mse.is_finite() {
                return Err(self.abort(out, epoch, usize::MAX, val_rel_mse));
            }
            self.progress.epoch = epoch + 1;
            let record = EpochRecord {
                epoch: epoch + 1,
                lr,
                train_mse: loss_sum / train.len() as f64,
                val_rel_mse,
                seconds: started.elapsed().as_secs_f64(),
            };
            let improved = val_rel_mse < self.progress.best_val;
            if improved {
                self.progress.best_val = val_rel_mse;
                self.progress.best_epoch = epoch + 1;
            }
            if let (Some(dir), Some(w)) = (out, csv.as_mut()) {
                writeln!(w, "{}", record.csv_row())?;
                w.flush()?;
                let ckpt = self.checkpoint();
                if improved {
                    save_checkpoint(&dir.join("best.ckpt"), &ckpt)?;
                }
                save_checkpoint(&dir.join("last.ckpt"), &ckpt)?;
            }
            metrics.records.push(record);
        }
        Ok(metrics)
    }

    /// Parameters are untouched since the last finite step; persist them.
    fn abort(&self, out: Option<&Path>, epoch: usize, sample: usize, value: f64) -> Error {
        let mut msg = if sample == usize::MAX {
            format!("validation error became {value} after epoch {}", epoch + 1)
        } else {
            format!(
                "loss became {value} at epoch {}, step {}, sample {sample}",
                epoch + 1,
                self.progress.step
            )
        };
        if let Some(dir) = out {
            let path: PathBuf = dir.join("last.ckpt");
            match save_checkpoint(&path, &self.checkpoint()) {
                Ok(()) => msg.push_str(&format!("; last good state saved to {}", path.display())),
                Err(e) => msg.push_str(&format!("; saving last good state failed: {e}")),
            }
        }
        Error::Numerical(msg)
    }
}

fn open_metrics(dir: &Path, append: bool) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("metrics.csv");
    if append && path.exists() {
        Ok(BufWriter::new(OpenOptions::new().append(true).open(path)?))
    } else {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{METRICS_HEADER}")?;
        w.flush()?;
        Ok(w)
    }
}

/// Trains a fresh model end to end.
pub fn train(model: OperatorModel, data: &Dataset, config: &TrainConfig, out: Option<&Path>) -> Result<(Trainer, RunMetrics)> {
    let mut trainer = Trainer::new(model, config.clone(), data)?;
    let metrics = trainer.run(data, out)?;
    Ok((trainer, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darcy::{generate_dataset, CoefficientSpec};
    use crate::model::ModelConfig;

    fn tiny_model() -> OperatorModel {
        OperatorModel::new(ModelConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            d_head: 4,
            mlp_dim: 8,
            emb_dropout: 0.0,
            att_dropout: 0.0,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn relative_error_cases() {
        let u = Field::from_fn(4, |i, j| (i + 2 * j) as f64 + 1.0);
        assert_eq!(rel_mse(&u, &u).unwrap(), 0.0);
        assert_eq!(rel_mse(&Field::constant(4, 0.0), &u).unwrap(), 1.0);
        assert!((rel_mse(&u.scaled(2.0), &u).unwrap() - 1.0).abs() < 1e-15);
        assert!(rel_mse(&u, &Field::constant(4, 0.0)).is_err());
        assert!(rel_mse(&u, &Field::constant(2, 1.0)).is_err());
    }

    #[test]
    fn split_is_prefix_and_rest() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.split(500).unwrap(), (0..450, 450..500));
        assert!(cfg.split(1).is_err());
        let bad = TrainConfig {
            val_fraction: 0.2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn overfits_four_samples() {
        let data = generate_dataset(4, 5, 1, &CoefficientSpec::default()).unwrap();
        let model = OperatorModel::new(ModelConfig {
            dim: 16,
            d_head: 8,
            mlp_dim: 16,
            ..tiny_model().config
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 4,
            lr: 1e-2,
            lr_min: 1e-2,
            weight_decay: 0.0,
            train_fraction: 0.8,
            val_fraction: 0.2,
            ..TrainConfig::default()
        };
        let (_, metrics) = train(model, &data, &cfg, None).unwrap();
        let last = metrics.last().unwrap();
        assert!(last.train_mse < 1e-4, "train mse {}", last.train_mse);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = generate_dataset(8, 10, 2, &CoefficientSpec::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            lr: 0.0,
            lr_min: 0.0,
            ..TrainConfig::default()
        };
        let model = tiny_model();
        let before: Vec<Tensor> = model.params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let (trainer, _) = train(model, &data, &cfg, None).unwrap();
        let after: Vec<Tensor> = trainer.model.params.named().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn validation_is_deterministic() {
        let data = generate_dataset(8, 4, 3, &CoefficientSpec::default()).unwrap();
        let model = OperatorModel::new(ModelConfig {
            emb_dropout: 0.5,
            att_dropout: 0.5,
            ..tiny_model().config
        })
        .unwrap();
        assert_eq!(evaluate(&model, &data.samples).unwrap(), evaluate(&model, &data.samples).unwrap());
    }

    #[test]
    fn mean_field_baseline_is_exact_on_repeated_samples() {
        let data = generate_dataset(8, 2, 4, &CoefficientSpec::default()).unwrap();
        let same = vec![data.samples[0].clone(); 3];
        assert!(mean_field_baseline(&same, &same[..1]).unwrap() < 1e-15);
        assert!(mean_field_baseline(&data.samples[..1], &data.samples[1..]).unwrap() > 0.0);
    }

    #[test]
    fn nan_loss_aborts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(8, 4, 5, &CoefficientSpec::default()).unwrap();
        let mut model = tiny_model();
        model.params.decode_b.data_mut()[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            train_fraction: 0.5,
            val_fraction: 0.5,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, cfg, &data).unwrap();
        let err = trainer.run(&data, Some(dir.path())).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert!(dir.path().join("last.ckpt").exists());
    }

    #[test]
    fn resume_continues_epoch_numbering() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(8, 6, 6, &CoefficientSpec::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            train_fraction: 0.5,
            val_fraction: 0.5,
            ..TrainConfig::default()
        };
        let (_, first) = train(tiny_model(), &data, &cfg, Some(dir.path())).unwrap();
        assert_eq!(first.records.len(), 2);
        let ckpt = load_checkpoint(&dir.path().join("last.ckpt")).unwrap();
        let mut trainer = Trainer::resume(ckpt, Some(4)).unwrap();
        let more = trainer.run(&data, Some(dir.path())).unwrap();
        assert_eq!(more.records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![3, 4]);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let epochs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(epochs, vec!["1", "2", "3", "4"]);
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    }
}
