//! Image-level supervised training with Adam and a step-decay schedule.
//!
//! Batches are contiguous slices of an endless stream formed by
//! concatenating per-epoch permutations, each drawn from `(seed, epoch)`.
//! Iteration `i` therefore depends only on the seed and `i`, which makes
//! resuming from a step count bitwise identical to never stopping.

mod adam;
mod eval;

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{adam_update, AdamState};
pub use eval::{evaluate_classification, predict_labels, ClassMetrics};

use crate::models::{Checkpoint, CheckpointError, Model, ModelError, Record};
use crate::phantom::Dataset;
use crate::tensor::{BnMode, Element, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split has no examples of class {0}")]
    EmptyClass(usize),
    #[error("dataset image size {data} does not match model input {model}")]
    ImageSize { data: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Draw each batch half from each class instead of plain shuffling.
    pub balanced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 1000,
            max_iterations: 5000,
            batch_size: 16,
            seed: 0,
            balanced: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas ({}, {}) must lie in (0, 1)", self.beta1, self.beta2));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.base_lr));
        }
        if !(self.epsilon > 0.0) || !(self.decay_factor > 0.0) {
            return bad("epsilon and decay factor must be positive".into());
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return bad("decay interval and batch size must be positive".into());
        }
        Ok(())
    }
}

/// `base_lr * decay_factor^floor(iter / decay_every)`.
pub fn lr_schedule(iter: usize, config: &TrainConfig) -> f64 {
    let k = (iter / config.decay_every) as i32;
    config.base_lr * config.decay_factor.powi(k)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Loss at each completed iteration.
    pub loss: Vec<f64>,
    /// Learning rate used at each completed iteration.
    pub lr: Vec<f64>,
    /// `(epoch, validation accuracy)` at each completed epoch.
    pub val_accuracy: Vec<(usize, f64)>,
    /// Iterations whose update was rejected for a non-finite gradient.
    pub skipped: Vec<usize>,
}

/// Sample indices for iterations `[iter, iter + 1)` of the batch stream.
fn batch_indices(labels: &[usize], iter: usize, cfg: &TrainConfig, perm_cache: &mut Option<(usize, Vec<usize>)>) -> Vec<usize> {
    let n = labels.len();
    if cfg.balanced {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(iter as u64 + 1);
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| labels[i] != 1).collect();
        return (0..cfg.batch_size)
            .map(|k| {
                let pool = if k % 2 == 0 { &neg } else { &pos };
                *pool.choose(&mut rng).expect("both classes present")
            })
            .collect();
    }
    let start = iter * cfg.batch_size;
    (start..start + cfg.batch_size)
        .map(|pos| {
            let epoch = pos / n;
            if perm_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(epoch as u64 + (1 << 48));
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                *perm_cache = Some((epoch, perm));
            }
            perm_cache.as_ref().expect("filled").1[pos % n]
        })
        .collect()
}

/// Training state: model, optimizer moments and history.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub adam: AdamState<T>,
    pub history: TrainHistory,
    /// Completed iterations.
    pub iteration: usize,
    perm_cache: Option<(usize, Vec<usize>)>,
}

/// Optional side channels for a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Receives one `iter\tlr\tloss` line per iteration.
    pub log: Option<&'a mut dyn Write>,
    /// Checkpoint path and cadence in iterations.
    pub checkpoint: Option<(&'a Path, usize)>,
    /// Stop after this many completed iterations (for interruption).
    pub stop_after: Option<usize>,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            model,
            config,
            adam,
            history: TrainHistory::default(),
            iteration: 0,
            perm_cache: None,
        })
    }

    /// One optimization step on the given batch. Returns the loss.
    pub fn step(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<f64, TrainError> {
        let iter = self.iteration;
        let lr = lr_schedule(iter, &self.config);
        let mut fwd = self.model.forward(images, &[], BnMode::Train)?;
        let loss_id = fwd.tape.softmax_cross_entropy(fwd.logits, labels).map_err(ModelError::from)?;
        let loss = fwd.tape.value(loss_id).item().to_f64_lossless();
        let grads = fwd.tape.backward(loss_id).map_err(ModelError::from)?;
        let g: Vec<&Tensor<T>> = fwd
            .params
            .iter()
            .map(|&id| grads.grad_of(id).expect("params retain gradients"))
            .collect();
        if loss.is_finite() && g.iter().all(|t| t.is_finite()) {
            self.adam.apply(self.model.params_mut(), &g, lr, &self.config);
            self.model.absorb_moments(&fwd.moments);
        } else {
            self.history.skipped.push(iter);
        }
        self.history.loss.push(loss);
        self.history.lr.push(lr);
        self.iteration += 1;
        Ok(loss)
    }

    /// Trains until `config.max_iterations`, evaluating on `val` at each
    /// epoch boundary.
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>, mut hooks: TrainHooks<'_>) -> Result<(), TrainError> {
        let size = self.model.config().input_size;
        for d in std::iter::once(train).chain(val) {
            if d.image_size() != size && !d.is_empty() {
                return Err(TrainError::ImageSize {
                    data: d.image_size(),
                    model: size,
                });
            }
        }
        if train.is_empty() {
            return Err(TrainError::EmptyClass(0));
        }
        for c in 0..self.model.config().classes {
            if train.count_label(c) == 0 {
                return Err(TrainError::EmptyClass(c));
            }
        }
        let n = train.len();
        let bs = self.config.batch_size;
        while self.iteration < self.config.max_iterations {
            if hooks.stop_after.is_some_and(|s| self.iteration >= s) {
                break;
            }
            let iter = self.iteration;
            let idx = batch_indices(train.labels(), iter, &self.config, &mut self.perm_cache);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let loss = self.step(&train.batch(&idx), &labels)?;
            if let Some(log) = hooks.log.as_deref_mut() {
                writeln!(log, "{iter}\t{:e}\t{loss}", self.history.lr[iter])?;
            }
            let (before, after) = (iter * bs / n, (iter + 1) * bs / n);
            if after > before {
                if let Some(v) = val {
                    let m = evaluate_classification(&self.model, v, 64)?;
                    self.history.val_accuracy.push((after, m.accuracy));
                }
            }
            if let Some((path, every)) = hooks.checkpoint {
                if every > 0 && self.iteration.is_multiple_of(every) {
                    self.save(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        let f64s = |name: &str, v: Vec<f64>| {
            let n = v.len();
            Record::from_tensor(name, &Tensor::new([n], v).expect("vector"))
        };
        ck.records.push(f64s("optim.step", vec![self.iteration as f64]));
        ck.records.push(f64s("optim.adam_t", vec![self.adam.t as f64]));
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            let name = self.model.params().name(i);
            ck.records.push(Record::from_tensor(&format!("optim.m.{name}"), m));
            ck.records.push(Record::from_tensor(&format!("optim.v.{name}"), v));
        }
        let h = &self.history;
        ck.records.push(f64s("optim.history.loss", h.loss.clone()));
        ck.records.push(f64s("optim.history.lr", h.lr.clone()));
        ck.records.push(f64s(
            "optim.history.val",
            h.val_accuracy.iter().flat_map(|&(e, a)| [e as f64, a]).collect(),
        ));
        ck.records.push(f64s("optim.history.skipped", h.skipped.iter().map(|&s| s as f64).collect()));
        ck
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if !self.model.all_finite() {
            return Err(CheckpointError::Malformed("refusing to save non-finite parameters".into()).into());
        }
        self.to_checkpoint().save(path)?;
        Ok(())
    }

    /// Restores model, optimizer and history from a trainer checkpoint.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self, TrainError> {
        let ck = Checkpoint::load(path)?;
        let model = Model::<T>::from_checkpoint(&ck)?;
        let mut t = Trainer::new(model, config)?;
        let get = |name: &str| -> Result<Vec<f64>, TrainError> {
            let r = ck
                .record(name)
                .ok_or_else(|| CheckpointError::Topology(format!("missing trainer record '{name}'")))?;
            if r.dims.len() != 1 {
                return Err(CheckpointError::Topology(format!("trainer record '{name}' must be a vector")).into());
            }
            Ok(r.to_tensor::<f64>()?.into_data())
        };
        let whole = |v: f64, name: &str| -> Result<usize, TrainError> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
                Ok(v as usize)
            } else {
                Err(CheckpointError::Malformed(format!("'{name}' holds {v}, not a count")).into())
            }
        };
        let scalar = |name: &str| -> Result<usize, TrainError> {
            match get(name)?.as_slice() {
                [v] => whole(*v, name),
                _ => Err(CheckpointError::Malformed(format!("'{name}' must hold one value")).into()),
            }
        };
        t.iteration = scalar("optim.step")?;
        t.adam.t = scalar("optim.adam_t")? as u64;
        for i in 0..t.model.params().len() {
            let name = t.model.params().name(i).to_string();
            let dims = t.model.params().get(i).dims().to_vec();
            for (prefix, slot) in [("m", &mut t.adam.m[i]), ("v", &mut t.adam.v[i])] {
                let rn = format!("optim.{prefix}.{name}");
                let r = ck
                    .record(&rn)
                    .ok_or_else(|| CheckpointError::Topology(format!("missing trainer record '{rn}'")))?;
                if r.dims != dims {
                    return Err(CheckpointError::Topology(format!("trainer record '{rn}' has the wrong shape")).into());
                }
                *slot = r.to_tensor()?;
            }
        }
        t.history.loss = get("optim.history.loss")?;
        t.history.lr = get("optim.history.lr")?;
        let val = get("optim.history.val")?;
        if val.len() % 2 != 0 {
            return Err(CheckpointError::Malformed("validation history has odd length".into()).into());
        }
        t.history.val_accuracy = val
            .chunks_exact(2)
            .map(|c| Ok((whole(c[0], "optim.history.val")?, c[1])))
            .collect::<Result<_, TrainError>>()?;
        t.history.skipped = get("optim.history.skipped")?
            .into_iter()
            .map(|v| whole(v, "optim.history.skipped"))
            .collect::<Result<_, _>>()?;
        if t.history.loss.len() != t.iteration || t.history.lr.len() != t.iteration {
            return Err(CheckpointError::Malformed("history length disagrees with the step count".into()).into());
        }
        Ok(t)
    }
}

/// Builds a trainer and runs it to completion.
pub fn train<T: Element>(
    model: Model<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    config: TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(Model<T>, TrainHistory), TrainError> {
    let mut t = Trainer::new(model, config)?;
    t.run(train, val, hooks)?;
    Ok((t.model, t.history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let mut c = TrainConfig {
            decay_every: 10000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &c), 0.001);
        assert!((lr_schedule(10000, &c) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(25000, &c) - 1e-5).abs() < 1e-18);
        c.decay_every = 1000;
        assert_eq!(lr_schedule(999, &c), 0.001);
    }

    #[test]
    fn batch_stream_covers_each_epoch_once() {
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i % 3 == 0)).collect();
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut cache = None;
        let stream: Vec<usize> = (0..5).flat_map(|i| batch_indices(&labels, i, &cfg, &mut cache)).collect();
        let mut first: Vec<usize> = stream[..10].to_vec();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut second: Vec<usize> = stream[10..20].to_vec();
        second.sort();
        assert_eq!(second, (0..10).collect::<Vec<_>>());
        let mut fresh = None;
        assert_eq!(batch_indices(&labels, 3, &cfg, &mut fresh), stream[12..16]);
    }

    #[test]
    fn balanced_batches_alternate_classes() {
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i == 7)).collect();
        let cfg = TrainConfig {
            batch_size: 6,
            balanced: true,
            ..TrainConfig::default()
        };
        let b = batch_indices(&labels, 0, &cfg, &mut None);
        let pos = b.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(pos, 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { base_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }
}
