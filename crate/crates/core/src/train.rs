//! Optimization loop, datasets and checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_indices, MetricReport};
use crate::model::{collect_param_grads, Ablations, FstMamba, ModelConfig, Task};
use crate::nn::Module;
use crate::tensor::Tensor;
use crate::topology::{pad_to_atlas, ComponentAtlas};

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, weight_decay: 0.01, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn for_module<M: Module>(model: &M) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p| m.push(Tensor::zeros(p.shape())));
        Self { v: m.clone(), m, t: 0 }
    }
}

impl AdamW {
    /// One update of every parameter of `model` with learning rate `lr`.
    pub fn step<M: Module>(&self, model: &mut M, state: &mut AdamState, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != state.m.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), state.m.len())));
        }
        state.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, state.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, state.t as f64);
        let mut k = 0;
        let mut bad = None;
        model.visit_mut("", &mut |name, p| {
            let (m, v, g) = (&mut state.m[k], &mut state.v[k], &grads[k]);
            k += 1;
            if g.shape() != p.shape() {
                bad.get_or_insert(name);
                return;
            }
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * (1.0 - lr * self.weight_decay) - lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        });
        match bad {
            Some(name) => Err(Error::Shape(format!("gradient shape mismatch for {name}"))),
            None => Ok(()),
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to zero at `total`.
pub fn cosine_lr(lr_max: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    0.5 * lr_max * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamW,
    /// Fraction of samples held out for validation.
    pub val_fraction: f64,
    /// Switched on in addition to the model config's own flags.
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            optimizer: AdamW::default(),
            val_fraction: 0.2,
            ablations: Ablations::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.weight_decay < 0.0 || o.eps <= 0.0 {
            return Err(Error::Config(format!("bad optimizer settings {o:?}")));
        }
        self.ablations.validate()
    }
}

/// Model inputs `[S, N', N', T, 1]` (already padded) with one target per sample.
///
/// Classification targets are class indices stored as `0.0` / `1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub targets: Vec<f64>,
    pub task: Task,
}

impl Dataset {
    pub fn new(x: Tensor, targets: Vec<f64>, task: Task) -> Result<Self> {
        let s = x.shape();
        if s.len() != 5 || s[1] != s[2] || s[4] != 1 {
            return Err(Error::Shape(format!("dataset inputs must be [S, N, N, T, 1], got {s:?}")));
        }
        if s[0] != targets.len() {
            return Err(Error::Shape(format!("{} samples but {} targets", s[0], targets.len())));
        }
        if task == Task::BinaryClassification && targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Domain("binary classification targets must be 0 or 1".into()));
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::Domain("targets must be finite".into()));
        }
        Ok(Self { x, targets, task })
    }

    /// Pads `dfnc: [S, N, N, T]` to the atlas and adds the feature axis.
    pub fn from_dfnc(dfnc: &Tensor, atlas: &ComponentAtlas, targets: Vec<f64>, task: Task) -> Result<Self> {
        let padded = pad_to_atlas(dfnc, atlas)?;
        let mut shape = padded.shape().to_vec();
        shape.push(1);
        Self::new(padded.reshape(&shape)?, targets, task)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.x.len() / self.len().max(1)
    }

    /// Sample `i` as `[N', N', T, 1]`.
    pub fn sample(&self, i: usize) -> Tensor {
        self.x.select_first(i)
    }

    /// Inputs and targets of the samples in `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<f64>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * idx.len());
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = idx.len();
        let x = Tensor::from_vec(&shape, data).expect("batch shape matches data");
        (x, idx.iter().map(|&i| self.targets[i]).collect())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.targets.iter().map(|&y| y as usize).collect()
    }
}

/// Seeded shuffle of `0..n` cut into `(train, validation)`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = libm::round(n as f64 * val_fraction) as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Batch loss for `x` against `targets`, with the model outputs.
pub fn batch_loss(model: &FstMamba, x: &Tensor, targets: &[f64]) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let f = model.bind(&mut g, v)?;
    let loss = bind_loss(&mut g, model.cfg.task, f.output, targets)?;
    Ok((g.value(loss)[0], g.value(f.output).clone()))
}

fn bind_loss(g: &mut Graph, task: Task, out: crate::autodiff::Var, targets: &[f64]) -> Result<crate::autodiff::Var> {
    match task {
        Task::BinaryClassification => g.softmax_ce(out, targets.iter().map(|&y| y as usize).collect()),
        Task::Regression => g.mse(out, targets.to_vec()),
    }
}

/// Loss and per-parameter gradients (in visit order) of one batch.
pub fn loss_and_grads(model: &FstMamba, x: &Tensor, targets: &[f64]) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let f = model.bind(&mut g, v)?;
    let loss = bind_loss(&mut g, model.cfg.task, f.output, targets)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss)[0], collect_param_grads(model, &g, &grads)))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FstMamba,
    pub history: Vec<EpochRecord>,
    pub steps: usize,
    /// Step at which a non-finite loss or gradient stopped training; the
    /// model is the last finite state.
    pub diverged_at: Option<usize>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainOutcome {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.train_loss).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.steps)
    }
}

/// Trains a fresh model; see [`train_with`].
pub fn train(model_cfg: &ModelConfig, train_cfg: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(model_cfg, train_cfg, data, &mut |_| {})
}

/// Trains a fresh model built from `model_cfg` (with `train_cfg`'s ablations
/// added), calling `on_epoch` after every epoch.
pub fn train_with(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let mut cfg = model_cfg.clone();
    cfg.ablations = cfg.ablations.union(train_cfg.ablations);
    if cfg.task != data.task {
        return Err(Error::Config(format!("model task {:?} but dataset task {:?}", cfg.task, data.task)));
    }
    let model = FstMamba::new(cfg)?;
    let (train_idx, val_idx) = split_indices(data.len(), train_cfg.val_fraction, train_cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    train_model(model, train_cfg, data, train_idx, val_idx, on_epoch)
}

/// Continues training `model` on `train_idx`, evaluating on `val_idx`.
pub fn train_model(
    mut model: FstMamba,
    cfg: &TrainConfig,
    data: &Dataset,
    mut train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut state = AdamState::for_module(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut diverged_at = None;
    let order = train_idx.clone();
    'epochs: for epoch in 0..cfg.epochs {
        train_idx.copy_from_slice(&order);
        train_idx.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let result = match loss_and_grads(&model, &x, &y) {
                Err(Error::NonFinite { .. }) => None,
                Err(e) => return Err(e),
                Ok((loss, grads)) if loss.is_finite() && grads.iter().all(Tensor::all_finite) => Some((loss, grads)),
                Ok(_) => None,
            };
            let Some((loss, grads)) = result else {
                diverged_at = Some(step);
                break 'epochs;
            };
            lr = cosine_lr(cfg.lr, step, total);
            cfg.optimizer.step(&mut model, &mut state, &grads, lr)?;
            sum += loss;
            step += 1;
        }
        let val = if val_idx.is_empty() { None } else { Some(evaluate_indices(&model, data, &val_idx, cfg.batch_size)?) };
        let record = EpochRecord { epoch: epoch + 1, train_loss: sum / per_epoch as f64, lr, val };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history, steps: step, diverged_at, train_indices: order, val_indices: val_idx })
}

/// Model configuration plus named parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &FstMamba, step: usize) -> Self {
        Self { config: model.cfg.clone(), step, params: model.named_params() }
    }

    /// Rebuilds the model; names and shapes must match the config exactly.
    pub fn to_model(&self) -> Result<FstMamba> {
        let mut model = FstMamba::new(self.config.clone())?;
        let expected = model.named_params();
        if expected.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameter tensors, config needs {}",
                self.params.len(),
                expected.len()
            )));
        }
        for ((name, t), (want, w)) in self.params.iter().zip(&expected) {
            if name != want || t.shape() != w.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        let mut k = 0;
        model.visit_mut("", &mut |_, p| {
            *p = self.params[k].1.clone();
            k += 1;
        });
        Ok(model)
    }
}
