//! ADAM with exponential learning-rate decay and linear KL annealing.
//!
//! One epoch is one optimizer step on one batch drawn from the training
//! paths. The batch and the Brownian noise of epoch `k` are derived from
//! `(seed, k)` only, so a run resumed from a checkpoint continues exactly as
//! the uninterrupted run would.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ElboOptions, LatentSdeModel, LossBreakdown, NoisePenalty, elbo_with_gradients, kl_anneal};
use crate::rng::{derive_seed, stream_rng, tags};
use crate::sde::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative decay per iteration.
    pub lr_decay: f64,
    pub beta_final: f64,
    pub gamma: f64,
    pub penalty: NoisePenalty,
    pub anneal_ramp: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Global-norm gradient clip; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10_000,
            batch_size: 1024,
            lr0: 0.01,
            lr_decay: 0.997,
            beta_final: 10.0,
            gamma: 0.0,
            penalty: NoisePenalty::Reward,
            anneal_ramp: 1000,
            seed: 0,
            eval_every: 100,
            clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.anneal_ramp == 0 || self.eval_every == 0 {
            return Err(Error::InvalidInput("epochs, batch_size, anneal_ramp and eval_every must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidInput(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidInput(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.beta_final >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidInput("beta and gamma must be non-negative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidInput(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate used at iteration `k`.
    pub fn learning_rate(&self, k: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(k as i32)
    }

    pub fn options(&self, epoch: usize) -> ElboOptions {
        ElboOptions {
            beta: kl_anneal(epoch, self.beta_final, self.anneal_ramp),
            gamma: self.gamma,
            penalty: self.penalty,
            diffusion: crate::model::DiffusionMode::Learned,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// Bias-corrected ADAM step minimizing the loss whose gradient is `grads`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::dim("adam_step", format!("tensor {i}: {:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (x, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *x -= lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub l_e: f64,
    pub l_kl: f64,
    pub l_g: f64,
    pub beta_eff: f64,
    pub objective: f64,
    pub diffusion_size: f64,
    pub lr: f64,
}

impl TrainRecord {
    fn new(epoch: usize, b: &LossBreakdown, lr: f64) -> Self {
        TrainRecord {
            epoch,
            l_e: b.l_e,
            l_kl: b.l_kl,
            l_g: b.l_g,
            beta_eff: b.beta_effective,
            objective: b.objective,
            diffusion_size: b.diffusion_size,
            lr,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,l_e,l_kl,l_g,beta_eff,objective,diffusion_size,lr";

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn diffusion_sizes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.diffusion_size).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.epoch, r.l_e, r.l_kl, r.l_g, r.beta_eff, r.objective, r.diffusion_size, r.lr
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRAIN_LOG_HEADER) {
            return Err(Error::InvalidInput("train log header mismatch".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::InvalidInput(format!("train log line {}: '{line}'", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad());
            records.push(TrainRecord {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                l_e: num(1)?,
                l_kl: num(2)?,
                l_g: num(3)?,
                beta_eff: num(4)?,
                objective: num(5)?,
                diffusion_size: num(6)?,
                lr: num(7)?,
            });
        }
        Ok(TrainLog { records })
    }
}

/// Resumable training state: epoch counter, ADAM moments and the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: TrainConfig,
    pub hyper: AdamHyper,
    pub adam: AdamState,
    pub epoch: usize,
    pub log: TrainLog,
}

/// Indices of the epoch's batch: all paths when the batch covers the set,
/// otherwise a uniform draw without replacement.
pub fn batch_indices(n_paths: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<usize> {
    if batch_size >= n_paths {
        return (0..n_paths).collect();
    }
    let mut rng = stream_rng(derive_seed(seed, &[tags::BATCH]), epoch as u64);
    let mut idx = rand::seq::index::sample(&mut rng, n_paths, batch_size).into_vec();
    idx.sort_unstable();
    idx
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &LatentSdeModel) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: AdamState::new(model.params.tensors()),
            config,
            hyper: AdamHyper::default(),
            epoch: 0,
            log: TrainLog::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One epoch. On a non-finite objective, gradient or divergence of the
    /// rollout the parameters are left untouched and the error is returned.
    pub fn step(&mut self, model: &mut LatentSdeModel, data: &[Path]) -> Result<TrainRecord> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no training paths".into()));
        }
        let epoch = self.epoch;
        let idx = batch_indices(data.len(), self.config.batch_size, self.config.seed, epoch);
        let batch: Vec<Path> = idx.iter().map(|&i| data[i].clone()).collect();
        let noise_seed = derive_seed(self.config.seed, &[tags::EPOCH, epoch as u64]);
        let opts = self.config.options(epoch);
        let (breakdown, grads) = match elbo_with_gradients(model, &batch, &opts, noise_seed) {
            Err(Error::Diverged { .. }) => return Err(Error::Diverged { step: epoch }),
            other => other?,
        };
        let norm = grads.global_norm();
        if !breakdown.objective.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged { step: epoch });
        }
        // ascent on the objective = descent on its negation
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => -c / norm,
            _ => -1.0,
        };
        let descent: Vec<Tensor> = grads
            .into_vec()
            .into_iter()
            .map(|mut g| {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                g
            })
            .collect();
        let lr = self.config.learning_rate(epoch);
        adam_step(model.params.tensors_mut(), &descent, &mut self.adam, lr, self.hyper)?;
        let record = TrainRecord::new(epoch, &breakdown, lr);
        self.log.records.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs, calling `on_eval` every `eval_every` epochs
    /// and after the last one.
    pub fn run_with<F>(&mut self, model: &mut LatentSdeModel, data: &[Path], mut on_eval: F) -> Result<()>
    where
        F: FnMut(&Trainer, &LatentSdeModel) -> Result<()>,
    {
        while !self.is_done() {
            self.step(model, data)?;
            if self.epoch % self.config.eval_every == 0 || self.is_done() {
                on_eval(self, model)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self, model: &mut LatentSdeModel, data: &[Path]) -> Result<()> {
        self.run_with(model, data, |_, _| Ok(()))
    }
}

/// Trains `model` in place on `data` and returns the log. On divergence the
/// model keeps the last good parameters and the error is returned.
pub fn train(model: &mut LatentSdeModel, data: &[Path], config: &TrainConfig) -> Result<TrainLog> {
    let mut trainer = Trainer::new(config.clone(), model)?;
    trainer.run(model, data)?;
    Ok(trainer.log)
}
