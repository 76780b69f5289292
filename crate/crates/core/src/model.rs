//! The latent SDE: prior drift `f`, context-conditioned posterior drift `h`,
//! shared diffusion `g`, reverse-time encoder and initial-state map, plus the
//! training objective `L_E − β·L_KL + γ·L_G`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Backend, Eager, Gradients, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::{DiffusionNet, Encoder, InitialStateMap, Mlp};
use crate::rng::{derive_seed, tags};
use crate::sde::{integrate_posterior, states_to_paths, standard_normal_draws, BrownianIncrements, Path, TimeGrid};

/// Architecture and observation-model settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Hidden widths shared by the drift and diffusion networks.
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub encoder_hidden: usize,
    pub context_dim: usize,
    pub observation_variance: f64,
    /// Weight each observation's log-density by `dt` instead of summing.
    pub dt_weighted_loglik: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 1,
            hidden: vec![100, 100],
            hidden_activation: Activation::Tanh,
            encoder_hidden: 64,
            context_dim: 64,
            observation_variance: 0.01,
            dt_weighted_loglik: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.encoder_hidden == 0 || self.context_dim == 0 {
            return Err(Error::InvalidInput("model dimensions must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidInput(format!("bad hidden widths {:?}", self.hidden)));
        }
        if !(self.observation_variance > 0.0) {
            return Err(Error::InvalidInput("observation variance must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter bundle of a latent SDE.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSdeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub prior_drift: Mlp,
    pub posterior_drift: Mlp,
    pub diffusion: DiffusionNet,
    pub encoder: Encoder,
    pub initial_map: InitialStateMap,
}

/// Which diffusion drives a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DiffusionMode {
    Learned,
    /// `g ≡ c` everywhere, used by the diffusion-balance scan.
    Constant(f64),
}

/// How the diffusion size enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisePenalty {
    /// `+ γ·L_G`
    Reward,
    /// `− γ·(L_G − target)²`
    Target { target: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboOptions {
    pub beta: f64,
    pub gamma: f64,
    pub penalty: NoisePenalty,
    pub diffusion: DiffusionMode,
}

impl ElboOptions {
    pub fn new(beta: f64, gamma: f64) -> Self {
        ElboOptions {
            beta,
            gamma,
            penalty: NoisePenalty::Reward,
            diffusion: DiffusionMode::Learned,
        }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.penalty = NoisePenalty::Target { target };
        self
    }

    pub fn with_diffusion(mut self, mode: DiffusionMode) -> Self {
        self.diffusion = mode;
        self
    }
}

/// Batch-mean loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_e: f64,
    pub l_kl: f64,
    pub l_g: f64,
    pub beta_effective: f64,
    pub gamma: f64,
    /// Contribution of the noise term to the objective.
    pub penalty: f64,
    pub objective: f64,
    /// Time-averaged diffusion norm along the posterior, `l_g / horizon`.
    pub diffusion_size: f64,
}

/// Objective on some backend: the scalar node plus posterior paths.
pub struct Elbo<V> {
    pub objective: V,
    pub breakdown: LossBreakdown,
    pub posterior: Vec<V>,
}

impl LatentSdeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream_rng(derive_seed(seed, &[tags::INIT_PARAMS]), 0);
        let mut params = ParamStore::new();
        let d = config.latent_dim;
        let act = config.hidden_activation;
        let sizes = |n_in: usize| {
            let mut s = vec![n_in];
            s.extend_from_slice(&config.hidden);
            s.push(d);
            s
        };
        let prior_drift = Mlp::new(&mut params, "prior_drift", &sizes(d), act, &mut rng)?;
        let posterior_drift = Mlp::new(&mut params, "posterior_drift", &sizes(d + config.context_dim), act, &mut rng)?;
        let diffusion = DiffusionNet::new(&mut params, "diffusion", d, &config.hidden, act, &mut rng)?;
        let encoder = Encoder::new(&mut params, "encoder", d, config.encoder_hidden, config.context_dim, &mut rng)?;
        let initial_map = InitialStateMap::new(&mut params, "initial_map", config.context_dim, d, &mut rng);
        Ok(LatentSdeModel {
            config,
            params,
            prior_drift,
            posterior_drift,
            diffusion,
            encoder,
            initial_map,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Copies the prior drift into the posterior drift with zero weight on the
    /// context, so that `h(z, φ) = f(z)` exactly.
    pub fn tie_posterior_to_prior(&mut self) {
        let d = self.latent_dim();
        for (pl, ql) in self.prior_drift.layers.clone().iter().zip(self.posterior_drift.layers.clone().iter()) {
            let pw = self.params.get(pl.weight).clone();
            let pb = self.params.get(pl.bias).clone();
            let qw = self.params.get_mut(ql.weight);
            if ql.n_in == pl.n_in {
                qw.data_mut().copy_from_slice(pw.data());
            } else {
                // First layer: input is [z, context].
                let (n_out, n_in) = (ql.n_out, ql.n_in);
                let data = qw.data_mut();
                for o in 0..n_out {
                    for i in 0..n_in {
                        data[o * n_in + i] = if i < d { pw.data()[o * d + i] } else { 0.0 };
                    }
                }
            }
            self.params.get_mut(ql.bias).data_mut().copy_from_slice(pb.data());
        }
    }

    /// Makes the initial posterior a standard normal for every context.
    pub fn match_initial_to_prior(&mut self) {
        self.initial_map.layer.zero(&mut self.params);
    }
}

/// `Σ_points Σ_dims log N(x; z, variance)` for one pair of paths.
pub fn observation_loglik(latent: &Path, data: &Path, variance: f64) -> Result<f64> {
    observation_loglik_weighted(latent, data, variance, false)
}

pub fn observation_loglik_weighted(latent: &Path, data: &Path, variance: f64, dt_weighted: bool) -> Result<f64> {
    if latent.grid != data.grid || latent.dim != data.dim {
        return Err(Error::dim("observation_loglik", "paths do not share grid and dimension"));
    }
    if !(variance > 0.0) {
        return Err(Error::InvalidInput("variance must be positive".into()));
    }
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * variance).ln();
    let sse: f64 = latent
        .states()
        .iter()
        .zip(data.states())
        .map(|(z, x)| (x - z) * (x - z))
        .sum();
    let total = log_norm * latent.states().len() as f64 - sse / (2.0 * variance);
    Ok(if dt_weighted { total * data.grid.dt } else { total })
}

/// Linear KL weight schedule `β_final·min(1, epoch/ramp)`.
pub fn kl_anneal(epoch: usize, beta_final: f64, ramp: usize) -> f64 {
    let ramp = ramp.max(1);
    beta_final * (epoch as f64 / ramp as f64).min(1.0)
}

fn check_batch(model: &LatentSdeModel, batch: &[Path]) -> Result<TimeGrid> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    if first.dim != model.latent_dim() {
        return Err(Error::dim(
            "elbo",
            format!("data dim {} vs latent dim {}", first.dim, model.latent_dim()),
        ));
    }
    if batch.iter().any(|p| p.grid != first.grid || p.dim != first.dim) {
        return Err(Error::InvalidInput("batch paths must share a grid".into()));
    }
    Ok(first.grid)
}

/// Builds the objective on backend `b`. Batch element `i` uses noise stream
/// `i` of `seed` for both its initial draw and its Brownian path.
pub fn elbo_on<B: Backend>(
    model: &LatentSdeModel,
    b: &mut B,
    batch: &[Path],
    opts: &ElboOptions,
    seed: u64,
) -> Result<Elbo<B::Value>> {
    let grid = check_batch(model, batch)?;
    let n = batch.len();
    let d = model.latent_dim();
    let np = grid.n_points();

    let observations: Vec<B::Value> = (0..np)
        .map(|k| {
            let mut row = Vec::with_capacity(n * d);
            for p in batch {
                row.extend_from_slice(p.state(k));
            }
            b.constant(Tensor::from_parts(vec![n, d], row))
        })
        .collect();
    let contexts = model.encoder.encode_reversed(b, &observations)?;

    // Initial posterior N(μ, s²) and its KL against N(0, 1).
    let (mean, log_scale) = model.initial_map.eval(b, &contexts[0])?;
    let scale = b.exp(&log_scale)?;
    let eps = b.constant(Tensor::from_parts(vec![n, d], standard_normal_draws(n, d, seed)));
    let spread = b.mul(&scale, &eps)?;
    let z0 = b.add(&mean, &spread)?;
    let kl0 = {
        let m2 = b.square(&mean)?;
        let s2 = b.square(&scale)?;
        let two_log = b.scale(&log_scale, 2.0)?;
        let a = b.add(&m2, &s2)?;
        let a = b.sub(&a, &two_log)?;
        let a = b.add_scalar(&a, -1.0)?;
        let per_row = b.row_sum(&a)?;
        b.scale(&per_row, 0.5)?
    };

    let noise = BrownianIncrements::sample_batch(grid, n, d, seed)?;
    let rollout = integrate_posterior(model, b, &contexts, z0, grid, &noise, opts.diffusion)?;

    // Reconstruction: Σ_k log N(x_k; z_k, v) per trajectory.
    let v = model.config.observation_variance;
    let z_all = b.concat_cols(&rollout.states.iter().collect::<Vec<_>>())?;
    let x_all = {
        let mut data = Vec::with_capacity(n * np * d);
        for p in batch {
            data.extend_from_slice(p.states());
        }
        b.constant(Tensor::from_parts(vec![n, np * d], data))
    };
    let resid = b.sub(&x_all, &z_all)?;
    let sq = b.square(&resid)?;
    let sse = b.row_sum(&sq)?;
    let le_rows = {
        let scaled = b.scale(&sse, -1.0 / (2.0 * v))?;
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI * v).ln() * (np * d) as f64;
        let with_norm = b.add_scalar(&scaled, log_norm)?;
        if model.config.dt_weighted_loglik {
            b.scale(&with_norm, grid.dt)?
        } else {
            with_norm
        }
    };

    let mean_of = |b: &mut B, x: &B::Value| -> Result<B::Value> {
        let s = b.sum(x)?;
        b.scale(&s, 1.0 / n as f64)
    };
    let l_e = mean_of(b, &le_rows)?;
    let kl_rows = b.add(&rollout.kl, &kl0)?;
    let l_kl = mean_of(b, &kl_rows)?;
    let l_g = mean_of(b, &rollout.diffusion_size)?;

    let weighted_kl = b.scale(&l_kl, opts.beta)?;
    let base = b.sub(&l_e, &weighted_kl)?;
    let penalty = match opts.penalty {
        NoisePenalty::Reward => b.scale(&l_g, opts.gamma)?,
        NoisePenalty::Target { target } => {
            let dev = b.add_scalar(&l_g, -target)?;
            let dev2 = b.square(&dev)?;
            b.scale(&dev2, -opts.gamma)?
        }
    };
    let objective = b.add(&base, &penalty)?;

    let item = |b: &B, x: &B::Value| b.value(x).data()[0];
    let l_g_value = item(b, &l_g);
    let breakdown = LossBreakdown {
        l_e: item(b, &l_e),
        l_kl: item(b, &l_kl),
        l_g: l_g_value,
        beta_effective: opts.beta,
        gamma: opts.gamma,
        penalty: item(b, &penalty),
        objective: item(b, &objective),
        diffusion_size: l_g_value / grid.horizon(),
    };
    Ok(Elbo {
        objective,
        breakdown,
        posterior: rollout.states,
    })
}

/// Objective with the reward-form noise term, evaluated without a tape.
pub fn elbo(model: &LatentSdeModel, batch: &[Path], beta: f64, gamma: f64, seed: u64) -> Result<LossBreakdown> {
    evaluate(model, batch, &ElboOptions::new(beta, gamma), seed)
}

/// Objective with the squared-deviation noise term `−γ·(L_G − g_target)²`.
pub fn elbo_target_penalty(
    model: &LatentSdeModel,
    batch: &[Path],
    beta: f64,
    gamma: f64,
    g_target: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    evaluate(model, batch, &ElboOptions::new(beta, gamma).with_target(g_target), seed)
}

pub fn evaluate(model: &LatentSdeModel, batch: &[Path], opts: &ElboOptions, seed: u64) -> Result<LossBreakdown> {
    let mut b = Eager::new(&model.params);
    Ok(elbo_on(model, &mut b, batch, opts, seed)?.breakdown)
}

/// Posterior trajectories for a batch (same noise as [`evaluate`]).
pub fn posterior_paths(model: &LatentSdeModel, batch: &[Path], opts: &ElboOptions, seed: u64) -> Result<Vec<Path>> {
    let grid = check_batch(model, batch)?;
    let mut b = Eager::new(&model.params);
    let out = elbo_on(model, &mut b, batch, opts, seed)?;
    let refs: Vec<&Tensor> = out.posterior.iter().map(|v| v.as_ref()).collect();
    states_to_paths(&refs, grid)
}

/// Records the objective on a tape and returns it with `∂objective/∂θ`,
/// indexed like `model.params`.
pub fn elbo_with_gradients(
    model: &LatentSdeModel,
    batch: &[Path],
    opts: &ElboOptions,
    seed: u64,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::with_params(&model.params);
    let out = elbo_on(model, &mut tape, batch, opts, seed)?;
    let grads = tape.backward(out.objective)?;
    Ok((out.breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden: vec![8, 8],
            encoder_hidden: 6,
            context_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn toy_batch(n: usize, steps: usize) -> Vec<Path> {
        let grid = TimeGrid::new(0.0, 0.01, steps).unwrap();
        (0..n)
            .map(|i| {
                let s = (0..=steps).map(|k| ((k + 3 * i) as f64 * 0.1).sin()).collect();
                Path::new(grid, 1, s).unwrap()
            })
            .collect()
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(kl_anneal(0, 10.0, 1000), 0.0);
        assert_eq!(kl_anneal(500, 10.0, 1000), 5.0);
        assert_eq!(kl_anneal(1000, 10.0, 1000), 10.0);
        assert_eq!(kl_anneal(5000, 10.0, 1000), 10.0);
    }

    #[test]
    fn loglik_perfect_reconstruction() {
        let grid = TimeGrid::new(0.0, 0.01, 9).unwrap();
        let p = Path::new(grid, 1, (0..10).map(|k| k as f64).collect()).unwrap();
        let ll = observation_loglik(&p, &p, 0.01).unwrap();
        let per_point = -0.5 * (2.0 * std::f64::consts::PI * 0.01).ln();
        assert!((ll - 10.0 * per_point).abs() < 1e-12);
        assert!((per_point - 1.38363).abs() < 1e-4);

        let mut off = p.clone();
        off.states_mut()[3] += 0.1;
        let ll_off = observation_loglik(&off, &p, 0.01).unwrap();
        assert!((ll - ll_off - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loglik_grid_mismatch() {
        let a = toy_batch(1, 5).remove(0);
        let b = toy_batch(1, 6).remove(0);
        assert!(observation_loglik(&a, &b, 0.01).is_err());
    }

    #[test]
    fn tied_model_has_zero_kl() {
        let mut m = LatentSdeModel::new(small_config(), 3).unwrap();
        m.tie_posterior_to_prior();
        m.match_initial_to_prior();
        let batch = toy_batch(3, 20);
        let lb = elbo(&m, &batch, 2.0, 0.5, 9).unwrap();
        assert_eq!(lb.l_kl, 0.0);
        assert_eq!(lb.objective, lb.l_e + 0.5 * lb.l_g);
    }

    #[test]
    fn objective_is_its_combination() {
        let m = LatentSdeModel::new(small_config(), 4).unwrap();
        let batch = toy_batch(2, 15);
        let lb = elbo(&m, &batch, 3.0, 7.0, 1).unwrap();
        assert!(lb.l_kl >= 0.0 && lb.l_g > 0.0);
        let recombined = lb.l_e - lb.beta_effective * lb.l_kl + lb.gamma * lb.l_g;
        assert!((lb.objective - recombined).abs() <= 1e-12 * lb.objective.abs().max(1.0));
        assert_eq!(lb, elbo(&m, &batch, 3.0, 7.0, 1).unwrap());
    }

    #[test]
    fn gamma_zero_matches_plain_objective() {
        let m = LatentSdeModel::new(small_config(), 5).unwrap();
        let batch = toy_batch(2, 10);
        let a = elbo(&m, &batch, 1.0, 0.0, 2).unwrap();
        let b = elbo_target_penalty(&m, &batch, 1.0, 0.0, 3.0, 2).unwrap();
        assert_eq!(a.objective, a.l_e - a.l_kl);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn target_penalty_arithmetic() {
        let m = LatentSdeModel::new(small_config(), 6).unwrap();
        let batch = toy_batch(2, 10);
        let lb = elbo_target_penalty(&m, &batch, 1.0, 4.0, 0.05, 2).unwrap();
        let expected = -4.0 * (lb.l_g - 0.05).powi(2);
        assert!((lb.penalty - expected).abs() < 1e-12);
        let at_target = elbo_target_penalty(&m, &batch, 1.0, 4.0, lb.l_g, 2).unwrap();
        assert_eq!(at_target.penalty, 0.0);
    }

    #[test]
    fn elbo_rejects_bad_batches() {
        let m = LatentSdeModel::new(small_config(), 6).unwrap();
        assert!(elbo(&m, &[], 1.0, 0.0, 0).is_err());
        let mut batch = toy_batch(1, 10);
        batch.extend(toy_batch(1, 11));
        assert!(elbo(&m, &batch, 1.0, 0.0, 0).is_err());
    }
}
