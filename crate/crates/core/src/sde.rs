//! Brownian increments, Euler–Maruyama integration, and the posterior/prior
//! rollouts of a [`LatentSdeModel`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, Tensor};
use crate::error::{Error, Result};
use crate::model::{DiffusionMode, LatentSdeModel};
use crate::rng::{derive_seed, stream_rng, tags};

/// Uniform time grid `t0 + k·dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || !t0.is_finite() {
            return Err(Error::InvalidInput(format!("time step must be positive and finite, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidInput("time grid needs at least one step".into()));
        }
        Ok(TimeGrid { t0, dt, n_steps })
    }

    /// Grid with `n_points` samples starting at zero.
    pub fn with_points(dt: f64, n_points: usize) -> Result<Self> {
        TimeGrid::new(0.0, dt, n_points.saturating_sub(1))
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }
}

/// Gaussian increments `ΔB ~ N(0, dt)` for a batch of trajectories, laid out
/// as `[step][path][dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrownianIncrements {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub seed: u64,
    data: Vec<f64>,
}

impl BrownianIncrements {
    /// Increments for path `p` come from stream `p` of the seed, so they do
    /// not depend on `n_paths`.
    pub fn sample_batch(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_paths == 0 {
            return Err(Error::InvalidInput("brownian increments need dim >= 1 and n_paths >= 1".into()));
        }
        let sd = grid.dt.sqrt();
        let stride = n_paths * dim;
        let mut data = vec![0.0; grid.n_steps * stride];
        let base = derive_seed(seed, &[tags::BROWNIAN]);
        for p in 0..n_paths {
            let mut rng = stream_rng(base, p as u64);
            for k in 0..grid.n_steps {
                for d in 0..dim {
                    let z: f64 = rng.sample(StandardNormal);
                    data[k * stride + p * dim + d] = sd * z;
                }
            }
        }
        Ok(BrownianIncrements {
            grid,
            n_paths,
            dim,
            seed,
            data,
        })
    }

    /// Row `k` for all paths, length `n_paths·dim`.
    pub fn step(&self, k: usize) -> &[f64] {
        let stride = self.n_paths * self.dim;
        &self.data[k * stride..(k + 1) * stride]
    }

    /// Increment of path `p` at step `k`.
    pub fn increment(&self, k: usize, p: usize) -> &[f64] {
        let i = k * self.n_paths * self.dim + p * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn all(&self) -> &[f64] {
        &self.data
    }
}

/// Single-trajectory increments.
pub fn sample_brownian(grid: TimeGrid, dim: usize, seed: u64) -> Result<BrownianIncrements> {
    BrownianIncrements::sample_batch(grid, 1, dim, seed)
}

/// Standard normal initial draws for `n_paths` trajectories, stream per path.
pub fn standard_normal_draws(n_paths: usize, dim: usize, seed: u64) -> Vec<f64> {
    let base = derive_seed(seed, &[tags::INITIAL]);
    let mut out = Vec::with_capacity(n_paths * dim);
    for p in 0..n_paths {
        let mut rng = stream_rng(base, p as u64);
        for _ in 0..dim {
            out.push(rng.sample::<f64, _>(StandardNormal));
        }
    }
    out
}

/// A trajectory on a time grid: `n_steps + 1` states of `dim` components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub grid: TimeGrid,
    pub dim: usize,
    states: Vec<f64>,
}

impl Path {
    pub fn new(grid: TimeGrid, dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.len() != grid.n_points() * dim {
            return Err(Error::dim(
                "path",
                format!("{} values for {} points of dim {}", states.len(), grid.n_points(), dim),
            ));
        }
        if let Some(i) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite state at point {}", i / dim)));
        }
        Ok(Path { grid, dim, states })
    }

    pub fn constant(grid: TimeGrid, x: &[f64]) -> Self {
        let states = x.iter().copied().cycle().take(grid.n_points() * x.len()).collect();
        Path {
            grid,
            dim: x.len(),
            states,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.n_points()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [f64] {
        &mut self.states
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Values of component `d` over time.
    pub fn component(&self, d: usize) -> Vec<f64> {
        self.states.iter().skip(d).step_by(self.dim).copied().collect()
    }

    /// Points `start..end` as a new path whose grid starts at the time of `start`.
    pub fn window(&self, start: usize, end: usize) -> Result<Path> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidInput(format!(
                "window {start}..{end} outside path of {} points",
                self.len()
            )));
        }
        let grid = TimeGrid {
            t0: self.grid.time(start),
            dt: self.grid.dt,
            n_steps: end - start - 1,
        };
        Ok(Path {
            grid,
            dim: self.dim,
            states: self.states[start * self.dim..end * self.dim].to_vec(),
        })
    }

    /// Keeps only the listed components.
    pub fn select(&self, dims: &[usize]) -> Result<Path> {
        if dims.is_empty() || dims.iter().any(|&d| d >= self.dim) {
            return Err(Error::InvalidInput(format!("cannot select {dims:?} from dim {}", self.dim)));
        }
        let states = (0..self.len())
            .flat_map(|k| dims.iter().map(move |&d| (k, d)))
            .map(|(k, d)| self.states[k * self.dim + d])
            .collect();
        Ok(Path {
            grid: self.grid,
            dim: dims.len(),
            states,
        })
    }
}

/// Euler–Maruyama with left-point (Itô) evaluation:
/// `x_{k+1} = x_k + drift(x_k)·dt + diffusion(x_k) ⊙ ΔB_k`.
///
/// `drift` and `diffusion` write into an output buffer of the state's
/// dimension. Uses path 0 of `noise`.
pub fn euler_maruyama<F, G>(
    mut drift: F,
    mut diffusion: G,
    x0: &[f64],
    grid: TimeGrid,
    noise: &BrownianIncrements,
) -> Result<Path>
where
    F: FnMut(&[f64], &mut [f64]),
    G: FnMut(&[f64], &mut [f64]),
{
    euler_maruyama_path(&mut drift, &mut diffusion, x0, grid, noise, 0)
}

/// As [`euler_maruyama`], driven by path `p` of a batch of increments.
pub fn euler_maruyama_path<F, G>(
    drift: &mut F,
    diffusion: &mut G,
    x0: &[f64],
    grid: TimeGrid,
    noise: &BrownianIncrements,
    p: usize,
) -> Result<Path>
where
    F: FnMut(&[f64], &mut [f64]),
    G: FnMut(&[f64], &mut [f64]),
{
    let dim = x0.len();
    if noise.dim != dim || noise.grid.n_steps < grid.n_steps || p >= noise.n_paths {
        return Err(Error::dim(
            "euler_maruyama",
            format!("noise (dim {}, {} steps) does not cover state dim {dim} over {} steps", noise.dim, noise.grid.n_steps, grid.n_steps),
        ));
    }
    let mut states = Vec::with_capacity(grid.n_points() * dim);
    states.extend_from_slice(x0);
    let mut f = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let mut x = x0.to_vec();
    for k in 0..grid.n_steps {
        drift(&x, &mut f);
        diffusion(&x, &mut g);
        let db = noise.increment(k, p);
        for d in 0..dim {
            x[d] += f[d] * grid.dt + g[d] * db[d];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k });
        }
        states.extend_from_slice(&x);
    }
    Ok(Path { grid, dim, states })
}

/// Output of a posterior rollout on some backend.
pub struct PosteriorRollout<V> {
    /// `n_steps + 1` states, each `[batch, latent_dim]`.
    pub states: Vec<V>,
    /// `Σ_k ½‖(h − f)/g‖²·dt` per trajectory, `[batch, 1]`.
    pub kl: V,
    /// `Σ_k ‖g‖·dt` per trajectory, `[batch, 1]`.
    pub diffusion_size: V,
}

fn diffusion_value<B: Backend>(
    model: &LatentSdeModel,
    b: &mut B,
    z: &B::Value,
    mode: DiffusionMode,
) -> Result<B::Value> {
    match mode {
        DiffusionMode::Learned => model.diffusion.eval(b, z),
        DiffusionMode::Constant(c) => {
            let shape = b.value(z).shape().to_vec();
            Ok(b.constant(Tensor::full(shape, c)))
        }
    }
}

/// Integrates the posterior SDE `dz = h(z, φ) dt + g(z) dB` from `z0`,
/// accumulating the path-space KL integrand and the diffusion size along the
/// same posterior states. `contexts[k]` is the context at grid index `k`.
pub fn integrate_posterior<B: Backend>(
    model: &LatentSdeModel,
    b: &mut B,
    contexts: &[B::Value],
    z0: B::Value,
    grid: TimeGrid,
    noise: &BrownianIncrements,
    mode: DiffusionMode,
) -> Result<PosteriorRollout<B::Value>> {
    if contexts.len() < grid.n_steps {
        return Err(Error::dim(
            "integrate_posterior",
            format!("{} contexts for {} steps", contexts.len(), grid.n_steps),
        ));
    }
    let batch = b.value(&z0).rows();
    let dim = model.latent_dim();
    if noise.n_paths != batch || noise.dim != dim || noise.grid.n_steps < grid.n_steps {
        return Err(Error::dim(
            "integrate_posterior",
            format!("noise shape ({} paths, dim {}) vs batch {batch}, dim {dim}", noise.n_paths, noise.dim),
        ));
    }
    if let DiffusionMode::Constant(c) = mode {
        if !(c > 0.0) {
            return Err(Error::InvalidInput(format!("frozen diffusion must be positive, got {c}")));
        }
    }
    let mut states = Vec::with_capacity(grid.n_points());
    let mut kl_terms = Vec::with_capacity(grid.n_steps);
    let mut g_terms = Vec::with_capacity(grid.n_steps);
    let mut z = z0;
    for k in 0..grid.n_steps {
        let f = model.prior_drift.eval(b, &z)?;
        let input = b.concat_cols(&[&z, &contexts[k]])?;
        let h = model.posterior_drift.eval(b, &input)?;
        let g = diffusion_value(model, b, &z, mode)?;

        let gap = b.sub(&h, &f)?;
        let u = b.div(&gap, &g)?;
        let u2 = b.square(&u)?;
        kl_terms.push(b.row_sum(&u2)?);
        g_terms.push(b.row_norm(&g)?);

        let db = b.constant(Tensor::from_parts(vec![batch, dim], noise.step(k).to_vec()));
        let drift_step = b.scale(&h, grid.dt)?;
        let noise_step = b.mul(&g, &db)?;
        let delta = b.add(&drift_step, &noise_step)?;
        let next = b.add(&z, &delta)?;
        if !b.value(&next).all_finite() {
            return Err(Error::Diverged { step: k });
        }
        states.push(z);
        z = next;
    }
    states.push(z);

    let kl_all = b.concat_cols(&kl_terms.iter().collect::<Vec<_>>())?;
    let kl_sum = b.row_sum(&kl_all)?;
    let kl = b.scale(&kl_sum, 0.5 * grid.dt)?;
    let g_all = b.concat_cols(&g_terms.iter().collect::<Vec<_>>())?;
    let g_sum = b.row_sum(&g_all)?;
    let diffusion_size = b.scale(&g_sum, grid.dt)?;
    Ok(PosteriorRollout {
        states,
        kl,
        diffusion_size,
    })
}

/// Converts a list of `[batch, dim]` states into per-trajectory paths.
pub fn states_to_paths(states: &[&Tensor], grid: TimeGrid) -> Result<Vec<Path>> {
    let first = states
        .first()
        .ok_or_else(|| Error::InvalidInput("no states".into()))?;
    let (batch, dim) = (first.rows(), first.cols());
    let mut out = Vec::with_capacity(batch);
    for p in 0..batch {
        let mut s = Vec::with_capacity(states.len() * dim);
        for t in states {
            s.extend_from_slice(t.row(p));
        }
        out.push(Path::new(grid, dim, s)?);
    }
    Ok(out)
}

/// Rows processed together when sampling many prior paths.
const PRIOR_CHUNK: usize = 256;

/// Samples `n` prior trajectories `dy = f(y) dt + g(y) dB` from standard
/// normal initial states. No tape is recorded.
pub fn sample_prior_paths(model: &LatentSdeModel, n: usize, grid: TimeGrid, seed: u64) -> Result<Vec<Path>> {
    sample_prior_paths_with(model, n, grid, seed, DiffusionMode::Learned)
}

pub fn sample_prior_paths_with(
    model: &LatentSdeModel,
    n: usize,
    grid: TimeGrid,
    seed: u64,
    mode: DiffusionMode,
) -> Result<Vec<Path>> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one prior path".into()));
    }
    let dim = model.latent_dim();
    let init = standard_normal_draws(n, dim, seed);
    let noise = BrownianIncrements::sample_batch(grid, n, dim, seed)?;
    let mut b = Eager::new(&model.params);
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(PRIOR_CHUNK) {
        let rows = PRIOR_CHUNK.min(n - start);
        let mut z = b.constant(Tensor::from_parts(vec![rows, dim], init[start * dim..(start + rows) * dim].to_vec()));
        let mut chunk_states = vec![b.value(&z).clone()];
        for k in 0..grid.n_steps {
            let f = model.prior_drift.eval(&mut b, &z)?;
            let g = diffusion_value(model, &mut b, &z, mode)?;
            let step = noise.step(k);
            let db = b.constant(Tensor::from_parts(vec![rows, dim], step[start * dim..(start + rows) * dim].to_vec()));
            let drift_step = b.scale(&f, grid.dt)?;
            let noise_step = b.mul(&g, &db)?;
            let delta = b.add(&drift_step, &noise_step)?;
            z = b.add(&z, &delta)?;
            if !z.all_finite() {
                return Err(Error::Diverged { step: k });
            }
            chunk_states.push(b.value(&z).clone());
        }
        let refs: Vec<&Tensor> = chunk_states.iter().collect();
        out.extend(states_to_paths(&refs, grid)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dt: f64, n: usize) -> TimeGrid {
        TimeGrid::new(0.0, dt, n).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(0.0, 0.0, 10).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 0).is_err());
        let g = grid(0.01, 400);
        assert_eq!(g.n_points(), 401);
        assert!((g.horizon() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn brownian_is_deterministic_per_seed() {
        let g = grid(0.01, 100);
        let a = sample_brownian(g, 2, 11).unwrap();
        let b = sample_brownian(g, 2, 11).unwrap();
        let c = sample_brownian(g, 2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.all(), c.all());
    }

    #[test]
    fn path_noise_independent_of_batch_size() {
        let g = grid(0.01, 50);
        let small = BrownianIncrements::sample_batch(g, 2, 1, 3).unwrap();
        let large = BrownianIncrements::sample_batch(g, 9, 1, 3).unwrap();
        for k in 0..50 {
            assert_eq!(small.increment(k, 1), large.increment(k, 1));
        }
    }

    #[test]
    fn zero_drift_zero_diffusion_is_constant() {
        let g = grid(0.01, 100);
        let noise = sample_brownian(g, 2, 0).unwrap();
        let p = euler_maruyama(|_, f| f.fill(0.0), |_, s| s.fill(0.0), &[1.5, -2.0], g, &noise).unwrap();
        assert_eq!(p, Path::constant(g, &[1.5, -2.0]));
    }

    #[test]
    fn divergence_reports_step() {
        let g = grid(0.1, 100);
        let noise = sample_brownian(g, 1, 0).unwrap();
        let err = euler_maruyama(|x, f| f[0] = x[0] * x[0] * 1e3, |_, s| s[0] = 0.0, &[1.0], g, &noise).unwrap_err();
        assert!(matches!(err, Error::Diverged { step } if step < 100));
    }

    #[test]
    fn window_and_select() {
        let g = grid(0.5, 3);
        let p = Path::new(g, 2, vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0]).unwrap();
        let w = p.window(1, 3).unwrap();
        assert_eq!(w.states(), &[1.0, 11.0, 2.0, 12.0]);
        assert_eq!(w.grid.t0, 0.5);
        assert_eq!(p.select(&[1]).unwrap().states(), &[10.0, 11.0, 12.0, 13.0]);
        assert_eq!(p.component(0), vec![0.0, 1.0, 2.0, 3.0]);
    }
}
