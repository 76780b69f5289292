//! Ground-truth stochastic systems, dataset normalization and the
//! train / eval-train / test windows.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, tags};
use crate::sde::{Path, TimeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `dT = (a1 + a2·tanh(T − T0) − a3·T⁴)dt + σ dB`
    Ebm,
    /// Energy balance drift with state-proportional diffusion `σ·T`.
    EbmLinearNoise,
    /// `du = −u dt + σ dB`
    Ou,
    /// Two-dimensional FitzHugh–Nagumo, usually observed through `x` only.
    Fhn,
    /// `dT = (−6T⁵ + 20T³ − 8T)dt + σ dB`
    TripleWell,
}

impl Family {
    fn required(self) -> &'static [&'static str] {
        match self {
            Family::Ebm | Family::EbmLinearNoise => &["a1", "a2", "a3", "t0"],
            Family::Ou => &["theta"],
            Family::Fhn => &["tau_x", "tau_y", "alpha1", "alpha3", "c", "beta", "sigma_y"],
            Family::TripleWell => &[],
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Family::Fhn => 2,
            _ => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ebm" => Ok(Family::Ebm),
            "ebm_linear_noise" | "ebm_linear" => Ok(Family::EbmLinearNoise),
            "ou" => Ok(Family::Ou),
            "fhn" => Ok(Family::Fhn),
            "triple_well" => Ok(Family::TripleWell),
            other => Err(Error::InvalidInput(format!("unknown system '{other}'"))),
        }
    }
}

/// A stochastic system with its constants and default sampling grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub family: Family,
    pub constants: BTreeMap<String, f64>,
    /// Diffusion scale (`σ`, `σ_x` for FHN, the slope for linear noise).
    pub sigma: f64,
    pub observed_dims: Vec<usize>,
    pub dt: f64,
    pub t_train: f64,
    /// Euler–Maruyama sub-steps per output sample.
    pub substeps: usize,
}

fn constants(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl SystemSpec {
    pub fn ebm() -> Self {
        SystemSpec {
            family: Family::Ebm,
            constants: constants(&[("a1", 235.175), ("a2", 81.8), ("a3", 3.402e-8), ("t0", 273.0)]),
            sigma: 40.0,
            observed_dims: vec![0],
            dt: 0.01,
            t_train: 4.0,
            substeps: 1,
        }
    }

    /// The energy balance model with `σ = 25`, which tips more rarely.
    pub fn ebm_rare() -> Self {
        SystemSpec { sigma: 25.0, ..Self::ebm() }
    }

    pub fn ebm_linear_noise() -> Self {
        SystemSpec {
            family: Family::EbmLinearNoise,
            sigma: 0.135,
            ..Self::ebm()
        }
    }

    pub fn ou() -> Self {
        SystemSpec {
            family: Family::Ou,
            constants: constants(&[("theta", 1.0)]),
            sigma: 1.0,
            observed_dims: vec![0],
            dt: 0.01,
            t_train: 5.0,
            substeps: 1,
        }
    }

    pub fn fhn() -> Self {
        SystemSpec {
            family: Family::Fhn,
            constants: constants(&[
                ("tau_x", 1.0),
                ("tau_y", 1.0),
                ("b", 2.55),
                ("alpha1", 0.63),
                ("alpha3", 2.71),
                ("c", 0.22),
                ("beta", (-0.67f64).tan()),
                ("sigma_y", 11.08),
            ]),
            sigma: 4.80,
            observed_dims: vec![0],
            dt: 0.01,
            t_train: 4.0,
            substeps: 10,
        }
    }

    pub fn triple_well() -> Self {
        SystemSpec {
            family: Family::TripleWell,
            constants: BTreeMap::new(),
            sigma: 2.5,
            observed_dims: vec![0],
            dt: 0.01,
            t_train: 4.0,
            substeps: 20,
        }
    }

    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Ebm => Self::ebm(),
            Family::EbmLinearNoise => Self::ebm_linear_noise(),
            Family::Ou => Self::ou(),
            Family::Fhn => Self::fhn(),
            Family::TripleWell => Self::triple_well(),
        }
    }

    pub fn constant(&self, name: &str) -> f64 {
        self.constants[name]
    }

    pub fn state_dim(&self) -> usize {
        self.family.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        for name in self.family.required() {
            match self.constants.get(*name) {
                Some(v) if v.is_finite() => {}
                _ => return Err(Error::InvalidInput(format!("{:?} needs constant '{name}'", self.family))),
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.dt > 0.0 && self.t_train > 0.0 && self.substeps > 0) {
            return Err(Error::InvalidInput("dt, t_train and substeps must be positive".into()));
        }
        let dim = self.state_dim();
        if self.observed_dims.is_empty() || self.observed_dims.iter().any(|&d| d >= dim) {
            return Err(Error::InvalidInput(format!(
                "observed dims {:?} invalid for state dim {dim}",
                self.observed_dims
            )));
        }
        Ok(())
    }

    /// Points in the training window `[0, t_train)`.
    pub fn train_points(&self) -> usize {
        (self.t_train / self.dt).round() as usize
    }

    /// Output grid covering `[0, 5·t_train)`.
    pub fn full_grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_points(self.dt, 5 * self.train_points())
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        match self.family {
            Family::Ebm | Family::EbmLinearNoise => {
                let (a1, a2, a3, t0) = (self.constant("a1"), self.constant("a2"), self.constant("a3"), self.constant("t0"));
                let t = x[0];
                out[0] = a1 + a2 * (t - t0).tanh() - a3 * t.powi(4);
            }
            Family::Ou => out[0] = -self.constant("theta") * x[0],
            Family::TripleWell => {
                let t = x[0];
                out[0] = -6.0 * t.powi(5) + 20.0 * t.powi(3) - 8.0 * t;
            }
            Family::Fhn => {
                let (px, py) = (x[0], x[1]);
                out[0] = (self.constant("alpha1") * px - self.constant("alpha3") * px.powi(3) + py) / self.constant("tau_x");
                out[1] = (self.constant("beta") * py - px + self.constant("c")) / self.constant("tau_y");
            }
        }
    }

    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        match self.family {
            Family::EbmLinearNoise => out[0] = self.sigma * x[0],
            Family::Fhn => {
                out[0] = self.sigma;
                out[1] = self.constant("sigma_y");
            }
            _ => out[0] = self.sigma,
        }
    }

    fn drift_1d(&self, x: f64) -> f64 {
        let mut out = [0.0];
        self.drift(&[x], &mut out);
        out[0]
    }

    fn scan_window(&self) -> (f64, f64) {
        match self.family {
            Family::Ebm | Family::EbmLinearNoise => (200.0, 350.0),
            _ => (-5.0, 5.0),
        }
    }
}

/// Real roots of a one-dimensional drift, split by stability.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoints {
    pub stable: Vec<f64>,
    pub unstable: Vec<f64>,
}

/// Roots of the drift by a dense sign-change scan refined with bisection to
/// `1e-10`, classified by the sign of the drift derivative.
pub fn fixed_points(spec: &SystemSpec) -> Result<FixedPoints> {
    spec.validate()?;
    if spec.state_dim() != 1 {
        return Err(Error::InvalidInput(format!("fixed points need a 1-dim system, got {:?}", spec.family)));
    }
    let (lo, hi) = spec.scan_window();
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| spec.drift_1d(x);
    let mut roots = Vec::new();
    let mut a = lo;
    let mut fa = f(a);
    for i in 1..=n {
        let b = lo + i as f64 * h;
        let fb = f(b);
        if fa == 0.0 {
            roots.push(a);
        } else if fa * fb < 0.0 {
            let (mut l, mut r, mut fl) = (a, b, fa);
            while r - l > 1e-10 {
                let m = 0.5 * (l + r);
                let fm = f(m);
                if fm == 0.0 {
                    l = m;
                    r = m;
                    break;
                }
                if fl * fm < 0.0 {
                    r = m;
                } else {
                    l = m;
                    fl = fm;
                }
            }
            roots.push(0.5 * (l + r));
        }
        a = b;
        fa = fb;
    }
    if roots.is_empty() {
        return Err(Error::InvalidInput(format!("no drift root in [{lo}, {hi}]")));
    }
    let mut out = FixedPoints { stable: Vec::new(), unstable: Vec::new() };
    for r in roots {
        let e = 1e-5 * (1.0 + r.abs());
        let slope = (f(r + e) - f(r - e)) / (2.0 * e);
        if slope < 0.0 {
            out.stable.push(r);
        } else {
            out.unstable.push(r);
        }
    }
    Ok(out)
}

fn initial_state(spec: &SystemSpec, wells: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    match spec.family {
        Family::Ebm | Family::EbmLinearNoise => {
            let well = if rng.random::<bool>() { wells[wells.len() - 1] } else { wells[0] };
            vec![well + rng.sample::<f64, _>(StandardNormal)]
        }
        _ => (0..spec.state_dim()).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

/// `n` raw trajectories on `grid` (only the observed components). Path `p`
/// draws its initial state and noise from its own stream.
pub fn simulate(spec: &SystemSpec, n: usize, grid: TimeGrid, seed: u64) -> Result<Vec<Path>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("simulate needs n >= 1".into()));
    }
    let wells = match spec.family {
        Family::Ebm | Family::EbmLinearNoise => fixed_points(spec)?.stable,
        _ => Vec::new(),
    };
    let dim = spec.state_dim();
    let h = grid.dt / spec.substeps as f64;
    let sd = h.sqrt();
    let base = derive_seed(seed, &[tags::SIMULATE]);
    let mut f = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    let mut paths = Vec::with_capacity(n);
    for p in 0..n {
        let mut rng = stream_rng(base, p as u64);
        let mut x = initial_state(spec, &wells, &mut rng);
        let mut obs = Vec::with_capacity(grid.n_points() * spec.observed_dims.len());
        obs.extend(spec.observed_dims.iter().map(|&d| x[d]));
        for k in 0..grid.n_steps {
            for _ in 0..spec.substeps {
                spec.drift(&x, &mut f);
                spec.diffusion(&x, &mut g);
                for d in 0..dim {
                    let z: f64 = rng.sample(StandardNormal);
                    x[d] += f[d] * h + g[d] * sd * z;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: k });
            }
            obs.extend(spec.observed_dims.iter().map(|&d| x[d]));
        }
        paths.push(Path::new(grid, spec.observed_dims.len(), obs)?);
    }
    Ok(paths)
}

/// Normalized trajectories with the statistics used to normalize them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub paths: Vec<Path>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub spec: SystemSpec,
    pub t_train: f64,
}

/// Per-dimension mean and population standard deviation over the first
/// `points` samples of every path.
pub fn window_stats(paths: &[Path], points: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = paths.first().ok_or_else(|| Error::InvalidInput("no paths to normalize".into()))?;
    let dim = first.dim;
    let points = points.min(first.len());
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for p in paths {
        if p.dim != dim || p.len() < points {
            return Err(Error::dim("normalize", "paths differ in dim or length"));
        }
        for k in 0..points {
            for (m, v) in mean.iter_mut().zip(p.state(k)) {
                *m += v;
            }
        }
        count += points;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for p in paths {
        for k in 0..points {
            for d in 0..dim {
                let e = p.state(k)[d] - mean[d];
                var[d] += e * e;
            }
        }
    }
    let mut std = Vec::with_capacity(dim);
    for (d, v) in var.into_iter().enumerate() {
        let s = (v / count as f64).sqrt();
        if !(s > 1e-300) || s <= 1e-12 * mean[d].abs() {
            return Err(Error::ZeroVariance { dim: d });
        }
        std.push(s);
    }
    Ok((mean, std))
}

fn affine_paths(paths: &[Path], f: impl Fn(usize, f64) -> f64) -> Result<Vec<Path>> {
    paths
        .iter()
        .map(|p| {
            let states = p.states().iter().enumerate().map(|(i, v)| f(i % p.dim, *v)).collect();
            Path::new(p.grid, p.dim, states)
        })
        .collect()
}

/// Standardizes with statistics from the training window `[0, t_train)`,
/// applied to the whole horizon.
pub fn normalize(raw: &[Path], spec: &SystemSpec) -> Result<Dataset> {
    let (mean, std) = window_stats(raw, spec.train_points())?;
    let paths = affine_paths(raw, |d, v| (v - mean[d]) / std[d])?;
    Ok(Dataset {
        paths,
        mean,
        std,
        spec: spec.clone(),
        t_train: spec.t_train,
    })
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn grid(&self) -> TimeGrid {
        self.paths[0].grid
    }

    pub fn denormalize(&self, paths: &[Path]) -> Result<Vec<Path>> {
        affine_paths(paths, |d, v| v * self.std[d] + self.mean[d])
    }

    pub fn to_raw(&self, x: f64, d: usize) -> f64 {
        x * self.std[d] + self.mean[d]
    }

    pub fn to_normalized(&self, x: f64, d: usize) -> f64 {
        (x - self.mean[d]) / self.std[d]
    }

    pub fn windows(&self) -> Result<Windows> {
        split(self.grid().dt, self.t_train, self.paths[0].len())
    }

    /// Every path cut to `range`.
    pub fn window(&self, range: Range<usize>) -> Result<Vec<Path>> {
        self.paths.iter().map(|p| p.window(range.start, range.end)).collect()
    }

    pub fn check(&self) -> Result<()> {
        self.spec.validate()?;
        if self.paths.is_empty() || self.mean.len() != self.std.len() {
            return Err(Error::InvalidInput("dataset has no paths or inconsistent statistics".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidInput("dataset std must be positive".into()));
        }
        let grid = self.grid();
        if self.paths.iter().any(|p| p.grid != grid || p.dim != self.dim()) {
            return Err(Error::InvalidInput("dataset paths differ in grid or dim".into()));
        }
        Ok(())
    }
}

/// Index ranges on the shared grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Windows {
    pub train: Range<usize>,
    pub eval_train: Range<usize>,
    pub test: Range<usize>,
}

/// Training `[0, t)`, eval-train `[t/2, t)`, test `[t, 5t)` in sample indices.
pub fn split(dt: f64, t_train: f64, n_points: usize) -> Result<Windows> {
    let n = (t_train / dt).round() as usize;
    if n < 2 {
        return Err(Error::InvalidInput(format!("t_train {t_train} spans fewer than two samples")));
    }
    if n_points < 5 * n {
        return Err(Error::InvalidInput(format!(
            "horizon of {n_points} samples is shorter than 5·t_train = {} samples",
            5 * n
        )));
    }
    Ok(Windows {
        train: 0..n,
        eval_train: n / 2..n,
        test: n..5 * n,
    })
}
