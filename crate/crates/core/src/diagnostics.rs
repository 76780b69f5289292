//! Evaluation of trajectories and trained models: marginals, Wasserstein-1,
//! transition rates, Kramers–Moyal coefficients, drift/diffusion tables and
//! the constant-diffusion balance scan.
//!
//! All functions are pure in their inputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, Tensor};
use crate::error::{Error, Result};
use crate::model::{DiffusionMode, ElboOptions, LatentSdeModel, evaluate};
use crate::sde::Path;
use crate::systems::{Dataset, Family, fixed_points};

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Wasserstein-1 distance between two empirical distributions, i.e.
/// `∫ |F_a⁻¹(u) − F_b⁻¹(u)| du` over the step quantile functions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("wasserstein1 needs non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("wasserstein1 needs finite samples".into()));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    if sa.len() == sb.len() {
        let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
        return Ok(sum / sa.len() as f64);
    }
    // Merge the quantile breakpoints i/n and j/m exactly in integer
    // arithmetic: u = k / (n·m).
    let (n, m) = (sa.len() as u64, sb.len() as u64);
    let (mut i, mut j) = (0u64, 0u64);
    let mut u = 0u64;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        total += (next - u) as f64 * (sa[i as usize] - sb[j as usize]).abs();
        u = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

/// Crossings of a threshold, pooled over trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    /// Crossings per unit time per trajectory.
    pub rate: f64,
    pub count: usize,
    pub n_paths: usize,
    /// Window length in time units (`points · dt`).
    pub window: f64,
}

/// Counts sign changes of `x_t − threshold` between consecutive samples of
/// component 0.
pub fn transition_rate(paths: &[Path], threshold: f64) -> Result<TransitionStats> {
    if !threshold.is_finite() {
        return Err(Error::InvalidInput("threshold must be finite".into()));
    }
    let first = paths.first().ok_or_else(|| Error::InvalidInput("no paths".into()))?;
    let mut count = 0;
    for p in paths {
        let d = p.dim;
        let s = p.states();
        for k in 1..p.len() {
            if (s[(k - 1) * d] - threshold) * (s[k * d] - threshold) < 0.0 {
                count += 1;
            }
        }
    }
    let window = first.len() as f64 * first.grid.dt;
    Ok(TransitionStats {
        rate: count as f64 / (paths.len() as f64 * window),
        count,
        n_paths: paths.len(),
        window,
    })
}

/// Epanechnikov kernel `0.75(1 − u²)` on `|u| ≤ 1`.
pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() <= 1.0 { 0.75 * (1.0 - u * u) } else { 0.0 }
}

/// Silverman-style bandwidth `1.06·std·N^(−1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    1.06 * var.sqrt() * n.powf(-0.2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmConfig {
    pub n_bins: usize,
    /// Kernel width; Silverman's rule when `None`.
    pub bandwidth: Option<f64>,
    /// Bin range; data min/max when `None`.
    pub range: Option<(f64, f64)>,
    /// Bins with total kernel weight below this are flagged invalid.
    pub min_weight: f64,
    /// Divide `m_n` by `n!`.
    pub factorial: bool,
}

impl Default for KmConfig {
    fn default() -> Self {
        KmConfig {
            n_bins: 50,
            bandwidth: None,
            range: None,
            min_weight: 10.0,
            factorial: false,
        }
    }
}

/// Kernel-weighted conditional moments `m_n(x) = (1/Δt)·E[(Δx)ⁿ | x]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmEstimate {
    pub bin_centers: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub counts: Vec<f64>,
    pub valid: Vec<bool>,
    pub bandwidth: f64,
    pub dt: f64,
}

impl KmEstimate {
    /// `(center, m1, m2)` of valid bins.
    pub fn valid_bins(&self) -> Vec<(f64, f64, f64)> {
        (0..self.bin_centers.len())
            .filter(|&i| self.valid[i])
            .map(|i| (self.bin_centers[i], self.m1[i], self.m2[i]))
            .collect()
    }

    /// Valid bin whose center is closest to `x`.
    pub fn nearest_valid(&self, x: f64) -> Option<usize> {
        (0..self.bin_centers.len())
            .filter(|&i| self.valid[i])
            .min_by(|&a, &b| (self.bin_centers[a] - x).abs().total_cmp(&(self.bin_centers[b] - x).abs()))
    }

    /// m2 at the valid bin nearest `x`.
    pub fn m2_at(&self, x: f64) -> Option<f64> {
        self.nearest_valid(x).map(|i| self.m2[i])
    }

    /// Mean of m2 over valid bins with centers in `[lo, hi]`.
    pub fn mean_m2(&self, lo: f64, hi: f64) -> Option<f64> {
        let v: Vec<f64> = self.valid_bins().into_iter().filter(|b| b.0 >= lo && b.0 <= hi).map(|b| b.2).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Least-squares slope of `m1` (`order = 1`) or `m2` against the bin
    /// center over valid bins in `[lo, hi]`.
    pub fn slope(&self, order: usize, lo: f64, hi: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .valid_bins()
            .into_iter()
            .filter(|b| b.0 >= lo && b.0 <= hi)
            .map(|b| (b.0, if order == 1 { b.1 } else { b.2 }))
            .collect();
        least_squares_slope(&pts)
    }
}

pub fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Kramers–Moyal coefficients of component 0 from consecutive samples of
/// every path.
pub fn km_coefficients(paths: &[Path], cfg: &KmConfig) -> Result<KmEstimate> {
    let first = paths.first().ok_or_else(|| Error::InvalidInput("no paths".into()))?;
    let dt = first.grid.dt;
    if cfg.n_bins == 0 {
        return Err(Error::InvalidInput("n_bins must be >= 1".into()));
    }
    if paths.iter().any(|p| (p.grid.dt - dt).abs() > 1e-12 * dt) {
        return Err(Error::InvalidInput("km_coefficients needs a shared time step".into()));
    }
    let mut xs = Vec::new();
    let mut dx = Vec::new();
    for p in paths {
        let c = p.component(0);
        for k in 1..c.len() {
            xs.push(c[k - 1]);
            dx.push(c[k] - c[k - 1]);
        }
    }
    if xs.is_empty() {
        return Err(Error::InvalidInput("paths have no increments".into()));
    }
    let bandwidth = cfg.bandwidth.unwrap_or_else(|| silverman_bandwidth(&xs));
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let (lo, hi) = cfg.range.unwrap_or_else(|| {
        let s = sorted(&xs);
        (s[0], s[s.len() - 1])
    });
    let centers: Vec<f64> = if cfg.n_bins == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..cfg.n_bins).map(|i| lo + (hi - lo) * i as f64 / (cfg.n_bins - 1) as f64).collect()
    };

    // Sort by state so each bin visits only samples inside its support.
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let xs_sorted: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let dx_sorted: Vec<f64> = order.iter().map(|&i| dx[i]).collect();

    let (f1, f2) = if cfg.factorial { (1.0, 2.0) } else { (1.0, 1.0) };
    let mut est = KmEstimate {
        bin_centers: centers.clone(),
        m1: Vec::with_capacity(centers.len()),
        m2: Vec::with_capacity(centers.len()),
        counts: Vec::with_capacity(centers.len()),
        valid: Vec::with_capacity(centers.len()),
        bandwidth,
        dt,
    };
    for &c in &centers {
        let start = xs_sorted.partition_point(|&x| x < c - bandwidth);
        let end = xs_sorted.partition_point(|&x| x <= c + bandwidth);
        let (mut w, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for k in start..end {
            let wk = epanechnikov((xs_sorted[k] - c) / bandwidth);
            w += wk;
            s1 += wk * dx_sorted[k];
            s2 += wk * dx_sorted[k] * dx_sorted[k];
        }
        let ok = w >= cfg.min_weight && w > 0.0;
        est.counts.push(w);
        est.valid.push(ok);
        if ok {
            est.m1.push(s1 / w / dt / f1);
            est.m2.push(s2 / w / dt / f2);
        } else {
            est.m1.push(f64::NAN);
            est.m2.push(f64::NAN);
        }
    }
    Ok(est)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    /// Indices of strict interior local maxima (plateaus count once).
    pub fn local_maxima(&self) -> Vec<usize> {
        let d = &self.density;
        let mut out = Vec::new();
        let mut i = 0;
        while i < d.len() {
            let mut j = i;
            while j + 1 < d.len() && d[j + 1] == d[i] {
                j += 1;
            }
            let left_lower = i == 0 || d[i - 1] < d[i];
            let right_lower = j + 1 == d.len() || d[j + 1] < d[i];
            if left_lower && right_lower && d[i] > 0.0 {
                out.push((i + j) / 2);
            }
            i = j + 1;
        }
        out
    }
}

/// Density-normalized histogram on `[lo, hi]` (values outside are dropped;
/// `hi` falls in the last bin).
pub fn marginal_histogram(values: &[f64], n_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if n_bins == 0 || !(hi > lo) {
        return Err(Error::InvalidInput(format!("histogram needs n_bins >= 1 and lo < hi, got {n_bins}, {range:?}")));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    let mut total = 0usize;
    for &v in values {
        if v < lo || v > hi || !v.is_finite() {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(n_bins - 1);
        counts[b] += 1;
        total += 1;
    }
    let norm = if total > 0 { 1.0 / (total as f64 * width) } else { 0.0 };
    Ok(Histogram {
        edges: (0..=n_bins).map(|i| lo + i as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 * norm).collect(),
    })
}

/// Values of component 0 of every path, pooled.
pub fn pooled(paths: &[Path]) -> Vec<f64> {
    paths.iter().flat_map(|p| p.component(0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancePoint {
    pub sigma: f64,
    pub l_e: f64,
    pub beta_l_kl: f64,
    /// `−l_e + β·l_kl`, the negated objective.
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceCurve {
    pub beta: f64,
    pub points: Vec<BalancePoint>,
}

impl BalanceCurve {
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.points.iter().enumerate() {
            if p.weighted < self.points[best].weighted {
                best = i;
            }
        }
        best
    }
}

/// Freezes the diffusion at each `σ` of the grid and evaluates the batch-mean
/// reconstruction and weighted KL on `batch`, with the same noise per point.
pub fn diffusion_balance(
    model: &LatentSdeModel,
    batch: &[Path],
    beta: f64,
    sigma_grid: &[f64],
    seed: u64,
) -> Result<BalanceCurve> {
    if sigma_grid.is_empty() {
        return Err(Error::InvalidInput("empty sigma grid".into()));
    }
    if sigma_grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidInput("sigma values must be positive (KL is undefined at 0)".into()));
    }
    if sigma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("sigma grid must be strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(sigma_grid.len());
    for &s in sigma_grid {
        let opts = ElboOptions::new(beta, 0.0).with_diffusion(DiffusionMode::Constant(s));
        let r = evaluate(model, batch, &opts, seed)?;
        points.push(BalancePoint {
            sigma: s,
            l_e: r.l_e,
            beta_l_kl: beta * r.l_kl,
            weighted: -r.l_e + beta * r.l_kl,
        });
    }
    Ok(BalanceCurve { beta, points })
}

/// `lo:hi:n` evenly spaced values including both ends.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::InvalidInput(format!("grid '{spec}' is not lo:hi:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || (n > 1 && !(hi > lo)) {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftDiffusionRow {
    pub state: f64,
    pub drift: f64,
    pub diffusion: f64,
}

/// Normalized ↔ raw units for a 1-dim model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub mean: f64,
    pub std: f64,
}

impl Units {
    pub fn identity() -> Self {
        Units { mean: 0.0, std: 1.0 }
    }

    pub fn of(dataset: &Dataset) -> Self {
        Units {
            mean: dataset.mean[0],
            std: dataset.std[0],
        }
    }

    pub fn to_raw(&self, r: DriftDiffusionRow) -> DriftDiffusionRow {
        DriftDiffusionRow {
            state: r.state * self.std + self.mean,
            drift: r.drift * self.std,
            diffusion: r.diffusion * self.std,
        }
    }

    pub fn to_normalized(&self, r: DriftDiffusionRow) -> DriftDiffusionRow {
        DriftDiffusionRow {
            state: (r.state - self.mean) / self.std,
            drift: r.drift / self.std,
            diffusion: r.diffusion / self.std,
        }
    }
}

/// Prior drift and diffusion of a 1-dim model at raw states, reported in
/// raw units.
pub fn eval_drift_diffusion_grid(model: &LatentSdeModel, units: Units, raw_states: &[f64]) -> Result<Vec<DriftDiffusionRow>> {
    if model.latent_dim() != 1 {
        return Err(Error::InvalidInput("drift/diffusion tables need a 1-dim model".into()));
    }
    if raw_states.is_empty() {
        return Ok(Vec::new());
    }
    let z: Vec<f64> = raw_states.iter().map(|x| (x - units.mean) / units.std).collect();
    let mut b = Eager::new(&model.params);
    let zv = b.constant(Tensor::from_parts(vec![z.len(), 1], z.clone()));
    let f = model.prior_drift.eval(&mut b, &zv)?;
    let g = model.diffusion.eval(&mut b, &zv)?;
    Ok(z
        .iter()
        .zip(f.data().iter().zip(g.data()))
        .map(|(&state, (&drift, &diffusion))| units.to_raw(DriftDiffusionRow { state, drift, diffusion }))
        .collect())
}

/// Threshold for transition counting in normalized units: the mapped
/// unstable fixed point closest to the data mean for drift-rooted families,
/// otherwise the density minimum between the two largest modes.
pub fn transition_threshold(dataset: &Dataset) -> Result<f64> {
    match dataset.spec.family {
        Family::Ebm | Family::EbmLinearNoise | Family::TripleWell => {
            let fp = fixed_points(&dataset.spec)?;
            let mean = dataset.mean[0];
            let u = fp
                .unstable
                .iter()
                .min_by(|a, b| (*a - mean).abs().total_cmp(&(*b - mean).abs()))
                .copied()
                .ok_or_else(|| Error::InvalidInput("system has no unstable fixed point".into()))?;
            Ok(dataset.to_normalized(u, 0))
        }
        Family::Ou => Ok(0.0),
        Family::Fhn => {
            let w = dataset.windows()?;
            density_minimum(&pooled(&dataset.window(w.train)?), 50)
        }
    }
}

/// Location of the lowest histogram bin between the two highest local maxima.
pub fn density_minimum(values: &[f64], n_bins: usize) -> Result<f64> {
    let s = sorted(values);
    let (lo, hi) = (s[(s.len() as f64 * 0.005) as usize], s[((s.len() as f64 * 0.995) as usize).min(s.len() - 1)]);
    let h = marginal_histogram(values, n_bins, (lo, hi))?;
    let mut peaks = h.local_maxima();
    if peaks.len() < 2 {
        return Err(Error::InvalidInput("marginal is not bimodal; no density minimum".into()));
    }
    peaks.sort_by(|&a, &b| h.density[b].total_cmp(&h.density[a]));
    let (a, b) = (peaks[0].min(peaks[1]), peaks[0].max(peaks[1]));
    let m = (a..=b).min_by(|&i, &j| h.density[i].total_cmp(&h.density[j])).unwrap();
    Ok(h.centers()[m])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::TimeGrid;

    fn path(values: Vec<f64>, dt: f64) -> Path {
        Path::new(TimeGrid::with_points(dt, values.len()).unwrap(), 1, values).unwrap()
    }

    #[test]
    fn wasserstein_basics() {
        assert_eq!(wasserstein1(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[0.0; 4], &[1.0; 3]).unwrap(), 1.0);
        assert!(wasserstein1(&[], &[1.0]).is_err());
        // point mass vs two points
        assert!((wasserstein1(&[0.0], &[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn transitions() {
        assert_eq!(transition_rate(&[path(vec![1.0; 10], 0.1)], 0.0).unwrap().count, 0);
        let t = transition_rate(&[path(vec![-1.0, -0.5, 0.5, 1.0], 0.1)], 0.0).unwrap();
        assert_eq!(t.count, 1);
        assert!((t.rate - 1.0 / 0.4).abs() < 1e-12);
        // square wave, period 20 samples at dt 0.1 over 200 samples
        let v: Vec<f64> = (0..200).map(|k| if (k / 10) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let t = transition_rate(&[path(v, 0.1)], 0.0).unwrap();
        assert_eq!(t.count, 19);
        let (horizon, period) = (20.0, 2.0);
        assert!((2.0 * horizon / period - t.count as f64).abs() <= 1.0);
    }

    #[test]
    fn kernel_integrates_to_one() {
        let n = 200_000;
        let h = 2.0 / n as f64;
        let s: f64 = (0..n).map(|i| epanechnikov(-1.0 + (i as f64 + 0.5) * h) * h).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_shapes() {
        let h = marginal_histogram(&[0.3; 10], 5, (0.0, 1.0)).unwrap();
        assert_eq!(h.density.iter().filter(|d| **d > 0.0).count(), 1);
        let vals: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        let h = marginal_histogram(&vals, 10, (0.0, 1.0)).unwrap();
        assert!(h.density.iter().all(|d| (d - 1.0).abs() < 1e-12));
        assert!((h.density.iter().sum::<f64>() * h.bin_width() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn local_maxima_of_two_bumps() {
        let h = Histogram {
            edges: (0..=7).map(f64::from).collect(),
            density: vec![0.0, 2.0, 1.0, 0.5, 3.0, 3.0, 1.0],
        };
        assert_eq!(h.local_maxima(), vec![1, 4]);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.1:5:50").unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 0.1);
        assert!((g[49] - 5.0).abs() < 1e-12);
        assert!(parse_grid("1:0:3").is_err());
    }

    #[test]
    fn units_round_trip() {
        let u = Units { mean: 290.0, std: 25.0 };
        let r = DriftDiffusionRow { state: 0.3, drift: -1.2, diffusion: 0.7 };
        let back = u.to_normalized(u.to_raw(r));
        assert!((back.state - r.state).abs() < 1e-12);
        assert!((back.drift - r.drift).abs() < 1e-12);
        assert!((back.diffusion - r.diffusion).abs() < 1e-12);
        assert_eq!(Units::identity().to_raw(r), r);
    }
}
