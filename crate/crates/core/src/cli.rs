//! The experiment pipeline behind the `lsde` binary: `generate`, `train`,
//! `sweep`, `evaluate` and `balance`.
//!
//! Every command writes the resolved configuration to `config.toml` in its
//! output directory. Re-running a command from that file with the same seed
//! reproduces its outputs byte for byte.

use std::path::{Path as FsPath, PathBuf};
use std::sync::Mutex;
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::config::{Entries, RunConfig, parse_document, parse_override};
use crate::diagnostics::{
    KmConfig, KmEstimate, Units, diffusion_balance, eval_drift_diffusion_grid, km_coefficients, marginal_histogram, parse_grid, pooled,
    transition_rate, transition_threshold, wasserstein1,
};
use crate::error::{Error, Result};
use crate::io::{MetricSummary, load_checkpoint, load_dataset, save_checkpoint, save_dataset, table_csv, write_json, write_text};
use crate::model::{ElboOptions, LatentSdeModel, evaluate};
use crate::rng::{derive_seed, tags};
use crate::sde::{Path, sample_prior_paths};
use crate::systems::{Dataset, normalize, simulate};
use crate::trainer::{TrainLog, Trainer};

#[derive(Parser, Debug)]
#[command(name = "lsde", version, about = "Latent neural SDE experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config document (flat dotted `key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.lr0=0.005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    All,
    Marginals,
    Wasserstein,
    Rate,
    Km,
    Grid,
    Balance,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Beta,
    Gamma,
    Sigma,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a system and write a normalized dataset archive.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        n_paths: Option<usize>,
    },
    /// Train a model on a dataset's training window.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        /// Continue from a checkpoint holding optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train and evaluate one run per value of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dataset for beta/gamma sweeps; sigma sweeps generate their own.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Diagnostics of a checkpoint's prior against a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Without a checkpoint the dataset is compared with itself.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
        metric: Vec<Metric>,
        #[arg(long)]
        sigma_grid: Option<String>,
    },
    /// Constant-diffusion scan of the reconstruction/KL balance.
    Balance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sigma_grid: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
    },
}

fn entry(cli: &mut Entries, key: &str, v: Option<toml::Value>) {
    if let Some(v) = v {
        cli.insert(key.to_string(), v);
    }
}

fn float(v: Option<f64>) -> Option<toml::Value> {
    v.map(toml::Value::Float)
}

fn int(v: Option<usize>) -> Option<toml::Value> {
    v.map(|x| toml::Value::Integer(x as i64))
}

fn resolve(common: &Common, extra: Entries) -> Result<RunConfig> {
    let file = match &common.config {
        Some(p) => parse_document(&crate::io::read_text(p)?)?,
        None => Entries::new(),
    };
    let mut cli = Entries::new();
    for o in &common.overrides {
        let (k, v) = parse_override(o)?;
        cli.insert(k, v);
    }
    cli.extend(extra);
    entry(&mut cli, "seed", common.seed.map(|s| toml::Value::Integer(s as i64)));
    RunConfig::resolve(&file, &cli)
}

fn train_entries(flags: &TrainFlags) -> Entries {
    let mut e = Entries::new();
    entry(&mut e, "train.epochs", int(flags.epochs));
    entry(&mut e, "train.beta", float(flags.beta));
    entry(&mut e, "train.gamma", float(flags.gamma));
    entry(&mut e, "train.batch_size", int(flags.batch_size));
    e
}

fn write_config(out: &FsPath, cfg: &RunConfig) -> Result<()> {
    write_text(&out.join("config.toml"), &cfg.to_document())
}

/// Simulates `cfg.system` and writes the dataset archive to `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &FsPath) -> Result<Dataset> {
    let grid = cfg.system.full_grid()?;
    let raw = simulate(&cfg.system, cfg.n_paths, grid, cfg.seed)?;
    let ds = normalize(&raw, &cfg.system)?;
    save_dataset(out, &ds, cfg.seed)?;
    write_config(out, cfg)?;
    Ok(ds)
}

pub struct TrainOutput {
    pub model: LatentSdeModel,
    pub log: TrainLog,
}

/// Trains on the dataset's training window and writes `checkpoint.json`,
/// `train_log.csv` and `summary.json`. On divergence the last good
/// checkpoint is still written before the error is returned.
pub fn cmd_train(cfg: &RunConfig, data: &FsPath, resume: Option<&FsPath>, out: &FsPath) -> Result<TrainOutput> {
    let (ds, _) = load_dataset(data)?;
    train_on(cfg, &ds, resume, out)
}

fn train_on(cfg: &RunConfig, ds: &Dataset, resume: Option<&FsPath>, out: &FsPath) -> Result<TrainOutput> {
    write_config(out, cfg)?;
    if ds.dim() != cfg.model.latent_dim {
        return Err(Error::InvalidInput(format!(
            "dataset dim {} does not match model.latent_dim {}",
            ds.dim(),
            cfg.model.latent_dim
        )));
    }
    let w = ds.windows()?;
    let train_paths = ds.window(w.train)?;
    let (mut model, mut trainer) = match resume {
        Some(p) => {
            let (model, trainer) = load_checkpoint(p)?;
            let mut trainer = trainer.ok_or_else(|| Error::InvalidInput(format!("{} has no optimizer state", p.display())))?;
            trainer.config = cfg.train.clone();
            (model, trainer)
        }
        None => {
            let model = LatentSdeModel::new(cfg.model.clone(), cfg.seed)?;
            let trainer = Trainer::new(cfg.train.clone(), &model)?;
            (model, trainer)
        }
    };
    let ck_path = out.join("checkpoint.json");
    let result = trainer.run_with(&mut model, &train_paths, |t, m| save_checkpoint(&ck_path, m, Some(t)));
    save_checkpoint(&ck_path, &model, Some(&trainer))?;
    write_text(&out.join("train_log.csv"), &trainer.log.to_csv())?;
    result?;
    let last = trainer.log.records.last().copied();
    write_json(
        &out.join("summary.json"),
        &vec![MetricSummary {
            metric: "train".into(),
            window: "train".into(),
            value: serde_json::to_value(last).unwrap_or_default(),
            config: json!({"epochs": trainer.epoch}),
        }],
    )?;
    Ok(TrainOutput { model, log: trainer.log })
}

/// Prior trajectories over the dataset's full horizon, in normalized units.
pub fn prior_samples(model: &LatentSdeModel, ds: &Dataset, n: usize, seed: u64) -> Result<Vec<Path>> {
    let n = if n == 0 { ds.paths.len() } else { n };
    sample_prior_paths(model, n, ds.grid(), derive_seed(seed, &[tags::EVALUATE]))
}

fn cut(paths: &[Path], r: std::ops::Range<usize>) -> Result<Vec<Path>> {
    paths.iter().map(|p| p.window(r.start, r.end)).collect()
}

fn km_json(k: &KmEstimate, center: f64) -> serde_json::Value {
    json!({
        "m2_center": k.m2_at(center),
        "valid_bins": k.valid.iter().filter(|v| **v).count(),
        "bandwidth": k.bandwidth,
    })
}

/// Runs the selected diagnostics on the eval-train and test windows and
/// writes `summary.json` plus one CSV per table.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    data: &FsPath,
    checkpoint: Option<&FsPath>,
    metrics: &[Metric],
    out: &FsPath,
) -> Result<Vec<MetricSummary>> {
    let (ds, _) = load_dataset(data)?;
    let model = checkpoint.map(load_checkpoint).transpose()?.map(|(m, _)| m);
    evaluate_on(cfg, &ds, model.as_ref(), metrics, out)
}

fn evaluate_on(
    cfg: &RunConfig,
    ds: &Dataset,
    model: Option<&LatentSdeModel>,
    metrics: &[Metric],
    out: &FsPath,
) -> Result<Vec<MetricSummary>> {
    write_config(out, cfg)?;
    let want = |m: Metric| metrics.contains(&Metric::All) || metrics.contains(&m);
    if let Some(m) = model {
        if m.latent_dim() != ds.dim() {
            return Err(Error::InvalidInput(format!(
                "model latent dim {} is incompatible with dataset dim {}",
                m.latent_dim(),
                ds.dim()
            )));
        }
    }
    let samples = match model {
        Some(m) => prior_samples(m, ds, cfg.diagnostics.prior_paths, cfg.seed)?,
        None => ds.paths.clone(),
    };
    let w = ds.windows()?;
    let windows = [("eval_train", w.eval_train.clone()), ("test", w.test.clone())];
    let mut summary = Vec::new();
    let mut push = |metric: &str, window: &str, value: serde_json::Value, config: serde_json::Value| {
        summary.push(MetricSummary {
            metric: metric.into(),
            window: window.into(),
            value,
            config,
        })
    };
    let threshold = if want(Metric::Rate) { Some(transition_threshold(ds)?) } else { None };
    for (name, range) in &windows {
        let data_w = cut(&ds.paths, range.clone())?;
        let model_w = cut(&samples, range.clone())?;
        let (dv, mv) = (pooled(&data_w), pooled(&model_w));
        if want(Metric::Marginals) {
            let lo = dv.iter().chain(&mv).copied().fold(f64::INFINITY, f64::min);
            let hi = dv.iter().chain(&mv).copied().fold(f64::NEG_INFINITY, f64::max);
            let bins = cfg.diagnostics.hist_bins;
            let hd = marginal_histogram(&dv, bins, (lo, hi))?;
            let hm = marginal_histogram(&mv, bins, (lo, hi))?;
            write_text(
                &out.join(format!("marginals_{name}.csv")),
                &table_csv(&["center", "data", "model"], &[hd.centers(), hd.density.clone(), hm.density.clone()]),
            )?;
            push("marginals", name, json!({"data_maxima": hd.local_maxima().len(), "model_maxima": hm.local_maxima().len()}), json!({"bins": bins}));
        }
        if want(Metric::Wasserstein) {
            push("wasserstein", name, json!(wasserstein1(&mv, &dv)?), json!({"units": "normalized"}));
        }
        if let Some(thr) = threshold {
            let rd = transition_rate(&data_w, thr)?;
            let rm = transition_rate(&model_w, thr)?;
            push("transition_rate", name, json!({"data": rd, "model": rm}), json!({"threshold": thr}));
        }
        if want(Metric::Km) {
            let raw_d = ds.denormalize(&data_w)?;
            let raw_m = ds.denormalize(&model_w)?;
            let mut km = cfg.diagnostics.km.clone();
            if km.range.is_none() {
                let rv = pooled(&raw_d);
                km.range = Some((rv.iter().copied().fold(f64::INFINITY, f64::min), rv.iter().copied().fold(f64::NEG_INFINITY, f64::max)));
            }
            let kd = km_coefficients(&raw_d, &km)?;
            let km_model = km_coefficients(&raw_m, &KmConfig { bandwidth: Some(kd.bandwidth), ..km.clone() })?;
            write_text(
                &out.join(format!("km_{name}.csv")),
                &table_csv(
                    &["center", "data_m1", "data_m2", "model_m1", "model_m2"],
                    &[kd.bin_centers.clone(), kd.m1.clone(), kd.m2.clone(), km_model.m1.clone(), km_model.m2.clone()],
                ),
            )?;
            let center = ds.mean[0];
            push("km", name, json!({"data": km_json(&kd, center), "model": km_json(&km_model, center)}), serde_json::to_value(&km).unwrap_or_default());
        }
    }
    if want(Metric::Grid) {
        if let Some(m) = model {
            let units = Units::of(ds);
            let raw = ds.denormalize(&ds.paths)?;
            let rv = pooled(&raw);
            let lo = rv.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = rv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let states: Vec<f64> = (0..100).map(|i| lo + (hi - lo) * i as f64 / 99.0).collect();
            let rows = eval_drift_diffusion_grid(m, units, &states)?;
            write_text(
                &out.join("drift_diffusion.csv"),
                &table_csv(
                    &["state", "drift", "diffusion"],
                    &[rows.iter().map(|r| r.state).collect(), rows.iter().map(|r| r.drift).collect(), rows.iter().map(|r| r.diffusion).collect()],
                ),
            )?;
            push("drift_diffusion_grid", "full", json!({"points": rows.len()}), json!({"units": "raw"}));
        }
    }
    if want(Metric::Balance) {
        if let Some(m) = model {
            summary.extend(balance_on(cfg, ds, m, out)?);
        }
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Balance batch: the first (up to) 256 training-window paths.
fn balance_batch(ds: &Dataset) -> Result<Vec<Path>> {
    let w = ds.windows()?;
    let n = ds.paths.len().min(256);
    cut(&ds.paths[..n], w.train)
}

fn balance_on(cfg: &RunConfig, ds: &Dataset, model: &LatentSdeModel, out: &FsPath) -> Result<Vec<MetricSummary>> {
    let grid = parse_grid(&cfg.diagnostics.sigma_grid)?;
    let batch = balance_batch(ds)?;
    let beta = cfg.train.beta_final;
    let seed = derive_seed(cfg.seed, &[tags::EVALUATE]);
    let curve = diffusion_balance(model, &batch, beta, &grid, seed)?;
    let own = evaluate(model, &batch, &ElboOptions::new(beta, 0.0), seed)?;
    let cols = [
        curve.points.iter().map(|p| p.sigma).collect::<Vec<_>>(),
        curve.points.iter().map(|p| p.l_e).collect(),
        curve.points.iter().map(|p| p.beta_l_kl).collect(),
        curve.points.iter().map(|p| p.weighted).collect(),
    ];
    write_text(&out.join("balance.csv"), &table_csv(&["sigma", "l_e", "beta_l_kl", "weighted"], &cols))?;
    let best = curve.argmin();
    Ok(vec![MetricSummary {
        metric: "balance".into(),
        window: "train".into(),
        value: json!({"argmin_sigma": curve.points[best].sigma, "model_diffusion_size": own.diffusion_size}),
        config: json!({"beta": beta, "sigma_grid": cfg.diagnostics.sigma_grid}),
    }])
}

pub fn cmd_balance(cfg: &RunConfig, data: &FsPath, checkpoint: &FsPath, out: &FsPath) -> Result<Vec<MetricSummary>> {
    write_config(out, cfg)?;
    let (ds, _) = load_dataset(data)?;
    let (model, _) = load_checkpoint(checkpoint)?;
    let summary = balance_on(cfg, &ds, &model, out)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub wasserstein_train: f64,
    pub wasserstein_test: f64,
    pub rate_train: f64,
    pub rate_test: f64,
    pub diffusion_size: f64,
    pub status: String,
}

fn sweep_one(cfg: &RunConfig, param: SweepParam, value: f64, data: Option<&Dataset>, dir: &FsPath) -> Result<SweepRow> {
    let mut cfg = cfg.clone();
    match param {
        SweepParam::Beta => cfg.train.beta_final = value,
        SweepParam::Gamma => cfg.train.gamma = value,
        SweepParam::Sigma => cfg.system.sigma = value,
    }
    cfg.validate()?;
    let generated;
    let ds = match (param, data) {
        (SweepParam::Sigma, _) => {
            generated = cmd_generate(&cfg, &dir.join("data"))?;
            &generated
        }
        (_, Some(d)) => d,
        (_, None) => return Err(Error::InvalidInput("beta/gamma sweeps need --data".into())),
    };
    let trained = train_on(&cfg, ds, None, dir)?;
    let summary = evaluate_on(&cfg, ds, Some(&trained.model), &[Metric::Wasserstein, Metric::Rate], &dir.join("eval"))?;
    let pick = |metric: &str, window: &str| summary.iter().find(|s| s.metric == metric && s.window == window).map(|s| s.value.clone());
    let w = |window| pick("wasserstein", window).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
    let r = |window| pick("transition_rate", window).and_then(|v| v["model"]["rate"].as_f64()).unwrap_or(f64::NAN);
    Ok(SweepRow {
        value,
        wasserstein_train: w("eval_train"),
        wasserstein_test: w("test"),
        rate_train: r("eval_train"),
        rate_test: r("test"),
        diffusion_size: trained.log.records.last().map_or(f64::NAN, |r| r.diffusion_size),
        status: "ok".into(),
    })
}

fn value_label(v: f64) -> String {
    crate::io::fmt_f64(v)
}

/// One isolated run per value in `out/<param>_<value>/`, plus
/// `summary.csv`. A failing run is recorded and the sweep continues.
pub fn cmd_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64], data: Option<&FsPath>, out: &FsPath) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one value".into()));
    }
    write_config(out, cfg)?;
    let ds = data.map(load_dataset).transpose()?.map(|(d, _)| d);
    let name = match param {
        SweepParam::Beta => "beta",
        SweepParam::Gamma => "gamma",
        SweepParam::Sigma => "sigma",
    };
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; values.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= values.len() {
            break;
        }
        let v = values[i];
        let dir = out.join(format!("{name}_{}", value_label(v)));
        let row = sweep_one(cfg, param, v, ds.as_ref(), &dir).unwrap_or_else(|e| SweepRow {
            value: v,
            wasserstein_train: f64::NAN,
            wasserstein_test: f64::NAN,
            rate_train: f64::NAN,
            rate_test: f64::NAN,
            diffusion_size: f64::NAN,
            status: format!("error: {}", e.kind()),
        });
        rows.lock().expect("sweep worker panicked")[i] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 0..cfg.parallelism.min(values.len()) {
            s.spawn(worker);
        }
    });
    let rows: Vec<SweepRow> = rows.into_inner().expect("sweep worker panicked").into_iter().flatten().collect();
    let mut csv = String::from("value,wasserstein_train,wasserstein_test,rate_train,rate_test,diffusion_size,status\n");
    for r in &rows {
        let nums = [r.value, r.wasserstein_train, r.wasserstein_test, r.rate_train, r.rate_test, r.diffusion_size];
        let cells: Vec<String> = nums.iter().map(|v| crate::io::fmt_f64(*v)).collect();
        csv.push_str(&cells.join(","));
        csv.push(',');
        csv.push_str(&r.status);
        csv.push('\n');
    }
    write_text(&out.join("summary.csv"), &csv)?;
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, system, sigma, n_paths } => {
            let mut e = Entries::new();
            entry(&mut e, "system.family", system.map(toml::Value::String));
            entry(&mut e, "system.sigma", float(sigma));
            entry(&mut e, "system.n_paths", int(n_paths));
            let cfg = resolve(&common, e)?;
            cmd_generate(&cfg, &common.out).map(|_| ())
        }
        Command::Train { common, data, flags, resume } => {
            let cfg = resolve(&common, train_entries(&flags))?;
            cmd_train(&cfg, &data, resume.as_deref(), &common.out).map(|_| ())
        }
        Command::Sweep { common, data, param, values, flags } => {
            let cfg = resolve(&common, train_entries(&flags))?;
            cmd_sweep(&cfg, param, &values, data.as_deref(), &common.out).map(|_| ())
        }
        Command::Evaluate { common, data, checkpoint, metric, sigma_grid } => {
            let mut e = Entries::new();
            entry(&mut e, "diagnostics.sigma_grid", sigma_grid.map(toml::Value::String));
            let cfg = resolve(&common, e)?;
            cmd_evaluate(&cfg, &data, checkpoint.as_deref(), &metric, &common.out).map(|_| ())
        }
        Command::Balance { common, data, checkpoint, sigma_grid, beta } => {
            let mut e = Entries::new();
            entry(&mut e, "diagnostics.sigma_grid", sigma_grid.map(toml::Value::String));
            entry(&mut e, "train.beta", float(beta));
            let cfg = resolve(&common, e)?;
            cmd_balance(&cfg, &data, &checkpoint, &common.out).map(|_| ())
        }
    }
}

/// Machine-readable error report written to stderr by the binary.
pub fn error_json(e: &Error) -> String {
    json!({"error": e.kind(), "message": e.to_string()}).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string()}));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            1
        }
    }
}
