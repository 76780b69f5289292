//! Run configuration as a flat document of dotted `key = value` lines (valid
//! TOML). Values are resolved with the precedence command line > file >
//! defaults, and the resolved document is written next to every output.
//!
//! ```text
//! seed = 1
//! system.family = "ebm"
//! system.sigma = 25.0
//! train.epochs = 2000
//! train.gamma = 50.0
//! model.hidden = [16, 16]
//! ```

use std::collections::BTreeMap;

use toml::Value;

use crate::autodiff::Activation;
use crate::diagnostics::KmConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, NoisePenalty};
use crate::systems::{Family, SystemSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsConfig {
    pub km: KmConfig,
    pub hist_bins: usize,
    /// Prior trajectories sampled for evaluation; 0 means as many as the
    /// dataset holds.
    pub prior_paths: usize,
    pub sigma_grid: String,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            km: KmConfig::default(),
            hist_bins: 50,
            prior_paths: 0,
            sigma_grid: "0.1:5:50".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub system: SystemSpec,
    pub n_paths: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub diagnostics: DiagnosticsConfig,
    pub parallelism: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            system: SystemSpec::ebm(),
            n_paths: 1024,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            parallelism: 1,
        }
    }
}

/// Flat `key → value` view of a document.
pub type Entries = BTreeMap<String, Value>;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Entries) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Parses a config document into flat entries.
pub fn parse_document(text: &str) -> Result<Entries> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::InvalidInput(format!("config: {}", e.message())))?;
    let mut out = Entries::new();
    flatten("", &table, &mut out);
    Ok(out)
}

/// Parses one `key=value` override. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidInput(format!("override '{s}' is not key=value")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k, value))
}

fn bad(key: &str, v: &Value) -> Error {
    Error::InvalidInput(format!("config key '{key}' has invalid value {v}"))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, v)),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(bad(key, v)),
    }
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| bad(key, v))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| bad(key, v))
}

fn activation(key: &str, v: &Value) -> Result<Activation> {
    match as_str(key, v)? {
        "tanh" => Ok(Activation::Tanh),
        "sigmoid" => Ok(Activation::Sigmoid),
        "softplus" => Ok(Activation::Softplus),
        _ => Err(bad(key, v)),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Sigmoid => "sigmoid",
        Activation::Softplus => "softplus",
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `cli`. A `system.family` entry resets the
    /// system to that family's defaults before other keys apply.
    pub fn resolve(file: &Entries, cli: &Entries) -> Result<Self> {
        let mut merged = file.clone();
        for (k, v) in cli {
            merged.insert(k.clone(), v.clone());
        }
        let mut cfg = RunConfig::default();
        if let Some(v) = merged.get("system.family") {
            cfg.set("system.family", v)?;
        }
        for (k, v) in &merged {
            if k != "system.family" {
                cfg.set(k, v)?;
            }
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.n_paths == 0 || self.parallelism == 0 {
            return Err(Error::InvalidInput("system.n_paths and sweep.parallelism must be positive".into()));
        }
        if self.model.latent_dim != self.system.observed_dims.len() {
            return Err(Error::InvalidInput(format!(
                "model.latent_dim {} must equal the number of observed dims {}",
                self.model.latent_dim,
                self.system.observed_dims.len()
            )));
        }
        crate::diagnostics::parse_grid(&self.diagnostics.sigma_grid)?;
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = as_usize(key, v)? as u64,
            "system.family" => {
                let family = Family::parse(as_str(key, v)?)?;
                self.system = SystemSpec::for_family(family);
            }
            "system.sigma" => self.system.sigma = as_f64(key, v)?,
            "system.dt" => self.system.dt = as_f64(key, v)?,
            "system.t_train" => self.system.t_train = as_f64(key, v)?,
            "system.substeps" => self.system.substeps = as_usize(key, v)?,
            "system.n_paths" => self.n_paths = as_usize(key, v)?,
            "system.observed_dims" => {
                let arr = v.as_array().ok_or_else(|| bad(key, v))?;
                self.system.observed_dims = arr.iter().map(|x| as_usize(key, x)).collect::<Result<_>>()?;
            }
            k if k.starts_with("system.constants.") => {
                let name = &k["system.constants.".len()..];
                self.system.constants.insert(name.to_string(), as_f64(key, v)?);
            }
            "model.latent_dim" => self.model.latent_dim = as_usize(key, v)?,
            "model.hidden" => {
                let arr = v.as_array().ok_or_else(|| bad(key, v))?;
                self.model.hidden = arr.iter().map(|x| as_usize(key, x)).collect::<Result<_>>()?;
            }
            "model.hidden_activation" => self.model.hidden_activation = activation(key, v)?,
            "model.encoder_hidden" => self.model.encoder_hidden = as_usize(key, v)?,
            "model.context_dim" => self.model.context_dim = as_usize(key, v)?,
            "model.observation_variance" => self.model.observation_variance = as_f64(key, v)?,
            "model.dt_weighted_loglik" => self.model.dt_weighted_loglik = as_bool(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.lr0" => self.train.lr0 = as_f64(key, v)?,
            "train.lr_decay" => self.train.lr_decay = as_f64(key, v)?,
            "train.beta" => self.train.beta_final = as_f64(key, v)?,
            "train.gamma" => self.train.gamma = as_f64(key, v)?,
            "train.penalty" => {
                self.train.penalty = match as_str(key, v)? {
                    "reward" => NoisePenalty::Reward,
                    "target" => NoisePenalty::Target {
                        target: match self.train.penalty {
                            NoisePenalty::Target { target } => target,
                            NoisePenalty::Reward => 0.0,
                        },
                    },
                    _ => return Err(bad(key, v)),
                }
            }
            "train.target" => {
                let target = as_f64(key, v)?;
                self.train.penalty = NoisePenalty::Target { target };
            }
            "train.anneal_ramp" => self.train.anneal_ramp = as_usize(key, v)?,
            "train.eval_every" => self.train.eval_every = as_usize(key, v)?,
            "train.clip_norm" => {
                let c = as_f64(key, v)?;
                self.train.clip_norm = (c > 0.0).then_some(c);
            }
            "diagnostics.n_bins" => self.diagnostics.km.n_bins = as_usize(key, v)?,
            "diagnostics.hist_bins" => self.diagnostics.hist_bins = as_usize(key, v)?,
            "diagnostics.bandwidth" => {
                let b = as_f64(key, v)?;
                self.diagnostics.km.bandwidth = (b > 0.0).then_some(b);
            }
            "diagnostics.km_min_weight" => self.diagnostics.km.min_weight = as_f64(key, v)?,
            "diagnostics.factorial" => self.diagnostics.km.factorial = as_bool(key, v)?,
            "diagnostics.prior_paths" => self.diagnostics.prior_paths = as_usize(key, v)?,
            "diagnostics.sigma_grid" => self.diagnostics.sigma_grid = as_str(key, v)?.to_string(),
            "sweep.parallelism" => self.parallelism = as_usize(key, v)?,
            other => return Err(Error::InvalidInput(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn entries(&self) -> Entries {
        let mut e = Entries::new();
        let int = |x: usize| Value::Integer(x as i64);
        let ints = |xs: &[usize]| Value::Array(xs.iter().map(|&x| Value::Integer(x as i64)).collect());
        e.insert("seed".into(), Value::Integer(self.seed as i64));
        let family = serde_json::to_value(self.system.family).expect("family serializes");
        e.insert("system.family".into(), Value::String(family.as_str().unwrap_or_default().to_string()));
        e.insert("system.sigma".into(), Value::Float(self.system.sigma));
        e.insert("system.dt".into(), Value::Float(self.system.dt));
        e.insert("system.t_train".into(), Value::Float(self.system.t_train));
        e.insert("system.substeps".into(), int(self.system.substeps));
        e.insert("system.n_paths".into(), int(self.n_paths));
        e.insert("system.observed_dims".into(), ints(&self.system.observed_dims));
        for (k, v) in &self.system.constants {
            e.insert(format!("system.constants.{k}"), Value::Float(*v));
        }
        e.insert("model.latent_dim".into(), int(self.model.latent_dim));
        e.insert("model.hidden".into(), ints(&self.model.hidden));
        e.insert("model.hidden_activation".into(), Value::String(activation_name(self.model.hidden_activation).into()));
        e.insert("model.encoder_hidden".into(), int(self.model.encoder_hidden));
        e.insert("model.context_dim".into(), int(self.model.context_dim));
        e.insert("model.observation_variance".into(), Value::Float(self.model.observation_variance));
        e.insert("model.dt_weighted_loglik".into(), Value::Boolean(self.model.dt_weighted_loglik));
        e.insert("train.epochs".into(), int(self.train.epochs));
        e.insert("train.batch_size".into(), int(self.train.batch_size));
        e.insert("train.lr0".into(), Value::Float(self.train.lr0));
        e.insert("train.lr_decay".into(), Value::Float(self.train.lr_decay));
        e.insert("train.beta".into(), Value::Float(self.train.beta_final));
        e.insert("train.gamma".into(), Value::Float(self.train.gamma));
        match self.train.penalty {
            NoisePenalty::Reward => {
                e.insert("train.penalty".into(), Value::String("reward".into()));
            }
            NoisePenalty::Target { target } => {
                e.insert("train.penalty".into(), Value::String("target".into()));
                e.insert("train.target".into(), Value::Float(target));
            }
        }
        e.insert("train.anneal_ramp".into(), int(self.train.anneal_ramp));
        e.insert("train.eval_every".into(), int(self.train.eval_every));
        e.insert("train.clip_norm".into(), Value::Float(self.train.clip_norm.unwrap_or(0.0)));
        e.insert("diagnostics.n_bins".into(), int(self.diagnostics.km.n_bins));
        e.insert("diagnostics.hist_bins".into(), int(self.diagnostics.hist_bins));
        e.insert("diagnostics.bandwidth".into(), Value::Float(self.diagnostics.km.bandwidth.unwrap_or(0.0)));
        e.insert("diagnostics.km_min_weight".into(), Value::Float(self.diagnostics.km.min_weight));
        e.insert("diagnostics.factorial".into(), Value::Boolean(self.diagnostics.km.factorial));
        e.insert("diagnostics.prior_paths".into(), int(self.diagnostics.prior_paths));
        e.insert("diagnostics.sigma_grid".into(), Value::String(self.diagnostics.sigma_grid.clone()));
        e.insert("sweep.parallelism".into(), int(self.parallelism));
        e
    }

    /// The resolved document, one sorted `key = value` line per entry.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v.to_string());
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_beats_file_beats_defaults() {
        let file = parse_document("train.epochs = 50\ntrain.gamma = 3.0\n").unwrap();
        let cli: Entries = [parse_override("train.epochs=7").unwrap()].into_iter().collect();
        let cfg = RunConfig::resolve(&file, &cli).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.gamma, 3.0);
        assert_eq!(cfg.train.batch_size, 1024);
    }

    #[test]
    fn family_applies_before_sigma() {
        let cli: Entries = [parse_override("system.sigma=25").unwrap(), parse_override("system.family=ebm").unwrap()]
            .into_iter()
            .collect();
        let cfg = RunConfig::resolve(&Entries::new(), &cli).unwrap();
        assert_eq!(cfg.system.sigma, 25.0);
    }

    #[test]
    fn document_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.system = SystemSpec::ou();
        cfg.train.gamma = 650.0;
        cfg.train.beta_final = 1e10;
        cfg.model.hidden = vec![16, 16];
        cfg.seed = 4;
        cfg.train.seed = 4;
        let back = RunConfig::resolve(&parse_document(&cfg.to_document()).unwrap(), &Entries::new()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let cli: Entries = [parse_override("train.epoch=7").unwrap()].into_iter().collect();
        assert!(RunConfig::resolve(&Entries::new(), &cli).is_err());
    }

    #[test]
    fn bare_strings_accepted() {
        assert_eq!(parse_override("system.family=fhn").unwrap().1, Value::String("fhn".into()));
    }
}
