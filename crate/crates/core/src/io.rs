//! On-disk formats: model checkpoints, path CSVs, dataset archives and
//! metric summaries.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the one written.
//!
//! | file | layout |
//! |------|--------|
//! | checkpoint (`.json`) | `{format, version, model, tensors: [{name, shape, data}], trainer?}` |
//! | path CSV | `t,dim0,...` |
//! | long path CSV | `traj,t,dim0,...` |
//! | dataset archive | directory with `meta.json` and `paths.csv` (long, normalized) |
//! | summary | JSON array of `{metric, window, value, config}` |

use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{LatentSdeModel, ModelConfig};
use crate::sde::{Path, TimeGrid};
use crate::systems::{Dataset, SystemSpec};
use crate::trainer::Trainer;

pub const CHECKPOINT_FORMAT: &str = "latent-sde-checkpoint";
pub const DATASET_FORMAT: &str = "latent-sde-dataset";
pub const FORMAT_VERSION: u32 = 1;

pub fn read_text(path: &FsPath) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &FsPath, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &FsPath, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &FsPath) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<Trainer>,
}

impl Checkpoint {
    pub fn new(model: &LatentSdeModel, trainer: Option<&Trainer>) -> Self {
        let tensors = model
            .params
            .ids()
            .map(|id| {
                let t = model.params.get(id);
                NamedTensor {
                    name: model.params.name(id).to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                }
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            model: model.config.clone(),
            tensors,
            trainer: trainer.cloned(),
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> Result<LatentSdeModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut model = LatentSdeModel::new(self.model.clone(), 0)?;
        if self.tensors.len() != model.params.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} tensors, model needs {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for nt in &self.tensors {
            let id = model
                .params
                .find(&nt.name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown tensor '{}'", nt.name)))?;
            let t = Tensor::new(nt.shape.clone(), nt.data.clone())?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::dim("checkpoint", format!("tensor '{}' has shape {:?}", nt.name, nt.shape)));
            }
            *model.params.get_mut(id) = t;
        }
        if let Some(tr) = &self.trainer {
            if tr.adam.m.len() != model.params.len() {
                return Err(Error::InvalidInput("optimizer state does not match the model".into()));
            }
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &FsPath, model: &LatentSdeModel, trainer: Option<&Trainer>) -> Result<()> {
    write_json(path, &Checkpoint::new(model, trainer))
}

pub fn load_checkpoint(path: &FsPath) -> Result<(LatentSdeModel, Option<Trainer>)> {
    let ck: Checkpoint = read_json(path)?;
    let model = ck.to_model().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, ck.trainer))
}

/// Shortest round-trip text for `v`, switching to exponent form for very
/// large or small magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn push_row(s: &mut String, lead: &[String], values: &[f64]) {
    let mut first = true;
    for l in lead {
        if !first {
            s.push(',');
        }
        s.push_str(l);
        first = false;
    }
    for v in values {
        if !first {
            s.push(',');
        }
        s.push_str(&fmt_f64(*v));
        first = false;
    }
    s.push('\n');
}

fn dim_header(dim: usize) -> String {
    (0..dim).map(|d| format!("dim{d}")).collect::<Vec<_>>().join(",")
}

/// `t,dim0,...` for one trajectory.
pub fn path_to_csv(p: &Path) -> String {
    let mut s = format!("t,{}\n", dim_header(p.dim));
    for k in 0..p.len() {
        push_row(&mut s, &[fmt_f64(p.grid.time(k))], p.state(k));
    }
    s
}

/// `traj,t,dim0,...` for a set of trajectories on a shared grid.
pub fn paths_to_long_csv(paths: &[Path]) -> String {
    let dim = paths.first().map_or(1, |p| p.dim);
    let mut s = format!("traj,t,{}\n", dim_header(dim));
    for (i, p) in paths.iter().enumerate() {
        for k in 0..p.len() {
            push_row(&mut s, &[i.to_string(), fmt_f64(p.grid.time(k))], p.state(k));
        }
    }
    s
}

/// Parses a long CSV back into paths on `grid`.
pub fn paths_from_long_csv(text: &str, grid: TimeGrid, origin: &FsPath) -> Result<Vec<Path>> {
    let bad = |detail: String| Error::format(origin, detail);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "traj" || cols[1] != "t" {
        return Err(bad(format!("unexpected header '{header}'")));
    }
    let dim = cols.len() - 2;
    let mut paths: Vec<Vec<f64>> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != dim + 2 {
            return Err(bad(format!("line {} has {} fields", n + 2, f.len())));
        }
        let traj: usize = f[0].parse().map_err(|_| bad(format!("line {}: bad trajectory index", n + 2)))?;
        if traj == paths.len() {
            paths.push(Vec::with_capacity(grid.n_points() * dim));
        } else if traj + 1 != paths.len() {
            return Err(bad(format!("line {}: trajectories must be contiguous and ordered", n + 2)));
        }
        let buf = paths.last_mut().expect("pushed above");
        for v in &f[2..] {
            buf.push(v.parse().map_err(|_| bad(format!("line {}: bad number '{v}'", n + 2)))?);
        }
    }
    paths
        .into_iter()
        .map(|s| Path::new(grid, dim, s).map_err(|e| bad(e.to_string())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub spec: SystemSpec,
    pub grid: TimeGrid,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub t_train: f64,
    pub seed: u64,
    pub n_paths: usize,
}

pub fn save_dataset(dir: &FsPath, ds: &Dataset, seed: u64) -> Result<()> {
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        grid: ds.grid(),
        mean: ds.mean.clone(),
        std: ds.std.clone(),
        t_train: ds.t_train,
        seed,
        n_paths: ds.paths.len(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_text(&dir.join("paths.csv"), &paths_to_long_csv(&ds.paths))
}

pub fn load_dataset(dir: &FsPath) -> Result<(Dataset, DatasetMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = read_json(&meta_path)?;
    if meta.format != DATASET_FORMAT || meta.version != FORMAT_VERSION {
        return Err(Error::format(&meta_path, format!("unsupported dataset {} v{}", meta.format, meta.version)));
    }
    let csv_path = dir.join("paths.csv");
    let paths = paths_from_long_csv(&read_text(&csv_path)?, meta.grid, &csv_path)?;
    if paths.len() != meta.n_paths {
        return Err(Error::format(&csv_path, format!("{} paths, meta says {}", paths.len(), meta.n_paths)));
    }
    let ds = Dataset {
        paths,
        mean: meta.mean.clone(),
        std: meta.std.clone(),
        spec: meta.spec.clone(),
        t_train: meta.t_train,
    };
    ds.check().map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if ds.dim() != meta.spec.observed_dims.len() {
        return Err(Error::format(&meta_path, "statistics do not match the observed dims"));
    }
    Ok((ds, meta))
}

/// One entry of a diagnostics summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub window: String,
    pub value: serde_json::Value,
    pub config: serde_json::Value,
}

/// Column-major numeric table as CSV.
pub fn table_csv(header: &[&str], columns: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    let rows = columns.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..rows {
        let row: Vec<f64> = columns.iter().map(|c| c.get(r).copied().unwrap_or(f64::NAN)).collect();
        push_row(&mut s, &[], &row);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_csv_round_trip_is_exact() {
        let grid = TimeGrid::with_points(0.01, 4).unwrap();
        let paths = vec![
            Path::new(grid, 1, vec![0.1, -1.0 / 3.0, 2.5e-17, 1e300]).unwrap(),
            Path::new(grid, 1, vec![std::f64::consts::PI, 0.0, -0.0, 7.0]).unwrap(),
        ];
        let text = paths_to_long_csv(&paths);
        let back = paths_from_long_csv(&text, grid, FsPath::new("mem")).unwrap();
        for (a, b) in paths.iter().zip(&back) {
            for (x, y) in a.states().iter().zip(b.states()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn malformed_csv_rejected() {
        let grid = TimeGrid::with_points(0.01, 2).unwrap();
        let origin = FsPath::new("mem");
        assert!(paths_from_long_csv("a,b\n", grid, origin).is_err());
        assert!(paths_from_long_csv("traj,t,dim0\n0,0,1\n0,0.01,x\n", grid, origin).is_err());
        assert!(paths_from_long_csv("traj,t,dim0\n0,0,1\n", grid, origin).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            hidden: vec![4],
            encoder_hidden: 3,
            context_dim: 2,
            ..ModelConfig::default()
        };
        let model = LatentSdeModel::new(cfg, 5).unwrap();
        let json = serde_json::to_string(&Checkpoint::new(&model, None)).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let m2 = back.to_model().unwrap();
        for (a, b) in model.params.tensors().iter().zip(m2.params.tensors()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_with_missing_tensor_rejected() {
        let cfg = ModelConfig {
            hidden: vec![4],
            encoder_hidden: 3,
            context_dim: 2,
            ..ModelConfig::default()
        };
        let model = LatentSdeModel::new(cfg, 5).unwrap();
        let mut ck = Checkpoint::new(&model, None);
        ck.tensors.pop();
        assert!(ck.to_model().is_err());
    }
}
