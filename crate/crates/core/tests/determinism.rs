//! Same seed, same bytes: every pipeline stage is a pure function of its config.

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use latent_sde::cli::{Metric, cmd_evaluate, cmd_generate, cmd_train};
use latent_sde::config::{Entries, RunConfig, parse_document};
use sha2::{Digest, Sha256};

fn digest_dir(dir: &FsPath) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let h = Sha256::digest(std::fs::read(&p).unwrap());
                let name = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(name, h.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    out
}

fn small_config(seed: u64, epochs: usize) -> RunConfig {
    let doc = format!(
        "seed = {seed}\nsystem.family = \"ebm\"\nsystem.n_paths = 12\nsystem.t_train = 0.5\n\
         model.hidden = [6]\nmodel.encoder_hidden = 4\nmodel.context_dim = 3\n\
         train.epochs = {epochs}\ntrain.batch_size = 8\ntrain.anneal_ramp = 2\ntrain.gamma = 1.5\ndiagnostics.prior_paths = 6\n"
    );
    RunConfig::resolve(&parse_document(&doc).unwrap(), &Entries::new()).unwrap()
}

fn pipeline(root: &FsPath, cfg: &RunConfig) {
    cmd_generate(cfg, &root.join("data")).unwrap();
    cmd_train(cfg, &root.join("data"), None, &root.join("run")).unwrap();
    cmd_evaluate(cfg, &root.join("data"), Some(&root.join("run/checkpoint.json")), &[Metric::All], &root.join("eval")).unwrap();
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &small_config(5, 4));
    pipeline(b.path(), &small_config(5, 4));
    let (da, db) = (digest_dir(a.path()), digest_dir(b.path()));
    assert!(da.contains_key("eval/summary.json") && da.contains_key("run/checkpoint.json"));
    assert_eq!(da, db);

    let c = tempfile::tempdir().unwrap();
    pipeline(c.path(), &small_config(6, 4));
    assert_ne!(da["data/paths.csv"], digest_dir(c.path())["data/paths.csv"]);
}

#[test]
fn written_config_reproduces_run() {
    let a = tempfile::tempdir().unwrap();
    let cfg = small_config(9, 3);
    pipeline(a.path(), &cfg);
    let text = std::fs::read_to_string(a.path().join("run/config.toml")).unwrap();
    let again = RunConfig::resolve(&parse_document(&text).unwrap(), &Entries::new()).unwrap();
    assert_eq!(again, cfg);
    let b = tempfile::tempdir().unwrap();
    pipeline(b.path(), &again);
    assert_eq!(digest_dir(a.path()), digest_dir(b.path()));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    cmd_generate(&small_config(2, 6), &data).unwrap();
    let straight = cmd_train(&small_config(2, 6), &data, None, &root.path().join("straight")).unwrap();
    cmd_train(&small_config(2, 3), &data, None, &root.path().join("half")).unwrap();
    let resumed = cmd_train(&small_config(2, 6), &data, Some(&root.path().join("half/checkpoint.json")), &root.path().join("resumed")).unwrap();
    assert_eq!(straight.log, resumed.log);
    assert_eq!(straight.model.params.tensors(), resumed.model.params.tensors());
}
