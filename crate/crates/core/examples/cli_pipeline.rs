//! The generate → train → evaluate pipeline through the library entry
//! points the `lsde` binary uses, writing into a scratch directory.
//!
//! cargo run --release --example cli_pipeline [out_dir]

use latent_sde::cli::{Metric, cmd_balance, cmd_evaluate, cmd_generate, cmd_train};
use latent_sde::config::{RunConfig, parse_document};

fn main() -> latent_sde::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/cli_pipeline".into()));
    let doc = r#"
        seed = 3
        system.family = "ebm"
        system.n_paths = 64
        model.hidden = [16, 16]
        model.encoder_hidden = 8
        model.context_dim = 8
        train.epochs = 100
        train.batch_size = 32
        train.anneal_ramp = 50
        train.gamma = 50.0
        diagnostics.sigma_grid = "0.2:3:15"
    "#;
    let cfg = RunConfig::resolve(&parse_document(doc)?, &Default::default())?;
    cmd_generate(&cfg, &out.join("data"))?;
    let trained = cmd_train(&cfg, &out.join("data"), None, &out.join("run"))?;
    println!("trained {} epochs, final objective {:.2}", trained.log.len(), trained.log.records[trained.log.len() - 1].objective);
    let summary = cmd_evaluate(&cfg, &out.join("data"), Some(&out.join("run/checkpoint.json")), &[Metric::Wasserstein, Metric::Rate], &out.join("eval"))?;
    for s in summary {
        println!("{} [{}]: {}", s.metric, s.window, s.value);
    }
    let balance = cmd_balance(&cfg, &out.join("data"), &out.join("run/checkpoint.json"), &out.join("balance"))?;
    println!("balance: {}", balance[0].value);
    println!("outputs in {}", out.display());
    Ok(())
}
