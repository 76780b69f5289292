//! Diffusion size over training at the two extremes of the KL weight:
//! no KL at all, and a KL weight so large that reconstruction is ignored.
//!
//! cargo run --release --example extreme_beta [epochs]

use latent_sde::model::{LatentSdeModel, ModelConfig};
use latent_sde::systems::{SystemSpec, normalize, simulate};
use latent_sde::trainer::{TrainConfig, train};

fn deciles(v: &[f64]) -> (f64, f64) {
    let n = (v.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&v[..n]), mean(&v[v.len() - n..]))
}

fn main() -> latent_sde::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(500, |s| s.parse().expect("epochs"));
    let spec = SystemSpec::ou();
    let ds = normalize(&simulate(&spec, 256, spec.full_grid()?, 7)?, &spec)?;
    let train_paths = ds.window(ds.windows()?.train)?;
    for (beta, seed) in [(0.0, 1), (1e10, 1), (1e10, 2)] {
        let mc = ModelConfig { hidden: vec![16, 16], encoder_hidden: 8, context_dim: 8, ..ModelConfig::default() };
        let mut model = LatentSdeModel::new(mc, seed)?;
        let cfg = TrainConfig { epochs, batch_size: 64, beta_final: beta, seed, anneal_ramp: epochs / 2, ..TrainConfig::default() };
        let log = train(&mut model, &train_paths, &cfg)?;
        let sizes = log.diffusion_sizes();
        let (first, last) = deciles(&sizes);
        println!("beta {beta:e} seed {seed}: diffusion size first decile {first:.4}, last decile {last:.4}, final {:.4}", sizes[sizes.len() - 1]);
    }
    Ok(())
}
