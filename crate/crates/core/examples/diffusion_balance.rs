//! Trains a short EBM model, then freezes the diffusion at a grid of
//! constant levels and prints the reconstruction/KL trade-off.
//!
//! cargo run --release --example diffusion_balance [epochs] [lo:hi:n]

use latent_sde::diagnostics::{diffusion_balance, parse_grid};
use latent_sde::model::{ElboOptions, LatentSdeModel, ModelConfig, evaluate};
use latent_sde::systems::{SystemSpec, normalize, simulate};
use latent_sde::trainer::{TrainConfig, train};

fn main() -> latent_sde::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(300, |s| s.parse().expect("epochs"));
    let grid = parse_grid(&args.next().unwrap_or_else(|| "0.1:5:50".into()))?;

    let spec = SystemSpec::ebm();
    let ds = normalize(&simulate(&spec, 128, spec.full_grid()?, 7)?, &spec)?;
    let train_paths = ds.window(ds.windows()?.train)?;
    let mc = ModelConfig { hidden: vec![16, 16], encoder_hidden: 8, context_dim: 8, ..ModelConfig::default() };
    let mut model = LatentSdeModel::new(mc, 1)?;
    let beta = 10.0;
    let cfg = TrainConfig { epochs, batch_size: 64, beta_final: beta, seed: 1, anneal_ramp: epochs / 2, ..TrainConfig::default() };
    train(&mut model, &train_paths, &cfg)?;

    let own = evaluate(&model, &train_paths, &ElboOptions::new(beta, 0.0), 5)?;
    let curve = diffusion_balance(&model, &train_paths, beta, &grid, 5)?;
    println!("{:>8} {:>12} {:>12} {:>12}", "sigma", "l_e", "beta*l_kl", "weighted");
    for p in &curve.points {
        println!("{:>8.3} {:>12.3} {:>12.3} {:>12.3}", p.sigma, p.l_e, p.beta_l_kl, p.weighted);
    }
    println!("argmin sigma {:.3}, trained diffusion size {:.3}", curve.points[curve.argmin()].sigma, own.diffusion_size);
    Ok(())
}
