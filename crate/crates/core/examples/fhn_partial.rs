//! FitzHugh–Nagumo observed through its fast variable only, fitted by a
//! one-dimensional latent SDE.
//!
//! cargo run --release --example fhn_partial [epochs]

use latent_sde::diagnostics::{marginal_histogram, pooled, transition_rate, transition_threshold, wasserstein1};
use latent_sde::model::{LatentSdeModel, ModelConfig};
use latent_sde::sde::sample_prior_paths;
use latent_sde::systems::{SystemSpec, normalize, simulate};
use latent_sde::trainer::{TrainConfig, train};

fn main() -> latent_sde::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(300, |s| s.parse().expect("epochs"));
    let spec = SystemSpec::fhn();
    let ds = normalize(&simulate(&spec, 128, spec.full_grid()?, 7)?, &spec)?;
    let w = ds.windows()?;
    let mc = ModelConfig { latent_dim: 1, hidden: vec![16, 16], encoder_hidden: 8, context_dim: 8, ..ModelConfig::default() };
    let mut model = LatentSdeModel::new(mc, 1)?;
    let cfg = TrainConfig { epochs, batch_size: 64, seed: 1, anneal_ramp: epochs / 2, ..TrainConfig::default() };
    train(&mut model, &ds.window(w.train.clone())?, &cfg)?;

    let thr = transition_threshold(&ds)?;
    let data = ds.window(w.test.clone())?;
    let prior: Vec<_> = sample_prior_paths(&model, 128, ds.grid(), 3)?
        .iter()
        .map(|p| p.window(w.test.start, w.test.end))
        .collect::<Result<_, _>>()?;
    println!("density minimum {thr:.3}");
    println!("rate: data {:.3}, prior {:.3}", transition_rate(&data, thr)?.rate, transition_rate(&prior, thr)?.rate);
    println!("test W1 {:.4}", wasserstein1(&pooled(&prior), &pooled(&data))?);
    let hd = marginal_histogram(&pooled(&data), 24, (-3.0, 3.0))?;
    let hp = marginal_histogram(&pooled(&prior), 24, (-3.0, 3.0))?;
    for ((c, d), p) in hd.centers().iter().zip(&hd.density).zip(&hp.density) {
        println!("{c:>6.2} {:<30} {}", "#".repeat((d * 40.0) as usize), "*".repeat((p * 40.0) as usize));
    }
    Ok(())
}
