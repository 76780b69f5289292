//! Trains on OU data with and without the noise reward and compares the
//! prior's second Kramers–Moyal coefficient with the data's.
//!
//! cargo run --release --example ou_noise_penalty [epochs] [gamma,...]

use latent_sde::diagnostics::{KmConfig, km_coefficients, wasserstein1, pooled};
use latent_sde::model::{LatentSdeModel, ModelConfig};
use latent_sde::sde::sample_prior_paths;
use latent_sde::systems::{SystemSpec, normalize, simulate};
use latent_sde::trainer::{TrainConfig, train};

fn main() -> latent_sde::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(400, |s| s.parse().expect("epochs"));
    let gammas: Vec<f64> = args.next().map_or(vec![0.0, 100.0], |s| s.split(',').map(|g| g.parse().expect("gamma")).collect());

    let spec = SystemSpec::ou();
    let raw = simulate(&spec, 256, spec.full_grid()?, 7)?;
    let ds = normalize(&raw, &spec)?;
    let w = ds.windows()?;
    let train_paths = ds.window(w.train.clone())?;
    let km = KmConfig::default();
    let data_test = ds.denormalize(&ds.window(w.test.clone())?)?;
    let data_m2 = km_coefficients(&data_test, &km)?.m2_at(ds.mean[0]).unwrap_or(f64::NAN);
    println!("data m2 at the mean: {data_m2:.3} (true 1)");

    for gamma in gammas {
        let mc = ModelConfig { hidden: vec![16, 16], encoder_hidden: 8, context_dim: 8, ..ModelConfig::default() };
        let mut model = LatentSdeModel::new(mc, 1)?;
        let cfg = TrainConfig { epochs, batch_size: 64, gamma, seed: 1, anneal_ramp: epochs / 2, ..TrainConfig::default() };
        let log = train(&mut model, &train_paths, &cfg)?;
        let prior = sample_prior_paths(&model, 256, ds.grid(), 99)?;
        let prior_test: Vec<_> = prior.iter().map(|p| p.window(w.test.start, w.test.end)).collect::<Result<_, _>>()?;
        let m2 = km_coefficients(&ds.denormalize(&prior_test)?, &km)?.m2_at(ds.mean[0]).unwrap_or(f64::NAN);
        let w1 = wasserstein1(&pooled(&prior_test), &pooled(&ds.window(w.test.clone())?))?;
        let last = log.records.last().expect("trained");
        println!("gamma {gamma:>6}: prior m2 {m2:.3}, diffusion size {:.3}, test W1 {w1:.4}", last.diffusion_size);
    }
    Ok(())
}
