//! State-dependent noise: compares the learned diffusion profile with the
//! data's Kramers–Moyal estimate on the linear-noise EBM.
//!
//! cargo run --release --example linear_noise_ebm [epochs]

use latent_sde::diagnostics::{KmConfig, Units, eval_drift_diffusion_grid, km_coefficients, least_squares_slope};
use latent_sde::model::{LatentSdeModel, ModelConfig};
use latent_sde::systems::{SystemSpec, normalize, simulate};
use latent_sde::trainer::{TrainConfig, train};

fn main() -> latent_sde::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(400, |s| s.parse().expect("epochs"));
    let spec = SystemSpec::ebm_linear_noise();
    let raw = simulate(&spec, 256, spec.full_grid()?, 7)?;
    let ds = normalize(&raw, &spec)?;
    let train_paths = ds.window(ds.windows()?.train)?;
    let mc = ModelConfig { hidden: vec![16, 16], encoder_hidden: 8, context_dim: 8, ..ModelConfig::default() };
    let mut model = LatentSdeModel::new(mc, 1)?;
    let cfg = TrainConfig { epochs, batch_size: 64, seed: 1, anneal_ramp: epochs / 2, ..TrainConfig::default() };
    train(&mut model, &train_paths, &cfg)?;

    let (lo, hi) = (ds.mean[0] - 1.5 * ds.std[0], ds.mean[0] + 1.5 * ds.std[0]);
    let km = km_coefficients(&raw, &KmConfig { n_bins: 20, range: Some((lo, hi)), ..KmConfig::default() })?;
    let rows = eval_drift_diffusion_grid(&model, Units::of(&ds), &km.bin_centers)?;
    println!("{:>9} {:>10} {:>10} {:>10}", "T", "data m2", "model g^2", "true g^2");
    let mut g = [0.0];
    for (i, r) in rows.iter().enumerate() {
        spec.diffusion(&[r.state], &mut g);
        println!("{:>9.2} {:>10.3} {:>10.3} {:>10.3}", r.state, km.m2[i], r.diffusion * r.diffusion, g[0] * g[0]);
    }
    let data_slope = km.slope(2, lo, hi).unwrap_or(f64::NAN);
    let model_slope = least_squares_slope(&rows.iter().map(|r| (r.state, r.diffusion * r.diffusion)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    println!("slope of g^2: data {data_slope:.4}, model {model_slope:.4}");
    Ok(())
}
