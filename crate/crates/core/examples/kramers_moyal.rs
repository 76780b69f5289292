//! Kramers–Moyal drift and diffusion estimates from simulated OU and EBM
//! trajectories, in raw units.
//!
//! cargo run --release --example kramers_moyal

use latent_sde::diagnostics::{KmConfig, km_coefficients};
use latent_sde::systems::{SystemSpec, simulate};

fn main() -> latent_sde::Result<()> {
    for (name, spec) in [("ou", SystemSpec::ou()), ("ebm, linear noise", SystemSpec::ebm_linear_noise())] {
        let raw = simulate(&spec, 200, spec.full_grid()?, 4)?;
        let km = km_coefficients(&raw, &KmConfig { n_bins: 15, ..KmConfig::default() })?;
        println!("{name} (bandwidth {:.4})", km.bandwidth);
        println!("{:>10} {:>10} {:>10} {:>10} {:>10}", "x", "m1", "drift", "m2", "g^2");
        let mut f = [0.0];
        let mut g = [0.0];
        for (i, &x) in km.bin_centers.iter().enumerate() {
            spec.drift(&[x], &mut f);
            spec.diffusion(&[x], &mut g);
            let mark = if km.valid[i] { "" } else { "  (sparse)" };
            println!("{x:>10.3} {:>10.3} {:>10.3} {:>10.4} {:>10.4}{mark}", km.m1[i], f[0], km.m2[i], g[0] * g[0]);
        }
    }
    Ok(())
}
