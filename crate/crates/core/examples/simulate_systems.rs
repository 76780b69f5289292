//! Simulates every built-in system and prints fixed points, window
//! statistics and crossing rates.
//!
//! cargo run --release --example simulate_systems [n_paths]

use latent_sde::diagnostics::{pooled, transition_rate, transition_threshold};
use latent_sde::systems::{Family, SystemSpec, fixed_points, normalize, simulate};

fn main() -> latent_sde::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(128, |s| s.parse().expect("n_paths"));
    let systems = [
        ("ebm", SystemSpec::ebm()),
        ("ebm (sigma 25)", SystemSpec::ebm_rare()),
        ("ebm, linear noise", SystemSpec::ebm_linear_noise()),
        ("ou", SystemSpec::ou()),
        ("triple well", SystemSpec::triple_well()),
        ("fhn", SystemSpec::fhn()),
    ];
    for (name, spec) in systems {
        let raw = simulate(&spec, n, spec.full_grid()?, 1)?;
        let ds = normalize(&raw, &spec)?;
        let w = ds.windows()?;
        println!("{name}: {} points per path, train window {:?}", ds.grid().n_points(), w.train);
        println!("  raw mean {:.4?}  std {:.4?}", ds.mean, ds.std);
        if spec.family != Family::Fhn {
            let fp = fixed_points(&spec)?;
            println!("  stable {:.4?}  unstable {:.4?}", fp.stable, fp.unstable);
        }
        let thr = transition_threshold(&ds)?;
        let test = ds.window(w.test)?;
        let r = transition_rate(&test, thr)?;
        let v = pooled(&test);
        let above = v.iter().filter(|x| **x > thr).count() as f64 / v.len() as f64;
        println!("  threshold {thr:.3} (normalized): {} crossings, rate {:.3}, {:.0}% above", r.count, r.rate, 100.0 * above);
    }
    Ok(())
}
