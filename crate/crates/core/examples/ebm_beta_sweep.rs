//! Energy-balance model: trains over a few KL weights and reports how the
//! learned noise level and the prior's crossing rate respond.
//!
//! cargo run --release --example ebm_beta_sweep [epochs] [beta,...] [gamma]

use latent_sde::diagnostics::{transition_rate, transition_threshold};
use latent_sde::model::{LatentSdeModel, ModelConfig};
use latent_sde::sde::sample_prior_paths;
use latent_sde::systems::{SystemSpec, normalize, simulate};
use latent_sde::trainer::{TrainConfig, train};

fn main() -> latent_sde::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(300, |s| s.parse().expect("epochs"));
    let betas: Vec<f64> = args.next().map_or(vec![1.0, 10.0, 100.0], |s| s.split(',').map(|b| b.parse().expect("beta")).collect());
    let gamma: f64 = args.next().map_or(0.0, |s| s.parse().expect("gamma"));

    let spec = SystemSpec::ebm();
    let ds = normalize(&simulate(&spec, 256, spec.full_grid()?, 7)?, &spec)?;
    let w = ds.windows()?;
    let train_paths = ds.window(w.train.clone())?;
    let thr = transition_threshold(&ds)?;
    let data_rate = transition_rate(&ds.window(w.test.clone())?, thr)?;
    println!("unstable point {thr:.3} (normalized), data rate {:.3}", data_rate.rate);

    for beta in betas {
        let mc = ModelConfig { hidden: vec![16, 16], encoder_hidden: 8, context_dim: 8, ..ModelConfig::default() };
        let mut model = LatentSdeModel::new(mc, 1)?;
        let cfg = TrainConfig { epochs, batch_size: 64, beta_final: beta, gamma, seed: 1, anneal_ramp: epochs / 2, ..TrainConfig::default() };
        let log = train(&mut model, &train_paths, &cfg)?;
        let prior = sample_prior_paths(&model, 256, ds.grid(), 99)?;
        let test: Vec<_> = prior.iter().map(|p| p.window(w.test.start, w.test.end)).collect::<Result<_, _>>()?;
        let r = transition_rate(&test, thr)?;
        let last = log.records.last().expect("trained");
        println!("beta {beta:>8}: l_kl {:.3}, diffusion size {:.3}, prior rate {:.3}", last.l_kl, last.diffusion_size, r.rate);
    }
    Ok(())
}
