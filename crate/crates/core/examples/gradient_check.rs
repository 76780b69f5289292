//! Compares tape gradients of the full objective with central finite
//! differences on a tiny model.
//!
//! cargo run --release --example gradient_check

use latent_sde::model::{ElboOptions, LatentSdeModel, ModelConfig, elbo_with_gradients, evaluate};
use latent_sde::sde::{Path, TimeGrid};

fn main() -> latent_sde::Result<()> {
    let cfg = ModelConfig { hidden: vec![8, 8], encoder_hidden: 6, context_dim: 4, ..ModelConfig::default() };
    let mut model = LatentSdeModel::new(cfg, 3)?;
    let grid = TimeGrid::new(0.0, 0.01, 10)?;
    let batch: Vec<Path> = (0..2)
        .map(|i| Path::new(grid, 1, (0..=10).map(|k| (0.2 * k as f64 + i as f64).sin()).collect()))
        .collect::<Result<_, _>>()?;
    let opts = ElboOptions::new(2.0, 5.0);
    let seed = 17;
    let (b, grads) = elbo_with_gradients(&model, &batch, &opts, seed)?;
    println!("objective {:.6} (l_e {:.4}, l_kl {:.4}, l_g {:.4})", b.objective, b.l_e, b.l_kl, b.l_g);

    let h = 1e-5;
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.params.ids().collect();
    for (j, id) in ids.into_iter().enumerate() {
        let mut tensor_worst = 0.0f64;
        for k in 0..model.params.get(id).len() {
            let orig = model.params.get(id).data()[k];
            model.params.get_mut(id).data_mut()[k] = orig + h;
            let up = evaluate(&model, &batch, &opts, seed)?.objective;
            model.params.get_mut(id).data_mut()[k] = orig - h;
            let down = evaluate(&model, &batch, &opts, seed)?.objective;
            model.params.get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = grads.slot(j).data()[k];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
            tensor_worst = tensor_worst.max(rel);
        }
        println!("{:<28} {:>5} entries  max rel err {tensor_worst:.2e}", model.params.name(id), model.params.get(id).len());
        worst = worst.max(tensor_worst);
    }
    println!("worst {worst:.2e}");
    Ok(())
}
