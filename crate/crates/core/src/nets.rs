//! Network building blocks. Parameters live in a shared [`ParamStore`]; the
//! structs here only hold [`ParamId`]s and evaluate against any [`Backend`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Backend, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Weight `[n_out, n_in]` and bias `[n_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Layer {
    /// Weights and biases drawn uniformly from `±sqrt(1/n_in)`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / n_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = Tensor::from_parts(vec![n_out, n_in], draw(n_out * n_in));
        let b = Tensor::from_parts(vec![n_out], draw(n_out));
        Layer {
            weight: store.push(format!("{name}.weight"), w),
            bias: store.push(format!("{name}.bias"), b),
            n_in,
            n_out,
        }
    }

    pub fn eval<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let (w, bias) = (b.param(self.weight), b.param(self.bias));
        b.affine(x, &w, &bias)
    }

    pub fn eval_act<B: Backend>(&self, b: &mut B, x: &B::Value, act: Activation) -> Result<B::Value> {
        let (w, bias) = (b.param(self.weight), b.param(self.bias));
        b.dense(x, &w, &bias, act)
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Feed-forward network; every layer but the last is followed by the hidden
/// activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden_activation: Activation,
}

impl Mlp {
    /// `sizes = [n_in, h_1, ..., n_out]`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Ok(Mlp {
            layers,
            hidden_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    pub fn eval<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        let (last, hidden) = self.layers.split_last().expect("mlp has at least one layer");
        let mut h = x.clone();
        for layer in hidden {
            h = layer.eval_act(b, &h, self.hidden_activation)?;
        }
        last.eval(b, &h)
    }

    pub fn last_layer(&self) -> &Layer {
        self.layers.last().expect("mlp has at least one layer")
    }
}

/// `g(x) = softplus(A · sigmoid(mlp(x)) + c)`: the sigmoid stage bounds the
/// intermediate to `(0, 1)`, the final affine layer and softplus lift the
/// bound while keeping the output strictly positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionNet {
    pub body: Mlp,
    pub head: Layer,
}

impl DiffusionNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: &[usize],
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![dim];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let body = Mlp::new(store, &format!("{name}.body"), &sizes, hidden_activation, rng)?;
        let head = Layer::new(store, &format!("{name}.head"), dim, dim, rng);
        Ok(DiffusionNet { body, head })
    }

    pub fn eval<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<B::Value> {
        Ok(self.eval_stages(b, x)?.1)
    }

    /// Returns `(sigmoid stage, output)`.
    pub fn eval_stages<B: Backend>(&self, b: &mut B, x: &B::Value) -> Result<(B::Value, B::Value)> {
        let (last, hidden) = self.body.layers.split_last().expect("non-empty");
        let mut h = x.clone();
        for layer in hidden {
            h = layer.eval_act(b, &h, self.body.hidden_activation)?;
        }
        let gate = last.eval_act(b, &h, Activation::Sigmoid)?;
        let out = self.head.eval_act(b, &gate, Activation::Softplus)?;
        Ok((gate, out))
    }
}

/// Gated recurrent encoder run backwards in time, with an affine readout to
/// the context dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    /// Input-to-gate maps for the update, reset and candidate gates (with bias).
    pub input_update: Layer,
    pub input_reset: Layer,
    pub input_candidate: Layer,
    /// Hidden-to-gate maps (the candidate one carries its own bias).
    pub hidden_update: ParamId,
    pub hidden_reset: ParamId,
    pub hidden_candidate: Layer,
    pub readout: Layer,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        context_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || context_dim == 0 {
            return Err(Error::InvalidInput("encoder dimensions must be positive".into()));
        }
        let input_update = Layer::new(store, &format!("{name}.input_update"), input_dim, hidden_dim, rng);
        let input_reset = Layer::new(store, &format!("{name}.input_reset"), input_dim, hidden_dim, rng);
        let input_candidate = Layer::new(store, &format!("{name}.input_candidate"), input_dim, hidden_dim, rng);
        let bound = (1.0 / hidden_dim as f64).sqrt();
        let mut hidden_matrix = |gate: &str, rng: &mut R| {
            let w = (0..hidden_dim * hidden_dim).map(|_| rng.random_range(-bound..bound)).collect();
            store.push(format!("{name}.hidden_{gate}.weight"), Tensor::from_parts(vec![hidden_dim, hidden_dim], w))
        };
        let hidden_update = hidden_matrix("update", rng);
        let hidden_reset = hidden_matrix("reset", rng);
        let hidden_candidate = Layer::new(store, &format!("{name}.hidden_candidate"), hidden_dim, hidden_dim, rng);
        let readout = Layer::new(store, &format!("{name}.readout"), hidden_dim, context_dim, rng);
        Ok(Encoder {
            input_update,
            input_reset,
            input_candidate,
            hidden_update,
            hidden_reset,
            hidden_candidate,
            readout,
            input_dim,
            hidden_dim,
        })
    }

    pub fn context_dim(&self) -> usize {
        self.readout.n_out
    }

    /// One recurrence step: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
    /// `n = tanh(W_n x + b_n + r ⊙ (U_n h + b_hn))`, `h' = n + z ⊙ (h - n)`.
    pub fn cell<B: Backend>(&self, b: &mut B, x: &B::Value, h: &B::Value) -> Result<B::Value> {
        let xz = self.input_update.eval(b, x)?;
        let hz = {
            let u = b.param(self.hidden_update);
            b.linear(h, &u)?
        };
        let pre_z = b.add(&xz, &hz)?;
        let z = b.activation(Activation::Sigmoid, &pre_z)?;

        let xr = self.input_reset.eval(b, x)?;
        let hr = {
            let u = b.param(self.hidden_reset);
            b.linear(h, &u)?
        };
        let pre_r = b.add(&xr, &hr)?;
        let r = b.activation(Activation::Sigmoid, &pre_r)?;

        let xn = self.input_candidate.eval(b, x)?;
        let hn = self.hidden_candidate.eval(b, h)?;
        let gated = b.mul(&r, &hn)?;
        let pre_n = b.add(&xn, &gated)?;
        let n = b.activation(Activation::Tanh, &pre_n)?;

        let diff = b.sub(h, &n)?;
        let mixed = b.mul(&z, &diff)?;
        b.add(&n, &mixed)
    }

    /// Runs the cell over `observations` from last to first and returns one
    /// context per time index, so that `context[k]` depends only on
    /// `observations[k..]`. Each observation is `[batch, input_dim]`.
    pub fn encode_reversed<B: Backend>(&self, b: &mut B, observations: &[B::Value]) -> Result<Vec<B::Value>> {
        let first = observations
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot encode an empty path".into()))?;
        let batch = b.value(first).rows();
        let mut h = b.constant(Tensor::zeros(vec![batch, self.hidden_dim]));
        let mut contexts = Vec::with_capacity(observations.len());
        for x in observations.iter().rev() {
            h = self.cell(b, x, &h)?;
            contexts.push(self.readout.eval(b, &h)?);
        }
        contexts.reverse();
        Ok(contexts)
    }
}

/// Affine map from the first context vector to the mean and log-scale of the
/// initial latent Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialStateMap {
    pub layer: Layer,
    pub latent_dim: usize,
}

impl InitialStateMap {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, context_dim: usize, latent_dim: usize, rng: &mut R) -> Self {
        InitialStateMap {
            layer: Layer::new(store, name, context_dim, 2 * latent_dim, rng),
            latent_dim,
        }
    }

    /// Returns `(mean, log_scale)`, each `[batch, latent_dim]`.
    pub fn eval<B: Backend>(&self, b: &mut B, context0: &B::Value) -> Result<(B::Value, B::Value)> {
        let out = self.layer.eval(b, context0)?;
        let mean = b.slice_cols(&out, 0, self.latent_dim)?;
        let log_scale = b.slice_cols(&out, self.latent_dim, self.latent_dim)?;
        Ok((mean, log_scale))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zero_weights_return_final_bias() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 5, 2], Activation::Tanh, &mut rng()).unwrap();
        for l in &mlp.layers {
            l.zero(&mut store);
        }
        store.get_mut(mlp.last_layer().bias).data_mut().copy_from_slice(&[1.5, -2.0]);
        let mut e = Eager::new(&store);
        let x = e.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.5, 9.0]).unwrap());
        let y = mlp.eval(&mut e, &x).unwrap();
        assert_eq!(y.data(), &[1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn one_one_one_tanh_net() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[1, 1, 1], Activation::Tanh, &mut rng()).unwrap();
        for l in &mlp.layers {
            store.get_mut(l.weight).data_mut()[0] = 1.0;
            store.get_mut(l.bias).data_mut()[0] = 0.0;
        }
        let mut e = Eager::new(&store);
        let x = e.constant(Tensor::vector(vec![0.5]));
        let y = mlp.eval(&mut e, &x).unwrap();
        assert!((y.data()[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((y.data()[0] - 0.4621).abs() < 1e-4);
    }

    #[test]
    fn mlp_rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[2, 4, 1], Activation::Tanh, &mut rng()).unwrap();
        let mut e = Eager::new(&store);
        let x = e.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(matches!(mlp.eval(&mut e, &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_head_gives_ln2() {
        let mut store = ParamStore::new();
        let g = DiffusionNet::new(&mut store, "g", 1, &[8, 8], Activation::Tanh, &mut rng()).unwrap();
        g.head.zero(&mut store);
        let mut e = Eager::new(&store);
        let x = e.constant(Tensor::matrix(3, 1, vec![-4.0, 0.0, 10.0]).unwrap());
        let (gate, y) = g.eval_stages(&mut e, &x).unwrap();
        assert!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for v in y.data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn length_one_path_gives_one_context() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 1, 4, 3, &mut rng()).unwrap();
        let mut e = Eager::new(&store);
        let x = e.constant(Tensor::matrix(2, 1, vec![0.1, 0.2]).unwrap());
        let ctx = enc.encode_reversed(&mut e, &[x]).unwrap();
        assert_eq!(ctx.len(), 1);
        assert_eq!(ctx[0].shape(), &[2, 3]);
    }

    #[test]
    fn empty_path_rejected() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", 1, 4, 3, &mut rng()).unwrap();
        let mut e = Eager::new(&store);
        assert!(enc.encode_reversed(&mut e, &[]).is_err());
    }

    #[test]
    fn initial_map_splits_mean_and_scale() {
        let mut store = ParamStore::new();
        let m = InitialStateMap::new(&mut store, "init", 3, 2, &mut rng());
        let mut e = Eager::new(&store);
        let c = e.constant(Tensor::matrix(4, 3, vec![0.3; 12]).unwrap());
        let (mean, log_scale) = m.eval(&mut e, &c).unwrap();
        assert_eq!(mean.shape(), &[4, 2]);
        assert_eq!(log_scale.shape(), &[4, 2]);
        assert!(log_scale.data().iter().all(|v| v.exp() > 0.0));
    }
}
