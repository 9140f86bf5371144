use std::rc::Rc;

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamKind, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("sized")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add(
            format!("{name}/W"),
            ParamKind::Weight,
            glorot_uniform(rng, fan_in, fan_out),
        );
        let bias = store.add(format!("{name}/b"), ParamKind::Bias, Tensor::zeros(&[1, fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlpActivation {
    Prelu,
    Identity,
}

/// Stack of linear layers; hidden layers use PReLU and dropout, the last
/// layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slopes: Vec<ParamId>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let mut layers = Vec::new();
        let mut slopes = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            layers.push(Linear::new(store, &format!("{name}/l{i}"), w[0], w[1], rng));
            if i + 2 < dims.len() {
                slopes.push(store.add(
                    format!("{name}/l{i}/prelu"),
                    ParamKind::Other,
                    Tensor::full(&[1, w[1]], PRELU_INIT),
                ));
            }
        }
        Mlp { layers, slopes }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").fan_out
    }

    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        dropout_rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.input_dim() {
            return Err(Error::shape(
                "mlp",
                format!("input width {width} vs expected {}", self.input_dim()),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if let Some(&slope) = self.slopes.get(i) {
                let a = g.param(store, slope);
                x = g.prelu(x, a)?;
                x = dropout(g, x, dropout_rate, training, rng)?;
            }
        }
        Ok(x)
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)` at train
/// time; identity at inference.
pub fn dropout<R: Rng>(g: &mut Graph, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = g.value(x).len();
    let mask: Rc<[f64]> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mask(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = glorot_uniform(&mut rng, 10, 6);
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, -2.0, 3.0]));
        let y = dropout(&mut g, x, 0.5, false, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let z = dropout(&mut g, x, 0.0, true, &mut rng).unwrap();
        assert_eq!(g.value(z).data(), g.value(x).data());
        assert!(dropout(&mut g, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let n = 10_000;
        let mut means = Vec::new();
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(&[1, n], 1.0));
            let y = dropout(&mut g, x, 0.5, true, &mut rng).unwrap();
            means.push(g.value(y).data().iter().sum::<f64>() / n as f64);
        }
        let avg = means.iter().sum::<f64>() / means.len() as f64;
        assert!((avg - 1.0).abs() < 0.05, "mean {avg}");
    }

    #[test]
    fn mlp_matches_manual_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], &mut rng);
        let input = [0.2, -1.0, 0.7];
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(input.to_vec()));
        let y = mlp.forward(&mut g, &store, x, 0.5, false, &mut rng).unwrap();

        let w0 = store.get(mlp.layers[0].weight).data();
        let w1 = store.get(mlp.layers[1].weight).data();
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let z: f64 = (0..3).map(|i| input[i] * w0[i * 4 + j]).sum();
            *h = if z < 0.0 { PRELU_INIT * z } else { z };
        }
        for k in 0..2 {
            let z: f64 = (0..4).map(|j| hidden[j] * w1[j * 2 + k]).sum();
            assert!((g.value(y).data()[k] - z).abs() < 1e-12);
        }
    }
}
