use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamSet;
use super::Encoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map from a flattened input to `d` features. Used to drive the head
/// and objectives on raw feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEncoder {
    input_len: usize,
    dim: usize,
    params: ParamSet,
}

impl LinearEncoder {
    pub fn new(input_len: usize, dim: usize, seed: u64) -> Result<Self> {
        if input_len == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "linear encoder needs positive sizes, got {input_len} -> {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (input_len as f64).sqrt()).expect("positive std");
        let weights = (0..dim * input_len).map(|_| normal.sample(&mut rng)).collect();
        let mut params = ParamSet::new();
        params.push("linear.weight", Tensor::new(vec![dim, input_len], weights)?);
        params.push("linear.bias", Tensor::zeros(vec![dim]));
        Ok(LinearEncoder { input_len, dim, params })
    }

    pub fn from_params(input_len: usize, dim: usize, params: ParamSet) -> Result<Self> {
        LinearEncoder::new(input_len, dim, 0)?
            .params
            .check_compatible(&params)?;
        Ok(LinearEncoder { input_len, dim, params })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }
}

impl Encoder for LinearEncoder {
    type Cache = Vec<f64>;

    fn kind(&self) -> &'static str {
        "linear"
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if input.len() != self.input_len {
            return Err(Error::Shape(format!(
                "linear encoder expects {} inputs, got {:?}",
                self.input_len,
                input.shape()
            )));
        }
        let x = input.data();
        let weight = self.params.data(0);
        let bias = self.params.data(1);
        let feature = (0..self.dim)
            .map(|i| {
                let row = &weight[i * self.input_len..(i + 1) * self.input_len];
                bias[i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        Ok((feature, x.to_vec()))
    }

    fn backward(&self, cache: &Vec<f64>, grad_feature: &[f64], grads: &mut ParamSet) -> Result<()> {
        if grad_feature.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature gradient of length {} for d = {}",
                grad_feature.len(),
                self.dim
            )));
        }
        {
            let gw = grads.data_mut(0);
            for (i, &g) in grad_feature.iter().enumerate() {
                for (w, &x) in gw[i * self.input_len..(i + 1) * self.input_len].iter_mut().zip(cache) {
                    *w += g * x;
                }
            }
        }
        for (b, &g) in grads.data_mut(1).iter_mut().zip(grad_feature) {
            *b += g;
        }
        Ok(())
    }
}
