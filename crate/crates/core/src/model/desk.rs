//! Small convolutional encoder: stride-2 3×3 convolutions with ReLU, then
//! global average pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::Encoder;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskEncoderConfig {
    pub in_channels: usize,
    /// Output channels of each convolution block.
    pub widths: Vec<usize>,
}

impl Default for DeskEncoderConfig {
    fn default() -> Self {
        DeskEncoderConfig {
            in_channels: 3,
            widths: vec![16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeskEncoder {
    config: DeskEncoderConfig,
    params: ParamSet,
}

/// Activations kept from the forward pass.
#[derive(Clone, Debug)]
pub struct DeskCache {
    /// Input of each block, the first being the image itself.
    inputs: Vec<Plane>,
    /// Unfolded input of each block.
    cols: Vec<Vec<f64>>,
    /// Post-ReLU output of the last block.
    last: Plane,
}

#[derive(Clone, Debug)]
struct Plane {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

fn out_size(n: usize) -> usize {
    (n + 2 * PADDING - KERNEL) / STRIDE + 1
}

impl DeskEncoder {
    /// He-normal weights, zero biases.
    pub fn new(config: DeskEncoderConfig, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.widths.is_empty() || config.widths.contains(&0) {
            return Err(Error::Config(format!("invalid desk encoder layout {:?}", config)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fan_channels = config.in_channels;
        for (i, &width) in config.widths.iter().enumerate() {
            let fan_in = fan_channels * KERNEL * KERNEL;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive standard deviation");
            let weights = (0..width * fan_in).map(|_| normal.sample(&mut rng)).collect();
            params.push(
                format!("conv{}.weight", i + 1),
                Tensor::new(vec![width, fan_channels, KERNEL, KERNEL], weights)?,
            );
            params.push(format!("conv{}.bias", i + 1), Tensor::zeros(vec![width]));
            fan_channels = width;
        }
        Ok(DeskEncoder { config, params })
    }

    pub fn from_params(config: DeskEncoderConfig, params: ParamSet) -> Result<Self> {
        let reference = DeskEncoder::new(config.clone(), 0)?;
        reference.params.check_compatible(&params)?;
        Ok(DeskEncoder { config, params })
    }

    pub fn config(&self) -> &DeskEncoderConfig {
        &self.config
    }

    fn weight(&self, layer: usize) -> &[f64] {
        self.params.data(2 * layer)
    }

    fn bias(&self, layer: usize) -> &[f64] {
        self.params.data(2 * layer + 1)
    }

    /// Pre-activation output of one block, with the unfolded input.
    fn conv(&self, layer: usize, input: &Plane) -> (Plane, Vec<f64>) {
        let out_c = self.config.widths[layer];
        let (oh, ow) = (out_size(input.height), out_size(input.width));
        let cols = im2col(input);
        let taps = input.channels * KERNEL * KERNEL;
        let area = oh * ow;
        let weight = self.weight(layer);
        let bias = self.bias(layer);
        let mut data = vec![0.0; out_c * area];
        for (oc, out) in data.chunks_exact_mut(area).enumerate() {
            out.fill(bias[oc]);
            for (&w, col) in weight[oc * taps..(oc + 1) * taps].iter().zip(cols.chunks_exact(area)) {
                for (d, &c) in out.iter_mut().zip(col) {
                    *d += w * c;
                }
            }
        }
        let plane = Plane {
            channels: out_c,
            height: oh,
            width: ow,
            data,
        };
        (plane, cols)
    }

    /// Smallest `|pre-activation|` over every ReLU unit for this input, i.e.
    /// how far the input sits from a non-differentiable point.
    pub fn relu_margin(&self, input: &Tensor) -> Result<f64> {
        let (_, cache) = self.forward(input)?;
        let mut margin = f64::INFINITY;
        for (layer, block_input) in cache.inputs.iter().enumerate() {
            let (pre, _) = self.conv(layer, block_input);
            margin = pre.data.iter().fold(margin, |m, v| m.min(v.abs()));
        }
        Ok(margin)
    }

    /// Back-propagates through one block. `grad_out` is the gradient with
    /// respect to the post-ReLU output; it is masked in place.
    fn conv_relu_backward(
        &self,
        layer: usize,
        input: &Plane,
        cols: &[f64],
        output_mask: &[f64],
        grad_out: &mut [f64],
        grads: &mut ParamSet,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let area = out_size(input.height) * out_size(input.width);
        let taps = input.channels * KERNEL * KERNEL;
        for (g, &a) in grad_out.iter_mut().zip(output_mask) {
            if a <= 0.0 {
                *g = 0.0;
            }
        }
        {
            let grad_bias = grads.data_mut(2 * layer + 1);
            for (gb, g) in grad_bias.iter_mut().zip(grad_out.chunks_exact(area)) {
                *gb += g.iter().sum::<f64>();
            }
        }
        let grad_weight = grads.data_mut(2 * layer);
        for (oc, g) in grad_out.chunks_exact(area).enumerate() {
            for (gw, col) in grad_weight[oc * taps..(oc + 1) * taps]
                .iter_mut()
                .zip(cols.chunks_exact(area))
            {
                *gw += g.iter().zip(col).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if !want_input_grad {
            return None;
        }
        let weight = self.weight(layer);
        let mut grad_cols = vec![0.0; cols.len()];
        for (oc, g) in grad_out.chunks_exact(area).enumerate() {
            for (&w, gc) in weight[oc * taps..(oc + 1) * taps]
                .iter()
                .zip(grad_cols.chunks_exact_mut(area))
            {
                for (d, &v) in gc.iter_mut().zip(g) {
                    *d += w * v;
                }
            }
        }
        Some(col2im(&grad_cols, input))
    }
}

/// Unfolds `input` into a `(C·3·3) × (H'·W')` matrix; padded taps are zero.
fn im2col(input: &Plane) -> Vec<f64> {
    let (oh, ow) = (out_size(input.height), out_size(input.width));
    let area = oh * ow;
    let plane = input.height * input.width;
    let mut cols = vec![0.0; input.channels * KERNEL * KERNEL * area];
    let mut rows = cols.chunks_exact_mut(area);
    for ic in 0..input.channels {
        let src = &input.data[ic * plane..(ic + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let col = rows.next().expect("one row per tap");
                for oy in 0..oh {
                    let iy = (oy * STRIDE + ky) as isize - PADDING as isize;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    let row = &src[iy as usize * input.width..][..input.width];
                    for ox in 0..ow {
                        let ix = (ox * STRIDE + kx) as isize - PADDING as isize;
                        if ix >= 0 && ix < input.width as isize {
                            col[oy * ow + ox] = row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f64], input: &Plane) -> Vec<f64> {
    let (oh, ow) = (out_size(input.height), out_size(input.width));
    let area = oh * ow;
    let plane = input.height * input.width;
    let mut out = vec![0.0; input.channels * plane];
    let mut rows = cols.chunks_exact(area);
    for ic in 0..input.channels {
        let dst = &mut out[ic * plane..(ic + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let col = rows.next().expect("one row per tap");
                for oy in 0..oh {
                    let iy = (oy * STRIDE + ky) as isize - PADDING as isize;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    let row = &mut dst[iy as usize * input.width..][..input.width];
                    for ox in 0..ow {
                        let ix = (ox * STRIDE + kx) as isize - PADDING as isize;
                        if ix >= 0 && ix < input.width as isize {
                            row[ix as usize] += col[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

impl Encoder for DeskEncoder {
    type Cache = DeskCache;

    fn kind(&self) -> &'static str {
        "desk"
    }

    fn feature_dim(&self) -> usize {
        *self.config.widths.last().expect("validated non-empty")
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, input: &Tensor) -> Result<(Vec<f64>, DeskCache)> {
        let shape = input.shape();
        if shape.len() != 3 || shape[0] != self.config.in_channels || shape[1] == 0 || shape[2] == 0 {
            return Err(Error::Shape(format!(
                "desk encoder expects {} x H x W input, got {:?}",
                self.config.in_channels, shape
            )));
        }
        let mut current = Plane {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            data: input.data().to_vec(),
        };
        let mut inputs = Vec::with_capacity(self.config.widths.len());
        let mut cols = Vec::with_capacity(self.config.widths.len());
        for layer in 0..self.config.widths.len() {
            let (mut next, unfolded) = self.conv(layer, &current);
            for v in &mut next.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            inputs.push(std::mem::replace(&mut current, next));
            cols.push(unfolded);
        }
        let area = (current.height * current.width) as f64;
        let feature = current
            .data
            .chunks(current.height * current.width)
            .map(|c| c.iter().sum::<f64>() / area)
            .collect();
        Ok((
            feature,
            DeskCache {
                inputs,
                cols,
                last: current,
            },
        ))
    }

    fn backward(&self, cache: &DeskCache, grad_feature: &[f64], grads: &mut ParamSet) -> Result<()> {
        if grad_feature.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature gradient of length {} for d = {}",
                grad_feature.len(),
                self.feature_dim()
            )));
        }
        let last = &cache.last;
        let area = last.height * last.width;
        let mut grad: Vec<f64> = grad_feature
            .iter()
            .flat_map(|&g| std::iter::repeat(g / area as f64).take(area))
            .collect();
        let layers = self.config.widths.len();
        for layer in (0..layers).rev() {
            let input = &cache.inputs[layer];
            let mask = if layer + 1 == layers {
                &last.data
            } else {
                &cache.inputs[layer + 1].data
            };
            match self.conv_relu_backward(layer, input, &cache.cols[layer], mask, &mut grad, grads, layer > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_has_fixed_parameter_count() {
        let enc = DeskEncoder::new(DeskEncoderConfig::default(), 1).unwrap();
        let expected = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64);
        assert_eq!(enc.params().numel(), expected);
        assert_eq!(enc.feature_dim(), 64);
        assert_eq!(enc, DeskEncoder::new(DeskEncoderConfig::default(), 1).unwrap());
        assert_ne!(enc, DeskEncoder::new(DeskEncoderConfig::default(), 2).unwrap());
    }

    #[test]
    fn zero_input_with_zero_bias_gives_zero_feature() {
        let enc = DeskEncoder::new(DeskEncoderConfig::default(), 5).unwrap();
        let (f, _) = enc.forward(&Tensor::zeros(vec![3, 16, 16])).unwrap();
        assert_eq!(f, vec![0.0; 64]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let enc = DeskEncoder::new(DeskEncoderConfig::default(), 5).unwrap();
        assert!(enc.forward(&Tensor::zeros(vec![1, 16, 16])).is_err());
        assert!(enc.forward(&Tensor::zeros(vec![3, 16])).is_err());
    }

    #[test]
    fn spatial_size_halves_per_block() {
        assert_eq!(out_size(256), 128);
        assert_eq!(out_size(32), 16);
        assert_eq!(out_size(8), 4);
        assert_eq!(out_size(1), 1);
        assert_eq!(out_size(5), 3);
    }
}
