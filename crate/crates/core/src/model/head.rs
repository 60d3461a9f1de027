//! Prototypical classification head.
//!
//! Features are L2-normalized, scored against one prototype row per class,
//! divided by a temperature and passed through a softmax:
//!
//! ```text
//! p(x) = softmax( W · f / (τ (‖f‖ + ε)) )
//! ```
//!
//! Only the feature is normalized by default. Row normalization of `W`
//! (a true cosine similarity) is available as an option.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PROTOTYPES: &str = "head.prototypes";

/// Guard added to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const INIT_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypicalHead {
    /// Holds the single `C × d` tensor [`PROTOTYPES`]; row `k` is the
    /// prototype of class `k`.
    params: ParamSet,
    temperature: f64,
    normalize_prototypes: bool,
}

/// Intermediate values of one head evaluation, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct HeadForward {
    pub normalized: Vec<f64>,
    pub norm: f64,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `v / (‖v‖ + ε)` and `‖v‖`.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm + NORM_EPS;
    (v.iter().map(|x| x / denom).collect(), norm)
}

/// Pulls a gradient with respect to `v / (‖v‖ + ε)` back onto `v`.
pub fn l2_normalize_backward(v: &[f64], norm: f64, grad: &[f64]) -> Vec<f64> {
    let denom = norm + NORM_EPS;
    let mut out: Vec<f64> = grad.iter().map(|g| g / denom).collect();
    if norm > 0.0 {
        let dot: f64 = v.iter().zip(grad).map(|(a, b)| a * b).sum();
        let coef = dot / (norm * denom * denom);
        for (o, x) in out.iter_mut().zip(v) {
            *o -= coef * x;
        }
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl PrototypicalHead {
    pub fn new(prototypes: Tensor, temperature: f64) -> Result<Self> {
        if prototypes.shape().len() != 2 || prototypes.shape()[0] < 2 || prototypes.shape()[1] == 0 {
            return Err(Error::Shape(format!(
                "prototype matrix must be C x d with C >= 2, got {:?}",
                prototypes.shape()
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !prototypes.is_finite() {
            return Err(Error::NonFinite("head.prototypes".into()));
        }
        let mut params = ParamSet::new();
        params.push(PROTOTYPES, prototypes);
        Ok(PrototypicalHead {
            params,
            temperature,
            normalize_prototypes: false,
        })
    }

    /// Draws every prototype entry from `N(0, 0.01²)`.
    pub fn init(dim: usize, classes: usize, temperature: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let w = (0..classes * dim).map(|_| normal.sample(&mut rng)).collect();
        PrototypicalHead::new(Tensor::new(vec![classes, dim], w)?, temperature)
    }

    pub fn with_normalized_prototypes(mut self, enabled: bool) -> Self {
        self.normalize_prototypes = enabled;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes().shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes().shape()[1]
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(())
    }

    pub fn normalizes_prototypes(&self) -> bool {
        self.normalize_prototypes
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.params.iter().next().expect("head owns its prototypes").value
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Shapes must be left unchanged.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn row(&self, k: usize) -> &[f64] {
        let d = self.feature_dim();
        &self.prototypes().data()[k * d..(k + 1) * d]
    }

    fn effective_row(&self, k: usize) -> Vec<f64> {
        if self.normalize_prototypes {
            l2_normalize(self.row(k)).0
        } else {
            self.row(k).to_vec()
        }
    }

    pub fn forward_cached(&self, feature: &[f64]) -> Result<HeadForward> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for head with d = {}",
                feature.len(),
                self.feature_dim()
            )));
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature".into()));
        }
        let (normalized, norm) = l2_normalize(feature);
        let logits: Vec<f64> = (0..self.num_classes())
            .map(|k| {
                let w = self.effective_row(k);
                w.iter().zip(&normalized).map(|(a, b)| a * b).sum::<f64>() / self.temperature
            })
            .collect();
        let probs = softmax(&logits);
        Ok(HeadForward {
            normalized,
            norm,
            logits,
            probs,
        })
    }

    /// Class probabilities for one feature vector.
    pub fn forward(&self, feature: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(feature)?.probs)
    }

    /// Given `∂L/∂logits`, accumulates `∂L/∂W` into `grad_prototypes` (same
    /// layout as the prototype matrix) and returns `∂L/∂feature`.
    pub fn backward(
        &self,
        feature: &[f64],
        cache: &HeadForward,
        grad_logits: &[f64],
        grad_prototypes: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let d = self.feature_dim();
        let inv_t = 1.0 / self.temperature;
        let mut grad_normalized = vec![0.0; d];
        let mut grad_w = grad_prototypes;
        for (k, &gz) in grad_logits.iter().enumerate() {
            let w = self.effective_row(k);
            for (g, wv) in grad_normalized.iter_mut().zip(&w) {
                *g += gz * inv_t * wv;
            }
            if let Some(gw) = grad_w.as_deref_mut() {
                let row_grad: Vec<f64> = cache.normalized.iter().map(|f| gz * inv_t * f).collect();
                let row_grad = if self.normalize_prototypes {
                    let raw = self.row(k);
                    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                    l2_normalize_backward(raw, norm, &row_grad)
                } else {
                    row_grad
                };
                for (dst, src) in gw[k * d..(k + 1) * d].iter_mut().zip(row_grad) {
                    *dst += src;
                }
            }
        }
        l2_normalize_backward(feature, cache.norm, &grad_normalized)
    }
}
