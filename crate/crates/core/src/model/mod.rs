//! Feature encoders and the prototypical classification head.

mod desk;
mod head;
mod linear;
mod params;

pub use desk::{DeskCache, DeskEncoder, DeskEncoderConfig};
pub use head::{
    l2_normalize, l2_normalize_backward, softmax, HeadForward, PrototypicalHead, DEFAULT_TEMPERATURE, INIT_STD,
    NORM_EPS, PROTOTYPES,
};
pub use linear::LinearEncoder;
pub use params::{Param, ParamSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps an input tensor to a fixed-length feature vector.
///
/// Implementations must be deterministic given their parameters, and
/// `backward` must accumulate (not overwrite) into `grads`, which has the
/// layout of `params()`.
pub trait Encoder: Send + Sync {
    type Cache: Send;

    /// Registry name, stored in checkpoints.
    fn kind(&self) -> &'static str;
    fn feature_dim(&self) -> usize;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward(&self, input: &Tensor) -> Result<(Vec<f64>, Self::Cache)>;
    fn backward(&self, cache: &Self::Cache, grad_feature: &[f64], grads: &mut ParamSet) -> Result<()>;
}

/// The encoders known to the toolkit, selectable by name.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyEncoder {
    Desk(DeskEncoder),
    Linear(LinearEncoder),
}

pub enum AnyCache {
    Desk(DeskCache),
    Linear(Vec<f64>),
}

impl AnyEncoder {
    pub const NAMES: [&'static str; 2] = ["desk", "linear"];
}

impl Encoder for AnyEncoder {
    type Cache = AnyCache;

    fn kind(&self) -> &'static str {
        match self {
            AnyEncoder::Desk(e) => e.kind(),
            AnyEncoder::Linear(e) => e.kind(),
        }
    }

    fn feature_dim(&self) -> usize {
        match self {
            AnyEncoder::Desk(e) => e.feature_dim(),
            AnyEncoder::Linear(e) => e.feature_dim(),
        }
    }

    fn params(&self) -> &ParamSet {
        match self {
            AnyEncoder::Desk(e) => e.params(),
            AnyEncoder::Linear(e) => e.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            AnyEncoder::Desk(e) => e.params_mut(),
            AnyEncoder::Linear(e) => e.params_mut(),
        }
    }

    fn forward(&self, input: &Tensor) -> Result<(Vec<f64>, AnyCache)> {
        match self {
            AnyEncoder::Desk(e) => e.forward(input).map(|(f, c)| (f, AnyCache::Desk(c))),
            AnyEncoder::Linear(e) => e.forward(input).map(|(f, c)| (f, AnyCache::Linear(c))),
        }
    }

    fn backward(&self, cache: &AnyCache, grad_feature: &[f64], grads: &mut ParamSet) -> Result<()> {
        match (self, cache) {
            (AnyEncoder::Desk(e), AnyCache::Desk(c)) => e.backward(c, grad_feature, grads),
            (AnyEncoder::Linear(e), AnyCache::Linear(c)) => e.backward(c, grad_feature, grads),
            _ => Err(Error::Shape("forward cache from a different encoder".into())),
        }
    }
}

/// Encoder followed by the prototypical head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: AnyEncoder,
    pub head: PrototypicalHead,
}

impl Model {
    pub fn new(encoder: AnyEncoder, head: PrototypicalHead) -> Result<Self> {
        if encoder.feature_dim() != head.feature_dim() {
            return Err(Error::Shape(format!(
                "encoder emits d = {} but head expects d = {}",
                encoder.feature_dim(),
                head.feature_dim()
            )));
        }
        Ok(Model { encoder, head })
    }

    pub fn probabilities(&self, input: &Tensor) -> Result<Vec<f64>> {
        let (feature, _) = self.encoder.forward(input)?;
        self.head.forward(&feature)
    }

    /// Most probable class; the lowest index wins ties.
    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        let probs = self.probabilities(input)?;
        Ok(argmax(&probs))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
