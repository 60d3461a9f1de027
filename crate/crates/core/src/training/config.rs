use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::imaging::AugmentConfig;
use crate::model::{
    AnyEncoder, DeskEncoder, DeskEncoderConfig, LinearEncoder, Model, PrototypicalHead, DEFAULT_TEMPERATURE,
};
use crate::seed;

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the unlabeled entropy term.
    pub lambda: f64,
    pub temperature: f64,
    /// Labeled (and validation) target samples per class.
    pub shots: usize,
    pub batch_size: usize,
    /// Unlabeled target samples per batch; `None` means `batch_size`.
    pub unlabeled_per_batch: Option<usize>,
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_power: f64,
    pub batch_budget: u64,
    pub validation_interval: u64,
    pub seed: u64,
    pub num_classes: usize,
    /// Input planes fed to the encoder.
    pub channels: usize,
    /// Registry name, one of [`AnyEncoder::NAMES`].
    pub encoder: String,
    /// Desk encoder block widths.
    pub widths: Vec<usize>,
    /// Output size of the linear encoder.
    pub linear_dim: usize,
    pub normalize_prototypes: bool,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            temperature: DEFAULT_TEMPERATURE,
            shots: 3,
            batch_size: 12,
            unlabeled_per_batch: None,
            lr0: 1e-4,
            decay_rate: 0.001,
            decay_power: 0.75,
            batch_budget: 400,
            validation_interval: 10,
            seed: 0,
            num_classes: 2,
            channels: 3,
            encoder: "desk".into(),
            widths: DeskEncoderConfig::default().widths,
            linear_dim: 64,
            normalize_prototypes: false,
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn unlabeled(&self) -> usize {
        self.unlabeled_per_batch.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_rate >= 0.0 && self.decay_power >= 0.0) {
            return fail(format!(
                "decay rate and power must be >= 0, got {} and {}",
                self.decay_rate, self.decay_power
            ));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return fail(format!("batch_size must be even and >= 2, got {}", self.batch_size));
        }
        if self.batch_budget == 0 || self.validation_interval == 0 {
            return fail("batch_budget and validation_interval must be >= 1".into());
        }
        if self.num_classes < 2 || self.channels == 0 {
            return fail(format!(
                "need >= 2 classes and >= 1 channel, got {} and {}",
                self.num_classes, self.channels
            ));
        }
        if !AnyEncoder::NAMES.contains(&self.encoder.as_str()) {
            return fail(format!(
                "unknown encoder {:?}; known: {}",
                self.encoder,
                AnyEncoder::NAMES.join(", ")
            ));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.linear_dim == 0 {
            return fail("encoder sizes must be positive".into());
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return fail(format!("invalid Adam constants {:?}", self.adam));
        }
        self.augment.validate()
    }

    pub fn desk_config(&self) -> DeskEncoderConfig {
        DeskEncoderConfig {
            in_channels: self.channels,
            widths: self.widths.clone(),
        }
    }

    /// Freshly initialized model for `side × side` inputs.
    pub fn build_model(&self, side: usize) -> Result<Model> {
        self.validate()?;
        let encoder_seed = seed::derive(self.seed, "init/encoder");
        let encoder = match self.encoder.as_str() {
            "desk" => AnyEncoder::Desk(DeskEncoder::new(self.desk_config(), encoder_seed)?),
            _ => AnyEncoder::Linear(LinearEncoder::new(
                self.channels * side * side,
                self.linear_dim,
                encoder_seed,
            )?),
        };
        let d = match &encoder {
            AnyEncoder::Desk(e) => *e.config().widths.last().expect("validated"),
            AnyEncoder::Linear(_) => self.linear_dim,
        };
        let head = PrototypicalHead::init(
            d,
            self.num_classes,
            self.temperature,
            seed::derive(self.seed, "init/head"),
        )?
        .with_normalized_prototypes(self.normalize_prototypes);
        Model::new(encoder, head)
    }
}
