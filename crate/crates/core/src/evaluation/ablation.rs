use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::evaluate;
use crate::datasets::{EpisodeSplit, ImageStore};
use crate::error::{Error, Result};
use crate::training::{train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationParameter {
    Lambda,
    Temperature,
}

impl fmt::Display for AblationParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationParameter::Lambda => "lambda",
            AblationParameter::Temperature => "temperature",
        })
    }
}

impl FromStr for AblationParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(AblationParameter::Lambda),
            "temperature" | "tau" => Ok(AblationParameter::Temperature),
            other => Err(Error::Config(format!(
                "cannot sweep {other:?}; use lambda or temperature"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: f64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCurve {
    pub parameter: AblationParameter,
    pub points: Vec<AblationPoint>,
    /// Value with the highest accuracy; the first one on ties.
    pub best: Option<f64>,
}

/// Trains once per value with everything else fixed and scores each run on
/// the whole target set.
pub fn ablation_sweep(
    parameter: AblationParameter,
    values: &[f64],
    cfg: &TrainConfig,
    split: &EpisodeSplit,
    store: &mut ImageStore,
) -> Result<AblationCurve> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let scoring = split.scoring_set()?;
    let mut points = Vec::with_capacity(values.len());
    for &value in values {
        let mut run = cfg.clone();
        match parameter {
            AblationParameter::Lambda => run.lambda = value,
            AblationParameter::Temperature => run.temperature = value,
        }
        let result = train(&run, split, store).and_then(|out| evaluate(&out.best.state.model, &scoring, store));
        points.push(match result {
            Ok(e) => AblationPoint {
                value,
                accuracy: Some(e.accuracy),
                error: None,
            },
            Err(e) => AblationPoint {
                value,
                accuracy: None,
                error: Some(e.to_string()),
            },
        });
    }
    let mut best: Option<(f64, f64)> = None;
    for p in &points {
        if let Some(a) = p.accuracy {
            if best.map_or(true, |(_, b)| a > b) {
                best = Some((p.value, a));
            }
        }
    }
    Ok(AblationCurve {
        parameter,
        points,
        best: best.map(|(v, _)| v),
    })
}

/// `value,accuracy` rows; failed points have an empty accuracy.
pub fn write_ablation_csv(path: &Path, curve: &AblationCurve) -> Result<()> {
    let mut text = format!("{},accuracy\n", curve.parameter);
    for p in &curve.points {
        let acc = p.accuracy.map(|a| a.to_string()).unwrap_or_default();
        text.push_str(&format!("{},{}\n", p.value, acc));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
