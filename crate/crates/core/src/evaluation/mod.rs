//! Confusion matrices, accuracy, scenario sweeps and ablations.

mod ablation;
mod scenario;

pub use ablation::{ablation_sweep, write_ablation_csv, AblationCurve, AblationParameter, AblationPoint};
pub use scenario::{
    reference_rows, run_scenarios, CellResult, ReferenceRow, ScenarioReport, ScenarioRow, ScenarioSpec,
    DEFAULT_REPEATS, DEFAULT_SHOTS,
};

use serde::{Deserialize, Serialize};

use crate::datasets::{ImageStore, SampleRecord};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};

/// Counts with one designated positive class. A negative sample predicted
/// as a different negative class counts as a false positive, so accuracy
/// always equals the fraction of exact matches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], positive: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        match (y == positive, p == y) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, true) => cm.tn += 1,
            (false, false) => cm.fp += 1,
        }
    }
    Ok(cm)
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::Evaluation("accuracy of an empty confusion matrix".into()));
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Predicts every record on its stored, non-augmented image. Class 0 is the
/// positive class.
pub fn evaluate(model: &Model, records: &[SampleRecord], store: &mut ImageStore) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        let y = r
            .label
            .ok_or_else(|| Error::Evaluation(format!("{} has no ground-truth label", r.path.display())))?;
        let x = store.tensor(&r.path)?;
        predictions.push(argmax(&model.probabilities(&x)?));
        labels.push(y);
    }
    let cm = confusion(&predictions, &labels, 0)?;
    Ok(Evaluation {
        accuracy: accuracy(&cm)?,
        confusion: cm,
        predictions,
    })
}
