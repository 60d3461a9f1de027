use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainState};
use super::config::TrainConfig;
use super::schedule::lr_schedule;
use crate::datasets::{BalancedSampler, EpisodeSplit, ImageStore, SampleRecord, TrainingBatch};
use crate::error::{Error, Result};
use crate::model::{argmax, Encoder, Model};
use crate::objectives::{encode_batch, encoder_gradients, head_gradients, BatchInputs, LossReport};
use crate::tensor::Tensor;

/// One line of the training log. `b` is the zero-based batch index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub b: u64,
    pub lr: f64,
    pub ce: f64,
    pub eu: f64,
    pub psi_h: f64,
    pub psi_c: f64,
    pub val_acc: Option<f64>,
}

/// Appends records as newline-delimited JSON.
pub fn append_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scores a model during training; `None` when there is nothing to score.
pub trait Validator {
    fn validate(&mut self, model: &Model) -> Result<Option<f64>>;
}

/// Accuracy on a fixed labeled set.
pub struct SampleValidator {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
}

impl SampleValidator {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(SampleValidator { inputs, labels })
    }

    pub fn from_records(records: &[SampleRecord], store: &mut ImageStore) -> Result<Self> {
        let mut inputs = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            let label = r
                .label
                .ok_or_else(|| Error::Config(format!("validation sample {} has no label", r.path.display())))?;
            inputs.push(store.tensor(&r.path)?);
            labels.push(label);
        }
        SampleValidator::new(inputs, labels)
    }
}

impl Validator for SampleValidator {
    fn validate(&mut self, model: &Model) -> Result<Option<f64>> {
        if self.inputs.is_empty() {
            return Ok(None);
        }
        let mut correct = 0usize;
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            if argmax(&model.probabilities(x)?) == y {
                correct += 1;
            }
        }
        Ok(Some(correct as f64 / self.inputs.len() as f64))
    }
}

/// One alternating update at learning rate `lr`: an Adam step on the head
/// minimizing `ψ_C` with the encoder fixed, then an Adam step on the encoder
/// minimizing `ψ_H` against the updated head. The encoder forward pass is
/// shared by both steps. Returns the losses before the update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, inputs: &BatchInputs, lr: f64) -> Result<LossReport> {
    let lambda = cfg.lambda;
    let encoded = encode_batch(&state.model.encoder, inputs)?;

    let before = head_gradients(&state.model.head, &encoded, lambda)?;
    let report = before.report.clone();
    for (name, v) in [("ce", report.ce), ("eu", report.eu)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {name}")));
        }
    }
    let head_grad = before.head_psi_c();
    state.head_opt.step(state.model.head.params_mut(), &head_grad, lr)?;

    let after = head_gradients(&state.model.head, &encoded, lambda)?;
    let (mut grad, grad_eu) = encoder_gradients(
        &state.model.encoder,
        &encoded,
        &after.feature_ce,
        &after.feature_eu,
        1.0,
    )?;
    grad.add_scaled(&grad_eu, lambda);
    state.encoder_opt.step(state.model.encoder.params_mut(), &grad, lr)?;
    if !state.model.encoder.params().is_finite() || !state.model.head.params().is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    state.batches_done += 1;
    Ok(report)
}

/// Loads the tensors of one batch. Target-labeled samples are augmented;
/// unlabeled samples are skipped entirely when `λ = 0`.
pub fn materialize(
    batch: &TrainingBatch,
    split: &EpisodeSplit,
    store: &mut ImageStore,
    cfg: &TrainConfig,
) -> Result<BatchInputs> {
    let mut inputs = BatchInputs::default();
    for &i in &batch.labeled_source {
        let r = &split.source_labeled[i];
        inputs.labeled.push(store.tensor(&r.path)?);
        inputs.labels.push(r.label.expect("source samples are labeled"));
    }
    for d in &batch.labeled_target {
        let r = &split.target_labeled[d.index];
        inputs
            .labeled
            .push(store.augmented(&r.path, &cfg.augment, d.augment_seed)?);
        inputs.labels.push(r.label.expect("target-labeled samples are labeled"));
    }
    if cfg.lambda != 0.0 {
        for &i in &batch.unlabeled_target {
            inputs.unlabeled.push(store.tensor(&split.target_unlabeled[i].path)?);
        }
    }
    Ok(inputs)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this state (and best-so-far) instead of starting fresh.
    pub resume: Option<Checkpoint>,
    pub resume_best: Option<Checkpoint>,
    /// Stop once this many batches are done, as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation accuracy, earliest batch on ties; the final state
    /// when nothing was validated.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRecord>,
}

fn image_side(split: &EpisodeSplit, store: &mut ImageStore) -> Result<usize> {
    let first = split
        .source_labeled
        .first()
        .ok_or(Error::EmptyBatch("no source samples"))?;
    Ok(store.image(&first.path)?.side())
}

pub fn train_loop(
    cfg: &TrainConfig,
    split: &EpisodeSplit,
    store: &mut ImageStore,
    validator: &mut dyn Validator,
    options: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.shots != cfg.shots {
        return Err(Error::Config(format!(
            "episode has K = {} but the config asks for K = {}",
            split.shots, cfg.shots
        )));
    }
    let side = image_side(split, store)?;
    let mut state = match &options.resume {
        Some(ck) => {
            if ck.config != *cfg || ck.side != side {
                return Err(Error::Checkpoint(
                    "resume checkpoint was written with a different configuration".into(),
                ));
            }
            ck.state.clone()
        }
        None => TrainState::new(cfg.build_model(side)?, cfg),
    };
    let mut sampler = BalancedSampler::new(split, cfg.batch_size, cfg.unlabeled(), cfg.seed)?;
    sampler.fast_forward(state.batches_done);
    let end = options.stop_after.map_or(cfg.batch_budget, |s| s.min(cfg.batch_budget));

    let _sealed = split.hidden.seal();
    let mut best = options.resume_best.clone();
    let mut last_val = None;
    let mut log = Vec::new();
    while state.batches_done < end {
        let b = state.batches_done;
        let batch = sampler.next_batch();
        let inputs = materialize(&batch, split, store, cfg)?;
        let lr = lr_schedule(cfg.lr0, cfg.decay_rate, cfg.decay_power, b);
        let report = train_step(&mut state, cfg, &inputs, lr).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!(
                "{what} at batch {b} (source {:?}, target {:?}, unlabeled {:?})",
                batch.labeled_source,
                batch.labeled_target.iter().map(|d| d.index).collect::<Vec<_>>(),
                batch.unlabeled_target
            )),
            other => other,
        })?;
        let done = b + 1;
        let val_acc = if done % cfg.validation_interval == 0 || done == cfg.batch_budget {
            validator.validate(&state.model)?
        } else {
            None
        };
        log::debug!(
            "batch {b}: lr {lr:.3e} ce {:.4} eu {:.4} val {val_acc:?}",
            report.ce,
            report.eu
        );
        if let Some(acc) = val_acc {
            last_val = Some(acc);
            if best.as_ref().map_or(true, |c| c.val_acc.map_or(true, |v| acc > v)) {
                best = Some(Checkpoint {
                    config: cfg.clone(),
                    side,
                    state: state.clone(),
                    val_acc: Some(acc),
                });
            }
        }
        log.push(LogRecord {
            b,
            lr,
            ce: report.ce,
            eu: report.eu,
            psi_h: report.psi_h,
            psi_c: report.psi_c,
            val_acc,
        });
    }
    let last = Checkpoint {
        config: cfg.clone(),
        side,
        state,
        val_acc: if log.last().is_some_and(|r| r.val_acc.is_some()) {
            last_val
        } else {
            None
        },
    };
    let best = match best {
        Some(b) => b,
        None => {
            log::warn!("no validation accuracy was recorded; keeping the final state");
            last.clone()
        }
    };
    Ok(TrainOutcome { best, last, log })
}

/// [`train_loop`] validating on the episode's validation pool.
pub fn train(cfg: &TrainConfig, split: &EpisodeSplit, store: &mut ImageStore) -> Result<TrainOutcome> {
    let mut validator = SampleValidator::from_records(&split.target_validation, store)?;
    train_loop(cfg, split, store, &mut validator, RunOptions::default())
}
