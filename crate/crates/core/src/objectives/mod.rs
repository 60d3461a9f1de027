//! Loss functions and their gradients.
//!
//! Two scalar losses drive training: the cross-entropy `L_ce` over the
//! labeled source and target samples, and the mean prediction entropy `E_u`
//! over the unlabeled target samples. They are combined into
//!
//! ```text
//! ψ_H = L_ce + λ·E_u    (minimized by the encoder, head frozen)
//! ψ_C = L_ce − λ·E_u    (minimized by the head, encoder frozen)
//! ```
//!
//! so the head pushes the entropy up while the encoder pulls it down.

mod gradcheck;

pub use gradcheck::{
    check_instance, grad_check, random_instance, relative_error, GradCheckReport, GradFailure, Instance, InstanceKind,
    Objective, REL_ERROR_FLOOR,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, HeadForward, ParamSet, PrototypicalHead};
use crate::tensor::Tensor;

/// Lower bound applied to the true-class probability inside the logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

/// `−(1/N) Σ ln max(p_i[y_i], 1e−12)`.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch("cross-entropy needs at least one labeled sample"));
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let p = *row
            .get(y)
            .ok_or_else(|| Error::Shape(format!("label {y} out of range for {} classes", row.len())))?;
        total -= p.max(PROB_CLAMP).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Shannon entropy of one row in nats, with `0 · ln 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Mean entropy of the predicted distributions.
pub fn unlabeled_entropy(probs: &[Vec<f64>]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch("entropy needs at least one unlabeled sample"));
    }
    Ok(probs.iter().map(|r| row_entropy(r)).sum::<f64>() / probs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub eu: f64,
    pub psi_h: f64,
    pub psi_c: f64,
    pub lambda: f64,
}

pub fn combined_losses(ce: f64, eu: f64, lambda: f64) -> LossReport {
    let weighted = lambda * eu;
    LossReport {
        ce,
        eu,
        psi_h: ce + weighted,
        psi_c: ce - weighted,
        lambda,
    }
}

/// `∂(−ln p_y)/∂z = p − onehot(y)`, zero where the clamp is active.
fn cross_entropy_logit_grad(probs: &[f64], label: usize, scale: f64) -> Vec<f64> {
    if probs[label] < PROB_CLAMP {
        return vec![0.0; probs.len()];
    }
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| scale * (p - if k == label { 1.0 } else { 0.0 }))
        .collect()
}

/// `∂H/∂z_j = −p_j (ln p_j + H)`.
fn entropy_logit_grad(probs: &[f64], scale: f64) -> Vec<f64> {
    let h = row_entropy(probs);
    probs
        .iter()
        .map(|&p| if p > 0.0 { -scale * p * (p.ln() + h) } else { 0.0 })
        .collect()
}

/// Inputs of one optimization step.
#[derive(Clone, Debug, Default)]
pub struct BatchInputs {
    pub labeled: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub unlabeled: Vec<Tensor>,
}

/// Encoder outputs for a batch, kept so the head can be updated and
/// re-evaluated without another encoder pass.
pub struct EncodedBatch<C> {
    pub labeled: Vec<(Vec<f64>, C)>,
    pub labels: Vec<usize>,
    pub unlabeled: Vec<(Vec<f64>, C)>,
}

pub fn encode_batch<E: Encoder>(encoder: &E, inputs: &BatchInputs) -> Result<EncodedBatch<E::Cache>> {
    if inputs.labeled.len() != inputs.labels.len() {
        return Err(Error::Shape(format!(
            "{} labeled inputs for {} labels",
            inputs.labeled.len(),
            inputs.labels.len()
        )));
    }
    if inputs.labeled.is_empty() && inputs.unlabeled.is_empty() {
        return Err(Error::EmptyBatch("batch has neither labeled nor unlabeled samples"));
    }
    let encode = |xs: &[Tensor], what: &str| -> Result<Vec<(Vec<f64>, E::Cache)>> {
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let out = encoder.forward(x)?;
                if out.0.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("features of {what} sample {i}")));
                }
                Ok(out)
            })
            .collect()
    };
    Ok(EncodedBatch {
        labeled: encode(&inputs.labeled, "labeled")?,
        labels: inputs.labels.clone(),
        unlabeled: encode(&inputs.unlabeled, "unlabeled")?,
    })
}

/// Losses and head-side gradients for an encoded batch.
pub struct HeadGradients {
    pub report: LossReport,
    pub head_ce: ParamSet,
    pub head_eu: ParamSet,
    /// `∂L_ce/∂f` for each labeled sample.
    pub feature_ce: Vec<Vec<f64>>,
    /// `∂E_u/∂f` for each unlabeled sample.
    pub feature_eu: Vec<Vec<f64>>,
}

impl HeadGradients {
    /// `∂ψ_C/∂W = ∂L_ce/∂W − λ ∂E_u/∂W`.
    pub fn head_psi_c(&self) -> ParamSet {
        let mut g = self.head_ce.clone();
        g.add_scaled(&self.head_eu, -self.report.lambda);
        g
    }
}

/// Evaluates the head on cached features. An empty labeled part contributes
/// `L_ce = 0`, an empty unlabeled part `E_u = 0`.
pub fn head_gradients<C>(head: &PrototypicalHead, batch: &EncodedBatch<C>, lambda: f64) -> Result<HeadGradients> {
    let forward = |items: &[(Vec<f64>, C)], what: &str| -> Result<Vec<HeadForward>> {
        items
            .iter()
            .enumerate()
            .map(|(i, (f, _))| {
                let out = head.forward_cached(f)?;
                if out.probs.iter().any(|p| !p.is_finite()) {
                    return Err(Error::NonFinite(format!("probabilities of {what} sample {i}")));
                }
                Ok(out)
            })
            .collect()
    };
    let labeled = forward(&batch.labeled, "labeled")?;
    let unlabeled = forward(&batch.unlabeled, "unlabeled")?;

    let ce = if labeled.is_empty() {
        0.0
    } else {
        let probs: Vec<Vec<f64>> = labeled.iter().map(|h| h.probs.clone()).collect();
        cross_entropy(&probs, &batch.labels)?
    };
    let eu = if unlabeled.is_empty() {
        0.0
    } else {
        let probs: Vec<Vec<f64>> = unlabeled.iter().map(|h| h.probs.clone()).collect();
        unlabeled_entropy(&probs)?
    };

    let mut head_ce = head.params().zeros_like();
    let mut head_eu = head.params().zeros_like();
    let n_l = labeled.len().max(1) as f64;
    let n_u = unlabeled.len().max(1) as f64;
    let mut feature_ce = Vec::with_capacity(labeled.len());
    for ((cache, (f, _)), &y) in labeled.iter().zip(&batch.labeled).zip(&batch.labels) {
        let gz = cross_entropy_logit_grad(&cache.probs, y, 1.0 / n_l);
        feature_ce.push(head.backward(f, cache, &gz, Some(head_ce.data_mut(0))));
    }
    let mut feature_eu = Vec::with_capacity(unlabeled.len());
    for (cache, (f, _)) in unlabeled.iter().zip(&batch.unlabeled) {
        let gz = entropy_logit_grad(&cache.probs, 1.0 / n_u);
        feature_eu.push(head.backward(f, cache, &gz, Some(head_eu.data_mut(0))));
    }
    if !head_ce.is_finite() || !head_eu.is_finite() {
        return Err(Error::NonFinite("head gradients".into()));
    }
    Ok(HeadGradients {
        report: combined_losses(ce, eu, lambda),
        head_ce,
        head_eu,
        feature_ce,
        feature_eu,
    })
}

/// Back-propagates per-sample feature gradients through the encoder,
/// weighting the unlabeled ones by `unlabeled_weight`.
pub fn encoder_gradients<E: Encoder>(
    encoder: &E,
    batch: &EncodedBatch<E::Cache>,
    feature_ce: &[Vec<f64>],
    feature_eu: &[Vec<f64>],
    unlabeled_weight: f64,
) -> Result<(ParamSet, ParamSet)> {
    let mut grad_ce = encoder.params().zeros_like();
    let mut grad_eu = encoder.params().zeros_like();
    for ((_, cache), g) in batch.labeled.iter().zip(feature_ce) {
        encoder.backward(cache, g, &mut grad_ce)?;
    }
    for ((_, cache), g) in batch.unlabeled.iter().zip(feature_eu) {
        let scaled: Vec<f64> = g.iter().map(|v| v * unlabeled_weight).collect();
        encoder.backward(cache, &scaled, &mut grad_eu)?;
    }
    if !grad_ce.is_finite() || !grad_eu.is_finite() {
        return Err(Error::NonFinite("encoder gradients".into()));
    }
    Ok((grad_ce, grad_eu))
}

/// Gradients of both losses with respect to both parameter groups, all
/// taken at the same parameters from one forward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub encoder_ce: ParamSet,
    pub encoder_eu: ParamSet,
    pub head_ce: ParamSet,
    pub head_eu: ParamSet,
}

impl Gradients {
    /// `(∂/∂θ_F, ∂/∂W)` of the requested objective.
    pub fn for_objective(&self, objective: Objective, lambda: f64) -> (ParamSet, ParamSet) {
        let (wc, we) = match objective {
            Objective::CrossEntropy => (1.0, 0.0),
            Objective::Entropy => (0.0, 1.0),
            Objective::PsiH => (1.0, lambda),
            Objective::PsiC => (1.0, -lambda),
        };
        let combine = |ce: &ParamSet, eu: &ParamSet| {
            let mut g = ce.clone();
            g.scale(wc);
            g.add_scaled(eu, we);
            g
        };
        (
            combine(&self.encoder_ce, &self.encoder_eu),
            combine(&self.head_ce, &self.head_eu),
        )
    }

    /// Encoder update direction source: `∂ψ_H/∂θ_F` with the head held fixed.
    pub fn encoder_psi_h(&self, lambda: f64) -> ParamSet {
        self.for_objective(Objective::PsiH, lambda).0
    }

    /// Head update direction source: `∂ψ_C/∂W` with the encoder held fixed.
    pub fn head_psi_c(&self, lambda: f64) -> ParamSet {
        self.for_objective(Objective::PsiC, lambda).1
    }
}

/// One forward pass and the full set of gradients.
pub fn backward<E: Encoder>(
    encoder: &E,
    head: &PrototypicalHead,
    inputs: &BatchInputs,
    lambda: f64,
) -> Result<(LossReport, Gradients)> {
    let batch = encode_batch(encoder, inputs)?;
    let hg = head_gradients(head, &batch, lambda)?;
    let (encoder_ce, encoder_eu) = encoder_gradients(encoder, &batch, &hg.feature_ce, &hg.feature_eu, 1.0)?;
    Ok((
        hg.report,
        Gradients {
            encoder_ce,
            encoder_eu,
            head_ce: hg.head_ce,
            head_eu: hg.head_eu,
        },
    ))
}

/// Loss values only.
pub fn evaluate_losses<E: Encoder>(
    encoder: &E,
    head: &PrototypicalHead,
    inputs: &BatchInputs,
    lambda: f64,
) -> Result<LossReport> {
    let batch = encode_batch(encoder, inputs)?;
    let probs = |items: &[(Vec<f64>, E::Cache)]| -> Result<Vec<Vec<f64>>> {
        items.iter().map(|(f, _)| head.forward(f)).collect()
    };
    let labeled = probs(&batch.labeled)?;
    let unlabeled = probs(&batch.unlabeled)?;
    let ce = if labeled.is_empty() {
        0.0
    } else {
        cross_entropy(&labeled, &batch.labels)?
    };
    let eu = if unlabeled.is_empty() {
        0.0
    } else {
        unlabeled_entropy(&unlabeled)?
    };
    Ok(combined_losses(ce, eu, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearEncoder;

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[vec![1.0, 0.0]], &[0]).unwrap(), 0.0);
        let uniform = cross_entropy(&[vec![0.5, 0.5]], &[1]).unwrap();
        assert!((uniform - std::f64::consts::LN_2).abs() < 1e-15);
        // -ln 0.1 = ln 10
        let miss = cross_entropy(&[vec![0.9, 0.1]], &[1]).unwrap();
        assert!((miss - 10f64.ln()).abs() < 1e-12);
        assert!((miss - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let v = cross_entropy(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_errors() {
        assert!(matches!(cross_entropy(&[], &[]), Err(Error::EmptyBatch(_))));
        assert!(matches!(
            cross_entropy(&[vec![0.5, 0.5]], &[0, 1]),
            Err(Error::Shape(_))
        ));
        assert!(cross_entropy(&[vec![0.5, 0.5]], &[2]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let h = unlabeled_entropy(&[vec![0.5, 0.5]]).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(unlabeled_entropy(&[vec![1.0, 0.0]]).unwrap(), 0.0);
        let skew = unlabeled_entropy(&[vec![0.9, 0.1]]).unwrap();
        let oracle = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((skew - oracle).abs() < 1e-15);
        assert!((skew - 0.3251).abs() < 1e-4);
        assert!(unlabeled_entropy(&[]).is_err());
    }

    #[test]
    fn combined_examples() {
        let r = combined_losses(0.7, 0.4, 0.0);
        assert_eq!((r.psi_h, r.psi_c), (0.7, 0.7));
        let r = combined_losses(0.5, 0.6931, 0.1);
        assert!((r.psi_h - 0.56931).abs() < 1e-12);
        assert!((r.psi_c - 0.43069).abs() < 1e-12);
        let r = combined_losses(0.5, 0.0, 0.3);
        assert_eq!(r.psi_h, r.psi_c);
    }

    fn tiny_batch() -> (LinearEncoder, PrototypicalHead, BatchInputs) {
        let enc = LinearEncoder::new(3, 4, 1).unwrap();
        let head = PrototypicalHead::init(4, 2, 0.5, 2).unwrap();
        let x = |v: [f64; 3]| Tensor::new(vec![3], v.to_vec()).unwrap();
        let inputs = BatchInputs {
            labeled: vec![x([0.1, 0.5, -0.3]), x([1.0, -0.2, 0.4])],
            labels: vec![0, 1],
            unlabeled: vec![x([0.3, 0.3, 0.9]), x([-0.7, 0.1, 0.2])],
        };
        (enc, head, inputs)
    }

    #[test]
    fn zero_lambda_head_gradient_is_cross_entropy_gradient() {
        let (enc, head, inputs) = tiny_batch();
        let (_, grads) = backward(&enc, &head, &inputs, 0.0).unwrap();
        assert_eq!(grads.head_psi_c(0.0), grads.head_ce);
    }

    #[test]
    fn entropy_gradient_vanishes_at_uniform_predictions() {
        let (enc, _, inputs) = tiny_batch();
        let rows = vec![0.2, -0.1, 0.05, 0.3, 0.2, -0.1, 0.05, 0.3];
        let head = PrototypicalHead::new(Tensor::new(vec![2, 4], rows).unwrap(), 0.05).unwrap();
        let (report, grads) = backward(&enc, &head, &inputs, 1.0).unwrap();
        assert!((report.eu - std::f64::consts::LN_2).abs() < 1e-15);
        let max = grads.head_eu.flatten().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 1e-6, "max |dE_u/dW| = {max}");
    }

    #[test]
    fn non_finite_input_is_reported() {
        let (enc, head, mut inputs) = tiny_batch();
        inputs.unlabeled[1] = Tensor::new(vec![3], vec![f64::NAN, 0.0, 0.0]).unwrap();
        match backward(&enc, &head, &inputs, 0.1) {
            Err(Error::NonFinite(what)) => assert!(what.contains("unlabeled sample 1"), "{what}"),
            other => panic!("expected non-finite error, got {:?}", other.map(|r| r.0)),
        }
    }
}
