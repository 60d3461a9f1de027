//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{backward, evaluate_losses, BatchInputs, LossReport};
use crate::error::{Error, Result};
use crate::model::{AnyEncoder, DeskEncoder, DeskEncoderConfig, Encoder, LinearEncoder, ParamSet, PrototypicalHead};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Desk instances are redrawn until every ReLU pre-activation is at least
/// this far from zero, so that `±δ` probes never straddle a kink.
pub const KINK_MARGIN: f64 = 2e-3;
const MAX_DRAWS: u64 = 10_000;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradFailure {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub delta: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Entry with the largest relative error.
    pub worst: Option<String>,
    pub failures: Vec<GradFailure>,
    pub passed: bool,
}

/// Compares every entry of `analytic` against
/// `(L(θ + δ e_i) − L(θ − δ e_i)) / 2δ`.
pub fn grad_check<F>(
    params: &ParamSet,
    analytic: &ParamSet,
    mut loss: F,
    delta: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    params.check_compatible(analytic)?;
    let analytic = analytic.flatten();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        checked: analytic.len(),
        delta,
        tolerance,
        max_rel_error: 0.0,
        worst: None,
        failures: Vec::new(),
        passed: true,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let original = *probe.entry_mut(i).expect("index within numel");
        *probe.entry_mut(i).expect("index within numel") = original + delta;
        let plus = loss(&probe)?;
        *probe.entry_mut(i).expect("index within numel") = original - delta;
        let minus = loss(&probe)?;
        *probe.entry_mut(i).expect("index within numel") = original;
        let numeric = (plus - minus) / (2.0 * delta);
        let err = relative_error(a, numeric);
        let name = params.entry_name(i).expect("index within numel");
        if !(err <= report.max_rel_error) || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(name.clone());
        }
        if !(err < tolerance) {
            report.passed = false;
            report.failures.push(GradFailure {
                name,
                analytic: a,
                numeric,
                rel_error: err,
            });
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    CrossEntropy,
    Entropy,
    PsiH,
    PsiC,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::CrossEntropy,
        Objective::Entropy,
        Objective::PsiH,
        Objective::PsiC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::CrossEntropy => "ce",
            Objective::Entropy => "eu",
            Objective::PsiH => "psi_h",
            Objective::PsiC => "psi_c",
        }
    }

    pub fn value(self, report: &LossReport) -> f64 {
        match self {
            Objective::CrossEntropy => report.ce,
            Objective::Entropy => report.eu,
            Objective::PsiH => report.psi_h,
            Objective::PsiC => report.psi_c,
        }
    }
}

/// A small, fully specified loss evaluation problem.
#[derive(Clone, Debug)]
pub struct Instance {
    pub encoder: AnyEncoder,
    pub head: PrototypicalHead,
    pub inputs: BatchInputs,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceKind {
    /// Narrow desk encoder (`d = 8`) on `3 × side × side` images.
    DeskImage { side: usize },
    /// Linear encoder on raw `dim`-dimensional vectors, `d = dim`.
    RawFeatures { dim: usize },
}

/// Random instance with two source and two target labeled samples, four
/// unlabeled samples and two classes.
pub fn random_instance(kind: InstanceKind, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_DRAWS {
        let candidate = draw_instance(kind, &mut rng)?;
        if let AnyEncoder::Desk(enc) = &candidate.encoder {
            let mut margin = f64::INFINITY;
            for x in candidate.inputs.labeled.iter().chain(&candidate.inputs.unlabeled) {
                margin = margin.min(enc.relu_margin(x)?);
            }
            if margin < KINK_MARGIN {
                continue;
            }
        }
        return Ok(candidate);
    }
    Err(Error::Config(format!(
        "no kink-free instance found in {MAX_DRAWS} draws"
    )))
}

fn draw_instance(kind: InstanceKind, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (encoder, shape) = match kind {
        InstanceKind::DeskImage { side } => {
            let cfg = DeskEncoderConfig {
                in_channels: 3,
                widths: vec![4, 6, 8],
            };
            let mut enc = DeskEncoder::new(cfg, rng.gen())?;
            // Non-zero biases keep the check away from the all-zero corner.
            for p in enc.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
                for b in p.value.data_mut() {
                    *b = rng.gen_range(-0.1..0.1);
                }
            }
            (AnyEncoder::Desk(enc), vec![3, side, side])
        }
        InstanceKind::RawFeatures { dim } => (AnyEncoder::Linear(LinearEncoder::new(dim, dim, rng.gen())?), vec![dim]),
    };
    let d = encoder.feature_dim();
    let normal = Normal::new(0.0, 0.3).expect("positive std");
    let prototypes = (0..2 * d).map(|_| normal.sample(rng)).collect();
    let temperature = [0.05, 0.1, 0.5, 1.0][rng.gen_range(0..4)];
    let head = PrototypicalHead::new(Tensor::new(vec![2, d], prototypes)?, temperature)?;
    let numel: usize = shape.iter().product();
    let sample = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let data = match kind {
            InstanceKind::DeskImage { .. } => (0..numel).map(|_| rng.gen::<f64>()).collect(),
            InstanceKind::RawFeatures { .. } => (0..numel).map(|_| normal.sample(rng) * 3.0).collect(),
        };
        Tensor::new(shape.clone(), data)
    };
    let labeled = (0..4).map(|_| sample(rng)).collect::<Result<Vec<_>>>()?;
    let labels = (0..4).map(|_| rng.gen_range(0..2)).collect();
    let unlabeled = (0..4).map(|_| sample(rng)).collect::<Result<Vec<_>>>()?;
    Ok(Instance {
        encoder,
        head,
        inputs: BatchInputs {
            labeled,
            labels,
            unlabeled,
        },
        lambda: rng.gen_range(0.05..1.0),
    })
}

fn joint_params(encoder: &AnyEncoder, head: &PrototypicalHead) -> ParamSet {
    let mut all = ParamSet::new();
    for p in encoder.params().iter().chain(head.params().iter()) {
        all.push(p.name.clone(), p.value.clone());
    }
    all
}

fn split_params(instance: &Instance, joint: &ParamSet) -> (AnyEncoder, PrototypicalHead) {
    let mut encoder = instance.encoder.clone();
    let mut head = instance.head.clone();
    let mut source = joint.iter();
    for dst in encoder.params_mut().iter_mut().chain(head.params_mut().iter_mut()) {
        let src = source.next().expect("joint set mirrors the instance");
        dst.value.data_mut().copy_from_slice(src.value.data());
    }
    (encoder, head)
}

/// Checks the gradient of `objective` with respect to every encoder and
/// head parameter of the instance.
pub fn check_instance(
    instance: &Instance,
    objective: Objective,
    delta: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(&instance.encoder, &instance.head, &instance.inputs, instance.lambda)?;
    let (enc_grad, head_grad) = grads.for_objective(objective, instance.lambda);
    let mut analytic = ParamSet::new();
    for p in enc_grad.iter().chain(head_grad.iter()) {
        analytic.push(p.name.clone(), p.value.clone());
    }
    let params = joint_params(&instance.encoder, &instance.head);
    grad_check(
        &params,
        &analytic,
        |probe| {
            let (encoder, head) = split_params(instance, probe);
            let report = evaluate_losses(&encoder, &head, &instance.inputs, instance.lambda)?;
            let value = objective.value(&report);
            if value.is_finite() {
                Ok(value)
            } else {
                Err(Error::NonFinite(format!("{} during gradient check", objective.name())))
            }
        },
        delta,
        tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_corruption_is_named() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let loss =
            |p: &ParamSet| -> Result<f64> { Ok(p.get("w").unwrap().data().iter().map(|x| x * x * x / 3.0).sum()) };
        let mut analytic = ParamSet::new();
        analytic.push("w", Tensor::new(vec![3], vec![0.25, 1.0, 4.0]).unwrap());
        let report = grad_check(&params, &analytic, loss, 1e-4, 1e-4).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-6);

        analytic.get_mut("w").unwrap().data_mut()[1] = -1.0;
        let report = grad_check(&params, &analytic, loss, 1e-4, 1e-4).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].name, "w[1]");
        assert_eq!(report.worst.as_deref(), Some("w[1]"));
    }

    #[test]
    fn empty_parameter_set_passes_vacuously() {
        let report = grad_check(&ParamSet::new(), &ParamSet::new(), |_| Ok(1.0), 1e-4, 1e-4).unwrap();
        assert!(report.passed);
        assert_eq!(report.checked, 0);
    }

    #[test]
    fn instances_are_seeded() {
        let a = random_instance(InstanceKind::RawFeatures { dim: 8 }, 3).unwrap();
        let b = random_instance(InstanceKind::RawFeatures { dim: 8 }, 3).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.inputs.labels, b.inputs.labels);
        assert_eq!(a.inputs.labeled.len(), 4);
        assert_eq!(a.inputs.unlabeled.len(), 4);
    }
}
