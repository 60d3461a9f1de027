use std::path::PathBuf;

use mmda_core::datasets::{make_episode, synth_domains, ImageStore, SynthConfig, SynthOutput};
use mmda_core::evaluation::{
    ablation_sweep, accuracy, confusion, evaluate, run_scenarios, AblationParameter, ScenarioSpec,
};
use mmda_core::model::{AnyEncoder, Encoder, LinearEncoder, Model, ParamSet, PrototypicalHead};
use mmda_core::training::{train, TrainConfig};
use mmda_core::Tensor;
use proptest::prelude::*;
use tempfile::TempDir;

fn corpus(cfg: SynthConfig, seed: u64) -> (TempDir, SynthOutput) {
    let dir = tempfile::tempdir().unwrap();
    let out = synth_domains(&cfg, seed, dir.path()).unwrap();
    (dir, out)
}

fn tiny() -> SynthConfig {
    SynthConfig {
        per_class: 12,
        side: 8,
        ..Default::default()
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        widths: vec![4, 8],
        batch_budget: 10,
        validation_interval: 5,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn accuracy_is_the_fraction_of_matches(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..10_000),
        positive in 0usize..4,
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&preds, &labels, positive).unwrap();
        prop_assert_eq!(cm.total() as usize, pairs.len());
        let hits = pairs.iter().filter(|(p, y)| p == y).count();
        prop_assert_eq!(accuracy(&cm).unwrap(), hits as f64 / pairs.len() as f64);
    }
}

/// Constant features pointing at the first prototype.
fn always_first_class(input_len: usize) -> Model {
    let mut params = ParamSet::new();
    params.push("linear.weight", Tensor::zeros(vec![2, input_len]));
    params.push("linear.bias", Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    let encoder = LinearEncoder::from_params(input_len, 2, params).unwrap();
    let head = PrototypicalHead::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 0.05).unwrap();
    Model::new(AnyEncoder::Linear(encoder), head).unwrap()
}

#[test]
fn constant_model_scores_half_on_a_balanced_set() {
    let (_dir, out) = corpus(tiny(), 1);
    let mut store = ImageStore::new(3);
    let model = always_first_class(3 * 8 * 8);
    let e = evaluate(&model, &out.target, &mut store).unwrap();
    assert_eq!(e.accuracy, 0.5);
    assert_eq!(
        (e.confusion.tp, e.confusion.fp, e.confusion.tn, e.confusion.fn_),
        (12, 12, 0, 0)
    );
}

#[test]
fn evaluation_is_deterministic_and_read_only() {
    let (_dir, out) = corpus(tiny(), 2);
    let cfg = quick_cfg();
    let split = make_episode(&out.source, &out.target, 3, 2, 0).unwrap();
    let mut store = ImageStore::new(3);
    let model = train(&cfg, &split, &mut store).unwrap().best.state.model;
    let bits = |m: &Model| {
        let mut v: Vec<u64> = m.encoder.params().flatten().iter().map(|x| x.to_bits()).collect();
        v.extend(m.head.params().flatten().iter().map(|x| x.to_bits()));
        v
    };
    let before = bits(&model);
    let a = evaluate(&model, &out.target, &mut store).unwrap();
    let b = evaluate(&model, &out.target, &mut store).unwrap();
    assert_eq!(a, b);
    assert_eq!(bits(&model), before);
}

#[test]
fn unreadable_image_is_named() {
    let (_dir, out) = corpus(tiny(), 3);
    let mut records = out.target.clone();
    records[0].path = PathBuf::from("/nonexistent/missing.png");
    let mut store = ImageStore::new(3);
    let err = evaluate(&always_first_class(192), &records, &mut store).unwrap_err();
    assert!(err.to_string().contains("missing.png"), "{err}");
}

#[test]
fn desk_encoder_learns_the_task_in_domain() {
    // Without a shift the target domain is a held-out draw of the source.
    let (_dir, out) = corpus(
        SynthConfig {
            shift: 0.0,
            ..Default::default()
        },
        21,
    );
    let mut store = ImageStore::new(3);
    let mut total = 0.0;
    for seed in 0..5 {
        let cfg = TrainConfig {
            shots: 0,
            lambda: 0.0,
            seed,
            ..Default::default()
        };
        let split = make_episode(&out.source, &out.target, 0, 2, seed).unwrap();
        let model = train(&cfg, &split, &mut store).unwrap().best.state.model;
        total += evaluate(&model, &out.target, &mut store).unwrap().accuracy;
    }
    let mean = total / 5.0;
    assert!(mean >= 0.95, "in-domain accuracy {mean}");
}

fn specs(out: &SynthOutput, n: usize, shots: Vec<usize>) -> Vec<ScenarioSpec> {
    (0..n)
        .map(|i| ScenarioSpec {
            shots: shots.clone(),
            repeats: 1,
            ..ScenarioSpec::new(format!("s{i}"), &out.source_manifest, &out.target_manifest)
        })
        .collect()
}

#[test]
fn one_scenario_one_shot_gives_one_cell_each() {
    let (_dir, out) = corpus(tiny(), 4);
    let report = run_scenarios(&specs(&out, 1, vec![3]), &quick_cfg()).unwrap();
    assert_eq!(report.da_cells(), 1);
    assert_eq!(report.baseline_cells(), 1);
    let row = &report.rows[0];
    assert_eq!(row.cells[0].seeds, vec![0]);
    assert_eq!(row.cells[0].accuracies.len(), 1);
    assert_eq!(row.baseline.shots, None);
    assert!(!row.baseline.failed() && !row.cells[0].failed());
}

#[test]
fn four_scenarios_give_twelve_cells_and_repeat_exactly() {
    let (_dir, out) = corpus(
        SynthConfig {
            per_class: 22,
            ..tiny()
        },
        5,
    );
    let cfg = TrainConfig {
        batch_budget: 2,
        ..quick_cfg()
    };
    let s = specs(&out, 4, vec![3, 5, 10]);
    let report = run_scenarios(&s, &cfg).unwrap();
    assert_eq!(report.da_cells(), 12);
    assert_eq!(report.baseline_cells(), 4);
    assert!(report.rows.iter().flat_map(|r| &r.cells).all(|c| !c.failed()));
    assert_eq!(report.reference.len(), 4);
    assert_eq!(report.reference[0].k3, 62.22);
    let table = report.table();
    assert_eq!(table.lines().filter(|l| l.starts_with('s')).count(), 5);
    assert!(table.contains("K=10"));
    assert_eq!(run_scenarios(&s, &cfg).unwrap(), report);
}

#[test]
fn short_class_fails_its_cell_only() {
    let (_dir, out) = corpus(
        SynthConfig {
            per_class: 8,
            side: 8,
            ..Default::default()
        },
        6,
    );
    let report = run_scenarios(&specs(&out, 1, vec![3, 5]), &quick_cfg()).unwrap();
    let cells = &report.rows[0].cells;
    assert!(!cells[0].failed());
    assert!(cells[1].failed(), "K = 5 needs 10 target samples per class");
    assert!(cells[1].error.as_deref().unwrap().contains("seed 0"));
}

#[test]
fn sweep_emits_one_point_per_value() {
    let (_dir, out) = corpus(tiny(), 7);
    let cfg = TrainConfig {
        batch_budget: 2,
        ..quick_cfg()
    };
    let split = make_episode(&out.source, &out.target, 3, 2, 0).unwrap();
    let mut store = ImageStore::new(3);
    let one = ablation_sweep(AblationParameter::Lambda, &[0.1], &cfg, &split, &mut store).unwrap();
    assert_eq!(one.points.len(), 1);
    assert_eq!(one.best, Some(0.1));
    let grid = [0.001, 0.005, 0.01, 0.1, 0.2, 0.5, 1.0];
    let curve = ablation_sweep(AblationParameter::Lambda, &grid, &cfg, &split, &mut store).unwrap();
    let values: Vec<f64> = curve.points.iter().map(|p| p.value).collect();
    assert_eq!(values, grid);
    assert!(curve.points.iter().all(|p| p.accuracy.is_some()));
    let taus = ablation_sweep(AblationParameter::Temperature, &[0.05, 1.0], &cfg, &split, &mut store).unwrap();
    assert_eq!(taus.points.len(), 2);
    assert!(ablation_sweep(AblationParameter::Lambda, &[], &cfg, &split, &mut store).is_err());
}

#[test]
fn entropy_weight_helps_on_the_shifted_task() {
    let (_dir, out) = corpus(SynthConfig::default(), 7);
    let mut store = ImageStore::new(3);
    // A subset of the grid suffices: the maximum over it bounds the full
    // grid's maximum from below.
    let values = [0.0, 0.01, 0.1, 1.0];
    let mut means = [0.0; 4];
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let split = make_episode(&out.source, &out.target, 3, 2, seed).unwrap();
        let curve = ablation_sweep(AblationParameter::Lambda, &values, &cfg, &split, &mut store).unwrap();
        for (m, p) in means.iter_mut().zip(&curve.points) {
            *m += p.accuracy.unwrap() / 5.0;
        }
    }
    let best_positive = means[1..].iter().cloned().fold(f64::MIN, f64::max);
    assert!(means[0] <= best_positive, "lambda sweep means {means:?}");
}
