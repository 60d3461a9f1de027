use mmda_core::datasets::{
    make_episode, synth_domains, BalancedSampler, EpisodeSplit, ImageStore, SynthConfig, SynthOutput,
};
use mmda_core::model::{Encoder, Model, ParamSet};
use mmda_core::objectives::{backward, encode_batch, encoder_gradients, evaluate_losses, head_gradients, BatchInputs};
use mmda_core::training::{
    lr_schedule, materialize, train, train_loop, train_step, Checkpoint, RunOptions, SampleValidator, TrainConfig,
    TrainState, Validator,
};
use mmda_core::Result;
use tempfile::TempDir;

fn corpus(per_class: usize, side: usize, seed: u64) -> (TempDir, SynthOutput) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        per_class,
        side,
        ..Default::default()
    };
    let out = synth_domains(&cfg, seed, dir.path()).unwrap();
    (dir, out)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        widths: vec![4, 8],
        batch_budget: 30,
        validation_interval: 5,
        lr0: 1e-3,
        ..Default::default()
    }
}

fn episode(out: &SynthOutput, cfg: &TrainConfig) -> EpisodeSplit {
    make_episode(&out.source, &out.target, cfg.shots, cfg.num_classes, cfg.seed).unwrap()
}

/// Plain Adam, written out independently of the crate's optimizer.
struct RefAdam {
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl RefAdam {
    fn new(n: usize) -> Self {
        RefAdam {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, lr: f64) {
        self.t += 1;
        let g = grad.flatten();
        for (k, gk) in g.iter().enumerate() {
            self.m[k] = 0.9 * self.m[k] + (1.0 - 0.9) * gk;
            self.v[k] = 0.999 * self.v[k] + (1.0 - 0.999) * gk * gk;
            let mh = self.m[k] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[k] / (1.0 - 0.999f64.powi(self.t));
            *params.entry_mut(k).unwrap() -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

#[test]
fn zero_lambda_reduces_to_supervised_training() {
    let (_dir, out) = corpus(12, 16, 1);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..small_cfg()
    };
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let outcome = train(&cfg, &split, &mut store).unwrap();

    let mut model = cfg.build_model(16).unwrap();
    let mut head_opt = RefAdam::new(model.head.params().numel());
    let mut enc_opt = RefAdam::new(model.encoder.params().numel());
    let sampler = BalancedSampler::new(&split, cfg.batch_size, cfg.unlabeled(), cfg.seed).unwrap();
    for batch in sampler.take(cfg.batch_budget as usize) {
        let mut inputs = BatchInputs::default();
        for &i in &batch.labeled_source {
            let r = &split.source_labeled[i];
            inputs.labeled.push(store.tensor(&r.path).unwrap());
            inputs.labels.push(r.label.unwrap());
        }
        for d in &batch.labeled_target {
            let r = &split.target_labeled[d.index];
            inputs
                .labeled
                .push(store.augmented(&r.path, &cfg.augment, d.augment_seed).unwrap());
            inputs.labels.push(r.label.unwrap());
        }
        let lr = lr_schedule(cfg.lr0, cfg.decay_rate, cfg.decay_power, batch.index);
        let (_, g) = backward(&model.encoder, &model.head, &inputs, 0.0).unwrap();
        head_opt.step(model.head.params_mut(), &g.head_ce, lr);
        let (_, g) = backward(&model.encoder, &model.head, &inputs, 0.0).unwrap();
        enc_opt.step(model.encoder.params_mut(), &g.encoder_ce, lr);
    }
    let trained = &outcome.last.state.model;
    assert_eq!(trained.head.params().flatten(), model.head.params().flatten());
    assert_eq!(trained.encoder.params().flatten(), model.encoder.params().flatten());
}

fn first_batch(cfg: &TrainConfig, split: &EpisodeSplit, store: &mut ImageStore) -> BatchInputs {
    let mut sampler = BalancedSampler::new(split, cfg.batch_size, cfg.unlabeled(), cfg.seed).unwrap();
    materialize(&sampler.next_batch(), split, store, cfg).unwrap()
}

#[test]
fn head_step_descends_on_its_objective() {
    let (_dir, out) = corpus(12, 16, 2);
    let cfg = small_cfg();
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let inputs = first_batch(&cfg, &split, &mut store);
    let mut state = TrainState::new(cfg.build_model(16).unwrap(), &cfg);
    let before = state.model.clone();
    let report = train_step(&mut state, &cfg, &inputs, 1e-6).unwrap();
    let after = evaluate_losses(&before.encoder, &state.model.head, &inputs, cfg.lambda).unwrap();
    assert!(after.psi_c <= report.psi_c, "{} > {}", after.psi_c, report.psi_c);
    assert!(after.psi_c < report.psi_c);
}

#[test]
fn each_step_touches_only_its_group_in_order() {
    let (_dir, out) = corpus(12, 16, 3);
    let cfg = small_cfg();
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let inputs = first_batch(&cfg, &split, &mut store);
    let lr = 1e-3;
    let start = TrainState::new(cfg.build_model(16).unwrap(), &cfg);

    // Head step alone, taken at the initial encoder.
    let encoded = encode_batch(&start.model.encoder, &inputs).unwrap();
    let hg = head_gradients(&start.model.head, &encoded, cfg.lambda).unwrap();
    let mut head = start.model.head.clone();
    let mut head_opt = RefAdam::new(head.params().numel());
    head_opt.step(head.params_mut(), &hg.head_psi_c(), lr);

    // Encoder step alone, against the updated head and the initial encoder.
    let hg = head_gradients(&head, &encoded, cfg.lambda).unwrap();
    let (mut grad, grad_eu) =
        encoder_gradients(&start.model.encoder, &encoded, &hg.feature_ce, &hg.feature_eu, 1.0).unwrap();
    grad.add_scaled(&grad_eu, cfg.lambda);
    let mut encoder = start.model.encoder.clone();
    let mut enc_opt = RefAdam::new(encoder.params().numel());
    enc_opt.step(encoder.params_mut(), &grad, lr);

    let mut state = start.clone();
    train_step(&mut state, &cfg, &inputs, lr).unwrap();
    let bits = |p: &ParamSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(state.model.head.params()), bits(head.params()));
    assert_eq!(bits(state.model.encoder.params()), bits(encoder.params()));
    assert_eq!(
        (state.head_opt.steps, state.encoder_opt.steps, state.batches_done),
        (1, 1, 1)
    );

    // Encoder first would have seen the initial head.
    let hg0 = head_gradients(&start.model.head, &encoded, cfg.lambda).unwrap();
    let (mut swapped, eu0) =
        encoder_gradients(&start.model.encoder, &encoded, &hg0.feature_ce, &hg0.feature_eu, 1.0).unwrap();
    swapped.add_scaled(&eu0, cfg.lambda);
    assert_ne!(swapped.flatten(), grad.flatten());
}

#[test]
fn default_run_logs_schedule_and_validations() {
    let (_dir, out) = corpus(100, 32, 4);
    let cfg = TrainConfig::default();
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let outcome = train(&cfg, &split, &mut store).unwrap();
    assert_eq!(outcome.log.len(), 400);
    assert_eq!(outcome.last.state.batches_done, 400);
    let vals: Vec<f64> = outcome.log.iter().filter_map(|r| r.val_acc).collect();
    assert_eq!(vals.len(), 40);
    for (i, r) in outcome.log.iter().enumerate() {
        assert_eq!(r.b, i as u64);
        assert!((r.lr - 1e-4 * (1.0 + 0.001 * i as f64).powf(-0.75)).abs() <= 1e-12);
        assert_eq!(r.val_acc.is_some(), (i + 1) % 10 == 0);
        assert!((r.psi_h - r.psi_c - 2.0 * 0.1 * r.eu).abs() <= 4.0 * f64::EPSILON * r.psi_h.abs().max(1.0));
    }
    let best = outcome.best.val_acc.unwrap();
    assert!(vals.iter().all(|&v| best >= v));
    let first_best = outcome.log.iter().find(|r| r.val_acc == Some(best)).unwrap();
    assert_eq!(outcome.best.state.batches_done, first_best.b + 1);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    outcome.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, outcome.best);
    let mut validator = SampleValidator::from_records(&split.target_validation, &mut store).unwrap();
    assert_eq!(validator.validate(&loaded.state.model).unwrap(), loaded.val_acc);
}

#[test]
fn single_batch_budget_takes_one_step() {
    let (_dir, out) = corpus(8, 8, 5);
    let cfg = TrainConfig {
        batch_budget: 1,
        ..small_cfg()
    };
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let outcome = train(&cfg, &split, &mut store).unwrap();
    assert_eq!(outcome.log.len(), 1);
    assert!(outcome.log[0].val_acc.is_some());
    assert_eq!(outcome.best.state.batches_done, 1);
    assert_eq!(outcome.best.state.head_opt.steps, 1);
    assert_eq!(outcome.best.state.encoder_opt.steps, 1);
}

/// Reports a fixed sequence of accuracies.
struct Scripted(Vec<f64>);

impl Validator for Scripted {
    fn validate(&mut self, _: &Model) -> Result<Option<f64>> {
        Ok(Some(self.0.remove(0)))
    }
}

#[test]
fn best_checkpoint_follows_validation_argmax() {
    let (_dir, out) = corpus(8, 8, 6);
    let cfg = small_cfg();
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);

    let rising = (1..=6).map(|i| i as f64 / 10.0).collect();
    let outcome = train_loop(&cfg, &split, &mut store, &mut Scripted(rising), RunOptions::default()).unwrap();
    assert_eq!(outcome.best.state.batches_done, 30);
    assert_eq!(
        outcome.best,
        Checkpoint {
            val_acc: Some(0.6),
            ..outcome.last.clone()
        }
    );

    let tied = vec![0.2, 0.5, 0.5, 0.1, 0.5, 0.3];
    let outcome = train_loop(&cfg, &split, &mut store, &mut Scripted(tied), RunOptions::default()).unwrap();
    assert_eq!(outcome.best.state.batches_done, 10);
    assert_eq!(outcome.best.val_acc, Some(0.5));
}

#[test]
fn no_validation_pool_keeps_the_final_state() {
    let (_dir, out) = corpus(8, 8, 7);
    let cfg = TrainConfig {
        shots: 0,
        ..small_cfg()
    };
    let split = episode(&out, &cfg);
    assert!(split.target_validation.is_empty());
    let mut store = ImageStore::new(cfg.channels);
    let outcome = train(&cfg, &split, &mut store).unwrap();
    assert_eq!(outcome.best, outcome.last);
    assert_eq!(outcome.best.val_acc, None);
    assert!(outcome.log.iter().all(|r| r.val_acc.is_none()));
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let (_dir, out) = corpus(10, 16, 8);
    let cfg = small_cfg();
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let a = train(&cfg, &split, &mut store).unwrap();
    let mut fresh = ImageStore::new(cfg.channels);
    let b = train(&cfg, &episode(&out, &cfg), &mut fresh).unwrap();
    assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    let other = TrainConfig { seed: 1, ..cfg };
    let c = train(&other, &episode(&out, &other), &mut store).unwrap();
    assert_ne!(a.last.state.model, c.last.state.model);
}

#[test]
fn resuming_at_two_hundred_matches_an_uninterrupted_run() {
    let (_dir, out) = corpus(10, 8, 9);
    let cfg = TrainConfig {
        batch_budget: 400,
        validation_interval: 10,
        ..small_cfg()
    };
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let full = train(&cfg, &split, &mut store).unwrap();

    let mut validator = SampleValidator::from_records(&split.target_validation, &mut store).unwrap();
    let options = RunOptions {
        stop_after: Some(200),
        ..Default::default()
    };
    let first = train_loop(&cfg, &split, &mut store, &mut validator, options).unwrap();
    assert_eq!(first.last.state.batches_done, 200);
    let dir = tempfile::tempdir().unwrap();
    first.last.save(&dir.path().join("last.ckpt")).unwrap();
    first.best.save(&dir.path().join("best.ckpt")).unwrap();

    let options = RunOptions {
        resume: Some(Checkpoint::load(&dir.path().join("last.ckpt")).unwrap()),
        resume_best: Some(Checkpoint::load(&dir.path().join("best.ckpt")).unwrap()),
        stop_after: None,
    };
    let mut fresh_store = ImageStore::new(cfg.channels);
    let mut validator = SampleValidator::from_records(&split.target_validation, &mut fresh_store).unwrap();
    let second = train_loop(&cfg, &split, &mut fresh_store, &mut validator, options).unwrap();
    assert_eq!(second.last.to_bytes().unwrap(), full.last.to_bytes().unwrap());
    assert_eq!(second.best.to_bytes().unwrap(), full.best.to_bytes().unwrap());
    let stitched: Vec<_> = first.log.iter().chain(&second.log).cloned().collect();
    assert_eq!(stitched, full.log);
}

#[test]
fn resume_rejects_a_different_config() {
    let (_dir, out) = corpus(8, 8, 10);
    let cfg = TrainConfig {
        batch_budget: 4,
        ..small_cfg()
    };
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let done = train(&cfg, &split, &mut store).unwrap();
    let other = TrainConfig { lambda: 0.5, ..cfg };
    let mut validator = SampleValidator::from_records(&split.target_validation, &mut store).unwrap();
    let options = RunOptions {
        resume: Some(done.last),
        ..Default::default()
    };
    assert!(train_loop(&other, &split, &mut store, &mut validator, options).is_err());
}

/// Tries to read the unlabeled-pool labels at every validation.
struct Snoop<'a> {
    split: &'a EpisodeSplit,
    attempts: usize,
}

impl Validator for Snoop<'_> {
    fn validate(&mut self, _: &Model) -> Result<Option<f64>> {
        self.attempts += 1;
        assert!(self.split.hidden.reveal().is_err());
        assert!(self.split.scoring_set().is_err());
        Ok(Some(0.5))
    }
}

#[test]
fn unlabeled_labels_stay_sealed_during_training() {
    let (_dir, out) = corpus(10, 8, 11);
    let cfg = small_cfg();
    let split = episode(&out, &cfg);
    let mut store = ImageStore::new(cfg.channels);
    let mut snoop = Snoop {
        split: &split,
        attempts: 0,
    };
    train_loop(&cfg, &split, &mut store, &mut snoop, RunOptions::default()).unwrap();
    assert_eq!(snoop.attempts, 6);
    assert_eq!(split.hidden.reveal_count(), 0);
    assert!(!split.hidden.is_sealed());
    assert!(split.hidden.reveal().is_ok());
}
