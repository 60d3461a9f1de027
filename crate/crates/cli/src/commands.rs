use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use mmda_core::datasets::{
    label_name, load_manifest, make_episode, synth_domains, write_manifest, Domain, ImageStore, SampleRecord,
    CLASS_NAMES,
};
use mmda_core::evaluation::{ablation_sweep, evaluate, run_scenarios, write_ablation_csv, ScenarioSpec};
use mmda_core::imaging::{canonicalize, RawImage};
use mmda_core::objectives::{check_instance, random_instance, InstanceKind, Objective};
use mmda_core::seed;
use mmda_core::training::{append_log, train_loop, Checkpoint, RunOptions, SampleValidator};
use serde_json::json;

use crate::config::Config;
use crate::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Io(dir.to_path_buf(), e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::Io(dir.to_path_buf(), err)))
        .collect::<Result<_, _>>()?;
    entries.sort();
    Ok(entries)
}

#[derive(Default)]
struct ClassStats {
    images: usize,
    rows: Option<(usize, usize)>,
    cols: Option<(usize, usize)>,
}

impl ClassStats {
    fn add(&mut self, width: usize, height: usize) {
        let widen = |r: Option<(usize, usize)>, v: usize| Some(r.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))));
        self.images += 1;
        self.rows = widen(self.rows, height);
        self.cols = widen(self.cols, width);
    }

    fn merge(&mut self, other: &ClassStats) {
        let join = |a: Option<(usize, usize)>, b: Option<(usize, usize)>| match (a, b) {
            (Some((a0, a1)), Some((b0, b1))) => Some((a0.min(b0), a1.max(b1))),
            (x, None) | (None, x) => x,
        };
        self.images += other.images;
        self.rows = join(self.rows, other.rows);
        self.cols = join(self.cols, other.cols);
    }

    fn json(&self) -> serde_json::Value {
        json!({
            "images": self.images,
            "min_rows": self.rows.map(|r| r.0),
            "max_rows": self.rows.map(|r| r.1),
            "min_cols": self.cols.map(|c| c.0),
            "max_cols": self.cols.map(|c| c.1),
        })
    }

    fn row(&self, name: &str) -> String {
        let show = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        format!(
            "{:<10} {:>7} {:>9} {:>9} {:>9} {:>9}",
            name,
            self.images,
            show(self.rows.map(|r| r.0)),
            show(self.rows.map(|r| r.1)),
            show(self.cols.map(|c| c.0)),
            show(self.cols.map(|c| c.1)),
        )
    }
}

/// Canonicalizes `<input>/<class>/*` into `<out>/images/<class>/*.png` and
/// writes `<out>/manifest.csv` with the geometry of every image.
pub fn prep(cfg: &Config, input: &Path) -> Result<(), CliError> {
    let side: usize = cfg.get("side")?;
    let domain: Domain = cfg.get("prep_domain")?;
    let out = cfg.out_dir();
    let mut records = Vec::new();
    let mut stats: BTreeMap<usize, ClassStats> = BTreeMap::new();
    let mut skipped = Vec::new();
    for dir in sorted_entries(input)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        let Some(label) = CLASS_NAMES.iter().position(|&c| c == name) else {
            log::warn!(
                "ignoring {}: not a class directory ({})",
                dir.display(),
                CLASS_NAMES.join(", ")
            );
            continue;
        };
        let dest = out.join("images").join(CLASS_NAMES[label]);
        create_dir(&dest)?;
        let mut used = HashSet::new();
        for file in sorted_entries(&dir)?.into_iter().filter(|p| p.is_file()) {
            let raw = match RawImage::load(&file) {
                Ok(raw) => raw,
                Err(e) => {
                    log::error!("skipping {e}");
                    skipped.push(file);
                    continue;
                }
            };
            let (img, geometry) = canonicalize(&raw, side, 1)?;
            let stem = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let mut name = format!("{stem}.png");
            if !used.insert(name.clone()) {
                let ext = file.extension().unwrap_or_default().to_string_lossy();
                name = format!("{stem}_{ext}.png");
                used.insert(name.clone());
            }
            let path = dest.join(name);
            img.save_png(&path)?;
            stats.entry(label).or_default().add(raw.width(), raw.height());
            records.push(SampleRecord {
                geometry: Some(geometry),
                ..SampleRecord::new(path, Some(label), domain)
            });
        }
    }
    create_dir(&out)?;
    let manifest = out.join("manifest.csv");
    write_manifest(&manifest, &records)?;

    let mut total = ClassStats::default();
    let mut per_class = serde_json::Map::new();
    println!(
        "{:<10} {:>7} {:>9} {:>9} {:>9} {:>9}",
        "class", "images", "min rows", "max rows", "min cols", "max cols"
    );
    for (label, s) in &stats {
        println!("{}", s.row(&label_name(Some(*label))));
        per_class.insert(label_name(Some(*label)), s.json());
        total.merge(s);
    }
    println!("{}", total.row("total"));
    println!(
        "wrote {} images at {side}x{side} and {}",
        records.len(),
        manifest.display()
    );
    write_json(
        &out.join("prep.json"),
        &json!({
            "input": input,
            "side": side,
            "classes": per_class,
            "total": total.json(),
            "skipped": skipped,
        }),
    )?;
    if skipped.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial(format!(
            "{} unreadable files were skipped",
            skipped.len()
        )))
    }
}

pub fn synth(cfg: &Config) -> Result<(), CliError> {
    let sc = cfg.synth()?;
    let out = cfg.out_dir();
    let result = synth_domains(&sc, cfg.get("seed")?, &out)?;
    println!(
        "wrote {} source and {} target images ({}x{}, shift {})",
        result.source.len(),
        result.target.len(),
        sc.side,
        sc.side,
        sc.shift
    );
    println!("source manifest: {}", result.source_manifest.display());
    println!("target manifest: {}", result.target_manifest.display());
    Ok(())
}

fn manifests(cfg: &Config) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>), CliError> {
    let source = load_manifest(&cfg.require_path("source_manifest")?)?;
    let target = load_manifest(&cfg.require_path("target_manifest")?)?;
    Ok((source, target))
}

/// Writes `best.ckpt`, `train.ndjson` and `train.json`, plus `last.ckpt`
/// whenever the final state differs from the best one.
pub fn train(cfg: &Config) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let (source, target) = manifests(cfg)?;
    let split = make_episode(&source, &target, tc.shots, tc.num_classes, tc.seed)?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let (best_path, last_path, log_path) = (out.join("best.ckpt"), out.join("last.ckpt"), out.join("train.ndjson"));

    let mut options = RunOptions {
        stop_after: cfg.stop_after()?,
        ..Default::default()
    };
    if cfg.get::<bool>("resume")? {
        let from = if last_path.exists() { &last_path } else { &best_path };
        if !from.exists() {
            return Err(CliError::Usage(format!("nothing to resume in {}", out.display())));
        }
        options.resume = Some(Checkpoint::load(from)?);
        options.resume_best = Some(Checkpoint::load(&best_path)?);
    } else if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| CliError::Io(log_path.clone(), e))?;
    }

    let mut store = ImageStore::new(tc.channels);
    let mut validator = SampleValidator::from_records(&split.target_validation, &mut store)?;
    let outcome = train_loop(&tc, &split, &mut store, &mut validator, options)?;
    append_log(&log_path, &outcome.log)?;
    outcome.best.save(&best_path)?;
    if outcome.last.state != outcome.best.state {
        outcome.last.save(&last_path)?;
    } else if last_path.exists() {
        fs::remove_file(&last_path).map_err(|e| CliError::Io(last_path.clone(), e))?;
    }
    let best = &outcome.best;
    write_json(
        &out.join("train.json"),
        &json!({
            "batches_done": outcome.last.state.batches_done,
            "best_batches_done": best.state.batches_done,
            "best_val_acc": best.val_acc,
            "config": tc,
        }),
    )?;
    match best.val_acc {
        Some(acc) => println!(
            "{} batches done; best validation accuracy {:.4} after batch {}",
            outcome.last.state.batches_done, acc, best.state.batches_done
        ),
        None => println!(
            "{} batches done; no validation pool, kept the final state",
            outcome.last.state.batches_done
        ),
    }
    println!("checkpoint: {}", best_path.display());
    Ok(())
}

pub fn eval(cfg: &Config) -> Result<(), CliError> {
    let out = cfg.out_dir();
    let ckpt_path = cfg.path("checkpoint").unwrap_or_else(|| out.join("best.ckpt"));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let manifest = match cfg.path("eval_manifest") {
        Some(p) => p,
        None => cfg.require_path("target_manifest")?,
    };
    let records = load_manifest(&manifest)?;
    let mut store = ImageStore::new(ckpt.config.channels);
    let result = evaluate(&ckpt.state.model, &records, &mut store)?;
    let cm = result.confusion;
    println!("accuracy {:.4} on {} samples", result.accuracy, cm.total());
    println!(
        "TP {}  TN {}  FP {}  FN {}  (positive class: {})",
        cm.tp, cm.tn, cm.fp, cm.fn_, CLASS_NAMES[0]
    );
    create_dir(&out)?;
    let predictions: Vec<_> = records
        .iter()
        .zip(&result.predictions)
        .map(|(r, &p)| json!({ "path": r.path, "label": r.label, "prediction": p }))
        .collect();
    write_json(
        &out.join("eval.json"),
        &json!({
            "checkpoint": ckpt_path,
            "manifest": manifest,
            "accuracy": result.accuracy,
            "confusion": cm,
            "predictions": predictions,
        }),
    )
}

/// `name,source,target` lines; paths relative to the file.
fn read_scenario_file(path: &Path, shots: &[usize], repeats: usize) -> Result<Vec<ScenarioSpec>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut specs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [name, source, target] = fields[..] else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected name,source,target",
                path.display(),
                n + 1
            )));
        };
        specs.push(ScenarioSpec {
            shots: shots.to_vec(),
            repeats,
            ..ScenarioSpec::new(name, base.join(source), base.join(target))
        });
    }
    Ok(specs)
}

/// Four scenarios over synthetic corpora: one source against two target
/// draws, against their union, and the union back onto the source.
fn synthetic_scenarios(
    cfg: &Config,
    dir: &Path,
    shots: &[usize],
    repeats: usize,
) -> Result<Vec<ScenarioSpec>, CliError> {
    let sc = cfg.synth()?;
    let master: u64 = cfg.get("seed")?;
    let a = synth_domains(&sc, seed::derive(master, "scenarios/a"), &dir.join("a"))?;
    let b = synth_domains(&sc, seed::derive(master, "scenarios/b"), &dir.join("b"))?;
    let union = dir.join("target-a+b.csv");
    let mut both = a.target.clone();
    both.extend(b.target.iter().cloned());
    write_manifest(&union, &both)?;
    let spec = |name: &str, s: &Path, t: &Path| ScenarioSpec {
        shots: shots.to_vec(),
        repeats,
        ..ScenarioSpec::new(name, s, t)
    };
    Ok(vec![
        spec("source -> target-a", &a.source_manifest, &a.target_manifest),
        spec("source -> target-b", &a.source_manifest, &b.target_manifest),
        spec("source -> target-a+b", &a.source_manifest, &union),
        spec("target-a+b -> source", &union, &a.source_manifest),
    ])
}

/// Writes `scenarios.json` and `scenarios.txt`. Failed cells are kept in
/// the report and make the exit status signal partial failure.
pub fn scenarios(cfg: &Config) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let shots = cfg.scenario_shots()?;
    let repeats: usize = cfg.get("scenario_repeats")?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    let specs = match cfg.path("scenarios") {
        Some(file) => read_scenario_file(&file, &shots, repeats)?,
        None => synthetic_scenarios(cfg, &out.join("synth"), &shots, repeats)?,
    };
    let report = run_scenarios(&specs, &tc)?;
    write_text(&out.join("scenarios.json"), &(report.to_json() + "\n"))?;
    let table = report.table();
    write_text(&out.join("scenarios.txt"), &table)?;
    print!("{table}");
    let failed = report
        .rows
        .iter()
        .flat_map(|r| std::iter::once(&r.baseline).chain(&r.cells))
        .filter(|c| c.failed())
        .count();
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Partial(format!("{failed} cells failed; see scenarios.json")))
    }
}

pub fn ablate(cfg: &Config) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let (parameter, values) = cfg.ablation()?;
    let (source, target) = manifests(cfg)?;
    let split = make_episode(&source, &target, tc.shots, tc.num_classes, tc.seed)?;
    let mut store = ImageStore::new(tc.channels);
    let curve = ablation_sweep(parameter, &values, &tc, &split, &mut store)?;
    let out = cfg.out_dir();
    create_dir(&out)?;
    write_ablation_csv(&out.join("ablation.csv"), &curve)?;
    write_json(&out.join("ablation.json"), &json!(curve))?;
    for p in &curve.points {
        match (p.accuracy, &p.error) {
            (Some(a), _) => println!("{parameter} = {:<8} accuracy {a:.4}", p.value),
            (None, e) => println!("{parameter} = {:<8} failed: {}", p.value, e.as_deref().unwrap_or("?")),
        }
    }
    if let Some(best) = curve.best {
        println!("best {parameter}: {best}");
    }
    Ok(())
}

/// Alternates desk-encoder and raw-feature instances and checks all four
/// objectives on each. Writes `gradcheck.json`.
pub fn gradcheck(cfg: &Config) -> Result<(), CliError> {
    let count: usize = cfg.get("gradcheck_instances")?;
    let side: usize = cfg.get("gradcheck_side")?;
    let dim: usize = cfg.get("gradcheck_dim")?;
    let delta: f64 = cfg.get("gradcheck_delta")?;
    let tolerance: f64 = cfg.get("gradcheck_tolerance")?;
    let base = seed::derive(cfg.get("seed")?, "gradcheck");
    let mut checks = Vec::new();
    let mut worst = 0.0f64;
    let mut passed = true;
    for i in 0..count {
        let (kind, label) = if i % 2 == 0 {
            (InstanceKind::DeskImage { side }, "desk")
        } else {
            (InstanceKind::RawFeatures { dim }, "raw")
        };
        let instance_seed = base.wrapping_add(i as u64);
        let instance = random_instance(kind, instance_seed)?;
        for objective in Objective::ALL {
            let r = check_instance(&instance, objective, delta, tolerance)?;
            worst = worst.max(r.max_rel_error);
            passed &= r.passed;
            checks.push(json!({
                "instance": i,
                "kind": label,
                "seed": instance_seed,
                "objective": objective.name(),
                "entries": r.checked,
                "max_rel_error": r.max_rel_error,
                "worst": r.worst,
                "failures": r.failures,
                "passed": r.passed,
            }));
        }
    }
    let out = cfg.out_dir();
    create_dir(&out)?;
    write_json(
        &out.join("gradcheck.json"),
        &json!({
            "instances": count,
            "delta": delta,
            "tolerance": tolerance,
            "max_rel_error": worst,
            "passed": passed,
            "checks": checks,
        }),
    )?;
    println!(
        "{} checks on {count} instances: max relative error {worst:.3e} (tolerance {tolerance:e}): {}",
        checks.len(),
        if passed { "pass" } else { "FAIL" }
    );
    if passed {
        Ok(())
    } else {
        Err(CliError::Failed(
            "analytic gradients disagree with finite differences".into(),
        ))
    }
}
