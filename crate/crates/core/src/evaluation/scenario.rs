use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::evaluate;
use crate::datasets::{load_manifest, make_episode, ImageStore, SampleRecord};
use crate::error::{Error, Result};
use crate::training::{train, TrainConfig};

pub const DEFAULT_SHOTS: [usize; 3] = [3, 5, 10];
pub const DEFAULT_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    pub shots: Vec<usize>,
    /// Seeds per cell: `cfg.seed, cfg.seed + 1, …`.
    pub repeats: usize,
}

impl ScenarioSpec {
    pub fn new(name: impl Into<String>, source: impl Into<PathBuf>, target: impl Into<PathBuf>) -> Self {
        ScenarioSpec {
            name: name.into(),
            source_manifest: source.into(),
            target_manifest: target.into(),
            shots: DEFAULT_SHOTS.to_vec(),
            repeats: DEFAULT_REPEATS,
        }
    }
}

/// One (scenario, K) cell; `shots = None` is the source-only baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub shots: Option<usize>,
    pub seeds: Vec<u64>,
    /// Target accuracy per seed, in seed order; missing for failed seeds.
    pub accuracies: Vec<Option<f64>>,
    pub mean: Option<f64>,
    /// Sample standard deviation (zero for a single seed).
    pub std: Option<f64>,
    pub error: Option<String>,
}

impl CellResult {
    fn from_runs(shots: Option<usize>, seeds: Vec<u64>, runs: Vec<Result<f64>>) -> Self {
        let accuracies: Vec<Option<f64>> = runs.iter().map(|r| r.as_ref().ok().copied()).collect();
        let errors: Vec<String> = runs
            .iter()
            .zip(&seeds)
            .filter_map(|(r, s)| r.as_ref().err().map(|e| format!("seed {s}: {e}")))
            .collect();
        let (mean, std) = if errors.is_empty() {
            let v: Vec<f64> = accuracies.iter().flatten().copied().collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = if v.len() > 1 {
                v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (Some(mean), Some(var.sqrt()))
        } else {
            (None, None)
        };
        CellResult {
            shots,
            seeds,
            accuracies,
            mean,
            std,
            error: (!errors.is_empty()).then(|| errors.join("; ")),
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub name: String,
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    pub baseline: CellResult,
    pub cells: Vec<CellResult>,
}

/// Published accuracies (%) on the real CT corpora with a pretrained
/// backbone. Kept for comparison only; nothing is asserted against them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub source: String,
    pub target: String,
    /// A prior cross-dataset method trained on source plus five labeled
    /// target samples per class.
    pub prior_baseline: f64,
    /// Minimax entropy adaptation at K = 3, 5, 10.
    pub k3: f64,
    pub k5: f64,
    pub k10: f64,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    let row = |source: &str, target: &str, v: [f64; 4]| ReferenceRow {
        source: source.into(),
        target: target.into(),
        prior_baseline: v[0],
        k3: v[1],
        k5: v[2],
        k10: v[3],
    };
    vec![
        row("SARS-CoV-2-CT", "COVID19-CT (train)", [59.12, 62.22, 63.52, 66.11]),
        row("SARS-CoV-2-CT", "COVID19-CT (test)", [56.16, 67.71, 69.17, 73.50]),
        row("SARS-CoV-2-CT", "COVID19-CT (train+test)", [58.31, 61.42, 62.48, 63.71]),
        row("COVID19-CT (train+test)", "SARS-CoV-2-CT", [45.25, 56.03, 60.12, 65.17]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: TrainConfig,
    pub rows: Vec<ScenarioRow>,
    pub reference: Vec<ReferenceRow>,
}

impl ScenarioReport {
    pub fn da_cells(&self) -> usize {
        self.rows.iter().map(|r| r.cells.len()).sum()
    }

    pub fn baseline_cells(&self) -> usize {
        self.rows.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Rows are scenarios; columns are the baseline and each K.
    pub fn table(&self) -> String {
        let mut shots: Vec<usize> = self
            .rows
            .iter()
            .flat_map(|r| r.cells.iter().filter_map(|c| c.shots))
            .collect();
        shots.sort_unstable();
        shots.dedup();
        let fmt = |c: Option<&CellResult>| match c {
            None => "-".to_string(),
            Some(c) => match (c.mean, c.std) {
                (Some(m), Some(s)) => format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s),
                _ => "failed".to_string(),
            },
        };
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.chars().count())
            .max()
            .unwrap_or(8)
            .max(8);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}  {:>15}", "scenario", "source-only");
        for k in &shots {
            let _ = write!(out, "  {:>15}", format!("K={k}"));
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<name_w$}  {:>15}", row.name, fmt(Some(&row.baseline)));
            for k in &shots {
                let _ = write!(out, "  {:>15}", fmt(row.cells.iter().find(|c| c.shots == Some(*k))));
            }
            out.push('\n');
        }
        out.push_str("\nreference accuracies (%), real CT corpora with a pretrained backbone; not asserted:\n");
        for r in &self.reference {
            let _ = writeln!(
                out,
                "  {} -> {}: prior {:.2} | K=3 {:.2} | K=5 {:.2} | K=10 {:.2}",
                r.source, r.target, r.prior_baseline, r.k3, r.k5, r.k10
            );
        }
        out
    }
}

fn run_once(
    cfg: &TrainConfig,
    source: &[SampleRecord],
    target: &[SampleRecord],
    store: &mut ImageStore,
) -> Result<f64> {
    let split = make_episode(source, target, cfg.shots, cfg.num_classes, cfg.seed)?;
    let outcome = train(cfg, &split, store)?;
    let scoring = split.scoring_set()?;
    Ok(evaluate(&outcome.best.state.model, &scoring, store)?.accuracy)
}

fn run_cell(
    cfg: &TrainConfig,
    shots: Option<usize>,
    spec: &ScenarioSpec,
    source: &[SampleRecord],
    target: &[SampleRecord],
    store: &mut ImageStore,
) -> CellResult {
    let seeds: Vec<u64> = (0..spec.repeats as u64).map(|r| cfg.seed.wrapping_add(r)).collect();
    let runs = seeds
        .iter()
        .map(|&seed| {
            let run_cfg = match shots {
                Some(k) => TrainConfig {
                    shots: k,
                    seed,
                    ..cfg.clone()
                },
                None => TrainConfig {
                    shots: 0,
                    lambda: 0.0,
                    seed,
                    ..cfg.clone()
                },
            };
            let result = run_once(&run_cfg, source, target, store);
            match &result {
                Ok(acc) => log::info!("{} K={shots:?} seed {seed}: {:.4}", spec.name, acc),
                Err(e) => log::warn!("{} K={shots:?} seed {seed} failed: {e}", spec.name),
            }
            result
        })
        .collect();
    CellResult::from_runs(shots, seeds, runs)
}

/// Trains and scores every (scenario, K, seed) run plus a source-only
/// baseline (`λ = 0`, `K = 0`) per scenario. Failed runs are recorded in
/// their cell; the sweep continues.
pub fn run_scenarios(specs: &[ScenarioSpec], cfg: &TrainConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        if spec.repeats == 0 {
            return Err(Error::Config(format!("scenario {} has zero repeats", spec.name)));
        }
        let loaded =
            load_manifest(&spec.source_manifest).and_then(|s| load_manifest(&spec.target_manifest).map(|t| (s, t)));
        let mut store = ImageStore::new(cfg.channels);
        let (baseline, cells) = match loaded {
            Ok((source, target)) => (
                run_cell(cfg, None, spec, &source, &target, &mut store),
                spec.shots
                    .iter()
                    .map(|&k| run_cell(cfg, Some(k), spec, &source, &target, &mut store))
                    .collect(),
            ),
            Err(e) => {
                let fail = |shots| CellResult {
                    shots,
                    seeds: Vec::new(),
                    accuracies: Vec::new(),
                    mean: None,
                    std: None,
                    error: Some(e.to_string()),
                };
                (fail(None), spec.shots.iter().map(|&k| fail(Some(k))).collect())
            }
        };
        rows.push(ScenarioRow {
            name: spec.name.clone(),
            source_manifest: spec.source_manifest.clone(),
            target_manifest: spec.target_manifest.clone(),
            baseline,
            cells,
        });
    }
    Ok(ScenarioReport {
        config: cfg.clone(),
        rows,
        reference: reference_rows(),
    })
}
