//! Multi-seed sweeps: run each configuration across seeds (concurrently —
//! runs are fully isolated), then aggregate per-step means and standard
//! deviations across seeds into plot-ready columns.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::metrics::{eval_records, read_metrics, MetricsError};
use crate::run::{run, RunError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep needs at least one configuration")]
    NoConfigs,
    #[error("sweep needs at least one seed")]
    NoSeeds,
    #[error("configs must have distinct names; `{0}` repeats")]
    DuplicateName(String),
    #[error("sweep io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// One failed run, recorded without stopping the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFailure {
    pub config: String,
    pub seed: u64,
    pub error: String,
}

/// Mean/std across seeds at one evaluation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAggregate {
    pub global_step: u64,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub mean_coverage: f64,
    pub std_coverage: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub n_seeds: usize,
}

/// Final-evaluation numbers of one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedFinal {
    pub seed: u64,
    pub avg_ratio: f64,
    pub coverage: f64,
    pub per_task_ratio: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigAggregate {
    pub name: String,
    pub per_step: Vec<StepAggregate>,
    pub finals: Vec<SeedFinal>,
}

impl ConfigAggregate {
    /// Median over seeds of the final average optimality ratio.
    pub fn median_final_ratio(&self) -> f64 {
        median(self.finals.iter().map(|f| f.avg_ratio))
    }

    /// Median over seeds of the final state coverage.
    pub fn median_final_coverage(&self) -> f64 {
        median(self.finals.iter().map(|f| f.coverage))
    }

    /// Median over seeds of the final ratio of one task.
    pub fn median_task_ratio(&self, task: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .finals
            .iter()
            .flat_map(|f| {
                f.per_task_ratio
                    .iter()
                    .filter(|(name, _)| name == task)
                    .map(|(_, r)| *r)
            })
            .collect();
        (!values.is_empty()).then(|| median(values.into_iter()))
    }
}

pub fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    assert!(!v.is_empty(), "median of empty set");
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub aggregates: Vec<ConfigAggregate>,
    pub failures: Vec<RunFailure>,
}

/// Run `configs × seeds` and aggregate. Per-run outputs land under
/// `out_root/<config-name>/seed<k>/`; each config also gets an
/// `aggregate.tsv` with plot-ready columns and the whole sweep a
/// `report.json`. Seed k of a config uses `config.seed + k`.
pub fn sweep(
    configs: &[RunConfig],
    n_seeds: u64,
    out_root: &Path,
) -> Result<SweepReport, SweepError> {
    if configs.is_empty() {
        return Err(SweepError::NoConfigs);
    }
    if n_seeds == 0 {
        return Err(SweepError::NoSeeds);
    }
    for (i, c) in configs.iter().enumerate() {
        if configs[..i].iter().any(|other| other.name == c.name) {
            return Err(SweepError::DuplicateName(c.name.clone()));
        }
    }

    let mut jobs = Vec::new();
    for config in configs {
        for s in 0..n_seeds {
            let mut derived = config.clone();
            derived.seed = config.seed + s;
            derived.out_dir = out_root.join(&config.name).join(format!("seed{s:02}"));
            jobs.push((config.name.clone(), derived));
        }
    }

    let outcomes: Vec<(String, u64, Result<crate::run::RunArtifacts, RunError>)> = jobs
        .into_par_iter()
        .map(|(name, config)| {
            let seed = config.seed;
            let result = run(&config);
            (name, seed, result)
        })
        .collect();

    let mut failures = Vec::new();
    let mut aggregates = Vec::new();
    for config in configs {
        let mut seed_records = Vec::new();
        for (name, seed, outcome) in &outcomes {
            if name != &config.name {
                continue;
            }
            match outcome {
                Ok(artifacts) => {
                    let records = read_metrics(&artifacts.metrics_path)?;
                    seed_records.push((*seed, records));
                }
                Err(e) => failures.push(RunFailure {
                    config: config.name.clone(),
                    seed: *seed,
                    error: e.to_string(),
                }),
            }
        }
        let aggregate = aggregate_config(&config.name, &seed_records);
        write_aggregate_tsv(out_root.join(&config.name).join("aggregate.tsv"), &aggregate)?;
        aggregates.push(aggregate);
    }

    let report = SweepReport { aggregates, failures };
    let report_path = out_root.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&report_path, text)
        .map_err(|source| SweepError::Io { path: report_path, source })?;
    Ok(report)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_config(
    name: &str,
    seed_records: &[(u64, Vec<crate::metrics::MetricsRecord>)],
) -> ConfigAggregate {
    // Steps where every successful seed reported an evaluation.
    let mut steps: Option<Vec<u64>> = None;
    for (_, records) in seed_records {
        let s: Vec<u64> = eval_records(records).iter().map(|e| e.global_step).collect();
        steps = Some(match steps {
            None => s,
            Some(prev) => prev.into_iter().filter(|x| s.contains(x)).collect(),
        });
    }
    let steps = steps.unwrap_or_default();

    let mut per_step = Vec::new();
    for &step in &steps {
        let mut ratios = Vec::new();
        let mut coverages = Vec::new();
        let mut returns = Vec::new();
        for (_, records) in seed_records {
            for e in eval_records(records) {
                if e.global_step == step {
                    ratios.push(e.avg_ratio);
                    coverages.push(e.coverage);
                    returns.push(e.avg_return);
                }
            }
        }
        let (mean_ratio, std_ratio) = mean_std(&ratios);
        let (mean_coverage, std_coverage) = mean_std(&coverages);
        let (mean_return, std_return) = mean_std(&returns);
        per_step.push(StepAggregate {
            global_step: step,
            mean_ratio,
            std_ratio,
            mean_coverage,
            std_coverage,
            mean_return,
            std_return,
            n_seeds: ratios.len(),
        });
    }

    let mut finals = Vec::new();
    for (seed, records) in seed_records {
        if let Some(last) = eval_records(records).last() {
            finals.push(SeedFinal {
                seed: *seed,
                avg_ratio: last.avg_ratio,
                coverage: last.coverage,
                per_task_ratio: last
                    .tasks
                    .iter()
                    .map(|t| (t.task.clone(), t.optimality_ratio))
                    .collect(),
            });
        }
    }
    ConfigAggregate { name: name.to_string(), per_step, finals }
}

fn write_aggregate_tsv(path: PathBuf, aggregate: &ConfigAggregate) -> Result<(), SweepError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|source| SweepError::Io { path: path.clone(), source })?;
    }
    let mut file = std::fs::File::create(&path)
        .map_err(|source| SweepError::Io { path: path.clone(), source })?;
    let mut text = String::from(
        "step\tmean_ratio\tstd_ratio\tmean_coverage\tstd_coverage\tmean_return\tstd_return\tn_seeds\n",
    );
    for row in &aggregate.per_step {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            row.global_step,
            row.mean_ratio,
            row.std_ratio,
            row.mean_coverage,
            row.std_coverage,
            row.mean_return,
            row.std_return,
            row.n_seeds
        ));
    }
    file.write_all(text.as_bytes())
        .map_err(|source| SweepError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fbee_core::env::EnvSpec;
    use fbee_core::explore::StrategyKind;

    fn tiny_config(name: &str) -> RunConfig {
        let mut config = RunConfig::default();
        config.name = name.into();
        config.environment = EnvSpec::Chain { n: 4, gamma: 0.9, horizon: 10 };
        config.fb.gamma = 0.9;
        config.fb.d = 4;
        config.fb.k = 2;
        config.fb.hidden = vec![8];
        config.fb.batch_size = 16;
        config.strategy.kind = StrategyKind::FbRandomZ;
        config.strategy.z_update_period = 10;
        config.total_env_steps = 100;
        config.eval_period = 50;
        config.n_eval_episodes = 2;
        config.n_reward_samples = 50;
        config.buffer_capacity = 512;
        config
    }

    #[test]
    fn one_config_one_seed_report_mirrors_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let report = sweep(&[tiny_config("solo")], 1, dir.path()).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(report.aggregates.len(), 1);
        let agg = &report.aggregates[0];
        assert_eq!(agg.finals.len(), 1);
        // With one seed, mean equals the run's value and std is 0.
        assert!(agg.per_step.iter().all(|s| s.std_ratio == 0.0));
        let records =
            read_metrics(&dir.path().join("solo/seed00/metrics.jsonl")).unwrap();
        let last = eval_records(&records).last().unwrap().clone();
        assert_eq!(agg.finals[0].avg_ratio, last.avg_ratio);
        assert!(dir.path().join("solo/aggregate.tsv").exists());
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn identical_configs_same_seeds_agree() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = sweep(&[tiny_config("a")], 2, d1.path()).unwrap();
        let r2 = sweep(&[tiny_config("a")], 2, d2.path()).unwrap();
        let s1: Vec<f64> = r1.aggregates[0].per_step.iter().map(|s| s.mean_ratio).collect();
        let s2: Vec<f64> = r2.aggregates[0].per_step.iter().map(|s| s.mean_ratio).collect();
        assert_eq!(s1, s2);
    }

    #[test]
    fn std_columns_match_flat_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let report = sweep(&[tiny_config("s")], 3, dir.path()).unwrap();
        let agg = &report.aggregates[0];
        // Independent pass over the raw per-seed files.
        for row in &agg.per_step {
            let mut values = Vec::new();
            for s in 0..3 {
                let records = read_metrics(
                    &dir.path().join(format!("s/seed{s:02}/metrics.jsonl")),
                )
                .unwrap();
                for e in eval_records(&records) {
                    if e.global_step == row.global_step {
                        values.push(e.avg_ratio);
                    }
                }
            }
            assert_eq!(values.len(), row.n_seeds);
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / values.len() as f64;
            assert!((row.mean_ratio - mean).abs() < 1e-12);
            assert!((row.std_ratio - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = sweep(&[tiny_config("x"), tiny_config("x")], 1, dir.path());
        assert!(matches!(err, Err(SweepError::DuplicateName(_))));
    }

    #[test]
    fn median_helper() {
        assert_eq!(median([3.0, 1.0, 2.0].into_iter()), 2.0);
        assert_eq!(median([4.0, 1.0, 2.0, 3.0].into_iter()), 2.5);
    }
}
