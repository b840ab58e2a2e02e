//! Trust-building diagnostics on a trained checkpoint: compare the learned
//! factorization against exact tabular quantities, and export metrics
//! streams as plot-ready two-column text files.

use std::path::{Path, PathBuf};

use fbee_core::fb::{sample_z_sphere, FSource, RewardEmbedding};
use fbee_core::oracle::{exact_successor_measure, q_from_measure, reward_from_states};
use fbee_core::seeding::derive_rng;
use fbee_core::testkit::spearman;
use fbee_core::uncertainty::f_q_correlation;
use ndarray::Array1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::metrics::{read_metrics, MetricsError, MetricsRecord};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Env(#[from] fbee_core::env::EnvError),
    #[error(transparent)]
    Fb(#[from] fbee_core::fb::FbError),
    #[error(transparent)]
    Oracle(#[from] fbee_core::oracle::OracleError),
    #[error(transparent)]
    Uncertainty(#[from] fbee_core::uncertainty::UncertaintyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("diagnostics io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint buffer is empty; nothing to diagnose")]
    EmptyBuffer,
}

/// Learned-vs-exact comparison for one sampled z.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZCheckRow {
    /// Relative L2 error of ⟨F̄(s,a,z), z⟩ against the exact Q of the learned
    /// greedy policy under the reward ⟨B(·), z⟩.
    pub q_rel_l2: f64,
    /// Rank correlation of the same two tables over all (s,a).
    pub q_rank_corr: f64,
    /// Relative L2 error of ⟨F̄, B(s')⟩·ρ̂(s') against the exact state
    /// marginal of the successor measure (ρ̂ from buffer next states).
    pub measure_rel_l2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleCheckReport {
    pub n_z: usize,
    pub rows: Vec<ZCheckRow>,
    pub mean_q_rel_l2: f64,
    pub mean_q_rank_corr: f64,
    pub mean_measure_rel_l2: f64,
    pub f_q_r_squared: f64,
    pub f_q_degenerate: bool,
    /// (trace of F-covariance, Q-variance) pairs behind the R².
    pub f_q_pairs: Vec<(f64, f64)>,
}

/// Compare the checkpointed factorization against exact oracles on sampled
/// reward embeddings. Deterministic given the checkpoint: the z draws come
/// from the run seed's `oracle-check` stream.
pub fn oracle_check(ckpt: &Checkpoint, n_z: usize) -> Result<OracleCheckReport, DiagnosticsError> {
    if ckpt.buffer.is_empty() {
        return Err(DiagnosticsError::EmptyBuffer);
    }
    let env = ckpt.config.environment.build()?;
    let ensemble = &ckpt.trainer.ensemble;
    let n_s = env.mdp.n_states();
    let n_a = env.mdp.n_actions();
    let d = ensemble.d();
    let mut rng = derive_rng(ckpt.config.seed, "oracle-check");

    // Empirical next-state distribution of the buffer.
    let mut rho = Array1::<f64>::zeros(n_s);
    for t in ckpt.buffer.iter() {
        rho[t.next_state] += 1.0;
    }
    rho /= ckpt.buffer.len() as f64;

    // B outputs for every state, once.
    let all_states: Vec<usize> = (0..n_s).collect();
    let b_all = ensemble.b_forward_batch(&all_states)?;

    let zs: Vec<RewardEmbedding> = (0..n_z)
        .map(|_| sample_z_sphere(d, &mut rng))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(n_z);
    for z in &zs {
        // Learned greedy policy as a tabular policy.
        let mut actions = Vec::with_capacity(n_s);
        for s in 0..n_s {
            actions.push(ensemble.greedy_action(FSource::Mean, s, z)?);
        }
        let policy = fbee_core::oracle::TabularPolicy::deterministic(&actions, n_a);
        let reward_states: Vec<f64> = (0..n_s).map(|s| b_all.row(s).dot(&z.0)).collect();
        let reward = reward_from_states(&reward_states, n_a);
        let measure = exact_successor_measure(&env.mdp, &policy)?;
        let exact_q = q_from_measure(&measure, &reward)?;

        let mut est = Vec::with_capacity(n_s * n_a);
        let mut exact = Vec::with_capacity(n_s * n_a);
        for s in 0..n_s {
            for a in 0..n_a {
                est.push(ensemble.q_value(FSource::Mean, s, a, z)?);
                exact.push(exact_q[[s, a]]);
            }
        }
        let q_rel_l2 = rel_l2(&est, &exact);
        let q_rank_corr = spearman(&est, &exact);

        // Learned measure against the exact state marginal.
        let mut est_m = Vec::with_capacity(n_s * n_a * n_s);
        let mut exact_m = Vec::with_capacity(n_s * n_a * n_s);
        for s in 0..n_s {
            for a in 0..n_a {
                let f = ensemble.f_value(FSource::Mean, s, a, z)?;
                let marginal = measure.state_marginal(s, a);
                for s2 in 0..n_s {
                    est_m.push(f.dot(&b_all.row(s2)) * rho[s2]);
                    exact_m.push(marginal[s2]);
                }
            }
        }
        let measure_rel_l2 = rel_l2(&est_m, &exact_m);
        rows.push(ZCheckRow { q_rel_l2, q_rank_corr, measure_rel_l2 });
    }

    // F-vs-Q uncertainty correlation over buffer-sampled query points.
    let mut batch = Vec::new();
    for _ in 0..64.min(ckpt.buffer.len()) {
        let t = ckpt.buffer.sample(&mut rng);
        batch.push((t.state, t.action));
    }
    let corr = f_q_correlation(ensemble, &zs, &batch)?;

    let n = rows.len() as f64;
    Ok(OracleCheckReport {
        n_z,
        mean_q_rel_l2: rows.iter().map(|r| r.q_rel_l2).sum::<f64>() / n,
        mean_q_rank_corr: rows.iter().map(|r| r.q_rank_corr).sum::<f64>() / n,
        mean_measure_rel_l2: rows.iter().map(|r| r.measure_rel_l2).sum::<f64>() / n,
        rows,
        f_q_r_squared: corr.r_squared,
        f_q_degenerate: corr.degenerate,
        f_q_pairs: corr.pairs,
    })
}

fn rel_l2(est: &[f64], exact: &[f64]) -> f64 {
    let num: f64 = est.iter().zip(exact).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
    if den < 1e-300 {
        return if num < 1e-300 { 0.0 } else { f64::INFINITY };
    }
    num / den
}

/// Flatten a run's metrics stream into two-column text files (plus a header
/// line), one file per curve. Returns the written paths.
pub fn export_plots(metrics_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, DiagnosticsError> {
    let records = read_metrics(metrics_path)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|source| DiagnosticsError::Io { path: out_dir.to_path_buf(), source })?;
    let mut written = Vec::new();

    let mut curves: Vec<(String, Vec<(u64, f64)>)> = vec![
        ("avg_ratio".into(), Vec::new()),
        ("coverage".into(), Vec::new()),
        ("avg_return".into(), Vec::new()),
        ("loss_total".into(), Vec::new()),
        ("explore_score".into(), Vec::new()),
    ];
    let mut per_task: Vec<(String, Vec<(u64, f64)>)> = Vec::new();
    for record in &records {
        match record {
            MetricsRecord::Eval(e) => {
                curves[0].1.push((e.global_step, e.avg_ratio));
                curves[1].1.push((e.global_step, e.coverage));
                curves[2].1.push((e.global_step, e.avg_return));
                if let Some(loss) = &e.loss {
                    curves[3].1.push((e.global_step, loss.total));
                }
                for t in &e.tasks {
                    match per_task.iter_mut().find(|(name, _)| name == &t.task) {
                        Some((_, points)) => points.push((e.global_step, t.optimality_ratio)),
                        None => per_task
                            .push((t.task.clone(), vec![(e.global_step, t.optimality_ratio)])),
                    }
                }
            }
            MetricsRecord::Explore(x) => {
                curves[4].1.push((x.global_step, x.score));
            }
        }
    }
    for (name, points) in per_task {
        curves.push((format!("task_{name}"), points));
    }

    for (name, points) in curves {
        if points.is_empty() {
            continue;
        }
        let path = out_dir.join(format!("{name}.tsv"));
        let mut text = String::from("step\tvalue\n");
        for (step, value) in points {
            text.push_str(&format!("{step}\t{value}\n"));
        }
        std::fs::write(&path, text)
            .map_err(|source| DiagnosticsError::Io { path: path.clone(), source })?;
        written.push(path);
    }
    Ok(written)
}
