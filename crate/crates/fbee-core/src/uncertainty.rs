//! Ensemble posterior statistics: mean forward map, F-covariance with scalar
//! summaries, projected Q-variance, and the F-vs-Q correlation diagnostic.
//!
//! Member reductions accumulate in value-sorted order so every statistic is
//! exactly invariant under permutation of ensemble members.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::fb::{FSource, FbEnsemble, FbError, RewardEmbedding};
use crate::linalg::{symmetric_eigenvalues, LinalgError};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("posterior statistics need K ≥ 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("correlation needs ≥ 2 z samples and ≥ 1 state-action pair")]
    NotEnoughSamples,
    #[error(transparent)]
    Fb(#[from] FbError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A query point (s, a, z).
#[derive(Debug, Clone)]
pub struct EnsembleQuery {
    pub state: usize,
    pub action: usize,
    pub z: RewardEmbedding,
}

/// Mean and covariance of the member outputs at one query, with the scalar
/// summaries used for exploration scoring.
#[derive(Debug, Clone)]
pub struct FPosteriorStats {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub trace: f64,
    pub max_eigenvalue: f64,
    pub determinant: f64,
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.iter().sum()
}

/// Permutation-invariant mean that is exact when all entries coincide, so
/// identical ensemble members produce exactly zero spread.
fn sorted_mean(values: &mut [f64]) -> f64 {
    let k = values.len() as f64;
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if values[0] == values[values.len() - 1] {
        return values[0];
    }
    values.iter().sum::<f64>() / k
}

fn member_outputs(
    ensemble: &FbEnsemble,
    query: &EnsembleQuery,
) -> Result<Vec<Array1<f64>>, UncertaintyError> {
    if ensemble.k() < 2 {
        return Err(UncertaintyError::TooFewMembers(ensemble.k()));
    }
    (0..ensemble.k())
        .map(|k| {
            ensemble
                .f_value(FSource::Member(k), query.state, query.action, &query.z)
                .map_err(UncertaintyError::from)
        })
        .collect()
}

/// Dirac-mixture posterior over F at a query: `F̄ = (1/K)ΣF_k` and
/// `Cov = (1/K)Σ(F_k−F̄)(F_k−F̄)ᵀ`, with trace, max eigenvalue, and the
/// determinant (eigenvalue product floored at 0).
pub fn f_posterior(
    ensemble: &FbEnsemble,
    query: &EnsembleQuery,
) -> Result<FPosteriorStats, UncertaintyError> {
    let outs = member_outputs(ensemble, query)?;
    let k = outs.len();
    let d = outs[0].len();
    let kf = k as f64;

    let mut mean = Array1::zeros(d);
    let mut scratch = vec![0.0; k];
    for i in 0..d {
        for (m, o) in outs.iter().enumerate() {
            scratch[m] = o[i];
        }
        mean[i] = sorted_mean(&mut scratch);
    }
    let diffs: Vec<Array1<f64>> = outs.iter().map(|o| o - &mean).collect();

    let mut covariance = Array2::zeros((d, d));
    for i in 0..d {
        for j in i..d {
            for (m, diff) in diffs.iter().enumerate() {
                scratch[m] = diff[i] * diff[j];
            }
            let v = sorted_sum(&mut scratch) / kf;
            covariance[[i, j]] = v;
            covariance[[j, i]] = v;
        }
    }
    let trace = (0..d).map(|i| covariance[[i, i]]).sum();
    let eigs = symmetric_eigenvalues(&covariance)?;
    let max_eigenvalue = if d > 0 { eigs[0] } else { 0.0 };
    let determinant = eigs.iter().map(|&e| e.max(0.0)).product();
    Ok(FPosteriorStats { mean, covariance, trace, max_eigenvalue, determinant })
}

/// Projected Q-posterior at a query:
/// `Var = (1/K)Σ⟨F_k−F̄, z⟩²` and `meanQ = ⟨F̄, z⟩`.
pub fn q_variance(
    ensemble: &FbEnsemble,
    query: &EnsembleQuery,
) -> Result<(f64, f64), UncertaintyError> {
    let outs = member_outputs(ensemble, query)?;
    let k = outs.len();
    let kf = k as f64;
    let d = outs[0].len();
    let mut scratch = vec![0.0; k];
    let mut mean = Array1::zeros(d);
    for i in 0..d {
        for (m, o) in outs.iter().enumerate() {
            scratch[m] = o[i];
        }
        mean[i] = sorted_mean(&mut scratch);
    }
    let mean_q = mean.dot(&query.z.0);
    for (m, o) in outs.iter().enumerate() {
        let dq = (o - &mean).dot(&query.z.0);
        scratch[m] = dq * dq;
    }
    let var = sorted_sum(&mut scratch) / kf;
    Ok((var, mean_q))
}

/// Paired (trace of F-covariance, Q-variance) samples and the least-squares
/// R² of the second on the first.
#[derive(Debug, Clone)]
pub struct FqCorrelation {
    pub r_squared: f64,
    /// Set when either axis has zero variance (e.g. identical members).
    pub degenerate: bool,
    /// One (avg trace, avg Q-variance) pair per z sample, in input order.
    pub pairs: Vec<(f64, f64)>,
}

/// For each z: average `trace(Cov[F])` and average `Var[Q]` over the
/// state-action batch; then the R² of a least-squares fit of Var[Q] on the
/// trace. Raw pairs are returned for plotting.
pub fn f_q_correlation(
    ensemble: &FbEnsemble,
    z_samples: &[RewardEmbedding],
    state_action_batch: &[(usize, usize)],
) -> Result<FqCorrelation, UncertaintyError> {
    if z_samples.len() < 2 || state_action_batch.is_empty() {
        return Err(UncertaintyError::NotEnoughSamples);
    }
    let mut pairs = Vec::with_capacity(z_samples.len());
    for z in z_samples {
        let mut trace_acc = 0.0;
        let mut var_acc = 0.0;
        for &(s, a) in state_action_batch {
            let query = EnsembleQuery { state: s, action: a, z: z.clone() };
            let stats = f_posterior(ensemble, &query)?;
            let (var, _) = q_variance(ensemble, &query)?;
            trace_acc += stats.trace;
            var_acc += var;
        }
        let n = state_action_batch.len() as f64;
        pairs.push((trace_acc / n, var_acc / n));
    }

    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in &pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 1e-300 || syy <= 1e-300 {
        return Ok(FqCorrelation { r_squared: 0.0, degenerate: true, pairs });
    }
    let r_squared = (sxy * sxy) / (sxx * syy);
    Ok(FqCorrelation { r_squared, degenerate: false, pairs })
}
