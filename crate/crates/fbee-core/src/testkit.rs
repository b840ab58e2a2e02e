//! Independent oracles for tests: finite-difference gradients, Monte Carlo
//! successor-measure estimation, and rank statistics.
//!
//! Nothing in this module is called by a production path; the routines here
//! deliberately recompute quantities by a different method than the code
//! they are used to check.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{self, DiscreteMdp};
use crate::nn::{Mlp, MlpGrads};
use crate::oracle::TabularPolicy;

/// Central-difference gradient of `f` with respect to every parameter of
/// `net`, one scalar evaluation pair per parameter.
pub fn fd_param_grads(net: &Mlp, h: f64, mut f: impl FnMut(&Mlp) -> f64) -> MlpGrads {
    let mut work = net.clone();
    let mut grads = MlpGrads::zeros_like(net);
    for l in 0..net.n_layers() {
        let (rows, cols) = net.weights()[l].dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = work.weights()[l][[i, j]];
                work.weights_mut()[l][[i, j]] = orig + h;
                let fp = f(&work);
                work.weights_mut()[l][[i, j]] = orig - h;
                let fm = f(&work);
                work.weights_mut()[l][[i, j]] = orig;
                grads.weights[l][[i, j]] = (fp - fm) / (2.0 * h);
            }
        }
        for j in 0..net.biases()[l].len() {
            let orig = work.biases()[l][j];
            work.biases_mut()[l][j] = orig + h;
            let fp = f(&work);
            work.biases_mut()[l][j] = orig - h;
            let fm = f(&work);
            work.biases_mut()[l][j] = orig;
            grads.biases[l][j] = (fp - fm) / (2.0 * h);
        }
    }
    grads
}

/// Worst elementwise relative error between two gradient sets;
/// `|a−b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &MlpGrads, b: &MlpGrads, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (wa, wb) in a.weights.iter().zip(&b.weights) {
        for (&x, &y) in wa.iter().zip(wb.iter()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(floor));
        }
    }
    for (ba, bb) in a.biases.iter().zip(&b.biases) {
        for (&x, &y) in ba.iter().zip(bb.iter()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(floor));
        }
    }
    worst
}

/// Random input and upstream vector for a gradient check, resampled until all
/// hidden pre-activations sit at least 1e-3 away from the rectifier kink, so
/// central differences stay on one side of it.
pub fn smooth_point(net: &Mlp, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    'attempt: for _ in 0..10_000 {
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut cur = x.clone();
        for l in 0..net.n_layers() {
            let w = &net.weights()[l];
            let b = &net.biases()[l];
            let mut pre = b.to_vec();
            for (i, &xi) in cur.iter().enumerate() {
                for (p, &wij) in pre.iter_mut().zip(w.row(i)) {
                    *p += xi * wij;
                }
            }
            if l + 1 < net.n_layers() {
                if pre.iter().any(|v| v.abs() < 1e-3) {
                    continue 'attempt;
                }
                cur = pre.into_iter().map(|v| v.max(0.0)).collect();
            }
        }
        let upstream: Vec<f64> =
            (0..net.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        return (x, upstream);
    }
    panic!("no smooth evaluation point found for gradient check");
}

/// Monte Carlo estimate of the successor measure, one batch of truncated
/// rollouts per starting `(s0,a0)` row. Occupancy of `(s_{t+1},a_{t+1})`
/// gets weight `γ^t`, matching the exact oracle's convention.
pub fn monte_carlo_successor_measure(
    mdp: &DiscreteMdp,
    policy: &TabularPolicy,
    rollouts_per_row: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let sa = n_s * n_a;
    let mut estimate = Array2::zeros((sa, sa));
    for s0 in 0..n_s {
        for a0 in 0..n_a {
            let row = s0 * n_a + a0;
            for _ in 0..rollouts_per_row {
                let mut s = s0;
                let mut a = a0;
                let mut disc = 1.0;
                for _ in 0..horizon {
                    let s2 = env::step(mdp, s, a, rng).expect("indices in range");
                    let a2 = policy.sample(s2, rng);
                    estimate[[row, s2 * n_a + a2]] += disc;
                    s = s2;
                    a = a2;
                    disc *= mdp.gamma();
                }
            }
        }
    }
    estimate /= rollouts_per_row as f64;
    estimate
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation coefficient; 0 for degenerate inputs.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}
