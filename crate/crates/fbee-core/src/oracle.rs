//! Exact tabular computations used as ground truth: successor measures by
//! linear solve, iterative policy evaluation, value iteration, and expected
//! episode returns.
//!
//! Reward convention, used consistently everywhere in this crate: the value
//! of `(s,a)` excludes the immediate reward and counts `r(s_{t+1}, a_{t+1})`
//! discounted by `γ^t`, matching the successor measure
//! `M = Σ_{t≥0} γ^t (P_π)^{t+1}` whose occupancy starts at the next step.
//! Every row of `M` therefore carries mass `1/(1−γ)`.

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{self, DiscreteMdp, EnvError, EpisodeSpec};
use crate::linalg::{solve_lu, LinalgError};

/// Hard cap on the (s,a) and dense-solve dimension.
pub const MAX_SA: usize = 2048;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("state-action space too large for dense oracles: {sa} > {MAX_SA}")]
    TooLarge { sa: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("policy row {state} is not a probability vector (sum {sum})")]
    BadPolicyRow { state: usize, sum: f64 },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// A stochastic tabular policy: one action distribution per state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self, OracleError> {
        for (s, row) in probs.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(OracleError::BadPolicyRow { state: s, sum });
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64) }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn action_probs(&self, state: usize) -> ArrayView1<'_, f64> {
        self.probs.row(state)
    }

    pub fn sample(&self, state: usize, rng: &mut ChaCha8Rng) -> usize {
        env::sample_index(self.probs.row(state), rng)
    }

    /// Adapter for [`env::rollout`].
    pub fn as_rollout_policy(&self) -> impl FnMut(usize) -> Vec<f64> + '_ {
        move |s| self.probs.row(s).to_vec()
    }
}

/// Discounted state-action occupancy `M[(s0,a0),(s,a)]`, counting from the
/// step after `(s0,a0)`.
#[derive(Debug, Clone)]
pub struct SuccessorMeasure {
    matrix: Array2<f64>,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
}

impl SuccessorMeasure {
    pub fn sa_index(&self, state: usize, action: usize) -> usize {
        state * self.n_actions + action
    }

    pub fn entry(&self, from: (usize, usize), to: (usize, usize)) -> f64 {
        self.matrix[[self.sa_index(from.0, from.1), self.sa_index(to.0, to.1)]]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Occupancy of next states regardless of next action.
    pub fn state_marginal(&self, state: usize, action: usize) -> Array1<f64> {
        let row = self.matrix.row(self.sa_index(state, action));
        let mut out = Array1::zeros(self.n_states);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                out[s] += row[s * self.n_actions + a];
            }
        }
        out
    }
}

fn flat_sa(n_actions: usize, s: usize, a: usize) -> usize {
    s * n_actions + a
}

fn check_policy_shape(mdp: &DiscreteMdp, policy: &TabularPolicy) -> Result<(), OracleError> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(OracleError::ShapeMismatch {
            expected: format!("policy {}x{}", mdp.n_states(), mdp.n_actions()),
            got: format!("policy {}x{}", policy.n_states(), policy.n_actions()),
        });
    }
    Ok(())
}

fn check_reward_shape(mdp: &DiscreteMdp, reward: &Array2<f64>) -> Result<(), OracleError> {
    if reward.nrows() != mdp.n_states() || reward.ncols() != mdp.n_actions() {
        return Err(OracleError::ShapeMismatch {
            expected: format!("reward {}x{}", mdp.n_states(), mdp.n_actions()),
            got: format!("reward {}x{}", reward.nrows(), reward.ncols()),
        });
    }
    Ok(())
}

/// Broadcast a state-indexed reward to the `(s,a)` table the oracles expect.
pub fn reward_from_states(reward: &[f64], n_actions: usize) -> Array2<f64> {
    let mut out = Array2::zeros((reward.len(), n_actions));
    for (s, &r) in reward.iter().enumerate() {
        for a in 0..n_actions {
            out[[s, a]] = r;
        }
    }
    out
}

/// The `(s,a) → (s',a')` kernel of a policy: `P(s'|s,a)·π(a'|s')`.
fn policy_kernel(mdp: &DiscreteMdp, policy: &TabularPolicy) -> Array2<f64> {
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let sa = n_s * n_a;
    let mut kernel = Array2::zeros((sa, sa));
    for s in 0..n_s {
        for a in 0..n_a {
            let row = flat_sa(n_a, s, a);
            let next = mdp.next_state_dist(s, a);
            for s2 in 0..n_s {
                let p = next[s2];
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..n_a {
                    kernel[[row, flat_sa(n_a, s2, a2)]] = p * policy.action_probs(s2)[a2];
                }
            }
        }
    }
    kernel
}

/// Exact successor measure `M = Σ_{t≥0} γ^t (P_π)^{t+1}`, computed by solving
/// `(I − γ P_π) M = P_π`.
pub fn exact_successor_measure(
    mdp: &DiscreteMdp,
    policy: &TabularPolicy,
) -> Result<SuccessorMeasure, OracleError> {
    check_policy_shape(mdp, policy)?;
    let sa = mdp.n_states() * mdp.n_actions();
    if sa > MAX_SA {
        return Err(OracleError::TooLarge { sa });
    }
    let kernel = policy_kernel(mdp, policy);
    let mut a = Array2::eye(sa);
    a.scaled_add(-mdp.gamma(), &kernel);
    let m = solve_lu(a, kernel)?;
    Ok(SuccessorMeasure {
        matrix: m,
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        gamma: mdp.gamma(),
    })
}

/// `Q = M · r`. Excludes the immediate reward, per the crate convention.
pub fn q_from_measure(
    measure: &SuccessorMeasure,
    reward: &Array2<f64>,
) -> Result<Array2<f64>, OracleError> {
    if reward.nrows() != measure.n_states || reward.ncols() != measure.n_actions {
        return Err(OracleError::ShapeMismatch {
            expected: format!("reward {}x{}", measure.n_states, measure.n_actions),
            got: format!("reward {}x{}", reward.nrows(), reward.ncols()),
        });
    }
    let flat: Array1<f64> = Array1::from_iter(reward.iter().cloned());
    let q_flat = measure.matrix.dot(&flat);
    Ok(Array2::from_shape_vec((measure.n_states, measure.n_actions), q_flat.to_vec()).unwrap())
}

/// Iterative policy evaluation of `Q^π` — an independent route to the same
/// fixed point as `q_from_measure(exact_successor_measure(π), r)`.
pub fn policy_evaluation(
    mdp: &DiscreteMdp,
    policy: &TabularPolicy,
    reward: &Array2<f64>,
    tol: f64,
) -> Result<Array2<f64>, OracleError> {
    if tol <= 0.0 {
        return Err(OracleError::BadTolerance(tol));
    }
    check_policy_shape(mdp, policy)?;
    check_reward_shape(mdp, reward)?;
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let gamma = mdp.gamma();

    // Expected arrival value at s' under π: Σ_a' π(a'|s') (r(s',a') + γ Q(s',a')).
    let mut q: Array2<f64> = Array2::zeros((n_s, n_a));
    loop {
        let mut arrival = Array1::zeros(n_s);
        for s in 0..n_s {
            let mut v = 0.0;
            for a in 0..n_a {
                v += policy.action_probs(s)[a] * (reward[[s, a]] + gamma * q[[s, a]]);
            }
            arrival[s] = v;
        }
        let mut next_q = Array2::zeros((n_s, n_a));
        let mut delta: f64 = 0.0;
        for s in 0..n_s {
            for a in 0..n_a {
                let v = mdp.next_state_dist(s, a).dot(&arrival);
                delta = delta.max((v - q[[s, a]]).abs());
                next_q[[s, a]] = v;
            }
        }
        q = next_q;
        if delta * gamma / (1.0 - gamma) < tol * 0.5 {
            return Ok(q);
        }
    }
}

/// Value iteration to the optimal `Q` (within `tol` in sup norm) plus the
/// greedy policy, ties broken toward the lowest action index.
pub fn value_iteration(
    mdp: &DiscreteMdp,
    reward: &Array2<f64>,
    tol: f64,
) -> Result<(Array2<f64>, TabularPolicy), OracleError> {
    if tol <= 0.0 {
        return Err(OracleError::BadTolerance(tol));
    }
    check_reward_shape(mdp, reward)?;
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let gamma = mdp.gamma();

    // U(s) = max_a (r(s,a) + γ Σ_{s'} P(s'|s,a) U(s')): the optimal arrival
    // value at s including the reward earned there.
    let mut u: Array1<f64> = Array1::zeros(n_s);
    loop {
        let mut next_u = Array1::zeros(n_s);
        let mut delta: f64 = 0.0;
        for s in 0..n_s {
            let mut best = f64::NEG_INFINITY;
            for a in 0..n_a {
                let v = reward[[s, a]] + gamma * mdp.next_state_dist(s, a).dot(&u);
                if v > best {
                    best = v;
                }
            }
            delta = delta.max((best - u[s]).abs());
            next_u[s] = best;
        }
        u = next_u;
        if delta * gamma / (1.0 - gamma) < tol * 0.5 {
            break;
        }
    }

    let mut q = Array2::zeros((n_s, n_a));
    let mut greedy = vec![0usize; n_s];
    for s in 0..n_s {
        let mut best = f64::NEG_INFINITY;
        let mut best_a = 0;
        for a in 0..n_a {
            q[[s, a]] = mdp.next_state_dist(s, a).dot(&u);
            let score = reward[[s, a]] + gamma * q[[s, a]];
            if score > best + 1e-12 {
                best = score;
                best_a = a;
            }
        }
        greedy[s] = best_a;
    }
    Ok((q, TabularPolicy::deterministic(&greedy, n_a)))
}

/// Analytic expected discounted episode return
/// `E[Σ_{t=0}^{H−1} γ^t r(s_{t+1}, a_{t+1})]` with `s_0` from the episode's
/// restricted initial distribution, by backward induction over the horizon.
pub fn exact_policy_return_analytic(
    mdp: &DiscreteMdp,
    spec: &EpisodeSpec,
    policy: &TabularPolicy,
    reward: &Array2<f64>,
) -> Result<f64, OracleError> {
    check_policy_shape(mdp, policy)?;
    check_reward_shape(mdp, reward)?;
    let n_s = mdp.n_states();
    let n_a = mdp.n_actions();
    let gamma = mdp.gamma();

    // Expected immediate reward on arriving in s (the next action is drawn
    // by the policy).
    let mut arrival_reward: Array1<f64> = Array1::zeros(n_s);
    for s in 0..n_s {
        for a in 0..n_a {
            arrival_reward[s] += policy.action_probs(s)[a] * reward[[s, a]];
        }
    }

    // W_k(s): expected return with k steps remaining, starting in s.
    let mut w: Array1<f64> = Array1::zeros(n_s);
    for _ in 0..spec.horizon {
        let mut next_w: Array1<f64> = Array1::zeros(n_s);
        for s in 0..n_s {
            let mut v = 0.0;
            for a in 0..n_a {
                let pa = policy.action_probs(s)[a];
                if pa == 0.0 {
                    continue;
                }
                let row = mdp.next_state_dist(s, a);
                let mut inner = 0.0;
                for s2 in 0..n_s {
                    let p = row[s2];
                    if p != 0.0 {
                        inner += p * (arrival_reward[s2] + gamma * w[s2]);
                    }
                }
                v += pa * inner;
            }
            next_w[s] = v;
        }
        w = next_w;
    }
    let rho = spec.effective_initial_dist(mdp)?;
    Ok(rho.dot(&w))
}

/// Monte Carlo estimate of the same quantity, with its standard error.
pub fn monte_carlo_policy_return(
    mdp: &DiscreteMdp,
    spec: &EpisodeSpec,
    policy: &TabularPolicy,
    reward: &Array2<f64>,
    n_episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), OracleError> {
    check_policy_shape(mdp, policy)?;
    check_reward_shape(mdp, reward)?;
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut policy_fn = policy.as_rollout_policy();
        let episode = env::rollout(mdp, spec, &mut policy_fn, rng)?;
        drop(policy_fn);
        let mut g = 0.0;
        let mut disc = 1.0;
        for (t, tr) in episode.iter().enumerate() {
            // Reward is earned on arrival with the action taken there; the
            // final arrival's action is a fresh policy draw.
            let next_action = if t + 1 < episode.len() {
                episode[t + 1].action
            } else {
                policy.sample(tr.next_state, rng)
            };
            g += disc * reward[[tr.next_state, next_action]];
            disc *= mdp.gamma();
        }
        returns.push(g);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n.max(2.0 - 1.0);
    let std_error = (var / n).sqrt();
    Ok((mean, std_error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_chain, build_four_room, build_random_mdp, EpisodeSpec};
    use crate::seeding::derive_rng;
    use ndarray::{array, Array3};

    fn one_state_mdp(gamma: f64) -> DiscreteMdp {
        let mut t = Array3::zeros((1, 1, 1));
        t[[0, 0, 0]] = 1.0;
        DiscreteMdp::new(t, array![1.0], gamma).unwrap()
    }

    fn swap_mdp(gamma: f64) -> DiscreteMdp {
        let mut t = Array3::zeros((2, 1, 2));
        t[[0, 0, 1]] = 1.0;
        t[[1, 0, 0]] = 1.0;
        DiscreteMdp::new(t, array![1.0, 0.0], gamma).unwrap()
    }

    #[test]
    fn one_state_measure_is_geometric_sum() {
        let mdp = one_state_mdp(0.5);
        let policy = TabularPolicy::uniform(1, 1);
        let m = exact_successor_measure(&mdp, &policy).unwrap();
        assert!((m.entry((0, 0), (0, 0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn swap_measure_matches_closed_form_and_truncated_sum() {
        let mdp = swap_mdp(0.5);
        let policy = TabularPolicy::uniform(2, 1);
        let m = exact_successor_measure(&mdp, &policy).unwrap();
        // Occupancy of state 1 seen from (0,a): arrivals at t = 0,2,4,...
        let expected = 1.0 / (1.0 - 0.25);
        assert!((m.entry((0, 0), (1, 0)) - expected).abs() < 1e-12);

        // Independent route: truncate Σ_{t<50} γ^t (P_π)^{t+1}.
        let kernel = super::policy_kernel(&mdp, &policy);
        let mut acc = Array2::<f64>::zeros((2, 2));
        let mut power = kernel.clone();
        let mut disc = 1.0;
        for _ in 0..50 {
            acc.scaled_add(disc, &power);
            power = power.dot(&kernel);
            disc *= 0.5;
        }
        for i in 0..2 {
            for j in 0..2 {
                assert!((acc[[i, j]] - m.matrix()[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn measure_rows_carry_full_discounted_mass() {
        let mdp = build_random_mdp(6, 2, 3, 5, 0.9).unwrap();
        let policy = TabularPolicy::uniform(6, 2);
        let m = exact_successor_measure(&mdp, &policy).unwrap();
        let expected = 1.0 / (1.0 - 0.9);
        for row in m.matrix().rows() {
            assert!((row.sum() - expected).abs() < 1e-8);
            assert!(row.iter().all(|&v| v >= -1e-12));
        }
    }

    #[test]
    fn measure_matches_monte_carlo_rollouts() {
        // Scaled-down version of the acceptance check: one random MDP,
        // 10^4 truncated rollouts per (s0,a0) row.
        let gamma = 0.9;
        let mdp = build_random_mdp(5, 2, 3, 17, gamma).unwrap();
        let policy = TabularPolicy::uniform(5, 2);
        let m = exact_successor_measure(&mdp, &policy).unwrap();
        let mut rng = derive_rng(23, "oracle-mc");
        let horizon = 140; // gamma^140 ~ 4e-7
        let n_rollouts = 10_000;
        let mut worst: f64 = 0.0;
        for s0 in 0..5 {
            for a0 in 0..2 {
                let mut est = vec![0.0; 10];
                for _ in 0..n_rollouts {
                    let mut disc = 1.0;
                    let mut s = s0;
                    let mut a = a0;
                    for _ in 0..horizon {
                        let s2 = env::step(&mdp, s, a, &mut rng).unwrap();
                        let a2 = policy.sample(s2, &mut rng);
                        est[s2 * 2 + a2] += disc;
                        s = s2;
                        a = a2;
                        disc *= gamma;
                    }
                }
                for (idx, e) in est.iter().enumerate() {
                    let exact = m.matrix()[[s0 * 2 + a0, idx]];
                    worst = worst.max((e / n_rollouts as f64 - exact).abs());
                }
            }
        }
        assert!(worst < 0.05, "max abs deviation {worst}");
    }

    #[test]
    fn q_from_measure_trivial_cases() {
        let mdp = one_state_mdp(0.5);
        let policy = TabularPolicy::uniform(1, 1);
        let m = exact_successor_measure(&mdp, &policy).unwrap();
        let q = q_from_measure(&m, &array![[0.0]]).unwrap();
        assert_eq!(q[[0, 0]], 0.0);
        let q = q_from_measure(&m, &array![[1.0]]).unwrap();
        assert!((q[[0, 0]] - 2.0).abs() < 1e-12);
        assert!(q_from_measure(&m, &Array2::zeros((2, 1))).is_err());
    }

    #[test]
    fn q_from_measure_matches_policy_evaluation() {
        let mut rng = derive_rng(31, "oracle-pe");
        for seed in 0..5u64 {
            let mdp = build_random_mdp(8, 3, 4, seed, 0.92).unwrap();
            let policy = {
                use rand::Rng;
                let mut probs = Array2::zeros((8, 3));
                for s in 0..8 {
                    let mut total = 0.0;
                    for a in 0..3 {
                        let w: f64 = rng.gen_range(0.05..1.0);
                        probs[[s, a]] = w;
                        total += w;
                    }
                    for a in 0..3 {
                        probs[[s, a]] /= total;
                    }
                }
                TabularPolicy::new(probs).unwrap()
            };
            let reward = {
                use rand::Rng;
                let mut r = Array2::zeros((8, 3));
                r.mapv_inplace(|_: f64| rng.gen_range(0.0..1.0));
                r
            };
            let m = exact_successor_measure(&mdp, &policy).unwrap();
            let q1 = q_from_measure(&m, &reward).unwrap();
            let q2 = policy_evaluation(&mdp, &policy, &reward, 1e-10).unwrap();
            let max_diff = q1
                .iter()
                .zip(q2.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-8, "seed {seed}: {max_diff}");
        }
    }

    #[test]
    fn value_iteration_zero_reward_gives_zero_q_and_action_zero() {
        let mdp = build_random_mdp(6, 3, 2, 3, 0.9).unwrap();
        let (q, policy) = value_iteration(&mdp, &Array2::zeros((6, 3)), 1e-10).unwrap();
        assert!(q.iter().all(|&v| v.abs() < 1e-9));
        for s in 0..6 {
            assert_eq!(policy.action_probs(s)[0], 1.0);
        }
    }

    #[test]
    fn value_iteration_chain_goes_right() {
        // Hand-computed fixed point: U = (8.1, 9, 10) for reward 1 at state 2.
        let mdp = build_chain(3, 0.9).unwrap();
        let reward = reward_from_states(&[0.0, 0.0, 1.0], 2);
        let (q, policy) = value_iteration(&mdp, &reward, 1e-9).unwrap();
        assert_eq!(policy.action_probs(0)[1], 1.0);
        assert_eq!(policy.action_probs(1)[1], 1.0);
        assert!((q[[1, 1]] - 10.0).abs() < 1e-6);
        assert!((q[[0, 1]] - 9.0).abs() < 1e-6);
    }

    #[test]
    fn value_iteration_four_room_reaches_goal_room() {
        let (mdp, _, episode) = build_four_room(5, 0.0, 0.98).unwrap();
        let goal = 24; // bottom-right corner
        let reward = {
            let mut r = vec![0.0; 25];
            r[goal] = 1.0;
            reward_from_states(&r, 4)
        };
        let (_q, policy) = value_iteration(&mdp, &reward, 1e-9).unwrap();
        let mut rng = derive_rng(41, "oracle-vi-grid");
        let mut policy_fn = policy.as_rollout_policy();
        let spec = EpisodeSpec::new(30, episode.start_region.clone()).unwrap();
        let ep = env::rollout(&mdp, &spec, &mut policy_fn, &mut rng).unwrap();
        assert!(ep.iter().any(|t| t.next_state == goal), "never reached the goal cell");
    }

    #[test]
    fn greedy_policy_is_a_fixed_point_of_its_own_evaluation() {
        let mdp = build_random_mdp(7, 2, 3, 11, 0.9).unwrap();
        let mut rng = derive_rng(43, "oracle-fp");
        use rand::Rng;
        let mut reward = Array2::zeros((7, 2));
        reward.mapv_inplace(|_: f64| rng.gen_range(0.0..1.0));
        let (q, policy) = value_iteration(&mdp, &reward, 1e-10).unwrap();
        let q_eval = policy_evaluation(&mdp, &policy, &reward, 1e-12).unwrap();
        let max_diff = q
            .iter()
            .zip(q_eval.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-7, "{max_diff}");
    }

    #[test]
    fn larger_reward_gives_larger_optimal_q() {
        let mdp = build_random_mdp(6, 2, 3, 13, 0.9).unwrap();
        let mut rng = derive_rng(47, "oracle-mono");
        use rand::Rng;
        let mut r1 = Array2::zeros((6, 2));
        r1.mapv_inplace(|_: f64| rng.gen_range(0.0..1.0));
        let mut r2 = r1.clone();
        r2.mapv_inplace(|v| v + 0.3);
        let (q1, _) = value_iteration(&mdp, &r1, 1e-10).unwrap();
        let (q2, _) = value_iteration(&mdp, &r2, 1e-10).unwrap();
        assert!(q1.iter().zip(q2.iter()).all(|(a, b)| b >= &(a - 1e-9)));
    }

    #[test]
    fn analytic_return_trivial_cases() {
        let mdp = one_state_mdp(0.5);
        let spec = EpisodeSpec::new(100, None).unwrap();
        let policy = TabularPolicy::uniform(1, 1);
        let zero = exact_policy_return_analytic(&mdp, &spec, &policy, &array![[0.0]]).unwrap();
        assert_eq!(zero, 0.0);
        let one = exact_policy_return_analytic(&mdp, &spec, &policy, &array![[1.0]]).unwrap();
        assert!((one - 2.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_return_matches_monte_carlo() {
        let mdp = build_random_mdp(6, 2, 3, 19, 0.9).unwrap();
        let spec = EpisodeSpec::new(60, None).unwrap();
        let policy = TabularPolicy::uniform(6, 2);
        let mut rng = derive_rng(53, "oracle-return-mc");
        use rand::Rng;
        let mut reward = Array2::zeros((6, 2));
        reward.mapv_inplace(|_: f64| rng.gen_range(0.0..1.0));
        let analytic = exact_policy_return_analytic(&mdp, &spec, &policy, &reward).unwrap();
        let (mc, se) =
            monte_carlo_policy_return(&mdp, &spec, &policy, &reward, 10_000, &mut rng).unwrap();
        assert!(
            (analytic - mc).abs() < 3.0 * se.max(1e-9),
            "analytic {analytic} vs mc {mc} (se {se})"
        );
    }
}
