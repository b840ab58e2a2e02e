//! Zero-shot task inference and evaluation: compute the reward embedding
//! z_R from relabeled buffer samples (or a goal state), roll out the greedy
//! policy π_{z_R}, and score it against the exact optimal return.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, EnvSpec, Environment, FourRoomLayout};
use crate::explore::ReplayBuffer;
use crate::fb::{FSource, FbEnsemble, FbError, RewardEmbedding};
use crate::oracle::{
    exact_policy_return_analytic, reward_from_states, value_iteration, OracleError,
};
use crate::seeding::derive_rng;

#[derive(Debug, Error)]
pub enum ZeroShotError {
    #[error("task `{0}` is not a goal task")]
    NotAGoalTask(String),
    #[error("task `{name}` reward must lie in [0,1], found {value}")]
    RewardOutOfRange { name: String, value: f64 },
    #[error("task `{name}` reward length {got} does not match n_states {expected}")]
    RewardLength { name: String, got: usize, expected: usize },
    #[error("goal state {goal} out of range for task `{name}`")]
    BadGoal { name: String, goal: usize },
    #[error("buffer is empty; reward relabeling needs data")]
    EmptyBuffer,
    #[error("n_samples must be ≥ 1")]
    NoSamples,
    #[error("n_episodes must be ≥ 1")]
    NoEpisodes,
    #[error("unknown environment kind for task suite")]
    UnknownEnvKind,
    #[error(transparent)]
    Fb(#[from] FbError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reward,
    Goal,
}

/// A downstream task: a state-indexed reward in [0,1], optionally of goal
/// kind (indicator of one cell).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub reward: Vec<f64>,
    pub kind: TaskKind,
    pub goal_state: Option<usize>,
}

impl Task {
    pub fn goal(name: impl Into<String>, goal_state: usize, n_states: usize) -> Result<Self, ZeroShotError> {
        let name = name.into();
        if goal_state >= n_states {
            return Err(ZeroShotError::BadGoal { name, goal: goal_state });
        }
        let mut reward = vec![0.0; n_states];
        reward[goal_state] = 1.0;
        Ok(Self { name, reward, kind: TaskKind::Goal, goal_state: Some(goal_state) })
    }

    pub fn dense(name: impl Into<String>, reward: Vec<f64>) -> Result<Self, ZeroShotError> {
        let name = name.into();
        for &v in &reward {
            if !(0.0..=1.0).contains(&v) {
                return Err(ZeroShotError::RewardOutOfRange { name, value: v });
            }
        }
        Ok(Self { name, reward, kind: TaskKind::Reward, goal_state: None })
    }

    pub fn check_against(&self, n_states: usize) -> Result<(), ZeroShotError> {
        if self.reward.len() != n_states {
            return Err(ZeroShotError::RewardLength {
                name: self.name.clone(),
                got: self.reward.len(),
                expected: n_states,
            });
        }
        Ok(())
    }

    /// The (s,a) reward table the oracles expect (state reward broadcast).
    pub fn reward_table(&self, n_actions: usize) -> Array2<f64> {
        reward_from_states(&self.reward, n_actions)
    }
}

/// z_R inference output: the pre-rescale average, the √d-rescaled embedding,
/// and whether the average was numerically zero.
#[derive(Debug, Clone)]
pub struct InferredZ {
    pub raw: Array1<f64>,
    pub z: RewardEmbedding,
    pub zero: bool,
}

/// `z_R = avg over relabeled buffer samples of r(s')·B(s')`, rescaled to √d.
///
/// Relabeling uses next states, matching the distribution B is trained on.
/// When the buffer is no larger than `n_samples` the whole buffer is
/// relabeled once (deterministic); otherwise `n_samples` transitions are
/// drawn uniformly with replacement.
pub fn infer_z_reward(
    task: &Task,
    buffer: &ReplayBuffer,
    ensemble: &FbEnsemble,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<InferredZ, ZeroShotError> {
    if n_samples == 0 {
        return Err(ZeroShotError::NoSamples);
    }
    if buffer.is_empty() {
        return Err(ZeroShotError::EmptyBuffer);
    }
    task.check_against(ensemble.encoding().n_states())?;

    let states: Vec<usize> = if buffer.len() <= n_samples {
        buffer.iter().map(|t| t.next_state).collect()
    } else {
        (0..n_samples).map(|_| buffer.sample(rng).next_state).collect()
    };
    let d = ensemble.d();
    let mut raw: Array1<f64> = Array1::zeros(d);
    for chunk in states.chunks(2048) {
        let outs = ensemble.b_forward_batch(chunk)?;
        for (row, &s) in outs.rows().into_iter().zip(chunk) {
            let r = task.reward[s];
            if r != 0.0 {
                raw.scaled_add(r, &row);
            }
        }
    }
    raw /= states.len() as f64;
    let (z, zero) = RewardEmbedding(raw.clone()).rescaled_to_sqrt_d();
    Ok(InferredZ { raw, z, zero })
}

/// Goal-task inference: `z_R = B(goal)` rescaled to √d.
pub fn infer_z_goal(task: &Task, ensemble: &FbEnsemble) -> Result<InferredZ, ZeroShotError> {
    let goal = match (task.kind, task.goal_state) {
        (TaskKind::Goal, Some(g)) => g,
        _ => return Err(ZeroShotError::NotAGoalTask(task.name.clone())),
    };
    let raw = ensemble.b_value(goal)?;
    let (z, zero) = RewardEmbedding(raw.clone()).rescaled_to_sqrt_d();
    Ok(InferredZ { raw, z, zero })
}

/// One task's zero-shot evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    pub task: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_undiscounted: f64,
    pub optimal_return: f64,
    pub optimality_ratio: f64,
    /// Inferred embedding was numerically zero (policy degenerates to ties).
    pub zero_embedding: bool,
    /// Ratio fixed at 1 by convention because the optimal return is 0.
    pub trivial_ratio: bool,
}

/// Exact optimal discounted episode return for a task: value-iteration greedy
/// policy evaluated analytically over the episode's initial distribution and
/// horizon.
pub fn optimal_task_return(env: &Environment, task: &Task) -> Result<f64, ZeroShotError> {
    task.check_against(env.mdp.n_states())?;
    let table = task.reward_table(env.mdp.n_actions());
    let (_, policy) = value_iteration(&env.mdp, &table, 1e-10)?;
    Ok(exact_policy_return_analytic(&env.mdp, &env.episode, &policy, &table)?)
}

/// Infer z_R for the task, roll the greedy policy `π_{z_R}` (ε = 0) for
/// `n_episodes` episodes of `env.episode.horizon` steps, and report the
/// discounted return `Σ γ^t r(s_{t+1})` against the exact optimal return
/// (`optimal_return` may be passed in to reuse a cached value).
pub fn evaluate_zero_shot(
    env: &Environment,
    ensemble: &FbEnsemble,
    task: &Task,
    buffer: &ReplayBuffer,
    n_episodes: usize,
    n_reward_samples: usize,
    optimal_return: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<ZeroShotResult, ZeroShotError> {
    if n_episodes == 0 {
        return Err(ZeroShotError::NoEpisodes);
    }
    task.check_against(env.mdp.n_states())?;
    let inferred = match task.kind {
        TaskKind::Goal => infer_z_goal(task, ensemble)?,
        // An empty buffer (the step-0 baseline) has nothing to relabel, which
        // is the same degenerate case as an all-zero reward sample: fall back
        // to the zero embedding and flag it.
        TaskKind::Reward if buffer.is_empty() => {
            let d = ensemble.d();
            InferredZ {
                raw: Array1::zeros(d),
                z: RewardEmbedding(Array1::zeros(d)),
                zero: true,
            }
        }
        TaskKind::Reward => infer_z_reward(task, buffer, ensemble, n_reward_samples, rng)?,
    };
    let z = inferred.z.clone();

    let gamma = env.mdp.gamma();
    let mut returns = Vec::with_capacity(n_episodes);
    let mut undiscounted = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut policy = |s: usize| {
            let a = ensemble
                .greedy_action(FSource::Mean, s, &z)
                .expect("greedy action on valid state");
            let mut dist = vec![0.0; env.mdp.n_actions()];
            dist[a] = 1.0;
            dist
        };
        let episode = env::rollout(&env.mdp, &env.episode, &mut policy, rng)?;
        let mut g = 0.0;
        let mut plain = 0.0;
        let mut disc = 1.0;
        for t in &episode {
            g += disc * task.reward[t.next_state];
            plain += task.reward[t.next_state];
            disc *= gamma;
        }
        returns.push(g);
        undiscounted.push(plain);
    }
    let n = returns.len() as f64;
    let mean_return = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|g| (g - mean_return) * (g - mean_return)).sum::<f64>() / n;
    let std_return = var.sqrt();
    let mean_undiscounted = undiscounted.iter().sum::<f64>() / n;

    let optimal = match optimal_return {
        Some(v) => v,
        None => optimal_task_return(env, task)?,
    };
    let (optimality_ratio, trivial_ratio) = if optimal.abs() < 1e-12 {
        (1.0, true)
    } else {
        (mean_return / optimal, false)
    };
    Ok(ZeroShotResult {
        task: task.name.clone(),
        mean_return,
        std_return,
        mean_undiscounted,
        optimal_return: optimal,
        optimality_ratio,
        zero_embedding: inferred.zero,
        trivial_ratio,
    })
}

/// The fixed task suite of an environment:
/// - four-room: 12 goal tasks (3 per room) plus 2 dense shaped tasks;
/// - chain: goals at both ends;
/// - random MDP: 5 seeded random rewards in [0,1].
pub fn task_suite(env: &Environment) -> Result<Vec<Task>, ZeroShotError> {
    let n_states = env.mdp.n_states();
    match env.spec {
        EnvSpec::FourRoom { side, .. } => {
            let layout = FourRoomLayout::new(side)?;
            let mut tasks = Vec::new();
            for (room_idx, room) in layout.rooms().iter().enumerate() {
                // Deterministic spread: first, middle, and last cell of the
                // room in index order.
                let picks = [0, room.len() / 2, room.len() - 1];
                for (i, &p) in picks.iter().enumerate() {
                    let s = room[p];
                    tasks.push(Task::goal(format!("goal_r{room_idx}_{i}_s{s}"), s, n_states)?);
                }
            }
            // Dense task 1: reward shaped toward the bottom-right corner.
            let target = layout.index(side - 1, side - 1);
            let (tr, tc) = layout.coords(target);
            let dmax = (2 * (side - 1)) as f64;
            let mut shaped = vec![0.0; n_states];
            for s in 0..n_states {
                if layout.is_wall(s) {
                    continue;
                }
                let (r, c) = layout.coords(s);
                let dist = (r.abs_diff(tr) + c.abs_diff(tc)) as f64;
                shaped[s] = 1.0 - dist / dmax;
            }
            tasks.push(Task::dense("dense_far_corner", shaped)?);
            // Dense task 2: reward near any outer corner.
            let corners = [
                layout.index(0, 0),
                layout.index(0, side - 1),
                layout.index(side - 1, 0),
                layout.index(side - 1, side - 1),
            ];
            let mut corner_reward = vec![0.0; n_states];
            for s in 0..n_states {
                if layout.is_wall(s) {
                    continue;
                }
                let (r, c) = layout.coords(s);
                let min_dist = corners
                    .iter()
                    .map(|&g| {
                        let (gr, gc) = layout.coords(g);
                        (r.abs_diff(gr) + c.abs_diff(gc)) as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                corner_reward[s] = (1.0 - min_dist / dmax).max(0.0);
            }
            tasks.push(Task::dense("dense_corner_seeking", corner_reward)?);
            Ok(tasks)
        }
        EnvSpec::Chain { n, .. } => Ok(vec![
            Task::goal("right_end", n - 1, n_states)?,
            Task::goal("left_end", 0, n_states)?,
        ]),
        EnvSpec::RandomMdp { seed, .. } => {
            let mut rng = derive_rng(seed, "task-suite");
            let mut tasks = Vec::new();
            for i in 0..5 {
                use rand::Rng;
                let reward: Vec<f64> =
                    (0..n_states).map(|_| rng.gen_range(0.0..1.0)).collect();
                tasks.push(Task::dense(format!("random_reward_{i}"), reward)?);
            }
            Ok(tasks)
        }
    }
}
