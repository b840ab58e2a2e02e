//! Exploration: uncertainty sampling over reward embeddings (Q-variance or
//! F-covariance-trace scoring), the random-z and random-action baselines,
//! the replay buffer, and the data-collection loop that interleaves training.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, DiscreteMdp, EnvError, Environment, EpisodeSpec, Transition};
use crate::fb::{
    argmax_lowest_tie, sample_z_sphere, FSource, FbEnsemble, FbError, FbLossReport, FbTrainer,
    RewardEmbedding, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("replay buffer capacity must be ≥ 1")]
    ZeroCapacity,
    #[error("uncertainty scoring needs an ensemble of K ≥ 2, got {0}")]
    TooFewMembers(usize),
    #[error("strategy `{kind:?}` needs a current reward embedding")]
    MissingZ { kind: StrategyKind },
    #[error("invalid strategy: {0}")]
    BadStrategy(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Fb(#[from] FbError),
}

/// Ring buffer of transitions in insertion order with wraparound eviction.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    /// Next write slot once the buffer is full.
    write: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "replay buffer capacity must be ≥ 1");
        Self { data: Vec::with_capacity(capacity.min(1 << 20)), capacity, write: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.write] = t;
            self.write = (self.write + 1) % self.capacity;
        }
    }

    /// i-th oldest stored transition.
    pub fn get(&self, i: usize) -> &Transition {
        assert!(i < self.data.len());
        if self.data.len() < self.capacity {
            &self.data[i]
        } else {
            &self.data[(self.write + i) % self.capacity]
        }
    }

    /// Oldest-to-newest iteration.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Uniform sample over stored transitions.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Transition {
        assert!(!self.is_empty(), "cannot sample an empty buffer");
        self.data[rng.gen_range(0..self.data.len())]
    }
}

/// Exploration strategy families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Uncertainty sampling on the projected Q-posterior variance.
    FbeeQ,
    /// Uncertainty sampling on the trace of the F-covariance.
    FbeeF,
    /// Fresh sphere z every refresh, no scoring.
    FbRandomZ,
    /// Uniform random actions; never touches the ensemble.
    RandomAction,
}

/// Where candidate scores are averaged: over a buffer-sampled state batch or
/// at the single current state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScope {
    BufferBatch,
    CurrentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationStrategy {
    pub kind: StrategyKind,
    /// Steps between z refreshes inside an episode (also refreshed at every
    /// episode start).
    pub z_update_period: usize,
    pub n_z_candidates: usize,
    pub n_score_states: usize,
    pub epsilon: f64,
    pub score_scope: ScoreScope,
}

impl Default for ExplorationStrategy {
    fn default() -> Self {
        Self {
            kind: StrategyKind::FbeeQ,
            z_update_period: 100,
            n_z_candidates: 64,
            n_score_states: 128,
            epsilon: 0.05,
            score_scope: ScoreScope::BufferBatch,
        }
    }
}

impl ExplorationStrategy {
    pub fn validate(&self) -> Result<(), ExploreError> {
        if self.z_update_period == 0 {
            return Err(ExploreError::BadStrategy("z_update_period must be ≥ 1".into()));
        }
        if self.n_z_candidates == 0 {
            return Err(ExploreError::BadStrategy("n_z_candidates must be ≥ 1".into()));
        }
        if self.n_score_states == 0 {
            return Err(ExploreError::BadStrategy("n_score_states must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(ExploreError::BadStrategy(format!(
                "epsilon must be in [0,1), got {}",
                self.epsilon,
            )));
        }
        Ok(())
    }
}

/// Result of one exploration-z selection.
#[derive(Debug, Clone)]
pub struct SelectedZ {
    pub z: RewardEmbedding,
    /// Scores of every candidate, in draw order (empty for unscored kinds).
    pub scores: Vec<f64>,
    pub chosen_index: usize,
    /// True when an empty buffer forced a plain sphere sample.
    pub fallback_sphere: bool,
}

impl SelectedZ {
    pub fn chosen_score(&self) -> f64 {
        self.scores.get(self.chosen_index).copied().unwrap_or(0.0)
    }
}

/// Mean ensemble outputs and per-member outputs at `(state × action)` rows
/// for one candidate z; scoring shares these across the state batch.
fn candidate_score(
    ensemble: &FbEnsemble,
    kind: StrategyKind,
    states: &[usize],
    z: &RewardEmbedding,
) -> Result<f64, ExploreError> {
    let n_a = ensemble.encoding().n_actions();
    let k = ensemble.k();
    let sa: Vec<(usize, usize)> = states
        .iter()
        .flat_map(|&s| (0..n_a).map(move |a| (s, a)))
        .collect();
    let inputs = ensemble.encoding().f_input_matrix_shared_z(&sa, z);
    let mut outs: Vec<Array2<f64>> = Vec::with_capacity(k);
    for m in 0..k {
        outs.push(ensemble.f_forward_batch(FSource::Member(m), &inputs)?);
    }
    let mut mean = outs[0].clone();
    for o in &outs[1..] {
        mean += o;
    }
    mean /= k as f64;
    let mean_scores = mean.dot(&z.0);

    // Spread via the pairwise identity (1/K)Σ(x−x̄)² = (1/2K²)ΣΣ(x_i−x_j)²,
    // which is exactly zero for identical members.
    let mut total = 0.0;
    let pair_norm = 2.0 * (k * k) as f64;
    for si in 0..states.len() {
        let base = si * n_a;
        let greedy =
            base + argmax_lowest_tie(&mean_scores.as_slice().unwrap()[base..base + n_a]);
        match kind {
            StrategyKind::FbeeQ => {
                let mut acc = 0.0;
                for i in 0..k {
                    let qi = outs[i].row(greedy).dot(&z.0);
                    for o in outs.iter().skip(i + 1) {
                        let qj = o.row(greedy).dot(&z.0);
                        acc += 2.0 * (qi - qj) * (qi - qj);
                    }
                }
                total += acc / pair_norm;
            }
            StrategyKind::FbeeF => {
                let mut acc = 0.0;
                for i in 0..k {
                    for o in outs.iter().skip(i + 1) {
                        let diff = &outs[i].row(greedy) - &o.row(greedy);
                        acc += 2.0 * diff.dot(&diff);
                    }
                }
                total += acc / pair_norm;
            }
            _ => unreachable!("scored kinds only"),
        }
    }
    Ok(total / states.len() as f64)
}

/// Pick the exploration embedding z^E. For the uncertainty-sampling kinds,
/// draws `n_z_candidates` sphere samples, scores each one over the state
/// batch (buffer-sampled; initial-state samples while the buffer is still
/// smaller than the batch; sphere fallback with a flag when it is empty), and
/// returns the argmax-scoring candidate, ties to the first.
pub fn select_exploration_z(
    ensemble: &FbEnsemble,
    buffer: &ReplayBuffer,
    strategy: &ExplorationStrategy,
    mdp: &DiscreteMdp,
    episode: &EpisodeSpec,
    current_state: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<SelectedZ, ExploreError> {
    let d = ensemble.d();
    match strategy.kind {
        StrategyKind::FbRandomZ | StrategyKind::RandomAction => Ok(SelectedZ {
            z: sample_z_sphere(d, rng)?,
            scores: Vec::new(),
            chosen_index: 0,
            fallback_sphere: false,
        }),
        StrategyKind::FbeeQ | StrategyKind::FbeeF => {
            if ensemble.k() < 2 {
                return Err(ExploreError::TooFewMembers(ensemble.k()));
            }
            if buffer.is_empty() {
                return Ok(SelectedZ {
                    z: sample_z_sphere(d, rng)?,
                    scores: Vec::new(),
                    chosen_index: 0,
                    fallback_sphere: true,
                });
            }
            // Score states first, then candidates (fixed draw order).
            let states: Vec<usize> = match (strategy.score_scope, current_state) {
                (ScoreScope::CurrentState, Some(s)) => vec![s],
                _ => {
                    if buffer.len() < strategy.n_score_states {
                        let rho = episode.effective_initial_dist(mdp)?;
                        (0..strategy.n_score_states)
                            .map(|_| env::sample_index(rho.view(), rng))
                            .collect()
                    } else {
                        (0..strategy.n_score_states)
                            .map(|_| buffer.sample(rng).state)
                            .collect()
                    }
                }
            };
            let candidates: Vec<RewardEmbedding> = (0..strategy.n_z_candidates)
                .map(|_| sample_z_sphere(d, rng))
                .collect::<Result<_, _>>()?;
            let mut scores = Vec::with_capacity(candidates.len());
            for z in &candidates {
                scores.push(candidate_score(ensemble, strategy.kind, &states, z)?);
            }
            let chosen_index = argmax_lowest_tie(&scores);
            Ok(SelectedZ {
                z: candidates[chosen_index].clone(),
                scores,
                chosen_index,
                fallback_sphere: false,
            })
        }
    }
}

/// One exploration action: uniform with probability ε (always uniform for
/// the random-action strategy), otherwise greedy in `⟨F̄(s,a,z), z⟩`.
pub fn exploration_action(
    strategy: &ExplorationStrategy,
    ensemble: &FbEnsemble,
    state: usize,
    current_z: Option<&RewardEmbedding>,
    rng: &mut ChaCha8Rng,
) -> Result<usize, ExploreError> {
    let n_a = ensemble.encoding().n_actions();
    if matches!(strategy.kind, StrategyKind::RandomAction) {
        return Ok(rng.gen_range(0..n_a));
    }
    let u: f64 = rng.gen_range(0.0..1.0);
    if u < strategy.epsilon {
        return Ok(rng.gen_range(0..n_a));
    }
    let z = current_z.ok_or(ExploreError::MissingZ { kind: strategy.kind })?;
    Ok(ensemble.greedy_action(FSource::Mean, state, z)?)
}

/// Aggregated loss-term means over the training steps of one collection call.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub td_sum: f64,
    pub attraction_sum: f64,
    pub ortho_sum: f64,
    pub total_sum: f64,
    pub count: u64,
    pub skipped: u64,
}

impl LossStats {
    fn absorb(&mut self, reports: &[FbLossReport]) {
        for r in reports {
            self.td_sum += r.td_term;
            self.attraction_sum += r.attraction_term;
            self.ortho_sum += r.ortho_term;
            self.total_sum += r.total;
            self.count += 1;
        }
    }

    pub fn mean_total(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total_sum / self.count as f64)
    }
}

/// One z^E refresh event.
#[derive(Debug, Clone)]
pub struct ZRefreshRow {
    pub global_step: u64,
    pub episode: u64,
    pub z_norm: f64,
    pub score: f64,
    pub fallback_sphere: bool,
}

/// Per-episode summary.
#[derive(Debug, Clone)]
pub struct EpisodeRow {
    pub global_step: u64,
    pub episode: u64,
    pub distinct_states: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CollectLog {
    pub refreshes: Vec<ZRefreshRow>,
    pub episodes: Vec<EpisodeRow>,
    pub losses: LossStats,
    pub steps_collected: usize,
}

/// Counters that persist across collection calls within one run.
#[derive(Debug, Clone, Copy, Default)]
pub struct CollectState {
    pub global_step: u64,
    pub episode: u64,
}

/// Collect at least `n_steps` transitions in whole episodes of
/// `env.episode.horizon` steps. z^E is refreshed at every episode start and
/// every `z_update_period` steps within an episode; training steps interleave
/// at `grad_ratio` gradient steps per environment step.
#[allow(clippy::too_many_arguments)]
pub fn collect(
    env: &Environment,
    trainer: &mut FbTrainer,
    strategy: &ExplorationStrategy,
    buffer: &mut ReplayBuffer,
    grad_ratio: f64,
    n_steps: usize,
    state: &mut CollectState,
    explore_rng: &mut ChaCha8Rng,
    train_rng: &mut ChaCha8Rng,
) -> Result<CollectLog, ExploreError> {
    assert!(n_steps >= 1, "n_steps must be ≥ 1");
    strategy.validate()?;
    let mut log = CollectLog::default();
    let horizon = env.episode.horizon;
    let uses_z = !matches!(strategy.kind, StrategyKind::RandomAction);
    let rho = env.episode.effective_initial_dist(&env.mdp)?;
    let mut visited = vec![false; env.mdp.n_states()];

    while log.steps_collected < n_steps {
        state.episode += 1;
        let mut s = env::sample_index(rho.view(), explore_rng);
        visited.iter_mut().for_each(|v| *v = false);
        visited[s] = true;
        let mut distinct = 1usize;
        let mut z: Option<RewardEmbedding> = None;

        for t in 0..horizon {
            if uses_z && (t == 0 || t % strategy.z_update_period == 0) {
                let selected = select_exploration_z(
                    &trainer.ensemble,
                    buffer,
                    strategy,
                    &env.mdp,
                    &env.episode,
                    Some(s),
                    explore_rng,
                )?;
                log.refreshes.push(ZRefreshRow {
                    global_step: state.global_step,
                    episode: state.episode,
                    z_norm: selected.z.norm(),
                    score: selected.chosen_score(),
                    fallback_sphere: selected.fallback_sphere,
                });
                z = Some(selected.z);
            }
            let a =
                exploration_action(strategy, &trainer.ensemble, s, z.as_ref(), explore_rng)?;
            let s2 = env::step(&env.mdp, s, a, explore_rng)?;
            buffer.push(Transition { state: s, action: a, next_state: s2, episode_step: t });
            if !visited[s2] {
                visited[s2] = true;
                distinct += 1;
            }
            state.global_step += 1;
            log.steps_collected += 1;
            for outcome in trainer.on_env_step(grad_ratio, buffer, train_rng)? {
                match outcome {
                    TrainOutcome::Stepped(reports) => log.losses.absorb(&reports),
                    TrainOutcome::SkippedInsufficientBuffer => log.losses.skipped += 1,
                }
            }
            s = s2;
        }
        log.episodes.push(EpisodeRow {
            global_step: state.global_step,
            episode: state.episode,
            distinct_states: distinct,
            steps: horizon,
        });
    }
    Ok(log)
}

/// Fraction of states that appear in the buffer (as source or destination).
pub fn coverage(buffer: &ReplayBuffer, mdp: &DiscreteMdp) -> f64 {
    let mut seen = vec![false; mdp.n_states()];
    for t in buffer.iter() {
        seen[t.state] = true;
        seen[t.next_state] = true;
    }
    seen.iter().filter(|&&v| v).count() as f64 / mdp.n_states() as f64
}
