//! Finite MDP definitions, concrete environments (four-room gridworld,
//! chain, seeded random MDPs), and episode simulation.
//!
//! Environments are immutable after construction; all simulation state lives
//! in the caller's RNG and episode loop, so shared read-only use is safe.

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_rng;

const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("four-room side must be odd and ≥ 5, got {0}")]
    BadSide(usize),
    #[error("slip probability must be in [0,1), got {0}")]
    BadSlip(f64),
    #[error("chain length must be ≥ 2, got {0}")]
    BadChainLength(usize),
    #[error("branching {branching} exceeds n_states {n_states}")]
    BadBranching { branching: usize, n_states: usize },
    #[error("discount must satisfy 0 < gamma < 1, got {0}")]
    BadGamma(f64),
    #[error("{what} must be positive")]
    NotPositive { what: &'static str },
    #[error("transition row ({state},{action}) is not a probability vector (sum {sum})")]
    BadTransitionRow { state: usize, action: usize, sum: f64 },
    #[error("initial distribution is not a probability vector (sum {sum})")]
    BadInitialDist { sum: f64 },
    #[error("start region has zero initial mass")]
    EmptyStartRegion,
    #[error("state index {state} out of range (n_states {n_states})")]
    StateOutOfRange { state: usize, n_states: usize },
    #[error("action index {action} out of range (n_actions {n_actions})")]
    ActionOutOfRange { action: usize, n_actions: usize },
}

/// A finite MDP with a stochastic transition tensor and a discount in (0,1).
#[derive(Debug, Clone)]
pub struct DiscreteMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[[s, a, s']]` = probability of landing in `s'`.
    transition: Array3<f64>,
    initial_dist: Array1<f64>,
    gamma: f64,
}

impl DiscreteMdp {
    /// Validates probability rows, the initial distribution, and the discount.
    pub fn new(
        transition: Array3<f64>,
        initial_dist: Array1<f64>,
        gamma: f64,
    ) -> Result<Self, EnvError> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 {
            return Err(EnvError::NotPositive { what: "n_states" });
        }
        if n_actions == 0 {
            return Err(EnvError::NotPositive { what: "n_actions" });
        }
        assert_eq!(n_states, n_next, "transition tensor must be S x A x S");
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(EnvError::BadGamma(gamma));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > PROB_TOL || row.iter().any(|&p| p < 0.0) {
                    return Err(EnvError::BadTransitionRow { state: s, action: a, sum });
                }
            }
        }
        let init_sum = initial_dist.sum();
        if initial_dist.len() != n_states
            || (init_sum - 1.0).abs() > PROB_TOL
            || initial_dist.iter().any(|&p| p < 0.0)
        {
            return Err(EnvError::BadInitialDist { sum: init_sum });
        }
        Ok(Self { n_states, n_actions, transition, initial_dist, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_dist(&self) -> ArrayView1<'_, f64> {
        self.initial_dist.view()
    }

    /// Probability row over next states for `(state, action)`.
    pub fn next_state_dist(&self, state: usize, action: usize) -> ArrayView1<'_, f64> {
        self.transition.slice(ndarray::s![state, action, ..])
    }

    pub fn check_state(&self, state: usize) -> Result<(), EnvError> {
        if state >= self.n_states {
            return Err(EnvError::StateOutOfRange { state, n_states: self.n_states });
        }
        Ok(())
    }

    pub fn check_action(&self, action: usize) -> Result<(), EnvError> {
        if action >= self.n_actions {
            return Err(EnvError::ActionOutOfRange { action, n_actions: self.n_actions });
        }
        Ok(())
    }
}

/// One environment step: the evidence unit stored in the replay buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub episode_step: usize,
}

/// Deterministic total map from states to feature vectors.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    feature_dim: usize,
    /// Row `s` is the feature vector of state `s`.
    table: Array2<f64>,
}

impl FeatureMap {
    pub fn new(table: Array2<f64>) -> Self {
        let feature_dim = table.ncols();
        Self { feature_dim, table }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn map(&self, state: usize) -> ArrayView1<'_, f64> {
        self.table.row(state)
    }
}

/// Fixed-horizon episode description, optionally restricting the initial
/// distribution to a subset of states.
#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub horizon: usize,
    pub start_region: Option<Vec<usize>>,
}

impl EpisodeSpec {
    pub fn new(horizon: usize, start_region: Option<Vec<usize>>) -> Result<Self, EnvError> {
        if horizon == 0 {
            return Err(EnvError::NotPositive { what: "horizon" });
        }
        Ok(Self { horizon, start_region })
    }

    /// ρ0 restricted to the start region and renormalized.
    pub fn effective_initial_dist(&self, mdp: &DiscreteMdp) -> Result<Array1<f64>, EnvError> {
        let mut dist = Array1::zeros(mdp.n_states());
        match &self.start_region {
            None => dist.assign(&mdp.initial_dist()),
            Some(region) => {
                for &s in region {
                    mdp.check_state(s)?;
                    dist[s] = mdp.initial_dist()[s];
                }
                let mass = dist.sum();
                if mass <= 0.0 {
                    return Err(EnvError::EmptyStartRegion);
                }
                dist /= mass;
            }
        }
        Ok(dist)
    }
}

/// Serializable environment definition: `kind` plus its parameters. Configs
/// reference environments through this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    FourRoom { side: usize, slip_prob: f64, gamma: f64, horizon: usize },
    Chain { n: usize, gamma: f64, horizon: usize },
    RandomMdp {
        n_states: usize,
        n_actions: usize,
        branching: usize,
        seed: u64,
        gamma: f64,
        horizon: usize,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<Environment, EnvError> {
        match *self {
            EnvSpec::FourRoom { side, slip_prob, gamma, horizon } => {
                let (mdp, fm, mut ep) = build_four_room(side, slip_prob, gamma)?;
                ep.horizon = horizon;
                if horizon == 0 {
                    return Err(EnvError::NotPositive { what: "horizon" });
                }
                Ok(Environment {
                    spec: self.clone(),
                    mdp,
                    feature_map: Some(fm),
                    episode: ep,
                })
            }
            EnvSpec::Chain { n, gamma, horizon } => {
                let mdp = build_chain(n, gamma)?;
                Ok(Environment {
                    spec: self.clone(),
                    mdp,
                    feature_map: None,
                    episode: EpisodeSpec::new(horizon, None)?,
                })
            }
            EnvSpec::RandomMdp { n_states, n_actions, branching, seed, gamma, horizon } => {
                let mdp = build_random_mdp(n_states, n_actions, branching, seed, gamma)?;
                Ok(Environment {
                    spec: self.clone(),
                    mdp,
                    feature_map: None,
                    episode: EpisodeSpec::new(horizon, None)?,
                })
            }
        }
    }

    pub fn gamma(&self) -> f64 {
        match *self {
            EnvSpec::FourRoom { gamma, .. } => gamma,
            EnvSpec::Chain { gamma, .. } => gamma,
            EnvSpec::RandomMdp { gamma, .. } => gamma,
        }
    }

    pub fn horizon(&self) -> usize {
        match *self {
            EnvSpec::FourRoom { horizon, .. } => horizon,
            EnvSpec::Chain { horizon, .. } => horizon,
            EnvSpec::RandomMdp { horizon, .. } => horizon,
        }
    }
}

/// An MDP bundled with its spec, optional feature map, and episode shape.
#[derive(Debug, Clone)]
pub struct Environment {
    pub spec: EnvSpec,
    pub mdp: DiscreteMdp,
    pub feature_map: Option<FeatureMap>,
    pub episode: EpisodeSpec,
}

/// Grid actions for the four-room world, in index order.
pub const FOUR_ROOM_ACTIONS: [(isize, isize); 4] = [
    (-1, 0), // 0: up
    (1, 0),  // 1: down
    (0, -1), // 2: left
    (0, 1),  // 3: right
];

/// Static structure of a four-room grid: wall mask, doorways, room membership.
#[derive(Debug, Clone)]
pub struct FourRoomLayout {
    pub side: usize,
    pub mid: usize,
    /// `wall[s]` — cell is part of the dividing walls (doorways excluded).
    pub wall: Vec<bool>,
    /// The four doorway cells (top, bottom, left, right arm).
    pub doorways: [usize; 4],
}

impl FourRoomLayout {
    pub fn new(side: usize) -> Result<Self, EnvError> {
        if side < 5 || side % 2 == 0 {
            return Err(EnvError::BadSide(side));
        }
        let mid = side / 2;
        let lo = mid / 2;
        let hi = mid + 1 + (side - mid - 1) / 2;
        let idx = |r: usize, c: usize| r * side + c;
        let doorways = [idx(lo, mid), idx(hi, mid), idx(mid, lo), idx(mid, hi)];
        let mut wall = vec![false; side * side];
        for r in 0..side {
            wall[idx(r, mid)] = true;
        }
        for c in 0..side {
            wall[idx(mid, c)] = true;
        }
        for d in doorways {
            wall[d] = false;
        }
        Ok(Self { side, mid, wall, doorways })
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.side + col
    }

    pub fn coords(&self, state: usize) -> (usize, usize) {
        (state / self.side, state % self.side)
    }

    pub fn is_wall(&self, state: usize) -> bool {
        self.wall[state]
    }

    /// Non-wall cells of each room: [top-left, top-right, bottom-left,
    /// bottom-right].
    pub fn rooms(&self) -> [Vec<usize>; 4] {
        let mut rooms: [Vec<usize>; 4] = Default::default();
        for r in 0..self.side {
            for c in 0..self.side {
                let s = self.index(r, c);
                if self.wall[s] || r == self.mid || c == self.mid {
                    continue;
                }
                let which = match (r < self.mid, c < self.mid) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                };
                rooms[which].push(s);
            }
        }
        rooms
    }
}

/// Four-room gridworld: `side`×`side` cells split into 4 rooms by a cross of
/// wall cells with one doorway per arm. Motion into walls or off-grid keeps
/// the agent in place; with probability `slip_prob` the chosen action is
/// replaced by a uniformly random one. Start region is the top-left room.
pub fn build_four_room(
    side: usize,
    slip_prob: f64,
    gamma: f64,
) -> Result<(DiscreteMdp, FeatureMap, EpisodeSpec), EnvError> {
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(EnvError::BadSlip(slip_prob));
    }
    let layout = FourRoomLayout::new(side)?;
    let n_states = side * side;
    let n_actions = FOUR_ROOM_ACTIONS.len();

    // Deterministic move with wall blocking; walls and off-grid absorb motion.
    let move_to = |s: usize, a: usize| -> usize {
        if layout.is_wall(s) {
            return s;
        }
        let (r, c) = layout.coords(s);
        let (dr, dc) = FOUR_ROOM_ACTIONS[a];
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 || nr >= side as isize || nc >= side as isize {
            return s;
        }
        let t = layout.index(nr as usize, nc as usize);
        if layout.is_wall(t) {
            s
        } else {
            t
        }
    };

    let mut transition = Array3::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            transition[[s, a, move_to(s, a)]] += 1.0 - slip_prob;
            for slip_a in 0..n_actions {
                transition[[s, a, move_to(s, slip_a)]] += slip_prob / n_actions as f64;
            }
        }
    }

    let free: Vec<usize> = (0..n_states).filter(|&s| !layout.is_wall(s)).collect();
    let mut initial = Array1::zeros(n_states);
    for &s in &free {
        initial[s] = 1.0 / free.len() as f64;
    }

    let mut features = Array2::zeros((n_states, 2));
    for s in 0..n_states {
        let (r, c) = layout.coords(s);
        features[[s, 0]] = (c as f64 + 0.5) / side as f64;
        features[[s, 1]] = (r as f64 + 0.5) / side as f64;
    }

    let top_left: Vec<usize> = layout.rooms()[0].clone();
    let mdp = DiscreteMdp::new(transition, initial, gamma)?;
    let episode = EpisodeSpec::new(100, Some(top_left))?;
    Ok((mdp, FeatureMap::new(features), episode))
}

/// n-state chain with actions {0: left, 1: right}; ends self-loop, ρ0 is
/// concentrated on state 0.
pub fn build_chain(n: usize, gamma: f64) -> Result<DiscreteMdp, EnvError> {
    if n < 2 {
        return Err(EnvError::BadChainLength(n));
    }
    let mut transition = Array3::zeros((n, 2, n));
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(n - 1);
        transition[[s, 0, left]] = 1.0;
        transition[[s, 1, right]] = 1.0;
    }
    let mut initial = Array1::zeros(n);
    initial[0] = 1.0;
    DiscreteMdp::new(transition, initial, gamma)
}

/// Random MDP: each `(s,a)` transitions over `branching` distinct next states
/// with exponential weights normalized to 1. Reproducible from `seed`.
pub fn build_random_mdp(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    seed: u64,
    gamma: f64,
) -> Result<DiscreteMdp, EnvError> {
    if n_states == 0 {
        return Err(EnvError::NotPositive { what: "n_states" });
    }
    if n_actions == 0 {
        return Err(EnvError::NotPositive { what: "n_actions" });
    }
    if branching == 0 {
        return Err(EnvError::NotPositive { what: "branching" });
    }
    if branching > n_states {
        return Err(EnvError::BadBranching { branching, n_states });
    }
    let mut rng = derive_rng(seed, "random-mdp");
    let mut transition = Array3::zeros((n_states, n_actions, n_states));
    let mut scratch: Vec<usize> = (0..n_states).collect();
    for s in 0..n_states {
        for a in 0..n_actions {
            // Partial Fisher-Yates: the first `branching` entries become the
            // chosen successor set.
            for i in 0..branching {
                let j = rng.gen_range(i..n_states);
                scratch.swap(i, j);
            }
            let mut weights = Vec::with_capacity(branching);
            let mut total = 0.0;
            for _ in 0..branching {
                let u: f64 = rng.gen_range(1e-12..1.0);
                let w = -u.ln();
                weights.push(w);
                total += w;
            }
            for i in 0..branching {
                transition[[s, a, scratch[i]]] = weights[i] / total;
            }
        }
    }
    let initial = Array1::from_elem(n_states, 1.0 / n_states as f64);
    DiscreteMdp::new(transition, initial, gamma)
}

/// Sample an index from a probability vector. Floating-point residue falls
/// through to the last index with positive mass.
pub fn sample_index(probs: ArrayView1<'_, f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Sample the next state for `(state, action)`.
pub fn step(
    mdp: &DiscreteMdp,
    state: usize,
    action: usize,
    rng: &mut ChaCha8Rng,
) -> Result<usize, EnvError> {
    mdp.check_state(state)?;
    mdp.check_action(action)?;
    Ok(sample_index(mdp.next_state_dist(state, action), rng))
}

/// Roll one episode of exactly `spec.horizon` transitions. The policy maps a
/// state to an action distribution and is re-queried every step, so callers
/// may switch behavior mid-episode.
pub fn rollout(
    mdp: &DiscreteMdp,
    spec: &EpisodeSpec,
    policy: &mut dyn FnMut(usize) -> Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Transition>, EnvError> {
    let rho = spec.effective_initial_dist(mdp)?;
    let mut state = sample_index(rho.view(), rng);
    let mut out = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let dist = policy(state);
        debug_assert_eq!(dist.len(), mdp.n_actions());
        let action = sample_index(ArrayView1::from(&dist), rng);
        let next_state = step(mdp, state, action, rng)?;
        out.push(Transition { state, action, next_state, episode_step: t });
        state = next_state;
    }
    Ok(out)
}
