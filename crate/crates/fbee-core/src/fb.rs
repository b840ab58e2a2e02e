//! The forward-backward representation: an ensemble of K forward networks
//! `F_k(s,a,z) → ℝ^d` with Polyak targets, one backward network
//! `B(s) → ℝ^d` with target, the batched TD loss with orthonormality
//! regularization, reward-embedding sampling, and greedy policy extraction.
//!
//! The factorization approximates the successor measure as
//! `M^{π_z}(s0,a0,·) ≈ ⟨F(s0,a0,z), B(·)⟩ ρ(·)` with `π_z` greedy in
//! `⟨F(s,a,z), z⟩`. Reward embeddings are kept at norm √d everywhere.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::env::FeatureMap;
use crate::explore::ReplayBuffer;
use crate::nn::{adam_step, AdamState, ForwardCache, Mlp, MlpGrads, NnError};

#[derive(Debug, Error)]
pub enum FbError {
    #[error("embedding dimension must be ≥ 1, got {0}")]
    BadDim(usize),
    #[error("ensemble needs K ≥ 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("embedding dimension must be ≥ 2 for an operational ensemble, got {0}")]
    DimTooSmall(usize),
    #[error("member {member} out of range (K = {k})")]
    MemberOutOfRange { member: usize, k: usize },
    #[error("batch must contain at least 2 transitions, got {0}")]
    BatchTooSmall(usize),
    #[error("batch field lengths disagree")]
    BatchShape,
    #[error("network shapes inconsistent with encoding: {0}")]
    ShapeInconsistent(String),
    #[error("non-finite value in loss term `{term}`")]
    NonFiniteLoss { term: &'static str },
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A d-dimensional reward embedding addressing one policy/task.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardEmbedding(pub Array1<f64>);

impl RewardEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }

    pub fn values(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    /// Rescale to norm √d. A (numerically) zero vector cannot be rescaled
    /// and is returned unchanged with `zero = true`.
    pub fn rescaled_to_sqrt_d(mut self) -> (Self, bool) {
        let norm = self.norm();
        if norm < 1e-12 {
            return (self, true);
        }
        let target = (self.dim() as f64).sqrt();
        self.0.mapv_inplace(|v| v * target / norm);
        (self, false)
    }
}

/// Uniform sample from the radius-√d sphere: `z = √d · g/‖g‖`, `g` Gaussian.
pub fn sample_z_sphere(d: usize, rng: &mut ChaCha8Rng) -> Result<RewardEmbedding, FbError> {
    if d == 0 {
        return Err(FbError::BadDim(d));
    }
    loop {
        let g: Array1<f64> = Array1::from_iter((0..d).map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v
        }));
        let norm = g.dot(&g).sqrt();
        if norm > 1e-12 {
            let scale = (d as f64).sqrt() / norm;
            return Ok(RewardEmbedding(g * scale));
        }
    }
}

/// How states and actions become network inputs: one-hot state (or the
/// feature map when the reward-prior is enabled), one-hot action, raw z.
#[derive(Debug, Clone)]
pub struct Encoding {
    n_states: usize,
    n_actions: usize,
    feature_map: Option<FeatureMap>,
}

impl Encoding {
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, feature_map: None }
    }

    pub fn with_features(n_states: usize, n_actions: usize, fm: FeatureMap) -> Self {
        Self { n_states, n_actions, feature_map: Some(fm) }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn uses_features(&self) -> bool {
        self.feature_map.is_some()
    }

    pub fn state_dim(&self) -> usize {
        match &self.feature_map {
            Some(fm) => fm.feature_dim(),
            None => self.n_states,
        }
    }

    pub fn f_input_dim(&self, d: usize) -> usize {
        self.state_dim() + self.n_actions + d
    }

    pub fn b_input_dim(&self) -> usize {
        self.state_dim()
    }

    fn write_state(&self, out: &mut [f64], state: usize) {
        match &self.feature_map {
            Some(fm) => out.copy_from_slice(fm.map(state).as_slice().unwrap()),
            None => out[state] = 1.0,
        }
    }

    /// Input matrix rows for F at `(s_i, a_i, z_i)`.
    pub fn f_input_matrix(&self, sa: &[(usize, usize)], zs: &Array2<f64>) -> Array2<f64> {
        let d = zs.ncols();
        let sd = self.state_dim();
        let mut out = Array2::zeros((sa.len(), self.f_input_dim(d)));
        for (r, &(s, a)) in sa.iter().enumerate() {
            let mut row = out.row_mut(r);
            let row = row.as_slice_mut().unwrap();
            self.write_state(&mut row[..sd], s);
            row[sd + a] = 1.0;
            row[sd + self.n_actions..].copy_from_slice(zs.row(r).as_slice().unwrap());
        }
        out
    }

    /// Same, with one z shared across all rows.
    pub fn f_input_matrix_shared_z(
        &self,
        sa: &[(usize, usize)],
        z: &RewardEmbedding,
    ) -> Array2<f64> {
        let d = z.dim();
        let sd = self.state_dim();
        let mut out = Array2::zeros((sa.len(), self.f_input_dim(d)));
        let z_view = z.values();
        let z_slice = z_view.as_slice().unwrap();
        for (r, &(s, a)) in sa.iter().enumerate() {
            let mut row = out.row_mut(r);
            let row = row.as_slice_mut().unwrap();
            self.write_state(&mut row[..sd], s);
            row[sd + a] = 1.0;
            row[sd + self.n_actions..].copy_from_slice(z_slice);
        }
        out
    }

    /// Input matrix rows for B at each state.
    pub fn b_input_matrix(&self, states: &[usize]) -> Array2<f64> {
        let sd = self.state_dim();
        let mut out = Array2::zeros((states.len(), sd));
        for (r, &s) in states.iter().enumerate() {
            let mut row = out.row_mut(r);
            self.write_state(row.as_slice_mut().unwrap(), s);
        }
        out
    }

    pub fn f_input(&self, state: usize, action: usize, z: &RewardEmbedding) -> Vec<f64> {
        let sd = self.state_dim();
        let mut row = vec![0.0; self.f_input_dim(z.dim())];
        self.write_state(&mut row[..sd], state);
        row[sd + action] = 1.0;
        let z_view = z.values();
        row[sd + self.n_actions..].copy_from_slice(z_view.as_slice().unwrap());
        row
    }

    pub fn b_input(&self, state: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.state_dim()];
        self.write_state(&mut row, state);
        row
    }
}

/// Which forward map to read: the ensemble mean, one member, or one member's
/// target copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FSource {
    Mean,
    Member(usize),
    MemberTarget(usize),
}

/// Loss decomposition for one member and one batch;
/// `total = td − attraction + λ_ortho · ortho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbLossReport {
    pub td_term: f64,
    pub attraction_term: f64,
    pub ortho_term: f64,
    pub total: f64,
}

/// Which state the attraction term evaluates B at. The successor-measure
/// convention used everywhere else in this crate counts occupancy from the
/// next state, so `NextState` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttractionState {
    NextState,
    CurrentState,
}

/// How the greedy TD-target action is chosen: each member against its own
/// target net, or all members sharing the mean target scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicyMode {
    PerMember,
    SharedMean,
}

/// FB training hyperparameters. Defaults are the desk-scale table values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FbHyper {
    pub d: usize,
    pub k: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub lambda_ortho: f64,
    pub mix_ratio: f64,
    pub attraction_at: AttractionState,
    pub target_policy: TargetPolicyMode,
}

impl Default for FbHyper {
    fn default() -> Self {
        Self {
            d: 16,
            k: 5,
            hidden: vec![64, 64],
            learning_rate: 1e-4,
            batch_size: 256,
            gamma: 0.98,
            tau: 0.99,
            lambda_ortho: 1.0,
            mix_ratio: 0.3,
            attraction_at: AttractionState::NextState,
            target_policy: TargetPolicyMode::PerMember,
        }
    }
}

impl FbHyper {
    pub fn validate(&self) -> Result<(), FbError> {
        if self.d < 2 {
            return Err(FbError::DimTooSmall(self.d));
        }
        if self.k < 2 {
            return Err(FbError::TooFewMembers(self.k));
        }
        if self.batch_size < 2 {
            return Err(FbError::BatchTooSmall(self.batch_size));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(FbError::BadHyper(format!("gamma {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(FbError::BadHyper(format!("tau {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(FbError::BadHyper(format!("mix_ratio {}", self.mix_ratio)));
        }
        if self.learning_rate <= 0.0 {
            return Err(FbError::BadHyper(format!("learning_rate {}", self.learning_rate)));
        }
        if self.lambda_ortho < 0.0 {
            return Err(FbError::BadHyper(format!("lambda_ortho {}", self.lambda_ortho)));
        }
        Ok(())
    }
}

/// K forward networks with target copies plus one backward network with its
/// target. Forward evaluations are counted for read-instrumentation tests.
#[derive(Debug)]
pub struct FbEnsemble {
    encoding: Encoding,
    d: usize,
    members: Vec<Mlp>,
    member_targets: Vec<Mlp>,
    b_net: Mlp,
    b_target: Mlp,
    eval_count: AtomicU64,
}

impl Clone for FbEnsemble {
    fn clone(&self) -> Self {
        Self {
            encoding: self.encoding.clone(),
            d: self.d,
            members: self.members.clone(),
            member_targets: self.member_targets.clone(),
            b_net: self.b_net.clone(),
            b_target: self.b_target.clone(),
            eval_count: AtomicU64::new(self.eval_count.load(Ordering::Relaxed)),
        }
    }
}

impl FbEnsemble {
    /// Fresh seeded ensemble. Operational invariants: K ≥ 2, d ≥ 2.
    pub fn new(
        encoding: Encoding,
        d: usize,
        k: usize,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FbError> {
        if d < 2 {
            return Err(FbError::DimTooSmall(d));
        }
        if k < 2 {
            return Err(FbError::TooFewMembers(k));
        }
        let mut f_sizes = vec![encoding.f_input_dim(d)];
        f_sizes.extend_from_slice(hidden);
        f_sizes.push(d);
        let mut b_sizes = vec![encoding.b_input_dim()];
        b_sizes.extend_from_slice(hidden);
        b_sizes.push(d);

        let mut members = Vec::with_capacity(k);
        for _ in 0..k {
            members.push(Mlp::init(&f_sizes, rng)?);
        }
        let member_targets = members.clone();
        let b_net = Mlp::init(&b_sizes, rng)?;
        let b_target = b_net.clone();
        Ok(Self {
            encoding,
            d,
            members,
            member_targets,
            b_net,
            b_target,
            eval_count: AtomicU64::new(0),
        })
    }

    /// Reassemble from explicit parts (checkpoint loading, hand-built test
    /// fixtures). Checks mutual shape consistency only.
    pub fn from_parts(
        encoding: Encoding,
        members: Vec<Mlp>,
        member_targets: Vec<Mlp>,
        b_net: Mlp,
        b_target: Mlp,
    ) -> Result<Self, FbError> {
        if members.is_empty() || members.len() != member_targets.len() {
            return Err(FbError::ShapeInconsistent("member/target counts".into()));
        }
        let d = b_net.output_dim();
        let f_in = encoding.f_input_dim(d);
        for m in members.iter().chain(&member_targets) {
            if m.input_dim() != f_in || m.output_dim() != d {
                return Err(FbError::ShapeInconsistent(format!(
                    "F expects {}→{}, got {}→{}",
                    f_in,
                    d,
                    m.input_dim(),
                    m.output_dim()
                )));
            }
        }
        for b in [&b_net, &b_target] {
            if b.input_dim() != encoding.b_input_dim() || b.output_dim() != d {
                return Err(FbError::ShapeInconsistent("B shape".into()));
            }
        }
        Ok(Self {
            encoding,
            d,
            members,
            member_targets,
            b_net,
            b_target,
            eval_count: AtomicU64::new(0),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn encoding(&self) -> &Encoding {
        &self.encoding
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn member_targets(&self) -> &[Mlp] {
        &self.member_targets
    }

    pub fn b_net(&self) -> &Mlp {
        &self.b_net
    }

    pub fn b_target(&self) -> &Mlp {
        &self.b_target
    }

    /// Number of forward evaluations routed through this ensemble so far.
    pub fn eval_count(&self) -> u64 {
        self.eval_count.load(Ordering::Relaxed)
    }

    fn note_evals(&self, n: usize) {
        self.eval_count.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn check_member(&self, k: usize) -> Result<(), FbError> {
        if k >= self.members.len() {
            return Err(FbError::MemberOutOfRange { member: k, k: self.members.len() });
        }
        Ok(())
    }

    /// F output for one source at a single query.
    pub fn f_value(
        &self,
        source: FSource,
        state: usize,
        action: usize,
        z: &RewardEmbedding,
    ) -> Result<Array1<f64>, FbError> {
        let input = self.encoding.f_input(state, action, z);
        match source {
            FSource::Member(k) => {
                self.check_member(k)?;
                self.note_evals(1);
                Ok(Array1::from(self.members[k].forward(&input)?))
            }
            FSource::MemberTarget(k) => {
                self.check_member(k)?;
                self.note_evals(1);
                Ok(Array1::from(self.member_targets[k].forward(&input)?))
            }
            FSource::Mean => {
                self.note_evals(self.members.len());
                let mut acc: Array1<f64> = Array1::zeros(self.d);
                for m in &self.members {
                    acc += &Array1::from(m.forward(&input)?);
                }
                acc /= self.members.len() as f64;
                Ok(acc)
            }
        }
    }

    /// Batched F forward for one source over prepared input rows.
    pub fn f_forward_batch(
        &self,
        source: FSource,
        inputs: &Array2<f64>,
    ) -> Result<Array2<f64>, FbError> {
        match source {
            FSource::Member(k) => {
                self.check_member(k)?;
                self.note_evals(inputs.nrows());
                Ok(self.members[k].forward_batch(inputs)?)
            }
            FSource::MemberTarget(k) => {
                self.check_member(k)?;
                self.note_evals(inputs.nrows());
                Ok(self.member_targets[k].forward_batch(inputs)?)
            }
            FSource::Mean => {
                self.note_evals(inputs.nrows() * self.members.len());
                let mut acc = self.members[0].forward_batch(inputs)?;
                for m in &self.members[1..] {
                    acc += &m.forward_batch(inputs)?;
                }
                acc /= self.members.len() as f64;
                Ok(acc)
            }
        }
    }

    /// B output at one state.
    pub fn b_value(&self, state: usize) -> Result<Array1<f64>, FbError> {
        self.note_evals(1);
        Ok(Array1::from(self.b_net.forward(&self.encoding.b_input(state))?))
    }

    pub fn b_forward_batch(&self, states: &[usize]) -> Result<Array2<f64>, FbError> {
        self.note_evals(states.len());
        Ok(self.b_net.forward_batch(&self.encoding.b_input_matrix(states))?)
    }

    /// `⟨F(s,a,z), z⟩` for the chosen source.
    pub fn q_value(
        &self,
        source: FSource,
        state: usize,
        action: usize,
        z: &RewardEmbedding,
    ) -> Result<f64, FbError> {
        Ok(self.f_value(source, state, action, z)?.dot(&z.0))
    }

    /// `argmax_a ⟨F(s,a,z), z⟩`, ties toward the lowest action index.
    pub fn greedy_action(
        &self,
        source: FSource,
        state: usize,
        z: &RewardEmbedding,
    ) -> Result<usize, FbError> {
        let sa: Vec<(usize, usize)> =
            (0..self.encoding.n_actions()).map(|a| (state, a)).collect();
        let inputs = self.encoding.f_input_matrix_shared_z(&sa, z);
        let outs = self.f_forward_batch(source, &inputs)?;
        let scores = outs.dot(&z.0);
        Ok(argmax_lowest_tie(scores.as_slice().unwrap()))
    }
}

/// First index attaining the maximum (deterministic tie-break).
pub fn argmax_lowest_tie(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// A training z plus which branch produced it.
#[derive(Debug, Clone)]
pub struct TrainingZ {
    pub z: RewardEmbedding,
    pub from_backward_net: bool,
}

/// Training-time z draw: with probability `mix_ratio`, rescale `B(s')` of a
/// buffer-sampled transition to norm √d; otherwise sphere-sample. Falls back
/// to the sphere when the buffer is empty or `B(s')` is numerically zero.
pub fn sample_training_z(
    buffer: &ReplayBuffer,
    b_net: &Mlp,
    encoding: &Encoding,
    d: usize,
    mix_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingZ, FbError> {
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(FbError::BadHyper(format!("mix_ratio {mix_ratio}")));
    }
    let use_b = mix_ratio > 0.0 && {
        let u: f64 = rng.gen_range(0.0..1.0);
        u < mix_ratio
    };
    if use_b && !buffer.is_empty() {
        let t = buffer.sample(rng);
        let out = b_net.forward(&encoding.b_input(t.next_state))?;
        let (z, zero) = RewardEmbedding(Array1::from(out)).rescaled_to_sqrt_d();
        if !zero {
            return Ok(TrainingZ { z, from_backward_net: true });
        }
    }
    Ok(TrainingZ { z: sample_z_sphere(d, rng)?, from_backward_net: false })
}

/// One training batch: transitions, a fresh z per row, and the index
/// permutation supplying the independently-sampled future states
/// `s'_j = next_states[perm[j]]`.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub next_states: Vec<usize>,
    pub zs: Array2<f64>,
    pub perm: Vec<usize>,
}

impl LossBatch {
    pub fn new(
        states: Vec<usize>,
        actions: Vec<usize>,
        next_states: Vec<usize>,
        zs: Array2<f64>,
        perm: Vec<usize>,
    ) -> Result<Self, FbError> {
        let b = states.len();
        if b < 2 {
            return Err(FbError::BatchTooSmall(b));
        }
        if actions.len() != b || next_states.len() != b || zs.nrows() != b || perm.len() != b {
            return Err(FbError::BatchShape);
        }
        Ok(Self { states, actions, next_states, zs, perm })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Sample a batch from the buffer: uniform transitions, fresh z per row,
    /// uniform permutation for the future states.
    pub fn sample(
        buffer: &ReplayBuffer,
        batch_size: usize,
        ensemble: &FbEnsemble,
        mix_ratio: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, FbError> {
        let mut states = Vec::with_capacity(batch_size);
        let mut actions = Vec::with_capacity(batch_size);
        let mut next_states = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let t = buffer.sample(rng);
            states.push(t.state);
            actions.push(t.action);
            next_states.push(t.next_state);
        }
        let d = ensemble.d();
        let mut zs = Array2::zeros((batch_size, d));
        for r in 0..batch_size {
            let tz = sample_training_z(
                buffer,
                ensemble.b_net(),
                ensemble.encoding(),
                d,
                mix_ratio,
                rng,
            )?;
            zs.row_mut(r).assign(&tz.z.0);
        }
        let mut perm: Vec<usize> = (0..batch_size).collect();
        for i in (1..batch_size).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        Self::new(states, actions, next_states, zs, perm)
    }
}

/// Orthonormality penalty `‖C − I‖²_F` with `C = (1/b) Σ B(s)B(s)ᵀ`, plus its
/// gradient with a stop-gradient on one covariance factor (the gradient of
/// `⟨C(B) − I, D⟩` with `D = C − I` frozen at the current parameters; see
/// [`ortho_penalty_surrogate`]).
pub fn ortho_penalty(
    b_net: &Mlp,
    encoding: &Encoding,
    states: &[usize],
) -> Result<(f64, MlpGrads), FbError> {
    if states.len() < 2 {
        return Err(FbError::BatchTooSmall(states.len()));
    }
    let b = states.len() as f64;
    let inputs = encoding.b_input_matrix(states);
    let cache = b_net.forward_batch_cached(&inputs)?;
    let outs = cache.output();
    let d = outs.ncols();
    let mut frozen = outs.t().dot(outs);
    frozen /= b;
    for i in 0..d {
        frozen[[i, i]] -= 1.0;
    }
    let value: f64 = frozen.iter().map(|v| v * v).sum();
    if !value.is_finite() {
        return Err(FbError::NonFiniteLoss { term: "ortho" });
    }
    // ∂⟨C−I, D⟩/∂B_row = (2/b) · D · B_row, D symmetric.
    let mut upstream = outs.dot(&frozen);
    upstream *= 2.0 / b;
    let (grads, _) = b_net.backward_batch(&cache, &upstream, false)?;
    Ok((value, grads))
}

/// The stop-gradient surrogate `⟨C(B) − I, D⟩` for a fixed matrix `D`.
/// At `D = C(B) − I` its value equals [`ortho_penalty`]'s and its parameter
/// gradient equals the one [`ortho_penalty`] returns, which is what a
/// finite-difference check must differentiate.
pub fn ortho_penalty_surrogate(
    b_net: &Mlp,
    encoding: &Encoding,
    states: &[usize],
    frozen_d: &Array2<f64>,
) -> Result<f64, FbError> {
    let b = states.len() as f64;
    let inputs = encoding.b_input_matrix(states);
    let outs = b_net.forward_batch(&inputs)?;
    let mut c = outs.t().dot(&outs);
    c /= b;
    let d = outs.ncols();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            let cij = if i == j { c[[i, j]] - 1.0 } else { c[[i, j]] };
            acc += cij * frozen_d[[i, j]];
        }
    }
    Ok(acc)
}

/// B-side evaluations shared by every member's loss pass.
struct SharedEval {
    /// Cached forward of B at the batch's next states.
    b_next_cache: ForwardCache,
    /// Cached forward of B at the batch's current states (attraction at s_i).
    b_current_cache: Option<ForwardCache>,
    /// Target-B outputs at the next states (no gradient).
    b_tgt_next: Array2<f64>,
    /// Frozen ortho factor `D = C − I` over the future-state batch.
    ortho_frozen: Array2<f64>,
    ortho_value: f64,
}

impl SharedEval {
    fn new(ensemble: &FbEnsemble, batch: &LossBatch, hyper: &FbHyper) -> Result<Self, FbError> {
        let enc = ensemble.encoding();
        let b = batch.len() as f64;
        let next_inputs = enc.b_input_matrix(&batch.next_states);
        ensemble.note_evals(2 * batch.len());
        let b_next_cache = ensemble.b_net.forward_batch_cached(&next_inputs)?;
        let b_tgt_next = ensemble.b_target.forward_batch(&next_inputs)?;
        let b_current_cache = match hyper.attraction_at {
            AttractionState::NextState => None,
            AttractionState::CurrentState => {
                ensemble.note_evals(batch.len());
                Some(
                    ensemble
                        .b_net
                        .forward_batch_cached(&enc.b_input_matrix(&batch.states))?,
                )
            }
        };
        // The future-state set {s'_j} is the permuted next-state set, so the
        // empirical second moment is permutation-free.
        let outs = b_next_cache.output();
        let mut ortho_frozen = outs.t().dot(outs);
        ortho_frozen /= b;
        for i in 0..ensemble.d() {
            ortho_frozen[[i, i]] -= 1.0;
        }
        let ortho_value: f64 = ortho_frozen.iter().map(|v| v * v).sum();
        Ok(Self { b_next_cache, b_current_cache, b_tgt_next, ortho_frozen, ortho_value })
    }
}

/// Per-member loss pieces: the report, gradients for the member's F
/// parameters, and upstream gradients into the shared B forward passes.
struct MemberPass {
    report: FbLossReport,
    f_grads: MlpGrads,
    /// ∂total/∂B(next_states) rows.
    b_next_upstream: Array2<f64>,
    /// ∂total/∂B(states) rows (attraction at s_i only).
    b_current_upstream: Option<Array2<f64>>,
}

/// Greedy TD-target actions for every row, per member (or shared).
fn target_actions(
    ensemble: &FbEnsemble,
    batch: &LossBatch,
    hyper: &FbHyper,
) -> Result<Vec<Vec<usize>>, FbError> {
    let enc = ensemble.encoding();
    let n_a = enc.n_actions();
    let b = batch.len();
    // Rows (i, a) over all actions at the next states, z_i carried along.
    let mut sa = Vec::with_capacity(b * n_a);
    let mut zs = Array2::zeros((b * n_a, ensemble.d()));
    for i in 0..b {
        for a in 0..n_a {
            sa.push((batch.next_states[i], a));
            zs.row_mut(i * n_a + a).assign(&batch.zs.row(i));
        }
    }
    let inputs = enc.f_input_matrix(&sa, &zs);
    let k = ensemble.k();
    ensemble.note_evals(inputs.nrows() * k);
    let mut scores_per_member: Vec<Vec<f64>> = Vec::with_capacity(k);
    for m in &ensemble.member_targets {
        let outs = m.forward_batch(&inputs)?;
        let mut scores = vec![0.0; b * n_a];
        for (r, row) in outs.rows().into_iter().enumerate() {
            scores[r] = row.dot(&batch.zs.row(r / n_a));
        }
        scores_per_member.push(scores);
    }
    let pick = |scores: &[f64]| -> Vec<usize> {
        (0..b).map(|i| argmax_lowest_tie(&scores[i * n_a..(i + 1) * n_a])).collect()
    };
    match hyper.target_policy {
        TargetPolicyMode::PerMember => Ok(scores_per_member.iter().map(|s| pick(s)).collect()),
        TargetPolicyMode::SharedMean => {
            let mut mean = vec![0.0; b * n_a];
            for s in &scores_per_member {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= k as f64;
            }
            let shared = pick(&mean);
            Ok(vec![shared; k])
        }
    }
}

fn member_pass(
    ensemble: &FbEnsemble,
    k: usize,
    batch: &LossBatch,
    hyper: &FbHyper,
    shared: &SharedEval,
    tgt_actions: &[usize],
) -> Result<MemberPass, FbError> {
    let enc = ensemble.encoding();
    let b = batch.len();
    let bf = b as f64;
    let d = ensemble.d();

    // F_k at (s_i, a_i, z_i), with cache for gradients.
    let sa: Vec<(usize, usize)> =
        batch.states.iter().cloned().zip(batch.actions.iter().cloned()).collect();
    let f_inputs = enc.f_input_matrix(&sa, &batch.zs);
    ensemble.note_evals(b);
    let f_cache = ensemble.members[k].forward_batch_cached(&f_inputs)?;
    let f_out = f_cache.output().clone();

    // Target F at (s_{i+1}, a*_i, z_i); no gradient.
    let tgt_sa: Vec<(usize, usize)> = batch
        .next_states
        .iter()
        .cloned()
        .zip(tgt_actions.iter().cloned())
        .collect();
    let tgt_inputs = enc.f_input_matrix(&tgt_sa, &batch.zs);
    ensemble.note_evals(b);
    let f_tgt = ensemble.member_targets[k].forward_batch(&tgt_inputs)?;

    // Gather the permuted future-state rows.
    let b_next = shared.b_next_cache.output();
    let mut b_fut = Array2::zeros((b, d));
    let mut b_tgt_fut = Array2::zeros((b, d));
    for j in 0..b {
        b_fut.row_mut(j).assign(&b_next.row(batch.perm[j]));
        b_tgt_fut.row_mut(j).assign(&shared.b_tgt_next.row(batch.perm[j]));
    }

    // Residuals R_ij = ⟨f_i, b'_j⟩ − γ⟨f̄_i, b̄'_j⟩ over all (i,j) pairs.
    let mut residual = f_out.dot(&b_fut.t());
    residual.scaled_add(-hyper.gamma, &f_tgt.dot(&b_tgt_fut.t()));
    let td_term = residual.iter().map(|v| v * v).sum::<f64>() / (2.0 * bf * bf);
    if !td_term.is_finite() {
        return Err(FbError::NonFiniteLoss { term: "td" });
    }

    // Attraction ⟨f_i, B(s_att_i)⟩ averaged over rows.
    let b_att = match hyper.attraction_at {
        AttractionState::NextState => b_next,
        AttractionState::CurrentState => {
            shared.b_current_cache.as_ref().expect("current cache present").output()
        }
    };
    let attraction_term = f_out
        .rows()
        .into_iter()
        .zip(b_att.rows())
        .map(|(f, battr)| f.dot(&battr))
        .sum::<f64>()
        / bf;
    if !attraction_term.is_finite() {
        return Err(FbError::NonFiniteLoss { term: "attraction" });
    }

    let ortho_term = shared.ortho_value;
    let total = td_term - attraction_term + hyper.lambda_ortho * ortho_term;
    if !total.is_finite() {
        return Err(FbError::NonFiniteLoss { term: "total" });
    }

    // F upstream: (1/b²) R·b_fut − (1/b) b_att.
    let mut f_upstream = residual.dot(&b_fut);
    f_upstream /= bf * bf;
    f_upstream.scaled_add(-1.0 / bf, b_att);
    let (f_grads, _) = ensemble.members[k].backward_batch(&f_cache, &f_upstream, false)?;

    // B(next) upstream: TD scattered through the permutation, plus the ortho
    // factor, plus attraction when it reads the next state.
    let mut td_b_fut = residual.t().dot(&f_out); // rows indexed by j
    td_b_fut /= bf * bf;
    let mut b_next_upstream: Array2<f64> = Array2::zeros((b, d));
    for j in 0..b {
        let mut row = b_next_upstream.row_mut(batch.perm[j]);
        row += &td_b_fut.row(j);
    }
    let mut ortho_up = b_next.dot(&shared.ortho_frozen);
    ortho_up *= 2.0 * hyper.lambda_ortho / bf;
    b_next_upstream += &ortho_up;

    let b_current_upstream = match hyper.attraction_at {
        AttractionState::NextState => {
            b_next_upstream.scaled_add(-1.0 / bf, &f_out);
            None
        }
        AttractionState::CurrentState => {
            let mut up = f_out.clone();
            up *= -1.0 / bf;
            Some(up)
        }
    };

    Ok(MemberPass {
        report: FbLossReport { td_term, attraction_term, ortho_term, total },
        f_grads,
        b_next_upstream,
        b_current_upstream,
    })
}

fn b_grads_from_upstreams(
    ensemble: &FbEnsemble,
    shared: &SharedEval,
    next_up: &Array2<f64>,
    current_up: Option<&Array2<f64>>,
) -> Result<MlpGrads, FbError> {
    let (mut grads, _) = ensemble.b_net.backward_batch(&shared.b_next_cache, next_up, false)?;
    if let Some(up) = current_up {
        let cache = shared.b_current_cache.as_ref().expect("current cache present");
        let (g2, _) = ensemble.b_net.backward_batch(cache, up, false)?;
        grads.add_scaled(&g2, 1.0);
    }
    Ok(grads)
}

/// Loss and gradients of one ensemble member on a batch: the squared TD
/// difference over all `(i,j)` pairs, minus the attraction term, plus
/// `λ_ortho` times the orthonormality penalty. Gradients flow to the member's
/// F parameters and to B; target-network branches and the frozen ortho factor
/// carry none.
pub fn fb_loss_and_grads(
    ensemble: &FbEnsemble,
    k: usize,
    batch: &LossBatch,
    hyper: &FbHyper,
) -> Result<(FbLossReport, MlpGrads, MlpGrads), FbError> {
    ensemble.check_member(k)?;
    let shared = SharedEval::new(ensemble, batch, hyper)?;
    let tgt_actions = target_actions(ensemble, batch, hyper)?;
    let pass = member_pass(ensemble, k, batch, hyper, &shared, &tgt_actions[k])?;
    let b_grads = b_grads_from_upstreams(
        ensemble,
        &shared,
        &pass.b_next_upstream,
        pass.b_current_upstream.as_ref(),
    )?;
    Ok((pass.report, pass.f_grads, b_grads))
}

/// Member loss value with the ortho stop-gradient factor frozen at `frozen_d`
/// and TD-target actions pinned: the scalar a finite-difference check of
/// [`fb_loss_and_grads`] must differentiate.
pub fn fb_loss_value_frozen(
    ensemble: &FbEnsemble,
    k: usize,
    batch: &LossBatch,
    hyper: &FbHyper,
    frozen_d: &Array2<f64>,
    tgt_actions: &[usize],
) -> Result<f64, FbError> {
    ensemble.check_member(k)?;
    let enc = ensemble.encoding();
    let b = batch.len();
    let bf = b as f64;

    let sa: Vec<(usize, usize)> =
        batch.states.iter().cloned().zip(batch.actions.iter().cloned()).collect();
    let f_out = ensemble.members[k].forward_batch(&enc.f_input_matrix(&sa, &batch.zs))?;
    let tgt_sa: Vec<(usize, usize)> = batch
        .next_states
        .iter()
        .cloned()
        .zip(tgt_actions.iter().cloned())
        .collect();
    let f_tgt =
        ensemble.member_targets[k].forward_batch(&enc.f_input_matrix(&tgt_sa, &batch.zs))?;

    let b_next = ensemble.b_net.forward_batch(&enc.b_input_matrix(&batch.next_states))?;
    let b_tgt_next = ensemble.b_target.forward_batch(&enc.b_input_matrix(&batch.next_states))?;
    let d = ensemble.d();
    let mut b_fut = Array2::zeros((b, d));
    let mut b_tgt_fut = Array2::zeros((b, d));
    for j in 0..b {
        b_fut.row_mut(j).assign(&b_next.row(batch.perm[j]));
        b_tgt_fut.row_mut(j).assign(&b_tgt_next.row(batch.perm[j]));
    }
    let mut residual = f_out.dot(&b_fut.t());
    residual.scaled_add(-hyper.gamma, &f_tgt.dot(&b_tgt_fut.t()));
    let td = residual.iter().map(|v| v * v).sum::<f64>() / (2.0 * bf * bf);

    let b_att_owned;
    let b_att = match hyper.attraction_at {
        AttractionState::NextState => &b_next,
        AttractionState::CurrentState => {
            b_att_owned = ensemble.b_net.forward_batch(&enc.b_input_matrix(&batch.states))?;
            &b_att_owned
        }
    };
    let attraction = f_out
        .rows()
        .into_iter()
        .zip(b_att.rows())
        .map(|(f, battr)| f.dot(&battr))
        .sum::<f64>()
        / bf;

    let mut c = b_next.t().dot(&b_next);
    c /= bf;
    let mut ortho = 0.0;
    for i in 0..d {
        for j in 0..d {
            let cij = if i == j { c[[i, j]] - 1.0 } else { c[[i, j]] };
            ortho += cij * frozen_d[[i, j]];
        }
    }
    Ok(td - attraction + hyper.lambda_ortho * ortho)
}

/// Pinned TD-target actions and frozen ortho factor for FD checks.
pub fn loss_freeze_point(
    ensemble: &FbEnsemble,
    batch: &LossBatch,
    hyper: &FbHyper,
) -> Result<(Array2<f64>, Vec<Vec<usize>>), FbError> {
    let shared = SharedEval::new(ensemble, batch, hyper)?;
    let actions = target_actions(ensemble, batch, hyper)?;
    Ok((shared.ortho_frozen, actions))
}

/// Outcome of one training step.
#[derive(Debug, Clone)]
pub enum TrainOutcome {
    /// Per-member loss reports, in member order.
    Stepped(Vec<FbLossReport>),
    /// Buffer shorter than the batch size; nothing was updated.
    SkippedInsufficientBuffer,
}

/// Ensemble plus optimizer state; owns the training step.
#[derive(Debug, Clone)]
pub struct FbTrainer {
    pub ensemble: FbEnsemble,
    pub hyper: FbHyper,
    member_adam: Vec<AdamState>,
    b_adam: AdamState,
    steps_taken: u64,
    grad_accum: f64,
}

impl FbTrainer {
    pub fn new(ensemble: FbEnsemble, hyper: FbHyper) -> Result<Self, FbError> {
        hyper.validate()?;
        let member_adam = ensemble
            .members
            .iter()
            .map(|m| AdamState::new(m, hyper.learning_rate))
            .collect();
        let b_adam = AdamState::new(&ensemble.b_net, hyper.learning_rate);
        Ok(Self { ensemble, hyper, member_adam, b_adam, steps_taken: 0, grad_accum: 0.0 })
    }

    /// Reassemble from checkpoint parts.
    pub fn from_parts(
        ensemble: FbEnsemble,
        hyper: FbHyper,
        member_adam: Vec<AdamState>,
        b_adam: AdamState,
        steps_taken: u64,
        grad_accum: f64,
    ) -> Result<Self, FbError> {
        hyper.validate()?;
        if member_adam.len() != ensemble.k() {
            return Err(FbError::ShapeInconsistent("adam state count".into()));
        }
        Ok(Self { ensemble, hyper, member_adam, b_adam, steps_taken, grad_accum })
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    pub fn grad_accum(&self) -> f64 {
        self.grad_accum
    }

    pub fn member_adam(&self) -> &[AdamState] {
        &self.member_adam
    }

    pub fn b_adam(&self) -> &AdamState {
        &self.b_adam
    }

    /// One training step: sample a shared batch, one Adam update per member,
    /// one Adam update for B from member-averaged gradients, then Polyak all
    /// targets. No-op when the buffer is shorter than a batch.
    pub fn train_step(
        &mut self,
        buffer: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainOutcome, FbError> {
        if buffer.len() < self.hyper.batch_size {
            return Ok(TrainOutcome::SkippedInsufficientBuffer);
        }
        let batch = LossBatch::sample(
            buffer,
            self.hyper.batch_size,
            &self.ensemble,
            self.hyper.mix_ratio,
            rng,
        )?;
        let shared = SharedEval::new(&self.ensemble, &batch, &self.hyper)?;
        let tgt_actions = target_actions(&self.ensemble, &batch, &self.hyper)?;

        let k = self.ensemble.k();
        let mut reports = Vec::with_capacity(k);
        let mut f_grads = Vec::with_capacity(k);
        let mut b_next_up: Array2<f64> = Array2::zeros(shared.b_next_cache.output().dim());
        let mut b_cur_up: Option<Array2<f64>> = None;
        for m in 0..k {
            let pass =
                member_pass(&self.ensemble, m, &batch, &self.hyper, &shared, &tgt_actions[m])?;
            reports.push(pass.report);
            f_grads.push(pass.f_grads);
            b_next_up += &pass.b_next_upstream;
            if let Some(cur) = pass.b_current_upstream {
                match &mut b_cur_up {
                    Some(acc) => *acc += &cur,
                    None => b_cur_up = Some(cur),
                }
            }
        }
        // B gradients averaged over members.
        b_next_up /= k as f64;
        if let Some(acc) = &mut b_cur_up {
            *acc /= k as f64;
        }
        let b_grads =
            b_grads_from_upstreams(&self.ensemble, &shared, &b_next_up, b_cur_up.as_ref())?;

        for m in 0..k {
            adam_step(&mut self.ensemble.members[m], &f_grads[m], &mut self.member_adam[m])?;
        }
        adam_step(&mut self.ensemble.b_net, &b_grads, &mut self.b_adam)?;

        let tau = self.hyper.tau;
        for m in 0..k {
            crate::nn::polyak_update(
                &mut self.ensemble.member_targets[m],
                &self.ensemble.members[m],
                tau,
            )?;
        }
        crate::nn::polyak_update(&mut self.ensemble.b_target, &self.ensemble.b_net, tau)?;
        self.steps_taken += 1;
        Ok(TrainOutcome::Stepped(reports))
    }

    /// Gradient-ratio bookkeeping: call once per environment step with the
    /// configured ratio; runs a training step whenever a whole step has
    /// accumulated (ratio 0.5 → one step every 2 environment steps).
    pub fn on_env_step(
        &mut self,
        ratio: f64,
        buffer: &ReplayBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<TrainOutcome>, FbError> {
        self.grad_accum += ratio;
        let mut out = Vec::new();
        while self.grad_accum >= 1.0 - 1e-9 {
            self.grad_accum -= 1.0;
            out.push(self.train_step(buffer, rng)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Transition;
    use crate::seeding::derive_rng;
    use crate::testkit;
    use ndarray::array;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        derive_rng(seed, "fb-test")
    }

    fn tiny_ensemble(seed: u64) -> FbEnsemble {
        let enc = Encoding::one_hot(3, 2);
        FbEnsemble::new(enc, 4, 3, &[8], &mut rng(seed)).unwrap()
    }

    fn filled_buffer(n_states: usize, n_actions: usize, len: usize, seed: u64) -> ReplayBuffer {
        let mut buffer = ReplayBuffer::new(len.max(16));
        let mut r = rng(seed);
        for i in 0..len {
            buffer.push(Transition {
                state: r.gen_range(0..n_states),
                action: r.gen_range(0..n_actions),
                next_state: r.gen_range(0..n_states),
                episode_step: i % 17,
            });
        }
        buffer
    }

    #[test]
    fn sphere_sample_has_norm_sqrt_d() {
        let mut r = rng(1);
        for d in [1usize, 2, 7, 16] {
            let z = sample_z_sphere(d, &mut r).unwrap();
            assert!((z.norm() - (d as f64).sqrt()).abs() < 1e-9, "d {d}");
        }
    }

    #[test]
    fn sphere_sample_d1_is_plus_minus_one() {
        let mut r = rng(2);
        let mut seen = [false; 2];
        for _ in 0..64 {
            let z = sample_z_sphere(1, &mut r).unwrap();
            let v = z.values()[0];
            assert!((v.abs() - 1.0).abs() < 1e-12);
            seen[if v > 0.0 { 0 } else { 1 }] = true;
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn sphere_sample_coordinates_are_centered() {
        let mut r = rng(3);
        let d = 4;
        let n = 100_000;
        let mut sums = vec![0.0; d];
        for _ in 0..n {
            let z = sample_z_sphere(d, &mut r).unwrap();
            for (s, v) in sums.iter_mut().zip(z.values()) {
                *s += v;
            }
        }
        for s in sums {
            assert!((s / n as f64).abs() < 0.02);
        }
    }

    #[test]
    fn training_z_respects_mix_ratio_branches() {
        let ens = tiny_ensemble(4);
        let buffer = filled_buffer(3, 2, 64, 5);
        let mut r = rng(6);

        for _ in 0..50 {
            let tz =
                sample_training_z(&buffer, ens.b_net(), ens.encoding(), 4, 0.0, &mut r).unwrap();
            assert!(!tz.from_backward_net);
        }
        for _ in 0..50 {
            let tz =
                sample_training_z(&buffer, ens.b_net(), ens.encoding(), 4, 1.0, &mut r).unwrap();
            assert!(tz.from_backward_net);
            assert!((tz.z.norm() - 2.0).abs() < 1e-9);
        }
        let empty = ReplayBuffer::new(8);
        let tz = sample_training_z(&empty, ens.b_net(), ens.encoding(), 4, 1.0, &mut r).unwrap();
        assert!(!tz.from_backward_net);
    }

    #[test]
    fn training_z_branch_frequency_matches_mix_ratio() {
        let ens = tiny_ensemble(7);
        let buffer = filled_buffer(3, 2, 64, 8);
        let mut r = rng(9);
        let n = 10_000;
        let mut from_b = 0;
        for _ in 0..n {
            if sample_training_z(&buffer, ens.b_net(), ens.encoding(), 4, 0.3, &mut r)
                .unwrap()
                .from_backward_net
            {
                from_b += 1;
            }
        }
        let freq = from_b as f64 / n as f64;
        assert!((freq - 0.3).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn greedy_action_breaks_ties_low_and_follows_scores() {
        let b = Mlp::zeros(&[2, 2]).unwrap();

        // All-zero F: every score ties at 0 → action 0.
        let enc = Encoding::one_hot(2, 3);
        let f0 = Mlp::zeros(&[2 + 3 + 2, 2]).unwrap();
        let ens = FbEnsemble::from_parts(
            enc,
            vec![f0.clone(), f0.clone()],
            vec![f0.clone(), f0.clone()],
            b.clone(),
            b.clone(),
        )
        .unwrap();
        let z = RewardEmbedding(array![1.0, 1.0]);
        assert_eq!(ens.greedy_action(FSource::Mean, 0, &z).unwrap(), 0);

        // Linear-in-action F: ⟨F,z⟩ = 1 for action 0, 2 for action 1, 0 for 2.
        let enc = Encoding::one_hot(2, 3);
        let mut f = Mlp::zeros(&[2 + 3 + 2, 2]).unwrap();
        f.weights_mut()[0][[2, 0]] = 1.0;
        f.weights_mut()[0][[3, 0]] = 2.0;
        let ens = FbEnsemble::from_parts(
            enc,
            vec![f.clone(), f.clone()],
            vec![f.clone(), f.clone()],
            b.clone(),
            b.clone(),
        )
        .unwrap();
        let z = RewardEmbedding(array![1.0, 0.0]);
        assert_eq!(ens.greedy_action(FSource::Mean, 0, &z).unwrap(), 1);

        // Negating z on this linear-in-z score flips the ordering: argmax of
        // the negated scores is the argmin of the originals (action 2).
        let z_neg = RewardEmbedding(array![-1.0, 0.0]);
        assert_eq!(ens.greedy_action(FSource::Mean, 0, &z_neg).unwrap(), 2);
    }

    #[test]
    fn ortho_penalty_trivial_values() {
        // B ≡ 0 → C = 0 → penalty = ‖−I‖² = d.
        let enc = Encoding::one_hot(4, 2);
        let b = Mlp::zeros(&[4, 3]).unwrap();
        let (value, _) = ortho_penalty(&b, &enc, &[0, 1, 2, 3]).unwrap();
        assert!((value - 3.0).abs() < 1e-12);

        // B(s) = √3·e_s over the 3 distinct states: C = (1/3)Σ 3·e_s e_sᵀ = I.
        let enc = Encoding::one_hot(3, 2);
        let mut b = Mlp::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            b.weights_mut()[0][[i, i]] = 3.0f64.sqrt();
        }
        let (value, _) = ortho_penalty(&b, &enc, &[0, 1, 2]).unwrap();
        assert!(value.abs() < 1e-12);

        assert!(ortho_penalty(&b, &enc, &[0]).is_err());
    }

    #[test]
    fn ortho_penalty_gradient_matches_frozen_surrogate_fd() {
        let enc = Encoding::one_hot(5, 2);
        let mut r = rng(10);
        let b = Mlp::init(&[5, 8, 4], &mut r).unwrap();
        let states = vec![0, 1, 2, 3, 4, 1, 2];
        let (value, analytic) = ortho_penalty(&b, &enc, &states).unwrap();

        let outs = b.forward_batch(&enc.b_input_matrix(&states)).unwrap();
        let mut frozen = outs.t().dot(&outs);
        frozen /= states.len() as f64;
        for i in 0..4 {
            frozen[[i, i]] -= 1.0;
        }
        let surrogate_at_point = ortho_penalty_surrogate(&b, &enc, &states, &frozen).unwrap();
        assert!((surrogate_at_point - value).abs() < 1e-12);

        let fd = testkit::fd_param_grads(&b, 1e-5, |net| {
            ortho_penalty_surrogate(net, &enc, &states, &frozen).unwrap()
        });
        let err = testkit::max_rel_err(&analytic, &fd, 1e-6);
        assert!(err < 1e-4, "rel err {err}");
    }

    fn hand_batch() -> LossBatch {
        LossBatch::new(vec![0, 1], vec![0, 1], vec![1, 0], array![[1.0], [-1.0]], vec![1, 0])
            .unwrap()
    }

    /// d = 1, two states, two actions, all nets single linear layers with
    /// hand-set weights, so the full double sum fits on paper.
    fn hand_ensemble() -> FbEnsemble {
        let enc = Encoding::one_hot(2, 2);
        // F input layout: [s0, s1, a0, a1, z] → 1.
        let mut f = Mlp::zeros(&[5, 1]).unwrap();
        f.weights_mut()[0].assign(&array![[0.5], [-0.25], [0.125], [0.375], [0.75]]);
        let mut f_tgt = Mlp::zeros(&[5, 1]).unwrap();
        f_tgt.weights_mut()[0].assign(&array![[0.25], [0.5], [-0.125], [0.25], [-0.5]]);
        // B input layout: [s0, s1] → 1.
        let mut b = Mlp::zeros(&[2, 1]).unwrap();
        b.weights_mut()[0].assign(&array![[1.5], [-0.5]]);
        let mut b_tgt = Mlp::zeros(&[2, 1]).unwrap();
        b_tgt.weights_mut()[0].assign(&array![[1.0], [0.25]]);
        FbEnsemble::from_parts(enc, vec![f], vec![f_tgt], b, b_tgt).unwrap()
    }

    #[test]
    fn loss_matches_hand_computed_double_sum() {
        // Batch rows: (s=0,a=0,s'=1,z=+1), (s=1,a=1,s'=0,z=−1); perm = [1,0]
        // so future states are s'_0 = next[1] = 0, s'_1 = next[0] = 1.
        //
        //   f_0 = F(0,0,+1) = 0.5 + 0.125 + 0.75 = 1.375
        //   f_1 = F(1,1,−1) = −0.25 + 0.375 − 0.75 = −0.625
        //   b'_0 = B(0) = 1.5, b'_1 = B(1) = −0.5
        //   b̄'_0 = B̄(0) = 1.0, b̄'_1 = B̄(1) = 0.25
        //
        // Greedy target actions on the target F net with z_i fixed:
        //   row 0 (s'=1, z=+1): F̄(1,a0,1)·1 = 0.5−0.125−0.5 = −0.125;
        //                       F̄(1,a1,1)·1 = 0.5+0.25−0.5 = 0.25 → a* = 1;
        //                       f̄_0 = 0.25.
        //   row 1 (s'=0, z=−1): F̄(0,a0,−1)·(−1) = −(0.25−0.125+0.5) = −0.625;
        //                       F̄(0,a1,−1)·(−1) = −(0.25+0.25+0.5) = −1.0 → a* = 0;
        //                       f̄_1 = 0.625.
        //
        // γ = 0.5, residuals R_ij = f_i·b'_j − γ·f̄_i·b̄'_j:
        //   R_00 = 2.0625 − 0.125 = 1.9375
        //   R_01 = −0.6875 − 0.03125 = −0.71875
        //   R_10 = −0.9375 − 0.3125 = −1.25
        //   R_11 = 0.3125 − 0.078125 = 0.234375
        // td = ΣR²/(2·2²).
        //
        // Attraction at next states: (f_0·B(1) + f_1·B(0))/2 = −0.8125.
        // Ortho over the future set {0,1}: C = (1.5² + 0.5²)/2 = 1.25,
        // penalty (1.25−1)² = 0.0625. λ = 2 → total = td + 0.8125 + 0.125.
        let ens = hand_ensemble();
        let batch = hand_batch();
        let hyper =
            FbHyper { d: 1, k: 1, gamma: 0.5, lambda_ortho: 2.0, ..FbHyper::default() };
        let (report, _, _) = fb_loss_and_grads(&ens, 0, &batch, &hyper).unwrap();
        let td_expected = (1.9375f64.powi(2)
            + 0.71875f64.powi(2)
            + 1.25f64.powi(2)
            + 0.234375f64.powi(2))
            / 8.0;
        assert!((report.td_term - td_expected).abs() < 1e-12, "td {}", report.td_term);
        assert!((report.attraction_term + 0.8125).abs() < 1e-12);
        assert!((report.ortho_term - 0.0625).abs() < 1e-12);
        let total_expected = td_expected + 0.8125 + 2.0 * 0.0625;
        assert!((report.total - total_expected).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_isolate_with_gamma_zero_and_zero_b() {
        // γ = 0 kills the bootstrap branch even with a nonzero B target, and
        // B ≡ 0 zeroes the remaining TD factor and the attraction, leaving
        // total = λ·‖−I‖² = λ·d.
        let enc = Encoding::one_hot(2, 2);
        let mut f = Mlp::zeros(&[5, 1]).unwrap();
        f.weights_mut()[0].assign(&array![[1.0], [1.0], [0.5], [0.5], [0.0]]);
        let b = Mlp::zeros(&[2, 1]).unwrap();
        let mut b_tgt = Mlp::zeros(&[2, 1]).unwrap();
        b_tgt.weights_mut()[0].assign(&array![[2.0], [3.0]]);
        let ens = FbEnsemble::from_parts(enc, vec![f.clone()], vec![f], b, b_tgt).unwrap();
        let hyper = FbHyper { gamma: 0.0, lambda_ortho: 1.5, ..FbHyper::default() };
        let (report, _, _) = fb_loss_and_grads(&ens, 0, &hand_batch(), &hyper).unwrap();
        assert_eq!(report.td_term, 0.0);
        assert_eq!(report.attraction_term, 0.0);
        assert!((report.ortho_term - 1.0).abs() < 1e-12); // ‖−I_1‖² = 1
        assert!((report.total - 1.5).abs() < 1e-12);
    }

    #[test]
    fn loss_decomposition_identity_holds() {
        let mut r = rng(11);
        let enc = Encoding::one_hot(4, 3);
        let ens = FbEnsemble::new(enc, 4, 2, &[8], &mut r).unwrap();
        let buffer = filled_buffer(4, 3, 40, 12);
        let hyper =
            FbHyper { d: 4, k: 2, batch_size: 8, lambda_ortho: 0.7, ..FbHyper::default() };
        let batch = LossBatch::sample(&buffer, 8, &ens, 0.3, &mut r).unwrap();
        for k in 0..2 {
            let (report, _, _) = fb_loss_and_grads(&ens, k, &batch, &hyper).unwrap();
            let recomposed = report.td_term - report.attraction_term + 0.7 * report.ortho_term;
            assert!((report.total - recomposed).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = rng(13);
        let enc = Encoding::one_hot(4, 2);
        let mut ens = FbEnsemble::new(enc, 3, 2, &[6], &mut r).unwrap();
        // Decorrelate targets from members so the TD branch is non-trivial.
        for t in 0..2 {
            let fresh = Mlp::init(ens.member_targets()[t].sizes(), &mut r).unwrap();
            ens.member_targets[t] = fresh;
        }
        let buffer = filled_buffer(4, 2, 32, 14);
        let hyper = FbHyper {
            d: 3,
            k: 2,
            batch_size: 6,
            gamma: 0.7,
            lambda_ortho: 1.3,
            ..FbHyper::default()
        };
        let batch = LossBatch::sample(&buffer, 6, &ens, 0.5, &mut r).unwrap();
        let (frozen_d, tgt_actions) = loss_freeze_point(&ens, &batch, &hyper).unwrap();

        for k in 0..2 {
            let (_, f_grads, b_grads) = fb_loss_and_grads(&ens, k, &batch, &hyper).unwrap();

            let fd_f = testkit::fd_param_grads(&ens.members[k], 1e-5, |net| {
                let mut probe = ens.clone();
                probe.members[k] = net.clone();
                fb_loss_value_frozen(&probe, k, &batch, &hyper, &frozen_d, &tgt_actions[k])
                    .unwrap()
            });
            let err_f = testkit::max_rel_err(&f_grads, &fd_f, 1e-6);
            assert!(err_f < 1e-4, "member {k} F rel err {err_f}");

            let fd_b = testkit::fd_param_grads(ens.b_net(), 1e-5, |net| {
                let mut probe = ens.clone();
                probe.b_net = net.clone();
                fb_loss_value_frozen(&probe, k, &batch, &hyper, &frozen_d, &tgt_actions[k])
                    .unwrap()
            });
            let err_b = testkit::max_rel_err(&b_grads, &fd_b, 1e-6);
            assert!(err_b < 1e-4, "member {k} B rel err {err_b}");
        }
    }

    #[test]
    fn train_step_is_deterministic_and_skips_small_buffers() {
        let hyper =
            FbHyper { d: 4, k: 2, hidden: vec![8], batch_size: 16, ..FbHyper::default() };
        let make = || {
            let enc = Encoding::one_hot(3, 2);
            let ens = FbEnsemble::new(enc, 4, 2, &[8], &mut rng(20)).unwrap();
            FbTrainer::new(ens, hyper.clone()).unwrap()
        };
        let buffer = filled_buffer(3, 2, 64, 21);

        let mut t1 = make();
        let mut t2 = make();
        let mut r1 = rng(22);
        let mut r2 = rng(22);
        for _ in 0..5 {
            let o1 = t1.train_step(&buffer, &mut r1).unwrap();
            let o2 = t2.train_step(&buffer, &mut r2).unwrap();
            match (o1, o2) {
                (TrainOutcome::Stepped(a), TrainOutcome::Stepped(b)) => assert_eq!(
                    a.iter().map(|r| r.total).collect::<Vec<_>>(),
                    b.iter().map(|r| r.total).collect::<Vec<_>>()
                ),
                _ => panic!("expected steps"),
            }
        }
        assert_eq!(t1.ensemble.members(), t2.ensemble.members());
        assert_eq!(t1.ensemble.b_net(), t2.ensemble.b_net());

        let small = filled_buffer(3, 2, 4, 23);
        let mut t3 = make();
        assert!(matches!(
            t3.train_step(&small, &mut rng(24)).unwrap(),
            TrainOutcome::SkippedInsufficientBuffer
        ));
        assert_eq!(t3.steps_taken(), 0);
    }

    #[test]
    fn targets_move_only_by_polyak() {
        let hyper = FbHyper { d: 4, k: 2, hidden: vec![8], batch_size: 8, ..FbHyper::default() };
        let enc = Encoding::one_hot(3, 2);
        let ens = FbEnsemble::new(enc, 4, 2, &[8], &mut rng(30)).unwrap();
        let before_tgt = ens.member_targets().to_vec();
        let mut trainer = FbTrainer::new(ens, hyper).unwrap();
        let buffer = filled_buffer(3, 2, 64, 31);
        let mut r = rng(32);
        trainer.train_step(&buffer, &mut r).unwrap();
        // target = τ·old_target + (1−τ)·updated_member, exactly.
        for (m, (tgt, old)) in
            trainer.ensemble.member_targets().iter().zip(&before_tgt).enumerate()
        {
            let member = &trainer.ensemble.members()[m];
            for (l, w) in tgt.weights().iter().enumerate() {
                ndarray::Zip::from(w)
                    .and(&old.weights()[l])
                    .and(&member.weights()[l])
                    .for_each(|&t, &o, &s| {
                        assert!((t - (0.99 * o + 0.01 * s)).abs() < 1e-12);
                    });
            }
        }
    }

    #[test]
    fn gradient_ratio_accumulator_fires_every_other_step() {
        let hyper = FbHyper { d: 4, k: 2, hidden: vec![8], batch_size: 8, ..FbHyper::default() };
        let enc = Encoding::one_hot(3, 2);
        let ens = FbEnsemble::new(enc, 4, 2, &[8], &mut rng(33)).unwrap();
        let mut trainer = FbTrainer::new(ens, hyper).unwrap();
        let buffer = filled_buffer(3, 2, 64, 34);
        let mut r = rng(35);
        let mut fired = Vec::new();
        for _ in 0..8 {
            fired.push(trainer.on_env_step(0.5, &buffer, &mut r).unwrap().len());
        }
        assert_eq!(fired, vec![0, 1, 0, 1, 0, 1, 0, 1]);
        assert_eq!(trainer.steps_taken(), 4);
    }
}
