//! Versioned binary checkpoints: run config, step counters, RNG stream
//! states, every network (members, targets, B, B target) as shapes plus
//! row-major 64-bit floats, Adam accumulators, and the replay buffer.
//!
//! The encoding is canonical, so save → load → save is byte-identical.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use fbee_core::env::Transition;
use fbee_core::explore::ReplayBuffer;
use fbee_core::fb::{Encoding, FbEnsemble, FbTrainer};
use fbee_core::nn::{AdamState, Mlp};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;

const MAGIC: &[u8; 4] = b"FBCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("embedded config failed to parse: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Fb(#[from] fbee_core::fb::FbError),
    #[error(transparent)]
    Env(#[from] fbee_core::env::EnvError),
}

/// Serializable state of one ChaCha stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume or inspect a run.
pub struct Checkpoint {
    pub config: RunConfig,
    pub global_step: u64,
    pub episode: u64,
    pub rng_explore: RngState,
    pub rng_train: RngState,
    pub rng_eval: RngState,
    pub trainer: FbTrainer,
    pub buffer: ReplayBuffer,
}

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u128(&mut self, v: u128) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn bytes(&mut self, v: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(v)
    }
    fn str(&mut self, v: &str) -> std::io::Result<()> {
        self.u64(v.len() as u64)?;
        self.bytes(v.as_bytes())
    }
    fn mlp(&mut self, net: &Mlp) -> std::io::Result<()> {
        self.u32(net.sizes().len() as u32)?;
        for &s in net.sizes() {
            self.u32(s as u32)?;
        }
        for w in net.weights() {
            for &v in w.iter() {
                self.f64(v)?;
            }
        }
        for b in net.biases() {
            for &v in b.iter() {
                self.f64(v)?;
            }
        }
        Ok(())
    }
    fn adam(&mut self, state: &AdamState) -> std::io::Result<()> {
        self.u64(state.step)?;
        self.f64(state.learning_rate)?;
        self.f64(state.beta1)?;
        self.f64(state.beta2)?;
        self.f64(state.epsilon)?;
        let (mw, vw, mb, vb) = state.moments();
        for group in [mw, vw] {
            for m in group {
                for &v in m.iter() {
                    self.f64(v)?;
                }
            }
        }
        for group in [mb, vb] {
            for m in group {
                for &v in m.iter() {
                    self.f64(v)?;
                }
            }
        }
        Ok(())
    }
    fn rng(&mut self, state: &RngState) -> std::io::Result<()> {
        self.bytes(&state.seed)?;
        self.u128(state.word_pos)
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        let mut b = [0u8; 16];
        self.read_exact(&mut b)?;
        Ok(u128::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        self.inner
            .read_exact(buf)
            .map_err(|e| CheckpointError::Corrupt(format!("unexpected end of data: {e}")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let len = self.u64()? as usize;
        if len > 1 << 24 {
            return Err(CheckpointError::Corrupt(format!("string length {len} implausible")));
        }
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
    fn mlp(&mut self) -> Result<Mlp, CheckpointError> {
        let n_sizes = self.u32()? as usize;
        if !(2..=64).contains(&n_sizes) {
            return Err(CheckpointError::Corrupt(format!("layer count {n_sizes}")));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            sizes.push(self.u32()? as usize);
        }
        let mut net = Mlp::zeros(&sizes)
            .map_err(|e| CheckpointError::Corrupt(format!("bad shapes: {e}")))?;
        for w in net.weights_mut() {
            for v in w.iter_mut() {
                *v = self.f64()?;
            }
        }
        for b in net.biases_mut() {
            for v in b.iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(net)
    }
    fn adam(&mut self, net: &Mlp, fallback_lr: f64) -> Result<AdamState, CheckpointError> {
        let mut state = AdamState::new(net, fallback_lr);
        state.step = self.u64()?;
        state.learning_rate = self.f64()?;
        state.beta1 = self.f64()?;
        state.beta2 = self.f64()?;
        state.epsilon = self.f64()?;
        let (mw, vw, mb, vb) = state.moments_mut();
        for group in [mw, vw] {
            for m in group.iter_mut() {
                for v in m.iter_mut() {
                    *v = self.f64()?;
                }
            }
        }
        for group in [mb, vb] {
            for m in group.iter_mut() {
                for v in m.iter_mut() {
                    *v = self.f64()?;
                }
            }
        }
        Ok(state)
    }
    fn rng(&mut self) -> Result<RngState, CheckpointError> {
        let mut seed = [0u8; 32];
        self.read_exact(&mut seed)?;
        let word_pos = self.u128()?;
        Ok(RngState { seed, word_pos })
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    {
        let mut w = Writer { inner: &mut buf };
        w.bytes(MAGIC).unwrap();
        w.u32(VERSION).unwrap();
        w.str(&ckpt.config.to_toml_string()).unwrap();
        w.u64(ckpt.global_step).unwrap();
        w.u64(ckpt.episode).unwrap();
        w.u64(ckpt.trainer.steps_taken()).unwrap();
        w.f64(ckpt.trainer.grad_accum()).unwrap();
        w.rng(&ckpt.rng_explore).unwrap();
        w.rng(&ckpt.rng_train).unwrap();
        w.rng(&ckpt.rng_eval).unwrap();

        let ens = &ckpt.trainer.ensemble;
        w.u32(ens.k() as u32).unwrap();
        w.u32(ens.d() as u32).unwrap();
        for net in ens.members() {
            w.mlp(net).unwrap();
        }
        for net in ens.member_targets() {
            w.mlp(net).unwrap();
        }
        w.mlp(ens.b_net()).unwrap();
        w.mlp(ens.b_target()).unwrap();
        for adam in ckpt.trainer.member_adam() {
            w.adam(adam).unwrap();
        }
        w.adam(ckpt.trainer.b_adam()).unwrap();

        w.u64(ckpt.buffer.len() as u64).unwrap();
        for t in ckpt.buffer.iter() {
            w.u32(t.state as u32).unwrap();
            w.u32(t.action as u32).unwrap();
            w.u32(t.next_state as u32).unwrap();
            w.u32(t.episode_step as u32).unwrap();
        }
    }
    std::fs::write(path, &buf)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    let mut r = Reader { inner: bytes.as_slice() };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let config_text = r.str()?;
    let config = RunConfig::from_toml_str(&config_text)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let global_step = r.u64()?;
    let episode = r.u64()?;
    let trainer_steps = r.u64()?;
    let grad_accum = r.f64()?;
    let rng_explore = r.rng()?;
    let rng_train = r.rng()?;
    let rng_eval = r.rng()?;

    let k = r.u32()? as usize;
    let _d = r.u32()? as usize;
    let mut members = Vec::with_capacity(k);
    for _ in 0..k {
        members.push(r.mlp()?);
    }
    let mut member_targets = Vec::with_capacity(k);
    for _ in 0..k {
        member_targets.push(r.mlp()?);
    }
    let b_net = r.mlp()?;
    let b_target = r.mlp()?;

    let env = config.environment.build()?;
    let encoding = if config.use_feature_map {
        let fm = env.feature_map.clone().ok_or_else(|| {
            CheckpointError::BadConfig("use_feature_map without a feature map".into())
        })?;
        Encoding::with_features(env.mdp.n_states(), env.mdp.n_actions(), fm)
    } else {
        Encoding::one_hot(env.mdp.n_states(), env.mdp.n_actions())
    };
    let ensemble = FbEnsemble::from_parts(encoding, members, member_targets, b_net, b_target)?;

    let mut member_adam = Vec::with_capacity(k);
    for m in 0..k {
        member_adam.push(r.adam(&ensemble.members()[m], config.fb.learning_rate)?);
    }
    let b_adam = r.adam(ensemble.b_net(), config.fb.learning_rate)?;
    let trainer = FbTrainer::from_parts(
        ensemble,
        config.fb.clone(),
        member_adam,
        b_adam,
        trainer_steps,
        grad_accum,
    )?;

    let n = r.u64()? as usize;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    for _ in 0..n {
        let state = r.u32()? as usize;
        let action = r.u32()? as usize;
        let next_state = r.u32()? as usize;
        let episode_step = r.u32()? as usize;
        buffer.push(Transition { state, action, next_state, episode_step });
    }

    Ok(Checkpoint {
        config,
        global_step,
        episode,
        rng_explore,
        rng_train,
        rng_eval,
        trainer,
        buffer,
    })
}
