//! The training run: pick an exploration embedding, collect data, fit the
//! ensemble, evaluate zero-shot on the task suite every `eval_period` steps,
//! checkpoint at every evaluation point, repeat until the step budget.

use std::path::PathBuf;
use std::time::Instant;

use fbee_core::env::Environment;
use fbee_core::explore::{self, CollectState, ReplayBuffer};
use fbee_core::fb::{Encoding, FbEnsemble, FbTrainer};
use fbee_core::seeding::derive_rng;
use fbee_core::zeroshot::{self, Task};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, RngState};
use crate::config::{ConfigError, RunConfig};
use crate::metrics::{
    EvalRecord, ExploreRecord, LossSummary, MetricsError, MetricsRecord, MetricsWriter,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] fbee_core::env::EnvError),
    #[error(transparent)]
    Explore(#[from] fbee_core::explore::ExploreError),
    #[error(transparent)]
    Fb(#[from] fbee_core::fb::FbError),
    #[error(transparent)]
    ZeroShot(#[from] fbee_core::zeroshot::ZeroShotError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("run io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("training aborted at step {step}: {source} (checkpoint written to {checkpoint})")]
    Aborted { step: u64, source: fbee_core::fb::FbError, checkpoint: PathBuf },
}

/// Paths and the final evaluation of a finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_eval: EvalRecord,
}

/// Task suite with exact optimal returns, computed once per run.
pub struct TaskOracle {
    pub tasks: Vec<(Task, f64)>,
}

impl TaskOracle {
    pub fn prepare(env: &Environment) -> Result<Self, RunError> {
        let mut tasks = Vec::new();
        for task in zeroshot::task_suite(env)? {
            let optimal = zeroshot::optimal_task_return(env, &task)?;
            tasks.push((task, optimal));
        }
        Ok(Self { tasks })
    }
}

fn evaluate_suite(
    env: &Environment,
    ensemble: &FbEnsemble,
    oracle: &TaskOracle,
    buffer: &ReplayBuffer,
    config: &RunConfig,
    global_step: u64,
    loss: Option<LossSummary>,
    last_z_score: Option<f64>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<EvalRecord, RunError> {
    let mut results = Vec::with_capacity(oracle.tasks.len());
    for (task, optimal) in &oracle.tasks {
        results.push(zeroshot::evaluate_zero_shot(
            env,
            ensemble,
            task,
            buffer,
            config.n_eval_episodes,
            config.n_reward_samples,
            Some(*optimal),
            rng,
        )?);
    }
    let n = results.len() as f64;
    let avg_ratio = results.iter().map(|r| r.optimality_ratio).sum::<f64>() / n;
    let avg_return = results.iter().map(|r| r.mean_return).sum::<f64>() / n;
    Ok(EvalRecord {
        global_step,
        tasks: results,
        avg_ratio,
        avg_return,
        coverage: explore::coverage(buffer, &env.mdp),
        loss,
        last_z_score,
    })
}

pub fn build_encoding(env: &Environment, config: &RunConfig) -> Encoding {
    if config.use_feature_map {
        let fm = env.feature_map.clone().expect("validated: feature map present");
        Encoding::with_features(env.mdp.n_states(), env.mdp.n_actions(), fm)
    } else {
        Encoding::one_hot(env.mdp.n_states(), env.mdp.n_actions())
    }
}

/// Execute one full run. All outputs land in `config.out_dir`:
/// `metrics.jsonl`, `checkpoint.bin`, `config.toml`, `timing.log`.
pub fn run(config: &RunConfig) -> Result<RunArtifacts, RunError> {
    config.validate()?;
    let out_dir = config.out_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .map_err(|source| RunError::Io { path: out_dir.clone(), source })?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let config_path = out_dir.join("config.toml");
    let timing_path = out_dir.join("timing.log");
    std::fs::write(&config_path, config.to_toml_string())
        .map_err(|source| RunError::Io { path: config_path.clone(), source })?;

    let wall_start = Instant::now();
    let env = config.environment.build()?;
    let mut init_rng = derive_rng(config.seed, "init");
    let mut explore_rng = derive_rng(config.seed, "explore");
    let mut train_rng = derive_rng(config.seed, "train");
    let mut eval_rng = derive_rng(config.seed, "eval");

    let encoding = build_encoding(&env, config);
    let ensemble =
        FbEnsemble::new(encoding, config.fb.d, config.fb.k, &config.fb.hidden, &mut init_rng)?;
    let mut trainer = FbTrainer::new(ensemble, config.fb.clone())?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let oracle = TaskOracle::prepare(&env)?;

    let mut writer = MetricsWriter::create(&metrics_path)?;
    let mut state = CollectState::default();

    let save_checkpoint = |trainer: &FbTrainer,
                           buffer: &ReplayBuffer,
                           state: &CollectState,
                           explore_rng: &rand_chacha::ChaCha8Rng,
                           train_rng: &rand_chacha::ChaCha8Rng,
                           eval_rng: &rand_chacha::ChaCha8Rng|
     -> Result<(), RunError> {
        let ckpt = Checkpoint {
            config: config.clone(),
            global_step: state.global_step,
            episode: state.episode,
            rng_explore: RngState::capture(explore_rng),
            rng_train: RngState::capture(train_rng),
            rng_eval: RngState::capture(eval_rng),
            trainer: trainer.clone(),
            buffer: buffer.clone(),
        };
        checkpoint::save(&checkpoint_path, &ckpt)?;
        Ok(())
    };

    // Step-0 baseline evaluation.
    let baseline = evaluate_suite(
        &env,
        &trainer.ensemble,
        &oracle,
        &buffer,
        config,
        0,
        None,
        None,
        &mut eval_rng,
    )?;
    writer.write(&MetricsRecord::Eval(baseline))?;

    let mut timing = String::new();
    while state.global_step < config.total_env_steps {
        let chunk = config.eval_period.min(config.total_env_steps - state.global_step) as usize;
        let log = match explore::collect(
            &env,
            &mut trainer,
            &config.strategy,
            &mut buffer,
            config.grad_ratio,
            chunk,
            &mut state,
            &mut explore_rng,
            &mut train_rng,
        ) {
            Ok(log) => log,
            Err(fbee_core::explore::ExploreError::Fb(e)) => {
                // Abort path: persist what we have plus a diagnostic.
                save_checkpoint(&trainer, &buffer, &state, &explore_rng, &train_rng, &eval_rng)?;
                return Err(RunError::Aborted {
                    step: state.global_step,
                    source: e,
                    checkpoint: checkpoint_path,
                });
            }
            Err(e) => return Err(e.into()),
        };

        // Per-episode collection rows, with running coverage.
        let running_cov = explore::coverage(&buffer, &env.mdp);
        for (i, ep) in log.episodes.iter().enumerate() {
            let last_refresh = log
                .refreshes
                .iter()
                .filter(|r| r.episode == ep.episode)
                .last();
            let (z_norm, score) = last_refresh.map(|r| (r.z_norm, r.score)).unwrap_or((0.0, 0.0));
            // Coverage is cheap but not free; report the end-of-chunk value
            // on every row of the chunk.
            let _ = i;
            writer.write(&MetricsRecord::Explore(ExploreRecord {
                global_step: ep.global_step,
                episode: ep.episode,
                z_norm,
                score,
                coverage: running_cov,
            }))?;
        }

        let loss = (log.losses.count > 0).then(|| LossSummary {
            td: log.losses.td_sum / log.losses.count as f64,
            attraction: log.losses.attraction_sum / log.losses.count as f64,
            ortho: log.losses.ortho_sum / log.losses.count as f64,
            total: log.losses.total_sum / log.losses.count as f64,
            n_member_steps: log.losses.count,
            n_skipped: log.losses.skipped,
        });
        let last_z_score = log.refreshes.last().map(|r| r.score);
        let record = evaluate_suite(
            &env,
            &trainer.ensemble,
            &oracle,
            &buffer,
            config,
            state.global_step,
            loss,
            last_z_score,
            &mut eval_rng,
        )?;
        writer.write(&MetricsRecord::Eval(record))?;
        save_checkpoint(&trainer, &buffer, &state, &explore_rng, &train_rng, &eval_rng)?;
        timing.push_str(&format!(
            "step {} elapsed {:.1}s\n",
            state.global_step,
            wall_start.elapsed().as_secs_f64()
        ));
    }

    // Wall-clock goes to the side log only; the metrics stream stays
    // byte-identical across same-seed reruns.
    std::fs::write(&timing_path, timing)
        .map_err(|source| RunError::Io { path: timing_path.clone(), source })?;

    let records = crate::metrics::read_metrics(&metrics_path)?;
    let final_eval = crate::metrics::eval_records(&records)
        .last()
        .cloned()
        .cloned()
        .expect("at least the baseline eval exists");
    Ok(RunArtifacts { out_dir, metrics_path, checkpoint_path, final_eval })
}
