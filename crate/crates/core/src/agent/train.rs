use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::nearest_binary_action;
use super::replay::{ReplayBuffer, Transition};
use super::sac::{AgentError, Sac, SacHyperparams, UpdateStats};
use crate::env::{evaluate_actions, Action, ActionEvaluation, Dataset, EnvConfig, EnvState, Environment};
use crate::exec::Execution;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub hyper: SacHyperparams,
    pub init_seed: u64,
    pub explore_seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: 2000,
            hyper: SacHyperparams::default(),
            init_seed: 0,
            explore_seed: 0,
            execution: Execution::Parallel,
        }
    }
}

/// One row of the training log. Accuracies are fractions in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_steps: u64,
    pub test_ap50: f64,
    pub test_map: f64,
    pub episode_cost: f64,
    pub test_reward: f64,
    pub selections: Vec<u64>,
    pub critic_loss: f64,
    pub actor_objective: f64,
    pub wall_seconds: f64,
}

/// Deterministic-policy run over a dataset in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub protos: Array2<f64>,
    pub actions: Vec<Action>,
    pub result: ActionEvaluation,
}

pub fn evaluate_policy(sac: &Sac, data: &Dataset, cfg: &EnvConfig, exec: Execution) -> Result<PolicyEvaluation, AgentError> {
    let states = Array2::from_shape_fn((data.len(), sac.state_dim), |(r, c)| data.records[r].features[c]);
    if states.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::NonFiniteState);
    }
    let protos = sac.act_deterministic_batch(&states);
    let actions: Vec<Action> = protos.rows().into_iter().map(|r| nearest_binary_action(r.as_slice().expect("row"))).collect();
    let result = evaluate_actions(data, cfg, &actions, exec)?;
    Ok(PolicyEvaluation { protos, actions, result })
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub sac: Sac,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub env_state: EnvState,
    pub total_steps: u64,
    pub log: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let tmp = path.with_extension("tmp");
        let io = |e: std::io::Error| AgentError::Checkpoint(format!("{}: {e}", path.display()));
        let file = std::fs::File::create(&tmp).map_err(io)?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        std::io::Write::flush(&mut w).map_err(io)?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let file = std::fs::File::open(path).map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    sac: Sac,
    buffer: ReplayBuffer,
    env: Environment,
    test_data: Arc<Dataset>,
    test_cfg: EnvConfig,
    rng: ChaCha8Rng,
    total_steps: u64,
    log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(env: Environment, test_data: Arc<Dataset>, test_cfg: EnvConfig, cfg: TrainConfig) -> Result<Self, AgentError> {
        if cfg.epochs == 0 || cfg.steps_per_epoch == 0 {
            return Err(AgentError::Hyper("epochs and steps_per_epoch must be positive".into()));
        }
        let sac = Sac::new(env.data().feature_dim, env.n_providers(), cfg.hyper.clone(), cfg.init_seed)?;
        Self::check_test(&sac, &test_data)?;
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.hyper.capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.explore_seed),
            sac,
            env,
            test_data,
            test_cfg,
            total_steps: 0,
            log: Vec::new(),
            cfg,
        })
    }

    /// Continues from `ck`. `epochs` may exceed the checkpointed target.
    pub fn resume(
        ck: Checkpoint,
        mut env: Environment,
        test_data: Arc<Dataset>,
        test_cfg: EnvConfig,
        epochs: Option<usize>,
    ) -> Result<Self, AgentError> {
        if ck.sac.state_dim != env.data().feature_dim || ck.sac.n_actions != env.n_providers() {
            return Err(AgentError::Checkpoint("checkpoint dimensions do not match the trace".into()));
        }
        Self::check_test(&ck.sac, &test_data)?;
        env.restore(ck.env_state);
        let mut cfg = ck.config;
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        Ok(Self {
            cfg,
            sac: ck.sac,
            buffer: ck.buffer,
            env,
            test_data,
            test_cfg,
            rng: ck.rng,
            total_steps: ck.total_steps,
            log: ck.log,
        })
    }

    fn check_test(sac: &Sac, test: &Dataset) -> Result<(), AgentError> {
        if test.feature_dim != sac.state_dim || test.n_providers() != sac.n_actions {
            return Err(AgentError::Hyper("test dataset dimensions differ from the training dataset".into()));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            sac: self.sac.clone(),
            buffer: self.buffer.clone(),
            rng: self.rng.clone(),
            env_state: self.env.state().clone(),
            total_steps: self.total_steps,
            log: self.log.clone(),
        }
    }

    pub fn sac(&self) -> &Sac {
        &self.sac
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_finished(&self) -> bool {
        self.log.len() >= self.cfg.epochs
    }

    fn step(&mut self) -> Result<Option<UpdateStats>, AgentError> {
        if self.env.current_record().is_none() {
            self.env.reset();
        }
        let state = self.env.current_state().expect("episode in progress").to_vec();
        let n = self.env.n_providers();
        let proto: Vec<f64> = if (self.total_steps as usize) < self.cfg.hyper.start_steps {
            (0..n).map(|_| self.rng.random::<f64>()).collect()
        } else {
            self.sac.act(&state, false, &mut self.rng)?.proto
        };
        let action = nearest_binary_action(&proto);
        let out = self.env.step(&action)?;
        self.buffer.push(Transition {
            state,
            action,
            proto,
            reward: out.reward,
            next_state: out.next_state,
            done: out.done,
        });
        self.total_steps += 1;

        let h = &self.cfg.hyper;
        if self.total_steps % h.update_every as u64 != 0 || self.buffer.len() < h.batch_size {
            return Ok(None);
        }
        let mut sum = UpdateStats::default();
        let rounds = h.updates_per_round.max(1);
        for _ in 0..h.updates_per_round {
            let batch = self.buffer.sample(h.batch_size, &mut self.rng);
            let s = self.sac.update(&batch, &mut self.rng)?;
            sum.critic_loss += s.critic_loss;
            sum.actor_objective += s.actor_objective;
        }
        sum.critic_loss /= rounds as f64;
        sum.actor_objective /= rounds as f64;
        Ok(Some(sum))
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord, AgentError> {
        let start = Instant::now();
        let mut acc = UpdateStats::default();
        let mut updates = 0usize;
        for _ in 0..self.cfg.steps_per_epoch {
            if let Some(s) = self.step()? {
                acc.critic_loss += s.critic_loss;
                acc.actor_objective += s.actor_objective;
                updates += 1;
            }
        }
        let test = evaluate_policy(&self.sac, &self.test_data, &self.test_cfg, self.cfg.execution)?;
        let denom = updates.max(1) as f64;
        let rec = EpochRecord {
            epoch: self.log.len() + 1,
            total_steps: self.total_steps,
            test_ap50: test.result.metrics.ap50,
            test_map: test.result.metrics.map,
            episode_cost: test.result.mean_cost,
            test_reward: test.result.mean_reward,
            selections: test.result.selections,
            critic_loss: if updates > 0 { acc.critic_loss / denom } else { f64::NAN },
            actor_objective: if updates > 0 { acc.actor_objective / denom } else { f64::NAN },
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} ap50 {:.4} cost {:.3} reward {:.4}",
            rec.epoch,
            rec.test_ap50,
            rec.episode_cost,
            rec.test_reward
        );
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Runs the remaining epochs, writing a checkpoint after each one.
    pub fn run(&mut self, checkpoint: Option<&Path>) -> Result<&[EpochRecord], AgentError> {
        while !self.is_finished() {
            self.run_epoch()?;
            if let Some(p) = checkpoint {
                self.checkpoint().save(p)?;
            }
        }
        Ok(&self.log)
    }
}
