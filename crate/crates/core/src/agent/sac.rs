use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::policy::{coord_log_prob, PolicyOutput, LOG_STD_MAX, LOG_STD_MIN, PROTO_EPS};
use super::replay::Batch;
use crate::nn::{polyak_update, Adam, Cache, Mlp};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("state contains a non-finite value")]
    NonFiniteState,
    #[error("state has length {got}, expected {expected}")]
    StateLength { expected: usize, got: usize },
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient in {net} (loss {loss})")]
    NonFiniteGradient { net: &'static str, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacHyperparams {
    pub gamma: f64,
    pub alpha: f64,
    pub polyak: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub update_every: usize,
    pub updates_per_round: usize,
    pub start_steps: usize,
    pub capacity: usize,
    pub hidden: Vec<usize>,
    /// Scale applied to the actor's output layer at initialization.
    pub actor_out_scale: f64,
}

impl Default for SacHyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            alpha: 0.2,
            polyak: 0.995,
            lr: 1e-4,
            batch_size: 1000,
            update_every: 50,
            updates_per_round: 50,
            start_steps: 1000,
            capacity: 1_000_000,
            hidden: vec![256, 256],
            actor_out_scale: 0.01,
        }
    }
}

impl SacHyperparams {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Hyper(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0,1)");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        if !(self.polyak > 0.0 && self.polyak < 1.0) {
            return bad("polyak must lie in (0,1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.batch_size == 0 || self.update_every == 0 || self.capacity == 0 {
            return bad("batch_size, update_every and capacity must be positive");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden sizes must be positive");
        }
        Ok(())
    }
}

/// y = r + γ(1−d)(min Q − α·log π).
pub fn soft_target(reward: f64, done: f64, gamma: f64, min_q: f64, alpha: f64, log_pi: f64) -> f64 {
    reward + gamma * (1.0 - done) * (min_q - alpha * log_pi)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

/// Batched policy pass with everything the actor gradient needs.
pub(crate) struct PolicyBatch {
    pub mean: Array2<f64>,
    pub raw_log_std: Array2<f64>,
    pub eps: Array2<f64>,
    pub u: Array2<f64>,
    pub proto: Array2<f64>,
    pub log_prob: Array1<f64>,
    pub cache: Cache,
}

/// Actor, twin critics, their targets and optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sac {
    pub hyper: SacHyperparams,
    pub state_dim: usize,
    pub n_actions: usize,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
}

fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

impl Sac {
    pub fn new(state_dim: usize, n_actions: usize, hyper: SacHyperparams, init_seed: u64) -> Result<Self, AgentError> {
        hyper.validate()?;
        if state_dim == 0 || n_actions == 0 {
            return Err(AgentError::Hyper("state and action dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let sizes = |input: usize, output: usize| {
            let mut s = vec![input];
            s.extend(&hyper.hidden);
            s.push(output);
            s
        };
        let mut actor = Mlp::new(&sizes(state_dim, 2 * n_actions), &mut rng);
        actor.scale_output_layer(hyper.actor_out_scale);
        let q1 = Mlp::new(&sizes(state_dim + n_actions, 1), &mut rng);
        let q2 = Mlp::new(&sizes(state_dim + n_actions, 1), &mut rng);
        Ok(Self {
            actor_opt: Adam::new(&actor, hyper.lr),
            q1_opt: Adam::new(&q1, hyper.lr),
            q2_opt: Adam::new(&q2, hyper.lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            hyper,
            state_dim,
            n_actions,
        })
    }

    pub(crate) fn policy_batch(&self, states: &Array2<f64>, eps: Array2<f64>) -> PolicyBatch {
        let n = self.n_actions;
        let (out, cache) = self.actor.forward_cached(states);
        let mean = out.slice(s![.., ..n]).to_owned();
        let raw_log_std = out.slice(s![.., n..]).to_owned();
        let log_std = raw_log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let u = &mean + &(log_std.mapv(f64::exp) * &eps);
        let proto = u.mapv(super::policy::squash);
        let mut log_prob = Array1::zeros(states.nrows());
        for b in 0..states.nrows() {
            log_prob[b] = (0..n).map(|i| coord_log_prob(eps[[b, i]], log_std[[b, i]], u[[b, i]])).sum();
        }
        PolicyBatch { mean, raw_log_std, eps, u, proto, log_prob, cache }
    }

    fn check_state(&self, state: &[f64]) -> Result<(), AgentError> {
        if state.len() != self.state_dim {
            return Err(AgentError::StateLength { expected: self.state_dim, got: state.len() });
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(AgentError::NonFiniteState);
        }
        Ok(())
    }

    /// Samples (or, when `deterministic`, takes the mean of) the policy at `state`.
    pub fn act(&self, state: &[f64], deterministic: bool, rng: &mut impl Rng) -> Result<PolicyOutput, AgentError> {
        self.check_state(state)?;
        let x = Array2::from_shape_vec((1, state.len()), state.to_vec()).expect("row vector");
        let eps = if deterministic { Array2::zeros((1, self.n_actions)) } else { standard_normal(1, self.n_actions, rng) };
        let pb = self.policy_batch(&x, eps);
        Ok(PolicyOutput {
            mean: pb.mean.row(0).to_vec(),
            log_std: pb.raw_log_std.row(0).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).to_vec(),
            proto: pb.proto.row(0).to_vec(),
            log_prob: pb.log_prob[0],
        })
    }

    /// Deterministic proto-actions for many states at once.
    pub fn act_deterministic_batch(&self, states: &Array2<f64>) -> Array2<f64> {
        let out = self.actor.forward(states);
        out.slice(s![.., ..self.n_actions]).mapv(super::policy::squash)
    }

    fn critic_input(states: &Array2<f64>, protos: &Array2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[states.view(), protos.view()]).expect("matching rows")
    }

    pub fn q_target(&self, batch: &Batch, rng: &mut impl Rng) -> Array1<f64> {
        let eps = standard_normal(batch.len(), self.n_actions, rng);
        let next = self.policy_batch(&batch.next_states, eps);
        let x = Self::critic_input(&batch.next_states, &next.proto);
        let q1 = self.q1_target.forward(&x);
        let q2 = self.q2_target.forward(&x);
        Array1::from_shape_fn(batch.len(), |b| {
            let min_q = q1[[b, 0]].min(q2[[b, 0]]);
            soft_target(batch.rewards[b], batch.dones[b], self.hyper.gamma, min_q, self.hyper.alpha, next.log_prob[b])
        })
    }

    /// Mean-squared errors of both critics and their gradients.
    pub fn critic_loss_and_grads(&self, batch: &Batch, y: &Array1<f64>) -> ([f64; 2], Mlp, Mlp) {
        let x = Self::critic_input(&batch.states, &batch.protos);
        let m = batch.len() as f64;
        let one = |net: &Mlp| {
            let (q, cache) = net.forward_cached(&x);
            let diff = &q.column(0) - y;
            let loss = diff.mapv(|d| d * d).sum() / m;
            let d_out = diff.mapv(|d| 2.0 * d / m).insert_axis(Axis(1));
            let (g, _) = net.backward(&cache, &d_out);
            (loss, g)
        };
        let (l1, g1) = one(&self.q1);
        let (l2, g2) = one(&self.q2);
        ([l1, l2], g1, g2)
    }

    /// One descent step on both critics; returns the mean pre-step loss.
    pub fn update_critics(&mut self, batch: &Batch, y: &Array1<f64>) -> Result<f64, AgentError> {
        let ([l1, l2], g1, g2) = self.critic_loss_and_grads(batch, y);
        let loss = (l1 + l2) / 2.0;
        if !(g1.is_finite() && g2.is_finite() && loss.is_finite()) {
            return Err(AgentError::NonFiniteGradient { net: "critic", loss });
        }
        self.q1_opt.step(&mut self.q1, &g1);
        self.q2_opt.step(&mut self.q2, &g2);
        Ok(loss)
    }

    /// Objective mean(min Q(s, â) − α·log π(â|s)) for fixed noise `eps`, and
    /// its gradient with respect to the actor parameters.
    pub fn actor_objective_and_grad(&self, states: &Array2<f64>, eps: &Array2<f64>) -> (f64, Mlp) {
        let n = self.n_actions;
        let bsz = states.nrows();
        let m = bsz as f64;
        let alpha = self.hyper.alpha;
        let pb = self.policy_batch(states, eps.clone());
        let x = Self::critic_input(states, &pb.proto);
        let (q1, c1) = self.q1.forward_cached(&x);
        let (q2, c2) = self.q2.forward_cached(&x);
        // the lower critic carries the gradient for each sample
        let use_first: Vec<bool> = (0..bsz).map(|b| q1[[b, 0]] <= q2[[b, 0]]).collect();
        let min_q: Vec<f64> = (0..bsz).map(|b| if use_first[b] { q1[[b, 0]] } else { q2[[b, 0]] }).collect();
        let objective = (0..bsz).map(|b| min_q[b] - alpha * pb.log_prob[b]).sum::<f64>() / m;

        let mask = |first: bool| {
            Array2::from_shape_fn((bsz, 1), |(b, _)| if use_first[b] == first { 1.0 / m } else { 0.0 })
        };
        let (_, dx1) = self.q1.backward(&c1, &mask(true));
        let (_, dx2) = self.q2.backward(&c2, &mask(false));
        let dq_dproto = (&dx1 + &dx2).slice(s![.., self.state_dim..]).to_owned();

        let mut d_out = Array2::zeros((bsz, 2 * n));
        for b in 0..bsz {
            for i in 0..n {
                let u = pb.u[[b, i]];
                let t = u.tanh();
                let raw_proto = (t + 1.0) / 2.0;
                let through_q = if raw_proto > PROTO_EPS && raw_proto < 1.0 - PROTO_EPS {
                    dq_dproto[[b, i]] * 0.5 * (1.0 - t * t)
                } else {
                    0.0
                };
                // d(log π)/du = 2·tanh(u); d(log π)/d(log σ) = −1 directly
                let du = through_q - alpha * 2.0 * t / m;
                d_out[[b, i]] = du;
                let raw = pb.raw_log_std[[b, i]];
                d_out[[b, n + i]] = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                    du * raw.exp() * pb.eps[[b, i]] + alpha / m
                } else {
                    0.0
                };
            }
        }
        let (grad, _) = self.actor.backward(&pb.cache, &d_out);
        (objective, grad)
    }

    /// One ascent step on the actor with freshly sampled noise; returns the objective.
    pub fn update_actor(&mut self, batch: &Batch, rng: &mut impl Rng) -> Result<f64, AgentError> {
        let eps = standard_normal(batch.len(), self.n_actions, rng);
        let (objective, mut grad) = self.actor_objective_and_grad(&batch.states, &eps);
        if !(grad.is_finite() && objective.is_finite()) {
            return Err(AgentError::NonFiniteGradient { net: "actor", loss: objective });
        }
        for g in grad.params_mut() {
            *g = -*g;
        }
        self.actor_opt.step(&mut self.actor, &grad);
        Ok(objective)
    }

    pub fn polyak(&mut self) {
        polyak_update(&mut self.q1_target, &self.q1, self.hyper.polyak);
        polyak_update(&mut self.q2_target, &self.q2, self.hyper.polyak);
    }

    /// q_target, critic step, actor step, polyak update.
    pub fn update(&mut self, batch: &Batch, rng: &mut impl Rng) -> Result<UpdateStats, AgentError> {
        let y = self.q_target(batch, rng);
        let critic_loss = self.update_critics(batch, &y)?;
        let actor_objective = self.update_actor(batch, rng)?;
        self.polyak();
        Ok(UpdateStats { critic_loss, actor_objective })
    }
}
