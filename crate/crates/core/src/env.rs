//! Trace-driven provider-selection environment.
//!
//! A [`Dataset`] is a trace with labels normalized through a grouping table.
//! An [`Environment`] walks an episode over it: each step takes a provider
//! subset, ensembles the stored detections of those providers, scores the
//! result against ground truth (or the all-provider pseudo ground truth) and
//! charges the subset's cost.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, ImagePrediction};
use crate::ensemble::{ensemble, Ablation, EnsembleConfig, ProviderDetections, Voting};
use crate::eval::{dataset_metrics, per_image_ap50, DatasetMetrics, GtBox};
use crate::exec::Execution;
use crate::grouping::GroupingTable;
use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("trace has no records")]
    EmptyTrace,
    #[error("trace has no providers")]
    NoProviders,
    #[error("action selects no provider")]
    AllZeroAction,
    #[error("action has {got} entries for {expected} providers")]
    ActionLength { expected: usize, got: usize },
    #[error("episode is over; call reset")]
    EpisodeOver,
    #[error("episode not started; call reset")]
    NotStarted,
    #[error("cost model covers {got} providers, trace has {expected}")]
    CostShape { expected: usize, got: usize },
    #[error("negative or non-finite cost {0}")]
    BadCost(f64),
    #[error("{got} actions for {expected} records")]
    ActionCount { expected: usize, got: usize },
    #[error("beta must be finite, got {0}")]
    BadBeta(f64),
}

/// Binary provider selection. Never all-zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(Vec<bool>);

impl Action {
    pub fn new(bits: Vec<bool>) -> Result<Self, EnvError> {
        if !bits.iter().any(|&b| b) {
            return Err(EnvError::AllZeroAction);
        }
        Ok(Self(bits))
    }

    /// Bit `i` of `code` selects provider `i`.
    pub fn from_code(code: u64, n: usize) -> Result<Self, EnvError> {
        Self::new((0..n).map(|i| code >> i & 1 == 1).collect())
    }

    /// Selects exactly one provider.
    pub fn single(provider: usize, n: usize) -> Self {
        Self((0..n).map(|i| i == provider).collect())
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_code(&self) -> u64 {
        self.0.iter().enumerate().fold(0, |acc, (i, &b)| acc | (u64::from(b) << i))
    }

    /// Compact `"101"` form, provider 0 first.
    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

/// Per-provider request cost in units of 1e-3 USD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderCostModel {
    pub unit: Vec<f64>,
    /// Record index -> per-provider costs for that record.
    #[serde(default)]
    pub overrides: BTreeMap<usize, Vec<f64>>,
}

impl ProviderCostModel {
    pub fn uniform(n: usize) -> Self {
        Self { unit: vec![1.0; n], overrides: BTreeMap::new() }
    }

    pub fn validate(&self, n: usize) -> Result<(), EnvError> {
        for costs in std::iter::once(&self.unit).chain(self.overrides.values()) {
            if costs.len() != n {
                return Err(EnvError::CostShape { expected: n, got: costs.len() });
            }
            if let Some(&c) = costs.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
                return Err(EnvError::BadCost(c));
            }
        }
        Ok(())
    }

    pub fn costs(&self, record: usize) -> &[f64] {
        self.overrides.get(&record).unwrap_or(&self.unit)
    }

    pub fn cost(&self, record: usize, action: &Action) -> f64 {
        let c = self.costs(record);
        action.selected().map(|i| c[i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Score against ground truth; images without it fall back to pseudo ground truth.
    #[default]
    WithGt,
    /// Always score against the all-provider ensemble.
    WithoutGt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub beta: f64,
    pub mode: RewardMode,
    /// Fused pseudo ground-truth boxes scoring below this are dropped.
    pub pseudo_gt_score_floor: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { beta: 0.0, mode: RewardMode::WithGt, pseudo_gt_score_floor: 0.0 }
    }
}

/// Per-provider transmission and inference times, for latency diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub transmission: Vec<f64>,
    pub inference: Vec<f64>,
}

/// Requests go out sequentially over one link and are served in parallel:
/// total = sum of transmission times + max of inference times.
pub fn federated_latency(transmission: &[f64], inference: &[f64]) -> f64 {
    transmission.iter().sum::<f64>() + inference.iter().copied().fold(0.0, f64::max)
}

impl LatencyModel {
    pub fn latency(&self, action: &Action) -> f64 {
        let t: Vec<f64> = action.selected().map(|i| self.transmission[i]).collect();
        let q: Vec<f64> = action.selected().map(|i| self.inference[i]).collect();
        federated_latency(&t, &q)
    }
}

/// One trace record with labels mapped to group indices.
#[derive(Debug)]
pub struct PreparedRecord {
    pub image_id: String,
    pub features: Vec<f64>,
    pub providers: Vec<Vec<Detection>>,
    pub gt: Option<Vec<GtBox>>,
    pseudo_gt: OnceLock<Vec<GtBox>>,
}

#[derive(Debug)]
pub struct Dataset {
    pub provider_names: Vec<String>,
    pub feature_dim: usize,
    pub records: Vec<PreparedRecord>,
    pseudo_floor: f64,
    pseudo_match_iou: f64,
}

impl Dataset {
    /// Normalizes every label through `table`; unmatched labels are dropped.
    pub fn prepare(trace: &Trace, table: &GroupingTable, reward: &RewardConfig, ensemble_cfg: &EnsembleConfig) -> Self {
        let mut dropped = 0usize;
        let records = trace
            .records
            .iter()
            .map(|r| {
                let providers: Vec<Vec<Detection>> = r
                    .per_provider
                    .iter()
                    .map(|l| {
                        let kept = table.normalize_all(l);
                        dropped += l.len() - kept.len();
                        kept
                    })
                    .collect();
                let gt = r.gt.as_ref().map(|g| {
                    g.iter()
                        .filter_map(|e| match table.lookup(&e.label) {
                            Some(group) => Some(GtBox { group, bbox: e.bbox }),
                            None => {
                                dropped += 1;
                                None
                            }
                        })
                        .collect()
                });
                PreparedRecord {
                    image_id: r.image_id.clone(),
                    features: r.features.clone(),
                    providers,
                    gt,
                    pseudo_gt: OnceLock::new(),
                }
            })
            .collect();
        if dropped > 0 {
            log::info!("dropped {dropped} detections with labels outside the grouping table");
        }
        Self {
            provider_names: trace.header.providers.clone(),
            feature_dim: trace.header.feature_dim,
            records,
            pseudo_floor: reward.pseudo_gt_score_floor,
            pseudo_match_iou: ensemble_cfg.match_iou,
        }
    }

    pub fn n_providers(&self) -> usize {
        self.provider_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Affirmative-WBF ensemble of every provider, scores dropped. Cached.
    pub fn pseudo_ground_truth(&self, idx: usize) -> &[GtBox] {
        let rec = &self.records[idx];
        rec.pseudo_gt.get_or_init(|| {
            let cfg = EnsembleConfig {
                voting: Voting::Affirmative,
                ablation: Ablation::Wbf,
                match_iou: self.pseudo_match_iou,
                ..EnsembleConfig::default()
            };
            let all = Action::all(self.n_providers());
            self.ensemble_action(idx, &all, &cfg)
                .detections
                .into_iter()
                .filter(|d| d.score >= self.pseudo_floor)
                .map(|d| GtBox { group: d.group, bbox: d.bbox })
                .collect()
        })
    }

    /// Reference boxes for the reward under `mode`.
    pub fn reference(&self, idx: usize, mode: RewardMode) -> &[GtBox] {
        match (mode, &self.records[idx].gt) {
            (RewardMode::WithGt, Some(gt)) => gt,
            _ => self.pseudo_ground_truth(idx),
        }
    }

    /// Reference for reporting accuracy: true ground truth where present.
    pub fn eval_reference(&self, idx: usize) -> &[GtBox] {
        self.reference(idx, RewardMode::WithGt)
    }

    pub fn ensemble_action(&self, idx: usize, action: &Action, cfg: &EnsembleConfig) -> ImagePrediction {
        let rec = &self.records[idx];
        let inputs: Vec<ProviderDetections<'_>> =
            action.selected().map(|p| ProviderDetections { provider: p, detections: &rec.providers[p] }).collect();
        ensemble(&inputs, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub ensemble: EnsembleConfig,
    pub reward: RewardConfig,
    pub costs: ProviderCostModel,
    #[serde(default)]
    pub latency: Option<LatencyModel>,
    pub shuffle: bool,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(n_providers: usize) -> Self {
        Self {
            ensemble: EnsembleConfig::default(),
            reward: RewardConfig::default(),
            costs: ProviderCostModel::uniform(n_providers),
            latency: None,
            shuffle: true,
            seed: 0,
        }
    }
}

/// Outcome of executing one action on one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub prediction: ImagePrediction,
    pub accuracy: f64,
    pub cost: f64,
    pub reward: f64,
}

/// Ensembles, scores against the reward reference and prices `action` on record `idx`.
pub fn score_action(data: &Dataset, cfg: &EnvConfig, idx: usize, action: &Action) -> Scored {
    let prediction = data.ensemble_action(idx, action, &cfg.ensemble);
    let reference = data.reference(idx, cfg.reward.mode);
    let accuracy = per_image_ap50(&prediction, reference);
    let cost = cfg.costs.cost(idx, action);
    let nothing_returned = action.selected().all(|p| data.records[idx].providers[p].is_empty());
    let reward = if nothing_returned && !reference.is_empty() { -1.0 } else { accuracy + cfg.reward.beta * cost };
    Scored { prediction, accuracy, cost, reward }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub accuracy: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Trace index of the record this step acted on.
    pub record: usize,
    pub latency: Option<f64>,
}

/// Episode position, enough to restore an environment exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub episode: u64,
    pub pos: usize,
    pub started: bool,
}

pub struct Environment {
    data: Arc<Dataset>,
    cfg: EnvConfig,
    order: Vec<usize>,
    state: EnvState,
}

impl Environment {
    pub fn new(data: Arc<Dataset>, cfg: EnvConfig) -> Result<Self, EnvError> {
        if data.is_empty() {
            return Err(EnvError::EmptyTrace);
        }
        if data.n_providers() == 0 {
            return Err(EnvError::NoProviders);
        }
        if !cfg.reward.beta.is_finite() {
            return Err(EnvError::BadBeta(cfg.reward.beta));
        }
        cfg.costs.validate(data.n_providers())?;
        Ok(Self { data, cfg, order: Vec::new(), state: EnvState { episode: 0, pos: 0, started: false } })
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn n_providers(&self) -> usize {
        self.data.n_providers()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn episode_order(&self, episode: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        if self.cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            rng.set_stream(episode);
            order.shuffle(&mut rng);
        }
        order
    }

    /// Starts the next episode and returns its first state.
    pub fn reset(&mut self) -> &[f64] {
        let episode = if self.state.started { self.state.episode + 1 } else { self.state.episode };
        self.order = self.episode_order(episode);
        self.state = EnvState { episode, pos: 0, started: true };
        &self.data.records[self.order[0]].features
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn restore(&mut self, state: EnvState) {
        self.order = if state.started { self.episode_order(state.episode) } else { Vec::new() };
        self.state = state;
    }

    pub fn current_record(&self) -> Option<usize> {
        (self.state.started && self.state.pos < self.order.len()).then(|| self.order[self.state.pos])
    }

    pub fn current_state(&self) -> Option<&[f64]> {
        self.current_record().map(|i| self.data.records[i].features.as_slice())
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        if action.len() != self.n_providers() {
            return Err(EnvError::ActionLength { expected: self.n_providers(), got: action.len() });
        }
        if action.count() == 0 {
            return Err(EnvError::AllZeroAction);
        }
        if !self.state.started {
            return Err(EnvError::NotStarted);
        }
        let idx = self.current_record().ok_or(EnvError::EpisodeOver)?;
        let scored = score_action(&self.data, &self.cfg, idx, action);
        self.state.pos += 1;
        let done = self.state.pos == self.order.len();
        let next_state = match self.current_record() {
            Some(n) => self.data.records[n].features.clone(),
            None => self.data.records[idx].features.clone(),
        };
        Ok(StepOutcome {
            reward: scored.reward,
            accuracy: scored.accuracy,
            cost: scored.cost,
            next_state,
            done,
            record: idx,
            latency: self.cfg.latency.as_ref().map(|l| l.latency(action)),
        })
    }
}

/// Dataset-level outcome of applying one action per record.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionEvaluation {
    pub metrics: DatasetMetrics,
    /// Mean per-image cost (the episode cost).
    pub mean_cost: f64,
    pub mean_reward: f64,
    pub mean_accuracy: f64,
    /// How often each provider was selected.
    pub selections: Vec<u64>,
    pub per_image: Vec<ImageOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_id: String,
    pub action: Action,
    pub accuracy: f64,
    pub cost: f64,
    pub reward: f64,
}

/// Runs `actions[i]` on record `i` and evaluates the whole set of predictions
/// against [`Dataset::eval_reference`]. Rewards follow `cfg.reward`.
pub fn evaluate_actions(data: &Dataset, cfg: &EnvConfig, actions: &[Action], exec: Execution) -> Result<ActionEvaluation, EnvError> {
    if data.is_empty() {
        return Err(EnvError::EmptyTrace);
    }
    if actions.len() != data.len() {
        return Err(EnvError::ActionCount { expected: data.len(), got: actions.len() });
    }
    let n = data.n_providers();
    if let Some(a) = actions.iter().find(|a| a.len() != n) {
        return Err(EnvError::ActionLength { expected: n, got: a.len() });
    }
    let scored = exec.map(actions, |i, a| score_action(data, cfg, i, a));
    let gt: Vec<Vec<GtBox>> = (0..data.len()).map(|i| data.eval_reference(i).to_vec()).collect();
    let preds: Vec<ImagePrediction> = scored.iter().map(|s| s.prediction.clone()).collect();
    let metrics = dataset_metrics(&preds, &gt, exec).map_err(|_| EnvError::EmptyTrace)?;
    let mut selections = vec![0u64; n];
    for a in actions {
        for p in a.selected() {
            selections[p] += 1;
        }
    }
    let m = data.len() as f64;
    let per_image = scored
        .iter()
        .zip(actions)
        .enumerate()
        .map(|(i, (s, a))| ImageOutcome {
            image_id: data.records[i].image_id.clone(),
            action: a.clone(),
            accuracy: s.accuracy,
            cost: s.cost,
            reward: s.reward,
        })
        .collect::<Vec<_>>();
    Ok(ActionEvaluation {
        metrics,
        mean_cost: scored.iter().map(|s| s.cost).sum::<f64>() / m,
        mean_reward: scored.iter().map(|s| s.reward).sum::<f64>() / m,
        mean_accuracy: scored.iter().map(|s| s.accuracy).sum::<f64>() / m,
        selections,
        per_image,
    })
}
