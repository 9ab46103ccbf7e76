//! Reference selectors: random single provider, random subset, all
//! providers, a fixed subset, and the exhaustive per-image oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{evaluate_actions, Action, ActionEvaluation, Dataset, EnvConfig, EnvError, ImageOutcome};
use crate::eval::per_image_ap50;
use crate::exec::Execution;

pub const DEFAULT_ORACLE_CAP: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("{n} providers means 2^{n} actions per image; the cap is {cap}")]
    ActionSpaceTooLarge { n: usize, cap: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// One row of a comparison table. Accuracies are fractions in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub method: String,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// Mean per-image cost over the episode.
    pub cost: f64,
    pub mean_reward: f64,
    pub mean_accuracy: f64,
    pub selections: Vec<u64>,
    pub per_image: Vec<ImageOutcome>,
}

impl BaselineReport {
    pub fn from_evaluation(method: impl Into<String>, ev: ActionEvaluation) -> Self {
        Self {
            method: method.into(),
            map: ev.metrics.map,
            ap50: ev.metrics.ap50,
            ap75: ev.metrics.ap75,
            cost: ev.mean_cost,
            mean_reward: ev.mean_reward,
            mean_accuracy: ev.mean_accuracy,
            selections: ev.selections,
            per_image: ev.per_image,
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.per_image.iter().map(|o| &o.action)
    }
}

fn image_rng(seed: u64, image: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image as u64);
    rng
}

pub fn evaluate_fixed(
    method: &str,
    data: &Dataset,
    cfg: &EnvConfig,
    action: &Action,
    exec: Execution,
) -> Result<BaselineReport, BaselineError> {
    let actions = vec![action.clone(); data.len()];
    Ok(BaselineReport::from_evaluation(method, evaluate_actions(data, cfg, &actions, exec)?))
}

/// One provider per image, uniformly.
pub fn random_one(data: &Dataset, cfg: &EnvConfig, seed: u64, exec: Execution) -> Result<BaselineReport, BaselineError> {
    let n = data.n_providers();
    let actions: Vec<Action> = (0..data.len()).map(|i| Action::single(image_rng(seed, i).random_range(0..n), n)).collect();
    Ok(BaselineReport::from_evaluation("random1", evaluate_actions(data, cfg, &actions, exec)?))
}

/// A uniformly random non-empty subset per image.
pub fn random_subset(data: &Dataset, cfg: &EnvConfig, seed: u64, exec: Execution) -> Result<BaselineReport, BaselineError> {
    let n = data.n_providers();
    if n > 63 {
        return Err(BaselineError::ActionSpaceTooLarge { n, cap: 63 });
    }
    let actions: Vec<Action> = (0..data.len())
        .map(|i| {
            let code = image_rng(seed, i).random_range(1..(1u64 << n));
            Action::from_code(code, n).expect("non-zero code")
        })
        .collect();
    Ok(BaselineReport::from_evaluation("randomN", evaluate_actions(data, cfg, &actions, exec)?))
}

/// Every provider on every image.
pub fn ensemble_all(data: &Dataset, cfg: &EnvConfig, exec: Execution) -> Result<BaselineReport, BaselineError> {
    evaluate_fixed("ensembleN", data, cfg, &Action::all(data.n_providers()), exec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub cap: usize,
    /// Among maximizers take the cheapest instead of the last enumerated.
    pub prefer_cheap: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { cap: DEFAULT_ORACLE_CAP, prefer_cheap: false }
    }
}

/// Best action for one image by per-image AP50 against the evaluation
/// reference. Actions are enumerated by ascending code; a later action
/// replaces the incumbent when its value is at least as high.
pub fn best_action(data: &Dataset, cfg: &EnvConfig, idx: usize, prefer_cheap: bool) -> (Action, f64) {
    let n = data.n_providers();
    let reference = data.eval_reference(idx);
    let mut best: Option<(Action, f64, f64)> = None;
    for code in 1..(1u64 << n) {
        let a = Action::from_code(code, n).expect("non-zero code");
        let v = per_image_ap50(&data.ensemble_action(idx, &a, &cfg.ensemble), reference);
        let cost = cfg.costs.cost(idx, &a);
        let replace = match &best {
            None => true,
            Some((_, bv, bc)) if prefer_cheap => v > *bv || (v == *bv && cost <= *bc),
            Some((_, bv, _)) => v >= *bv,
        };
        if replace {
            best = Some((a, v, cost));
        }
    }
    let (a, v, _) = best.expect("at least one provider");
    (a, v)
}

pub fn brute_force_oracle(
    data: &Dataset,
    cfg: &EnvConfig,
    opts: OracleOptions,
    exec: Execution,
) -> Result<BaselineReport, BaselineError> {
    let n = data.n_providers();
    if n > opts.cap || n >= 64 {
        return Err(BaselineError::ActionSpaceTooLarge { n, cap: opts.cap });
    }
    if n == 0 {
        return Err(EnvError::NoProviders.into());
    }
    let actions: Vec<Action> = exec.map_range(data.len(), |i| best_action(data, cfg, i, opts.prefer_cheap).0);
    let name = if opts.prefer_cheap { "oracle-cheap" } else { "oracle" };
    Ok(BaselineReport::from_evaluation(name, evaluate_actions(data, cfg, &actions, exec)?))
}
