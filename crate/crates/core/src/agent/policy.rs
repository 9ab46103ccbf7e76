use serde::{Deserialize, Serialize};

use crate::env::Action;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Proto-actions are kept this far inside (0,1).
pub(crate) const PROTO_EPS: f64 = 1e-9;

/// Nearest non-zero binary vector in l2: round at 0.5, and if nothing
/// survives take the largest coordinate (lowest index on ties).
pub fn nearest_binary_action(proto: &[f64]) -> Action {
    assert!(!proto.is_empty(), "proto-action must be non-empty");
    let mut bits: Vec<bool> = proto.iter().map(|&p| p >= 0.5).collect();
    if !bits.iter().any(|&b| b) {
        let mut best = 0;
        for (i, &p) in proto.iter().enumerate() {
            if p > proto[best] {
                best = i;
            }
        }
        bits[best] = true;
    }
    Action::new(bits).expect("non-zero by construction")
}

/// Maps an unbounded pre-activation to (0,1).
pub fn squash(u: f64) -> f64 {
    ((u.tanh() + 1.0) / 2.0).clamp(PROTO_EPS, 1.0 - PROTO_EPS)
}

/// ln(1 − tanh²u), stable for large |u|.
pub(crate) fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Log-density of the squashed sample for one coordinate, given the
/// standard-normal draw `eps`, the log-std and the pre-squash value `u`.
pub(crate) fn coord_log_prob(eps: f64, log_std: f64, u: f64) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
    -0.5 * eps * eps - log_std - HALF_LN_2PI - (0.5f64.ln() + log_one_minus_tanh_sq(u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub proto: Vec<f64>,
    pub log_prob: f64,
}
