use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub proto: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

/// Column-stacked sample of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub protos: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions<'a>(ts: impl IntoIterator<Item = &'a Transition>) -> Self {
        let ts: Vec<&Transition> = ts.into_iter().collect();
        assert!(!ts.is_empty(), "empty batch");
        let rows = |f: &dyn Fn(&Transition) -> &[f64]| {
            let w = f(ts[0]).len();
            Array2::from_shape_fn((ts.len(), w), |(r, c)| f(ts[r])[c])
        };
        Self {
            states: rows(&|t| &t.state),
            protos: rows(&|t| &t.proto),
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_states: rows(&|t| &t.next_state),
            dones: ts.iter().map(|t| if t.done { 1.0 } else { 0.0 }).collect(),
        }
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), next: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
        assert!(!self.is_empty(), "sampling from an empty buffer");
        (0..batch).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Batch {
        let idx = self.sample_indices(batch, rng);
        Batch::from_transitions(idx.iter().map(|&i| &self.items[i]))
    }
}
