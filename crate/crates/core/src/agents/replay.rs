use rand::seq::index;

use crate::env::{ACTION_DIM, STATE_DIM};
use crate::rng::Rng;

/// Fixed-capacity ring buffer of transitions; the oldest entries are overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    len: usize,
    head: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    next_states: Vec<f32>,
    dones: Vec<f32>,
}

/// A sampled minibatch in row-major arrays.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub len: usize,
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
    pub next_states: Vec<f32>,
    /// 1.0 for terminal transitions.
    pub dones: Vec<f32>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            len: 0,
            head: 0,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, state: &[f32], action: [f32; 3], reward: f32, next_state: &[f32], done: bool) {
        assert_eq!(state.len(), STATE_DIM);
        assert_eq!(next_state.len(), STATE_DIM);
        let d = if done { 1.0 } else { 0.0 };
        if self.len < self.capacity {
            self.states.extend_from_slice(state);
            self.actions.extend_from_slice(&action);
            self.rewards.push(reward);
            self.next_states.extend_from_slice(next_state);
            self.dones.push(d);
            self.len += 1;
        } else {
            let i = self.head;
            self.states[i * STATE_DIM..(i + 1) * STATE_DIM].copy_from_slice(state);
            self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM].copy_from_slice(&action);
            self.rewards[i] = reward;
            self.next_states[i * STATE_DIM..(i + 1) * STATE_DIM].copy_from_slice(next_state);
            self.dones[i] = d;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// Uniform sample of `min(n, len)` distinct transitions.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Batch {
        let n = n.min(self.len);
        let idx = index::sample(rng, self.len, n);
        let mut b = Batch {
            len: n,
            states: Vec::with_capacity(n * STATE_DIM),
            actions: Vec::with_capacity(n * ACTION_DIM),
            rewards: Vec::with_capacity(n),
            next_states: Vec::with_capacity(n * STATE_DIM),
            dones: Vec::with_capacity(n),
        };
        for i in idx.iter() {
            b.states.extend_from_slice(&self.states[i * STATE_DIM..(i + 1) * STATE_DIM]);
            b.actions.extend_from_slice(&self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
            b.rewards.push(self.rewards[i]);
            b.next_states.extend_from_slice(&self.next_states[i * STATE_DIM..(i + 1) * STATE_DIM]);
            b.dones.push(self.dones[i]);
        }
        b
    }
}
