use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::env::{normalize_action, ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::layers::DEFAULT_HIDDEN;
use crate::nn::{Checkpoint, Mlp, ParamSet};
use crate::rng::Rng;

pub const CRITIC_INPUT: usize = STATE_DIM + ACTION_DIM;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Listing order doubles as the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algo {
    Td3 = 0,
    Sac = 1,
    Ddpg = 2,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Td3, Algo::Sac, Algo::Ddpg];

    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Td3 => "td3",
            Algo::Sac => "sac",
            Algo::Ddpg => "ddpg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "td3" => Ok(Algo::Td3),
            "sac" => Ok(Algo::Sac),
            "ddpg" => Ok(Algo::Ddpg),
            _ => Err(Error::InvalidArgument(format!("unknown algorithm '{s}' (expected td3, sac or ddpg)"))),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown policy id {id}")))
    }

    pub fn critic_count(self) -> usize {
        match self {
            Algo::Ddpg => 1,
            Algo::Td3 | Algo::Sac => 2,
        }
    }

    fn actor_outputs(self) -> usize {
        match self {
            Algo::Sac => 2 * ACTION_DIM,
            _ => ACTION_DIM,
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    /// Exploration noise (TD3, DDPG) and target smoothing noise (TD3).
    pub sigma: f64,
    pub gamma: f64,
    /// Entropy temperature (SAC).
    pub alpha: f64,
    pub tau: f64,
    pub policy_delay: usize,
    pub target_noise_clip: f64,
    pub hidden: usize,
}

impl Hyper {
    pub fn defaults(algo: Algo) -> Self {
        let base = Hyper {
            lr: 8.56e-6,
            sigma: 0.334,
            gamma: 0.776,
            alpha: 0.0,
            tau: 0.005,
            policy_delay: 2,
            target_noise_clip: 0.5,
            hidden: DEFAULT_HIDDEN,
        };
        match algo {
            Algo::Td3 => base,
            Algo::Sac => Hyper { lr: 3.7e-5, sigma: 0.4, gamma: 0.89, alpha: 0.076, policy_delay: 1, ..base },
            Algo::Ddpg => Hyper { sigma: 0.35, gamma: 0.5, policy_delay: 1, ..base },
        }
    }
}

/// An MLP together with its parameters.
#[derive(Debug, Clone)]
pub struct Net {
    pub mlp: Mlp,
    pub params: ParamSet<f32>,
}

impl Net {
    pub fn new(inputs: usize, hidden: usize, outputs: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "mlp", inputs, hidden, outputs, rng);
        Self { mlp, params }
    }

    pub fn infer(&self, x: &[f32], rows: usize) -> Result<Vec<f32>> {
        self.mlp.infer(&self.params, x, rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Deterministic,
}

#[derive(Debug, Clone)]
pub struct PolicyBundle {
    pub algo: Algo,
    pub hyper: Hyper,
    pub actor: Net,
    pub actor_target: Net,
    pub critics: Vec<Net>,
    pub critic_targets: Vec<Net>,
}

/// Map an unconstrained actor output to a log standard deviation in `[LOG_STD_MIN, LOG_STD_MAX]`.
pub fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

/// `ln(1 - tanh(u)^2)` without cancellation.
pub fn log1m_tanh2(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-density of `a = tanh(u)`, `u ~ N(mu, exp(log_std)^2)`, per dimension summed.
pub fn tanh_gaussian_log_prob(mu: &[f64], log_std: &[f64], u: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    mu.iter()
        .zip(log_std)
        .zip(u)
        .map(|((&m, &ls), &u)| {
            let z = (u - m) / ls.exp();
            -0.5 * z * z - ls - half_ln_2pi - log1m_tanh2(u)
        })
        .sum()
}

impl PolicyBundle {
    pub fn new(algo: Algo, hyper: Hyper, rng: &mut Rng) -> Self {
        let actor = Net::new(STATE_DIM, hyper.hidden, algo.actor_outputs(), rng);
        let critics: Vec<Net> = (0..algo.critic_count()).map(|_| Net::new(CRITIC_INPUT, hyper.hidden, 1, rng)).collect();
        Self {
            algo,
            hyper,
            actor_target: actor.clone(),
            actor,
            critic_targets: critics.clone(),
            critics,
        }
    }

    /// Actions for `n` stacked states, each in `[-1, 1]^3`.
    pub fn act_batch(&self, states: &[f32], n: usize, mode: ActMode, rng: &mut Rng) -> Result<Vec<[f32; 3]>> {
        let out = self.actor.infer(states, n)?;
        let width = self.algo.actor_outputs();
        let mut actions = Vec::with_capacity(n);
        for row in out.chunks_exact(width) {
            let mut a = [0.0f32; 3];
            match (self.algo, mode) {
                (Algo::Sac, ActMode::Explore) => {
                    for j in 0..3 {
                        let std = squash_log_std(row[3 + j] as f64).exp();
                        let e: f64 = StandardNormal.sample(rng);
                        a[j] = (row[j] as f64 + std * e).tanh() as f32;
                    }
                }
                (_, ActMode::Deterministic) => {
                    for j in 0..3 {
                        a[j] = row[j].tanh();
                    }
                }
                (_, ActMode::Explore) => {
                    for j in 0..3 {
                        let e: f64 = StandardNormal.sample(rng);
                        a[j] = ((row[j].tanh() as f64) + self.hyper.sigma * e).clamp(-1.0, 1.0) as f32;
                    }
                }
            }
            actions.push(a);
        }
        Ok(actions)
    }

    pub fn act(&self, state: &[f32], mode: ActMode, rng: &mut Rng) -> Result<[f32; 3]> {
        if state.len() != STATE_DIM {
            return Err(Error::shape("policy state", STATE_DIM, state.len()));
        }
        Ok(self.act_batch(state, 1, mode, rng)?[0])
    }

    /// Critic inputs: each state followed by its unit-normalized action.
    pub fn critic_inputs(states: &[f32], actions: &[[f32; 3]]) -> Result<Vec<f32>> {
        let n = actions.len();
        if states.len() != n * STATE_DIM {
            return Err(Error::shape("critic states", n * STATE_DIM, states.len()));
        }
        let mut x = Vec::with_capacity(n * CRITIC_INPUT);
        for (s, a) in states.chunks_exact(STATE_DIM).zip(actions) {
            x.extend_from_slice(s);
            x.extend_from_slice(&normalize_action(*a)?);
        }
        Ok(x)
    }

    /// Per-critic values for `n` state/action pairs (`[critic][row]`).
    pub fn critic_values(&self, states: &[f32], actions: &[[f32; 3]]) -> Result<Vec<Vec<f32>>> {
        let x = Self::critic_inputs(states, actions)?;
        self.critics.iter().map(|c| c.infer(&x, actions.len())).collect()
    }

    /// Twin minimum (TD3, SAC) or the single critic (DDPG).
    pub fn q_batch(&self, states: &[f32], actions: &[[f32; 3]]) -> Result<Vec<f32>> {
        let vals = self.critic_values(states, actions)?;
        Ok((0..actions.len())
            .map(|i| vals.iter().map(|v| v[i]).fold(f32::INFINITY, f32::min))
            .collect())
    }

    pub fn q_value(&self, state: &[f32], action: [f32; 3]) -> Result<f32> {
        Ok(self.q_batch(state, &[action])?[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("algo", self.algo.as_str());
        let h = &self.hyper;
        for (k, v) in [
            ("lr", h.lr),
            ("sigma", h.sigma),
            ("gamma", h.gamma),
            ("alpha", h.alpha),
            ("tau", h.tau),
            ("policy_delay", h.policy_delay as f64),
            ("target_noise_clip", h.target_noise_clip),
            ("hidden", h.hidden as f64),
        ] {
            ck.set_scalar(&format!("hyper.{k}"), v as f32);
        }
        ck.add_params_prefixed("actor/", &self.actor.params);
        ck.add_params_prefixed("target_actor/", &self.actor_target.params);
        for (i, (c, t)) in self.critics.iter().zip(&self.critic_targets).enumerate() {
            ck.add_params_prefixed(&format!("critic{i}/"), &c.params);
            ck.add_params_prefixed(&format!("target_critic{i}/"), &t.params);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let algo = Algo::parse(ck.require_meta("algo")?)?;
        let s = |k: &str| ck.scalar(&format!("hyper.{k}")).map(|v| v as f64);
        let hyper = Hyper {
            lr: s("lr")?,
            sigma: s("sigma")?,
            gamma: s("gamma")?,
            alpha: s("alpha")?,
            tau: s("tau")?,
            policy_delay: s("policy_delay")? as usize,
            target_noise_clip: s("target_noise_clip")?,
            hidden: s("hidden")? as usize,
        };
        let mut rng = crate::rng::stream(0, "checkpoint-skeleton");
        let mut b = PolicyBundle::new(algo, hyper, &mut rng);
        ck.load_params_prefixed("actor/", &mut b.actor.params)?;
        ck.load_params_prefixed("target_actor/", &mut b.actor_target.params)?;
        for i in 0..b.critics.len() {
            ck.load_params_prefixed(&format!("critic{i}/"), &mut b.critics[i].params)?;
            ck.load_params_prefixed(&format!("target_critic{i}/"), &mut b.critic_targets[i].params)?;
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}
