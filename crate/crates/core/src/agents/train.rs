use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::policy::{squash_log_std, tanh_gaussian_log_prob, ActMode, Algo, PolicyBundle, CRITIC_INPUT};
use super::replay::{Batch, ReplayBuffer};
use crate::env::{initial_hint, normalize_action, EnvConfig, TrackingEnv, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Graph, Var};
use crate::phantom::{Phantom, TractMask};
use crate::rng::{self, Rng};
use crate::vec3::V3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub batches: usize,
    pub episodes_per_batch: usize,
    pub gradient_steps: usize,
    /// Transitions per gradient step.
    pub batch_size: usize,
    pub replay_capacity: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { batches: 50, episodes_per_batch: 64, gradient_steps: 100, batch_size: 4096, replay_capacity: 200_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLog {
    pub episodes: usize,
    pub transitions: usize,
    pub mean_episode_reward: f64,
    pub mean_step_reward: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub algo: Algo,
    pub gradient_steps_per_batch: usize,
    pub batches: Vec<BatchLog>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# algo={} gradient_steps_per_batch={}\n", self.algo, self.gradient_steps_per_batch);
        s.push_str("batch\tepisodes\ttransitions\tmean_episode_reward\tmean_step_reward\tcritic_loss\tactor_loss\n");
        for (i, b) in self.batches.iter().enumerate() {
            s.push_str(&format!(
                "{i}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                b.episodes, b.transitions, b.mean_episode_reward, b.mean_step_reward, b.critic_loss, b.actor_loss
            ));
        }
        s
    }
}

/// Optimizer state and update counters for one policy bundle.
#[derive(Debug, Clone)]
pub struct Learner {
    pub actor_opt: AdamW<f32>,
    pub critic_opts: Vec<AdamW<f32>>,
    pub critic_updates: u64,
    pub actor_updates: u64,
    rng: Rng,
}

fn adam(lr: f64) -> AdamWConfig {
    AdamWConfig { lr, weight_decay: 0.0, warmup: 0, ..Default::default() }
}

fn check_finite(what: &str, v: f64, algo: Algo, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{algo} {what} is {v} at update {step}; training diverged")))
    }
}

impl Learner {
    pub fn new(bundle: &PolicyBundle, seed: u64) -> Self {
        Self {
            actor_opt: AdamW::new(&bundle.actor.params, adam(bundle.hyper.lr)),
            critic_opts: bundle.critics.iter().map(|c| AdamW::new(&c.params, adam(bundle.hyper.lr))).collect(),
            critic_updates: 0,
            actor_updates: 0,
            rng: rng::stream(seed, &format!("learner-{}", bundle.algo)),
        }
    }

    /// Bellman targets `r + gamma (1 - done) V'(s')` under the bundle's algorithm.
    pub fn td_targets(&mut self, bundle: &PolicyBundle, b: &Batch) -> Result<Vec<f32>> {
        let h = &bundle.hyper;
        let n = b.len;
        let (next_actions, entropy): (Vec<[f32; 3]>, Vec<f64>) = match bundle.algo {
            Algo::Td3 | Algo::Ddpg => {
                let out = bundle.actor_target.infer(&b.next_states, n)?;
                let smooth = bundle.algo == Algo::Td3;
                let acts = out
                    .chunks_exact(3)
                    .map(|row| {
                        let mut a = [0.0f32; 3];
                        for j in 0..3 {
                            let mut v = row[j].tanh() as f64;
                            if smooth {
                                let e: f64 = StandardNormal.sample(&mut self.rng);
                                v += (h.sigma * e).clamp(-h.target_noise_clip, h.target_noise_clip);
                            }
                            a[j] = v.clamp(-1.0, 1.0) as f32;
                        }
                        a
                    })
                    .collect();
                (acts, vec![0.0; n])
            }
            Algo::Sac => {
                let out = bundle.actor.infer(&b.next_states, n)?;
                let mut acts = Vec::with_capacity(n);
                let mut ent = Vec::with_capacity(n);
                for row in out.chunks_exact(6) {
                    let mu: Vec<f64> = row[..3].iter().map(|&v| v as f64).collect();
                    let ls: Vec<f64> = row[3..].iter().map(|&v| squash_log_std(v as f64)).collect();
                    let u: Vec<f64> = (0..3)
                        .map(|j| {
                            let e: f64 = StandardNormal.sample(&mut self.rng);
                            mu[j] + ls[j].exp() * e
                        })
                        .collect();
                    acts.push([u[0].tanh() as f32, u[1].tanh() as f32, u[2].tanh() as f32]);
                    ent.push(-h.alpha * tanh_gaussian_log_prob(&mu, &ls, &u));
                }
                (acts, ent)
            }
        };
        let x = safe_critic_inputs(&b.next_states, &next_actions)?;
        let vals: Vec<Vec<f32>> = bundle.critic_targets.iter().map(|c| c.infer(&x, n)).collect::<Result<_>>()?;
        Ok((0..n)
            .map(|i| {
                let q = vals.iter().map(|v| v[i] as f64).fold(f64::INFINITY, f64::min);
                let v = q + entropy[i];
                (b.rewards[i] as f64 + h.gamma * (1.0 - b.dones[i] as f64) * v) as f32
            })
            .collect())
    }

    /// One regression step of every critic towards `targets`; returns the mean loss.
    pub fn critic_step(&mut self, bundle: &mut PolicyBundle, b: &Batch, targets: &[f32]) -> Result<f64> {
        let actions: Vec<[f32; 3]> = b.actions.chunks_exact(3).map(|a| [a[0], a[1], a[2]]).collect();
        let x = safe_critic_inputs(&b.states, &actions)?;
        let mut total = 0.0;
        for (k, critic) in bundle.critics.iter_mut().enumerate() {
            let mut g = Graph::<f32>::new();
            let bind = g.bind(&critic.params, true);
            let xin = g.input(b.len, CRITIC_INPUT, x.clone());
            let y = g.input(b.len, 1, targets.to_vec());
            let q = critic.mlp.forward(&mut g, &bind, xin)?;
            let d = g.sub(q, y);
            let sq = g.square(d);
            let loss = g.mean(sq);
            let lv = g.scalar(loss) as f64;
            check_finite("critic loss", lv, bundle.algo, self.critic_updates)?;
            let grads = g.backward(loss)?.for_binding(&bind);
            self.critic_opts[k].step(&mut critic.params, &grads)?;
            total += lv;
        }
        self.critic_updates += 1;
        Ok(total / bundle.critics.len() as f64)
    }

    /// One policy-improvement step; returns the actor loss.
    pub fn actor_step(&mut self, bundle: &mut PolicyBundle, b: &Batch) -> Result<f64> {
        let n = b.len;
        let mut g = Graph::<f32>::new();
        let abind = g.bind(&bundle.actor.params, true);
        let cbinds: Vec<_> = bundle.critics.iter().map(|c| g.bind(&c.params, false)).collect();
        let s = g.input(n, STATE_DIM, b.states.clone());
        let out = bundle.actor.mlp.forward(&mut g, &abind, s)?;
        let loss = match bundle.algo {
            Algo::Td3 | Algo::Ddpg => {
                let a = g.tanh(out);
                let q = critic_on(&mut g, bundle, &cbinds[..1], s, a)?;
                let m = g.mean(q);
                g.scale(m, -1.0)
            }
            Algo::Sac => {
                let eps: Vec<f32> = (0..n * 3).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                let (a, logp) = sac_sample_graph(&mut g, out, n, eps);
                let q = critic_on(&mut g, bundle, &cbinds, s, a)?;
                let al = g.scale(logp, bundle.hyper.alpha);
                let d = g.sub(al, q);
                g.mean(d)
            }
        };
        let lv = g.scalar(loss) as f64;
        check_finite("actor loss", lv, bundle.algo, self.actor_updates)?;
        let grads = g.backward(loss)?.for_binding(&abind);
        self.actor_opt.step(&mut bundle.actor.params, &grads)?;
        self.actor_updates += 1;
        Ok(lv)
    }

    pub fn soft_update_critics(&self, bundle: &mut PolicyBundle) -> Result<()> {
        let tau = bundle.hyper.tau;
        for (t, c) in bundle.critic_targets.iter_mut().zip(&bundle.critics) {
            t.params.soft_update(&c.params, tau)?;
        }
        Ok(())
    }

    /// A full algorithm update: critics every call, actor and targets per the policy delay.
    pub fn update(&mut self, bundle: &mut PolicyBundle, b: &Batch) -> Result<(f64, Option<f64>)> {
        let targets = self.td_targets(bundle, b)?;
        let closs = self.critic_step(bundle, b, &targets)?;
        let delay = bundle.hyper.policy_delay.max(1) as u64;
        let mut aloss = None;
        if self.critic_updates.is_multiple_of(delay) {
            aloss = Some(self.actor_step(bundle, b)?);
            if bundle.algo != Algo::Sac {
                let tau = bundle.hyper.tau;
                bundle.actor_target.params.soft_update(&bundle.actor.params, tau)?;
            }
            if bundle.algo == Algo::Td3 {
                self.soft_update_critics(bundle)?;
            }
        }
        if bundle.algo != Algo::Td3 {
            self.soft_update_critics(bundle)?;
        }
        Ok((closs, aloss))
    }
}

/// Critic inputs; zero actions are replaced by +x so a degenerate proposal cannot abort a batch.
fn safe_critic_inputs(states: &[f32], actions: &[[f32; 3]]) -> Result<Vec<f32>> {
    let fixed: Vec<[f32; 3]> = actions
        .iter()
        .map(|a| if normalize_action(*a).is_ok() { *a } else { [1.0, 0.0, 0.0] })
        .collect();
    PolicyBundle::critic_inputs(states, &fixed)
}

/// Minimum over `binds` critics of `Q(s, normalize(a))`, as an `n x 1` node.
fn critic_on(g: &mut Graph<f32>, bundle: &PolicyBundle, binds: &[crate::nn::Binding], s: Var, a: Var) -> Result<Var> {
    let au = g.row_normalize(a);
    let x = g.concat_cols(s, au);
    let mut q: Option<Var> = None;
    for (c, b) in bundle.critics.iter().zip(binds) {
        let qk = c.mlp.forward(g, b, x)?;
        q = Some(match q {
            None => qk,
            Some(prev) => g.min(prev, qk),
        });
    }
    Ok(q.expect("at least one critic"))
}

/// Reparameterized tanh-Gaussian sample and its log-density (`n x 1`) on the tape.
pub fn sac_sample_graph(g: &mut Graph<f32>, out: Var, n: usize, eps: Vec<f32>) -> (Var, Var) {
    let mu = g.slice_cols(out, 0, 3);
    let raw = g.slice_cols(out, 3, 3);
    let t = g.tanh(raw);
    let t = g.add_scalar(t, 1.0);
    let t = g.scale(t, 0.5 * (super::policy::LOG_STD_MAX - super::policy::LOG_STD_MIN));
    let log_std = g.add_scalar(t, super::policy::LOG_STD_MIN);
    let std = g.exp(log_std);
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let consts: Vec<f32> = eps
        .chunks_exact(3)
        .map(|e| e.iter().map(|&v| -0.5 * (v as f64) * (v as f64) - half_ln_2pi).sum::<f64>() as f32)
        .collect();
    let e = g.input(n, 3, eps);
    let noise = g.mul(std, e);
    let u = g.add(mu, noise);
    let a = g.tanh(u);
    // ln(1 - tanh^2 u) = 2 (ln 2 - u - softplus(-2u))
    let m2u = g.scale(u, -2.0);
    let sp = g.softplus(m2u);
    let usp = g.add(u, sp);
    let neg = g.scale(usp, -1.0);
    let inner = g.add_scalar(neg, std::f64::consts::LN_2);
    let corr = g.scale(inner, 2.0);
    let ls_sum = g.sum_rows(log_std);
    let corr_sum = g.sum_rows(corr);
    let both = g.add(ls_sum, corr_sum);
    let neg_both = g.scale(both, -1.0);
    let c = g.input(n, 1, consts);
    let logp = g.add(neg_both, c);
    (a, logp)
}

/// Seed uniformly inside a random voxel of `mask`.
pub fn sample_seed(phantom: &Phantom, voxels: &[usize], rng: &mut Rng) -> V3 {
    let idx = voxels[rng.random_range(0..voxels.len())];
    let c = phantom.grid.center(idx);
    [
        c[0] + rng.random_range(-0.49..0.49),
        c[1] + rng.random_range(-0.49..0.49),
        c[2] + rng.random_range(-0.49..0.49),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub reward: f64,
    pub steps: usize,
}

/// Who picks actions in a rollout.
pub enum Actor<'a> {
    Policy(&'a PolicyBundle, ActMode),
    /// Uniform in `[-1, 1]^3`.
    Random,
}

/// Run `episodes` episodes in lockstep, cycling over `bundles`, optionally filling `buffer`.
pub fn rollout(
    actor: &Actor,
    phantom: &Phantom,
    bundles: &[usize],
    env_cfg: EnvConfig,
    episodes: usize,
    rng: &mut Rng,
    mut buffer: Option<&mut ReplayBuffer>,
) -> Result<Vec<EpisodeStats>> {
    if bundles.is_empty() {
        return Err(Error::InvalidArgument("rollout needs at least one bundle".into()));
    }
    let voxels: Vec<Vec<usize>> = bundles.iter().map(|&b| phantom.masks[b].indices().collect()).collect();
    let mut envs = Vec::with_capacity(episodes);
    let mut states = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let k = e % bundles.len();
        let mask: &TractMask = &phantom.masks[bundles[k]];
        let seed = sample_seed(phantom, &voxels[k], rng);
        let hint = initial_hint(phantom, mask, seed, rng.random::<bool>());
        let mut env = TrackingEnv::new(phantom, bundles[k], env_cfg)?;
        states.push(env.reset(seed, hint)?.0);
        envs.push(env);
    }
    let mut stats = vec![EpisodeStats { reward: 0.0, steps: 0 }; episodes];
    let mut active: Vec<usize> = (0..episodes).collect();
    let mut flat = Vec::new();
    while !active.is_empty() {
        let actions: Vec<[f32; 3]> = match actor {
            Actor::Policy(p, mode) => {
                flat.clear();
                for &i in &active {
                    flat.extend_from_slice(&states[i]);
                }
                p.act_batch(&flat, active.len(), *mode, rng)?
            }
            Actor::Random => active
                .iter()
                .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
                .collect(),
        };
        let mut still = Vec::with_capacity(active.len());
        for (&i, &a) in active.iter().zip(&actions) {
            let unit = normalize_action(a).unwrap_or([1.0, 0.0, 0.0]);
            let (r, reason) = envs[i].advance(unit)?;
            let next = envs[i].state().0;
            let done = reason != crate::env::StopReason::None;
            if let Some(buf) = buffer.as_deref_mut() {
                buf.push(&states[i], a, r as f32, &next, done);
            }
            stats[i].reward += r;
            stats[i].steps += 1;
            states[i] = next;
            if !done {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(stats)
}

/// Total reward over total steps.
pub fn mean_step_reward(stats: &[EpisodeStats]) -> f64 {
    let steps: usize = stats.iter().map(|s| s.steps).sum();
    if steps == 0 {
        0.0
    } else {
        stats.iter().map(|s| s.reward).sum::<f64>() / steps as f64
    }
}

/// Mean per-step reward of uniformly random actions from random seeds.
pub fn random_baseline(phantom: &Phantom, bundles: &[usize], env_cfg: EnvConfig, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::stream(seed, "random-baseline");
    Ok(mean_step_reward(&rollout(&Actor::Random, phantom, bundles, env_cfg, episodes, &mut rng, None)?))
}

/// Mean per-step reward of the deterministic policy from random seeds.
pub fn evaluate_policy(
    policy: &PolicyBundle,
    phantom: &Phantom,
    bundles: &[usize],
    env_cfg: EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, "policy-eval");
    let actor = Actor::Policy(policy, ActMode::Deterministic);
    Ok(mean_step_reward(&rollout(&actor, phantom, bundles, env_cfg, episodes, &mut rng, None)?))
}

pub fn train_policy(
    bundle: &mut PolicyBundle,
    phantom: &Phantom,
    bundles: &[usize],
    env_cfg: EnvConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainLog> {
    let mut learner = Learner::new(bundle, seed);
    let mut buffer = ReplayBuffer::new(schedule.replay_capacity);
    let mut roll_rng = rng::stream(seed, &format!("rollout-{}", bundle.algo));
    let mut sample_rng = rng::stream(seed, &format!("replay-{}", bundle.algo));
    let mut log = TrainLog { algo: bundle.algo, gradient_steps_per_batch: schedule.gradient_steps, batches: Vec::new() };
    for bi in 0..schedule.batches {
        let stats = {
            let actor = Actor::Policy(bundle, ActMode::Explore);
            rollout(&actor, phantom, bundles, env_cfg, schedule.episodes_per_batch, &mut roll_rng, Some(&mut buffer))?
        };
        let mut closs = 0.0;
        let mut aloss = 0.0;
        let mut acount = 0usize;
        for _ in 0..schedule.gradient_steps {
            let b = buffer.sample(schedule.batch_size, &mut sample_rng);
            let (c, a) = learner.update(bundle, &b)?;
            closs += c;
            if let Some(a) = a {
                aloss += a;
                acount += 1;
            }
        }
        let episodes = stats.len().max(1);
        let entry = BatchLog {
            episodes: stats.len(),
            transitions: stats.iter().map(|s| s.steps).sum(),
            mean_episode_reward: stats.iter().map(|s| s.reward).sum::<f64>() / episodes as f64,
            mean_step_reward: mean_step_reward(&stats),
            critic_loss: closs / schedule.gradient_steps.max(1) as f64,
            actor_loss: aloss / acount.max(1) as f64,
        };
        log::info!(
            "{} batch {bi}: mean episode reward {:.3}, per-step {:.3}, critic loss {:.4}",
            bundle.algo,
            entry.mean_episode_reward,
            entry.mean_step_reward,
            entry.critic_loss
        );
        log.batches.push(entry);
    }
    Ok(log)
}
