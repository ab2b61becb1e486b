use std::collections::BTreeMap;

use rand::Rng as _;

use super::loss::{actor_objective, CriticView, WindowBatch, MIN_LOSS_STEPS};
use super::model::{FusionModel, Stage, TokenBatch};
use super::track::{run_fused, DEFAULT_RTG0};
use crate::agents::{Learner, PolicyBundle, ReplayBuffer};
use crate::eds::TrajectoryRecord;
use crate::env::{initial_hint, EnvConfig, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Dropout, Graph, Mlp, ParamSet};
use crate::phantom::Phantom;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub updates_per_iter: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
}

impl TrainSchedule {
    pub fn pretrain() -> Self {
        Self { iterations: 30, updates_per_iter: 10_000, batch_size: 128, lr: 1e-4, warmup: 10_000 }
    }

    pub fn finetune() -> Self {
        Self { iterations: 10, ..Self::pretrain() }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, warmup: self.warmup, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McpftSchedule {
    pub iterations: usize,
    pub actor_updates: usize,
    pub critic_updates: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fused-policy episodes rolled out per iteration to feed the critic updates.
    pub rollout_episodes: usize,
    pub rtg0: f64,
    /// Ablation: drop the angular term from the actor objective.
    pub critic_only: bool,
}

impl Default for McpftSchedule {
    fn default() -> Self {
        Self {
            iterations: 25,
            actor_updates: 1000,
            critic_updates: 1,
            batch_size: 512,
            lr: 1e-4,
            rollout_episodes: 64,
            rtg0: DEFAULT_RTG0,
            critic_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterLog {
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub stage: String,
    pub iterations: Vec<IterLog>,
}

impl StageLog {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# stage={}\niter\ttrain_loss\tval_loss\tlr\n", self.stage);
        for (i, it) in self.iterations.iter().enumerate() {
            s.push_str(&format!("{i}\t{:.6}\t{:.6}\t{:.3e}\n", it.train_loss, it.val_loss, it.lr));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McpftIter {
    pub actor_updates: u64,
    /// Critic updates of each policy during this iteration.
    pub critic_updates: Vec<u64>,
    pub dist_loss: f64,
    pub critic_terms: Vec<f64>,
    pub total_loss: f64,
    pub td_loss: Vec<f64>,
    pub rollout_transitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McpftLog {
    pub policies: Vec<String>,
    pub iterations: Vec<McpftIter>,
}

impl McpftLog {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# critics={}\niter\tactor_updates\tcritic_updates\tdist_loss\tcritic_terms\ttotal_loss\ttd_loss\ttransitions\n", self.policies.join(","));
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        for (i, it) in self.iterations.iter().enumerate() {
            let cu = it.critic_updates.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
            s.push_str(&format!(
                "{i}\t{}\t{cu}\t{:.6}\t{}\t{:.6}\t{}\t{}\n",
                it.actor_updates,
                it.dist_loss,
                join(&it.critic_terms),
                it.total_loss,
                join(&it.td_loss),
                it.rollout_transitions
            ));
        }
        s
    }
}

/// Draw `count` windows: a record uniformly, then a window end uniformly over positions that
/// leave at least five steps. Windows reaching back past the episode start are padded.
pub fn sample_windows(records: &[&TrajectoryRecord], count: usize, context: usize, rng: &mut Rng) -> Result<WindowBatch<f32>> {
    let eligible: Vec<&TrajectoryRecord> = records.iter().copied().filter(|r| r.len() >= MIN_LOSS_STEPS).collect();
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(format!("no trajectory has the {MIN_LOSS_STEPS} steps a training window needs")));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("window batch size must be positive".into()));
    }
    let mut tokens = TokenBatch::<f32>::zeros(count, context);
    let mut targets = vec![0.0f32; count * context * 3];
    for w in 0..count {
        let rec = eligible[rng.random_range(0..eligible.len())];
        let min_end = MIN_LOSS_STEPS.min(context);
        let end = rng.random_range(min_end..=rec.len());
        let start = end.saturating_sub(context);
        let pad = context - (end - start);
        for (k, t) in (start..end).enumerate() {
            let row = w * context + pad + k;
            tokens.rtg[row] = rec.rtg[t];
            tokens.states[row * STATE_DIM..(row + 1) * STATE_DIM].copy_from_slice(rec.state(t));
            tokens.actions[row * 3..row * 3 + 3].copy_from_slice(&rec.actions[t]);
            targets[row * 3..row * 3 + 3].copy_from_slice(&rec.actions[t]);
            tokens.real[row] = true;
        }
    }
    Ok(WindowBatch { tokens, targets })
}

fn non_finite(what: &str, v: f64, step: u64) -> Error {
    Error::NonFinite(format!("fusion {what} is {v} at update {step}; training diverged"))
}

/// Evaluate the supervised objective without dropout.
pub fn eval_loss(model: &FusionModel, batch: &WindowBatch<f32>) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let b = g.bind(&model.params, false);
    let parts = actor_objective(&mut g, &model.net, &b, batch, &[], false, &mut Dropout::off())?;
    Ok(g.scalar(parts.total) as f64)
}

fn supervised(
    model: &mut FusionModel,
    records: &[&TrajectoryRecord],
    sched: &TrainSchedule,
    mask: Option<&[bool]>,
    seed: u64,
    tag: &str,
) -> Result<StageLog> {
    let c = model.config().context;
    let mut sample_rng = rng::stream(seed, &format!("{tag}-windows"));
    let mut drop_rng = rng::stream(seed, &format!("{tag}-dropout"));
    let val = sample_windows(records, sched.batch_size.min(256), c, &mut rng::stream(seed, &format!("{tag}-validation")))?;
    let mut opt = AdamW::new(&model.params, sched.optimizer());
    let mut log = StageLog { stage: tag.to_string(), iterations: Vec::new() };
    for it in 0..sched.iterations {
        let mut total = 0.0;
        for _ in 0..sched.updates_per_iter {
            let batch = sample_windows(records, sched.batch_size, c, &mut sample_rng)?;
            let mut g = Graph::<f32>::new();
            let b = match mask {
                Some(m) => g.bind_masked(&model.params, m),
                None => g.bind(&model.params, true),
            };
            let mut drop = Dropout { rate: model.config().dropout, rng: Some(&mut drop_rng) };
            let parts = actor_objective(&mut g, &model.net, &b, &batch, &[], false, &mut drop)?;
            let lv = g.scalar(parts.total) as f64;
            if !lv.is_finite() {
                return Err(non_finite("loss", lv, opt.step));
            }
            let grads = g.backward(parts.total)?.for_binding(&b);
            opt.step_masked(&mut model.params, &grads, mask)?;
            total += lv;
        }
        let entry = IterLog {
            train_loss: total / sched.updates_per_iter.max(1) as f64,
            val_loss: eval_loss(model, &val)?,
            lr: opt.effective_lr(),
        };
        log::info!("{tag} iteration {it}: train {:.4} val {:.4} lr {:.2e}", entry.train_loss, entry.val_loss, entry.lr);
        log.iterations.push(entry);
    }
    Ok(log)
}

/// Train every parameter on mixed-bundle trajectories.
pub fn pretrain(model: &FusionModel, records: &[TrajectoryRecord], sched: &TrainSchedule, seed: u64) -> Result<(FusionModel, StageLog)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("pretraining dataset is empty".into()));
    }
    let refs: Vec<&TrajectoryRecord> = records.iter().collect();
    let mut m = model.clone();
    let log = supervised(&mut m, &refs, sched, None, seed, "pretrain")?;
    m.stage = Stage::Pretrained;
    Ok((m, log))
}

/// Adapt the last block, final norm and head to one bundle; everything else stays frozen.
pub fn finetune(
    model: &FusionModel,
    datasets: &BTreeMap<String, Vec<TrajectoryRecord>>,
    bundle: &str,
    sched: &TrainSchedule,
    seed: u64,
) -> Result<(FusionModel, StageLog)> {
    let records = datasets
        .get(bundle)
        .ok_or_else(|| Error::InvalidArgument(format!("no finetuning data for bundle '{bundle}'")))?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("finetuning dataset for '{bundle}' is empty")));
    }
    let refs: Vec<&TrajectoryRecord> = records.iter().collect();
    let mut m = model.clone();
    let mask = m.net.finetune_mask(m.params.len());
    let log = supervised(&mut m, &refs, sched, Some(&mask), seed, &format!("finetune-{bundle}"))?;
    m.stage = Stage::Finetuned(bundle.to_string());
    Ok((m, log))
}

/// Concatenate every frozen parameter's values (finetune mask false).
pub fn frozen_values(model: &FusionModel) -> Vec<f32> {
    let mask = model.net.finetune_mask(model.params.len());
    model
        .params
        .tensors()
        .iter()
        .zip(mask)
        .filter(|(_, m)| !m)
        .flat_map(|(t, _)| t.data.iter().copied())
        .collect()
}

fn critic_nets(policies: &[PolicyBundle]) -> Vec<Vec<(&Mlp, &ParamSet<f32>)>> {
    policies.iter().map(|p| p.critics.iter().map(|c| (&c.mlp, &c.params)).collect()).collect()
}

/// Multi-critic finetuning: each iteration runs `actor_updates` updates of the fused actor
/// against the angular loss plus every policy's critic, then rolls out the fused policy and
/// gives each policy's critics `critic_updates` Bellman steps with their own targets.
#[allow(clippy::too_many_arguments)]
pub fn mcpft(
    model: &FusionModel,
    policies: &mut [PolicyBundle],
    records: &[TrajectoryRecord],
    phantom: &Phantom,
    bundle: usize,
    env_cfg: EnvConfig,
    sched: &McpftSchedule,
    seed: u64,
) -> Result<(FusionModel, McpftLog)> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("multi-critic finetuning needs trajectories".into()));
    }
    if sched.critic_only && policies.is_empty() {
        return Err(Error::InvalidArgument("critic-only objective needs at least one critic".into()));
    }
    let name = phantom.masks[bundle].bundle_name.clone();
    let refs: Vec<&TrajectoryRecord> = records.iter().collect();
    let c = model.config().context;
    let mut m = model.clone();
    let mask = m.net.finetune_mask(m.params.len());
    let mut opt = AdamW::new(&m.params, AdamWConfig { lr: sched.lr, ..Default::default() });
    let mut learners: Vec<Learner> = policies.iter().map(|p| Learner::new(p, rng::mix(seed, 0x6d63))).collect();
    let mut sample_rng = rng::stream(seed, &format!("mcpft-{name}-windows"));
    let mut drop_rng = rng::stream(seed, &format!("mcpft-{name}-dropout"));
    let mut roll_rng = rng::stream(seed, &format!("mcpft-{name}-rollout"));
    let voxels: Vec<usize> = phantom.masks[bundle].indices().collect();
    let mut log = McpftLog { policies: policies.iter().map(|p| p.algo.to_string()).collect(), iterations: Vec::new() };
    for it in 0..sched.iterations {
        let k = policies.len();
        let (mut dist, mut crit, mut total) = (0.0, vec![0.0; k], 0.0);
        let before = opt.step;
        {
            let nets = critic_nets(policies);
            let views: Vec<CriticView<f32>> = nets.iter().map(|n| CriticView { nets: n }).collect();
            for _ in 0..sched.actor_updates {
                let batch = sample_windows(&refs, sched.batch_size, c, &mut sample_rng)?;
                let mut g = Graph::<f32>::new();
                let b = g.bind_masked(&m.params, &mask);
                let mut drop = Dropout { rate: m.config().dropout, rng: Some(&mut drop_rng) };
                let parts = actor_objective(&mut g, &m.net, &b, &batch, &views, sched.critic_only, &mut drop)?;
                let lv = g.scalar(parts.total) as f64;
                if !lv.is_finite() {
                    return Err(non_finite("actor loss", lv, opt.step));
                }
                dist += g.scalar(parts.dist) as f64;
                for (acc, &cv) in crit.iter_mut().zip(&parts.critic) {
                    *acc += g.scalar(cv) as f64;
                }
                total += lv;
                let grads = g.backward(parts.total)?.for_binding(&b);
                opt.step_masked(&mut m.params, &grads, Some(&mask))?;
            }
        }
        let n = sched.actor_updates.max(1) as f64;
        let mut td = vec![0.0; k];
        let mut counts = vec![0u64; k];
        let mut transitions = 0;
        if k > 0 && sched.critic_updates > 0 {
            let starts: Vec<_> = (0..sched.rollout_episodes)
                .map(|e| {
                    let s = crate::agents::train::sample_seed(phantom, &voxels, &mut roll_rng);
                    (s, initial_hint(phantom, &phantom.masks[bundle], s, e % 2 == 0))
                })
                .collect();
            let mut buffer = ReplayBuffer::new(sched.rollout_episodes.max(1) * (env_cfg.max_steps + 1));
            run_fused(&m, phantom, bundle, &starts, env_cfg, sched.rtg0, Some(&mut buffer))?;
            transitions = buffer.len();
            for (j, (p, l)) in policies.iter_mut().zip(learners.iter_mut()).enumerate() {
                let start = l.critic_updates;
                for _ in 0..sched.critic_updates {
                    let b = buffer.sample(sched.batch_size, &mut roll_rng);
                    if b.len == 0 {
                        break;
                    }
                    let targets = l.td_targets(p, &b)?;
                    td[j] += l.critic_step(p, &b, &targets)? / sched.critic_updates as f64;
                    l.soft_update_critics(p)?;
                }
                counts[j] = l.critic_updates - start;
            }
        }
        let entry = McpftIter {
            actor_updates: opt.step - before,
            critic_updates: counts,
            dist_loss: dist / n,
            critic_terms: crit.iter().map(|v| v / n).collect(),
            total_loss: total / n,
            td_loss: td,
            rollout_transitions: transitions,
        };
        log::info!("mcpft {name} iteration {it}: total {:.4} angular {:.4} critic {:?}", entry.total_loss, entry.dist_loss, entry.critic_terms);
        log.iterations.push(entry);
    }
    m.stage = Stage::Mcpft(name);
    Ok((m, log))
}
