use std::collections::VecDeque;

use super::model::{FusionModel, TokenBatch};
use crate::agents::ReplayBuffer;
use crate::env::{normalize_action, EnvConfig, StopReason, TrackingEnv, STATE_DIM};
use crate::error::Result;
use crate::phantom::Phantom;
use crate::vec3::V3;

pub const DEFAULT_RTG0: f64 = 300.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedEpisode {
    pub actions: Vec<[f32; 3]>,
    pub rewards: Vec<f32>,
    /// Return-to-go fed at each step.
    pub rtg: Vec<f32>,
    pub points: Vec<[f32; 3]>,
    pub reason: StopReason,
}

struct Step {
    rtg: f32,
    state: Vec<f32>,
    action: [f32; 3],
}

/// Track every `(seed, hint)` start with the fused policy in lockstep. The conditioning window
/// keeps the newest `context` steps and return-to-go decreases by each realized reward, never
/// below zero. Transitions are appended to `buffer` when given.
pub fn run_fused(
    model: &FusionModel,
    phantom: &Phantom,
    bundle: usize,
    starts: &[(V3, Option<V3>)],
    env_cfg: EnvConfig,
    rtg0: f64,
    mut buffer: Option<&mut ReplayBuffer>,
) -> Result<Vec<FusedEpisode>> {
    let c = model.config().context;
    let n = starts.len();
    let mut envs = Vec::with_capacity(n);
    let mut windows: Vec<VecDeque<Step>> = Vec::with_capacity(n);
    for &(seed, hint) in starts {
        let mut env = TrackingEnv::new(phantom, bundle, env_cfg)?;
        let s = env.reset(seed, hint)?;
        let mut w = VecDeque::with_capacity(c);
        w.push_back(Step { rtg: rtg0 as f32, state: s.0, action: [0.0; 3] });
        windows.push(w);
        envs.push(env);
    }
    let mut eps: Vec<FusedEpisode> = (0..n)
        .map(|_| FusedEpisode { actions: Vec::new(), rewards: Vec::new(), rtg: Vec::new(), points: Vec::new(), reason: StopReason::None })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut next = vec![0.0f32; STATE_DIM];
    while !active.is_empty() {
        // Lockstep keeps every active window the same length.
        let len = windows[active[0]].len();
        let mut tb = TokenBatch::<f32>::zeros(active.len(), len);
        for (k, &i) in active.iter().enumerate() {
            for (t, st) in windows[i].iter().enumerate() {
                let row = k * len + t;
                tb.rtg[row] = st.rtg;
                tb.states[row * STATE_DIM..(row + 1) * STATE_DIM].copy_from_slice(&st.state);
                tb.actions[row * 3..row * 3 + 3].copy_from_slice(&st.action);
                tb.real[row] = true;
            }
        }
        let acts = model.act_latest(&tb)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let unit = normalize_action(acts[k]).unwrap_or([1.0, 0.0, 0.0]);
            let (r, reason) = envs[i].advance(unit)?;
            let w = &mut windows[i];
            let cur = w.back_mut().expect("window holds the current step");
            cur.action = unit;
            let rtg = cur.rtg;
            envs[i].state_into(&mut next);
            let done = reason != StopReason::None;
            if let Some(buf) = buffer.as_deref_mut() {
                buf.push(&cur.state, unit, r as f32, &next, done);
            }
            let e = &mut eps[i];
            e.actions.push(unit);
            e.rewards.push(r as f32);
            e.rtg.push(rtg);
            if done {
                e.reason = reason;
                e.points = envs[i].take_points();
            } else {
                if w.len() == c {
                    w.pop_front();
                }
                w.push_back(Step { rtg: (rtg as f64 - r).max(0.0) as f32, state: next.clone(), action: [0.0; 3] });
                still.push(i);
            }
        }
        active = still;
    }
    Ok(eps)
}
