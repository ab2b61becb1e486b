//! The tracking MDP: state features, alignment reward and the three stopping rules.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::phantom::{Phantom, TractMask, SH_COEFFS};
use crate::vec3::{self, V3};

pub const STATE_DIM: usize = 334;
pub const ACTION_DIM: usize = 3;
pub const HISTORY: usize = 4;
/// Sample points: the current position and its six axis neighbours.
pub const SAMPLE_POINTS: usize = 7;
pub const SH_FEATURES: usize = SAMPLE_POINTS * SH_COEFFS;
pub const HISTORY_OFFSET: usize = SH_FEATURES;
pub const MASK_OFFSET: usize = SH_FEATURES + 3 * HISTORY;
const _: () = assert!(MASK_OFFSET + SAMPLE_POINTS == STATE_DIM);

/// Interpolated mask value below which a position counts as outside the tract.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    /// Step length in voxels.
    pub step_size: f64,
    pub max_steps: usize,
    pub max_angle_deg: f64,
    /// Distance of the neighbour sample points, in voxels.
    pub neighbor_offset: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { step_size: 0.375, max_steps: 530, max_angle_deg: 60.0, neighbor_offset: 1.0 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::InvalidArgument(format!("step_size {} outside (0, 1]", self.step_size)));
        }
        if self.max_steps < 1 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        if !(self.max_angle_deg > 0.0 && self.max_angle_deg <= 180.0) {
            return Err(Error::InvalidArgument(format!("max_angle_deg {} outside (0, 180]", self.max_angle_deg)));
        }
        if !(self.neighbor_offset > 0.0 && self.neighbor_offset.is_finite()) {
            return Err(Error::InvalidArgument("neighbor_offset must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState(pub Vec<f32>);

impl TrackState {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    /// Direction history, newest first.
    pub fn history(&self) -> &[f32] {
        &self.0[HISTORY_OFFSET..HISTORY_OFFSET + 3 * HISTORY]
    }

    pub fn mask_features(&self) -> &[f32] {
        &self.0[MASK_OFFSET..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StopReason {
    None,
    MaxSteps,
    LeftMask,
    SharpAngle,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::None => "none",
            StopReason::MaxSteps => "max_steps",
            StopReason::LeftMask => "left_mask",
            StopReason::SharpAngle => "sharp_angle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: TrackState,
    pub reward: f64,
    pub done: bool,
    pub reason: StopReason,
}

fn sample_points(pos: V3, offset: f64) -> [V3; SAMPLE_POINTS] {
    let mut pts = [pos; SAMPLE_POINTS];
    for axis in 0..3 {
        pts[1 + 2 * axis][axis] += offset;
        pts[2 + 2 * axis][axis] -= offset;
    }
    pts
}

/// Write the state features for `pos` into `out` (length [`STATE_DIM`]). `history` is newest
/// first; entries beyond four are ignored and missing ones are zero.
pub fn build_state_into(phantom: &Phantom, mask: &TractMask, pos: V3, history: &[V3], offset: f64, out: &mut [f32]) {
    assert_eq!(out.len(), STATE_DIM, "state buffer length");
    let pts = sample_points(pos, offset);
    for (i, p) in pts.iter().enumerate() {
        phantom.sh.sample_into(&phantom.grid, *p, &mut out[i * SH_COEFFS..(i + 1) * SH_COEFFS]);
        out[MASK_OFFSET + i] = mask.sample(&phantom.grid, *p) as f32;
    }
    let hist = &mut out[HISTORY_OFFSET..HISTORY_OFFSET + 3 * HISTORY];
    hist.fill(0.0);
    for (slot, d) in hist.chunks_exact_mut(3).zip(history.iter().take(HISTORY)) {
        slot.copy_from_slice(&vec3::to_f32(*d));
    }
}

pub fn build_state(phantom: &Phantom, mask: &TractMask, pos: V3, history: &[V3], offset: f64) -> TrackState {
    let mut out = vec![0.0; STATE_DIM];
    build_state_into(phantom, mask, pos, history, offset, &mut out);
    TrackState(out)
}

/// Alignment reward: `max_i |p_i . a|` times `a . u_prev` (1 without a previous direction).
/// `action` is normalized first; no peaks gives 0.
pub fn reward(action: V3, prev_dir: Option<V3>, peaks: &[V3]) -> Result<f64> {
    let a = vec3::normalize(action).ok_or_else(|| Error::InvalidArgument("zero-norm action".into()))?;
    Ok(reward_unit(a, prev_dir, peaks))
}

fn reward_unit(a: V3, prev_dir: Option<V3>, peaks: &[V3]) -> f64 {
    if peaks.is_empty() {
        return 0.0;
    }
    let align = peaks.iter().map(|p| vec3::dot(*p, a).abs()).fold(0.0, f64::max);
    let cont = prev_dir.map_or(1.0, |u| vec3::dot(a, u));
    (align * cont).clamp(-1.0, 1.0)
}

/// Unit-normalize an action in f32, the precision in which actions are stored.
pub fn normalize_action(a: [f32; 3]) -> Result<[f32; 3]> {
    vec3::normalize(vec3::from_f32(a))
        .map(vec3::to_f32)
        .ok_or_else(|| Error::InvalidArgument("zero-norm action".into()))
}

/// One tracking episode over a shared phantom, confined to one bundle's mask.
#[derive(Debug, Clone)]
pub struct TrackingEnv<'p> {
    phantom: &'p Phantom,
    bundle: usize,
    config: EnvConfig,
    pos: V3,
    history: VecDeque<V3>,
    steps: usize,
    done: bool,
    points: Vec<[f32; 3]>,
    cos_max: f64,
}

impl<'p> TrackingEnv<'p> {
    pub fn new(phantom: &'p Phantom, bundle: usize, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if bundle >= phantom.masks.len() {
            return Err(Error::UnknownBundle(format!("#{bundle}")));
        }
        Ok(Self {
            phantom,
            bundle,
            config,
            pos: [0.0; 3],
            history: VecDeque::with_capacity(HISTORY + 1),
            steps: 0,
            done: true,
            points: Vec::new(),
            cos_max: config.max_angle_deg.to_radians().cos(),
        })
    }

    pub fn phantom(&self) -> &'p Phantom {
        self.phantom
    }

    pub fn mask(&self) -> &'p TractMask {
        &self.phantom.masks[self.bundle]
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn position(&self) -> V3 {
        self.pos
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn take_points(&mut self) -> Vec<[f32; 3]> {
        std::mem::take(&mut self.points)
    }

    pub fn prev_dir(&self) -> Option<V3> {
        self.history.front().copied()
    }

    /// Start an episode at `seed`; a normalized `hint` becomes the previous direction.
    pub fn reset(&mut self, seed: V3, hint: Option<V3>) -> Result<TrackState> {
        if !self.mask().contains_point(&self.phantom.grid, seed) {
            return Err(Error::SeedOutsideMask(seed));
        }
        self.pos = seed;
        self.history.clear();
        if let Some(h) = hint {
            let h = vec3::normalize(h).ok_or_else(|| Error::InvalidArgument("zero-norm direction hint".into()))?;
            self.history.push_front(h);
        }
        self.steps = 0;
        self.done = false;
        self.points.clear();
        self.points.push(vec3::to_f32(seed));
        Ok(self.state())
    }

    pub fn state(&self) -> TrackState {
        let mut out = vec![0.0; STATE_DIM];
        self.state_into(&mut out);
        TrackState(out)
    }

    pub fn state_into(&self, out: &mut [f32]) {
        let hist: Vec<V3> = self.history.iter().copied().collect();
        build_state_into(self.phantom, self.mask(), self.pos, &hist, self.config.neighbor_offset, out);
    }

    /// Reward an action would get from the current position, without stepping.
    pub fn peek_reward(&self, unit_action: [f32; 3]) -> f64 {
        let peaks: Vec<V3> = self.phantom.peaks_at(self.pos).iter().map(|p| vec3::from_f32(*p)).collect();
        reward_unit(vec3::from_f32(unit_action), self.prev_dir(), &peaks)
    }

    pub fn step(&mut self, action: [f32; 3]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let a = normalize_action(action)?;
        self.step_unit(a)
    }

    /// Step along an already f32-normalized action. Replaying stored actions through this
    /// reproduces the original episode exactly.
    pub fn step_unit(&mut self, action: [f32; 3]) -> Result<StepOutcome> {
        let (reward, reason) = self.advance(action)?;
        Ok(StepOutcome { next_state: self.state(), reward, done: reason != StopReason::None, reason })
    }

    /// [`step_unit`](Self::step_unit) without building the next state.
    pub fn advance(&mut self, action: [f32; 3]) -> Result<(f64, StopReason)> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let a = vec3::from_f32(action);
        if !(vec3::norm(a) > 0.0) || a.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("zero-norm or non-finite action".into()));
        }
        let r = self.peek_reward(action);
        let next = vec3::add(self.pos, vec3::scale(a, self.config.step_size));
        self.steps += 1;
        let reason = if self.prev_dir().is_some_and(|u| vec3::dot(a, u) / vec3::norm(a) < self.cos_max) {
            StopReason::SharpAngle
        } else if self.mask().sample(&self.phantom.grid, next) < MASK_THRESHOLD {
            StopReason::LeftMask
        } else if self.steps >= self.config.max_steps {
            StopReason::MaxSteps
        } else {
            StopReason::None
        };
        self.pos = next;
        self.points.push(vec3::to_f32(next));
        self.history.push_front(a);
        self.history.truncate(HISTORY);
        self.done = reason != StopReason::None;
        Ok((r, reason))
    }
}

/// Direction hint for a seed: of the seed voxel's peaks, the one along which the mask extends
/// furthest, signed by `positive`. `None` when the voxel has no peaks.
pub fn initial_hint(phantom: &Phantom, mask: &TractMask, seed: V3, positive: bool) -> Option<V3> {
    let peaks = phantom.peaks_at(seed);
    let mut best: Option<(f64, V3)> = None;
    for p in peaks {
        let p = vec3::from_f32(*p);
        let reach: f64 = (1..=3)
            .map(|d| {
                let o = vec3::scale(p, d as f64);
                mask.sample(&phantom.grid, vec3::add(seed, o)) + mask.sample(&phantom.grid, vec3::sub(seed, o))
            })
            .sum();
        if best.is_none_or(|(r, _)| reach > r) {
            best = Some((reach, p));
        }
    }
    best.map(|(_, p)| if positive { p } else { vec3::scale(p, -1.0) })
}
