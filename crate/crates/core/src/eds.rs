//! Episodic data selection: harvest deterministic trajectories from the three trained policies
//! over neighbouring seed batches, filter them by length and by distance to reference
//! streamlines, and pick one policy per batch by normalized Q.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;

use crate::agents::{ActMode, Algo, PolicyBundle};
use crate::binio::{self, Reader, Writer};
use crate::env::{initial_hint, normalize_action, EnvConfig, StopReason, TrackingEnv, STATE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{ReferenceSet, Streamline};
use crate::phantom::Phantom;
use crate::rng::{self, Rng};
use crate::vec3::V3;

pub const MIN_TRANSITIONS: usize = 47;
pub const MDF_THRESHOLD_MM: f64 = 5.0;
pub const WINDOW: usize = 4;
const MAGIC: &[u8; 4] = b"EDS1";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub policy: Algo,
    pub bundle: String,
    /// `T x STATE_DIM`, row-major.
    pub states: Vec<f32>,
    pub actions: Vec<[f32; 3]>,
    pub rewards: Vec<f32>,
    pub rtg: Vec<f32>,
    pub streamline: Streamline,
}

impl TrajectoryRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * STATE_DIM..(t + 1) * STATE_DIM]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let bad = |m: String| Err(Error::InvalidArgument(format!("record ({} {}): {m}", self.policy, self.bundle)));
        if t == 0 {
            return bad("empty trajectory".into());
        }
        if self.states.len() != t * STATE_DIM || self.rewards.len() != t || self.rtg.len() != t {
            return bad("sequence lengths disagree".into());
        }
        if self.streamline.len() != t + 1 {
            return bad(format!("streamline has {} points for {t} steps", self.streamline.len()));
        }
        if compute_rtg(&self.rewards) != self.rtg {
            return bad("return-to-go is not the suffix sum of rewards".into());
        }
        Ok(())
    }
}

/// Undiscounted suffix sums, accumulated in f64.
pub fn compute_rtg(rewards: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rewards.len()];
    let mut acc = 0.0f64;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r as f64;
        *o = acc as f32;
    }
    out
}

/// A harvested episode without its states; those are rebuilt by replay on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct LightRecord {
    pub policy: Algo,
    pub bundle: usize,
    pub seed: V3,
    pub hint: Option<V3>,
    pub actions: Vec<[f32; 3]>,
    pub rewards: Vec<f32>,
    pub streamline: Streamline,
    pub reason: StopReason,
    /// Mean over transitions of the policy's own `q_value(s_t, a_t)`.
    pub q_score: f64,
}

impl LightRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Rebuild states by replaying the stored actions.
    pub fn materialize(&self, phantom: &Phantom, env_cfg: EnvConfig) -> Result<TrajectoryRecord> {
        let mut env = TrackingEnv::new(phantom, self.bundle, env_cfg)?;
        let mut states = Vec::with_capacity(self.len() * STATE_DIM);
        let first = env.reset(self.seed, self.hint)?;
        states.extend_from_slice(&first.0);
        for (t, &a) in self.actions.iter().enumerate() {
            let (_, reason) = env.advance(a)?;
            if t + 1 < self.len() {
                if reason != StopReason::None {
                    return Err(Error::InvalidArgument("replay terminated early".into()));
                }
                let start = states.len();
                states.resize(start + STATE_DIM, 0.0);
                env.state_into(&mut states[start..]);
            }
        }
        if env.points() != self.streamline.points() {
            return Err(Error::InvalidArgument("replay diverged from the harvested streamline".into()));
        }
        Ok(TrajectoryRecord {
            policy: self.policy,
            bundle: phantom.masks[self.bundle].bundle_name.clone(),
            states,
            actions: self.actions.clone(),
            rewards: self.rewards.clone(),
            rtg: compute_rtg(&self.rewards),
            streamline: self.streamline.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub bundle: usize,
    /// Lower corner of the `WINDOW^3` voxel window.
    pub origin: [usize; 3],
    pub seeds_per_voxel: usize,
    pub seed: u64,
}

/// Seeds inside the mask voxels of a window, `seeds_per_voxel` uniform points each.
pub fn window_seeds(phantom: &Phantom, spec: &BatchSpec) -> Result<Vec<V3>> {
    let g = &phantom.grid;
    let mask = &phantom.masks[spec.bundle];
    let mut rng = rng::stream_indexed(spec.seed, "harvest-seeds", (g.index(spec.origin[0], spec.origin[1], spec.origin[2]) as u64) << 8 | spec.bundle as u64);
    let mut seeds = Vec::new();
    for z in spec.origin[2]..(spec.origin[2] + WINDOW).min(g.dims[2]) {
        for y in spec.origin[1]..(spec.origin[1] + WINDOW).min(g.dims[1]) {
            for x in spec.origin[0]..(spec.origin[0] + WINDOW).min(g.dims[0]) {
                if !mask.contains(g.index(x, y, z)) {
                    continue;
                }
                for _ in 0..spec.seeds_per_voxel {
                    seeds.push([
                        x as f64 + rng.random_range(-0.49..0.49),
                        y as f64 + rng.random_range(-0.49..0.49),
                        z as f64 + rng.random_range(-0.49..0.49),
                    ]);
                }
            }
        }
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(format!("window at {:?} holds no mask voxels", spec.origin)));
    }
    Ok(seeds)
}

/// Window origins (multiples of `WINDOW`) that overlap the bundle mask, in x-fastest order.
pub fn mask_windows(phantom: &Phantom, bundle: usize) -> Vec<[usize; 3]> {
    let g = &phantom.grid;
    let mut hit = std::collections::BTreeSet::new();
    for idx in phantom.masks[bundle].indices() {
        let [x, y, z] = g.coords(idx);
        hit.insert([z / WINDOW, y / WINDOW, x / WINDOW]);
    }
    hit.into_iter().map(|[z, y, x]| [x * WINDOW, y * WINDOW, z * WINDOW]).collect()
}

/// Track every seed deterministically with one policy, in lockstep. Hints alternate sign by
/// seed index.
pub fn track_light(
    policy: &PolicyBundle,
    phantom: &Phantom,
    bundle: usize,
    seeds: &[V3],
    env_cfg: EnvConfig,
) -> Result<Vec<LightRecord>> {
    let mask = &phantom.masks[bundle];
    let mut envs = Vec::with_capacity(seeds.len());
    let mut hints = Vec::with_capacity(seeds.len());
    let mut states = Vec::with_capacity(seeds.len());
    for (i, &s) in seeds.iter().enumerate() {
        let hint = initial_hint(phantom, mask, s, i % 2 == 0);
        let mut env = TrackingEnv::new(phantom, bundle, env_cfg)?;
        states.push(env.reset(s, hint)?.0);
        envs.push(env);
        hints.push(hint);
    }
    let n = seeds.len();
    let mut actions: Vec<Vec<[f32; 3]>> = vec![Vec::new(); n];
    let mut rewards: Vec<Vec<f32>> = vec![Vec::new(); n];
    let mut qsum = vec![0.0f64; n];
    let mut reasons = vec![StopReason::None; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut flat = Vec::new();
    // Deterministic mode never draws from the generator.
    let mut unused = rng::stream(0, "deterministic");
    while !active.is_empty() {
        flat.clear();
        for &i in &active {
            flat.extend_from_slice(&states[i]);
        }
        let raw = policy.act_batch(&flat, active.len(), ActMode::Deterministic, &mut unused)?;
        let units: Vec<[f32; 3]> = raw.iter().map(|a| normalize_action(*a).unwrap_or([1.0, 0.0, 0.0])).collect();
        let q = policy.q_batch(&flat, &units)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let (r, reason) = envs[i].advance(units[k])?;
            actions[i].push(units[k]);
            rewards[i].push(r as f32);
            qsum[i] += q[k] as f64;
            if reason == StopReason::None {
                envs[i].state_into(&mut states[i]);
                still.push(i);
            } else {
                reasons[i] = reason;
            }
        }
        active = still;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = actions[i].len();
        out.push(LightRecord {
            policy: policy.algo,
            bundle,
            seed: seeds[i],
            hint: hints[i],
            actions: std::mem::take(&mut actions[i]),
            rewards: std::mem::take(&mut rewards[i]),
            streamline: Streamline::new(envs[i].take_points())?,
            reason: reasons[i],
            q_score: qsum[i] / t as f64,
        });
    }
    Ok(out)
}

/// One batch of neighbouring seeds tracked by every policy; records are grouped by policy, in
/// the order of `policies`.
pub fn harvest(policies: &[PolicyBundle], phantom: &Phantom, spec: &BatchSpec, env_cfg: EnvConfig) -> Result<Vec<Vec<LightRecord>>> {
    let seeds = window_seeds(phantom, spec)?;
    policies.par_iter().map(|p| track_light(p, phantom, spec.bundle, &seeds, env_cfg)).collect()
}

pub fn length_filter<R: HasLen>(records: Vec<R>) -> Vec<R> {
    records.into_iter().filter(|r| r.steps() >= MIN_TRANSITIONS).collect()
}

pub trait HasLen {
    fn steps(&self) -> usize;
    fn streamline(&self) -> &Streamline;
}

impl HasLen for LightRecord {
    fn steps(&self) -> usize {
        self.len()
    }
    fn streamline(&self) -> &Streamline {
        &self.streamline
    }
}

impl HasLen for TrajectoryRecord {
    fn steps(&self) -> usize {
        self.len()
    }
    fn streamline(&self) -> &Streamline {
        &self.streamline
    }
}

/// Keep records whose streamline lies within `threshold_mm` MDF of some reference.
pub fn within_policy_filter<R: HasLen>(records: Vec<R>, refs: &ReferenceSet, threshold_mm: f64) -> Result<Vec<R>> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("within-policy filter needs reference streamlines".into()));
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if refs.min_distance(r.streamline())? <= threshold_mm {
            out.push(r);
        }
    }
    Ok(out)
}

/// Min-max normalize scores to [0, 1]; a constant batch maps to 0.5.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|&s| (s - lo) / (hi - lo)).collect()
}

/// Choose the policy whose mean normalized trajectory score is highest. `groups[k]` holds
/// `(policy, trajectory scores)`; empty groups are excluded and ties favour the lower
/// [`Algo`] order.
pub fn choose_policy(groups: &[(Algo, Vec<f64>)]) -> Option<Algo> {
    let mut best: Option<(f64, Algo)> = None;
    for (algo, scores) in groups {
        if scores.is_empty() {
            continue;
        }
        let norm = min_max_normalize(scores);
        let mean = norm.iter().sum::<f64>() / norm.len() as f64;
        let better = match best {
            None => true,
            Some((m, a)) => mean > m || (mean == m && *algo < a),
        };
        if better {
            best = Some((mean, *algo));
        }
    }
    best.map(|(_, a)| a)
}

/// Across-policy selection over one harvest batch. With `filtered`, groups are expected to be
/// MDF-filtered already; the flag only labels the log line.
pub fn across_policy_select(groups: Vec<Vec<LightRecord>>, filtered: bool) -> (Vec<LightRecord>, Option<Algo>) {
    let scored: Vec<(Algo, Vec<f64>)> = groups
        .iter()
        .filter_map(|g| g.first().map(|r| (r.policy, g.iter().map(|r| r.q_score).collect())))
        .collect();
    let chosen = choose_policy(&scored);
    match chosen {
        None => {
            log::warn!("no policy has surviving records in this batch (filtered: {filtered})");
            (Vec::new(), None)
        }
        Some(a) => (groups.into_iter().flatten().filter(|r| r.policy == a).collect(), Some(a)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdsConfig {
    pub seeds_per_voxel: usize,
    pub pretrain_target: usize,
    pub finetune_target: usize,
    pub threshold_mm: f64,
    pub env: EnvConfig,
    pub seed: u64,
}

impl Default for EdsConfig {
    fn default() -> Self {
        Self {
            seeds_per_voxel: 7,
            pretrain_target: 150_000,
            finetune_target: 50_000,
            threshold_mm: MDF_THRESHOLD_MM,
            env: EnvConfig::default(),
            seed: 0,
        }
    }
}

/// Outcome of one harvest batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSelection {
    pub bundle: String,
    pub origin: [usize; 3],
    pub pretrain_policy: Option<Algo>,
    pub finetune_policy: Option<Algo>,
    pub pretrain_count: usize,
    pub finetune_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdsDatasets {
    pub pretrain: Vec<TrajectoryRecord>,
    pub finetune: BTreeMap<String, Vec<TrajectoryRecord>>,
    pub batches: Vec<BatchSelection>,
    /// Batch index of every record before down-sampling is applied, aligned with the sets.
    pub pretrain_batch: Vec<usize>,
    pub finetune_batch: BTreeMap<String, Vec<usize>>,
}

fn downsample<T: Clone>(items: Vec<(usize, T)>, target: usize, rng: &mut Rng, what: &str) -> Vec<(usize, T)> {
    if items.len() < target {
        log::warn!("{what}: only {} records available for a target of {target}", items.len());
        return items;
    }
    let mut keep: Vec<usize> = index::sample(rng, items.len(), target).into_vec();
    keep.sort_unstable();
    let mut items: Vec<Option<(usize, T)>> = items.into_iter().map(Some).collect();
    keep.into_iter().map(|i| items[i].take().expect("distinct indices")).collect()
}

/// Harvest over every mask window of every bundle and assemble both datasets. `refs[b]` is the
/// reference set of bundle `b`.
pub fn build_datasets(phantom: &Phantom, policies: &[PolicyBundle], refs: &[ReferenceSet], cfg: &EdsConfig) -> Result<EdsDatasets> {
    if refs.len() != phantom.masks.len() {
        return Err(Error::InvalidArgument(format!("{} reference sets for {} bundles", refs.len(), phantom.masks.len())));
    }
    let mut pre: Vec<(usize, LightRecord)> = Vec::new();
    let mut fine: BTreeMap<String, Vec<(usize, LightRecord)>> = BTreeMap::new();
    let mut batches = Vec::new();
    for b in 0..phantom.masks.len() {
        let name = phantom.masks[b].bundle_name.clone();
        let windows = mask_windows(phantom, b);
        log::info!("eds: bundle {name}: {} windows", windows.len());
        let fine_b = fine.entry(name.clone()).or_default();
        for origin in windows {
            let spec = BatchSpec { bundle: b, origin, seeds_per_voxel: cfg.seeds_per_voxel, seed: cfg.seed };
            let groups = harvest(policies, phantom, &spec, cfg.env)?;
            let long: Vec<Vec<LightRecord>> = groups.into_iter().map(length_filter).collect();
            let near: Vec<Vec<LightRecord>> = long
                .iter()
                .map(|g| within_policy_filter(g.clone(), &refs[b], cfg.threshold_mm))
                .collect::<Result<_>>()?;
            let (p_sel, p_algo) = across_policy_select(long, false);
            let (f_sel, f_algo) = across_policy_select(near, true);
            let bi = batches.len();
            batches.push(BatchSelection {
                bundle: name.clone(),
                origin,
                pretrain_policy: p_algo,
                finetune_policy: f_algo,
                pretrain_count: p_sel.len(),
                finetune_count: f_sel.len(),
            });
            pre.extend(p_sel.into_iter().map(|r| (bi, r)));
            fine_b.extend(f_sel.into_iter().map(|r| (bi, r)));
        }
    }
    let mut rng = rng::stream(cfg.seed, "eds-downsample");
    let pre = downsample(pre, cfg.pretrain_target, &mut rng, "pretrain set");
    let mut out = EdsDatasets { batches, ..Default::default() };
    for (bi, r) in pre {
        out.pretrain.push(r.materialize(phantom, cfg.env)?);
        out.pretrain_batch.push(bi);
    }
    for (name, recs) in fine {
        let recs = downsample(recs, cfg.finetune_target, &mut rng, &format!("finetune set {name}"));
        let mut rs = Vec::with_capacity(recs.len());
        let mut bs = Vec::with_capacity(recs.len());
        for (bi, r) in recs {
            rs.push(r.materialize(phantom, cfg.env)?);
            bs.push(bi);
        }
        out.finetune.insert(name.clone(), rs);
        out.finetune_batch.insert(name, bs);
    }
    Ok(out)
}

pub fn encode_records(records: &[TrajectoryRecord]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(records.len() as u32);
    for r in records {
        r.validate()?;
        w.u8(r.policy.id());
        w.str16(&r.bundle)?;
        w.u32(r.len() as u32);
        w.f32s(&r.states);
        for a in &r.actions {
            w.f32s(a);
        }
        w.f32s(&r.rewards);
        w.f32s(&r.rtg);
        for p in r.streamline.points() {
            w.f32s(p);
        }
    }
    Ok(w.into_bytes())
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<TrajectoryRecord>> {
    let mut r = Reader::new("EDS1", bytes);
    r.magic(MAGIC)?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let at = r.offset();
        let policy = Algo::from_id(r.u8()?).map_err(|e| Error::Decode { format: "EDS1", offset: at, message: e.to_string() })?;
        let bundle = r.str16()?;
        let t = r.u32()? as usize;
        if t == 0 || t.saturating_mul((STATE_DIM + 3 + 2 + 3) * 4) > r.remaining() {
            return Err(r.error(format!("trajectory length {t} does not fit the file")));
        }
        let states = r.f32s(t * STATE_DIM)?;
        let actions = r.f32s(t * 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let rewards = r.f32s(t)?;
        let rtg = r.f32s(t)?;
        let pts = r.f32s((t + 1) * 3)?.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let at = r.offset();
        let streamline = Streamline::new(pts).map_err(|e| Error::Decode { format: "EDS1", offset: at, message: e.to_string() })?;
        let rec = TrajectoryRecord { policy, bundle, states, actions, rewards, rtg, streamline };
        rec.validate().map_err(|e| Error::Decode { format: "EDS1", offset: at, message: e.to_string() })?;
        out.push(rec);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_records(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    binio::write_file(path, &encode_records(records)?)
}

pub fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    decode_records(&binio::read_file(path)?)
}
