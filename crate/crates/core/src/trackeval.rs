//! Inference-time tracking for single policies, the `avg`/`maxq` ensembles and the fused
//! model; MDF post-filtering; voxelization and Dice/OL/OR scoring.

use rand::Rng as _;
use rayon::prelude::*;

use crate::agents::{ActMode, Algo, PolicyBundle};
use crate::eds::{min_max_normalize, MDF_THRESHOLD_MM};
use crate::env::{initial_hint, normalize_action, EnvConfig, TrackingEnv, STATE_DIM};
use crate::error::{Error, Result};
use crate::fusion::{run_fused, FusionModel, Stage, DEFAULT_RTG0};
use crate::geometry::{ReferenceSet, Streamline};
use crate::phantom::{Phantom, VoxelGrid};
use crate::rng;
use crate::vec3::{self, V3};

/// Segment sub-sampling interval of [`voxelize`], in voxels.
pub const VOXELIZE_STEP: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackConfig {
    pub seeds_per_voxel: usize,
    pub step_size: f64,
    pub rtg0: f64,
    pub post_filter_threshold_mm: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            seeds_per_voxel: 7,
            step_size: EnvConfig::default().step_size,
            rtg0: DEFAULT_RTG0,
            post_filter_threshold_mm: MDF_THRESHOLD_MM,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds_per_voxel < 1 {
            return Err(Error::InvalidArgument("seeds_per_voxel must be at least 1".into()));
        }
        if !(self.rtg0 > 0.0 && self.rtg0.is_finite()) {
            return Err(Error::InvalidArgument(format!("rtg0 {} must be positive", self.rtg0)));
        }
        if self.post_filter_threshold_mm.is_nan() || self.post_filter_threshold_mm < 0.0 {
            return Err(Error::InvalidArgument(format!("post-filter threshold {} must be >= 0", self.post_filter_threshold_mm)));
        }
        self.env().validate()
    }

    /// Tracking environment: the configured step size, default termination rules.
    pub fn env(&self) -> EnvConfig {
        EnvConfig { step_size: self.step_size, ..EnvConfig::default() }
    }
}

/// Which actor drives tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrackAlgo {
    Td3,
    Sac,
    Ddpg,
    Avg,
    MaxQ,
    Fusion,
}

impl TrackAlgo {
    pub const ALL: [TrackAlgo; 6] = [TrackAlgo::Td3, TrackAlgo::Sac, TrackAlgo::Ddpg, TrackAlgo::Avg, TrackAlgo::MaxQ, TrackAlgo::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            TrackAlgo::Td3 => "td3",
            TrackAlgo::Sac => "sac",
            TrackAlgo::Ddpg => "ddpg",
            TrackAlgo::Avg => "avg",
            TrackAlgo::MaxQ => "maxq",
            TrackAlgo::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tracking algorithm {s:?} (expected td3, sac, ddpg, avg, maxq or fusion)")))
    }

    pub fn single(self) -> Option<Algo> {
        match self {
            TrackAlgo::Td3 => Some(Algo::Td3),
            TrackAlgo::Sac => Some(Algo::Sac),
            TrackAlgo::Ddpg => Some(Algo::Ddpg),
            _ => None,
        }
    }
}

/// RL actors usable by [`track_policy`].
#[derive(Debug, Clone, Copy)]
pub enum PolicyActor<'a> {
    Single(&'a PolicyBundle),
    /// Normalized mean of the unit actions of every policy.
    Avg(&'a [PolicyBundle]),
    /// Per step, the proposal whose own-critic Q is highest after per-policy min-max
    /// normalization over the active batch.
    MaxQ(&'a [PolicyBundle]),
}

/// `seeds_per_voxel` uniform seeds inside every mask voxel, in voxel index order. Each voxel
/// draws from its own stream.
pub fn tracking_seeds(phantom: &Phantom, bundle: usize, seeds_per_voxel: usize, seed: u64) -> Result<Vec<V3>> {
    let mask = phantom.masks.get(bundle).ok_or_else(|| Error::UnknownBundle(format!("#{bundle}")))?;
    let mut out = Vec::new();
    for idx in mask.indices() {
        let mut r = rng::stream_indexed(seed, "track-seeds", (idx as u64) << 8 | bundle as u64);
        let c = phantom.grid.center(idx);
        for _ in 0..seeds_per_voxel {
            out.push([
                c[0] + r.random_range(-0.49..0.49),
                c[1] + r.random_range(-0.49..0.49),
                c[2] + r.random_range(-0.49..0.49),
            ]);
        }
    }
    Ok(out)
}

/// Half-episode starts: `(seed index, start, hint)`. Seeds with a peak get both hint signs;
/// peakless seeds are tracked once without a hint.
fn half_starts(phantom: &Phantom, bundle: usize, seeds: &[V3]) -> Vec<(usize, V3, Option<V3>)> {
    let mask = &phantom.masks[bundle];
    let mut out = Vec::with_capacity(2 * seeds.len());
    for (i, &s) in seeds.iter().enumerate() {
        match initial_hint(phantom, mask, s, true) {
            Some(h) => {
                out.push((i, s, Some(h)));
                out.push((i, s, Some(vec3::scale(h, -1.0))));
            }
            None => out.push((i, s, None)),
        }
    }
    out
}

/// Join the halves of each seed: the backward half reversed, then the forward half without
/// its duplicate seed point.
fn merge_halves(starts: &[(usize, V3, Option<V3>)], halves: Vec<Vec<[f32; 3]>>) -> Result<Vec<Streamline>> {
    let mut out = Vec::new();
    let mut k = 0;
    while k < starts.len() {
        let seed = starts[k].0;
        if k + 1 < starts.len() && starts[k + 1].0 == seed {
            let mut pts = halves[k + 1].clone();
            pts.reverse();
            pts.extend_from_slice(&halves[k][1..]);
            out.push(Streamline::new(pts)?);
            k += 2;
        } else {
            out.push(Streamline::new(halves[k].clone())?);
            k += 1;
        }
    }
    Ok(out)
}

fn ensemble_actions(actor: PolicyActor, states: &[f32], n: usize) -> Result<Vec<[f32; 3]>> {
    // Deterministic mode never draws from the generator.
    let unused = rng::stream(0, "deterministic");
    let units = |p: &PolicyBundle| -> Result<Vec<[f32; 3]>> {
        Ok(p.act_batch(states, n, ActMode::Deterministic, &mut unused.clone())?
            .into_iter()
            .map(|a| normalize_action(a).unwrap_or([1.0, 0.0, 0.0]))
            .collect())
    };
    match actor {
        PolicyActor::Single(p) => units(p),
        PolicyActor::Avg(ps) => {
            if ps.is_empty() {
                return Err(Error::InvalidArgument("avg ensemble needs policies".into()));
            }
            let all: Vec<Vec<[f32; 3]>> = ps.iter().map(&units).collect::<Result<_>>()?;
            Ok((0..n)
                .map(|i| {
                    // Agreeing proposals are returned as is rather than renormalized.
                    if all.iter().all(|a| a[i] == all[0][i]) {
                        return all[0][i];
                    }
                    let mut m = [0.0f64; 3];
                    for a in &all {
                        for j in 0..3 {
                            m[j] += a[i][j] as f64 / all.len() as f64;
                        }
                    }
                    vec3::normalize(m).map(vec3::to_f32).unwrap_or(all[0][i])
                })
                .collect())
        }
        PolicyActor::MaxQ(ps) => {
            if ps.is_empty() {
                return Err(Error::InvalidArgument("maxq ensemble needs policies".into()));
            }
            let mut proposals = Vec::with_capacity(ps.len());
            let mut scores = Vec::with_capacity(ps.len());
            for p in ps {
                let a = units(p)?;
                let q: Vec<f64> = p.q_batch(states, &a)?.into_iter().map(f64::from).collect();
                scores.push(min_max_normalize(&q));
                proposals.push(a);
            }
            Ok(maxq_choice(&scores).into_iter().enumerate().map(|(i, k)| proposals[k][i]).collect())
        }
    }
}

/// Per row, the index of the highest score; ties go to the earlier policy.
pub fn maxq_choice(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..scores.len() {
                if scores[k][i] > scores[best][i] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Half-episodes per lockstep group. Groups run in parallel; `maxq` normalizes within a group.
pub const TRACK_CHUNK: usize = 512;

fn track_group(actor: PolicyActor, phantom: &Phantom, bundle: usize, starts: &[(usize, V3, Option<V3>)], env_cfg: EnvConfig) -> Result<Vec<Vec<[f32; 3]>>> {
    let mut envs = Vec::with_capacity(starts.len());
    for &(_, s, hint) in starts {
        let mut env = TrackingEnv::new(phantom, bundle, env_cfg)?;
        env.reset(s, hint)?;
        envs.push(env);
    }
    let mut halves = vec![Vec::new(); starts.len()];
    let mut active: Vec<usize> = (0..starts.len()).collect();
    let mut flat = Vec::new();
    while !active.is_empty() {
        flat.resize(active.len() * STATE_DIM, 0.0);
        for (k, &i) in active.iter().enumerate() {
            envs[i].state_into(&mut flat[k * STATE_DIM..(k + 1) * STATE_DIM]);
        }
        let acts = ensemble_actions(actor, &flat, active.len())?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            envs[i].advance(acts[k])?;
            if envs[i].is_done() {
                halves[i] = envs[i].take_points();
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(halves)
}

/// Track `seeds_per_voxel` seeds per mask voxel bidirectionally with deterministic RL actions.
/// One streamline per seed, in seed order.
pub fn track_policy(actor: PolicyActor, phantom: &Phantom, bundle: usize, cfg: &TrackConfig, seed: u64) -> Result<Vec<Streamline>> {
    cfg.validate()?;
    let seeds = tracking_seeds(phantom, bundle, cfg.seeds_per_voxel, seed)?;
    let starts = half_starts(phantom, bundle, &seeds);
    let env_cfg = cfg.env();
    let groups: Vec<Vec<Vec<[f32; 3]>>> = starts
        .par_chunks(TRACK_CHUNK)
        .map(|g| track_group(actor, phantom, bundle, g, env_cfg))
        .collect::<Result<_>>()?;
    merge_halves(&starts, groups.into_iter().flatten().collect())
}

/// Bidirectional tracking with a bundle-specific fused model.
pub fn track_fusion(model: &FusionModel, phantom: &Phantom, bundle: usize, cfg: &TrackConfig, seed: u64) -> Result<Vec<Streamline>> {
    cfg.validate()?;
    let name = &phantom.masks.get(bundle).ok_or_else(|| Error::UnknownBundle(format!("#{bundle}")))?.bundle_name;
    match &model.stage {
        Stage::Finetuned(b) | Stage::Mcpft(b) if b == name => {}
        other => {
            return Err(Error::InvalidArgument(format!("fused model at stage {} is not specific to bundle {name}", other.tag())));
        }
    }
    let seeds = tracking_seeds(phantom, bundle, cfg.seeds_per_voxel, seed)?;
    let starts = half_starts(phantom, bundle, &seeds);
    let pairs: Vec<(V3, Option<V3>)> = starts.iter().map(|&(_, s, h)| (s, h)).collect();
    let groups: Vec<Vec<Vec<[f32; 3]>>> = pairs
        .par_chunks(TRACK_CHUNK)
        .map(|g| Ok(run_fused(model, phantom, bundle, g, cfg.env(), cfg.rtg0, None)?.into_iter().map(|e| e.points).collect()))
        .collect::<Result<_>>()?;
    merge_halves(&starts, groups.into_iter().flatten().collect())
}

/// Keep streamlines within `threshold_mm` MDF of some reference; an infinite threshold keeps
/// everything.
pub fn post_filter(streamlines: &[Streamline], refs: &ReferenceSet, threshold_mm: f64) -> Result<Vec<Streamline>> {
    if threshold_mm == f64::INFINITY {
        return Ok(streamlines.to_vec());
    }
    let mut out = Vec::with_capacity(streamlines.len());
    for s in streamlines {
        if refs.min_distance(s)? <= threshold_mm {
            out.push(s.clone());
        }
    }
    Ok(out)
}

/// Voxels touched by any streamline segment, sampled every [`VOXELIZE_STEP`] voxels.
/// Points outside the grid are ignored.
pub fn voxelize(streamlines: &[Streamline], grid: &VoxelGrid) -> Vec<bool> {
    let mut mask = vec![false; grid.len()];
    let mut mark = |p: V3| {
        if let Some(i) = grid.nearest_voxel(p) {
            mask[i] = true;
        }
    };
    for s in streamlines {
        for w in s.points().windows(2) {
            let (a, b) = (vec3::from_f32(w[0]), vec3::from_f32(w[1]));
            let d = vec3::sub(b, a);
            let n = (vec3::norm(d) / VOXELIZE_STEP).ceil().max(1.0) as usize;
            for j in 0..=n {
                mark(vec3::add(a, vec3::scale(d, j as f64 / n as f64)));
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleScore {
    pub dice: f64,
    pub ol: f64,
    pub or_: f64,
}

/// Dice, overlap and overreach (normalized by the ground-truth size).
pub fn score(candidate: &[bool], truth: &[bool]) -> Result<BundleScore> {
    if candidate.len() != truth.len() {
        return Err(Error::shape("score masks", truth.len(), candidate.len()));
    }
    let g = truth.iter().filter(|&&t| t).count();
    if g == 0 {
        return Err(Error::InvalidArgument("ground-truth mask is empty".into()));
    }
    let c = candidate.iter().filter(|&&v| v).count();
    let both = candidate.iter().zip(truth).filter(|(&a, &b)| a && b).count();
    let g = g as f64;
    Ok(BundleScore {
        dice: 2.0 * both as f64 / (c as f64 + g),
        ol: both as f64 / g,
        or_: (c - both) as f64 / g,
    })
}

pub fn mask_of(phantom: &Phantom, bundle: usize) -> Vec<bool> {
    phantom.masks[bundle].voxels.iter().map(|&v| v == 1).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub bundle: String,
    pub algo: String,
    pub score: BundleScore,
}

pub const SCORES_HEADER: &str = "bundle\talgo\tdice\tol\tor";

/// Scores table sorted by bundle, then algorithm, four decimals.
pub fn format_scores(rows: &[ScoreRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (&a.bundle, &a.algo).cmp(&(&b.bundle, &b.algo)));
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for r in &sorted {
        out.push_str(&format!("{}\t{}\t{:.4}\t{:.4}\t{:.4}\n", r.bundle, r.algo, r.score.dice, r.score.ol, r.score.or_));
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line == SCORES_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::InvalidArgument(format!("scores line {}: expected 5 tab-separated fields: {line:?}", n + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(ScoreRow {
            bundle: f[0].to_string(),
            algo: f[1].to_string(),
            score: BundleScore { dice: num(f[2])?, ol: num(f[3])?, or_: num(f[4])? },
        });
    }
    Ok(rows)
}

/// Gnuplot data blocks, one per bundle (separated by two blank lines, addressable with
/// `index`), values in percent.
pub fn gnuplot_table(rows: &[ScoreRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (&a.bundle, &a.algo).cmp(&(&b.bundle, &b.algo)));
    let mut out = String::from("# algo dice ol or\n");
    let mut current: Option<&str> = None;
    for r in &sorted {
        if current != Some(&r.bundle) {
            if current.is_some() {
                out.push_str("\n\n");
            }
            out.push_str(&format!("# bundle {}\n", r.bundle));
            current = Some(&r.bundle);
        }
        out.push_str(&format!("\"{}\" {:.2} {:.2} {:.2}\n", r.algo, 100.0 * r.score.dice, 100.0 * r.score.ol, 100.0 * r.score.or_));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Hyper;
    use crate::fusion::FusionConfig;
    use crate::geometry::reference_set;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use proptest::prelude::*;

    fn tube() -> Phantom {
        generate_phantom(&PhantomSpec::straight_tube(5)).unwrap()
    }

    fn small_policy(algo: Algo, seed: u64) -> PolicyBundle {
        let hyper = Hyper { hidden: 16, ..Hyper::defaults(algo) };
        PolicyBundle::new(algo, hyper, &mut rng::stream(seed, "test-policy"))
    }

    fn cfg() -> TrackConfig {
        TrackConfig { seeds_per_voxel: 1, ..TrackConfig::default() }
    }

    fn line(pts: &[[f32; 3]]) -> Streamline {
        Streamline::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn score_examples() {
        let g: Vec<bool> = (0..20).map(|i| i < 10).collect();
        assert_eq!(score(&g, &g).unwrap(), BundleScore { dice: 1.0, ol: 1.0, or_: 0.0 });
        let disjoint: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let s = score(&disjoint, &g).unwrap();
        assert_eq!((s.dice, s.ol), (0.0, 0.0));
        let c: Vec<bool> = (0..20).map(|i| i < 6 || (10..12).contains(&i)).collect();
        let s = score(&c, &g).unwrap();
        assert!((s.ol - 0.6).abs() < 1e-12 && (s.or_ - 0.2).abs() < 1e-12);
        assert!((s.dice - 12.0 / 18.0).abs() < 1e-12);
        assert!(score(&c, &[false; 20]).is_err());
    }

    proptest! {
        #[test]
        fn adding_voxels_moves_scores_the_right_way(
            truth in prop::collection::vec(any::<bool>(), 30),
            cand in prop::collection::vec(any::<bool>(), 30),
            pick in 0usize..30,
        ) {
            prop_assume!(truth.iter().any(|&t| t));
            let base = score(&cand, &truth).unwrap();
            let mut more = cand.clone();
            if let Some(i) = (0..30).map(|k| (pick + k) % 30).find(|&i| !truth[i] && !cand[i]) {
                more[i] = true;
                let s = score(&more, &truth).unwrap();
                prop_assert_eq!(s.ol, base.ol);
                prop_assert!(s.or_ > base.or_);
            }
            let mut more = cand.clone();
            if let Some(i) = (0..30).map(|k| (pick + k) % 30).find(|&i| truth[i] && !cand[i]) {
                more[i] = true;
                let s = score(&more, &truth).unwrap();
                prop_assert!(s.ol > base.ol);
                prop_assert!(s.dice > base.dice);
            }
        }
    }

    #[test]
    fn voxelize_examples() {
        let grid = VoxelGrid::new([8, 8, 8], 1.0).unwrap();
        let count = |m: &[bool]| m.iter().filter(|&&v| v).count();
        assert_eq!(count(&voxelize(&[line(&[[3.1, 3.0, 3.0], [3.2, 3.1, 3.0]])], &grid)), 1);
        let m = voxelize(&[line(&[[2.0, 4.0, 4.0], [4.0, 4.0, 4.0]])], &grid);
        assert_eq!(count(&m), 3);
        assert!(m[grid.index(2, 4, 4)] && m[grid.index(3, 4, 4)] && m[grid.index(4, 4, 4)]);
        assert_eq!(count(&voxelize(&[], &grid)), 0);
    }

    #[test]
    fn post_filter_examples() {
        let p = tube();
        let gt = &p.ground_truth[0];
        let refs = reference_set(gt, 15, 1.0).unwrap();
        let kept = post_filter(gt, &refs, MDF_THRESHOLD_MM).unwrap();
        assert_eq!(kept.len(), gt.len());
        let far = line(&[[5.0, 1.0, 14.0], [40.0, 1.0, 14.0]]);
        let mut mixed = gt.clone();
        mixed.push(far.clone());
        let kept = post_filter(&mixed, &refs, MDF_THRESHOLD_MM).unwrap();
        assert!(!kept.contains(&far));
        assert_eq!(post_filter(&kept, &refs, MDF_THRESHOLD_MM).unwrap(), kept);
        assert_eq!(post_filter(&mixed, &refs, f64::INFINITY).unwrap(), mixed);
    }

    #[test]
    fn avg_of_identical_policies_equals_single() {
        let p = tube();
        let pol = small_policy(Algo::Td3, 1);
        let three = vec![pol.clone(), pol.clone(), pol.clone()];
        let single = track_policy(PolicyActor::Single(&pol), &p, 0, &cfg(), 2).unwrap();
        let avg = track_policy(PolicyActor::Avg(&three), &p, 0, &cfg(), 2).unwrap();
        assert_eq!(single, avg);
        let seeds = tracking_seeds(&p, 0, 1, 2).unwrap();
        assert!(single.len() <= 2 * seeds.len());
        assert_eq!(single, track_policy(PolicyActor::Single(&pol), &p, 0, &cfg(), 2).unwrap());
    }

    #[test]
    fn maxq_follows_the_dominating_policy() {
        assert_eq!(maxq_choice(&[vec![0.1, 0.9, 0.5], vec![0.8, 0.2, 0.5]]), vec![1, 0, 0]);
        let dominated = vec![vec![0.0, 0.2, 0.3], vec![1.0, 0.9, 0.8], vec![0.5, 0.5, 0.5]];
        assert!(maxq_choice(&dominated).iter().all(|&k| k == 1));
        // With constant critics every normalized score ties and the first policy wins.
        let p = tube();
        let mut pols = vec![small_policy(Algo::Td3, 1), small_policy(Algo::Sac, 2), small_policy(Algo::Ddpg, 3)];
        for pol in &mut pols {
            for c in &mut pol.critics {
                let last = c.mlp.layers.last().unwrap();
                c.params.get_mut(last.w).data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let first = track_policy(PolicyActor::Single(&pols[0]), &p, 0, &cfg(), 4).unwrap();
        assert_eq!(track_policy(PolicyActor::MaxQ(&pols), &p, 0, &cfg(), 4).unwrap(), first);
    }

    #[test]
    fn merged_streamlines_pass_through_their_seed() {
        let p = tube();
        let pol = small_policy(Algo::Ddpg, 7);
        let seeds = tracking_seeds(&p, 0, 1, 3).unwrap();
        let out = track_policy(PolicyActor::Single(&pol), &p, 0, &cfg(), 3).unwrap();
        assert_eq!(out.len(), seeds.len());
        for (s, seed) in out.iter().zip(&seeds) {
            let seed32 = vec3::to_f32(*seed);
            assert!(s.points().contains(&seed32));
        }
    }

    #[test]
    fn fusion_tracking_needs_a_bundle_model() {
        let p = tube();
        let mut m = FusionModel::new(FusionConfig { context: 4, width: 8, blocks: 1, dropout: 0.0 }, 1).unwrap();
        assert!(track_fusion(&m, &p, 0, &cfg(), 1).is_err());
        m.stage = Stage::Finetuned(p.masks[0].bundle_name.clone());
        let a = track_fusion(&m, &p, 0, &cfg(), 1).unwrap();
        assert_eq!(a.len(), tracking_seeds(&p, 0, 1, 1).unwrap().len());
        assert_eq!(a, track_fusion(&m, &p, 0, &cfg(), 1).unwrap());
    }

    #[test]
    fn scores_text_roundtrip_sorted() {
        let s = BundleScore { dice: 0.66666, ol: 0.6, or_: 0.2 };
        let rows = vec![
            ScoreRow { bundle: "b".into(), algo: "td3".into(), score: s },
            ScoreRow { bundle: "a".into(), algo: "sac".into(), score: s },
            ScoreRow { bundle: "a".into(), algo: "fusion".into(), score: s },
        ];
        let text = format_scores(&rows);
        assert_eq!(text.lines().nth(1).unwrap(), "a\tfusion\t0.6667\t0.6000\t0.2000");
        let back = parse_scores(&text).unwrap();
        assert_eq!(back.iter().map(|r| r.algo.as_str()).collect::<Vec<_>>(), ["fusion", "sac", "td3"]);
        assert!(gnuplot_table(&rows).contains("# bundle b\n\"td3\" 66.67 60.00 20.00"));
    }
}
