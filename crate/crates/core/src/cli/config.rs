//! `key = value` run configuration with presets, range checks and a resolved echo.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::agents::{Algo, Hyper, Schedule};
use crate::eds::EdsConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, McpftSchedule, TrainSchedule};
use crate::phantom::PhantomSpec;
use crate::trackeval::TrackConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-scale schedules.
    Full,
    /// Laptop-sized schedules for the whole pipeline.
    Desk,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(vec![format!("unknown preset {s:?} (expected full or desk)")])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomPreset {
    StraightTube,
    Crossing,
    Curved,
}

impl PhantomPreset {
    const NAMES: [(&'static str, PhantomPreset); 3] =
        [("straight_tube", PhantomPreset::StraightTube), ("crossing", PhantomPreset::Crossing), ("curved", PhantomPreset::Curved)];

    pub fn as_str(self) -> &'static str {
        Self::NAMES.iter().find(|(_, p)| *p == self).map(|(n, _)| *n).expect("listed")
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::NAMES.iter().find(|(n, _)| *n == s).map(|(_, p)| *p)
    }

    pub fn spec(self, seed: u64) -> PhantomSpec {
        match self {
            PhantomPreset::StraightTube => PhantomSpec::straight_tube(seed),
            PhantomPreset::Crossing => PhantomSpec::crossing(seed),
            PhantomPreset::Curved => PhantomSpec::curved(seed),
        }
    }
}

/// Everything a pipeline run reads from its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub phantom: PhantomPreset,
    pub streamlines_per_bundle: usize,
    pub env: EnvConfig,
    pub td3: Hyper,
    pub sac: Hyper,
    pub ddpg: Hyper,
    pub rl: Schedule,
    /// Episodes used to measure trained policies and the random baseline.
    pub rl_eval_episodes: usize,
    pub eds: EdsConfig,
    pub fusion: FusionConfig,
    pub pretrain: TrainSchedule,
    pub finetune: TrainSchedule,
    pub mcpft: McpftSchedule,
    pub track: TrackConfig,
}

#[derive(Debug, Clone, Copy)]
enum Bound {
    Positive,
    NonNegative,
    /// `(0, 1]`
    UnitOpenClosed,
    /// `[0, 1)`
    UnitClosedOpen,
    /// `(0, 180]`
    Degrees,
}

impl Bound {
    fn holds(self, v: f64) -> bool {
        match self {
            Bound::Positive => v > 0.0 && v.is_finite(),
            Bound::NonNegative => v >= 0.0,
            Bound::UnitOpenClosed => v > 0.0 && v <= 1.0,
            Bound::UnitClosedOpen => (0.0..1.0).contains(&v),
            Bound::Degrees => v > 0.0 && v <= 180.0,
        }
    }

    fn describe(self) -> &'static str {
        match self {
            Bound::Positive => "> 0",
            Bound::NonNegative => ">= 0",
            Bound::UnitOpenClosed => "in (0, 1]",
            Bound::UnitClosedOpen => "in [0, 1)",
            Bound::Degrees => "in (0, 180]",
        }
    }
}

enum Slot<'a> {
    F64(&'a mut f64, Bound),
    Usize(&'a mut usize, usize),
    U64(&'a mut u64),
    Bool(&'a mut bool),
    Phantom(&'a mut PhantomPreset),
    Path(&'a mut PathBuf),
}

impl Slot<'_> {
    fn set(&mut self, raw: &str) -> std::result::Result<(), String> {
        match self {
            Slot::F64(v, bound) => {
                let x: f64 = raw.parse().map_err(|_| format!("expected a number, got {raw:?}"))?;
                if !bound.holds(x) {
                    return Err(format!("{x} must be {}", bound.describe()));
                }
                **v = x;
            }
            Slot::Usize(v, min) => {
                let x: usize = raw.parse().map_err(|_| format!("expected a non-negative integer, got {raw:?}"))?;
                if x < *min {
                    return Err(format!("{x} must be >= {min}"));
                }
                **v = x;
            }
            Slot::U64(v) => **v = raw.parse().map_err(|_| format!("expected a non-negative integer, got {raw:?}"))?,
            Slot::Bool(v) => {
                **v = match raw {
                    "true" => true,
                    "false" => false,
                    _ => return Err(format!("expected true or false, got {raw:?}")),
                }
            }
            Slot::Phantom(v) => {
                **v = PhantomPreset::parse(raw).ok_or_else(|| format!("expected straight_tube, crossing or curved, got {raw:?}"))?;
            }
            Slot::Path(v) => {
                if raw.is_empty() {
                    return Err("empty path".into());
                }
                **v = PathBuf::from(raw);
            }
        }
        Ok(())
    }

    fn show(&self) -> String {
        match self {
            Slot::F64(v, _) => format!("{v}"),
            Slot::Usize(v, _) => v.to_string(),
            Slot::U64(v) => v.to_string(),
            Slot::Bool(v) => v.to_string(),
            Slot::Phantom(v) => v.as_str().to_string(),
            Slot::Path(v) => v.display().to_string(),
        }
    }
}

fn hyper_slots<'a>(out: &mut Vec<(String, Slot<'a>)>, algo: Algo, h: &'a mut Hyper) {
    let p = algo.as_str();
    out.push((format!("{p}.lr"), Slot::F64(&mut h.lr, Bound::Positive)));
    out.push((format!("{p}.sigma"), Slot::F64(&mut h.sigma, Bound::NonNegative)));
    out.push((format!("{p}.gamma"), Slot::F64(&mut h.gamma, Bound::UnitOpenClosed)));
    if algo == Algo::Sac {
        out.push((format!("{p}.alpha"), Slot::F64(&mut h.alpha, Bound::NonNegative)));
    }
    out.push((format!("{p}.tau"), Slot::F64(&mut h.tau, Bound::UnitOpenClosed)));
    if algo == Algo::Td3 {
        out.push((format!("{p}.policy_delay"), Slot::Usize(&mut h.policy_delay, 1)));
        out.push((format!("{p}.target_noise_clip"), Slot::F64(&mut h.target_noise_clip, Bound::NonNegative)));
    }
    out.push((format!("{p}.hidden"), Slot::Usize(&mut h.hidden, 1)));
}

fn schedule_slots<'a>(out: &mut Vec<(String, Slot<'a>)>, p: &str, s: &'a mut TrainSchedule) {
    out.push((format!("{p}.iterations"), Slot::Usize(&mut s.iterations, 0)));
    out.push((format!("{p}.updates_per_iter"), Slot::Usize(&mut s.updates_per_iter, 0)));
    out.push((format!("{p}.batch_size"), Slot::Usize(&mut s.batch_size, 1)));
    out.push((format!("{p}.lr"), Slot::F64(&mut s.lr, Bound::Positive)));
    out.push((format!("{p}.warmup"), Slot::U64(&mut s.warmup)));
}

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        let mut c = RunConfig {
            seed: 0,
            output_dir: PathBuf::from("tractfuse-out"),
            phantom: PhantomPreset::Crossing,
            streamlines_per_bundle: 20,
            env: EnvConfig::default(),
            td3: Hyper::defaults(Algo::Td3),
            sac: Hyper::defaults(Algo::Sac),
            ddpg: Hyper::defaults(Algo::Ddpg),
            rl: Schedule::default(),
            rl_eval_episodes: 256,
            eds: EdsConfig::default(),
            fusion: FusionConfig::default(),
            pretrain: TrainSchedule::pretrain(),
            finetune: TrainSchedule::finetune(),
            mcpft: McpftSchedule::default(),
            track: TrackConfig::default(),
        };
        if preset == Preset::Desk {
            c.apply_desk();
        }
        c
    }

    fn apply_desk(&mut self) {
        for s in [&mut self.pretrain, &mut self.finetune] {
            s.iterations = (s.iterations / 10).max(1);
            s.updates_per_iter = (s.updates_per_iter / 100).max(1);
            // Warmup shrinks with the updates so the ramp still ends inside the run.
            s.warmup /= 100;
        }
        self.mcpft.iterations = self.mcpft.iterations.div_ceil(10);
        self.mcpft.actor_updates = (self.mcpft.actor_updates / 100).max(1);
        self.mcpft.critic_updates = (self.mcpft.critic_updates / 100).max(1);
        self.mcpft.rollout_episodes = 16;
        self.eds.pretrain_target = 1500;
        self.eds.finetune_target = 500;
        self.fusion.width = 64;
        self.fusion.context = 20;
        self.track.seeds_per_voxel = 1;
        // Small networks with a larger step learn within minutes on one core.
        for h in [&mut self.td3, &mut self.sac, &mut self.ddpg] {
            h.lr = 3e-4;
            h.hidden = 256;
        }
        self.rl = Schedule { batches: 40, episodes_per_batch: 64, gradient_steps: 40, batch_size: 256, replay_capacity: 50_000 };
    }

    pub fn hyper(&self, algo: Algo) -> Hyper {
        match algo {
            Algo::Td3 => self.td3,
            Algo::Sac => self.sac,
            Algo::Ddpg => self.ddpg,
        }
    }

    fn slots(&mut self) -> Vec<(String, Slot<'_>)> {
        let mut out: Vec<(String, Slot<'_>)> = Vec::new();
        let s = |k: &str| k.to_string();
        out.push((s("seed"), Slot::U64(&mut self.seed)));
        out.push((s("output_dir"), Slot::Path(&mut self.output_dir)));
        out.push((s("phantom.preset"), Slot::Phantom(&mut self.phantom)));
        out.push((s("phantom.streamlines_per_bundle"), Slot::Usize(&mut self.streamlines_per_bundle, 1)));
        out.push((s("env.step_size"), Slot::F64(&mut self.env.step_size, Bound::UnitOpenClosed)));
        out.push((s("env.max_steps"), Slot::Usize(&mut self.env.max_steps, 1)));
        out.push((s("env.max_angle_deg"), Slot::F64(&mut self.env.max_angle_deg, Bound::Degrees)));
        out.push((s("env.neighbor_offset"), Slot::F64(&mut self.env.neighbor_offset, Bound::Positive)));
        hyper_slots(&mut out, Algo::Td3, &mut self.td3);
        hyper_slots(&mut out, Algo::Sac, &mut self.sac);
        hyper_slots(&mut out, Algo::Ddpg, &mut self.ddpg);
        out.push((s("rl.batches"), Slot::Usize(&mut self.rl.batches, 0)));
        out.push((s("rl.episodes_per_batch"), Slot::Usize(&mut self.rl.episodes_per_batch, 1)));
        out.push((s("rl.gradient_steps"), Slot::Usize(&mut self.rl.gradient_steps, 0)));
        out.push((s("rl.batch_size"), Slot::Usize(&mut self.rl.batch_size, 1)));
        out.push((s("rl.replay_capacity"), Slot::Usize(&mut self.rl.replay_capacity, 1)));
        out.push((s("rl.eval_episodes"), Slot::Usize(&mut self.rl_eval_episodes, 1)));
        out.push((s("eds.seeds_per_voxel"), Slot::Usize(&mut self.eds.seeds_per_voxel, 1)));
        out.push((s("eds.pretrain_target"), Slot::Usize(&mut self.eds.pretrain_target, 1)));
        out.push((s("eds.finetune_target"), Slot::Usize(&mut self.eds.finetune_target, 1)));
        out.push((s("eds.threshold_mm"), Slot::F64(&mut self.eds.threshold_mm, Bound::NonNegative)));
        out.push((s("fusion.context"), Slot::Usize(&mut self.fusion.context, 1)));
        out.push((s("fusion.width"), Slot::Usize(&mut self.fusion.width, 1)));
        out.push((s("fusion.blocks"), Slot::Usize(&mut self.fusion.blocks, 1)));
        out.push((s("fusion.dropout"), Slot::F64(&mut self.fusion.dropout, Bound::UnitClosedOpen)));
        schedule_slots(&mut out, "pretrain", &mut self.pretrain);
        schedule_slots(&mut out, "finetune", &mut self.finetune);
        let m = &mut self.mcpft;
        out.push((s("mcpft.iterations"), Slot::Usize(&mut m.iterations, 0)));
        out.push((s("mcpft.actor_updates"), Slot::Usize(&mut m.actor_updates, 0)));
        out.push((s("mcpft.critic_updates"), Slot::Usize(&mut m.critic_updates, 0)));
        out.push((s("mcpft.batch_size"), Slot::Usize(&mut m.batch_size, 1)));
        out.push((s("mcpft.lr"), Slot::F64(&mut m.lr, Bound::Positive)));
        out.push((s("mcpft.rollout_episodes"), Slot::Usize(&mut m.rollout_episodes, 1)));
        out.push((s("mcpft.critic_only"), Slot::Bool(&mut m.critic_only)));
        let t = &mut self.track;
        out.push((s("track.seeds_per_voxel"), Slot::Usize(&mut t.seeds_per_voxel, 1)));
        out.push((s("track.step_size"), Slot::F64(&mut t.step_size, Bound::UnitOpenClosed)));
        out.push((s("track.rtg0"), Slot::F64(&mut t.rtg0, Bound::Positive)));
        out.push((s("track.post_filter_mm"), Slot::F64(&mut t.post_filter_threshold_mm, Bound::NonNegative)));
        out
    }

    /// Apply `key = value` text on top of `self`. Every problem is collected; the error lists
    /// all of them.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut errors = Vec::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut slots = self.slots();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {line_no}: expected key = value, got {line:?}"));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(first) = seen.insert(k.to_string(), line_no) {
                errors.push(format!("line {line_no}: duplicate key {k} (first set on line {first})"));
                continue;
            }
            match slots.iter_mut().find(|(name, _)| name == k) {
                None => errors.push(format!("line {line_no}: unknown key {k}")),
                Some((_, slot)) => {
                    if let Err(e) = slot.set(v) {
                        errors.push(format!("line {line_no}: {k}: {e}"));
                    }
                }
            }
        }
        drop(slots);
        if errors.is_empty() {
            if let Err(e) = self.validate() {
                errors.push(e.to_string());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Cross-field checks delegated to the owning modules.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.fusion.validate()?;
        self.track.validate()?;
        Ok(())
    }

    pub fn load(path: Option<&Path>, preset: Preset) -> Result<Self> {
        let mut c = Self::defaults(preset);
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::MissingArtifact(p.to_path_buf())
                } else {
                    Error::io(p, e)
                }
            })?;
            c.apply_text(&text)?;
        }
        Ok(c)
    }

    /// Resolved configuration, one `key = value` per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut c = self.clone();
        c.slots().iter().map(|(k, v)| format!("{k} = {}\n", v.show())).collect()
    }

    pub fn eds_config(&self) -> EdsConfig {
        EdsConfig { env: self.env, seed: self.seed, ..self.eds }
    }
}
