//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line; the test fails if
//! any criterion fails. The desk pipeline runs once and is shared by the criteria that read
//! its artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;

use tractfuse::agents::{Algo, Hyper, PolicyBundle};
use tractfuse::cli::Manifest;
use tractfuse::eds::{compute_rtg, read_records, LightRecord, TrajectoryRecord, MDF_THRESHOLD_MM, MIN_TRANSITIONS};
use tractfuse::env::{reward, EnvConfig, StopReason, TrackingEnv, STATE_DIM};
use tractfuse::fusion::{
    actor_objective, frozen_values, mcpft, CriticView, FusionConfig, FusionModel, FusionNet, McpftSchedule, StepRef, TokenBatch,
    WindowBatch,
};
use tractfuse::geometry::{farthest_sample, mdf, mdf_canonical, read_streamlines, reference_set, resample, Streamline, MDF_POINTS, REFERENCE_COUNT};
use tractfuse::nn::gradcheck::{check_inputs, check_params, GradReport};
use tractfuse::nn::{Dropout, Graph, Mlp, ParamSet, Tensor, Var};
use tractfuse::phantom::{generate_phantom, Phantom, PhantomSpec};
use tractfuse::rng::{self, Rng};
use tractfuse::trackeval::{parse_scores, score, TrackAlgo};
use tractfuse::Result;

const BIN: &str = env!("CARGO_BIN_EXE_tractfuse");
const GRAD_TOL: f64 = 1e-5;
const BUNDLES: [&str; 2] = ["cross_a", "cross_b"];

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Written straight to stdout so the lines survive the harness's output capture.
fn say(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run_criterion(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let out = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panic: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    };
    let secs = start.elapsed().as_secs_f64();
    match &out {
        Ok(detail) => say(format!("[PASS] {n:>2} {name} ({secs:.1} s): {detail}")),
        Err(detail) => say(format!("[FAIL] {n:>2} {name} ({secs:.1} s): {detail}")),
    }
    out.is_ok()
}

fn unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.3 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

// ---------------------------------------------------------------------------------------------
// 1. gradients

fn rand_tensor(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values kept at least `gap` away from zero, for kinked primitives.
fn away_from_zero(rng: &mut Rng, r: usize, c: usize, gap: f64) -> Tensor<f64> {
    let v = (0..r * c)
        .map(|_| {
            let x: f64 = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::matrix(r, c, v).unwrap()
}

/// Reduce to a scalar with fixed random weights so every output entry matters differently.
fn reduce(g: &mut Graph<f64>, v: Var, salt: u64) -> Var {
    let n = g.value(v).len();
    let mut r = rng::stream(salt, "grad-weights");
    let w = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    g.weighted_sum(v, w)
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> (&'static str, Vec<Tensor<f64>>, Build) {
    (name, inputs, Box::new(f))
}

fn primitive_cases(rng: &mut Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let (r, c, k) = (3, 4, 5);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    let m = |rng: &mut Rng, a, b| rand_tensor(rng, a, b, -1.0, 1.0);
    cases.push(case("matmul", vec![m(rng, r, k), m(rng, k, c)], |g, v| {
        let y = g.matmul(v[0], v[1]);
        Ok(reduce(g, y, 1))
    }));
    cases.push(case("linear", vec![m(rng, r, k), m(rng, k, c), m(rng, 1, c)], |g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        Ok(reduce(g, y, 2))
    }));
    cases.push(case("add_bias", vec![m(rng, r, c), m(rng, 1, c)], |g, v| {
        let y = g.add_bias(v[0], v[1]);
        Ok(reduce(g, y, 3))
    }));
    cases.push(case("add", vec![m(rng, r, c), m(rng, r, c)], |g, v| {
        let y = g.add(v[0], v[1]);
        Ok(reduce(g, y, 4))
    }));
    cases.push(case("sub", vec![m(rng, r, c), m(rng, r, c)], |g, v| {
        let y = g.sub(v[0], v[1]);
        Ok(reduce(g, y, 5))
    }));
    cases.push(case("mul", vec![m(rng, r, c), m(rng, r, c)], |g, v| {
        let y = g.mul(v[0], v[1]);
        Ok(reduce(g, y, 6))
    }));
    // min: keep the operands well separated so the stencil never crosses the switch.
    let a = rand_tensor(rng, r, c, -1.0, 1.0);
    let b = Tensor::matrix(r, c, a.data.iter().enumerate().map(|(i, x)| if i % 2 == 0 { x + 0.5 } else { x - 0.5 }).collect()).unwrap();
    cases.push(case("min", vec![a, b], |g, v| {
        let y = g.min(v[0], v[1]);
        Ok(reduce(g, y, 7))
    }));
    cases.push(case("scale", vec![m(rng, r, c)], |g, v| {
        let y = g.scale(v[0], -1.7);
        Ok(reduce(g, y, 8))
    }));
    cases.push(case("add_scalar", vec![m(rng, r, c)], |g, v| {
        let y = g.add_scalar(v[0], 0.3);
        let y = g.square(y);
        Ok(reduce(g, y, 9))
    }));
    cases.push(case("relu", vec![away_from_zero(rng, r, c, 0.05)], |g, v| {
        let y = g.relu(v[0]);
        Ok(reduce(g, y, 10))
    }));
    cases.push(case("tanh", vec![m(rng, r, c)], |g, v| {
        let y = g.tanh(v[0]);
        Ok(reduce(g, y, 11))
    }));
    cases.push(case("exp", vec![m(rng, r, c)], |g, v| {
        let y = g.exp(v[0]);
        Ok(reduce(g, y, 12))
    }));
    cases.push(case("log", vec![rand_tensor(rng, r, c, 0.2, 2.0)], |g, v| {
        let y = g.log(v[0]);
        Ok(reduce(g, y, 13))
    }));
    cases.push(case("softplus", vec![rand_tensor(rng, r, c, -3.0, 3.0)], |g, v| {
        let y = g.softplus(v[0]);
        Ok(reduce(g, y, 14))
    }));
    cases.push(case("square", vec![m(rng, r, c)], |g, v| {
        let y = g.square(v[0]);
        Ok(reduce(g, y, 15))
    }));
    cases.push(case("concat_cols", vec![m(rng, r, 2), m(rng, r, 3)], |g, v| {
        let y = g.concat_cols(v[0], v[1]);
        let y = g.square(y);
        Ok(reduce(g, y, 16))
    }));
    cases.push(case("slice_cols", vec![m(rng, r, 6)], |g, v| {
        let y = g.slice_cols(v[0], 1, 3);
        let y = g.tanh(y);
        Ok(reduce(g, y, 17))
    }));
    cases.push(case("sum_rows", vec![m(rng, r, c)], |g, v| {
        let y = g.sum_rows(v[0]);
        let y = g.square(y);
        Ok(reduce(g, y, 18))
    }));
    cases.push(case("sum", vec![m(rng, r, c)], |g, v| {
        let y = g.tanh(v[0]);
        let y = g.sum(y);
        Ok(g.square(y))
    }));
    cases.push(case("mean", vec![m(rng, r, c)], |g, v| {
        let y = g.exp(v[0]);
        let y = g.mean(y);
        Ok(g.square(y))
    }));
    cases.push(case("layer_norm", vec![m(rng, r, 6), m(rng, 1, 6), m(rng, 1, 6)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]);
        Ok(reduce(g, y, 19))
    }));
    cases.push(case("softmax", vec![rand_tensor(rng, r, c, -2.0, 2.0)], |g, v| {
        let y = g.softmax(v[0]);
        Ok(reduce(g, y, 20))
    }));
    let seq = 4;
    cases.push(case("attention", vec![m(rng, 2 * seq, 3), m(rng, 2 * seq, 3), m(rng, 2 * seq, 3)], move |g, v| {
        // One invalid key in the second sequence, including its first slot.
        let valid = [true, true, true, true, false, true, false, true];
        let y = g.attention(v[0], v[1], v[2], seq, &valid);
        Ok(reduce(g, y, 21))
    }));
    cases.push(case("mul_const", vec![m(rng, r, c)], |g, v| {
        let mask = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
        let y = g.mul_const(v[0], mask);
        let y = g.tanh(y);
        Ok(reduce(g, y, 22))
    }));
    cases.push(case("row_normalize", vec![away_from_zero(rng, r, 3, 0.2)], |g, v| {
        let y = g.row_normalize(v[0]);
        Ok(reduce(g, y, 23))
    }));
    cases.push(case("row_dot", vec![m(rng, r, c), m(rng, r, c)], |g, v| {
        let y = g.row_dot(v[0], v[1]);
        Ok(reduce(g, y, 24))
    }));
    cases.push(case("acos_clamp", vec![rand_tensor(rng, r, c, -0.9, 0.9)], |g, v| {
        let y = g.acos_clamp(v[0]);
        Ok(reduce(g, y, 25))
    }));
    cases.push(case("weighted_sum", vec![m(rng, r, c)], |g, v| {
        let y = g.tanh(v[0]);
        Ok(reduce(g, y, 26))
    }));
    cases.push(case("gather_rows", vec![m(rng, r, c)], |g, v| {
        let y = g.gather_rows(v[0], vec![2, 0, 2, 1]);
        let y = g.square(y);
        Ok(reduce(g, y, 27))
    }));
    cases.push(case("concat_rows", vec![m(rng, 2, c), m(rng, 1, c)], |g, v| {
        let y = g.concat_rows(&[v[0], v[1], v[0]]);
        let y = g.tanh(y);
        Ok(reduce(g, y, 28))
    }));
    cases
}

fn random_window_batch(windows: usize, steps: usize, rng: &mut Rng) -> WindowBatch<f64> {
    let mut tokens = TokenBatch::<f64>::zeros(windows, steps);
    let mut targets = vec![0.0; windows * steps * 3];
    for w in 0..windows {
        let pad = if w == 0 { 2 } else { 0 };
        for t in pad..steps {
            let row = w * steps + t;
            tokens.rtg[row] = rng.random_range(0.0..200.0);
            for v in &mut tokens.states[row * STATE_DIM..(row + 1) * STATE_DIM] {
                *v = rng.random_range(-1.0..1.0);
            }
            tokens.actions[row * 3..row * 3 + 3].copy_from_slice(&unit(rng));
            targets[row * 3..row * 3 + 3].copy_from_slice(&unit(rng));
            tokens.real[row] = true;
        }
    }
    WindowBatch { tokens, targets }
}

fn critic_nets(counts: &[usize], hidden: usize, rng: &mut Rng) -> Vec<Vec<(Mlp, ParamSet<f64>)>> {
    counts
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| {
                    let mut ps = ParamSet::new();
                    let m = Mlp::new(&mut ps, "q", STATE_DIM + 3, hidden, 1, rng);
                    (m, ps)
                })
                .collect()
        })
        .collect()
}

fn views(nets: &[Vec<(Mlp, ParamSet<f64>)>]) -> Vec<Vec<(&Mlp, &ParamSet<f64>)>> {
    nets.iter().map(|v| v.iter().map(|(m, p)| (m, p)).collect()).collect()
}

fn tiny_net(rng: &mut Rng) -> (FusionNet, ParamSet<f64>, FusionConfig) {
    let cfg = FusionConfig {
        context: rng.random_range(5..=8),
        width: [8, 16, 32][rng.random_range(0..3)],
        blocks: rng.random_range(1..=2),
        dropout: 0.0,
    };
    let mut ps = ParamSet::new();
    let net = FusionNet::new(&mut ps, cfg, rng).unwrap();
    (net, ps, cfg)
}

fn c1_gradients() -> Check {
    let mut rng = rng::stream(101, "acceptance-grad");
    let mut total = GradReport { checked: 0, max_rel: 0.0, worst: String::new() };
    let cases = primitive_cases(&mut rng);
    let n_prims = cases.len();
    for (name, inputs, build) in cases {
        let r = lib(check_inputs(&inputs, &*build))?;
        ensure(r.max_rel <= GRAD_TOL, || format!("{name}: rel {:.2e} at {}", r.max_rel, r.worst))?;
        total.merge(&r);
    }
    // Composite losses on randomized small models.
    for trial in 0..2 {
        let (net, ps, cfg) = tiny_net(&mut rng);
        let batch = random_window_batch(2, cfg.context, &mut rng);
        let r = lib(check_params(&ps, 3, &|g, b| Ok(actor_objective(g, &net, b, &batch, &[], false, &mut Dropout::off())?.total)))?;
        ensure(r.max_rel <= GRAD_TOL, || format!("angular loss trial {trial} {cfg:?}: rel {:.2e} at {}", r.max_rel, r.worst))?;
        total.merge(&r);
        let nets = critic_nets(&[2, 2, 1], 8, &mut rng);
        let refs = views(&nets);
        let cv: Vec<CriticView<f64>> = refs.iter().map(|n| CriticView { nets: n }).collect();
        let r = lib(check_params(&ps, 3, &|g, b| Ok(actor_objective(g, &net, b, &batch, &cv, false, &mut Dropout::off())?.total)))?;
        ensure(r.max_rel <= GRAD_TOL, || format!("multi-critic loss trial {trial} {cfg:?}: rel {:.2e} at {}", r.max_rel, r.worst))?;
        total.merge(&r);
    }
    Ok(format!("{n_prims} primitives + 2 composite losses x 2 models, {} entries, max rel {:.2e}", total.checked, total.max_rel))
}

// ---------------------------------------------------------------------------------------------
// 2. reward

fn reward_oracle(a: [f64; 3], u: Option<[f64; 3]>, peaks: &[[f64; 3]]) -> f64 {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let a = [a[0] / n, a[1] / n, a[2] / n];
    let dot = |p: &[f64; 3], q: &[f64; 3]| p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
    if peaks.is_empty() {
        return 0.0;
    }
    let mut best = 0.0f64;
    for p in peaks {
        best = best.max(dot(p, &a).abs());
    }
    best * u.map_or(1.0, |u| dot(&a, &u))
}

fn c2_reward() -> Check {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    type Example = (Vec<[f64; 3]>, [f64; 3], [f64; 3], f64);
    let examples: [Example; 3] = [
        (vec![[1.0, 0.0, 0.0]], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 1.0),
        (vec![[1.0, 0.0, 0.0]], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.0),
        (vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [h, h, 0.0], [1.0, 0.0, 0.0], 0.5),
    ];
    for (peaks, a, u, want) in &examples {
        let got = lib(reward(*a, Some(*u), peaks))?;
        ensure((got - want).abs() <= 1e-6, || format!("example a={a:?} u={u:?}: {got} != {want}"))?;
    }
    let mut rng = rng::stream(102, "acceptance-reward");
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = rng.random_range(1..=3);
        let peaks: Vec<[f64; 3]> = (0..k).map(|_| unit(&mut rng)).collect();
        let s = rng.random_range(0.2..3.0);
        let d = unit(&mut rng);
        let a = [d[0] * s, d[1] * s, d[2] * s];
        let u = if i % 10 == 0 { None } else { Some(unit(&mut rng)) };
        let got = lib(reward(a, u, &peaks))?;
        let want = reward_oracle(a, u, &peaks);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-6, || format!("case {i}: {got} vs oracle {want}"))?;
    }
    ensure(reward([0.0; 3], None, &[[1.0, 0.0, 0.0]]).is_err(), || "zero action accepted".into())?;
    Ok(format!("3 examples + 100 random cases, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------------------------
// 3. termination

fn tube() -> Phantom {
    generate_phantom(&PhantomSpec::straight_tube(3)).unwrap()
}

/// Run `actions(t)` until the episode ends; every step before the last must report `None`.
fn episode(p: &Phantom, seed: [f64; 3], cfg: EnvConfig, mut action: impl FnMut(usize) -> [f32; 3]) -> std::result::Result<(usize, StopReason), String> {
    let mut env = lib(TrackingEnv::new(p, 0, cfg))?;
    lib(env.reset(seed, None))?;
    for t in 0..100_000 {
        let out = lib(env.step(action(t)))?;
        if out.done {
            return Ok((t + 1, out.reason));
        }
        ensure(out.reason == StopReason::None, || format!("step {t}: reason {:?} without done", out.reason))?;
    }
    Err("episode never ended".into())
}

fn c3_termination() -> Check {
    let p = tube();
    let cfg = EnvConfig::default();
    // Max steps: circle in the x-y plane, turning 30 degrees per step, well inside the tube.
    let (n, reason) = episode(&p, [24.0, 7.5, 7.5], cfg, |t| {
        let th = (t as f64) * std::f64::consts::PI / 6.0;
        [th.cos() as f32, th.sin() as f32, 0.0]
    })?;
    ensure(reason == StopReason::MaxSteps && n == 530, || format!("circle: {n} steps, {reason:?}"))?;
    // Mask exit: walk straight across the tube.
    let (n, reason) = episode(&p, [24.0, 7.5, 7.5], cfg, |_| [0.0, 1.0, 0.0])?;
    ensure(reason == StopReason::LeftMask && n < 10, || format!("mask exit: {n} steps, {reason:?}"))?;
    // Sharp angle: one step along +x, then a 90 degree turn.
    let (n, reason) = episode(&p, [24.0, 7.5, 7.5], cfg, |t| if t == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] })?;
    ensure(reason == StopReason::SharpAngle && n == 2, || format!("sharp turn: {n} steps, {reason:?}"))?;
    // A 50 degree turn is not sharp, and the angle is checked before the mask.
    let c = 50f64.to_radians();
    let (n, reason) = episode(&p, [24.0, 7.5, 7.5], cfg, |t| if t == 0 { [1.0, 0.0, 0.0] } else { [c.cos() as f32, c.sin() as f32, 0.0] })?;
    ensure(reason == StopReason::LeftMask && n > 2, || format!("50 degree turn: {n} steps, {reason:?}"))?;
    let (n, reason) = episode(&p, [24.0, 9.3, 7.5], cfg, |t| if t == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] })?;
    ensure(reason == StopReason::SharpAngle && n == 2, || format!("sharp turn at the wall: {n} steps, {reason:?}"))?;
    Ok("max_steps at step 530, left_mask, sharp_angle; no other reasons observed".into())
}

// ---------------------------------------------------------------------------------------------
// 4. MDF and farthest sampling

fn random_streamline(rng: &mut Rng) -> Streamline {
    let n = rng.random_range(2..30);
    let mut p = [rng.random_range(0.0..20.0f32), rng.random_range(0.0..20.0), rng.random_range(0.0..20.0)];
    let d = unit(rng);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        pts.push(p);
        let j = unit(rng);
        for a in 0..3 {
            p[a] += (d[a] + 0.4 * j[a]) as f32 * rng.random_range(0.3..1.2f32);
        }
    }
    Streamline::new(pts).unwrap()
}

/// Direct/flipped mean point distance of two equally sampled streamlines.
fn mdf_oracle(ra: &Streamline, rb: &Streamline, voxel: f64) -> f64 {
    let k = ra.len();
    let dist = |i: usize, j: usize| {
        let (p, q) = (ra.point(i), rb.point(j));
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    };
    let direct: f64 = (0..k).map(|i| dist(i, i)).sum::<f64>() / k as f64;
    let flipped: f64 = (0..k).map(|i| dist(i, k - 1 - i)).sum::<f64>() / k as f64;
    direct.min(flipped) * voxel
}

fn c4_mdf_sampling() -> Check {
    let mut rng = rng::stream(104, "acceptance-mdf");
    let mut pools = 0;
    for trial in 0..20 {
        let size = rng.random_range(2..=50);
        let pool: Vec<Streamline> = (0..size).map(|_| random_streamline(&mut rng)).collect();
        let voxel = [1.0, 1.25, 2.0][trial % 3];
        let n = rng.random_range(1..=size.min(15));
        let start = rng.random_range(0..size);
        let got = lib(farthest_sample(&pool, n, start, voxel))?;
        // Exhaustive oracle: at each step evaluate every candidate against the chosen set.
        let d: Vec<Vec<f64>> = pool.iter().map(|a| pool.iter().map(|b| mdf_canonical(a, b, voxel).unwrap()).collect()).collect();
        let mut chosen = vec![start];
        while chosen.len() < n {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..size {
                if chosen.contains(&i) {
                    continue;
                }
                let m = chosen.iter().map(|&j| d[i][j]).fold(f64::INFINITY, f64::min);
                if best.is_none_or(|(_, bm)| m > bm) {
                    best = Some((i, m));
                }
            }
            chosen.push(best.unwrap().0);
        }
        ensure(got.indices == chosen, || format!("pool {trial} (size {size}, n {n}): {:?} vs oracle {chosen:?}", got.indices))?;
        pools += 1;

        for s in pool.iter().take(5) {
            let ident = lib(mdf_canonical(s, s, voxel))?;
            let flip = lib(mdf_canonical(s, &s.reversed(), voxel))?;
            let off = unit(&mut rng);
            let len = rng.random_range(0.1..4.0);
            let moved = Streamline::new(
                s.points().iter().map(|p| [p[0] + (off[0] * len) as f32, p[1] + (off[1] * len) as f32, p[2] + (off[2] * len) as f32]).collect(),
            )
            .unwrap();
            let shifted = lib(mdf_canonical(s, &moved, voxel))?;
            ensure(ident.abs() <= 1e-6, || format!("identity gives {ident}"))?;
            ensure(flip.abs() <= 1e-6, || format!("flip gives {flip}"))?;
            ensure((shifted - len * voxel).abs() <= 1e-5 * len.max(1.0) * voxel, || format!("offset {}: got {shifted}", len * voxel))?;
            let (rs, ro) = (lib(resample(s, MDF_POINTS))?, lib(resample(&pool[pool.len() - 1], MDF_POINTS))?);
            let (x, y) = (lib(mdf(&rs, &ro, voxel))?, mdf_oracle(&rs, &ro, voxel));
            ensure((x - y).abs() <= 1e-6 * y.max(1.0), || format!("mdf {x} vs oracle {y}"))?;
        }
    }
    Ok(format!("{pools} random pools match the exhaustive oracle; identity, flip and offset hold"))
}

// ---------------------------------------------------------------------------------------------
// CLI desk runs

fn cli(out: &Path, extra: &[&str], cfg: Option<&Path>) -> std::result::Result<f64, String> {
    let mut cmd = Command::new(BIN);
    cmd.args(["--preset", "desk", "--out"]).arg(out);
    if let Some(c) = cfg {
        cmd.arg("--config").arg(c);
    }
    cmd.args(extra).env("RUST_LOG", "warn");
    let start = Instant::now();
    let o = cmd.output().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    if !o.status.success() {
        return Err(format!("`tractfuse {}` exited {:?}: {}", extra.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr).trim()));
    }
    Ok(secs)
}

fn manifest(out: &Path, tag: &str) -> std::result::Result<Manifest, String> {
    lib(Manifest::read(&out.join("manifests").join(format!("{tag}.manifest"))))
}

fn metric(m: &Manifest, key: &str) -> std::result::Result<f64, String> {
    m.metric(key).ok_or_else(|| format!("{} manifest lacks {key}", m.stage))?.parse::<f64>().map_err(|e| e.to_string())
}

/// Stages of the full crossing pipeline, in order.
fn pipeline_stages() -> Vec<Vec<String>> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let mut st = vec![s(&["phantom"])];
    for a in ["td3", "sac", "ddpg"] {
        st.push(s(&["train-rl", "--algo", a]));
    }
    st.push(s(&["eds"]));
    st.push(s(&["pretrain"]));
    for b in BUNDLES {
        st.push(s(&["finetune", "--bundle", b]));
        st.push(s(&["mcpft", "--bundle", b]));
    }
    for b in BUNDLES {
        for a in TrackAlgo::ALL {
            st.push(s(&["track", "--algo", a.as_str(), "--bundle", b]));
        }
    }
    st.push(s(&["evaluate"]));
    st.push(s(&["report"]));
    st
}

fn run_pipeline(out: &Path, cfg: Option<&Path>) -> std::result::Result<f64, String> {
    let mut total = 0.0;
    for stage in pipeline_stages() {
        let args: Vec<&str> = stage.iter().map(String::as_str).collect();
        total += cli(out, &args, cfg)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------------------------
// 5. EDS integrity

fn c5_eds(out: &Path) -> Check {
    let gt: Vec<Vec<Streamline>> = BUNDLES.iter().map(|b| read_streamlines(&out.join("ground_truth").join(format!("{b}.stl"))).map(|x| x.0)).collect::<Result<_>>().map_err(|e| e.to_string())?;
    let phantom = lib(tractfuse::phantom::read_phantom(&out.join("phantom.phn")))?;
    let voxel = phantom.grid.voxel_size;
    let mut checked = 0;
    let mut rtg_checked = 0;
    let mut sets: BTreeMap<String, Vec<TrajectoryRecord>> = BTreeMap::new();
    sets.insert("pretrain".into(), lib(read_records(&out.join("eds/pretrain.eds")))?);
    for (b, name) in BUNDLES.iter().enumerate() {
        let recs = lib(read_records(&out.join(format!("eds/finetune_{name}.eds"))))?;
        ensure(!recs.is_empty(), || format!("finetune set {name} is empty"))?;
        let refs = lib(reference_set(&gt[b], REFERENCE_COUNT.min(gt[b].len()), voxel))?;
        for (i, r) in recs.iter().enumerate() {
            ensure(r.len() >= MIN_TRANSITIONS, || format!("{name} record {i}: T = {}", r.len()))?;
            let d = lib(refs.min_distance(&r.streamline))?;
            ensure(d <= MDF_THRESHOLD_MM, || format!("{name} record {i}: min MDF {d:.3} mm"))?;
            ensure(r.bundle == *name, || format!("{name} record {i} labelled {}", r.bundle))?;
            checked += 1;
        }
        sets.insert(format!("finetune_{name}"), recs);
    }
    for (set, recs) in &sets {
        for (i, r) in recs.iter().enumerate() {
            ensure(compute_rtg(&r.rewards) == r.rtg, || format!("{set} record {i}: stored rtg differs from the suffix sum"))?;
            rtg_checked += 1;
        }
    }
    // Provenance: every record of a batch carries the batch's chosen policy.
    let batches = std::fs::read_to_string(out.join("eds/batches.tsv")).map_err(|e| e.to_string())?;
    let mut chosen: BTreeMap<(String, usize), String> = BTreeMap::new();
    for line in batches.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let b: usize = f[0].parse().map_err(|_| format!("bad batch line {line}"))?;
        chosen.insert(("pretrain".into(), b), f[3].to_string());
        chosen.insert((format!("finetune_{}", f[1]), b), f[4].to_string());
    }
    let prov = std::fs::read_to_string(out.join("eds/provenance.tsv")).map_err(|e| e.to_string())?;
    let mut seen: BTreeMap<(String, usize), BTreeSet<String>> = BTreeMap::new();
    let mut rows = 0;
    for line in prov.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let (set, idx, batch, policy) = (f[0].to_string(), f[1].parse::<usize>().unwrap(), f[2].parse::<usize>().unwrap(), f[3].to_string());
        let rec = &sets[&set][idx];
        ensure(rec.policy.to_string() == policy, || format!("{set} record {idx}: provenance {policy} but record says {}", rec.policy))?;
        let want = chosen.get(&(set.clone(), batch)).ok_or_else(|| format!("{set} record {idx}: unknown batch {batch}"))?;
        ensure(*want == policy, || format!("{set} record {idx}: batch {batch} chose {want}, record from {policy}"))?;
        seen.entry((set, batch)).or_default().insert(policy);
        rows += 1;
    }
    let total: usize = sets.values().map(Vec::len).sum();
    ensure(rows == total, || format!("provenance lists {rows} records, datasets hold {total}"))?;
    ensure(seen.values().all(|s| s.len() == 1), || "a batch mixes policies".into())?;
    Ok(format!("{checked} finetune records with T >= 47 and MDF <= 5 mm; {rtg_checked} rtg sequences exact; {} batches single-policy", seen.len()))
}

// ---------------------------------------------------------------------------------------------
// 6. causality and freeze

fn causality(model: &FusionModel, seed: u64) -> std::result::Result<(), String> {
    let c = model.config().context;
    let mut rng = rng::stream(seed, "acceptance-causality");
    let make = |rng: &mut Rng| -> (Vec<f32>, Vec<Vec<f32>>, Vec<[f32; 3]>) {
        let rtg = (0..c).map(|_| rng.random_range(0.0..300.0f32)).collect();
        let states = (0..c).map(|_| (0..STATE_DIM).map(|_| rng.random_range(-1.0..1.0f32)).collect()).collect();
        let actions = (0..c).map(|_| {
            let u = unit(rng);
            [u[0] as f32, u[1] as f32, u[2] as f32]
        }).collect();
        (rtg, states, actions)
    };
    let (rtg, states, actions) = make(&mut rng);
    let steps = |rtg: &[f32], states: &[Vec<f32>], actions: &[[f32; 3]]| -> Vec<[f32; 3]> {
        let refs: Vec<StepRef> = (0..c).map(|t| StepRef { rtg: rtg[t], state: &states[t], action: actions[t] }).collect();
        model.predict_actions(&refs).unwrap().actions
    };
    let base = steps(&rtg, &states, &actions);
    let (rtg2, states2, actions2) = make(&mut rng);
    for k in 0..c {
        // Replace every token after the state of step k.
        let mut r = rtg.clone();
        let mut s = states.clone();
        let mut a = actions.clone();
        a[k] = actions2[k];
        r[k + 1..c].copy_from_slice(&rtg2[k + 1..c]);
        a[k + 1..c].copy_from_slice(&actions2[k + 1..c]);
        s[k + 1..c].clone_from_slice(&states2[k + 1..c]);
        let p = steps(&r, &s, &a);
        for t in 0..=k {
            ensure(p[t] == base[t], || format!("{}: prediction {t} changed when tokens after step {k} changed", model.stage.tag()))?;
        }
        if k + 1 < c {
            ensure(p[k + 1..] != base[k + 1..], || format!("{}: future predictions ignore their inputs", model.stage.tag()))?;
        }
    }
    Ok(())
}

fn c6_causality(out: &Path) -> Check {
    let load = |rel: &str| lib(FusionModel::load(&out.join(rel)));
    let pre = load("fusion/pretrained.ckp")?;
    let init = lib(FusionModel::new(pre.config(), 7))?;
    causality(&init, 1)?;
    causality(&pre, 2)?;
    let frozen = frozen_values(&pre);
    let mut stages = 2;
    for b in BUNDLES {
        for (i, rel) in [format!("fusion/finetuned_{b}.ckp"), format!("fusion/mcpft_{b}.ckp")].iter().enumerate() {
            let m = load(rel)?;
            causality(&m, 3 + i as u64)?;
            ensure(frozen_values(&m) == frozen, || format!("{rel}: frozen parameters differ from the pretrained model"))?;
            ensure(m.params != pre.params, || format!("{rel}: no trainable parameter changed"))?;
            stages += 1;
        }
    }
    Ok(format!("causal at {stages} checkpoints (init, pretrained, finetuned and mcpft per bundle); {} frozen values bit-identical", frozen.len()))
}

// ---------------------------------------------------------------------------------------------
// 7. desk RL on the straight tube

fn c7_rl(work: &Path) -> Check {
    let out = work.join("tube");
    let cfg = work.join("tube.conf");
    std::fs::write(&cfg, "phantom.preset = straight_tube\n").map_err(|e| e.to_string())?;
    cli(&out, &["phantom"], Some(&cfg))?;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for a in ["td3", "sac", "ddpg"] {
        let secs = cli(&out, &["train-rl", "--algo", a], Some(&cfg))?;
        let m = manifest(&out, &format!("train-rl-{a}"))?;
        let (r, base, ratio) = (metric(&m, "mean_step_reward")?, metric(&m, "random_baseline")?, metric(&m, "reward_ratio")?);
        ensure((ratio - r / base).abs() <= 1e-3 * ratio.abs().max(1.0), || format!("{a}: ratio {ratio} inconsistent with {r} / {base}"))?;
        parts.push(format!("{a} {r:.3}/{base:.3} = {ratio:.1}x in {secs:.0} s"));
        if ratio < 3.0 {
            failures.push(format!("{a} ratio {ratio:.2} < 3"));
        }
        if secs > 600.0 {
            failures.push(format!("{a} took {secs:.0} s > 600 s"));
        }
    }
    if failures.is_empty() {
        Ok(parts.join("; "))
    } else {
        Err(format!("{} ({})", failures.join(", "), parts.join("; ")))
    }
}

// ---------------------------------------------------------------------------------------------
// 8. end-to-end fusion

fn c8_end_to_end(out: &Path, secs: f64) -> Check {
    let text = std::fs::read_to_string(out.join("scores.tsv")).map_err(|e| e.to_string())?;
    let rows = lib(parse_scores(&text))?;
    let dice = |b: &str, a: &str| rows.iter().find(|r| r.bundle == b && r.algo == a).map(|r| r.score.dice).ok_or_else(|| format!("no score for {b}/{a}"));
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for b in BUNDLES {
        let f = dice(b, "fusion")?;
        let singles = [dice(b, "td3")?, dice(b, "sac")?, dice(b, "ddpg")?];
        let best = singles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        parts.push(format!("{b}: fusion {f:.3}, td3/sac/ddpg {:.3}/{:.3}/{:.3}", singles[0], singles[1], singles[2]));
        if f < 0.5 {
            failures.push(format!("{b} fusion Dice {f:.3} < 0.5"));
        }
        if f < best - 0.05 {
            failures.push(format!("{b} fusion Dice {f:.3} < best single {best:.3} - 0.05"));
        }
    }
    if secs > 1800.0 {
        failures.push(format!("pipeline took {secs:.0} s > 1800 s"));
    }
    let detail = format!("{}; pipeline {secs:.0} s", parts.join("; "));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{} ({detail})", failures.join(", ")))
    }
}

// ---------------------------------------------------------------------------------------------
// 9. metrics

fn c9_metrics() -> Check {
    // Ground truth: 5 voxels. Candidate: 3 of them plus 1 outside.
    let truth = [true, true, true, true, true, false, false, false, false, false];
    let cand = [true, true, true, false, false, true, false, false, false, false];
    let s = lib(score(&cand, &truth))?;
    ensure((s.ol - 0.6).abs() < 1e-12 && (s.or_ - 0.2).abs() < 1e-12 && (s.dice - 6.0 / 9.0).abs() < 1e-12, || format!("worked example gave {s:?}"))?;
    let s = lib(score(&truth, &truth))?;
    ensure(s.dice == 1.0 && s.ol == 1.0 && s.or_ == 0.0, || format!("perfect candidate gave {s:?}"))?;
    let mut rng = rng::stream(109, "acceptance-metrics");
    let mut cases = 0;
    for _ in 0..200 {
        let n = rng.random_range(4..200);
        let mut t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        t[0] = true;
        t[n - 1] = false;
        let mut c: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let outside: Vec<usize> = (0..n).filter(|&i| !t[i] && !c[i]).collect();
        if outside.is_empty() {
            c[n - 1] = false;
        }
        let outside: Vec<usize> = (0..n).filter(|&i| !t[i] && !c[i]).collect();
        let before = lib(score(&c, &t))?;
        c[outside[rng.random_range(0..outside.len())]] = true;
        let after = lib(score(&c, &t))?;
        ensure(after.or_ > before.or_ && after.ol == before.ol, || format!("adding an out-of-truth voxel: {before:?} -> {after:?}"))?;
        cases += 1;
    }
    Ok(format!("worked example OL 0.6 / OR 0.2 / Dice 0.667 exact; monotonicity on {cases} random masks"))
}

// ---------------------------------------------------------------------------------------------
// 10. reproducibility

const TINY_CONFIG: &str = "\
rl.batches = 15
rl.episodes_per_batch = 32
rl.gradient_steps = 40
rl.batch_size = 128
rl.eval_episodes = 32
td3.hidden = 128
sac.hidden = 128
ddpg.hidden = 128
eds.seeds_per_voxel = 3
eds.pretrain_target = 200
eds.finetune_target = 60
fusion.width = 16
fusion.context = 8
fusion.blocks = 2
pretrain.iterations = 1
pretrain.updates_per_iter = 4
pretrain.batch_size = 16
finetune.iterations = 1
finetune.updates_per_iter = 4
finetune.batch_size = 16
mcpft.iterations = 1
mcpft.actor_updates = 4
mcpft.batch_size = 16
mcpft.rollout_episodes = 4
track.seeds_per_voxel = 1
";

fn c10_reproducible(work: &Path) -> Check {
    let cfg = work.join("tiny.conf");
    std::fs::write(&cfg, TINY_CONFIG).map_err(|e| e.to_string())?;
    let (a, b) = (work.join("run_a"), work.join("run_b"));
    run_pipeline(&a, Some(&cfg))?;
    run_pipeline(&b, Some(&cfg))?;
    let mut files = 0;
    let mut stages = 0;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(a.join("manifests")).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let ma = lib(Manifest::read(&p))?;
        let mb = lib(Manifest::read(&b.join("manifests").join(p.file_name().unwrap())))?;
        ensure(ma.outputs == mb.outputs, || format!("{}: output hashes differ", ma.stage))?;
        ensure(ma.inputs == mb.inputs, || format!("{}: input hashes differ", ma.stage))?;
        for (rel, hash) in &ma.outputs {
            let (x, y) = (std::fs::read(a.join(rel)).map_err(|e| e.to_string())?, std::fs::read(b.join(rel)).map_err(|e| e.to_string())?);
            ensure(x == y, || format!("{rel} differs between runs"))?;
            ensure(lib(tractfuse::cli::sha256_file(&a.join(rel)))? == *hash, || format!("{rel} does not match its manifest hash"))?;
            files += 1;
        }
        stages += 1;
    }
    ensure(stages == pipeline_stages().len(), || format!("{stages} manifests for {} stages", pipeline_stages().len()))?;
    Ok(format!("{stages} stages rerun, {files} artifacts byte-identical and matching their manifest hashes"))
}

// ---------------------------------------------------------------------------------------------
// 11. MCPFT schedule

fn straight_records(p: &Phantom, n: usize) -> Vec<TrajectoryRecord> {
    let env = EnvConfig::default();
    (0..n)
        .map(|i| {
            let seed = [6.0 + i as f64 * 0.5, 7.5, 7.5];
            let mut e = TrackingEnv::new(p, 0, env).unwrap();
            e.reset(seed, Some([1.0, 0.0, 0.0])).unwrap();
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            loop {
                let (r, reason) = e.advance([1.0, 0.0, 0.0]).unwrap();
                actions.push([1.0, 0.0, 0.0]);
                rewards.push(r as f32);
                if reason != StopReason::None {
                    break;
                }
            }
            let light = LightRecord {
                policy: Algo::Td3,
                bundle: 0,
                seed,
                hint: Some([1.0, 0.0, 0.0]),
                actions,
                rewards,
                streamline: Streamline::new(e.points().to_vec()).unwrap(),
                reason: StopReason::LeftMask,
                q_score: 0.0,
            };
            light.materialize(p, env).unwrap()
        })
        .collect()
}

fn c11_mcpft() -> Check {
    let p = tube();
    let recs = straight_records(&p, 4);
    let model = lib(FusionModel::new(FusionConfig { context: 8, width: 16, blocks: 2, dropout: 0.1 }, 5))?;
    let mut r = rng::stream(111, "acceptance-mcpft");
    let mut policies: Vec<PolicyBundle> = Algo::ALL.iter().map(|&a| PolicyBundle::new(a, Hyper { hidden: 16, ..Hyper::defaults(a) }, &mut r)).collect();
    let sched = McpftSchedule { iterations: 2, batch_size: 4, rollout_episodes: 2, ..McpftSchedule::default() };
    ensure(sched.actor_updates == 1000 && sched.critic_updates == 1, || format!("default schedule {sched:?}"))?;
    let env = EnvConfig { max_steps: 40, ..EnvConfig::default() };
    let (_, log) = lib(mcpft(&model, &mut policies, &recs, &p, 0, env, &sched, 4))?;
    ensure(log.iterations.len() == 2, || format!("{} iterations logged", log.iterations.len()))?;
    for (i, it) in log.iterations.iter().enumerate() {
        ensure(it.actor_updates == 1000, || format!("iteration {i}: {} actor updates", it.actor_updates))?;
        ensure(it.critic_updates == vec![1, 1, 1], || format!("iteration {i}: critic updates {:?}", it.critic_updates))?;
    }

    // Zeroed critics: the gradient must be the angular-loss gradient alone.
    let mut rng = rng::stream(112, "acceptance-zeroed");
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let (net, ps, cfg) = tiny_net(&mut rng);
        let batch = random_window_batch(3, cfg.context, &mut rng);
        let mut nets = critic_nets(&[2, 2, 1], 16, &mut rng);
        for v in &mut nets {
            for (m, ps) in v {
                let last = m.layers.last().unwrap().w;
                ps.get_mut(last).data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let refs = views(&nets);
        let cv: Vec<CriticView<f64>> = refs.iter().map(|n| CriticView { nets: n }).collect();
        let grad = |critics: &[CriticView<f64>]| {
            let mut g = Graph::<f64>::new();
            let b = g.bind(&ps, true);
            let parts = actor_objective(&mut g, &net, &b, &batch, critics, false, &mut Dropout::off()).unwrap();
            g.backward(parts.total).unwrap().for_binding(&b)
        };
        let (with, without) = (grad(&cv), grad(&[]));
        for (a, b) in with.iter().zip(&without) {
            for (x, y) in a.data.iter().zip(&b.data) {
                worst = worst.max((x - y).abs());
                ensure((x - y).abs() <= 1e-6, || format!("zeroed critics change a gradient: {x} vs {y}"))?;
            }
        }
    }
    Ok(format!("2 iterations x (1000 actor, 1/1/1 critic) updates; zeroed-critic gradients within {worst:.1e} of the angular loss"))
}

// ---------------------------------------------------------------------------------------------

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let desk = work.path().join("crossing");
    let mut results = vec![
        run_criterion(1, "gradient suite", c1_gradients),
        run_criterion(2, "reward oracle", c2_reward),
        run_criterion(3, "termination", c3_termination),
        run_criterion(4, "MDF and farthest sampling", c4_mdf_sampling),
    ];

    let pipeline = catch_unwind(AssertUnwindSafe(|| run_pipeline(&desk, None))).unwrap_or_else(|_| Err("pipeline panicked".into()));
    let needs = |r: &std::result::Result<f64, String>| r.clone().map_err(|e| format!("desk pipeline failed: {e}"));

    results.push(run_criterion(5, "EDS integrity", || {
        needs(&pipeline)?;
        c5_eds(&desk)
    }));
    results.push(run_criterion(6, "causality and freeze", || {
        needs(&pipeline)?;
        c6_causality(&desk)
    }));
    results.push(run_criterion(7, "desk RL learning signal", || c7_rl(work.path())));
    results.push(run_criterion(8, "end-to-end fusion", || c8_end_to_end(&desk, needs(&pipeline)?)));
    results.push(run_criterion(9, "metrics", c9_metrics));
    results.push(run_criterion(10, "reproducibility", || c10_reproducible(work.path())));
    results.push(run_criterion(11, "MCPFT schedule", c11_mcpft));

    let passed = results.iter().filter(|&&ok| ok).count();
    say(format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "acceptance criteria failed");
}
