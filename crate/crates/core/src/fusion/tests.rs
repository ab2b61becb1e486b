use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};

use super::*;
use crate::agents::{Algo, Hyper, PolicyBundle};
use crate::eds::{LightRecord, TrajectoryRecord};
use crate::env::{EnvConfig, StopReason, STATE_DIM};
use crate::geometry::Streamline;
use crate::nn::gradcheck::check_params;
use crate::nn::{Dropout, Graph, Mlp, ParamSet};
use crate::phantom::{generate_phantom, Phantom, PhantomSpec};
use crate::rng::Rng;

const TINY: FusionConfig = FusionConfig { context: 8, width: 16, blocks: 2, dropout: 0.0 };

fn unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n: f64 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n > 0.1 {
            let n = n.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn random_batch(windows: usize, steps: usize, rng: &mut Rng) -> WindowBatch<f64> {
    let mut tokens = TokenBatch::<f64>::zeros(windows, steps);
    let mut targets = vec![0.0; windows * steps * 3];
    for w in 0..windows {
        // Window 0 is padded at the start.
        let pad = if w == 0 { 2 } else { 0 };
        for t in pad..steps {
            let row = w * steps + t;
            tokens.rtg[row] = rng.random_range(0.0..200.0);
            for v in &mut tokens.states[row * STATE_DIM..(row + 1) * STATE_DIM] {
                *v = rng.random_range(-1.0..1.0);
            }
            let a = unit(rng);
            tokens.actions[row * 3..row * 3 + 3].copy_from_slice(&a);
            targets[row * 3..row * 3 + 3].copy_from_slice(&unit(rng));
            tokens.real[row] = true;
        }
    }
    WindowBatch { tokens, targets }
}

struct Critics {
    nets: Vec<Vec<(Mlp, ParamSet<f64>)>>,
}

impl Critics {
    fn new(counts: &[usize], rng: &mut Rng) -> Self {
        let nets = counts
            .iter()
            .map(|&c| {
                (0..c)
                    .map(|_| {
                        let mut ps = ParamSet::new();
                        let m = Mlp::new(&mut ps, "c", STATE_DIM + 3, 8, 1, rng);
                        (m, ps)
                    })
                    .collect()
            })
            .collect();
        Self { nets }
    }

    fn refs(&self) -> Vec<Vec<(&Mlp, &ParamSet<f64>)>> {
        self.nets.iter().map(|v| v.iter().map(|(m, p)| (m, p)).collect()).collect()
    }

    fn zero_output_weights(&mut self) {
        for v in &mut self.nets {
            for (m, ps) in v {
                let last = m.layers.last().unwrap();
                ps.get_mut(last.w).data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

fn tiny_net(seed: u64) -> (FusionNet, ParamSet<f64>) {
    let mut ps = ParamSet::new();
    let net = FusionNet::new(&mut ps, TINY, &mut Rng::seed_from_u64(seed)).unwrap();
    (net, ps)
}

#[test]
fn angular_loss_gradient_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(10);
    let (net, ps) = tiny_net(11);
    let batch = random_batch(2, 8, &mut rng);
    let r = check_params(&ps, 4, &|g, b| {
        let parts = actor_objective(g, &net, b, &batch, &[], false, &mut Dropout::off())?;
        Ok(parts.total)
    })
    .unwrap();
    assert!(r.max_rel <= 1e-5, "{r:?}");
    assert!(r.checked > 100);
}

#[test]
fn multi_critic_gradient_matches_finite_differences() {
    let mut rng = Rng::seed_from_u64(12);
    let (net, ps) = tiny_net(13);
    let batch = random_batch(2, 6, &mut rng);
    let critics = Critics::new(&[2, 2, 1], &mut rng);
    let refs = critics.refs();
    let views: Vec<CriticView<f64>> = refs.iter().map(|n| CriticView { nets: n }).collect();
    let r = check_params(&ps, 4, &|g, b| {
        let parts = actor_objective(g, &net, b, &batch, &views, false, &mut Dropout::off())?;
        Ok(parts.total)
    })
    .unwrap();
    assert!(r.max_rel <= 1e-5, "{r:?}");
}

#[test]
fn objective_decomposes_into_independent_terms() {
    let mut rng = Rng::seed_from_u64(14);
    let (net, ps) = tiny_net(15);
    let batch = random_batch(3, 8, &mut rng);
    let critics = Critics::new(&[2, 1, 2], &mut rng);
    let refs = critics.refs();
    let views: Vec<CriticView<f64>> = refs.iter().map(|n| CriticView { nets: n }).collect();
    let mut g = Graph::<f64>::new();
    let b = g.bind(&ps, false);
    let parts = actor_objective(&mut g, &net, &b, &batch, &views, false, &mut Dropout::off()).unwrap();
    let pred: Vec<[f64; 3]> = g.value(parts.predicted).chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect();
    let (w, s) = (batch.tokens.windows, batch.tokens.steps);
    // Angular term: direct double sum over each window's real steps.
    let mut dist = 0.0;
    for wi in 0..w {
        let rows: Vec<usize> = (0..s).map(|t| wi * s + t).filter(|&r| batch.tokens.real[r]).collect();
        let p: Vec<[f64; 3]> = rows.iter().map(|&r| pred[r]).collect();
        let a: Vec<[f64; 3]> = rows.iter().map(|&r| [batch.targets[r * 3], batch.targets[r * 3 + 1], batch.targets[r * 3 + 2]]).collect();
        dist += loss_dist_cos(&p, &a).unwrap();
    }
    dist /= w as f64;
    assert!((g.scalar(parts.dist) - dist).abs() < 1e-6);
    let mut total = dist;
    for (k, nets) in refs.iter().enumerate() {
        let mut term = 0.0;
        for r in (0..w * s).filter(|&r| batch.tokens.real[r]) {
            let mut x = batch.tokens.states[r * STATE_DIM..(r + 1) * STATE_DIM].to_vec();
            x.extend_from_slice(&pred[r]);
            let q = nets.iter().map(|(m, p)| m.infer(p, &x, 1).unwrap()[0]).fold(f64::INFINITY, f64::min);
            term -= q;
        }
        term /= w as f64;
        assert!((g.scalar(parts.critic[k]) - term).abs() < 1e-6, "critic {k}");
        total += term;
    }
    assert!((g.scalar(parts.total) - total).abs() < 1e-6);
}

#[test]
fn constant_critics_leave_the_angular_gradient() {
    let mut rng = Rng::seed_from_u64(16);
    let (net, ps) = tiny_net(17);
    let batch = random_batch(2, 8, &mut rng);
    let mut critics = Critics::new(&[2, 2, 1], &mut rng);
    critics.zero_output_weights();
    let refs = critics.refs();
    let views: Vec<CriticView<f64>> = refs.iter().map(|n| CriticView { nets: n }).collect();
    let grad = |views: &[CriticView<f64>]| {
        let mut g = Graph::<f64>::new();
        let b = g.bind(&ps, true);
        let parts = actor_objective(&mut g, &net, &b, &batch, views, false, &mut Dropout::off()).unwrap();
        g.backward(parts.total).unwrap().for_binding(&b)
    };
    let with = grad(&views);
    let without = grad(&[]);
    for (a, b) in with.iter().zip(&without) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
    }
}

fn tube() -> Phantom {
    generate_phantom(&PhantomSpec::straight_tube(3)).unwrap()
}

/// Straight +x trajectories from seeds along the tube axis.
fn straight_records(p: &Phantom, n: usize, y_shift: f64) -> Vec<TrajectoryRecord> {
    let env = EnvConfig::default();
    (0..n)
        .map(|i| {
            let seed = [6.0 + i as f64 * 0.5, 7.5 + y_shift, 7.5];
            let mut e = crate::env::TrackingEnv::new(p, 0, env).unwrap();
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

fn small_model() -> FusionModel {
    FusionModel::new(FusionConfig { context: 8, width: 16, blocks: 2, dropout: 0.1 }, 5).unwrap()
}

fn quick(iterations: usize) -> TrainSchedule {
    TrainSchedule { iterations, updates_per_iter: 3, batch_size: 4, lr: 1e-3, warmup: 0 }
}

#[test]
fn finetune_freezes_all_but_the_last_block_and_head() {
    let p = tube();
    let pre = small_model();
    let mut data = BTreeMap::new();
    data.insert("tube".to_string(), straight_records(&p, 4, 0.0));
    let (ft, log) = finetune(&pre, &data, "tube", &quick(2), 1).unwrap();
    assert_eq!(log.iterations.len(), 2);
    assert_eq!(frozen_values(&ft), frozen_values(&pre));
    let mask = pre.net.finetune_mask(pre.params.len());
    let changed = (0..mask.len()).filter(|&i| mask[i] && ft.params.get(i) != pre.params.get(i)).count();
    assert!(changed > 0);
    assert_eq!(ft.stage, Stage::Finetuned("tube".into()));
    assert!(finetune(&pre, &data, "missing", &quick(1), 1).is_err());
    let (same, _) = finetune(&pre, &data, "tube", &quick(0), 1).unwrap();
    assert_eq!(same.params, pre.params);
}

#[test]
fn pretraining_is_deterministic_and_changes_parameters() {
    let p = tube();
    let recs = straight_records(&p, 4, 0.0);
    let m = small_model();
    let (a, _) = pretrain(&m, &recs, &quick(1), 9).unwrap();
    let (b, _) = pretrain(&m, &recs, &quick(1), 9).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, m.params);
    let (z, log) = pretrain(&m, &recs, &quick(0), 9).unwrap();
    assert_eq!(z.params, m.params);
    assert!(log.iterations.is_empty());
    assert!(pretrain(&m, &[], &quick(1), 9).is_err());
}

#[test]
fn finetuned_models_diverge_per_bundle() {
    let p = tube();
    let pre = small_model();
    let mut data = BTreeMap::new();
    data.insert("a".to_string(), straight_records(&p, 3, 0.0));
    let mut other = straight_records(&p, 3, 1.0);
    for r in &mut other {
        for a in &mut r.actions {
            *a = [0.0, 1.0, 0.0];
        }
    }
    data.insert("b".to_string(), other);
    let (a, _) = finetune(&pre, &data, "a", &quick(1), 2).unwrap();
    let (b, _) = finetune(&pre, &data, "b", &quick(1), 2).unwrap();
    assert_ne!(a.params, b.params);
}

fn policies() -> Vec<PolicyBundle> {
    let mut rng = Rng::seed_from_u64(8);
    Algo::ALL.iter().map(|&a| PolicyBundle::new(a, Hyper { hidden: 16, ..Hyper::defaults(a) }, &mut rng)).collect()
}

#[test]
fn mcpft_runs_the_stated_update_schedule() {
    let p = tube();
    let recs = straight_records(&p, 4, 0.0);
    let m = small_model();
    let mut pols = policies();
    let before: Vec<_> = pols.iter().map(|q| q.critics[0].params.clone()).collect();
    let sched = McpftSchedule { iterations: 2, actor_updates: 5, batch_size: 4, rollout_episodes: 3, lr: 1e-3, ..Default::default() };
    let env = EnvConfig { max_steps: 20, ..Default::default() };
    let (out, log) = mcpft(&m, &mut pols, &recs, &p, 0, env, &sched, 4).unwrap();
    assert_eq!(log.iterations.len(), 2);
    for it in &log.iterations {
        assert_eq!(it.actor_updates, 5);
        assert_eq!(it.critic_updates, vec![1, 1, 1]);
        assert_eq!(it.critic_terms.len(), 3);
        assert!(it.rollout_transitions > 0);
    }
    for (q, b) in pols.iter().zip(&before) {
        assert_ne!(&q.critics[0].params, b);
    }
    assert_eq!(out.stage, Stage::Mcpft("tube".into()));
    assert_eq!(frozen_values(&out), frozen_values(&m));
    // No critics: the objective is the angular loss alone and nothing else is touched.
    let (k0, log0) = mcpft(&m, &mut [], &recs, &p, 0, env, &sched, 4).unwrap();
    assert!(log0.iterations.iter().all(|it| it.critic_updates.is_empty() && it.critic_terms.is_empty()));
    assert!(log0.iterations.iter().all(|it| (it.total_loss - it.dist_loss).abs() < 1e-9));
    assert_ne!(k0.params, m.params);
}

#[test]
fn fused_tracking_conditions_on_decreasing_return() {
    let p = tube();
    let m = small_model();
    let env = EnvConfig { max_steps: 30, ..Default::default() };
    let starts = vec![([10.0, 7.5, 7.5], Some([1.0, 0.0, 0.0])), ([20.0, 7.5, 7.5], Some([-1.0, 0.0, 0.0]))];
    let eps = run_fused(&m, &p, 0, &starts, env, DEFAULT_RTG0, None).unwrap();
    for e in &eps {
        assert_eq!(e.rtg[0], 300.0);
        assert!(e.rtg.windows(2).all(|w| w[1] <= w[0] && w[1] >= 0.0));
        assert_eq!(e.points.len(), e.actions.len() + 1);
        assert!(e.actions.len() <= 30);
    }
    let again = run_fused(&m, &p, 0, &starts, env, DEFAULT_RTG0, None).unwrap();
    assert_eq!(eps, again);
}
