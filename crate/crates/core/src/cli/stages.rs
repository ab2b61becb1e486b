//! Pipeline stages. Each reads its upstream artifacts from the output directory, writes its
//! own, and leaves a manifest behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::RunConfig;
use super::manifest::{hash_all, verify, Manifest};
use crate::agents::{evaluate_policy, random_baseline, train_policy, Algo, PolicyBundle};
use crate::eds::{build_datasets, read_records, write_records, EdsDatasets};
use crate::error::{Error, Result};
use crate::fusion::{finetune, mcpft, pretrain, FusionModel, Stage};
use crate::geometry::{read_streamlines, reference_set, write_streamlines, ReferenceSet, REFERENCE_COUNT};
use crate::phantom::{generate_phantom, read_phantom, write_phantom, Phantom};
use crate::rng;
use crate::trackeval::{
    format_scores, gnuplot_table, mask_of, parse_scores, post_filter, score, track_fusion, track_policy, voxelize, PolicyActor, ScoreRow,
    TrackAlgo,
};

/// File locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn phantom(&self) -> PathBuf {
        self.at("phantom.phn")
    }
    pub fn ground_truth(&self, bundle: &str) -> PathBuf {
        self.at(&format!("ground_truth/{bundle}.stl"))
    }
    pub fn policy(&self, algo: Algo) -> PathBuf {
        self.at(&format!("rl/{algo}.ckp"))
    }
    pub fn rl_log(&self, algo: Algo) -> PathBuf {
        self.at(&format!("rl/{algo}_train.tsv"))
    }
    pub fn eds_pretrain(&self) -> PathBuf {
        self.at("eds/pretrain.eds")
    }
    pub fn eds_finetune(&self, bundle: &str) -> PathBuf {
        self.at(&format!("eds/finetune_{bundle}.eds"))
    }
    pub fn eds_batches(&self) -> PathBuf {
        self.at("eds/batches.tsv")
    }
    pub fn eds_provenance(&self) -> PathBuf {
        self.at("eds/provenance.tsv")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.at("fusion/pretrained.ckp")
    }
    pub fn finetuned(&self, bundle: &str) -> PathBuf {
        self.at(&format!("fusion/finetuned_{bundle}.ckp"))
    }
    pub fn mcpft(&self, bundle: &str) -> PathBuf {
        self.at(&format!("fusion/mcpft_{bundle}.ckp"))
    }
    pub fn mcpft_policy(&self, bundle: &str, algo: Algo) -> PathBuf {
        self.at(&format!("fusion/mcpft_{bundle}_{algo}.ckp"))
    }
    pub fn stage_log(&self, tag: &str) -> PathBuf {
        self.at(&format!("fusion/{tag}.tsv"))
    }
    pub fn track(&self, bundle: &str, algo: TrackAlgo) -> PathBuf {
        self.at(&format!("tracks/{bundle}/{}.stl", algo.as_str()))
    }
    pub fn scores(&self) -> PathBuf {
        self.at("scores.tsv")
    }
    pub fn scores_plot(&self) -> PathBuf {
        self.at("scores.dat")
    }
    pub fn report(&self) -> PathBuf {
        self.at("report.tsv")
    }
    pub fn report_plot(&self) -> PathBuf {
        self.at("report.dat")
    }
    pub fn manifests(&self) -> PathBuf {
        self.at("manifests")
    }
    pub fn manifest(&self, tag: &str) -> PathBuf {
        self.at(&format!("manifests/{tag}.manifest"))
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.at("resolved.conf")
    }
}

/// What a stage read, wrote and measured.
#[derive(Debug, Default)]
struct Produced {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    metrics: Vec<(String, String)>,
}

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub layout: Layout,
    pub force: bool,
}

impl Ctx<'_> {
    fn finish(&self, tag: &str, start: Instant, p: Produced) -> Result<Manifest> {
        let mut m = Manifest::new(tag, self.cfg.seed);
        m.inputs = hash_all(&self.layout.root, &p.inputs)?;
        m.outputs = hash_all(&self.layout.root, &p.outputs)?;
        m.metrics = p.metrics;
        m.config = self.cfg.to_text();
        m.wall_time_s = start.elapsed().as_secs_f64();
        m.write(&self.layout.manifest(tag))?;
        log::info!("{tag}: done in {:.1} s", m.wall_time_s);
        Ok(m)
    }
}

/// Fail with the first missing path, in the order given.
fn require(paths: &[PathBuf]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(Error::MissingArtifact(p.clone())),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::binio::write_file(path, text.as_bytes())
}

fn bundle_index(phantom: &Phantom, name: &str) -> Result<usize> {
    phantom
        .bundle_index(name)
        .map_err(|_| Error::UnknownBundle(format!("{name} (phantom has {})", phantom.bundle_names().join(", "))))
}

fn references(phantom: &Phantom) -> Result<Vec<ReferenceSet>> {
    phantom
        .ground_truth
        .iter()
        .map(|gt| reference_set(gt, REFERENCE_COUNT.min(gt.len()), phantom.grid.voxel_size))
        .collect()
}

/// Read the phantom plus its per-bundle ground truth. Returns the files read.
fn load_phantom(l: &Layout) -> Result<(Phantom, Vec<PathBuf>)> {
    require(&[l.phantom()])?;
    let mut p = read_phantom(&l.phantom())?;
    let mut files = vec![l.phantom()];
    for (b, name) in p.bundle_names().iter().enumerate() {
        let path = l.ground_truth(name);
        require(std::slice::from_ref(&path))?;
        p.ground_truth[b] = read_streamlines(&path)?.0;
        files.push(path);
    }
    Ok((p, files))
}

fn load_policies(layout: &Layout) -> Result<Vec<PolicyBundle>> {
    Algo::ALL.iter().map(|&a| PolicyBundle::load(&layout.policy(a))).collect()
}

pub fn phantom(ctx: &Ctx) -> Result<Manifest> {
    let start = Instant::now();
    let mut spec = ctx.cfg.phantom.spec(ctx.cfg.seed);
    spec.streamlines_per_bundle = ctx.cfg.streamlines_per_bundle;
    let p = generate_phantom(&spec)?;
    let path = ctx.layout.phantom();
    write_phantom(&path, &p)?;
    let mut out = Produced { outputs: vec![path], ..Default::default() };
    for (name, gt) in p.bundle_names().iter().zip(&p.ground_truth) {
        let gt_path = ctx.layout.ground_truth(name);
        write_streamlines(&gt_path, gt, p.grid.voxel_size as f32)?;
        out.outputs.push(gt_path);
    }
    out.metrics.push(("preset".into(), ctx.cfg.phantom.as_str().into()));
    for m in &p.masks {
        out.metrics.push((format!("mask_voxels_{}", m.bundle_name), m.count().to_string()));
    }
    ctx.finish("phantom", start, out)
}

pub fn train_rl(ctx: &Ctx, algo: Algo) -> Result<Manifest> {
    let start = Instant::now();
    let l = &ctx.layout;
    let (p, pfiles) = load_phantom(l)?;
    let cfg = ctx.cfg;
    let bundles: Vec<usize> = (0..p.masks.len()).collect();
    let mut policy = PolicyBundle::new(algo, cfg.hyper(algo), &mut rng::stream(cfg.seed, &format!("policy-init-{algo}")));
    let log = train_policy(&mut policy, &p, &bundles, cfg.env, &cfg.rl, cfg.seed)?;
    let reward = evaluate_policy(&policy, &p, &bundles, cfg.env, cfg.rl_eval_episodes, cfg.seed)?;
    let baseline = random_baseline(&p, &bundles, cfg.env, cfg.rl_eval_episodes, cfg.seed)?;
    log::info!("{algo}: mean per-step reward {reward:.4}, random baseline {baseline:.4}");
    policy.save(&l.policy(algo))?;
    write_text(&l.rl_log(algo), &log.to_tsv())?;
    let metrics = vec![
        ("mean_step_reward".into(), format!("{reward:.6}")),
        ("random_baseline".into(), format!("{baseline:.6}")),
        ("reward_ratio".into(), format!("{:.3}", reward / baseline)),
    ];
    ctx.finish(&format!("train-rl-{algo}"), start, Produced { inputs: pfiles, outputs: vec![l.policy(algo), l.rl_log(algo)], metrics })
}

fn provenance_text(d: &EdsDatasets) -> String {
    let mut s = String::from("set\trecord\tbatch\tpolicy\n");
    for (i, (r, b)) in d.pretrain.iter().zip(&d.pretrain_batch).enumerate() {
        s.push_str(&format!("pretrain\t{i}\t{b}\t{}\n", r.policy));
    }
    for (name, recs) in &d.finetune {
        for (i, (r, b)) in recs.iter().zip(&d.finetune_batch[name]).enumerate() {
            s.push_str(&format!("finetune_{name}\t{i}\t{b}\t{}\n", r.policy));
        }
    }
    s
}

fn batches_text(d: &EdsDatasets) -> String {
    let opt = |a: Option<Algo>| a.map_or("-".to_string(), |a| a.to_string());
    let mut s = String::from("batch\tbundle\torigin\tpretrain_policy\tfinetune_policy\tpretrain_count\tfinetune_count\n");
    for (i, b) in d.batches.iter().enumerate() {
        s.push_str(&format!(
            "{i}\t{}\t{},{},{}\t{}\t{}\t{}\t{}\n",
            b.bundle,
            b.origin[0],
            b.origin[1],
            b.origin[2],
            opt(b.pretrain_policy),
            opt(b.finetune_policy),
            b.pretrain_count,
            b.finetune_count
        ));
    }
    s
}

pub fn eds(ctx: &Ctx) -> Result<Manifest> {
    let start = Instant::now();
    let l = &ctx.layout;
    let mut inputs: Vec<PathBuf> = Algo::ALL.iter().map(|&a| l.policy(a)).collect();
    inputs.push(l.phantom());
    require(&inputs)?;
    let (p, pfiles) = load_phantom(l)?;
    inputs.pop();
    inputs.extend(pfiles);
    let policies = load_policies(l)?;
    let d = build_datasets(&p, &policies, &references(&p)?, &ctx.cfg.eds_config())?;
    let mut out = Produced { inputs, ..Default::default() };
    write_records(&l.eds_pretrain(), &d.pretrain)?;
    out.outputs.push(l.eds_pretrain());
    out.metrics.push(("pretrain_records".into(), d.pretrain.len().to_string()));
    for name in p.bundle_names() {
        let recs = d.finetune.get(&name).map(Vec::as_slice).unwrap_or(&[]);
        write_records(&l.eds_finetune(&name), recs)?;
        out.outputs.push(l.eds_finetune(&name));
        out.metrics.push((format!("finetune_records_{name}"), recs.len().to_string()));
    }
    write_text(&l.eds_batches(), &batches_text(&d))?;
    write_text(&l.eds_provenance(), &provenance_text(&d))?;
    out.outputs.push(l.eds_batches());
    out.outputs.push(l.eds_provenance());
    ctx.finish("eds", start, out)
}

pub fn pretrain_stage(ctx: &Ctx) -> Result<Manifest> {
    let start = Instant::now();
    let l = &ctx.layout;
    require(&[l.eds_pretrain()])?;
    let records = read_records(&l.eds_pretrain())?;
    let init = FusionModel::new(ctx.cfg.fusion, ctx.cfg.seed)?;
    let (m, log) = pretrain(&init, &records, &ctx.cfg.pretrain, ctx.cfg.seed)?;
    m.save(&l.pretrained())?;
    write_text(&l.stage_log("pretrain"), &log.to_tsv())?;
    let metrics = log.iterations.last().map(|it| vec![("final_val_loss".to_string(), format!("{:.6}", it.val_loss))]).unwrap_or_default();
    ctx.finish("pretrain", start, Produced { inputs: vec![l.eds_pretrain()], outputs: vec![l.pretrained(), l.stage_log("pretrain")], metrics })
}

fn check_bundle(l: &Layout, bundle: &str) -> Result<(Phantom, Vec<PathBuf>)> {
    let (p, files) = load_phantom(l)?;
    bundle_index(&p, bundle)?;
    Ok((p, files))
}

pub fn finetune_stage(ctx: &Ctx, bundle: &str) -> Result<Manifest> {
    let start = Instant::now();
    let l = &ctx.layout;
    check_bundle(l, bundle)?;
    let inputs = vec![l.pretrained(), l.eds_finetune(bundle)];
    require(&inputs)?;
    let model = FusionModel::load(&l.pretrained())?;
    let data = BTreeMap::from([(bundle.to_string(), read_records(&l.eds_finetune(bundle))?)]);
    let (m, log) = finetune(&model, &data, bundle, &ctx.cfg.finetune, ctx.cfg.seed)?;
    let tag = format!("finetune-{bundle}");
    m.save(&l.finetuned(bundle))?;
    write_text(&l.stage_log(&tag), &log.to_tsv())?;
    ctx.finish(&tag, start, Produced { inputs, outputs: vec![l.finetuned(bundle), l.stage_log(&tag)], metrics: Vec::new() })
}

pub fn mcpft_stage(ctx: &Ctx, bundle: &str) -> Result<Manifest> {
    let start = Instant::now();
    let l = &ctx.layout;
    let (p, pfiles) = check_bundle(l, bundle)?;
    let b = bundle_index(&p, bundle)?;
    let mut inputs = vec![l.finetuned(bundle), l.eds_finetune(bundle)];
    inputs.extend(Algo::ALL.iter().map(|&a| l.policy(a)));
    require(&inputs)?;
    inputs.extend(pfiles);
    let model = FusionModel::load(&l.finetuned(bundle))?;
    let records = read_records(&l.eds_finetune(bundle))?;
    let mut policies = load_policies(l)?;
    let sched = crate::fusion::McpftSchedule { rtg0: ctx.cfg.track.rtg0, ..ctx.cfg.mcpft };
    let (m, log) = mcpft(&model, &mut policies, &records, &p, b, ctx.cfg.env, &sched, ctx.cfg.seed)?;
    let tag = format!("mcpft-{bundle}");
    m.save(&l.mcpft(bundle))?;
    write_text(&l.stage_log(&tag), &log.to_tsv())?;
    let mut outputs = vec![l.mcpft(bundle), l.stage_log(&tag)];
    for pol in &policies {
        pol.save(&l.mcpft_policy(bundle, pol.algo))?;
        outputs.push(l.mcpft_policy(bundle, pol.algo));
    }
    let actor: usize = log.iterations.iter().map(|it| it.actor_updates).sum::<u64>() as usize;
    let metrics = vec![("actor_updates".to_string(), actor.to_string())];
    ctx.finish(&tag, start, Produced { inputs, outputs, metrics })
}

/// Which fused checkpoint `track --algo fusion` reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStage {
    Finetuned,
    Mcpft,
}

pub fn track(ctx: &Ctx, algo: TrackAlgo, bundle: &str, stage: FusionStage) -> Result<Manifest> {
    let start = Instant::now();
    let l = &ctx.layout;
    let mut inputs = match (algo.single(), algo) {
        (Some(a), _) => vec![l.policy(a)],
        (None, TrackAlgo::Fusion) => vec![match stage {
            FusionStage::Mcpft => l.mcpft(bundle),
            FusionStage::Finetuned => l.finetuned(bundle),
        }],
        (None, _) => Algo::ALL.iter().map(|&a| l.policy(a)).collect(),
    };
    require(&inputs)?;
    let n_models = inputs.len();
    let (p, pfiles) = check_bundle(l, bundle)?;
    inputs.extend(pfiles);
    let b = bundle_index(&p, bundle)?;
    let cfg = &ctx.cfg.track;
    let seed = ctx.cfg.seed;
    let lines = match algo {
        TrackAlgo::Fusion => {
            let model = FusionModel::load(&inputs[0])?;
            let expected = Stage::tag(&match stage {
                FusionStage::Mcpft => Stage::Mcpft(bundle.to_string()),
                FusionStage::Finetuned => Stage::Finetuned(bundle.to_string()),
            });
            if model.stage.tag() != expected {
                return Err(Error::InvalidArgument(format!("{} holds a {} model, expected {expected}", inputs[0].display(), model.stage.tag())));
            }
            track_fusion(&model, &p, b, cfg, seed)?
        }
        _ => {
            let policies: Vec<PolicyBundle> = inputs[..n_models].iter().map(|p| PolicyBundle::load(p)).collect::<Result<_>>()?;
            let actor = match algo {
                TrackAlgo::Avg => PolicyActor::Avg(&policies),
                TrackAlgo::MaxQ => PolicyActor::MaxQ(&policies),
                _ => PolicyActor::Single(&policies[0]),
            };
            track_policy(actor, &p, b, cfg, seed)?
        }
    };
    let out = l.track(bundle, algo);
    write_streamlines(&out, &lines, p.grid.voxel_size as f32)?;
    let metrics = vec![("streamlines".to_string(), lines.len().to_string())];
    ctx.finish(&format!("track-{}-{bundle}", algo.as_str()), start, Produced { inputs, outputs: vec![out], metrics })
}

/// Every manifest under the output directory except those of `skip` stages.
fn upstream_problems(l: &Layout, skip: &[&str]) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    let dir = l.manifests();
    if !dir.exists() {
        return Ok(problems);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "manifest"))
        .collect();
    entries.sort();
    for path in entries {
        let m = Manifest::read(&path)?;
        if skip.contains(&m.stage.as_str()) {
            continue;
        }
        problems.extend(verify(&l.root, &m));
    }
    Ok(problems)
}

pub fn evaluate(ctx: &Ctx) -> Result<Manifest> {
    let start = Instant::now();
    let l = &ctx.layout;
    let (p, pfiles) = load_phantom(l)?;
    let problems = upstream_problems(l, &["evaluate", "report"])?;
    if !problems.is_empty() {
        if !ctx.force {
            return Err(Error::Provenance(format!("upstream artifacts changed since their manifests were written (rerun with --force to ignore):\n{}", problems.join("\n"))));
        }
        for p in &problems {
            log::warn!("ignoring provenance mismatch: {p}");
        }
    }
    let refs = references(&p)?;
    let mut rows = Vec::new();
    let mut inputs = pfiles;
    let mut metrics = Vec::new();
    for (b, name) in p.bundle_names().iter().enumerate() {
        let truth = mask_of(&p, b);
        for algo in TrackAlgo::ALL {
            let path = l.track(name, algo);
            if !path.exists() {
                continue;
            }
            let (lines, _) = read_streamlines(&path)?;
            let kept = post_filter(&lines, &refs[b], ctx.cfg.track.post_filter_threshold_mm)?;
            let s = score(&voxelize(&kept, &p.grid), &truth)?;
            log::info!("{name} {}: {} of {} streamlines kept, dice {:.4}", algo.as_str(), kept.len(), lines.len(), s.dice);
            metrics.push((format!("kept_{name}_{}", algo.as_str()), format!("{}/{}", kept.len(), lines.len())));
            rows.push(ScoreRow { bundle: name.clone(), algo: algo.as_str().to_string(), score: s });
            inputs.push(path);
        }
    }
    if rows.is_empty() {
        let first = p.bundle_names().into_iter().next().unwrap_or_default();
        return Err(Error::MissingArtifact(l.track(&first, TrackAlgo::Fusion)));
    }
    write_text(&l.scores(), &format_scores(&rows))?;
    write_text(&l.scores_plot(), &gnuplot_table(&rows))?;
    ctx.finish("evaluate", start, Produced { inputs, outputs: vec![l.scores(), l.scores_plot()], metrics })
}

pub fn report(ctx: &Ctx) -> Result<(Manifest, String)> {
    let start = Instant::now();
    let l = &ctx.layout;
    require(&[l.scores()])?;
    let bytes = crate::binio::read_file(&l.scores())?;
    let rows = parse_scores(&String::from_utf8_lossy(&bytes))?;
    let table = format_scores(&rows);
    write_text(&l.report(), &table)?;
    write_text(&l.report_plot(), &gnuplot_table(&rows))?;
    let m = ctx.finish("report", start, Produced { inputs: vec![l.scores()], outputs: vec![l.report(), l.report_plot()], metrics: Vec::new() })?;
    Ok((m, table))
}
