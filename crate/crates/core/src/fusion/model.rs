use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::{Binding, Checkpoint, Dropout, GptBlockStack, GptConfig, Graph, Init, Linear, ParamSet, Scalar, Var};
use crate::nn::graph::{LAYER_NORM_EPS, NORMALIZE_EPS};
use crate::nn::tensor::{cst, gemm};
use crate::rng::{self, Rng};

/// Return-to-go values are divided by this before embedding.
pub const RTG_SCALE: f64 = 100.0;
pub const TOKENS_PER_STEP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Timesteps per window; the token window is three times longer.
    pub context: usize,
    pub width: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { context: 40, width: 128, blocks: 4, dropout: 0.1 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.width == 0 || self.blocks == 0 {
            return Err(Error::InvalidArgument(format!("fusion config needs positive context, width and blocks: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("fusion dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn gpt(&self) -> GptConfig {
        GptConfig { width: self.width, blocks: self.blocks, positions: TOKENS_PER_STEP * self.context, dropout: self.dropout }
    }
}

/// Token inputs for `windows` sequences of `steps` timesteps each, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T> {
    pub windows: usize,
    pub steps: usize,
    /// Raw (unscaled) return-to-go, `windows x steps`.
    pub rtg: Vec<T>,
    pub states: Vec<T>,
    pub actions: Vec<T>,
    /// Which timesteps hold real data; padding sits at the start of a window.
    pub real: Vec<bool>,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn zeros(windows: usize, steps: usize) -> Self {
        let n = windows * steps;
        Self {
            windows,
            steps,
            rtg: vec![T::zero(); n],
            states: vec![T::zero(); n * STATE_DIM],
            actions: vec![T::zero(); n * ACTION_DIM],
            real: vec![false; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.windows * self.steps
    }

    pub(crate) fn check(&self) -> Result<()> {
        let n = self.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty token batch".into()));
        }
        if self.rtg.len() != n || self.states.len() != n * STATE_DIM || self.actions.len() != n * ACTION_DIM || self.real.len() != n {
            return Err(Error::shape("token batch", format!("{n} timesteps"), format!("rtg {} states {} actions {} mask {}", self.rtg.len(), self.states.len(), self.actions.len(), self.real.len())));
        }
        Ok(())
    }
}

/// Architecture of the fused policy; parameters live in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub rtg_embed: Linear,
    pub state_embed: Linear,
    pub action_embed: Linear,
    pub stack: GptBlockStack,
    pub head: Linear,
}

impl FusionNet {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, config: FusionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let init = Init::Normal(crate::nn::layers::GPT_INIT_STD);
        Ok(Self {
            config,
            rtg_embed: Linear::new(ps, "embed_rtg", 1, w, init, rng),
            state_embed: Linear::new(ps, "embed_state", STATE_DIM, w, init, rng),
            action_embed: Linear::new(ps, "embed_action", ACTION_DIM, w, init, rng),
            stack: GptBlockStack::new(ps, "gpt", config.gpt(), rng),
            head: Linear::new(ps, "head", w, ACTION_DIM, init, rng),
        })
    }

    /// Parameters updated during bundle-specific finetuning: the last block, the final norm
    /// and the action head.
    pub fn finetune_mask(&self, total: usize) -> Vec<bool> {
        let mut mask = vec![false; total];
        let last = self.stack.blocks.last().expect("at least one block");
        for id in last.param_ids().into_iter().chain(self.stack.ln_f.param_ids()).chain(self.head.param_ids()) {
            mask[id] = true;
        }
        mask
    }

    /// Unit action predictions at every state token, `(windows * steps) x 3`.
    ///
    /// With `trailing_action = false` the last action token of each window is left out, which
    /// is how tracking queries the current step. Token `j` of a window gets position
    /// `pos_offset + j`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        tb: &TokenBatch<T>,
        trailing_action: bool,
        pos_offset: usize,
        drop: &mut Dropout,
    ) -> Result<Var> {
        tb.check()?;
        if tb.steps > self.config.context {
            return Err(Error::shape("fusion window", format!("at most {} timesteps", self.config.context), tb.steps));
        }
        let n = tb.rows();
        let scale: T = cst(1.0 / RTG_SCALE);
        let rtg = g.input(n, 1, tb.rtg.iter().map(|&r| r * scale).collect());
        let st = g.input(n, STATE_DIM, tb.states.clone());
        let ac = g.input(n, ACTION_DIM, tb.actions.clone());
        let er = self.rtg_embed.forward(g, b, rtg)?;
        let es = self.state_embed.forward(g, b, st)?;
        let ea = self.action_embed.forward(g, b, ac)?;
        let all = g.concat_rows(&[er, es, ea]);
        let seq = TOKENS_PER_STEP * tb.steps - usize::from(!trailing_action);
        let mut idx = Vec::with_capacity(tb.windows * seq);
        let mut valid = Vec::with_capacity(tb.windows * seq);
        for w in 0..tb.windows {
            for j in 0..seq {
                let (t, kind) = (j / TOKENS_PER_STEP, j % TOKENS_PER_STEP);
                let row = w * tb.steps + t;
                idx.push(kind * n + row);
                valid.push(tb.real[row]);
            }
        }
        let tokens = g.gather_rows(all, idx);
        let h = self.stack.forward(g, b, tokens, seq, &valid, pos_offset, drop)?;
        let state_rows = (0..tb.windows)
            .flat_map(|w| (0..tb.steps).map(move |t| w * seq + TOKENS_PER_STEP * t + 1))
            .collect();
        let hs = g.gather_rows(h, state_rows);
        let out = self.head.forward(g, b, hs)?;
        let out = g.tanh(out);
        Ok(g.row_normalize(out))
    }
}

/// Windows per tape-free inference pass; bounds peak memory.
const INFER_CHUNK: usize = 256;

fn layer_norm_rows(x: &[f32], width: usize, gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let eps = LAYER_NORM_EPS as f32;
    let mut out = vec![0.0f32; x.len()];
    for (xs, os) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mean = xs.iter().sum::<f32>() / width as f32;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / width as f32;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..width {
            os[j] = (xs[j] - mean) * rs * gamma[j] + beta[j];
        }
    }
    out
}

/// Full causal attention of one window; `p` is `seq x seq` scratch.
fn causal_attention(q: &[f32], k: &[f32], v: &[f32], d: usize, seq: usize, p: &mut [f32], out: &mut [f32]) {
    let scale = 1.0 / (d as f32).sqrt();
    gemm(seq, d, seq, q, false, k, true, p, false);
    for i in 0..seq {
        let row = &mut p[i * seq..(i + 1) * seq];
        let max = row[..=i].iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x * scale));
        let mut total = 0.0;
        for x in &mut row[..=i] {
            *x = (*x * scale - max).exp();
            total += *x;
        }
        row[..=i].iter_mut().for_each(|x| *x /= total);
        row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
    }
    gemm(seq, seq, d, p, false, v, false, out, false);
}

/// Causal softmax attention of one query at row `qrow` over keys `0..=qrow`.
fn attend(q: &[f32], k: &[f32], v: &[f32], d: usize, qrow: usize, out: &mut [f32], scores: &mut Vec<f32>) {
    let scale = 1.0 / (d as f32).sqrt();
    scores.clear();
    let mut max = f32::NEG_INFINITY;
    for j in 0..=qrow {
        let s = q.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum::<f32>() * scale;
        max = max.max(s);
        scores.push(s);
    }
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &p) in scores.iter().enumerate() {
        let w = p / total;
        for (o, &vv) in out.iter_mut().zip(&v[j * d..(j + 1) * d]) {
            *o += w * vv;
        }
    }
}

impl FusionNet {
    /// Tape-free forward returning only the prediction at the last state token of each window.
    /// Inputs hold `windows * steps` real timesteps; the trailing action token is left out.
    #[allow(clippy::too_many_arguments)]
    fn infer_latest(
        &self,
        ps: &ParamSet<f32>,
        rtg: &[f32],
        states: &[f32],
        actions: &[f32],
        windows: usize,
        steps: usize,
        pos_offset: usize,
    ) -> Result<Vec<[f32; 3]>> {
        let d = self.config.width;
        let n = windows * steps;
        let seq = TOKENS_PER_STEP * steps - 1;
        if pos_offset + seq > self.stack.config.positions {
            return Err(Error::shape("gpt token window", format!("at most {} positions", self.stack.config.positions), pos_offset + seq));
        }
        let scaled: Vec<f32> = rtg.iter().map(|&r| r / RTG_SCALE as f32).collect();
        let emb = [
            self.rtg_embed.infer(ps, &scaled, n),
            self.state_embed.infer(ps, states, n),
            self.action_embed.infer(ps, actions, n),
        ];
        let pos = &ps.get(self.stack.pos).data;
        let mut x = vec![0.0f32; windows * seq * d];
        for w in 0..windows {
            for j in 0..seq {
                let src = &emb[j % TOKENS_PER_STEP][(w * steps + j / TOKENS_PER_STEP) * d..][..d];
                let p = &pos[(pos_offset + j) * d..][..d];
                let dst = &mut x[(w * seq + j) * d..][..d];
                for i in 0..d {
                    dst[i] = src[i] + p[i];
                }
            }
        }
        let rows = windows * seq;
        let last = self.stack.blocks.len() - 1;
        let mut scores = Vec::with_capacity(seq);
        for (bi, blk) in self.stack.blocks.iter().enumerate() {
            let g = |id: usize| ps.get(id).data.as_slice();
            let h = layer_norm_rows(&x, d, g(blk.ln1.gamma), g(blk.ln1.beta));
            let k = blk.k.infer(ps, &h, rows);
            let v = blk.v.infer(ps, &h, rows);
            // The last block only matters at each window's final token.
            let (qrows, xin): (Vec<usize>, Vec<f32>) = if bi == last {
                let idx: Vec<usize> = (0..windows).map(|w| w * seq + seq - 1).collect();
                let hl: Vec<f32> = idx.iter().flat_map(|&r| h[r * d..(r + 1) * d].iter().copied()).collect();
                let xl: Vec<f32> = idx.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect();
                let q = blk.q.infer(ps, &hl, windows);
                let mut a = vec![0.0f32; windows * d];
                for w in 0..windows {
                    let base = w * seq * d;
                    attend(&q[w * d..(w + 1) * d], &k[base..base + seq * d], &v[base..base + seq * d], d, seq - 1, &mut a[w * d..(w + 1) * d], &mut scores);
                }
                x = xl;
                (idx, a)
            } else {
                let q = blk.q.infer(ps, &h, rows);
                let mut a = vec![0.0f32; rows * d];
                let mut p = vec![0.0f32; seq * seq];
                let span = seq * d;
                for w in 0..windows {
                    let r = w * span..(w + 1) * span;
                    causal_attention(&q[r.clone()], &k[r.clone()], &v[r.clone()], d, seq, &mut p, &mut a[r]);
                }
                ((0..rows).collect(), a)
            };
            let m = qrows.len();
            let a = blk.proj.infer(ps, &xin, m);
            x.iter_mut().zip(&a).for_each(|(xv, av)| *xv += av);
            let h = layer_norm_rows(&x, d, g(blk.ln2.gamma), g(blk.ln2.beta));
            let mut f = blk.fc1.infer(ps, &h, m);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            let f = blk.fc2.infer(ps, &f, m);
            x.iter_mut().zip(&f).for_each(|(xv, fv)| *xv += fv);
        }
        let lf = &self.stack.ln_f;
        let h = layer_norm_rows(&x, d, &ps.get(lf.gamma).data, &ps.get(lf.beta).data);
        let out = self.head.infer(ps, &h, windows);
        let eps = NORMALIZE_EPS as f32;
        Ok(out
            .chunks_exact(3)
            .map(|r| {
                let t = [r[0].tanh(), r[1].tanh(), r[2].tanh()];
                let nrm = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
                let s = if nrm > eps { nrm } else { eps };
                [t[0] / s, t[1] / s, t[2] / s]
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Init,
    Pretrained,
    Finetuned(String),
    Mcpft(String),
}

impl Stage {
    pub fn tag(&self) -> String {
        match self {
            Stage::Init => "init".into(),
            Stage::Pretrained => "pretrained".into(),
            Stage::Finetuned(b) => format!("finetuned:{b}"),
            Stage::Mcpft(b) => format!("mcpft:{b}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "init" => Ok(Stage::Init),
            None if s == "pretrained" => Ok(Stage::Pretrained),
            Some(("finetuned", b)) if !b.is_empty() => Ok(Stage::Finetuned(b.into())),
            Some(("mcpft", b)) if !b.is_empty() => Ok(Stage::Mcpft(b.into())),
            _ => Err(Error::InvalidArgument(format!("unknown model stage tag '{s}'"))),
        }
    }
}

/// A fused policy with its parameters and training stage.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub net: FusionNet,
    pub params: ParamSet<f32>,
    pub stage: Stage,
}

/// Predictions for one window, one entry per slot including padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub actions: Vec<[f32; 3]>,
    pub padded: Vec<bool>,
}

/// One timestep of conditioning input.
#[derive(Debug, Clone, Copy)]
pub struct StepRef<'a> {
    pub rtg: f32,
    pub state: &'a [f32],
    pub action: [f32; 3],
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        let mut ps = ParamSet::new();
        let net = FusionNet::new(&mut ps, config, &mut rng::stream(seed, "fusion-init"))?;
        Ok(Self { net, params: ps, stage: Stage::Init })
    }

    pub fn config(&self) -> FusionConfig {
        self.net.config
    }

    /// Predict actions for a window of at most `context` steps, padded at the start.
    pub fn predict_actions(&self, steps: &[StepRef]) -> Result<Prediction> {
        let c = self.config().context;
        if steps.len() > c {
            return Err(Error::shape("fusion window", format!("at most {c} timesteps"), steps.len()));
        }
        let pad = c - steps.len();
        let mut tb = TokenBatch::<f32>::zeros(1, c);
        for (i, s) in steps.iter().enumerate() {
            let t = pad + i;
            write_step(&mut tb, t, s)?;
        }
        let mut g = Graph::<f32>::new();
        let b = g.bind(&self.params, false);
        let out = self.net.forward(&mut g, &b, &tb, true, 0, &mut Dropout::off())?;
        let v = g.value(out);
        Ok(Prediction {
            actions: v.chunks_exact(3).map(|r| [r[0], r[1], r[2]]).collect(),
            padded: tb.real.iter().map(|r| !r).collect(),
        })
    }

    /// Action for the newest state of each history. Every history holds the same number of
    /// steps `n <= context`; the newest step's action is ignored. Only real tokens are fed,
    /// positioned as they would be in a start-padded window.
    pub fn act_latest(&self, batch: &TokenBatch<f32>) -> Result<Vec<[f32; 3]>> {
        let c = self.config().context;
        let n = batch.steps;
        if n == 0 || n > c {
            return Err(Error::shape("fusion history", format!("1..={c} timesteps"), n));
        }
        batch.check()?;
        let mut out = Vec::with_capacity(batch.windows);
        for start in (0..batch.windows).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(batch.windows);
            let rows = start * n..end * n;
            out.extend(self.net.infer_latest(
                &self.params,
                &batch.rtg[rows.clone()],
                &batch.states[rows.start * STATE_DIM..rows.end * STATE_DIM],
                &batch.actions[rows.start * ACTION_DIM..rows.end * ACTION_DIM],
                end - start,
                n,
                TOKENS_PER_STEP * (c - n),
            )?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = self.config();
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "fusion");
        ck.set_meta("stage", &self.stage.tag());
        ck.set_scalar("config.context", c.context as f32);
        ck.set_scalar("config.width", c.width as f32);
        ck.set_scalar("config.blocks", c.blocks as f32);
        ck.set_scalar("config.dropout", c.dropout as f32);
        ck.add_params(&self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("fusion") {
            return Err(Error::InvalidArgument("checkpoint does not hold a fusion model".into()));
        }
        let stage = Stage::parse(ck.require_meta("stage")?)?;
        let config = FusionConfig {
            context: ck.scalar("config.context")? as usize,
            width: ck.scalar("config.width")? as usize,
            blocks: ck.scalar("config.blocks")? as usize,
            dropout: ck.scalar("config.dropout")? as f64,
        };
        let mut m = Self::new(config, 0)?;
        ck.load_params(&mut m.params)?;
        m.stage = stage;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

pub(crate) fn write_step<T: Scalar>(tb: &mut TokenBatch<T>, row: usize, s: &StepRef) -> Result<()> {
    if s.state.len() != STATE_DIM {
        return Err(Error::shape("fusion state", STATE_DIM, s.state.len()));
    }
    tb.rtg[row] = cst(s.rtg as f64);
    for (d, &v) in tb.states[row * STATE_DIM..(row + 1) * STATE_DIM].iter_mut().zip(s.state) {
        *d = cst(v as f64);
    }
    for k in 0..3 {
        tb.actions[row * 3 + k] = cst(s.action[k] as f64);
    }
    tb.real[row] = true;
    Ok(())
}
