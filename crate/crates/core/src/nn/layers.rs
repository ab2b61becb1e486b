use rand::{Rng as _, RngCore as _};
use rand_distr::{Distribution, Normal};

use super::graph::{Binding, Graph, Var};
use super::tensor::{cst, gemm, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Named, ordered parameter tensors. Layers refer to their tensors by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Overwrite values from a set with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (d, s) in self.tensors.iter_mut().zip(&other.tensors) {
            d.data.copy_from_slice(&s.data);
        }
        Ok(())
    }

    /// Polyak averaging: `self = (1 - tau) * self + tau * main`.
    pub fn soft_update(&mut self, main: &ParamSet<T>, tau: f64) -> Result<()> {
        self.check_compatible(main)?;
        let tau: T = cst(tau);
        let keep = T::one() - tau;
        for (d, s) in self.tensors.iter_mut().zip(&main.tensors) {
            for (x, &y) in d.data.iter_mut().zip(&s.data) {
                *x = keep * *x + tau * y;
            }
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::InvalidArgument("parameter sets have different names".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape != b.shape {
                return Err(Error::shape(format!("parameter {}", self.names[i]), format!("{:?}", a.shape), format!("{:?}", b.shape)));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| cst(rng.random_range(-bound..=bound))).collect();
    Tensor { shape: shape.to_vec(), data }
}

fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| cst(dist.sample(rng))).collect();
    Tensor { shape: shape.to_vec(), data }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-b, b)` with `b = gain / sqrt(fan_in)`.
    FanInUniform(f64),
    Normal(f64),
}

/// Dense layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, inputs: usize, outputs: usize, init: Init, rng: &mut Rng) -> Self {
        let w = match init {
            Init::FanInUniform(gain) => uniform_tensor(&[inputs, outputs], gain / (inputs as f64).sqrt(), rng),
            Init::Normal(std) => normal_tensor(&[inputs, outputs], std, rng),
        };
        let w = ps.add(format!("{name}.w"), w);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[1, outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let (_, c) = g.shape(x);
        if c != self.inputs {
            return Err(Error::shape("linear input width", self.inputs, c));
        }
        Ok(g.linear(x, b.var(self.w), b.var(self.b)))
    }

    pub fn infer<T: Scalar>(&self, ps: &ParamSet<T>, x: &[T], rows: usize) -> Vec<T> {
        let mut out = vec![T::zero(); rows * self.outputs];
        gemm(rows, self.inputs, self.outputs, x, false, &ps.get(self.w).data, false, &mut out, false);
        let bias = &ps.get(self.b).data;
        for row in out.chunks_exact_mut(self.outputs) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        out
    }

    pub fn param_ids(&self) -> Vec<usize> {
        vec![self.w, self.b]
    }
}

pub const DEFAULT_HIDDEN: usize = 1024;
pub const HIDDEN_LAYERS: usize = 3;

/// Three ReLU hidden layers followed by a linear output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, inputs: usize, hidden: usize, outputs: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(HIDDEN_LAYERS + 1);
        let mut width = inputs;
        for i in 0..HIDDEN_LAYERS {
            layers.push(Linear::new(ps, &format!("{name}.l{i}"), width, hidden, Init::FanInUniform(6f64.sqrt()), rng));
            width = hidden;
        }
        layers.push(Linear::new(ps, &format!("{name}.out"), width, outputs, Init::FanInUniform(1.0), rng));
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, b, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass without recording, on `rows` stacked inputs.
    pub fn infer<T: Scalar>(&self, ps: &ParamSet<T>, x: &[T], rows: usize) -> Result<Vec<T>> {
        if x.len() != rows * self.inputs() {
            return Err(Error::shape("mlp input", format!("{rows}x{}", self.inputs()), x.len()));
        }
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.infer(ps, &h, rows);
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| l.param_ids()).collect()
    }
}

/// Inverted dropout; inactive without an RNG or with rate 0.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        let rate = self.rate;
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        let (r, c) = g.shape(x);
        let keep: T = cst(1.0 / (1.0 - rate));
        // Drop when a uniform u32 falls below rate * 2^32.
        let cut = (rate * 4294967296.0) as u64;
        let mut mask = Vec::with_capacity(r * c);
        while mask.len() < r * c {
            let bits = rng.next_u64();
            for half in [bits as u32, (bits >> 32) as u32] {
                if mask.len() < r * c {
                    mask.push(if (half as u64) < cut { T::zero() } else { keep });
                }
            }
        }
        g.mul_const(x, mask)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub width: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, width: usize) -> Self {
        let gamma = ps.add(format!("{name}.g"), Tensor { shape: vec![1, width], data: vec![T::one(); width] });
        let beta = ps.add(format!("{name}.b"), Tensor::zeros(&[1, width]));
        Self { gamma, beta, width }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Var {
        g.layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }

    pub fn param_ids(&self) -> Vec<usize> {
        vec![self.gamma, self.beta]
    }
}

pub const GPT_INIT_STD: f64 = 0.02;

/// Pre-norm transformer block: single-head causal attention and a 4x ReLU feed-forward.
#[derive(Debug, Clone)]
pub struct GptBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GptBlock {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, width: usize, rng: &mut Rng) -> Self {
        let init = Init::Normal(GPT_INIT_STD);
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), width),
            q: Linear::new(ps, &format!("{name}.q"), width, width, init, rng),
            k: Linear::new(ps, &format!("{name}.k"), width, width, init, rng),
            v: Linear::new(ps, &format!("{name}.v"), width, width, init, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), width, width, init, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), width),
            fc1: Linear::new(ps, &format!("{name}.fc1"), width, 4 * width, init, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), 4 * width, width, init, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        seq: usize,
        key_valid: &[bool],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, b, x);
        let q = self.q.forward(g, b, h)?;
        let k = self.k.forward(g, b, h)?;
        let v = self.v.forward(g, b, h)?;
        let a = g.attention(q, k, v, seq, key_valid);
        let a = self.proj.forward(g, b, a)?;
        let a = drop.apply(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, b, x);
        let f = self.fc1.forward(g, b, h)?;
        let f = g.relu(f);
        let f = self.fc2.forward(g, b, f)?;
        let f = drop.apply(g, f);
        Ok(g.add(x, f))
    }

    pub fn param_ids(&self) -> Vec<usize> {
        let mut ids = self.ln1.param_ids();
        for l in [&self.q, &self.k, &self.v, &self.proj] {
            ids.extend(l.param_ids());
        }
        ids.extend(self.ln2.param_ids());
        ids.extend(self.fc1.param_ids());
        ids.extend(self.fc2.param_ids());
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GptConfig {
    pub width: usize,
    pub blocks: usize,
    /// Number of learned positions.
    pub positions: usize,
    pub dropout: f64,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self { width: 128, blocks: 4, positions: 120, dropout: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct GptBlockStack {
    pub config: GptConfig,
    pub pos: usize,
    pub blocks: Vec<GptBlock>,
    pub ln_f: LayerNorm,
}

impl GptBlockStack {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, config: GptConfig, rng: &mut Rng) -> Self {
        let pos = ps.add(format!("{name}.pos"), normal_tensor(&[config.positions, config.width], GPT_INIT_STD, rng));
        let blocks = (0..config.blocks)
            .map(|i| GptBlock::new(ps, &format!("{name}.h{i}"), config.width, rng))
            .collect();
        let ln_f = LayerNorm::new(ps, &format!("{name}.ln_f"), config.width);
        Self { config, pos, blocks, ln_f }
    }

    /// `x` holds `rows / seq` sequences of `seq` token embeddings. Token `j` of each sequence
    /// gets position `pos_offset + j`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        x: Var,
        seq: usize,
        key_valid: &[bool],
        pos_offset: usize,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let (rows, c) = g.shape(x);
        if c != self.config.width {
            return Err(Error::shape("gpt token width", self.config.width, c));
        }
        if seq == 0 || rows % seq != 0 {
            return Err(Error::shape("gpt token rows", format!("multiple of {seq}"), rows));
        }
        if pos_offset + seq > self.config.positions {
            return Err(Error::shape("gpt token window", format!("at most {} positions", self.config.positions), pos_offset + seq));
        }
        if key_valid.len() != rows {
            return Err(Error::shape("gpt key mask", rows, key_valid.len()));
        }
        let idx = (0..rows).map(|r| pos_offset + r % seq).collect();
        let p = g.gather_rows(b.var(self.pos), idx);
        let mut h = g.add(x, p);
        h = drop.apply(g, h);
        for block in &self.blocks {
            h = block.forward(g, b, h, seq, key_valid, drop)?;
        }
        Ok(self.ln_f.forward(g, b, h))
    }

    pub fn param_ids(&self) -> Vec<usize> {
        let mut ids = vec![self.pos];
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        ids.extend(self.ln_f.param_ids());
        ids
    }
}
