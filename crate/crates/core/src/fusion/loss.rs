//! Five-step angular loss and the multi-critic actor objective.

use std::f64::consts::PI;

use super::model::{FusionNet, TokenBatch};
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::tensor::cst;
use crate::nn::{Binding, Dropout, Graph, Mlp, ParamSet, Scalar, Var};

/// Offsets `-2..=2` around each center.
pub const HALF_SPAN: usize = 2;
pub const MIN_LOSS_STEPS: usize = 2 * HALF_SPAN + 1;

/// How many times position `j` of an `l`-step window enters the double sum over centers
/// `t in [2, l-3]` and offsets `i in [-2, 2]`.
pub fn dist_cos_weights(l: usize) -> Result<Vec<f64>> {
    if l < MIN_LOSS_STEPS {
        return Err(Error::InvalidArgument(format!("angular loss needs at least {MIN_LOSS_STEPS} steps, got {l}")));
    }
    let mut w = vec![0.0; l];
    for t in HALF_SPAN..=l - 1 - HALF_SPAN {
        for x in &mut w[t - HALF_SPAN..=t + HALF_SPAN] {
            *x += 1.0;
        }
    }
    Ok(w)
}

fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
}

/// Direct evaluation of the double sum for one aligned sequence pair.
pub fn loss_dist_cos(predicted: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::shape("angular loss sequences", predicted.len(), target.len()));
    }
    let l = predicted.len();
    if l < MIN_LOSS_STEPS {
        return Err(Error::InvalidArgument(format!("angular loss needs at least {MIN_LOSS_STEPS} steps, got {l}")));
    }
    let mut total = 0.0;
    for t in HALF_SPAN..=l - 1 - HALF_SPAN {
        for j in t - HALF_SPAN..=t + HALF_SPAN {
            total += angle(predicted[j], target[j]);
        }
    }
    Ok(total)
}

/// Training windows with their target actions.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch<T> {
    pub tokens: TokenBatch<T>,
    /// Unit target actions, one per timestep (zeros on padding).
    pub targets: Vec<T>,
}

impl<T: Scalar> WindowBatch<T> {
    fn real_run(&self, w: usize) -> (usize, usize) {
        let s = self.tokens.steps;
        let real = &self.tokens.real[w * s..(w + 1) * s];
        let n = real.iter().filter(|&&r| r).count();
        (s - n, n)
    }

    /// Per-row weights of the angular loss, averaged over windows. Windows shorter than five
    /// real steps contribute nothing.
    pub fn dist_weights(&self) -> Vec<T> {
        let s = self.tokens.steps;
        let b = self.tokens.windows as f64;
        let mut out = vec![T::zero(); self.tokens.rows()];
        for w in 0..self.tokens.windows {
            let (pad, n) = self.real_run(w);
            if let Ok(ws) = dist_cos_weights(n) {
                for (j, v) in ws.into_iter().enumerate() {
                    out[w * s + pad + j] = cst(v / b);
                }
            }
        }
        out
    }

    /// `1 / windows` on every real row.
    pub fn step_weights(&self) -> Vec<T> {
        let b = self.tokens.windows as f64;
        self.tokens.real.iter().map(|&r| if r { cst(1.0 / b) } else { T::zero() }).collect()
    }
}

/// One policy's critics seen by the fused actor; several networks combine by minimum.
#[derive(Debug, Clone, Copy)]
pub struct CriticView<'a, T> {
    pub nets: &'a [(&'a Mlp, &'a ParamSet<T>)],
}

/// Loss nodes of one actor objective evaluation.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub predicted: Var,
    pub dist: Var,
    pub critic: Vec<Var>,
    pub total: Var,
}

/// `mean_b [ L_dist + sum_k -sum_t Q_k(s_t, a_hat_t) ]`. With `critic_only` the angular term
/// is left out of the total (kept in `dist` for logging).
#[allow(clippy::too_many_arguments)]
pub fn actor_objective<T: Scalar>(
    g: &mut Graph<T>,
    net: &FusionNet,
    bind: &Binding,
    batch: &WindowBatch<T>,
    critics: &[CriticView<T>],
    critic_only: bool,
    drop: &mut Dropout,
) -> Result<LossParts> {
    let rows = batch.tokens.rows();
    if batch.targets.len() != rows * ACTION_DIM {
        return Err(Error::shape("angular loss targets", rows * ACTION_DIM, batch.targets.len()));
    }
    let predicted = net.forward(g, bind, &batch.tokens, true, 0, drop)?;
    let target = g.input(rows, ACTION_DIM, batch.targets.clone());
    let dot = g.row_dot(predicted, target);
    let ang = g.acos_clamp(dot);
    let dist = g.weighted_sum(ang, batch.dist_weights());
    let mut critic = Vec::with_capacity(critics.len());
    if !critics.is_empty() {
        let s = g.input(rows, STATE_DIM, batch.tokens.states.clone());
        let x = g.concat_cols(s, predicted);
        let sw: Vec<T> = batch.step_weights().into_iter().map(|w| -w).collect();
        for view in critics {
            let mut q: Option<Var> = None;
            for (mlp, ps) in view.nets {
                let b = g.bind(ps, false);
                let qk = mlp.forward(g, &b, x)?;
                q = Some(match q {
                    None => qk,
                    Some(p) => g.min(p, qk),
                });
            }
            let q = q.ok_or_else(|| Error::InvalidArgument("critic view without networks".into()))?;
            critic.push(g.weighted_sum(q, sw.clone()));
        }
    }
    let mut total = if critic_only {
        critic.first().copied().ok_or_else(|| Error::InvalidArgument("critic-only objective needs critics".into()))?
    } else {
        dist
    };
    let skip = usize::from(critic_only);
    for &c in &critic[skip..] {
        total = g.add(total, c);
    }
    Ok(LossParts { predicted, dist, critic, total })
}

/// Loss of a sequence whose predictions are all antipodal to the targets.
pub fn antipodal_loss(l: usize) -> f64 {
    let centers = l.saturating_sub(2 * HALF_SPAN);
    (centers * MIN_LOSS_STEPS) as f64 * PI
}
