//! Multi-head self-attention and its spatial-reduction variant.
//!
//! The efficient variant keeps queries at full resolution and builds keys and
//! values from a token sequence whose `R×R` spatial blocks have been folded
//! into single tokens of width `C·R²` and projected back to `C`. With `N`
//! query tokens this cuts the score matrix from `N×N` to `N×N/R²`.

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, Init};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Spatial reduction ratio `R` applied per grid side.
    pub reduction: usize,
    /// LayerNorm on the reduced sequence before the K/V projections.
    pub reduction_norm: bool,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, reduction: usize) -> Self {
        AttentionConfig {
            channels,
            heads,
            reduction,
            reduction_norm: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn check_grid(&self, (h, w): (usize, usize)) -> Result<()> {
        if h % self.reduction != 0 || w % self.reduction != 0 {
            return Err(Error::dim(
                "efficient_self_attention",
                format!(
                    "{h}x{w} grid not divisible by reduction ratio {}",
                    self.reduction
                ),
            ));
        }
        Ok(())
    }
}

/// Folds each `R×R` block of a `[B, H·W, C]` token grid into one token of
/// width `C·R²` (row-major block order, channels fastest), then applies the
/// projection `w: [C·R², Cout]`.
pub fn spatial_reduce<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    (h, w): (usize, usize),
    ratio: usize,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let grouped = group_blocks(tape, x, (h, w), ratio)?;
    tape.linear(grouped, weight, bias)
}

fn group_blocks<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    (h, w): (usize, usize),
    r: usize,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::dim(
            "spatial_reduce",
            format!("tokens {s:?} do not form a {h}x{w} grid"),
        ));
    }
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::dim(
            "spatial_reduce",
            format!("{h}x{w} grid not divisible by ratio {r}"),
        ));
    }
    let (b, c) = (s[0], s[2]);
    let t = tape.reshape(x, &[b, h / r, r, w / r, r, c])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[b, (h / r) * (w / r), r * r * c])
}

/// Splits channels into heads: `[B, N, C] -> [B, heads, N, C/heads]`.
fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(t, &[0, 2, 1, 3])
}

/// Attention probabilities `softmax(QKᵀ/√d)`: `[B, heads, N, M]`.
pub fn attention_probs<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, heads: usize) -> Result<Var> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || sq[2] % heads != 0 {
        return Err(Error::shapes("attention", &sq, &sk));
    }
    let d = sq[2] / heads;
    let qh = split_heads(tape, q, heads)?;
    let kt = tape.reshape(k, &[sk[0], sk[1], heads, d])?;
    let kt = tape.permute(kt, &[0, 2, 3, 1])?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    tape.softmax(scores, 3)
}

/// `softmax(QKᵀ/√d)·V` per head, heads re-merged: `[B, N, C]`.
pub fn scaled_dot_product<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let probs = attention_probs(tape, q, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let out = tape.matmul(probs, vh)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let s = tape.shape(q).to_vec();
    tape.reshape(out, &s)
}

/// Q/K/V/output projections shared by both attention variants.
#[derive(Clone, Debug)]
pub struct Projections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Projections {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, heads: usize) -> Self {
        Projections {
            q: Linear::new(&mut init.scope("q"), channels, channels),
            k: Linear::new(&mut init.scope("k"), channels, channels),
            v: Linear::new(&mut init.scope("v"), channels, channels),
            proj: Linear::new(&mut init.scope("proj"), channels, channels),
            heads,
        }
    }

    /// Queries from `x`, keys and values from `kv`.
    pub fn attend<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, kv: Var) -> Result<Var> {
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, kv)?;
        let v = self.v.forward(tape, p, kv)?;
        let o = scaled_dot_product(tape, q, k, v, self.heads)?;
        self.proj.forward(tape, p, o)
    }
}

/// Plain multi-head self-attention over all `N` tokens.
#[derive(Clone, Debug)]
pub struct StandardMhsa {
    pub proj: Projections,
}

impl StandardMhsa {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(StandardMhsa {
            proj: Projections::new(init, cfg.channels, cfg.heads),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.proj.attend(tape, p, x, x)
    }
}

/// Block-fold + linear projection back to `C`, optionally followed by LayerNorm.
#[derive(Clone, Debug)]
pub struct SpatialReduction {
    pub ratio: usize,
    pub linear: Linear,
    pub norm: Option<LayerNorm>,
}

impl SpatialReduction {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        channels: usize,
        ratio: usize,
        with_norm: bool,
    ) -> Self {
        SpatialReduction {
            ratio,
            linear: Linear::new(&mut init.scope("sr"), channels * ratio * ratio, channels),
            norm: with_norm.then(|| LayerNorm::new(&mut init.scope("sr_norm"), channels)),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let w = p[self.linear.weight];
        let b = self.linear.bias.map(|b| p[b]);
        let y = spatial_reduce(tape, x, grid, self.ratio, w, b)?;
        match &self.norm {
            Some(n) => n.forward(tape, p, y),
            None => Ok(y),
        }
    }
}

/// Spatial-reduction self-attention.
#[derive(Clone, Debug)]
pub struct EfficientSelfAttention {
    pub cfg: AttentionConfig,
    pub proj: Projections,
    pub reduction: SpatialReduction,
}

impl EfficientSelfAttention {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(EfficientSelfAttention {
            cfg: *cfg,
            proj: Projections::new(init, cfg.channels, cfg.heads),
            reduction: SpatialReduction::new(init, cfg.channels, cfg.reduction, cfg.reduction_norm),
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        self.cfg.check_grid(grid)?;
        let kv = self.reduction.forward(tape, p, x, grid)?;
        self.proj.attend(tape, p, x, kv)
    }
}
