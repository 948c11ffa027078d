//! Parameterized building blocks shared by every module of the network.

use crate::error::Result;
use crate::params::{Bound, Init, ParamId, INIT_STD};
use crate::tensor::{Real, Tape, Var};

/// LayerNorm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cin: usize, cout: usize) -> Self {
        Linear {
            weight: init.trunc_normal("weight", &[cin, cout], INIT_STD),
            bias: Some(init.zeros("bias", &[cout])),
            cin,
            cout,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<'_, T>, dim: usize) -> Self {
        LayerNorm {
            gamma: init.ones("gamma", &[dim]),
            beta: init.zeros("beta", &[dim]),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// 3×3 depthwise convolution, stride 1, same padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize) -> Self {
        DepthwiseConv {
            kernel: init.trunc_normal("kernel", &[channels, 3, 3], INIT_STD),
            bias: init.zeros("bias", &[channels]),
            channels,
        }
    }

    /// Applies the convolution to tokens `[B, H·W, C]` laid out row-major over
    /// the `(h, w)` grid; returns tokens of the same shape.
    pub fn forward_tokens<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        (h, w): (usize, usize),
    ) -> Result<Var> {
        let grid = tokens_to_grid(tape, x, (h, w))?;
        let y = tape.depthwise_conv2d(grid, p[self.kernel], p[self.bias])?;
        grid_to_tokens(tape, y)
    }
}

/// Dense convolution layer with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            weight: init.trunc_normal("weight", &[cout, cin, kernel, kernel], INIT_STD),
            bias: init.zeros("bias", &[cout]),
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], p[self.bias], self.stride, self.pad)
    }
}

/// `[B, H·W, C]` tokens to a `[B, C, H, W]` grid.
pub fn tokens_to_grid<T: Real>(tape: &mut Tape<T>, x: Var, (h, w): (usize, usize)) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(crate::Error::dim(
            "tokens_to_grid",
            format!("tokens {s:?} do not form a {h}x{w} grid"),
        ));
    }
    let t = tape.permute(x, &[0, 2, 1])?;
    tape.reshape(t, &[s[0], s[2], h, w])
}

/// `[B, C, H, W]` grid to `[B, H·W, C]` tokens.
pub fn grid_to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let t = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.permute(t, &[0, 2, 1])
}
