//! Transformer block and the layers that change token-grid resolution.

use crate::attention::{AttentionConfig, EfficientSelfAttention};
use crate::error::{Error, Result};
use crate::ffn::{FfnConfig, MixFfn};
use crate::layers::{grid_to_tokens, tokens_to_grid, Conv2d, LayerNorm, Linear};
use crate::params::{Bound, Init};
use crate::tensor::{Real, Tape, Var};

/// `x1 = x + Attn(LN(x))`, then the FFN with its own outer residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm: LayerNorm,
    pub attn: EfficientSelfAttention,
    pub ffn: MixFfn,
}

impl TransformerBlock {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        attn: &AttentionConfig,
        ffn: FfnConfig,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm: LayerNorm::new(&mut init.scope("norm"), attn.channels),
            attn: EfficientSelfAttention::new(&mut init.scope("attn"), attn)?,
            ffn: MixFfn::new(&mut init.scope("ffn"), ffn)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let n = self.norm.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, n, grid)?;
        let x1 = tape.add(x, a)?;
        self.ffn.forward(tape, p, x1, grid)
    }
}

/// Convolution over the token grid followed by LayerNorm on the output tokens.
#[derive(Clone, Debug)]
pub struct ConvDown {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDown {
    fn new<T: Real>(
        init: &mut Init<'_, T>,
        cin: usize,
        cout: usize,
        (kernel, stride, pad): (usize, usize, usize),
    ) -> Self {
        ConvDown {
            conv: Conv2d::new(&mut init.scope("proj"), cin, cout, kernel, stride, pad),
            norm: LayerNorm::new(&mut init.scope("norm"), cout),
            kernel,
            stride,
            pad,
        }
    }

    /// Overlapping patch embedding: 7×7 conv, stride 4, padding 3.
    pub fn embed<T: Real>(init: &mut Init<'_, T>, cin: usize, cout: usize) -> Self {
        Self::new(init, cin, cout, (7, 4, 3))
    }

    /// Downsampling between encoder stages: 3×3 conv, stride 2, padding 1.
    pub fn merge<T: Real>(init: &mut Init<'_, T>, cin: usize, cout: usize) -> Self {
        Self::new(init, cin, cout, (3, 2, 1))
    }

    /// `[B, C, H, W]` image to `[B, (H/s)(W/s), Cout]` tokens; returns the new grid.
    pub fn forward_image<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        img: Var,
    ) -> Result<(Var, (usize, usize))> {
        let s = tape.shape(img).to_vec();
        if s.len() != 4 || s[2] % self.stride != 0 || s[3] % self.stride != 0 {
            return Err(Error::dim(
                "patch_embed",
                format!(
                    "input {s:?} is not an image with sides divisible by {}",
                    self.stride
                ),
            ));
        }
        let y = self.conv.forward(tape, p, img)?;
        let grid = (tape.shape(y)[2], tape.shape(y)[3]);
        let t = grid_to_tokens(tape, y)?;
        Ok((self.norm.forward(tape, p, t)?, grid))
    }

    /// Tokens on `grid` to tokens on the downsampled grid.
    pub fn forward_tokens<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<(Var, (usize, usize))> {
        if grid.0 % self.stride != 0 || grid.1 % self.stride != 0 {
            return Err(Error::dim(
                "patch_merge",
                format!(
                    "{}x{} grid not divisible by stride {}",
                    grid.0, grid.1, self.stride
                ),
            ));
        }
        let img = tokens_to_grid(tape, x, grid)?;
        self.forward_image(tape, p, img)
    }
}

/// Linear map to `scale²·Cout` channels, each token's vector unfolded into
/// a `scale×scale` block (row-major positions, channels contiguous), then
/// LayerNorm.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub linear: Linear,
    pub norm: LayerNorm,
    pub scale: usize,
    pub cout: usize,
}

impl PatchExpand {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cin: usize, cout: usize, scale: usize) -> Self {
        PatchExpand {
            linear: Linear::new(&mut init.scope("expand"), cin, scale * scale * cout),
            norm: LayerNorm::new(&mut init.scope("norm"), cout),
            scale,
            cout,
        }
    }

    /// ×2 expansion halving the channel count.
    pub fn halving<T: Real>(init: &mut Init<'_, T>, cin: usize) -> Result<Self> {
        if cin % 2 != 0 {
            return Err(Error::Config(format!(
                "patch expand needs even channels, got {cin}"
            )));
        }
        Ok(Self::new(init, cin, cin / 2, 2))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<(Var, (usize, usize))> {
        let y = self.linear.forward(tape, p, x)?;
        let y = unfold_blocks(tape, y, grid, self.scale, self.cout)?;
        let out_grid = (grid.0 * self.scale, grid.1 * self.scale);
        Ok((self.norm.forward(tape, p, y)?, out_grid))
    }
}

/// `[B, H·W, s²·C]` to `[B, (sH)(sW), C]`: channel block `(i·s + j)·C..`
/// of token `(y, x)` lands at pixel `(s·y + i, s·x + j)`.
pub fn unfold_blocks<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    (h, w): (usize, usize),
    s: usize,
    c: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != h * w || shape[2] != s * s * c {
        return Err(Error::dim(
            "patch_expand",
            format!(
                "tokens {shape:?} do not match a {h}x{w} grid with {s}x{s} blocks of {c} channels"
            ),
        ));
    }
    let b = shape[0];
    let t = tape.reshape(x, &[b, h, w, s, s, c])?;
    let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(t, &[b, h * s * w * s, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{check_module, jitter, random_tensor};
    use crate::params::ParamStore;
    use crate::tensor::{GradCheckConfig, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with<M>(seed: u64, f: impl FnOnce(&mut Init<'_, f64>) -> M) -> (ParamStore<f64>, M) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = f(&mut Init::new(&mut store, &mut rng));
        (store, m)
    }

    fn block(
        seed: u64,
        c: usize,
        heads: usize,
        r: usize,
        steps: usize,
    ) -> (ParamStore<f64>, TransformerBlock) {
        store_with(seed, |init| {
            TransformerBlock::new(
                init,
                &AttentionConfig::new(c, heads, r),
                FfnConfig::new(c, steps),
            )
            .unwrap()
        })
    }

    #[test]
    fn zeroed_last_projections_make_block_identity() {
        let (mut store, blk) = block(1, 8, 2, 2, 3);
        store.zero_matching("attn.proj.weight");
        store.zero_matching("ffn.fc2.weight");
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[2, 16, 8], 2));
        let y = blk.forward(&mut tape, &p, x, (4, 4)).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn block_gradients() {
        let (mut store, blk) = block(3, 8, 2, 2, 1);
        jitter(&mut store, 0.3, 4);
        let cfg = GradCheckConfig {
            max_coords: Some(64),
            ..Default::default()
        };
        let r = check_module(&store, &[random_tensor(&[1, 16, 8], 5)], &cfg, |t, p, v| {
            blk.forward(t, p, v[0], (4, 4))
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn embed_shapes_shift_and_constant_input() {
        let (store, emb) = store_with(6, |init| ConvDown::embed(init, 3, 8));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = random_tensor(&[1, 3, 64, 64], 7);
        let x = tape.constant(img.clone());
        let (y, grid) = emb.forward_image(&mut tape, &p, x).unwrap();
        assert_eq!(grid, (16, 16));
        assert_eq!(tape.shape(y), &[1, 256, 8]);

        let shifted = Tensor::from_fn(vec![1, 3, 64, 64], |i| {
            let (plane, col) = (i / 64, i % 64);
            img.data()[plane * 64 + (col + 63) % 64]
        });
        let xs = tape.constant(shifted);
        let (ys, _) = emb.forward_image(&mut tape, &p, xs).unwrap();
        assert!(tape.value(ys).max_abs_diff(tape.value(y)) > 1e-6);

        let c = tape.constant(Tensor::full(vec![1, 3, 64, 64], 0.7));
        let (yc, _) = emb.forward_image(&mut tape, &p, c).unwrap();
        let d = tape.data(yc);
        let token = |gy: usize, gx: usize| &d[(gy * 16 + gx) * 8..(gy * 16 + gx + 1) * 8];
        for gy in 1..15 {
            for gx in 1..15 {
                for (a, b) in token(gy, gx).iter().zip(token(1, 1)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        let odd = tape.constant(Tensor::zeros(vec![1, 3, 30, 30]));
        assert!(emb.forward_image(&mut tape, &p, odd).is_err());
    }

    #[test]
    fn merge_halves_grid() {
        let (mut store, merge) = store_with(8, |init| ConvDown::merge(init, 8, 16));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[1, 64, 8], 9));
        let (y, grid) = merge.forward_tokens(&mut tape, &p, x, (8, 8)).unwrap();
        assert_eq!(grid, (4, 4));
        assert_eq!(tape.shape(y), &[1, 16, 16]);
        let odd = tape.constant(random_tensor(&[1, 15, 8], 9));
        assert!(merge.forward_tokens(&mut tape, &p, odd, (5, 3)).is_err());

        jitter(&mut store, 0.3, 10);
        let cfg = GradCheckConfig {
            max_coords: Some(128),
            ..Default::default()
        };
        let r = check_module(
            &store,
            &[random_tensor(&[1, 16, 8], 11)],
            &cfg,
            |t, p, v| Ok(merge.forward_tokens(t, p, v[0], (4, 4))?.0),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn expand_shapes_and_locality() {
        let (store, up) = store_with(12, |init| PatchExpand::halving(init, 16).unwrap());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[1, 16, 16], 13));
        let (y, grid) = up.forward(&mut tape, &p, x, (4, 4)).unwrap();
        assert_eq!(grid, (8, 8));
        assert_eq!(tape.shape(y), &[1, 64, 8]);
        assert!(store_with(0, |init| PatchExpand::halving(init, 7))
            .1
            .is_err());
    }

    fn locality_probe(scale: usize) {
        let (h, w, c) = (3, 2, 2);
        for src in 0..h * w {
            let mut tape = Tape::<f64>::new();
            let x = Tensor::from_fn(vec![1, h * w, scale * scale * c], |i| {
                if i / (scale * scale * c) == src {
                    1.0 + i as f64
                } else {
                    0.0
                }
            });
            let x = tape.constant(x);
            let y = unfold_blocks(&mut tape, x, (h, w), scale, c).unwrap();
            let ow = w * scale;
            for (pix, v) in tape.data(y).chunks(c).enumerate() {
                let (py, px) = (pix / ow, pix % ow);
                let owner = (py / scale) * w + px / scale;
                if owner != src {
                    assert!(v.iter().all(|&a| a == 0.0));
                } else {
                    let slot = (py % scale) * scale + px % scale;
                    let base = src * scale * scale * c + slot * c;
                    for (k, &a) in v.iter().enumerate() {
                        assert_eq!(a, 1.0 + (base + k) as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn expand_blocks_depend_only_on_their_source_token() {
        locality_probe(2);
        locality_probe(4);
    }

    #[test]
    fn final_expand_shapes_and_gradients() {
        let (mut store, up) = store_with(14, |init| PatchExpand::new(init, 8, 8, 4));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[1, 256, 8], 15));
        let (y, grid) = up.forward(&mut tape, &p, x, (16, 16)).unwrap();
        assert_eq!(grid, (64, 64));
        assert_eq!(tape.shape(y), &[1, 4096, 8]);

        jitter(&mut store, 0.3, 16);
        let cfg = GradCheckConfig {
            max_coords: Some(128),
            ..Default::default()
        };
        let r = check_module(&store, &[random_tensor(&[1, 4, 8], 17)], &cfg, |t, p, v| {
            Ok(up.forward(t, p, v[0], (2, 2))?.0)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn expand_then_average_is_lossy() {
        let (store, up) = store_with(18, |init| PatchExpand::halving(init, 8).unwrap());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random_tensor(&[1, 4, 8], 19));
        let (y, _) = up.forward(&mut tape, &p, x, (2, 2)).unwrap();
        // average each 2x2 block back to one token and duplicate channels to width 8
        let d = tape.data(y);
        let mut back = vec![0.0; 4 * 8];
        for pix in 0..16 {
            let (py, px) = (pix / 4, pix % 4);
            let tok = (py / 2) * 2 + px / 2;
            for k in 0..4 {
                back[tok * 8 + k] += d[pix * 4 + k] / 4.0;
                back[tok * 8 + 4 + k] += d[pix * 4 + k] / 4.0;
            }
        }
        let orig = tape.data(x);
        let diff = back
            .iter()
            .zip(orig)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3);
    }
}
