//! Multi-scale context bridge.
//!
//! Selected encoder features `F_i: [B, N_i, C_i]` are folded to the common
//! width `C_1` (each token of width `C_i` becomes `C_i/C_1` tokens), joined
//! into one sequence, and passed through `d` layers of
//!
//! ```text
//! a      = LN(merged)
//! res    = LN(Attn(a) + merged)
//! out    = concat_i(FFN_i(split_i(res))) + res
//! ```
//!
//! Attention queries cover the whole sequence; keys and values come from each
//! segment reduced on its own grid with its stage's ratio. Each `FFN_i` runs
//! on the native `(H_i, W_i, C_i)` grid without an inner residual.

use crate::attention::{Projections, SpatialReduction};
use crate::error::{Error, Result};
use crate::ffn::{FfnConfig, FfnVariant, MixFfn};
use crate::layers::LayerNorm;
use crate::params::{Bound, Init};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    /// Zero-based pyramid level.
    pub stage: usize,
    pub grid: (usize, usize),
    pub channels: usize,
    /// Spatial reduction ratio applied to this segment's keys and values.
    pub reduction: usize,
}

impl Segment {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Where each selected pyramid level sits in the merged sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BridgeLayout {
    pub width: usize,
    pub segments: Vec<Segment>,
}

impl BridgeLayout {
    pub fn new(width: usize, segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("bridge needs at least one stage".into()));
        }
        for s in &segments {
            if width == 0 || s.channels % width != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} not divisible by bridge width {width}",
                    s.stage + 1,
                    s.channels
                )));
            }
            if s.reduction == 0 || s.grid.0 % s.reduction != 0 || s.grid.1 % s.reduction != 0 {
                return Err(Error::Config(format!(
                    "stage {} grid {}x{} not divisible by reduction {}",
                    s.stage + 1,
                    s.grid.0,
                    s.grid.1,
                    s.reduction
                )));
            }
        }
        Ok(BridgeLayout { width, segments })
    }

    /// Merged-sequence length of each segment.
    pub fn lengths(&self) -> Vec<usize> {
        self.segments
            .iter()
            .map(|s| s.tokens() * s.channels / self.width)
            .collect()
    }

    /// Start offset of each segment followed by the total length.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = vec![0];
        for l in self.lengths() {
            out.push(out.last().unwrap() + l);
        }
        out
    }

    pub fn total(&self) -> usize {
        self.lengths().iter().sum()
    }

    /// Joins the selected levels of `pyramid` into `[B, total, width]`.
    pub fn pack<T: Real>(&self, tape: &mut Tape<T>, pyramid: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.segments.len());
        for (s, len) in self.segments.iter().zip(self.lengths()) {
            let f = *pyramid.get(s.stage).ok_or_else(|| {
                Error::dim(
                    "bridge_pack",
                    format!("pyramid has no level {}", s.stage + 1),
                )
            })?;
            let shape = tape.shape(f).to_vec();
            if shape.len() != 3 || shape[1] != s.tokens() || shape[2] != s.channels {
                return Err(Error::dim(
                    "bridge_pack",
                    format!(
                        "level {} is {shape:?}, expected [B, {}, {}]",
                        s.stage + 1,
                        s.tokens(),
                        s.channels
                    ),
                ));
            }
            parts.push(tape.reshape(f, &[shape[0], len, self.width])?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat(&parts, 1)
    }

    /// Splits a merged sequence back into `[B, N_i, C_i]` per segment.
    pub fn unpack<T: Real>(&self, tape: &mut Tape<T>, merged: Var) -> Result<Vec<Var>> {
        let b = tape.shape(merged)[0];
        let parts = if self.segments.len() == 1 {
            vec![merged]
        } else {
            tape.split(merged, 1, &self.lengths())?
        };
        parts
            .into_iter()
            .zip(&self.segments)
            .map(|(v, s)| tape.reshape(v, &[b, s.tokens(), s.channels]))
            .collect()
    }

    /// Folds a native-width segment tensor `[B, n, C_i]` to `[B, n·C_i/width, width]`.
    fn fold<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        tape.reshape(x, &[s[0], s[1] * s[2] / self.width, self.width])
    }
}

#[derive(Clone, Debug)]
pub struct BridgeLayer {
    pub norm1: LayerNorm,
    pub reductions: Vec<SpatialReduction>,
    pub attn: Projections,
    pub norm2: LayerNorm,
    pub ffns: Vec<MixFfn>,
}

impl BridgeLayer {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        layout: &BridgeLayout,
        heads: usize,
        steps: usize,
        variant: FfnVariant,
    ) -> Result<Self> {
        let c = layout.width;
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!(
                "bridge width {c} not divisible by {heads} heads"
            )));
        }
        let norm1 = LayerNorm::new(&mut init.scope("norm1"), c);
        let reductions = layout
            .segments
            .iter()
            .map(|s| {
                SpatialReduction::new(
                    &mut init.scope(format!("kv{}", s.stage + 1)),
                    s.channels,
                    s.reduction,
                    true,
                )
            })
            .collect();
        let attn = Projections::new(&mut init.scope("attn"), c, heads);
        let norm2 = LayerNorm::new(&mut init.scope("norm2"), c);
        let ffns = layout
            .segments
            .iter()
            .map(|s| {
                let cfg = FfnConfig::new(s.channels, steps).with_variant(variant);
                MixFfn::new(&mut init.scope(format!("ffn{}", s.stage + 1)), cfg)
            })
            .collect::<Result<_>>()?;
        Ok(BridgeLayer {
            norm1,
            reductions,
            attn,
            norm2,
            ffns,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        layout: &BridgeLayout,
        merged: Var,
    ) -> Result<Var> {
        let a = self.norm1.forward(tape, p, merged)?;
        let native = layout.unpack(tape, a)?;
        let mut kv = Vec::with_capacity(native.len());
        for ((x, seg), red) in native
            .into_iter()
            .zip(&layout.segments)
            .zip(&self.reductions)
        {
            let r = red.forward(tape, p, x, seg.grid)?;
            kv.push(layout.fold(tape, r)?);
        }
        let kv = if kv.len() == 1 {
            kv[0]
        } else {
            tape.concat(&kv, 1)?
        };
        let att = self.attn.attend(tape, p, a, kv)?;
        let sum = tape.add(att, merged)?;
        let res = self.norm2.forward(tape, p, sum)?;

        let native = layout.unpack(tape, res)?;
        let mut outs = Vec::with_capacity(native.len());
        for ((x, seg), ffn) in native.into_iter().zip(&layout.segments).zip(&self.ffns) {
            let y = ffn.core(tape, p, x, seg.grid)?;
            outs.push(layout.fold(tape, y)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        tape.add(joined, res)
    }
}

#[derive(Clone, Debug)]
pub struct ContextBridge {
    pub layout: BridgeLayout,
    pub layers: Vec<BridgeLayer>,
}

impl ContextBridge {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        layout: BridgeLayout,
        depth: usize,
        heads: usize,
        steps: usize,
        variant: FfnVariant,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                BridgeLayer::new(
                    &mut init.scope(format!("layer{i}")),
                    &layout,
                    heads,
                    steps,
                    variant,
                )
            })
            .collect::<Result<_>>()?;
        Ok(ContextBridge { layout, layers })
    }

    /// Runs every layer over the packed pyramid; levels outside the layout
    /// pass through unchanged.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pyramid: &[Var],
    ) -> Result<Vec<Var>> {
        if self.layers.is_empty() {
            return Ok(pyramid.to_vec());
        }
        let mut t = self.layout.pack(tape, pyramid)?;
        for layer in &self.layers {
            t = layer.forward(tape, p, &self.layout, t)?;
        }
        let parts = self.layout.unpack(tape, t)?;
        let mut out = pyramid.to_vec();
        for (v, s) in parts.into_iter().zip(&self.layout.segments) {
            out[s.stage] = v;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{check_module, jitter, random_tensor};
    use crate::params::ParamStore;
    use crate::tensor::GradCheckConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOY: [(usize, usize, usize); 4] = [(16, 8, 8), (8, 16, 4), (4, 40, 2), (2, 64, 1)];

    fn toy_layout(stages: &[usize]) -> BridgeLayout {
        let segs = stages
            .iter()
            .map(|&i| Segment {
                stage: i,
                grid: (TOY[i].0, TOY[i].0),
                channels: TOY[i].1,
                reduction: TOY[i].2,
            })
            .collect();
        BridgeLayout::new(8, segs).unwrap()
    }

    fn pyramid(tape: &mut Tape<f64>, seed: u64) -> Vec<Var> {
        TOY.iter()
            .enumerate()
            .map(|(i, &(g, c, _))| tape.constant(random_tensor(&[1, g * g, c], seed + i as u64)))
            .collect()
    }

    fn bridge(layout: BridgeLayout, depth: usize, seed: u64) -> (ParamStore<f64>, ContextBridge) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = ContextBridge::new(
            &mut Init::new(&mut store, &mut rng),
            layout,
            depth,
            1,
            1,
            FfnVariant::Enhanced,
        )
        .unwrap();
        (store, b)
    }

    #[test]
    fn toy_segment_lengths() {
        let l = toy_layout(&[0, 1, 2, 3]);
        assert_eq!(l.lengths(), vec![256, 128, 80, 32]);
        assert_eq!(l.total(), 496);
        assert_eq!(l.boundaries(), vec![0, 256, 384, 464, 496]);
    }

    #[test]
    fn indivisible_channels_rejected() {
        let seg = Segment {
            stage: 0,
            grid: (2, 2),
            channels: 12,
            reduction: 1,
        };
        assert!(BridgeLayout::new(8, vec![seg]).unwrap_err().is_config());
    }

    #[test]
    fn pack_unpack_round_trip() {
        for stages in [&[0, 1, 2, 3][..], &[1, 2, 3], &[2, 3], &[3]] {
            let l = toy_layout(stages);
            let mut tape = Tape::new();
            let pyr = pyramid(&mut tape, 1);
            let m = l.pack(&mut tape, &pyr).unwrap();
            assert_eq!(tape.shape(m), &[1, l.total(), 8]);
            let back = l.unpack(&mut tape, m).unwrap();
            for (v, s) in back.iter().zip(&l.segments) {
                assert_eq!(tape.data(*v), tape.data(pyr[s.stage]));
            }
        }
    }

    #[test]
    fn single_stage_pack_is_reshape() {
        let l = toy_layout(&[3]);
        let mut tape = Tape::new();
        let pyr = pyramid(&mut tape, 2);
        let m = l.pack(&mut tape, &pyr).unwrap();
        assert_eq!(tape.shape(m), &[1, 32, 8]);
        assert_eq!(tape.data(m), tape.data(pyr[3]));
    }

    #[test]
    fn zero_paths_reduce_layer_to_norm_of_input() {
        let l = toy_layout(&[0, 1, 2, 3]);
        let (mut store, b) = bridge(l.clone(), 1, 3);
        store.zero_matching("attn.proj.weight");
        store.zero_matching("fc2.weight");
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let pyr = pyramid(&mut tape, 4);
        let m = l.pack(&mut tape, &pyr).unwrap();
        let y = b.layers[0].forward(&mut tape, &p, &l, m).unwrap();
        assert_eq!(tape.shape(y), tape.shape(m));
        let want = b.layers[0].norm1.forward(&mut tape, &p, m).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn forward_preserves_shapes_for_every_subset() {
        for stages in [&[0, 1, 2, 3][..], &[1, 2, 3], &[2, 3], &[3]] {
            let (store, b) = bridge(toy_layout(stages), 2, 5);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let pyr = pyramid(&mut tape, 6);
            let out = b.forward(&mut tape, &p, &pyr).unwrap();
            for (a, o) in pyr.iter().zip(&out) {
                assert_eq!(tape.shape(*a), tape.shape(*o));
            }
        }
    }

    #[test]
    fn zero_depth_is_identity() {
        let (store, b) = bridge(toy_layout(&[0, 1, 2, 3]), 0, 7);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let pyr = pyramid(&mut tape, 8);
        assert_eq!(b.forward(&mut tape, &p, &pyr).unwrap(), pyr);
    }

    #[test]
    fn deepest_level_reaches_first_segment() {
        let l = toy_layout(&[0, 1, 2, 3]);
        let (store, b) = bridge(l.clone(), 1, 9);
        let run = |bump: f64| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let mut pyr = pyramid(&mut tape, 10);
            let mut f4 = tape.value(pyr[3]).clone();
            f4.data_mut()[5] += bump;
            pyr[3] = tape.constant(f4);
            let m = l.pack(&mut tape, &pyr).unwrap();
            let y = b.layers[0].forward(&mut tape, &p, &l, m).unwrap();
            tape.data(y)[..256 * 8].to_vec()
        };
        let (a, c) = (run(0.0), run(1e-3));
        let diff = a
            .iter()
            .zip(&c)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff >= 1e-8, "max change {diff}");
    }

    #[test]
    fn layer_gradients_on_small_pyramid() {
        let segs = vec![
            Segment {
                stage: 0,
                grid: (4, 4),
                channels: 2,
                reduction: 2,
            },
            Segment {
                stage: 1,
                grid: (2, 2),
                channels: 4,
                reduction: 1,
            },
        ];
        let l = BridgeLayout::new(2, segs).unwrap();
        let (mut store, b) = bridge(l.clone(), 1, 11);
        jitter(&mut store, 0.3, 12);
        let inputs = [
            random_tensor(&[1, 16, 2], 13),
            random_tensor(&[1, 4, 4], 14),
        ];
        let cfg = GradCheckConfig {
            max_coords: Some(32),
            ..Default::default()
        };
        let r = check_module(&store, &inputs, &cfg, |t, p, v| {
            let out = b.forward(t, p, v)?;
            l.pack(t, &out)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
