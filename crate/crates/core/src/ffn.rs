//! Feed-forward networks with a depthwise convolution between the two
//! fully-connected layers.
//!
//! `Enhanced` wraps the convolution in a skip connection and LayerNorm and
//! repeats the skip+norm `m` times, each step with its own LayerNorm:
//!
//! ```text
//! u   = FC1(x)
//! y_1 = LN_1(u + DWConv(u))
//! y_i = LN_i(u + y_{i-1})          i = 2..m
//! out = FC2(GELU(y_m)) + x
//! ```
//!
//! `Mix` is the plain variant `FC2(GELU(DWConv(FC1(x)))) + x` used by the
//! baseline model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{DepthwiseConv, LayerNorm, Linear};
use crate::params::{Bound, Init};
use crate::tensor::{Real, Tape, Var};

/// Hidden width multiplier of FC1.
pub const EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FfnVariant {
    #[default]
    Enhanced,
    Mix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnConfig {
    pub channels: usize,
    pub hidden: usize,
    pub steps: usize,
    pub variant: FfnVariant,
}

impl FfnConfig {
    pub fn new(channels: usize, steps: usize) -> Self {
        FfnConfig {
            channels,
            hidden: EXPANSION * channels,
            steps,
            variant: FfnVariant::Enhanced,
        }
    }

    pub fn with_variant(mut self, variant: FfnVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (c, e) = (self.channels, self.hidden);
        let norms = match self.variant {
            FfnVariant::Enhanced => self.steps * 2 * e,
            FfnVariant::Mix => 0,
        };
        (c * e + e) + (9 * e + e) + norms + (e * c + c)
    }
}

#[derive(Clone, Debug)]
pub struct MixFfn {
    pub cfg: FfnConfig,
    pub fc1: Linear,
    pub dw: DepthwiseConv,
    pub norms: Vec<LayerNorm>,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: FfnConfig) -> Result<Self> {
        if cfg.variant == FfnVariant::Enhanced && cfg.steps == 0 {
            return Err(Error::Config("recursive steps must be at least 1".into()));
        }
        let fc1 = Linear::new(&mut init.scope("fc1"), cfg.channels, cfg.hidden);
        let dw = DepthwiseConv::new(&mut init.scope("dwconv"), cfg.hidden);
        let norms = match cfg.variant {
            FfnVariant::Enhanced => (0..cfg.steps)
                .map(|i| LayerNorm::new(&mut init.scope(format!("norm{}", i + 1)), cfg.hidden))
                .collect(),
            FfnVariant::Mix => Vec::new(),
        };
        let fc2 = Linear::new(&mut init.scope("fc2"), cfg.hidden, cfg.channels);
        Ok(MixFfn {
            cfg,
            fc1,
            dw,
            norms,
            fc2,
        })
    }

    /// Output of every skip+norm step `y_1..y_m`, followed by the final
    /// `FC2(GELU(y_m))` without the outer residual.
    pub fn trace<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<(Vec<Var>, Var)> {
        let u = self.fc1.forward(tape, p, x)?;
        let d = self.dw.forward_tokens(tape, p, u, grid)?;
        let mut steps = Vec::with_capacity(self.norms.len());
        let mut y = d;
        for (i, norm) in self.norms.iter().enumerate() {
            let s = if i == 0 {
                tape.add(u, d)?
            } else {
                tape.add(u, y)?
            };
            y = norm.forward(tape, p, s)?;
            steps.push(y);
        }
        let a = tape.gelu(y);
        let out = self.fc2.forward(tape, p, a)?;
        Ok((steps, out))
    }

    /// The map without its outer residual.
    pub fn core<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        Ok(self.trace(tape, p, x, grid)?.1)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let y = self.core(tape, p, x, grid)?;
        tape.add(y, x)
    }

    /// Single-step form `FC2(GELU(LN(DWConv(u) + u))) + x`, evaluated with
    /// the first step's LayerNorm.
    pub fn forward_single_step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let norm = self
            .norms
            .first()
            .ok_or_else(|| Error::Config("single-step form needs the enhanced variant".into()))?;
        let u = self.fc1.forward(tape, p, x)?;
        let conv = self.dw.forward_tokens(tape, p, u, grid)?;
        let s = tape.add(conv, u)?;
        let y1 = norm.forward(tape, p, s)?;
        let a = tape.gelu(y1);
        let out = self.fc2.forward(tape, p, a)?;
        tape.add(out, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{grad_check, GradCheckConfig, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: FfnConfig, seed: u64) -> (ParamStore<f64>, MixFfn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ffn = MixFfn::new(&mut Init::new(&mut store, &mut rng), cfg).unwrap();
        (store, ffn)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_fc2_is_identity() {
        for steps in 1..=3 {
            let (mut store, ffn) = build(FfnConfig::new(4, steps), 1);
            store.zero_matching("fc2.weight");
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.constant(random(&[2, 16, 4], 2));
            let y = ffn.forward(&mut tape, &p, x, (4, 4)).unwrap();
            assert_eq!(tape.data(y), tape.data(x));
        }
    }

    #[test]
    fn center_kernel_doubles_input_to_norm() {
        let (mut store, ffn) = build(FfnConfig::new(2, 1), 3);
        let k = store.get_mut(ffn.dw.kernel);
        k.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i % 9 == 4 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random(&[1, 9, 2], 4));
        let (steps, _) = ffn.trace(&mut tape, &p, x, (3, 3)).unwrap();
        let u = ffn.fc1.forward(&mut tape, &p, x).unwrap();
        let u2 = tape.scale(u, 2.0);
        let want = ffn.norms[0].forward(&mut tape, &p, u2).unwrap();
        assert!(tape.value(steps[0]).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn one_step_matches_single_step_form() {
        let (store, ffn) = build(FfnConfig::new(8, 1), 5);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random(&[1, 16, 8], 6));
        let a = ffn.forward(&mut tape, &p, x, (4, 4)).unwrap();
        let b = ffn.forward_single_step(&mut tape, &p, x, (4, 4)).unwrap();
        assert_eq!(tape.data(a), tape.data(b));
    }

    #[test]
    fn every_step_is_normalized() {
        let (mut store, ffn) = build(FfnConfig::new(4, 3), 7);
        // keep the pre-norm variance well above the LayerNorm epsilon
        *store.get_mut(ffn.fc1.weight) = random(&[4, 16], 10);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(random(&[1, 16, 4], 8));
        let (steps, _) = ffn.trace(&mut tape, &p, x, (4, 4)).unwrap();
        assert_eq!(steps.len(), 3);
        let e = ffn.cfg.hidden;
        for s in steps {
            for row in tape.data(s).chunks(e) {
                let mean = row.iter().sum::<f64>() / e as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
                assert!(mean.abs() < 1e-5);
                assert!((var - 1.0).abs() < 1e-4, "variance {var}");
            }
        }
    }

    #[test]
    fn param_count_matches_store() {
        for (steps, variant) in [
            (1, FfnVariant::Enhanced),
            (3, FfnVariant::Enhanced),
            (1, FfnVariant::Mix),
        ] {
            let cfg = FfnConfig::new(8, steps).with_variant(variant);
            let (store, _) = build(cfg, 9);
            assert_eq!(store.num_scalars(), cfg.param_count());
        }
    }

    #[test]
    fn gradients_match_finite_differences_at_three_steps() {
        let (store, ffn) = build(FfnConfig::new(8, 3), 11);
        let mut inputs: Vec<Tensor<f64>> = vec![random(&[1, 16, 8], 12).with_requires_grad(true)];
        inputs.extend(store.iter().map(|(_, t)| {
            let mut t = t.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(t.numel() as u64);
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
            t.with_requires_grad(true)
        }));
        let cfg = GradCheckConfig {
            max_coords: Some(400),
            ..Default::default()
        };
        let report = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars[1..].to_vec());
                let y = ffn.forward(tape, &p, vars[0], (4, 4))?;
                let w = tape.constant(random(&[1, 16, 8], 13));
                let z = tape.mul(y, w)?;
                Ok(tape.sum(z))
            },
            &inputs,
            &cfg,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
