//! Encoder, optional context bridge, decoder, and segmentation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::blocks::{ConvDown, PatchExpand, TransformerBlock};
use crate::bridge::{BridgeLayout, ContextBridge, Segment};
use crate::error::{Error, Result};
use crate::ffn::{FfnConfig, FfnVariant};
use crate::layers::{tokens_to_grid, Linear};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Real, Tape, Var};

pub const STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SkipMode {
    #[default]
    Add,
    Concat,
    /// No encoder-to-decoder connections.
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub enabled: bool,
    pub depth: usize,
    /// One-based encoder stages fed into the bridge.
    pub stages: Vec<usize>,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            enabled: true,
            depth: 4,
            stages: vec![1, 2, 3, 4],
        }
    }
}

impl BridgeConfig {
    pub fn disabled() -> Self {
        BridgeConfig {
            enabled: false,
            ..Default::default()
        }
    }
}

fn default_in_channels() -> usize {
    3
}

fn default_blocks() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    pub channels: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub reductions: [usize; STAGES],
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    /// Recursive skip+norm steps in every FFN; unset picks 1 with the
    /// bridge and 3 without.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_steps: Option<usize>,
    #[serde(default)]
    pub ffn_variant: FfnVariant,
    #[serde(default)]
    pub skip_mode: SkipMode,
    #[serde(default)]
    pub bridge: BridgeConfig,
}

impl ModelConfig {
    /// 64×64 desk-scale configuration.
    pub fn toy() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            in_channels: 3,
            num_classes: 4,
            channels: [8, 16, 40, 64],
            heads: [1, 2, 5, 8],
            reductions: [8, 4, 2, 1],
            blocks_per_stage: 2,
            ffn_steps: None,
            ffn_variant: FfnVariant::Enhanced,
            skip_mode: SkipMode::Add,
            bridge: BridgeConfig::default(),
        }
    }

    /// 32×32 configuration small enough for full finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            channels: [4, 8, 20, 32],
            ..Self::toy()
        }
    }

    /// 224×224 configuration with the full channel widths.
    pub fn reference() -> Self {
        ModelConfig {
            height: 224,
            width: 224,
            num_classes: 9,
            channels: [64, 128, 320, 512],
            ..Self::toy()
        }
    }

    pub fn steps(&self) -> usize {
        self.ffn_steps
            .unwrap_or(if self.bridge.enabled { 1 } else { 3 })
    }

    /// Copy with every defaulted choice written out.
    pub fn resolved(&self) -> Self {
        ModelConfig {
            ffn_steps: Some(self.steps()),
            ..self.clone()
        }
    }

    /// Token grid of each encoder stage.
    pub fn grids(&self) -> [(usize, usize); STAGES] {
        std::array::from_fn(|i| (self.height >> (i + 2), self.width >> (i + 2)))
    }

    /// Per-stage reduction ratio actually used: the largest divisor of both
    /// grid sides not exceeding the configured ratio.
    pub fn effective_reductions(&self) -> [usize; STAGES] {
        let grids = self.grids();
        std::array::from_fn(|i| {
            let (h, w) = grids[i];
            (1..=self.reductions[i].max(1))
                .rev()
                .find(|r| h % r == 0 && w % r == 0)
                .unwrap_or(1)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.height == 0 || self.height % 32 != 0 {
            return bad(
                "height",
                format!("{} is not a positive multiple of 32", self.height),
            );
        }
        if self.width == 0 || self.width % 32 != 0 {
            return bad(
                "width",
                format!("{} is not a positive multiple of 32", self.width),
            );
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(
                "num_classes",
                format!("need at least 2 classes, got {}", self.num_classes),
            );
        }
        for i in 0..STAGES {
            let (c, h) = (self.channels[i], self.heads[i]);
            if c == 0 || h == 0 || c % h != 0 {
                return bad(
                    "heads",
                    format!("stage {} channels {c} not divisible by {h} heads", i + 1),
                );
            }
            if self.reductions[i] == 0 {
                return bad(
                    "reductions",
                    format!("stage {} ratio must be positive", i + 1),
                );
            }
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage", "must be positive".into());
        }
        if self.ffn_variant == FfnVariant::Enhanced && self.steps() == 0 {
            return bad("ffn_steps", "must be at least 1".into());
        }
        if self.bridge.enabled {
            let b = &self.bridge;
            if b.depth == 0 {
                return bad("bridge.depth", "must be at least 1".into());
            }
            if b.stages.is_empty() {
                return bad("bridge.stages", "empty".into());
            }
            let mut seen = [false; STAGES];
            for &s in &b.stages {
                if !(1..=STAGES).contains(&s) || seen[s - 1] {
                    return bad("bridge.stages", format!("invalid or repeated stage {s}"));
                }
                seen[s - 1] = true;
            }
            for &s in &b.stages {
                if self.channels[s - 1] % self.channels[0] != 0 {
                    return bad(
                        "channels",
                        format!(
                            "stage {s} width {} not a multiple of {}",
                            self.channels[s - 1],
                            self.channels[0]
                        ),
                    );
                }
            }
        }
        Ok(())
    }

    pub fn attention(&self, stage: usize) -> AttentionConfig {
        AttentionConfig::new(
            self.channels[stage],
            self.heads[stage],
            self.effective_reductions()[stage],
        )
    }

    pub fn ffn(&self, stage: usize) -> FfnConfig {
        FfnConfig::new(self.channels[stage], self.steps()).with_variant(self.ffn_variant)
    }

    pub fn bridge_layout(&self) -> Result<BridgeLayout> {
        let grids = self.grids();
        let r = self.effective_reductions();
        let mut stages = self.bridge.stages.clone();
        stages.sort_unstable();
        let segs = stages
            .iter()
            .map(|&s| Segment {
                stage: s - 1,
                grid: grids[s - 1],
                channels: self.channels[s - 1],
                reduction: r[s - 1],
            })
            .collect();
        BridgeLayout::new(self.channels[0], segs)
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> Result<usize> {
        let (_, store) = Missformer::build::<f32>(self, 0)?;
        Ok(store.num_scalars())
    }
}

/// Per-stage encoder outputs and their grids.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub features: Vec<Var>,
    pub grids: [(usize, usize); STAGES],
    pub channels: [usize; STAGES],
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub expand: PatchExpand,
    pub skip_proj: Option<Linear>,
    pub blocks: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
pub struct Missformer {
    pub cfg: ModelConfig,
    pub embed: ConvDown,
    pub encoder: Vec<Vec<TransformerBlock>>,
    pub merges: Vec<ConvDown>,
    pub bridge: Option<ContextBridge>,
    /// Decoder stages ordered 3, 2, 1.
    pub decoder: Vec<DecoderStage>,
    pub final_expand: PatchExpand,
    pub head: Linear,
}

impl Missformer {
    /// Builds the network with freshly initialized parameters.
    pub fn build<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::construct(cfg, &mut Init::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    /// Rebuilds the network structure over existing parameters, checking
    /// every name and shape.
    pub fn attach<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        let (model, fresh) = Self::build::<T>(cfg, 0)?;
        if fresh.len() != store.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                fresh.len(),
                store.len()
            )));
        }
        for ((na, ta), (nb, tb)) in fresh.iter().zip(store.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {na} {:?}, found {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(model)
    }

    fn construct<T: Real>(cfg: &ModelConfig, init: &mut Init<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let n = cfg.blocks_per_stage;
        let mut enc = init.scope("encoder");
        let embed = ConvDown::embed(&mut enc.scope("embed"), cfg.in_channels, c[0]);
        let mut encoder = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES - 1);
        for i in 0..STAGES {
            let mut st = enc.scope(format!("stage{}", i + 1));
            let blocks = (0..n)
                .map(|b| {
                    TransformerBlock::new(
                        &mut st.scope(format!("block{b}")),
                        &cfg.attention(i),
                        cfg.ffn(i),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            encoder.push(blocks);
            if i + 1 < STAGES {
                merges.push(ConvDown::merge(&mut st.scope("merge"), c[i], c[i + 1]));
            }
        }
        let bridge = if cfg.bridge.enabled {
            Some(ContextBridge::new(
                &mut init.scope("bridge"),
                cfg.bridge_layout()?,
                cfg.bridge.depth,
                cfg.heads[0],
                cfg.steps(),
                cfg.ffn_variant,
            )?)
        } else {
            None
        };
        let mut dec = init.scope("decoder");
        let mut decoder = Vec::with_capacity(STAGES - 1);
        for i in (0..STAGES - 1).rev() {
            let mut st = dec.scope(format!("stage{}", i + 1));
            let expand = PatchExpand::new(&mut st.scope("up"), c[i + 1], c[i], 2);
            let skip_proj = match cfg.skip_mode {
                SkipMode::Concat => Some(Linear::new(&mut st.scope("skip"), 2 * c[i], c[i])),
                _ => None,
            };
            let blocks = (0..n)
                .map(|b| {
                    TransformerBlock::new(
                        &mut st.scope(format!("block{b}")),
                        &cfg.attention(i),
                        cfg.ffn(i),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderStage {
                expand,
                skip_proj,
                blocks,
            });
        }
        let final_expand = PatchExpand::new(&mut dec.scope("final"), c[0], c[0], 4);
        let head = Linear::new(&mut init.scope("head"), c[0], cfg.num_classes);
        Ok(Missformer {
            cfg: cfg.clone(),
            embed,
            encoder,
            merges,
            bridge,
            decoder,
            final_expand,
            head,
        })
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, img: Var) -> Result<()> {
        let s = tape.shape(img);
        let c = &self.cfg;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.height || s[3] != c.width {
            return Err(Error::dim(
                "model_forward",
                format!(
                    "input {s:?}, expected [B, {}, {}, {}]",
                    c.in_channels, c.height, c.width
                ),
            ));
        }
        Ok(())
    }

    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        img: Var,
    ) -> Result<FeaturePyramid> {
        self.check_input(tape, img)?;
        let (mut x, mut grid) = self.embed.forward_image(tape, p, img)?;
        let mut features = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            for blk in &self.encoder[i] {
                x = blk.forward(tape, p, x, grid)?;
            }
            features.push(x);
            if let Some(m) = self.merges.get(i) {
                (x, grid) = m.forward_tokens(tape, p, x, grid)?;
            }
        }
        Ok(FeaturePyramid {
            features,
            grids: self.cfg.grids(),
            channels: self.cfg.channels,
        })
    }

    pub fn bridge<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pyr: FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        match &self.bridge {
            Some(b) => Ok(FeaturePyramid {
                features: b.forward(tape, p, &pyr.features)?,
                ..pyr
            }),
            None => Ok(pyr),
        }
    }

    /// Pyramid to logits `[B, K, H, W]`.
    pub fn decode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pyr: &FeaturePyramid,
    ) -> Result<Var> {
        let mut x = pyr.features[STAGES - 1];
        let mut grid = pyr.grids[STAGES - 1];
        for (stage, i) in self.decoder.iter().zip((0..STAGES - 1).rev()) {
            (x, grid) = stage.expand.forward(tape, p, x, grid)?;
            let skip = pyr.features[i];
            if grid != pyr.grids[i] {
                return Err(Error::shapes(
                    "skip_connection",
                    tape.shape(x),
                    tape.shape(skip),
                ));
            }
            x = match (self.cfg.skip_mode, &stage.skip_proj) {
                (SkipMode::Add, _) => tape.add(x, skip)?,
                (SkipMode::Concat, Some(proj)) => {
                    let cat = tape.concat(&[x, skip], 2)?;
                    proj.forward(tape, p, cat)?
                }
                _ => x,
            };
            for blk in &stage.blocks {
                x = blk.forward(tape, p, x, grid)?;
            }
        }
        let (x, grid) = self.final_expand.forward(tape, p, x, grid)?;
        let logits = self.head.forward(tape, p, x)?;
        tokens_to_grid(tape, logits, grid)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, img: Var) -> Result<Var> {
        let pyr = self.encode(tape, p, img)?;
        let pyr = self.bridge(tape, p, pyr)?;
        self.decode(tape, p, &pyr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::random_tensor;

    #[test]
    fn toy_pyramid_and_logits() {
        let cfg = ModelConfig::toy();
        let (m, store) = Missformer::build::<f64>(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.constant(random_tensor(&[1, 3, 64, 64], 2));
        let pyr = m.encode(&mut tape, &p, img).unwrap();
        for (i, g) in [16, 8, 4, 2].iter().enumerate() {
            assert_eq!(tape.shape(pyr.features[i]), &[1, g * g, cfg.channels[i]]);
        }
        let pyr = m.bridge(&mut tape, &p, pyr).unwrap();
        let y = m.decode(&mut tape, &p, &pyr).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 64, 64]);
    }

    #[test]
    fn skip_modes_share_output_shape() {
        for mode in [SkipMode::Add, SkipMode::Concat, SkipMode::None] {
            let cfg = ModelConfig {
                skip_mode: mode,
                bridge: BridgeConfig::disabled(),
                ..ModelConfig::micro()
            };
            let (m, store) = Missformer::build::<f32>(&cfg, 3).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let img = tape.constant(random_tensor(&[2, 3, 32, 32], 4).cast());
            let y = m.forward(&mut tape, &p, img).unwrap();
            assert_eq!(tape.shape(y), &[2, 4, 32, 32]);
        }
    }

    #[test]
    fn param_count_arithmetic() {
        let base = ModelConfig::toy();
        let with = base.param_count().unwrap();
        let without = ModelConfig {
            bridge: BridgeConfig::disabled(),
            ..base.clone()
        }
        .param_count()
        .unwrap();
        assert!(without < with);
        let deeper = ModelConfig {
            bridge: BridgeConfig {
                depth: 8,
                ..Default::default()
            },
            ..base.clone()
        };
        assert!(deeper.param_count().unwrap() > with);

        // two extra LayerNorms of width 4C in every FFN
        let plain = ModelConfig {
            bridge: BridgeConfig::disabled(),
            ffn_steps: Some(1),
            ..base.clone()
        };
        let three = ModelConfig {
            ffn_steps: Some(3),
            ..plain.clone()
        };
        let n = base.blocks_per_stage;
        let ffns_per_stage = [2 * n, 2 * n, 2 * n, n];
        let extra: usize = (0..STAGES)
            .map(|i| ffns_per_stage[i] * 2 * (2 * 4 * base.channels[i]))
            .sum();
        assert_eq!(
            three.param_count().unwrap() - plain.param_count().unwrap(),
            extra
        );
    }

    #[test]
    fn attach_checks_names_and_shapes() {
        let cfg = ModelConfig::micro();
        let (_, store) = Missformer::build::<f32>(&cfg, 5).unwrap();
        assert!(Missformer::attach(&cfg, &store).is_ok());
        let other = ModelConfig {
            skip_mode: SkipMode::Concat,
            ..cfg
        };
        assert!(Missformer::attach(&other, &store).is_err());
    }

    #[test]
    fn invalid_configs_name_the_key() {
        let e = ModelConfig {
            height: 48,
            ..ModelConfig::toy()
        }
        .validate()
        .unwrap_err();
        assert!(e.to_string().contains("height"));
        let e = ModelConfig {
            heads: [3, 2, 5, 8],
            ..ModelConfig::toy()
        }
        .validate()
        .unwrap_err();
        assert!(e.to_string().contains("heads"));
        let mut c = ModelConfig::toy();
        c.bridge.stages = vec![4, 4];
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("bridge.stages"));
    }

    #[test]
    fn reductions_clamp_to_grid() {
        let cfg = ModelConfig {
            reductions: [16, 4, 8, 2],
            ..ModelConfig::micro()
        };
        assert_eq!(cfg.effective_reductions(), [8, 4, 2, 1]);
    }
}
