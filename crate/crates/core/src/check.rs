//! Finite-difference checks for parameterized modules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{grad_check, GradCheckConfig, GradReport, Tape, Tensor, Var};

/// Uniform `[-1, 1)` tensor from a seed.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Adds uniform noise of half-width `amount` to every parameter, so that
/// zero-initialized biases and unit LayerNorm gains do not hide errors in
/// their backward rules.
pub fn jitter(store: &mut ParamStore<f64>, amount: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-amount..amount));
    }
}

/// Checks gradients of `<f(inputs, params), w>` for a fixed random `w`,
/// with respect to both the inputs and every parameter.
pub fn check_module<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut all: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.clone().with_requires_grad(true))
        .collect();
    all.extend(
        store
            .iter()
            .map(|(_, t)| t.clone().with_requires_grad(true)),
    );
    let seed = cfg.seed;
    grad_check(
        |tape, vars| {
            let p = Bound::from_vars(vars[n_in..].to_vec());
            let y = f(tape, &p, &vars[..n_in])?;
            let w = tape.constant(random_tensor(tape.shape(y), seed ^ 0x5eed));
            let z = tape.mul(y, w)?;
            Ok(tape.sum(z))
        },
        &all,
        cfg,
    )
}

/// One family of the gradient suite.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub family: &'static str,
    pub tolerance: f64,
    pub outcome: std::result::Result<GradReport, String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        matches!(&self.outcome, Ok(r) if r.max_rel_error < self.tolerance)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Backward rule to corrupt on every tape (negative control).
    pub fault: Option<crate::tensor::OpKind>,
    /// Coordinates sampled per tensor in the module- and model-level checks.
    pub coords: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            fault: None,
            coords: 6,
            seed: 0,
        }
    }
}

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Family names in the order [`run_suite`] reports them.
pub const SUITE_FAMILIES: [&str; 17] = [
    "elementwise",
    "matmul",
    "linear",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "dwconv",
    "conv2d",
    "layout",
    "loss",
    "attention",
    "ffn",
    "block",
    "patch",
    "bridge",
    "model",
];

type Check<'a> = Box<dyn Fn(&GradCheckConfig) -> Result<GradReport> + 'a>;

fn build<M>(
    seed: u64,
    f: impl FnOnce(&mut crate::params::Init<'_, f64>) -> Result<M>,
) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut crate::params::Init::new(&mut store, &mut rng))?;
    jitter(&mut store, 0.3, seed + 1);
    Ok((store, m))
}

/// Finite-difference checks of every differentiable op family and of a
/// 32×32 end-to-end model, all in f64.
pub fn run_suite(opts: &SuiteOptions) -> Vec<SuiteResult> {
    use crate::attention::{AttentionConfig, EfficientSelfAttention};
    use crate::blocks::{ConvDown, PatchExpand, TransformerBlock};
    use crate::bridge::BridgeLayer;
    use crate::ffn::{FfnConfig, FfnVariant, MixFfn};
    use crate::model::{Missformer, ModelConfig};

    let fault = opts.fault;
    let arm = move |t: &mut Tape<f64>| {
        if let Some(k) = fault {
            t.inject_backward_fault(k);
        }
    };
    let empty = ParamStore::<f64>::new();
    let r = |shape: &[usize], s: u64| random_tensor(shape, opts.seed * 1000 + s);
    let positive = |shape: &[usize], s: u64| {
        let mut t = r(shape, s);
        t.data_mut().iter_mut().for_each(|v| *v = 1.5 + *v);
        t
    };
    let full = GradCheckConfig {
        seed: opts.seed,
        ..Default::default()
    };
    let sampled = GradCheckConfig {
        max_coords: Some(opts.coords),
        ..full.clone()
    };

    let op = |inputs: Vec<Tensor<f64>>,
              f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>|
     -> Check<'_> {
        let empty = &empty;
        Box::new(move |cfg| {
            check_module(empty, &inputs, cfg, |t, _, v| {
                arm(t);
                f(t, v)
            })
        })
    };

    let mut checks: Vec<(&'static str, f64, GradCheckConfig, Check<'_>)> = Vec::new();
    checks.push((
        "elementwise",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[3, 4], 1), positive(&[3, 4], 2)],
            Box::new(|t, v| {
                let a = t.mul(v[0], v[1])?;
                let b = t.div(a, v[1])?;
                let b = t.div(b, v[1])?;
                let c = t.sub(b, v[0])?;
                let c = t.add(c, v[1])?;
                let c = t.scale(c, 0.7);
                let c = t.add_scalar(c, 0.1);
                let s = t.sum_last_axis(c)?;
                let m = t.mul(s, s)?;
                let total = t.sum(m);
                let back = t.scale(total, 0.5);
                let z = t.add_scalar(back, 0.0);
                let z = t.reshape(z, &[1])?;
                t.reshape(z, &[])
            }),
        ),
    ));
    checks.push((
        "matmul",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[2, 3, 4], 3), r(&[4, 5], 4), r(&[2, 5, 2], 5)],
            Box::new(|t, v| {
                let a = t.matmul(v[0], v[1])?;
                t.matmul(a, v[2])
            }),
        ),
    ));
    checks.push((
        "linear",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[2, 3, 4], 6), r(&[4, 5], 7), r(&[5], 8)],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))),
        ),
    ));
    checks.push((
        "softmax",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[2, 3, 4], 9)],
            Box::new(|t, v| {
                let a = t.softmax(v[0], 2)?;
                t.softmax(a, 1)
            }),
        ),
    ));
    checks.push((
        "log_softmax",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[2, 3, 4], 10)],
            Box::new(|t, v| t.log_softmax(v[0], 1)),
        ),
    ));
    checks.push((
        "layer_norm",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[3, 6], 11), positive(&[6], 12), r(&[6], 13)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        ),
    ));
    checks.push((
        "gelu",
        OP_TOLERANCE,
        full.clone(),
        op(vec![r(&[4, 5], 14)], Box::new(|t, v| Ok(t.gelu(v[0])))),
    ));
    checks.push((
        "dwconv",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[2, 3, 4, 5], 15), r(&[3, 3, 3], 16), r(&[3], 17)],
            Box::new(|t, v| t.depthwise_conv2d(v[0], v[1], v[2])),
        ),
    ));
    checks.push((
        "conv2d",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[1, 2, 6, 6], 18), r(&[3, 2, 3, 3], 19), r(&[3], 20)],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        ),
    ));
    checks.push((
        "layout",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[2, 3, 4], 21), r(&[2, 2, 4], 22)],
            Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let p = t.permute(c, &[2, 0, 1])?;
                let s = t.slice(p, 2, 1, 3)?;
                let parts = t.split(s, 0, &[1, 3])?;
                let q = t.reshape(parts[1], &[3, 6])?;
                let w = t.mul(q, q)?;
                let first = t.reshape(parts[0], &[6])?;
                let f2 = t.mul(first, first)?;
                let a = t.sum(w);
                let b = t.sum(f2);
                t.add(a, b)
            }),
        ),
    ));
    let labels: Vec<u8> = (0..2 * 16).map(|i| ((i * 7) % 3) as u8).collect();
    checks.push((
        "loss",
        OP_TOLERANCE,
        full.clone(),
        op(
            vec![r(&[2, 3, 4, 4], 23)],
            Box::new(move |t, v| crate::loss::seg_loss(t, v[0], &labels)),
        ),
    ));

    let seed = opts.seed;
    let x16 = r(&[1, 16, 8], 24);
    checks.push((
        "attention",
        OP_TOLERANCE,
        sampled.clone(),
        Box::new(move |cfg| {
            let (store, a) = build(seed + 100, |i| {
                EfficientSelfAttention::new(i, &AttentionConfig::new(8, 2, 2))
            })?;
            check_module(&store, std::slice::from_ref(&x16), cfg, |t, p, v| {
                arm(t);
                a.forward(t, p, v[0], (4, 4))
            })
        }),
    ));
    let x16 = r(&[1, 16, 8], 25);
    checks.push((
        "ffn",
        OP_TOLERANCE,
        sampled.clone(),
        Box::new(move |cfg| {
            let (store, f) = build(seed + 200, |i| MixFfn::new(i, FfnConfig::new(8, 3)))?;
            check_module(&store, std::slice::from_ref(&x16), cfg, |t, p, v| {
                arm(t);
                f.forward(t, p, v[0], (4, 4))
            })
        }),
    ));
    let x16 = r(&[1, 16, 8], 26);
    checks.push((
        "block",
        OP_TOLERANCE,
        sampled.clone(),
        Box::new(move |cfg| {
            let (store, b) = build(seed + 300, |i| {
                TransformerBlock::new(i, &AttentionConfig::new(8, 2, 2), FfnConfig::new(8, 1))
            })?;
            check_module(&store, std::slice::from_ref(&x16), cfg, |t, p, v| {
                arm(t);
                b.forward(t, p, v[0], (4, 4))
            })
        }),
    ));
    let img = r(&[1, 3, 16, 16], 27);
    checks.push((
        "patch",
        OP_TOLERANCE,
        sampled.clone(),
        Box::new(move |cfg| {
            let (store, (e, m, x2, x4)) = build(seed + 400, |i| {
                Ok((
                    ConvDown::embed(&mut i.scope("embed"), 3, 4),
                    ConvDown::merge(&mut i.scope("merge"), 4, 8),
                    PatchExpand::new(&mut i.scope("expand"), 8, 4, 2),
                    PatchExpand::new(&mut i.scope("final"), 4, 4, 4),
                ))
            })?;
            check_module(&store, std::slice::from_ref(&img), cfg, |t, p, v| {
                arm(t);
                let (a, g) = e.forward_image(t, p, v[0])?;
                let (b, g) = m.forward_tokens(t, p, a, g)?;
                let (c, g) = x2.forward(t, p, b, g)?;
                Ok(x4.forward(t, p, c, g)?.0)
            })
        }),
    ));
    let toy = ModelConfig::toy();
    let pyramid: Vec<Tensor<f64>> = (0..4)
        .map(|i| {
            let (h, w) = toy.grids()[i];
            r(&[1, h * w, toy.channels[i]], 28 + i as u64)
        })
        .collect();
    checks.push((
        "bridge",
        OP_TOLERANCE,
        sampled.clone(),
        Box::new(move |cfg| {
            let l = toy.bridge_layout()?;
            let (store, layer) = build(seed + 500, |i| {
                BridgeLayer::new(i, &l, toy.heads[0], 1, FfnVariant::Enhanced)
            })?;
            check_module(&store, &pyramid, cfg, |t, p, v| {
                arm(t);
                let m = l.pack(t, v)?;
                let y = layer.forward(t, p, &l, m)?;
                let parts = l.unpack(t, y)?;
                l.pack(t, &parts)
            })
        }),
    ));
    let image = r(&[1, 3, 32, 32], 40);
    checks.push((
        "model",
        MODEL_TOLERANCE,
        sampled.clone(),
        Box::new(move |cfg| {
            let (m, mut store) = Missformer::build::<f64>(&ModelConfig::micro(), seed + 600)?;
            jitter(&mut store, 0.1, seed + 601);
            check_module(&store, std::slice::from_ref(&image), cfg, |t, p, v| {
                arm(t);
                m.forward(t, p, v[0])
            })
        }),
    ));

    checks
        .into_iter()
        .map(|(family, tolerance, cfg, check)| {
            let cfg = GradCheckConfig { tolerance, ..cfg };
            SuiteResult {
                family,
                tolerance,
                outcome: check(&cfg).map_err(|e| e.to_string()),
            }
        })
        .collect()
}
