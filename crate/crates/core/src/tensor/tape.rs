use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for fault injection and gradient-check reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Gelu,
    Softmax,
    LogSoftmax,
    LayerNorm,
    DepthwiseConv,
    Conv2d,
    Reshape,
    Permute,
    Concat,
    Slice,
    SumAll,
    SumLastAxis,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::DepthwiseConv,
        OpKind::Conv2d,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::SumAll,
        OpKind::SumLastAxis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::DepthwiseConv => "depthwise_conv2d",
            OpKind::Conv2d => "conv2d",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::SumAll => "sum",
            OpKind::SumLastAxis => "sum_last_axis",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Multiply-accumulate counts (2 FLOPs per MAC) grouped by producing op.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounts {
    /// Batched `matmul` calls: the attention score and mixing products.
    pub matmul: u64,
    /// Fully-connected layers.
    pub linear: u64,
    /// Dense and depthwise convolutions.
    pub conv: u64,
}

pub(super) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        c: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    DepthwiseConv {
        x: Var,
        k: Var,
        b: Var,
        batch: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAll(Var),
    SumLastAxis {
        x: Var,
        cols: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::DepthwiseConv { .. } => OpKind::DepthwiseConv,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::SumAll(..) => OpKind::SumAll,
            Op::SumLastAxis { .. } => OpKind::SumLastAxis,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::AddScalar(x) | Op::Gelu(x) | Op::Reshape(x) | Op::SumAll(x) => {
                vec![*x]
            }
            Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::SumLastAxis { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::DepthwiseConv { x, k, b, .. } => vec![*x, *k, *b],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op<T>,
}

/// Define-by-run recording of a computation. A fresh tape is built for every
/// forward pass; [`Tape::backward`] replays it in exact reverse order.
pub struct Tape<T: Real = f32> {
    pub(super) nodes: Vec<Node<T>>,
    pub(super) flops: FlopCounts,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: FlopCounts::default(),
            fault: None,
        }
    }

    /// Deliberately breaks the backward rule of `kind` (input gradients are
    /// scaled by 1.5). Only useful as a negative control for gradient checks.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn flops(&self) -> FlopCounts {
        self.flops
    }

    pub(super) fn push(&mut self, op: Op<T>, shape: Vec<usize>, data: Vec<T>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            value: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), self.shape(a).to_vec(), data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), self.shape(a).to_vec(), data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), self.shape(a).to_vec(), data))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = self.zip_with(a, b, |x, y| x / y);
        Ok(self.push(Op::Div(a, b), self.shape(a).to_vec(), data))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.data(x).iter().map(|&v| v * s).collect();
        self.push(Op::Scale(x, s), self.shape(x).to_vec(), data)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let data = self.data(x).iter().map(|&v| v + s).collect();
        self.push(Op::AddScalar(x), self.shape(x).to_vec(), data)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Op::SumAll(x), Vec::new(), vec![s])
    }

    /// Sums over the last axis: `[.., C] -> [..]`.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&cols, outer)) = shape.split_last() else {
            return Err(Error::dim("sum_last_axis", "rank-0 input"));
        };
        let data = if cols == 0 {
            vec![T::zero(); outer.iter().product()]
        } else {
            self.data(x)
                .chunks(cols)
                .map(|r| r.iter().copied().sum())
                .collect()
        };
        Ok(self.push(Op::SumLastAxis { x, cols }, outer.to_vec(), data))
    }

    /// Batched matrix product `[.., M, K] × [.., K, N] -> [.., M, N]`. Either
    /// side may drop its batch dimensions, in which case it is broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shapes("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(Error::shapes("matmul", &sa, &sb));
        }
        let batch_dims = if ba.is_empty() { bb } else { ba };
        let batch: usize = batch_dims.iter().product();
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                kernels::gemm_nn(&ad[ao..], &bd[bo..], &mut out[i * m * n..], m, k, n);
            }
        }
        self.flops.matmul += 2 * (batch * m * k * n) as u64;
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
            shape,
            out,
        ))
    }

    /// Populates gradients of everything `loss` depends on. `loss` must hold
    /// exactly one element.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&mut self, out: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::shapes("backward", self.shape(out), &[seed.len()]));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut reachable = vec![false; n];
        grads[out.0] = Some(seed);
        reachable[out.0] = true;
        for i in (0..n).rev() {
            if !reachable[i] || !self.nodes[i].value.requires_grad {
                continue;
            }
            let inputs = self.nodes[i].op.inputs();
            for v in &inputs {
                reachable[v.0] = true;
            }
            let mut g = grads[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[i].value.numel()]);
            if !inputs.is_empty() {
                if self.fault == Some(self.nodes[i].op.kind()) {
                    let bad: Vec<T> = g.iter().map(|&v| v * T::lit(1.5)).collect();
                    self.backprop(i, &bad, &mut grads);
                } else {
                    self.backprop(i, &g, &mut grads);
                }
            }
            if g.len() != self.nodes[i].value.numel() {
                g.resize(self.nodes[i].value.numel(), T::zero());
            }
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |d| {
                    for ((dv, &gv), &bv) in d.iter_mut().zip(g).zip(bd) {
                        *dv += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((dv, &gv), &av) in d.iter_mut().zip(g).zip(ad) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |d| {
                    for ((dv, &gv), &bv) in d.iter_mut().zip(g).zip(bd) {
                        *dv += gv / bv;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (((dv, &gv), &av), &bv) in d.iter_mut().zip(g).zip(ad).zip(bd) {
                        *dv -= gv * av / (bv * bv);
                    }
                });
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, |d| {
                for (dv, &gv) in d.iter_mut().zip(g) {
                    *dv += gv * *s;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::SumAll(x) => self.accumulate(grads, *x, |d| {
                for dv in d.iter_mut() {
                    *dv += g[0];
                }
            }),
            Op::SumLastAxis { x, cols } => self.accumulate(grads, *x, |d| {
                for (row, &gv) in d.chunks_mut((*cols).max(1)).zip(g) {
                    for dv in row {
                        *dv += gv;
                    }
                }
            }),
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |da| {
                    for i in 0..*batch {
                        let ao = if *a_batched { i * m * k } else { 0 };
                        let bo = if *b_batched { i * k * n } else { 0 };
                        kernels::gemm_nt(&g[i * m * n..], &bd[bo..], &mut da[ao..], m, n, k);
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..*batch {
                        let ao = if *a_batched { i * m * k } else { 0 };
                        let bo = if *b_batched { i * k * n } else { 0 };
                        kernels::gemm_tn(&ad[ao..], &g[i * m * n..], &mut db[bo..], k, m, n);
                    }
                });
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            } => self.linear_backward(g, *x, *w, *b, *rows, *cin, *cout, grads),
            Op::Gelu(x) => self.gelu_backward(g, *x, grads),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => self.softmax_backward(g, i, *x, (*outer, *len, *inner), grads),
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            } => self.log_softmax_backward(g, i, *x, (*outer, *len, *inner), grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                c,
                xhat,
                rstd,
            } => self.layer_norm_backward(g, *x, *gamma, *beta, *c, xhat, rstd, grads),
            Op::DepthwiseConv {
                x,
                k,
                b,
                batch,
                c,
                h,
                w,
            } => self.depthwise_backward(g, *x, *k, *b, (*batch, *c, *h, *w), grads),
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(g, *x, *w, *b, geom, grads),
            Op::Permute { x, perm } => self.permute_backward(g, i, *x, perm, grads),
            Op::Concat { xs, axis, sizes } => self.concat_backward(g, i, xs, *axis, sizes, grads),
            Op::Slice { x, axis, start } => self.slice_backward(g, i, *x, *axis, *start, grads),
        }
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    /// Skipped entirely when `v` does not need a gradient.
    pub(super) fn accumulate(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]);
        f(buf);
    }
}

pub(super) fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (dv, &gv) in d.iter_mut().zip(g) {
        *dv += gv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 1]);
        assert_eq!(tape.data(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 2]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // f(x) = sum(x*x + x) => df/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.5, -2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -3.0, 7.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn reachable_params_without_flow_get_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[2], &[3.0, 4.0]));
        let z = tape.scale(y, 0.0);
        let s = tape.add(x, z).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0]);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn broadcast_matmul_sums_rhs_gradient_over_batch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::full([3, 1, 2], 1.0));
        let b = tape.param(t(&[2, 1], &[2.0, 5.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 1, 1]);
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 3.0]);
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 5.0, 2.0, 5.0, 2.0, 5.0]);
    }
}
