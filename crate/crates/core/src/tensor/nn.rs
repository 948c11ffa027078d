use super::kernels::{self, ConvGeom};
use super::tape::{Op, Tape, Var};
use super::Real;
use crate::error::{Error, Result};

fn std_normal_pdf<T: Real>(x: T) -> T {
    (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<T: Real> Tape<T> {
    /// Position-wise affine map `x·W + b` with `W: [Cin, Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(Error::shapes("linear", &sx, &sw));
        }
        let (cin, cout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shapes("linear bias", self.shape(b), &[cout]));
            }
        }
        let rows = self.value(x).numel() / cin.max(1);
        let mut out = vec![T::zero(); rows * cout];
        if let Some(b) = b {
            let bd = self.data(b);
            for row in out.chunks_mut(cout.max(1)) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm_nn(self.data(x), self.data(w), &mut out, rows, cin, cout);
        self.flops.linear += 2 * (rows * cin * cout) as u64;
        let mut shape = sx;
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(
            Op::Linear {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            },
            shape,
            out,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn linear_backward(
        &self,
        g: &[T],
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        cin: usize,
        cout: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        let wd = self.data(w);
        self.accumulate(grads, x, |dx| kernels::gemm_nt(g, wd, dx, rows, cout, cin));
        let xd = self.data(x);
        self.accumulate(grads, w, |dw| kernels::gemm_tn(xd, g, dw, cin, rows, cout));
        if let Some(b) = b {
            self.accumulate(grads, b, |db| {
                for row in g.chunks(cout.max(1)) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            });
        }
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .data(x)
            .iter()
            .map(|&v| v * std_normal_cdf(v))
            .collect();
        self.push(Op::Gelu(x), self.shape(x).to_vec(), data)
    }

    pub(super) fn gelu_backward(&self, g: &[T], x: Var, grads: &mut [Option<Vec<T>>]) {
        let xd = self.data(x);
        self.accumulate(grads, x, |dx| {
            for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xd) {
                *d += gv * (std_normal_cdf(v) + v * std_normal_pdf(v));
            }
        });
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::dim(
                op,
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        if self.data(x).iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite(format!("{op} input contains NaN")));
        }
        Ok(around_axis(shape, axis))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("softmax", x, axis)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xd[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..len {
                    let e = (xd[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[idx(j)] /= s;
                }
            }
        }
        Ok(self.push(
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            self.shape(x).to_vec(),
            out,
        ))
    }

    pub(super) fn softmax_backward(
        &self,
        g: &[T],
        node: usize,
        x: Var,
        (outer, len, inner): (usize, usize, usize),
        grads: &mut [Option<Vec<T>>],
    ) {
        let y = self.nodes[node].value.data();
        self.accumulate(grads, x, |dx| {
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dotv: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dotv);
                    }
                }
            }
        });
    }

    /// `log(softmax(x))` along `axis`, computed without forming the softmax.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis("log_softmax", x, axis)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| xd[idx(j)]).fold(T::neg_infinity(), T::max);
                let lse = mx + (0..len).map(|j| (xd[idx(j)] - mx).exp()).sum::<T>().ln();
                for j in 0..len {
                    out[idx(j)] = xd[idx(j)] - lse;
                }
            }
        }
        Ok(self.push(
            Op::LogSoftmax {
                x,
                outer,
                len,
                inner,
            },
            self.shape(x).to_vec(),
            out,
        ))
    }

    pub(super) fn log_softmax_backward(
        &self,
        g: &[T],
        node: usize,
        x: Var,
        (outer, len, inner): (usize, usize, usize),
        grads: &mut [Option<Vec<T>>],
    ) {
        let y = self.nodes[node].value.data();
        self.accumulate(grads, x, |dx| {
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let gs: T = (0..len).map(|j| g[idx(j)]).sum();
                    for j in 0..len {
                        dx[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gs;
                    }
                }
            }
        });
    }

    /// LayerNorm over the last axis followed by the affine `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shapes("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::lit(eps);
        let inv_c = T::lit(1.0 / c as f64);
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / c.max(1);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = gd[j] * h + bd[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                c,
                xhat,
                rstd,
            },
            shape,
            out,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn layer_norm_backward(
        &self,
        g: &[T],
        x: Var,
        gamma: Var,
        beta: Var,
        c: usize,
        xhat: &[T],
        rstd: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let gd = self.data(gamma);
        let inv_c = T::lit(1.0 / c as f64);
        self.accumulate(grads, x, |dx| {
            for (r, &rs) in rstd.iter().enumerate() {
                let gr = &g[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for j in 0..c {
                    let dh = gr[j] * gd[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                }
                mean_dh *= inv_c;
                mean_dh_h *= inv_c;
                for j in 0..c {
                    let dh = gr[j] * gd[j];
                    dx[r * c + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                }
            }
        });
        self.accumulate(grads, gamma, |dg| {
            for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dg[j] += gr[j] * hr[j];
                }
            }
        });
        self.accumulate(grads, beta, |db| {
            for gr in g.chunks(c) {
                for j in 0..c {
                    db[j] += gr[j];
                }
            }
        });
    }

    /// Per-channel 3×3 convolution, stride 1, zero padding 1, over NCHW input.
    /// `k: [C, 3, 3]`, `b: [C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!("expected [B,C,H,W], got {sx:?}"),
            ));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if self.shape(k) != [c, 3, 3] {
            return Err(Error::shapes("depthwise_conv2d", &sx, self.shape(k)));
        }
        if self.shape(b) != [c] {
            return Err(Error::shapes("depthwise_conv2d bias", &sx, self.shape(b)));
        }
        let (xd, kd, bd) = (self.data(x), self.data(k), self.data(b));
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let plane = (bi * c + ch) * h * w;
                let kern = &kd[ch * 9..ch * 9 + 9];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bd[ch];
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc +=
                                    kern[ky * 3 + kx] * xd[plane + iy as usize * w + ix as usize];
                            }
                        }
                        out[plane + y * w + xx] = acc;
                    }
                }
            }
        }
        self.flops.conv += 2 * 9 * xd.len() as u64;
        Ok(self.push(
            Op::DepthwiseConv {
                x,
                k,
                b,
                batch,
                c,
                h,
                w,
            },
            sx,
            out,
        ))
    }

    pub(super) fn depthwise_backward(
        &self,
        g: &[T],
        x: Var,
        k: Var,
        b: Var,
        (batch, c, h, w): (usize, usize, usize, usize),
        grads: &mut [Option<Vec<T>>],
    ) {
        let (xd, kd) = (self.data(x), self.data(k));
        // Visits every (output, tap) pair with a valid input position.
        let for_taps = |f: &mut dyn FnMut(usize, usize, usize)| {
            for bi in 0..batch {
                for ch in 0..c {
                    let plane = (bi * c + ch) * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            for ky in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = xx as isize + kx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    f(
                                        plane + y * w + xx,
                                        ch * 9 + ky * 3 + kx,
                                        plane + iy as usize * w + ix as usize,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        };
        self.accumulate(grads, x, |dx| {
            for_taps(&mut |o, t, i| dx[i] += g[o] * kd[t])
        });
        self.accumulate(grads, k, |dk| {
            for_taps(&mut |o, t, i| dk[t] += g[o] * xd[i])
        });
        self.accumulate(grads, b, |db| {
            for (p, plane) in g.chunks(h * w).enumerate() {
                db[p % c] += plane.iter().copied().sum::<T>();
            }
        });
    }

    /// Dense 2-D convolution over NCHW input, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shapes("conv2d", &sx, &sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(Error::shapes("conv2d", &sx, &sw));
        }
        if self.shape(b) != [geom.cout] {
            return Err(Error::shapes("conv2d bias", &sw, self.shape(b)));
        }
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = kernels::im2col(self.data(x), &geom);
        let rows = geom.rows();
        let mut y = vec![T::zero(); rows * geom.cout];
        kernels::gemm_nt(
            &cols,
            self.data(w),
            &mut y,
            rows,
            geom.patch_len(),
            geom.cout,
        );
        self.flops.conv += 2 * (rows * geom.patch_len() * geom.cout) as u64;
        let bd = self.data(b);
        let mut out = vec![T::zero(); rows * geom.cout];
        let spatial = oh * ow;
        for bi in 0..geom.batch {
            for s in 0..spatial {
                let r = bi * spatial + s;
                for co in 0..geom.cout {
                    out[(bi * geom.cout + co) * spatial + s] = y[r * geom.cout + co] + bd[co];
                }
            }
        }
        Ok(self.push(
            Op::Conv2d { x, w, b, geom },
            vec![geom.batch, geom.cout, oh, ow],
            out,
        ))
    }

    pub(super) fn conv2d_backward(
        &self,
        g: &[T],
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        grads: &mut [Option<Vec<T>>],
    ) {
        let spatial = geom.out_h() * geom.out_w();
        let rows = geom.rows();
        let plen = geom.patch_len();
        // NCHW gradient -> [rows, Cout]
        let mut gy = vec![T::zero(); rows * geom.cout];
        for bi in 0..geom.batch {
            for co in 0..geom.cout {
                for s in 0..spatial {
                    gy[(bi * spatial + s) * geom.cout + co] =
                        g[(bi * geom.cout + co) * spatial + s];
                }
            }
        }
        let need_w = self.requires_grad(w);
        if need_w {
            let cols = kernels::im2col(self.data(x), geom);
            self.accumulate(grads, w, |dw| {
                kernels::gemm_tn(&gy, &cols, dw, geom.cout, rows, plen)
            });
        }
        let wd = self.data(w);
        self.accumulate(grads, x, |dx| {
            let mut dcols = vec![T::zero(); rows * plen];
            kernels::gemm_nn(&gy, wd, &mut dcols, rows, geom.cout, plen);
            kernels::col2im(&dcols, geom, dx);
        });
        self.accumulate(grads, b, |db| {
            for row in gy.chunks(geom.cout) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        });
    }
}
