use super::tape::{add_into, Op, Tape, Var};
use super::{strides, Real};
use crate::error::{Error, Result};

/// Copies `src` (shape `shape`) into `dst` with axes reordered by `perm`,
/// i.e. `dst` has shape `[shape[perm[0]], shape[perm[1]], ..]`. When
/// `accumulate` is set the values are added instead of stored.
fn permute_into<T: Real>(
    src: &[T],
    shape: &[usize],
    perm: &[usize],
    dst: &mut [T],
    accumulate: bool,
) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in `src` for each output axis
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    if src.is_empty() {
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let inner = if rank == 0 { 1 } else { out_shape[rank - 1] };
    let inner_step = if rank == 0 { 0 } else { step[rank - 1] };
    let mut o = 0;
    while o < dst.len() {
        for j in 0..inner {
            let v = src[off + j * inner_step];
            if accumulate {
                dst[o + j] += v;
            } else {
                dst[o + j] = v;
            }
        }
        o += inner;
        // advance the multi-index over all but the innermost output axis
        let mut ax = rank.saturating_sub(1);
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shapes("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(Op::Reshape(x), shape.to_vec(), data))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        // Moving only unit axes leaves the memory order intact.
        let moved: Vec<usize> = perm.iter().copied().filter(|&p| shape[p] != 1).collect();
        if moved.windows(2).all(|w| w[0] < w[1]) {
            return self.reshape(x, &out_shape);
        }
        let mut out = vec![T::zero(); self.value(x).numel()];
        permute_into(self.data(x), &shape, perm, &mut out, false);
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            out_shape,
            out,
        ))
    }

    pub(super) fn permute_backward(
        &self,
        g: &[T],
        node: usize,
        x: Var,
        perm: &[usize],
        grads: &mut [Option<Vec<T>>],
    ) {
        let out_shape = self.nodes[node].value.shape().to_vec();
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.accumulate(grads, x, |dx| permute_into(g, &out_shape, &inv, dx, true));
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let agree = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::shapes("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &sz) in xs.iter().zip(&sizes) {
                out.extend_from_slice(&self.data(x)[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
                sizes,
            },
            shape,
            out,
        ))
    }

    pub(super) fn concat_backward(
        &self,
        g: &[T],
        node: usize,
        xs: &[Var],
        axis: usize,
        sizes: &[usize],
        grads: &mut [Option<Vec<T>>],
    ) {
        let shape = self.nodes[node].value.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total = shape[axis];
        let mut offset = 0;
        for (&x, &sz) in xs.iter().zip(sizes) {
            self.accumulate(grads, x, |dx| {
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                    add_into(&mut dx[o * sz * inner..(o + 1) * sz * inner], src);
                }
            });
            offset += sz;
        }
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!(
                    "range {start}..{} on axis {axis} out of bounds for {shape:?}",
                    start + len
                ),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(
                &xd[(o * full + start) * inner..(o * full + start + len) * inner],
            );
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start }, out_shape, out))
    }

    pub(super) fn slice_backward(
        &self,
        g: &[T],
        node: usize,
        x: Var,
        axis: usize,
        start: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        let len = self.nodes[node].value.shape()[axis];
        let shape = self.shape(x);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        self.accumulate(grads, x, |dx| {
            for o in 0..outer {
                add_into(
                    &mut dx[(o * full + start) * inner..(o * full + start + len) * inner],
                    &g[o * len * inner..(o + 1) * len * inner],
                );
            }
        });
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.shape(x).get(axis).copied();
        if extent != Some(sizes.iter().sum()) {
            return Err(Error::dim(
                "split",
                format!(
                    "sizes {sizes:?} do not cover axis {axis} of {:?}",
                    self.shape(x)
                ),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    fn iota(tape: &mut Tape<f64>, shape: &[usize]) -> Var {
        let n = shape.iter().product();
        tape.param(Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap())
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = iota(&mut tape, &[2, 3, 4]);
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        let (xd, yd) = (tape.data(x), tape.data(y));
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(yd[(c * 2 + a) * 3 + b], xd[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn permute_round_trip_and_rejects_bad_perm() {
        let mut tape = Tape::<f64>::new();
        let x = iota(&mut tape, &[2, 3, 4, 5]);
        let y = tape.permute(x, &[0, 2, 3, 1]).unwrap();
        let z = tape.permute(y, &[0, 3, 1, 2]).unwrap();
        assert_eq!(tape.data(z), tape.data(x));
        assert!(tape.permute(x, &[0, 0, 1, 2]).is_err());
        assert!(tape.permute(x, &[0, 1, 2]).is_err());
    }

    #[test]
    fn reshape_round_trip_and_count_check() {
        let mut tape = Tape::<f64>::new();
        let x = iota(&mut tape, &[2, 3, 4]);
        let y = tape.reshape(x, &[6, 4]).unwrap();
        let z = tape.reshape(y, &[2, 3, 4]).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
        assert!(tape.reshape(x, &[5, 5]).is_err());
    }

    #[test]
    fn split_then_concat_is_bit_exact() {
        let mut tape = Tape::<f64>::new();
        let x = iota(&mut tape, &[2, 7, 3]);
        let parts = tape.split(x, 1, &[2, 4, 1]).unwrap();
        let y = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.shape(y), tape.shape(x));
        assert_eq!(tape.data(y), tape.data(x));
        assert!(tape.split(x, 1, &[2, 2]).is_err());
    }

    #[test]
    fn concat_extent_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = iota(&mut tape, &[2, 3]);
        let b = iota(&mut tape, &[3, 3]);
        assert!(tape.concat(&[a, b], 1).is_err());
        assert!(tape.concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn slice_gradient_scatters() {
        let mut tape = Tape::<f64>::new();
        let x = iota(&mut tape, &[2, 4]);
        let s = tape.slice(x, 1, 1, 2).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(x).unwrap(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]
        );
    }
}
