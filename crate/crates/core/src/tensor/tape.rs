//! Reverse-mode tape over tensor primitives.
//!
//! One tape lives for one training step: forward calls record nodes,
//! `backward` replays them in reverse, and the tape is dropped afterwards.
//! Calling `backward` repeatedly without clearing accumulates gradients.

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Recorded primitive with its input references; the backward rule is the
/// matching arm in [`Tape::backward`].
#[derive(Debug, Clone)]
pub enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Matmul(Var, Var),
    /// Matmul specialized for aggregation over the node axis; products are
    /// summed in a canonical (sorted) order so that permuting node labels
    /// yields bit-identical results.
    SpatialAggregate(Var, Var),
    Conv1d { input: Var, kernel: Var, pad: usize },
    Sigmoid(Var),
    Relu(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
    Permute { src: Var, axes: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    /// Broadcast a vector across one axis: out = src + vec[axis index].
    AddVecAxis { src: Var, vec: Var, axis: usize },
    /// Strided subsampling of the last axis.
    Downsample { src: Var, stride: usize },
    /// Nearest-neighbor repeat along the last axis.
    UpsampleRepeat { src: Var, factor: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.input(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any was
    /// propagated there.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_vec(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drop all accumulated gradients, keeping recorded nodes.
    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op_name, format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape())));
        }
        let data: Vec<S> = ta.data().iter().zip(tb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let value = self.nodes[a.0].value.scale(c);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(stable_sigmoid);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Sigmoid(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| if x > S::zero() { x } else { S::zero() });
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, Op::Relu(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("incompatible shapes {:?} and {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// `a @ h` where `a` aggregates over the node axis. Each output entry is
    /// a sum of products taken in sorted order, which keeps the result
    /// invariant under relabeling of the summed axis.
    pub fn spatial_aggregate(&mut self, a: Var, h: Var) -> Result<Var> {
        let (ta, th) = (&self.nodes[a.0].value, &self.nodes[h.0].value);
        let (sa, sh) = (ta.shape(), th.shape());
        if sa.len() != 2 || sh.len() != 2 || sa[1] != sh[0] {
            return Err(Error::shape("spatial_aggregate", format!("incompatible shapes {:?} and {:?}", sa, sh)));
        }
        let (m, k, n) = (sa[0], sa[1], sh[1]);
        let (da, dh) = (ta.data(), th.data());
        let mut out = vec![S::zero(); m * n];
        let mut terms: Vec<S> = Vec::with_capacity(k);
        for i in 0..m {
            for j in 0..n {
                terms.clear();
                for p in 0..k {
                    terms.push(da[i * k + p] * dh[p * n + j]);
                }
                terms.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
                out[i * n + j] = terms.iter().fold(S::zero(), |acc, &t| acc + t);
            }
        }
        let value = Tensor::from_vec(vec![m, n], out)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[h.0].requires_grad;
        Ok(self.push(value, Op::SpatialAggregate(a, h), rg))
    }

    /// 1-D convolution over the last axis with `pad` zeros prepended; with
    /// `pad == K - 1` the output is causal and has the input length.
    /// Input `[B, C_in, T]`, kernel `[C_out, C_in, K]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (tx, tk) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::shape(
                "conv1d",
                format!("expected input [B,Cin,T] and kernel [Cout,Cin,K], got {:?} and {:?}", sx, sk),
            ));
        }
        let (b_sz, c_in, t) = (sx[0], sx[1], sx[2]);
        let (c_out, k_sz) = (sk[0], sk[2]);
        if t + pad < k_sz {
            return Err(Error::shape(
                "conv1d",
                format!("kernel size {} exceeds padded length {} (input {:?})", k_sz, t + pad, sx),
            ));
        }
        let t_out = t + pad + 1 - k_sz;
        let (dx, dk) = (tx.data(), tk.data());
        let mut out = vec![S::zero(); b_sz * c_out * t_out];
        for b in 0..b_sz {
            for co in 0..c_out {
                let orow = &mut out[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                for ci in 0..c_in {
                    let xrow = &dx[(b * c_in + ci) * t..(b * c_in + ci + 1) * t];
                    let krow = &dk[(co * c_in + ci) * k_sz..(co * c_in + ci + 1) * k_sz];
                    for (tt, o) in orow.iter_mut().enumerate() {
                        let mut s = S::zero();
                        for (kk, &w) in krow.iter().enumerate() {
                            let idx = tt + kk;
                            if idx >= pad && idx - pad < t {
                                s += w * xrow[idx - pad];
                            }
                        }
                        *o += s;
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![b_sz, c_out, t_out], out)?;
        let rg = self.nodes[input.0].requires_grad || self.nodes[kernel.0].requires_grad;
        Ok(self.push(value, Op::Conv1d { input, kernel, pad }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs".to_string()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} out of range for shape {:?}", axis, first)));
        }
        let mut axis_total = 0;
        for p in parts {
            let sh = self.nodes[p.0].value.shape();
            if sh.len() != first.len()
                || sh.iter().zip(first.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("shapes {:?} and {:?} differ off-axis", first, sh)));
            }
            axis_total += sh[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::zero(); numel(&shape)];
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let d_axis = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * d_axis * inner;
                out[dst_base..dst_base + d_axis * inner]
                    .copy_from_slice(&src[src_base..src_base + d_axis * inner]);
            }
            offset += d_axis;
        }
        let value = Tensor::from_vec(shape, out)?;
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let sh = t.shape().to_vec();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} on axis {} out of bounds for shape {:?}", start, start + len, axis, sh),
            ));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sh[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = sh;
        shape[axis] = len;
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(value, Op::Slice { src, axis, start, len }, rg))
    }

    /// Split along `axis` into consecutive chunks of the given sizes.
    pub fn split(&mut self, src: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let sh = self.nodes[src.0].value.shape().to_vec();
        if axis >= sh.len() || total != sh[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {:?} do not cover axis {} of shape {:?}", sizes, axis, sh),
            ));
        }
        let mut parts = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            parts.push(self.slice(src, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, src: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let t = &self.nodes[src.0].value;
        if numel(&shape) != t.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} ({} elements) to {:?}", t.shape(), t.numel(), shape),
            ));
        }
        let value = Tensor::from_vec(shape, t.data().to_vec())?;
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(value, Op::Reshape(src), rg))
    }

    pub fn permute(&mut self, src: Var, axes: &[usize]) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let sh = t.shape();
        let mut seen = vec![false; sh.len()];
        if axes.len() != sh.len() || axes.iter().any(|&a| a >= sh.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("axes {:?} are not a permutation for shape {:?}", axes, sh)));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| sh[a]).collect();
        let value = permute_data(t, axes, &out_shape)?;
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(value, Op::Permute { src, axes: axes.to_vec() }, rg))
    }

    pub fn sum_all(&mut self, src: Var) -> Result<Var> {
        let s = self.nodes[src.0].value.data().iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(Tensor::scalar(s), Op::SumAll(src), rg))
    }

    pub fn mean_all(&mut self, src: Var) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        if t.numel() == 0 {
            return Err(Error::shape("mean_all", "empty tensor".to_string()));
        }
        let s = t.data().iter().fold(S::zero(), |acc, &x| acc + x) / S::of_f64(t.numel() as f64);
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(src), rg))
    }

    /// Broadcast-add a vector along `axis`: out[..] = src[..] + vec[i_axis].
    pub fn add_vec_axis(&mut self, src: Var, vec: Var, axis: usize) -> Result<Var> {
        let (ts, tv) = (&self.nodes[src.0].value, &self.nodes[vec.0].value);
        let sh = ts.shape().to_vec();
        if axis >= sh.len() || tv.shape() != [sh[axis]] {
            return Err(Error::shape(
                "add_vec_axis",
                format!("vector {:?} does not broadcast along axis {} of {:?}", tv.shape(), axis, sh),
            ));
        }
        let inner: usize = sh[axis + 1..].iter().product();
        let d_axis = sh[axis];
        let (ds, dv) = (ts.data(), tv.data());
        let mut out = Vec::with_capacity(ds.len());
        for (i, &x) in ds.iter().enumerate() {
            let c = (i / inner) % d_axis;
            out.push(x + dv[c]);
        }
        let value = Tensor::from_vec(sh, out)?;
        let rg = self.nodes[src.0].requires_grad || self.nodes[vec.0].requires_grad;
        Ok(self.push(value, Op::AddVecAxis { src, vec, axis }, rg))
    }

    /// Keep every `stride`-th position of the last axis.
    pub fn downsample(&mut self, src: Var, stride: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let sh = t.shape().to_vec();
        if stride == 0 || sh.is_empty() {
            return Err(Error::shape("downsample", format!("stride {} on shape {:?}", stride, sh)));
        }
        let tlen = sh[sh.len() - 1];
        let t_out = tlen.div_ceil(stride);
        let rows = t.numel() / tlen;
        let mut out = Vec::with_capacity(rows * t_out);
        for r in 0..rows {
            let row = &t.data()[r * tlen..(r + 1) * tlen];
            for tt in 0..t_out {
                out.push(row[tt * stride]);
            }
        }
        let mut shape = sh;
        let last = shape.len() - 1;
        shape[last] = t_out;
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(value, Op::Downsample { src, stride }, rg))
    }

    /// Repeat each position of the last axis `factor` times.
    pub fn upsample_repeat(&mut self, src: Var, factor: usize) -> Result<Var> {
        let t = &self.nodes[src.0].value;
        let sh = t.shape().to_vec();
        if factor == 0 || sh.is_empty() {
            return Err(Error::shape("upsample_repeat", format!("factor {} on shape {:?}", factor, sh)));
        }
        let tlen = sh[sh.len() - 1];
        let rows = t.numel() / tlen;
        let mut out = Vec::with_capacity(rows * tlen * factor);
        for r in 0..rows {
            let row = &t.data()[r * tlen..(r + 1) * tlen];
            for &x in row {
                for _ in 0..factor {
                    out.push(x);
                }
            }
        }
        let mut shape = sh;
        let last = shape.len() - 1;
        shape[last] = tlen * factor;
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.nodes[src.0].requires_grad;
        Ok(self.push(value, Op::UpsampleRepeat { src, factor }, rg))
    }

    /// Propagate gradients of a scalar `loss` to every requires_grad node
    /// reachable from it. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("backward: empty tape".to_string()));
        }
        let loss_t = &self.nodes[loss.0].value;
        if !loss_t.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss_t.shape()
            )));
        }
        // Propagate in a per-call buffer so that repeated backward calls
        // accumulate instead of re-propagating already accumulated seeds.
        let mut local: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            if local[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = local[idx].clone().expect("checked above");
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.nodes[a.0].requires_grad { accum_into(&mut local, a, &g); }
                    if self.nodes[b.0].requires_grad { accum_into(&mut local, b, &g); }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].requires_grad { accum_into(&mut local, a, &g); }
                    if self.nodes[b.0].requires_grad {
                        let neg: Vec<S> = g.iter().map(|&x| -x).collect();
                        accum_into(&mut local, b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let db = self.nodes[b.0].value.data();
                        let da: Vec<S> = g.iter().zip(db.iter()).map(|(&gi, &bi)| gi * bi).collect();
                        accum_into(&mut local, a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let da = self.nodes[a.0].value.data();
                        let db: Vec<S> = g.iter().zip(da.iter()).map(|(&gi, &ai)| gi * ai).collect();
                        accum_into(&mut local, b, &db);
                    }
                }
                Op::Scale(a, c) => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<S> = g.iter().map(|&x| x * c).collect();
                        accum_into(&mut local, a, &da);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.nodes[a.0].requires_grad {
                        let y = self.nodes[idx].value.data();
                        let da: Vec<S> =
                            g.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi * (S::one() - yi)).collect();
                        accum_into(&mut local, a, &da);
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[a.0].requires_grad {
                        let x = self.nodes[a.0].value.data();
                        let da: Vec<S> = g
                            .iter()
                            .zip(x.iter())
                            .map(|(&gi, &xi)| if xi > S::zero() { gi } else { S::zero() })
                            .collect();
                        accum_into(&mut local, a, &da);
                    }
                }
                Op::Matmul(a, b) | Op::SpatialAggregate(a, b) => {
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.nodes[a.0].requires_grad {
                        // dA = G * B^T
                        let db = self.nodes[b.0].value.data();
                        let mut da = vec![S::zero(); m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                for p in 0..k {
                                    da[i * k + p] += gij * db[p * n + j];
                                }
                            }
                        }
                        accum_into(&mut local, a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T * G
                        let dat = self.nodes[a.0].value.data();
                        let mut db = vec![S::zero(); k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = dat[i * k + p];
                                let grow = &g[i * n..(i + 1) * n];
                                let brow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    brow[j] += aip * grow[j];
                                }
                            }
                        }
                        accum_into(&mut local, b, &db);
                    }
                }
                Op::Conv1d { input, kernel, pad } => {
                    let sx = self.nodes[input.0].value.shape().to_vec();
                    let sk = self.nodes[kernel.0].value.shape().to_vec();
                    let (b_sz, c_in, t) = (sx[0], sx[1], sx[2]);
                    let (c_out, k_sz) = (sk[0], sk[2]);
                    let t_out = t + pad + 1 - k_sz;
                    if self.nodes[kernel.0].requires_grad {
                        let dx = self.nodes[input.0].value.data();
                        let mut dk = vec![S::zero(); c_out * c_in * k_sz];
                        for b in 0..b_sz {
                            for co in 0..c_out {
                                let grow = &g[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                                for ci in 0..c_in {
                                    let xrow = &dx[(b * c_in + ci) * t..(b * c_in + ci + 1) * t];
                                    let krow = &mut dk[(co * c_in + ci) * k_sz..(co * c_in + ci + 1) * k_sz];
                                    for (tt, &gv) in grow.iter().enumerate() {
                                        for (kk, kslot) in krow.iter_mut().enumerate() {
                                            let idx = tt + kk;
                                            if idx >= pad && idx - pad < t {
                                                *kslot += gv * xrow[idx - pad];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        accum_into(&mut local, kernel, &dk);
                    }
                    if self.nodes[input.0].requires_grad {
                        let dker = self.nodes[kernel.0].value.data();
                        let mut dx = vec![S::zero(); b_sz * c_in * t];
                        for b in 0..b_sz {
                            for co in 0..c_out {
                                let grow = &g[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                                for ci in 0..c_in {
                                    let krow = &dker[(co * c_in + ci) * k_sz..(co * c_in + ci + 1) * k_sz];
                                    let xrow = &mut dx[(b * c_in + ci) * t..(b * c_in + ci + 1) * t];
                                    for (tt, &gv) in grow.iter().enumerate() {
                                        for (kk, &w) in krow.iter().enumerate() {
                                            let idx = tt + kk;
                                            if idx >= pad && idx - pad < t {
                                                xrow[idx - pad] += gv * w;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        accum_into(&mut local, input, &dx);
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let axis_total = out_shape[axis];
                    let mut offset = 0;
                    for p in parts {
                        let d_axis = self.nodes[p.0].value.shape()[axis];
                        if self.nodes[p.0].requires_grad {
                            let mut dp = vec![S::zero(); self.nodes[p.0].value.numel()];
                            for o in 0..outer {
                                let src_base = (o * axis_total + offset) * inner;
                                let dst_base = o * d_axis * inner;
                                dp[dst_base..dst_base + d_axis * inner]
                                    .copy_from_slice(&g[src_base..src_base + d_axis * inner]);
                            }
                            accum_into(&mut local, p, &dp);
                        }
                        offset += d_axis;
                    }
                }
                Op::Slice { src, axis, start, len } => {
                    if self.nodes[src.0].requires_grad {
                        let sh = self.nodes[src.0].value.shape().to_vec();
                        let outer: usize = sh[..axis].iter().product();
                        let inner: usize = sh[axis + 1..].iter().product();
                        let mut ds = vec![S::zero(); self.nodes[src.0].value.numel()];
                        for o in 0..outer {
                            let dst_base = (o * sh[axis] + start) * inner;
                            let src_base = o * len * inner;
                            for i in 0..len * inner {
                                ds[dst_base + i] += g[src_base + i];
                            }
                        }
                        accum_into(&mut local, src, &ds);
                    }
                }
                Op::Reshape(src) => {
                    if self.nodes[src.0].requires_grad {
                        accum_into(&mut local, src, &g);
                    }
                }
                Op::Permute { src, axes } => {
                    if self.nodes[src.0].requires_grad {
                        let mut inverse = vec![0usize; axes.len()];
                        for (i, &a) in axes.iter().enumerate() {
                            inverse[a] = i;
                        }
                        let out_shape = self.nodes[idx].value.shape().to_vec();
                        let g_t = Tensor::from_vec(out_shape, g.clone())?;
                        let src_shape = self.nodes[src.0].value.shape().to_vec();
                        let dg = permute_data(&g_t, &inverse, &src_shape)?;
                        accum_into(&mut local, src, dg.data());
                    }
                }
                Op::SumAll(src) => {
                    if self.nodes[src.0].requires_grad {
                        let ds = vec![g[0]; self.nodes[src.0].value.numel()];
                        accum_into(&mut local, src, &ds);
                    }
                }
                Op::MeanAll(src) => {
                    if self.nodes[src.0].requires_grad {
                        let n = self.nodes[src.0].value.numel();
                        let ds = vec![g[0] / S::of_f64(n as f64); n];
                        accum_into(&mut local, src, &ds);
                    }
                }
                Op::AddVecAxis { src, vec, axis } => {
                    if self.nodes[src.0].requires_grad { accum_into(&mut local, src, &g); }
                    if self.nodes[vec.0].requires_grad {
                        let sh = self.nodes[src.0].value.shape();
                        let inner: usize = sh[axis + 1..].iter().product();
                        let d_axis = sh[axis];
                        let mut dv = vec![S::zero(); d_axis];
                        for (i, &gi) in g.iter().enumerate() {
                            let c = (i / inner) % d_axis;
                            dv[c] += gi;
                        }
                        accum_into(&mut local, vec, &dv);
                    }
                }
                Op::Downsample { src, stride } => {
                    if self.nodes[src.0].requires_grad {
                        let sh = self.nodes[src.0].value.shape();
                        let tlen = sh[sh.len() - 1];
                        let t_out = tlen.div_ceil(stride);
                        let rows = self.nodes[src.0].value.numel() / tlen;
                        let mut ds = vec![S::zero(); rows * tlen];
                        for r in 0..rows {
                            for tt in 0..t_out {
                                ds[r * tlen + tt * stride] += g[r * t_out + tt];
                            }
                        }
                        accum_into(&mut local, src, &ds);
                    }
                }
                Op::UpsampleRepeat { src, factor } => {
                    if self.nodes[src.0].requires_grad {
                        let sh = self.nodes[src.0].value.shape();
                        let tlen = sh[sh.len() - 1];
                        let rows = self.nodes[src.0].value.numel() / tlen;
                        let mut ds = vec![S::zero(); rows * tlen];
                        for r in 0..rows {
                            for s_idx in 0..tlen {
                                let mut acc = S::zero();
                                for f in 0..factor {
                                    acc += g[(r * tlen + s_idx) * factor + f];
                                }
                                ds[r * tlen + s_idx] += acc;
                            }
                        }
                        accum_into(&mut local, src, &ds);
                    }
                }
            }
        }

        // Fold this pass into the persistent per-node gradients.
        for (i, slot) in local.into_iter().enumerate() {
            if let Some(contrib) = slot {
                if self.nodes[i].requires_grad {
                    accum_into(&mut self.grads, Var(i), &contrib);
                }
            }
        }
        Ok(())
    }
}

fn accum_into<S: Scalar>(buf: &mut [Option<Vec<S>>], v: Var, contribution: &[S]) {
    let slot = &mut buf[v.0];
    match slot {
        Some(existing) => {
            for (e, &c) in existing.iter_mut().zip(contribution.iter()) {
                *e += c;
            }
        }
        None => *slot = Some(contribution.to_vec()),
    }
}

fn permute_data<S: Scalar>(t: &Tensor<S>, axes: &[usize], out_shape: &[usize]) -> Result<Tensor<S>> {
    let in_strides = strides(t.shape());
    let out_strides = strides(out_shape);
    let n = t.numel();
    let mut out = vec![S::zero(); n];
    let rank = axes.len();
    let data = t.data();
    let mut coords = vec![0usize; rank];
    for (flat, &x) in data.iter().enumerate() {
        let mut rem = flat;
        for d in 0..rank {
            coords[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        // out axis i carries input axis axes[i]
        let mut out_flat = 0;
        for (i, &a) in axes.iter().enumerate() {
            out_flat += coords[a] * out_strides[i];
        }
        out[out_flat] = x;
    }
    Tensor::from_vec(out_shape.to_vec(), out)
}
