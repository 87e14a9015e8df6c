//! Forward implementations and adjoint rules for every primitive.
//!
//! Adjoints are expressed through the public ops themselves, never through raw
//! buffer math — that closure property is what makes `backward(create_graph)`
//! differentiable a second time.

use super::{check_finite, pairwise_sum, Graph, Op, Var};
use std::rc::Rc;

impl Var {
    fn assert_same_graph(&self, other: &Var, op: &str) {
        assert!(
            Rc::ptr_eq(&self.graph.0, &other.graph.0),
            "{op}: variables belong to different graphs"
        );
    }

    fn binary(
        &self,
        other: &Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Var {
        self.assert_same_graph(other, name);
        let g = self.graph.clone();
        let (data, shape, rg) = {
            let inner = g.0.borrow();
            let na = &inner.nodes[self.id];
            let nb = &inner.nodes[other.id];
            assert!(
                na.shape == nb.shape,
                "{name}: shape mismatch {:?} vs {:?}",
                na.shape,
                nb.shape
            );
            let data: Vec<f64> = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
            (data, na.shape.clone(), na.requires_grad || nb.requires_grad)
        };
        check_finite(&data, name);
        g.push(data, shape, op(self.id, other.id), rg)
    }

    fn unary(&self, name: &str, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Var {
        let g = self.graph.clone();
        let (data, shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            let data: Vec<f64> = n.data.iter().map(|&x| f(x)).collect();
            (data, n.shape.clone(), n.requires_grad)
        };
        check_finite(&data, name);
        g.push(data, shape, op(self.id), rg)
    }

    pub fn add(&self, other: &Var) -> Var {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn neg(&self) -> Var {
        self.unary("neg", |x| -x, Op::Neg)
    }

    pub fn scale(&self, c: f64) -> Var {
        assert!(c.is_finite(), "scale: non-finite factor {c}");
        self.unary("scale", |x| x * c, |a| Op::Scale(a, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        assert!(c.is_finite(), "add_scalar: non-finite addend {c}");
        self.unary("add_scalar", |x| x + c, |a| Op::AddScalar(a, c))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary("sigmoid", sigmoid_scalar, Op::Sigmoid)
    }

    pub fn tanh(&self) -> Var {
        self.unary("tanh", f64::tanh, Op::Tanh)
    }

    pub fn exp(&self) -> Var {
        self.unary("exp", f64::exp, Op::Exp)
    }

    pub fn sqrt(&self) -> Var {
        self.unary("sqrt", f64::sqrt, Op::Sqrt)
    }

    pub fn recip(&self) -> Var {
        self.unary("recip", |x| 1.0 / x, Op::Recip)
    }

    pub fn sin(&self) -> Var {
        self.unary("sin", f64::sin, Op::Sin)
    }

    pub fn cos(&self) -> Var {
        self.unary("cos", f64::cos, Op::Cos)
    }

    /// silu(x) = x * sigmoid(x), built from primitives.
    pub fn silu(&self) -> Var {
        self.mul(&self.sigmoid())
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    /// 2-D matrix product `(m,k) x (k,n)`.
    pub fn matmul(&self, other: &Var) -> Var {
        self.assert_same_graph(other, "matmul");
        let g = self.graph.clone();
        let (data, m, k, n, rg) = {
            let inner = g.0.borrow();
            let na = &inner.nodes[self.id];
            let nb = &inner.nodes[other.id];
            assert!(
                na.shape.len() == 2 && nb.shape.len() == 2,
                "matmul: expects 2-D operands, got {:?} and {:?}",
                na.shape,
                nb.shape
            );
            let (m, k) = (na.shape[0], na.shape[1]);
            let (k2, n) = (nb.shape[0], nb.shape[1]);
            assert!(
                k == k2,
                "matmul: shape mismatch {:?} vs {:?} (inner dims {k} != {k2})",
                na.shape,
                nb.shape
            );
            let a = &na.data;
            let b = &nb.data;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for kk in 0..k {
                    let aik = a[i * k + kk];
                    let brow = &b[kk * n..kk * n + n];
                    let orow = &mut out[i * n..i * n + n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
            (out, m, k, n, na.requires_grad || nb.requires_grad)
        };
        check_finite(&data, "matmul");
        g.push(data, vec![m, n], Op::Matmul { a: self.id, b: other.id, m, k, n }, rg)
    }

    /// 2-D transpose.
    pub fn t(&self) -> Var {
        let g = self.graph.clone();
        let (data, shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert!(n.shape.len() == 2, "transpose: expects 2-D, got {:?}", n.shape);
            let (r, c) = (n.shape[0], n.shape[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = n.data[i * c + j];
                }
            }
            (out, vec![c, r], n.requires_grad)
        };
        g.push(data, shape, Op::Transpose(self.id), rg)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let g = self.graph.clone();
        let (data, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert_eq!(
                n.data.len(),
                shape.iter().product::<usize>(),
                "reshape: cannot view {:?} as {:?}",
                n.shape,
                shape
            );
            (n.data.clone(), n.requires_grad)
        };
        g.push(data, shape.to_vec(), Op::Reshape(self.id), rg)
    }

    /// Pairwise sum of all entries; result is a scalar (shape `[]`).
    pub fn sum_all(&self) -> Var {
        let g = self.graph.clone();
        let (data, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            (vec![pairwise_sum(&n.data)], n.requires_grad)
        };
        check_finite(&data, "sum_all");
        g.push(data, vec![], Op::SumAll(self.id), rg)
    }

    pub fn mean_all(&self) -> Var {
        let n = self.numel();
        assert!(n > 0, "mean_all: empty tensor");
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Pairwise sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let g = self.graph.clone();
        let (data, out_shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert!(
                axis < n.shape.len(),
                "sum_axis: axis {axis} out of range for shape {:?}",
                n.shape
            );
            let outer: usize = n.shape[..axis].iter().product();
            let mid = n.shape[axis];
            let inner_len: usize = n.shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner_len];
            let mut col = vec![0.0; mid];
            for o in 0..outer {
                for i in 0..inner_len {
                    for (m, c) in col.iter_mut().enumerate() {
                        *c = n.data[(o * mid + m) * inner_len + i];
                    }
                    out[o * inner_len + i] = pairwise_sum(&col);
                }
            }
            let mut out_shape = n.shape.clone();
            out_shape.remove(axis);
            (out, out_shape, n.requires_grad)
        };
        check_finite(&data, "sum_axis");
        g.push(data, out_shape, Op::SumAxis { a: self.id, axis }, rg)
    }

    pub fn mean_axis(&self, axis: usize) -> Var {
        let mid = self.shape()[axis];
        assert!(mid > 0, "mean_axis: empty axis {axis}");
        self.sum_axis(axis).scale(1.0 / mid as f64)
    }

    /// Fill a shape with a scalar's value.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var {
        let g = self.graph.clone();
        let (data, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert_eq!(n.data.len(), 1, "broadcast_scalar: source has shape {:?}", n.shape);
            (vec![n.data[0]; shape.iter().product()], n.requires_grad)
        };
        g.push(data, shape.to_vec(), Op::BroadcastScalar(self.id), rg)
    }

    /// Repeat a size-1 axis `reps` times.
    pub fn repeat_axis(&self, axis: usize, reps: usize) -> Var {
        let g = self.graph.clone();
        let (data, out_shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert!(
                axis < n.shape.len() && n.shape[axis] == 1,
                "repeat_axis: axis {axis} of shape {:?} is not 1",
                n.shape
            );
            assert!(reps > 0, "repeat_axis: zero repetitions");
            let outer: usize = n.shape[..axis].iter().product();
            let inner_len: usize = n.shape[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * reps * inner_len];
            for o in 0..outer {
                let src = &n.data[o * inner_len..(o + 1) * inner_len];
                for r in 0..reps {
                    let dst = (o * reps + r) * inner_len;
                    out[dst..dst + inner_len].copy_from_slice(src);
                }
            }
            let mut out_shape = n.shape.clone();
            out_shape[axis] = reps;
            (out, out_shape, n.requires_grad)
        };
        g.push(data, out_shape, Op::RepeatAxis { a: self.id, axis, reps }, rg)
    }

    /// Contiguous slice along the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Var {
        let g = self.graph.clone();
        let (data, out_shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert!(!n.shape.is_empty(), "slice_last: scalar input");
            let last = *n.shape.last().unwrap();
            assert!(
                start + len <= last && len > 0,
                "slice_last: range {start}..{} out of last axis {last}",
                start + len
            );
            let rows = n.data.len() / last;
            let mut out = vec![0.0; rows * len];
            for r in 0..rows {
                out[r * len..(r + 1) * len]
                    .copy_from_slice(&n.data[r * last + start..r * last + start + len]);
            }
            let mut out_shape = n.shape.clone();
            *out_shape.last_mut().unwrap() = len;
            (out, out_shape, n.requires_grad)
        };
        g.push(data, out_shape, Op::SliceLast { a: self.id, start, len }, rg)
    }

    /// Zero-pad the last axis to `total`, placing the input at `start`.
    pub fn pad_last(&self, total: usize, start: usize) -> Var {
        let g = self.graph.clone();
        let (data, out_shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert!(!n.shape.is_empty(), "pad_last: scalar input");
            let last = *n.shape.last().unwrap();
            assert!(
                start + last <= total,
                "pad_last: input last axis {last} at offset {start} exceeds {total}"
            );
            let rows = n.data.len() / last;
            let mut out = vec![0.0; rows * total];
            for r in 0..rows {
                out[r * total + start..r * total + start + last]
                    .copy_from_slice(&n.data[r * last..(r + 1) * last]);
            }
            let mut out_shape = n.shape.clone();
            *out_shape.last_mut().unwrap() = total;
            (out, out_shape, n.requires_grad)
        };
        g.push(data, out_shape, Op::PadLast { a: self.id, total, start }, rg)
    }

    /// Select rows (axis 0); indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Var {
        let g = self.graph.clone();
        let (data, out_shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert!(!n.shape.is_empty(), "gather_rows: scalar input");
            let rows = n.shape[0];
            let inner_len: usize = n.shape[1..].iter().product();
            let mut out = vec![0.0; idx.len() * inner_len];
            for (e, &r) in idx.iter().enumerate() {
                assert!(r < rows, "gather_rows: index {r} out of {rows} rows");
                out[e * inner_len..(e + 1) * inner_len]
                    .copy_from_slice(&n.data[r * inner_len..(r + 1) * inner_len]);
            }
            let mut out_shape = n.shape.clone();
            out_shape[0] = idx.len();
            (out, out_shape, n.requires_grad)
        };
        g.push(
            data,
            out_shape,
            Op::GatherRows { a: self.id, idx: Rc::new(idx.to_vec()) },
            rg,
        )
    }

    /// Sum rows into `rows` bins, accumulating in ascending input-row order
    /// (bitwise equal to the brute-force loop).
    pub fn scatter_sum_rows(&self, idx: &[usize], rows: usize) -> Var {
        let g = self.graph.clone();
        let (data, out_shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert!(!n.shape.is_empty(), "scatter_sum_rows: scalar input");
            assert_eq!(
                n.shape[0],
                idx.len(),
                "scatter_sum_rows: {} input rows but {} indices",
                n.shape[0],
                idx.len()
            );
            let inner_len: usize = n.shape[1..].iter().product();
            let mut out = vec![0.0; rows * inner_len];
            for (e, &r) in idx.iter().enumerate() {
                assert!(r < rows, "scatter_sum_rows: index {r} out of {rows} rows");
                for j in 0..inner_len {
                    out[r * inner_len + j] += n.data[e * inner_len + j];
                }
            }
            let mut out_shape = n.shape.clone();
            out_shape[0] = rows;
            (out, out_shape, n.requires_grad)
        };
        check_finite(&data, "scatter_sum_rows");
        g.push(
            data,
            out_shape,
            Op::ScatterSumRows { a: self.id, idx: Rc::new(idx.to_vec()), rows },
            rg,
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Var {
        let g = self.graph.clone();
        let (data, shape, rg) = {
            let inner = g.0.borrow();
            let n = &inner.nodes[self.id];
            assert!(!n.shape.is_empty(), "softmax_last: scalar input");
            let cols = *n.shape.last().unwrap();
            assert!(cols > 0, "softmax_last: empty last axis");
            let rows = n.data.len() / cols;
            let mut out = vec![0.0; n.data.len()];
            for r in 0..rows {
                let row = &n.data[r * cols..(r + 1) * cols];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    out[r * cols + j] = e;
                    denom += e;
                }
                for j in 0..cols {
                    out[r * cols + j] /= denom;
                }
            }
            (out, n.shape.clone(), n.requires_grad)
        };
        check_finite(&data, "softmax_last");
        g.push(data, shape, Op::SoftmaxLast(self.id), rg)
    }

    // --- composite helpers on the last axis ---

    fn last_axis(&self) -> usize {
        let rank = self.shape().len();
        assert!(rank >= 1, "operation needs at least one axis");
        rank - 1
    }

    /// Mean over the last axis, keeping it as size 1.
    pub fn mean_last_keep(&self) -> Var {
        let axis = self.last_axis();
        let mut keep = self.shape();
        keep[axis] = 1;
        self.mean_axis(axis).reshape(&keep)
    }

    /// Population variance over the last axis, keeping it as size 1.
    pub fn var_last_keep(&self) -> Var {
        let axis = self.last_axis();
        let d = self.shape()[axis];
        let mu = self.mean_last_keep();
        let xc = self.sub(&mu.repeat_axis(axis, d));
        xc.square().mean_last_keep()
    }

    /// Row normalization over the last axis: `(x - mean) / sqrt(var + eps)`,
    /// without learned affine parameters.
    pub fn layer_norm_rows(&self, eps: f64) -> Var {
        let axis = self.last_axis();
        let d = self.shape()[axis];
        let mu = self.mean_last_keep();
        let xc = self.sub(&mu.repeat_axis(axis, d));
        let var = xc.square().mean_last_keep();
        let inv = var.add_scalar(eps).sqrt().recip();
        xc.mul(&inv.repeat_axis(axis, d))
    }

    /// Add a rank-1 bias `(d,)` to every row of a `(n, d)` tensor.
    pub fn add_bias(&self, bias: &Var) -> Var {
        let shape = self.shape();
        let bshape = bias.shape();
        assert!(
            shape.len() == 2 && bshape.len() == 1 && bshape[0] == shape[1],
            "add_bias: shape mismatch {:?} vs {:?}",
            shape,
            bshape
        );
        if shape[0] == 0 {
            return self.clone();
        }
        self.add(&bias.reshape(&[1, shape[1]]).repeat_axis(0, shape[0]))
    }
}

/// Concatenate along the last axis; leading axes must match.
pub fn concat_last(parts: &[&Var]) -> Var {
    assert!(!parts.is_empty(), "concat_last: no inputs");
    let g = parts[0].graph.clone();
    for p in parts.iter().skip(1) {
        parts[0].assert_same_graph(p, "concat_last");
    }
    let (data, out_shape, rg) = {
        let inner = g.0.borrow();
        let lead = {
            let s = &inner.nodes[parts[0].id].shape;
            assert!(!s.is_empty(), "concat_last: scalar input");
            s[..s.len() - 1].to_vec()
        };
        let mut lasts = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &inner.nodes[p.id].shape;
            assert!(
                s[..s.len() - 1] == lead[..],
                "concat_last: shape mismatch {:?} vs leading {:?}",
                s,
                lead
            );
            lasts.push(*s.last().unwrap());
        }
        let total: usize = lasts.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut at = 0;
            for (p, &len) in parts.iter().zip(&lasts) {
                let src = &inner.nodes[p.id].data[r * len..(r + 1) * len];
                out[r * total + at..r * total + at + len].copy_from_slice(src);
                at += len;
            }
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let rg = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
        (out, out_shape, rg)
    };
    g.push(data, out_shape, Op::ConcatLast(parts.iter().map(|p| p.id).collect()), rg)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Adjoint rules
// ---------------------------------------------------------------------------

/// Vector-Jacobian products for `op`, returned as `(parent, contribution)`
/// pairs for parents that require grad. Rules only use public primitives.
pub(crate) fn vjp(graph: &Graph, out_id: usize, op: &Op, g: &Var) -> Vec<(usize, Var)> {
    let var = |id: usize| Var { graph: graph.clone(), id };
    let rg = |id: usize| graph.0.borrow().nodes[id].requires_grad;
    let shape_of = |id: usize| graph.0.borrow().nodes[id].shape.clone();
    let mut out: Vec<(usize, Var)> = Vec::new();

    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                out.push((*a, g.clone()));
            }
            if rg(*b) {
                out.push((*b, g.clone()));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                out.push((*a, g.clone()));
            }
            if rg(*b) {
                out.push((*b, g.neg()));
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                out.push((*a, g.mul(&var(*b))));
            }
            if rg(*b) {
                out.push((*b, g.mul(&var(*a))));
            }
        }
        Op::Neg(a) => {
            if rg(*a) {
                out.push((*a, g.neg()));
            }
        }
        Op::Scale(a, c) => {
            if rg(*a) {
                out.push((*a, g.scale(*c)));
            }
        }
        Op::AddScalar(a, _) => {
            if rg(*a) {
                out.push((*a, g.clone()));
            }
        }
        Op::Matmul { a, b, .. } => {
            if rg(*a) {
                out.push((*a, g.matmul(&var(*b).t())));
            }
            if rg(*b) {
                out.push((*b, var(*a).t().matmul(g)));
            }
        }
        Op::Transpose(a) => {
            if rg(*a) {
                out.push((*a, g.t()));
            }
        }
        Op::Reshape(a) => {
            if rg(*a) {
                out.push((*a, g.reshape(&shape_of(*a))));
            }
        }
        Op::SumAll(a) => {
            if rg(*a) {
                out.push((*a, g.broadcast_scalar(&shape_of(*a))));
            }
        }
        Op::SumAxis { a, axis } => {
            if rg(*a) {
                let s = shape_of(*a);
                let mut keep = s.clone();
                keep[*axis] = 1;
                out.push((*a, g.reshape(&keep).repeat_axis(*axis, s[*axis])));
            }
        }
        Op::BroadcastScalar(a) => {
            if rg(*a) {
                out.push((*a, g.sum_all()));
            }
        }
        Op::RepeatAxis { a, axis, .. } => {
            if rg(*a) {
                out.push((*a, g.sum_axis(*axis).reshape(&shape_of(*a))));
            }
        }
        Op::ConcatLast(parts) => {
            let mut start = 0;
            for &p in parts {
                let len = *shape_of(p).last().unwrap();
                if rg(p) {
                    out.push((p, g.slice_last(start, len)));
                }
                start += len;
            }
        }
        Op::SliceLast { a, start, .. } => {
            if rg(*a) {
                let total = *shape_of(*a).last().unwrap();
                out.push((*a, g.pad_last(total, *start)));
            }
        }
        Op::PadLast { a, start, .. } => {
            if rg(*a) {
                let len = *shape_of(*a).last().unwrap();
                out.push((*a, g.slice_last(*start, len)));
            }
        }
        Op::GatherRows { a, idx } => {
            if rg(*a) {
                let rows = shape_of(*a)[0];
                out.push((*a, g.scatter_sum_rows(idx, rows)));
            }
        }
        Op::ScatterSumRows { a, idx, .. } => {
            if rg(*a) {
                out.push((*a, g.gather_rows(idx)));
            }
        }
        Op::Sigmoid(a) => {
            if rg(*a) {
                let y = var(out_id);
                out.push((*a, g.mul(&y).mul(&y.neg().add_scalar(1.0))));
            }
        }
        Op::Tanh(a) => {
            if rg(*a) {
                let y = var(out_id);
                out.push((*a, g.mul(&y.square().neg().add_scalar(1.0))));
            }
        }
        Op::Exp(a) => {
            if rg(*a) {
                out.push((*a, g.mul(&var(out_id))));
            }
        }
        Op::Sqrt(a) => {
            if rg(*a) {
                out.push((*a, g.mul(&var(out_id).recip()).scale(0.5)));
            }
        }
        Op::Recip(a) => {
            if rg(*a) {
                let y = var(out_id);
                out.push((*a, g.mul(&y.square()).neg()));
            }
        }
        Op::Sin(a) => {
            if rg(*a) {
                out.push((*a, g.mul(&var(*a).cos())));
            }
        }
        Op::Cos(a) => {
            if rg(*a) {
                out.push((*a, g.mul(&var(*a).sin()).neg()));
            }
        }
        Op::SoftmaxLast(a) => {
            if rg(*a) {
                let y = var(out_id);
                let axis = y.last_axis();
                let cols = y.shape()[axis];
                let gy = g.mul(&y);
                let mut keep = y.shape();
                keep[axis] = 1;
                let s = gy.sum_axis(axis).reshape(&keep).repeat_axis(axis, cols);
                out.push((*a, y.mul(&g.sub(&s))));
            }
        }
    }
    out
}
