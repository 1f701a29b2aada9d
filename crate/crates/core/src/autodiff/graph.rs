//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Node ids are handed
//! out in creation order, which is already a topological order, so the
//! backward sweep walks the node list in reverse. `backward` borrows the
//! graph immutably and may be called more than once; each call returns an
//! independent [`Gradients`] map.

use super::tensor::{
    broadcast_binary, broadcast_shape, conv1d_backward, conv1d_forward, gemm, mul_reduce,
    numel, reduce_to, ConvGeom, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Broadcast(Var),
    Reshape(Var),
    Transpose(Var),
    IndexSelect {
        input: Var,
        axis: usize,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Computation tape. Confined to one thread; build one per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `[outer, axis, inner]` factorisation of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Consumes the graph, keeping only the value of `v`.
    pub fn into_value(mut self, v: Var) -> Tensor {
        self.nodes.swap_remove(v.0).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), &[a, b])
    }

    /// "Same"-padded 1D convolution of `x: [batch, c_in, len]` with
    /// `w: [c_out, c_in, kernel]` (odd kernel) and optional `bias: [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || sw[2] % 2 == 0 || dilation == 0 {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            len: sx[2],
            c_out: sw[0],
            kernel: sw[2],
            dilation,
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape("conv1d bias", self.shape(b), &[geom.c_out]));
            }
        }
        let out = conv1d_forward(
            geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts(vec![geom.batch, geom.c_out, geom.len], out);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push("conv1d", value, Op::Conv1d { x, w, bias, geom }, &inputs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let out = Tensor::scalar(self.value(a).mean());
        self.push("mean", out, Op::Mean(a), &[a])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::from_parts(shape, data);
        self.push(
            "concat",
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        self.push("slice", value, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Expands size-1 axes to `shape` (rank must match).
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a);
        match broadcast_shape(src, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast", src, shape)),
        }
        let zeros = Tensor::zeros(shape);
        let out = broadcast_binary(&zeros, self.value(a), "broadcast", |_, y| y)?;
        self.push("broadcast", out, Op::Broadcast(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Gathers entries along `axis` by `index` (repeats allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("index_select axis {axis} of {shape:?}")));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for axis of extent {}",
                shape[axis]
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * n + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = index.len();
        let value = Tensor::from_parts(out_shape, data);
        self.push(
            "index_select",
            value,
            Op::IndexSelect {
                input: a,
                axis,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if numel(loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    *existing = existing.add(&delta).expect("gradient shapes match")
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape()));
                acc(*b, reduce_to(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape()));
                acc(*b, reduce_to(g, val(*b).shape()).scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, mul_reduce(g, val(*b), val(*a).shape()));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, mul_reduce(g, val(*a), val(*b).shape()));
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::Matmul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                    acc(*a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, false);
                    acc(*b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Conv1d { x, w, bias, geom } => {
                let want_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) =
                    conv1d_backward(*geom, val(*x).data(), val(*w).data(), g.data(), want_dx);
                if want_dx {
                    acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), dx));
                }
                acc(*w, Tensor::from_parts(val(*w).shape().to_vec(), dw));
                if let Some(b) = bias {
                    acc(*b, Tensor::from_parts(vec![geom.c_out], db));
                }
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y)).unwrap();
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y)).unwrap();
                acc(*a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })
                    .unwrap();
                acc(*a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(val(*a), |gi, x| 2.0 * x * gi).unwrap();
                acc(*a, d);
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                acc(*a, Tensor::full(val(*a).shape(), gs));
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Tensor::full(val(*a).shape(), g.data()[0] / n));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let shape = val(v).shape();
                    let n = shape[*axis];
                    let mut part = Vec::with_capacity(numel(shape));
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    offset += n;
                    acc(v, Tensor::from_parts(shape.to_vec(), part));
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = g.shape()[*axis];
                let mut full = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*input, Tensor::from_parts(shape.to_vec(), full));
            }
            Op::Broadcast(a) => acc(*a, reduce_to(g, val(*a).shape())),
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape()).unwrap()),
            Op::Transpose(a) => acc(*a, g.transpose().unwrap()),
            Op::IndexSelect { input, axis, index } => {
                let shape = val(*input).shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut full = vec![0.0; numel(shape)];
                for o in 0..outer {
                    for (j, &i) in index.iter().enumerate() {
                        let src = (o * index.len() + j) * inner;
                        let dst = (o * n + i) * inner;
                        for c in 0..inner {
                            full[dst + c] += g.data()[src + c];
                        }
                    }
                }
                acc(*input, Tensor::from_parts(shape.to_vec(), full));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 4], &[1., -2., 3., 0.5]));
        let w = g.constant(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1., -2., 3., 0.5]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter_x() {
        let xs = [0.5, -1.5, 2.0];
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[1, 3]));
        let x = g.constant(t(&[3, 1], &xs));
        let z = g.matmul(w, x).unwrap();
        let s = g.sigmoid(z).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(w).unwrap().data();
        for (gi, xi) in gw.iter().zip(xs) {
            assert!((gi - 0.25 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[1e200]));
        match g.square(a) {
            Err(Error::NonFinite(op)) => assert_eq!(op, "square"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shared_leaf_accumulates_once_per_use() {
        // loss = sum(x * x + x) -> 2x + 1
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1., 2., 3.]));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3., 5., 7.]);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let unused = g.param(t(&[3], &[1., 2., 3.]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn index_select_repeats_rows() {
        let mut g = Graph::new();
        let h = g.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let r = g.index_select(h, 0, &[0, 0, 1, 1, 1]).unwrap();
        assert_eq!(g.value(r).data(), &[1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]);
        let loss = g.sum(r).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(h).unwrap().data(), &[2., 2., 3., 3.]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1., 2.]));
        let b = g.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let s = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }
}
