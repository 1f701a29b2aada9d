use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// A tensor is immutable once built; gradient accumulation lives on the
/// [`Graph`](super::Graph), not on the tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    /// I.i.d. standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// I.i.d. uniform entries on `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self + c * other`, same shapes.
    pub fn axpy(&self, c: f64, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Row `i` of the leading axis as a tensor of the remaining shape.
    pub fn index_first(&self, i: usize) -> Result<Self> {
        let Some((&n, rest)) = self.shape.split_first() else {
            return Err(Error::invalid("index_first on a scalar"));
        };
        if i >= n {
            return Err(Error::invalid(format!("index {i} out of range for {n}")));
        }
        let width = numel(rest);
        Ok(Self::from_parts(
            rest.to_vec(),
            self.data[i * width..(i + 1) * width].to_vec(),
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by the graph's forward and backward passes.

/// `c = a · b (+ c when accumulate)` for row-major `a: [m, k]`, `b: [k, n]`.
/// `trans_a` / `trans_b` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address only inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a "same"-padded 1D convolution over `[batch, c_in, len]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// Unfolds one batch item into `[c_in * kernel, len]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (t_len, pad) = (self.len, self.pad() as isize);
        for ci in 0..self.c_in {
            let row_in = &x[ci * t_len..(ci + 1) * t_len];
            for k in 0..self.kernel {
                let shift = (k * self.dilation) as isize - pad;
                let row = &mut cols[(ci * self.kernel + k) * t_len..][..t_len];
                for (t, out) in row.iter_mut().enumerate() {
                    let src = t as isize + shift;
                    *out = if src >= 0 && (src as usize) < t_len {
                        row_in[src as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (t_len, pad) = (self.len, self.pad() as isize);
        for ci in 0..self.c_in {
            for k in 0..self.kernel {
                let shift = (k * self.dilation) as isize - pad;
                let row = &cols[(ci * self.kernel + k) * t_len..][..t_len];
                for (t, &g) in row.iter().enumerate() {
                    let dst = t as isize + shift;
                    if dst >= 0 && (dst as usize) < t_len {
                        dx[ci * t_len + dst as usize] += g;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward(g: ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let ck = g.c_in * g.kernel;
    let mut out = vec![0.0; g.batch * g.c_out * g.len];
    if g.kernel == 1 && g.len == 1 {
        // Single-frame inputs: the whole batch is one `[batch, c_in] · w^T`.
        gemm(g.batch, g.c_in, g.c_out, x, false, w, true, &mut out, false);
        if let Some(bias) = bias {
            for row in out.chunks_mut(g.c_out) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        return out;
    }
    let mut cols = vec![0.0; if g.kernel == 1 { 0 } else { ck * g.len }];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.len..(b + 1) * g.c_in * g.len];
        let ob = &mut out[b * g.c_out * g.len..(b + 1) * g.c_out * g.len];
        let src: &[f64] = if g.kernel == 1 {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        gemm(g.c_out, ck, g.len, w, false, src, false, ob, false);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(g.len).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)` for the convolution given the output gradient.
pub(crate) fn conv1d_backward(
    g: ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ck = g.c_in * g.kernel;
    let mut dx = vec![0.0; if want_dx { x.len() } else { 0 }];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = vec![0.0; if g.kernel == 1 { 0 } else { ck * g.len }];
    if g.kernel == 1 && g.len == 1 {
        for row in dout.chunks(g.c_out) {
            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        gemm(g.c_out, g.batch, g.c_in, dout, true, x, false, &mut dw, true);
        if want_dx {
            gemm(g.batch, g.c_out, g.c_in, dout, false, w, false, &mut dx, true);
        }
        return (dx, dw, db);
    }
    let mut dcols = vec![0.0; if want_dx && g.kernel != 1 { ck * g.len } else { 0 }];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.len..(b + 1) * g.c_in * g.len];
        let gb = &dout[b * g.c_out * g.len..(b + 1) * g.c_out * g.len];
        for (co, row) in gb.chunks(g.len).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        let src: &[f64] = if g.kernel == 1 {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        // dw[c_out, ck] += gb[c_out, len] · src[ck, len]^T
        gemm(g.c_out, g.len, ck, gb, false, src, true, &mut dw, true);
        if want_dx {
            let dxb = &mut dx[b * g.c_in * g.len..(b + 1) * g.c_in * g.len];
            if g.kernel == 1 {
                gemm(ck, g.c_out, g.len, w, true, gb, false, dxb, true);
            } else {
                gemm(ck, g.c_out, g.len, w, true, gb, false, &mut dcols, false);
                g.col2im(&dcols, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Output shape of a rank-equal broadcast, where each axis is equal or 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` with the matching flat offsets into
/// two broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; numel(&out)];
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| {
        data[i] = f(a.data[ia], b.data[ib]);
    });
    Ok(Tensor::from_parts(out, data))
}

/// Sums `grad` (of the broadcast output shape) back down to `shape`.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let st = broadcast_strides(shape, &grad.shape);
    let zeros = vec![0; shape.len()];
    let mut data = vec![0.0; numel(shape)];
    for_each_broadcast(&grad.shape, &st, &zeros, |i, it, _| {
        data[it] += grad.data[i];
    });
    Tensor::from_parts(shape.to_vec(), data)
}

/// Element-wise product of `grad` with the broadcast partner, then reduced
/// to `shape`.
pub(crate) fn mul_reduce(grad: &Tensor, other: &Tensor, shape: &[usize]) -> Tensor {
    let prod = broadcast_binary(grad, other, "mul", |g, o| g * o)
        .expect("shapes validated in forward");
    reduce_to(&prod, shape)
}
