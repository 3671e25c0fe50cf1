//! Reverse-mode tape over real tensors.
//!
//! Complex values live on the tape as real tensors whose trailing axis has
//! length 2 (`re`, `im`); every complex primitive is differentiated with
//! respect to those two real coordinates independently.

use crate::autodiff::kernels::{self, BlockGeom, ConvGeom};
use crate::autodiff::params::{ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::spectral::{column_weight, half_width, irfft2_raw, rfft2_raw};
use crate::tensor::Tensor;

/// Below this modulus `arg`, `|z|` and `z/|z|` pass no gradient.
pub const BRANCH_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64>>;

enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    MulScalar { x: Var, s: Var },
    AddBcast { x: Var, b: Var, inner: usize },
    MulBcast { x: Var, b: Var, inner: usize },
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Sum(Var),
    SumAxis0(Var),
    Reshape(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Softmax { x: Var, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    Rfft2 { x: Var, h: usize, w: usize, c: usize },
    Irfft2 { z: Var, h: usize, w: usize, c: usize },
    CMul(Var, Var),
    CMulConj(Var, Var),
    CMulReal { z: Var, r: Var },
    CInnerRe(Var, Var),
    CAbs(Var),
    CArg(Var),
    CExpI(Var),
    CNormalize { z: Var, eps: f64 },
    CNormalizeOr { z: Var, fallback: Var, eps: f64 },
    BlockCMatMul { z: Var, w: Var, geom: BlockGeom },
    Custom { x: Var, name: &'static str, backward: BackwardFn },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::MulScalar { .. } => "mul_scalar",
            Op::AddBcast { .. } => "add_bcast",
            Op::MulBcast { .. } => "mul_bcast",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::SumAxis0(..) => "sum_axis0",
            Op::Reshape(..) => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Rfft2 { .. } => "rfft2",
            Op::Irfft2 { .. } => "irfft2",
            Op::CMul(..) => "cmul",
            Op::CMulConj(..) => "cmul_conj",
            Op::CMulReal { .. } => "cmul_real",
            Op::CInnerRe(..) => "cinner_re",
            Op::CAbs(..) => "cabs",
            Op::CArg(..) => "carg",
            Op::CExpI(..) => "cexp_i",
            Op::CNormalize { .. } => "cnormalize",
            Op::CNormalizeOr { .. } => "cnormalize_or",
            Op::BlockCMatMul { .. } => "block_cmatmul",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive applications. Values are computed eagerly
/// when a primitive is recorded; [`Tape::backward`] replays the record in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(what: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(what, a.shape(), b.shape()));
    }
    Ok(())
}

fn complex_shape(what: &'static str, t: &Tensor) -> Result<Vec<usize>> {
    match t.shape().split_last() {
        Some((2, rest)) => Ok(rest.to_vec()),
        _ => Err(Error::shape(what, &[2], t.shape())),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        self.push(Tensor::from_parts(shape, data), op)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// A leaf tied to a parameter slot; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: Some(id) })
    }

    /// Bind every parameter of `params` in order.
    pub fn bind(&mut self, params: &ParamSet) -> Vec<Var> {
        params
            .iter()
            .map(|(id, _, t)| self.param(id, t.clone()))
            .collect()
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(what, self.value(a), self.value(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_data(shape, data, op))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_data(shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    /// Elementwise product with a constant (non-differentiated) mask.
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.shape(x), &[mask.len()]));
        }
        let data = self.data(x).iter().zip(&mask).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_data(shape, data, Op::MulConst(x, mask)))
    }

    /// `x · s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", &[1], self.shape(s)));
        }
        let sv = self.data(s)[0];
        Ok(self.map(x, |v| v * sv, Op::MulScalar { x, s }))
    }

    fn bcast_check(&self, x: Var, b: Var, inner: usize, what: &'static str) -> Result<usize> {
        let (n, bl) = (self.value(x).len(), self.value(b).len());
        if inner == 0 || bl == 0 || n % (bl * inner) != 0 {
            return Err(Error::shape(what, &[bl, inner], self.shape(x)));
        }
        Ok(bl)
    }

    /// `x[o, j, i] + b[j]` with `x` viewed as `(outer, len(b), inner)`.
    pub fn add_bcast(&mut self, x: Var, b: Var, inner: usize) -> Result<Var> {
        let bl = self.bcast_check(x, b, inner, "add_bcast")?;
        let bd = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % bl])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_data(shape, data, Op::AddBcast { x, b, inner }))
    }

    /// `x[o, j, i] · b[j]` with `x` viewed as `(outer, len(b), inner)`.
    pub fn mul_bcast(&mut self, x: Var, b: Var, inner: usize) -> Result<Var> {
        let bl = self.bcast_check(x, b, inner, "mul_bcast")?;
        let bd = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * bd[(i / inner) % bl])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_data(shape, data, Op::MulBcast { x, b, inner }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the leading axis.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&outer, rest)) = shape.split_first() else {
            return Err(Error::shape("sum_axis0", &[1], &shape));
        };
        let n: usize = rest.iter().product();
        let mut out = vec![0.0; n];
        for o in 0..outer {
            for (s, v) in out.iter_mut().zip(&self.data(x)[o * n..(o + 1) * n]) {
                *s += v;
            }
        }
        Ok(self.push_data(rest.to_vec(), out, Op::SumAxis0(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Matrix product of 2D tensors; `trans_b` multiplies by `bᵀ`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice(), trans_b) {
            ([m, k], [k2, n], false) if k == k2 => (*m, *k, *n),
            ([m, k], [n, k2], true) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n, trans_b);
        Ok(self.push_data(vec![m, n], data, Op::MatMul { a, b, m, k, n, trans_b }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("softmax", &[1], &shape))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.push_data(shape, out, Op::Softmax { x, n }))
    }

    /// 2D convolution of `x: (H, W, C_in)` with `w: (K, K, C_in, C_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = match (sx.as_slice(), sw.as_slice()) {
            ([h, wd, ci], [k, k2, ci2, co]) if ci == ci2 && k == k2 && *h + 2 * pad >= *k && *wd + 2 * pad >= *k => {
                ConvGeom { h: *h, w: *wd, c_in: *ci, c_out: *co, k: *k, stride, pad }
            }
            _ => return Err(Error::shape("conv2d", &sx, &sw)),
        };
        let (ho, wo) = geom.out_hw();
        let data = kernels::conv2d(self.data(x), self.data(w), geom);
        Ok(self.push_data(vec![ho, wo, geom.c_out], data, Op::Conv2d { x, w, geom }))
    }

    /// Transposed convolution upsampling `x: (H, W, C_in)` by `stride` with
    /// `w: (K, K, C_out, C_in)`; output `(H·stride, W·stride, C_out)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geom = match (sx.as_slice(), sw.as_slice()) {
            ([h, wd, ci], [k, k2, co, ci2]) if ci == ci2 && k == k2 => ConvGeom {
                h: h * stride,
                w: wd * stride,
                c_in: *co,
                c_out: *ci,
                k: *k,
                stride,
                pad,
            },
            _ => return Err(Error::shape("conv_transpose2d", &sx, &sw)),
        };
        if geom.out_hw() != (sx[0], sx[1]) {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let data = kernels::conv2d_input_adjoint(self.data(x), self.data(w), geom);
        Ok(self.push_data(vec![geom.h, geom.w, geom.c_in], data, Op::ConvTranspose2d { x, w, geom }))
    }

    /// Half-spectrum forward DFT of `(H, W, C)`, giving `(H, W/2+1, C, 2)`.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [h, w, c] = s[..] else {
            return Err(Error::shape("rfft2", &[0, 0, 0], &s));
        };
        let data = rfft2_raw(self.data(x), h, w, c);
        Ok(self.push_data(vec![h, half_width(w), c, 2], data, Op::Rfft2 { x, h, w, c }))
    }

    /// Inverse of [`Tape::rfft2`] back to spatial width `w`.
    pub fn irfft2(&mut self, z: Var, w: usize) -> Result<Var> {
        let s = self.shape(z).to_vec();
        let [h, wf, c, 2] = s[..] else {
            return Err(Error::shape("irfft2", &[0, half_width(w), 0, 2], &s));
        };
        if wf != half_width(w) {
            return Err(Error::shape("irfft2", &[h, half_width(w), c, 2], &s));
        }
        let data = irfft2_raw(self.data(z), h, w, c);
        Ok(self.push_data(vec![h, w, c], data, Op::Irfft2 { z, h, w, c }))
    }

    fn complex_zip(
        &mut self,
        a: Var,
        b: Var,
        what: &'static str,
        f: impl Fn(f64, f64, f64, f64) -> (f64, f64),
        op: Op,
    ) -> Result<Var> {
        same_shape(what, self.value(a), self.value(b))?;
        complex_shape(what, self.value(a))?;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; ad.len()];
        for i in (0..ad.len()).step_by(2) {
            let (r, im) = f(ad[i], ad[i + 1], bd[i], bd[i + 1]);
            out[i] = r;
            out[i + 1] = im;
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push_data(shape, out, op))
    }

    /// Complex product `a · b`.
    pub fn cmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.complex_zip(a, b, "cmul", |ar, ai, br, bi| (ar * br - ai * bi, ar * bi + ai * br), Op::CMul(a, b))
    }

    /// Complex product `a · conj(b)`.
    pub fn cmul_conj(&mut self, a: Var, b: Var) -> Result<Var> {
        self.complex_zip(a, b, "cmul_conj", |ar, ai, br, bi| (ar * br + ai * bi, ai * br - ar * bi), Op::CMulConj(a, b))
    }

    /// Complex tensor scaled by a real tensor of the same element count.
    pub fn cmul_real(&mut self, z: Var, r: Var) -> Result<Var> {
        let zs = complex_shape("cmul_real", self.value(z))?;
        if zs != self.shape(r) {
            return Err(Error::shape("cmul_real", &zs, self.shape(r)));
        }
        let (zd, rd) = (self.data(z), self.data(r));
        let out = zd.iter().enumerate().map(|(i, v)| v * rd[i / 2]).collect();
        let shape = self.shape(z).to_vec();
        Ok(self.push_data(shape, out, Op::CMulReal { z, r }))
    }

    /// `Re(a · conj(b))` elementwise, dropping the trailing axis.
    pub fn cinner_re(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("cinner_re", self.value(a), self.value(b))?;
        let shape = complex_shape("cinner_re", self.value(a))?;
        let out = self
            .data(a)
            .chunks_exact(2)
            .zip(self.data(b).chunks_exact(2))
            .map(|(p, q)| p[0] * q[0] + p[1] * q[1])
            .collect();
        Ok(self.push_data(shape, out, Op::CInnerRe(a, b)))
    }

    pub fn cabs(&mut self, z: Var) -> Result<Var> {
        let shape = complex_shape("cabs", self.value(z))?;
        let out = self.data(z).chunks_exact(2).map(|p| p[0].hypot(p[1])).collect();
        Ok(self.push_data(shape, out, Op::CAbs(z)))
    }

    /// `arg(z)` in `(-π, π]`, zero at the origin.
    pub fn carg(&mut self, z: Var) -> Result<Var> {
        let shape = complex_shape("carg", self.value(z))?;
        let out = self
            .data(z)
            .chunks_exact(2)
            .map(|p| crate::spectral::arg(num_complex::Complex64::new(p[0], p[1])))
            .collect();
        Ok(self.push_data(shape, out, Op::CArg(z)))
    }

    /// Unit phasors `exp(jθ)`; appends the complex axis.
    pub fn cexp_i(&mut self, theta: Var) -> Var {
        let mut shape = self.shape(theta).to_vec();
        shape.push(2);
        let mut out = Vec::with_capacity(self.value(theta).len() * 2);
        for &t in self.data(theta) {
            out.push(t.cos());
            out.push(t.sin());
        }
        self.push_data(shape, out, Op::CExpI(theta))
    }

    /// `z/|z|`, or `1 + 0j` where `|z| < eps`.
    pub fn cnormalize(&mut self, z: Var, eps: f64) -> Result<Var> {
        complex_shape("cnormalize", self.value(z))?;
        let mut out = self.data(z).to_vec();
        for p in out.chunks_exact_mut(2) {
            let r = p[0].hypot(p[1]);
            if r < eps {
                p[0] = 1.0;
                p[1] = 0.0;
            } else {
                p[0] /= r;
                p[1] /= r;
            }
        }
        let shape = self.shape(z).to_vec();
        Ok(self.push_data(shape, out, Op::CNormalize { z, eps }))
    }

    /// `z/|z|`, or the matching `fallback` entry where `|z| < eps`.
    pub fn cnormalize_or(&mut self, z: Var, fallback: Var, eps: f64) -> Result<Var> {
        same_shape("cnormalize_or", self.value(z), self.value(fallback))?;
        complex_shape("cnormalize_or", self.value(z))?;
        let fd = self.data(fallback);
        let mut out = self.data(z).to_vec();
        for (i, p) in out.chunks_exact_mut(2).enumerate() {
            let r = p[0].hypot(p[1]);
            if r < eps {
                p[0] = fd[2 * i];
                p[1] = fd[2 * i + 1];
            } else {
                p[0] /= r;
                p[1] /= r;
            }
        }
        let shape = self.shape(z).to_vec();
        Ok(self.push_data(shape, out, Op::CNormalizeOr { z, fallback, eps }))
    }

    /// Block-diagonal complex channel mixing at every bin.
    /// `z: (..., C_in, 2)`, `w: (n_blocks, b_out, b_in, 2)`.
    pub fn block_cmatmul(&mut self, z: Var, w: Var) -> Result<Var> {
        let (sz, sw) = (self.shape(z).to_vec(), self.shape(w).to_vec());
        let zc = complex_shape("block_cmatmul", self.value(z))?;
        let [nb, bo, bi, 2] = sw[..] else {
            return Err(Error::shape("block_cmatmul", &[0, 0, 0, 2], &sw));
        };
        let Some((&c_in, lead)) = zc.split_last() else {
            return Err(Error::shape("block_cmatmul", &[nb * bi, 2], &sz));
        };
        if c_in != nb * bi {
            return Err(Error::ChannelMismatch {
                what: "block_cmatmul",
                expected: nb * bi,
                actual: c_in,
            });
        }
        let geom = BlockGeom {
            n_bins: lead.iter().product(),
            n_blocks: nb,
            b_in: bi,
            b_out: bo,
        };
        let data = kernels::block_cmatmul(self.data(z), self.data(w), geom);
        let mut shape = lead.to_vec();
        shape.extend([nb * bo, 2]);
        Ok(self.push_data(shape, data, Op::BlockCMatMul { z, w, geom }))
    }

    /// A user-defined unary primitive. `backward(x, y, dy)` returns `dx`.
    pub fn custom(
        &mut self,
        x: Var,
        name: &'static str,
        forward: impl Fn(&Tensor) -> Tensor,
        backward: impl Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + 'static,
    ) -> Var {
        let y = forward(self.value(x));
        self.push(
            y,
            Op::Custom {
                x,
                name,
                backward: Box::new(backward),
            },
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (target, contrib) in self.adjoint(node, &g) {
                if contrib.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NanInBackward {
                        op: node.op.name(),
                        node: i,
                    });
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn adjoint(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(bd).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(ad).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                let ga = g.iter().zip(bd).map(|(g, b)| g / b).collect();
                let gb = g
                    .iter()
                    .zip(bd)
                    .zip(y)
                    .map(|((g, b), y)| -g * y / b)
                    .collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::MulConst(x, mask) => vec![(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())],
            Op::MulScalar { x, s } => {
                let sv = self.data(*s)[0];
                let gs = g.iter().zip(self.data(*x)).map(|(g, x)| g * x).sum();
                vec![(*x, g.iter().map(|v| v * sv).collect()), (*s, vec![gs])]
            }
            Op::AddBcast { x, b, inner } => {
                let bl = self.value(*b).len();
                let mut gb = vec![0.0; bl];
                for (i, v) in g.iter().enumerate() {
                    gb[(i / inner) % bl] += v;
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::MulBcast { x, b, inner } => {
                let (xd, bd) = (self.data(*x), self.data(*b));
                let bl = bd.len();
                let mut gb = vec![0.0; bl];
                let mut gx = vec![0.0; g.len()];
                for (i, v) in g.iter().enumerate() {
                    let j = (i / inner) % bl;
                    gb[j] += v * xd[i];
                    gx[i] = v * bd[j];
                }
                vec![(*x, gx), (*b, gb)]
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                vec![(*x, g.iter().zip(xd).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Sigmoid(x) => vec![(*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Sqrt(x) => vec![(
                *x,
                g.iter()
                    .zip(y)
                    .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect(),
            )],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::SumAxis0(x) => {
                let n = g.len();
                let total = self.value(*x).len();
                vec![(*x, (0..total).map(|i| g[i % n]).collect())]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let (m, k, n) = (*m, *k, *n);
                if *trans_b {
                    vec![
                        (*a, kernels::matmul(g, bd, m, n, k, false)),
                        (*b, kernels::matmul_at(g, ad, m, n, k)),
                    ]
                } else {
                    vec![
                        (*a, kernels::matmul(g, bd, m, n, k, true)),
                        (*b, kernels::matmul_at(ad, g, m, k, n)),
                    ]
                }
            }
            Op::Softmax { x, n } => {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks_exact(*n).zip(y.chunks_exact(*n)).zip(gx.chunks_exact_mut(*n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Conv2d { x, w, geom } => vec![
                (*x, kernels::conv2d_input_adjoint(g, self.data(*w), *geom)),
                (*w, kernels::conv2d_weight_adjoint(self.data(*x), g, *geom)),
            ],
            Op::ConvTranspose2d { x, w, geom } => vec![
                (*x, kernels::conv2d(g, self.data(*w), *geom)),
                (*w, kernels::conv2d_weight_adjoint(g, self.data(*x), *geom)),
            ],
            Op::Rfft2 { x, h, w, c } => {
                let wf = half_width(*w);
                let mut gz = g.to_vec();
                for (i, p) in gz.chunks_exact_mut(2).enumerate() {
                    let l = (i / c) % wf;
                    let s = (h * w) as f64 / column_weight(l, *w);
                    p[0] *= s;
                    p[1] *= s;
                }
                vec![(*x, irfft2_raw(&gz, *h, *w, *c))]
            }
            Op::Irfft2 { z, h, w, c } => {
                let wf = half_width(*w);
                let mut gz = rfft2_raw(g, *h, *w, *c);
                let hw = (h * w) as f64;
                for (i, p) in gz.chunks_exact_mut(2).enumerate() {
                    let l = (i / c) % wf;
                    let s = column_weight(l, *w) / hw;
                    p[0] *= s;
                    p[1] *= s;
                }
                vec![(*z, gz)]
            }
            Op::CMul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in (0..g.len()).step_by(2) {
                    let (gr, gi) = (g[i], g[i + 1]);
                    // conj(b)·g and conj(a)·g
                    ga[i] = bd[i] * gr + bd[i + 1] * gi;
                    ga[i + 1] = bd[i] * gi - bd[i + 1] * gr;
                    gb[i] = ad[i] * gr + ad[i + 1] * gi;
                    gb[i + 1] = ad[i] * gi - ad[i + 1] * gr;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::CMulConj(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in (0..g.len()).step_by(2) {
                    let (gr, gi) = (g[i], g[i + 1]);
                    // b·g and a·conj(g)
                    ga[i] = bd[i] * gr - bd[i + 1] * gi;
                    ga[i + 1] = bd[i] * gi + bd[i + 1] * gr;
                    gb[i] = ad[i] * gr + ad[i + 1] * gi;
                    gb[i + 1] = ad[i + 1] * gr - ad[i] * gi;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::CMulReal { z, r } => {
                let (zd, rd) = (self.data(*z), self.data(*r));
                let gz = g.iter().enumerate().map(|(i, v)| v * rd[i / 2]).collect();
                let gr = (0..rd.len())
                    .map(|j| g[2 * j] * zd[2 * j] + g[2 * j + 1] * zd[2 * j + 1])
                    .collect();
                vec![(*z, gz), (*r, gr)]
            }
            Op::CInnerRe(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = bd.iter().enumerate().map(|(i, v)| v * g[i / 2]).collect();
                let gb = ad.iter().enumerate().map(|(i, v)| v * g[i / 2]).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::CAbs(z) => {
                let zd = self.data(*z);
                let mut gz = vec![0.0; zd.len()];
                for (j, (&gv, &r)) in g.iter().zip(y).enumerate() {
                    if r >= BRANCH_EPS {
                        gz[2 * j] = gv * zd[2 * j] / r;
                        gz[2 * j + 1] = gv * zd[2 * j + 1] / r;
                    }
                }
                vec![(*z, gz)]
            }
            Op::CArg(z) => {
                let zd = self.data(*z);
                let mut gz = vec![0.0; zd.len()];
                for (j, &gv) in g.iter().enumerate() {
                    let (re, im) = (zd[2 * j], zd[2 * j + 1]);
                    let r2 = re * re + im * im;
                    if r2.sqrt() >= BRANCH_EPS {
                        gz[2 * j] = -gv * im / r2;
                        gz[2 * j + 1] = gv * re / r2;
                    }
                }
                vec![(*z, gz)]
            }
            Op::CExpI(theta) => {
                let gt = (0..g.len() / 2)
                    .map(|j| -g[2 * j] * y[2 * j + 1] + g[2 * j + 1] * y[2 * j])
                    .collect();
                vec![(*theta, gt)]
            }
            Op::CNormalize { z, eps } => vec![(*z, normalize_adjoint(self.data(*z), g, *eps, None).0)],
            Op::CNormalizeOr { z, fallback, eps } => {
                let (gz, gf) = normalize_adjoint(self.data(*z), g, *eps, Some(()));
                vec![(*z, gz), (*fallback, gf)]
            }
            Op::BlockCMatMul { z, w, geom } => {
                let (gz, gw) = kernels::block_cmatmul_adjoint(self.data(*z), self.data(*w), g, *geom);
                vec![(*z, gz), (*w, gw)]
            }
            Op::Custom { x, backward, .. } => vec![(*x, backward(self.value(*x), &node.value, g))],
        }
    }
}

/// Adjoint of `z ↦ z/|z|`; returns `(dz, d_fallback)`. Entries below `eps`
/// (or below [`BRANCH_EPS`]) give no gradient to `z`.
fn normalize_adjoint(zd: &[f64], g: &[f64], eps: f64, fallback: Option<()>) -> (Vec<f64>, Vec<f64>) {
    let mut gz = vec![0.0; zd.len()];
    let mut gf = if fallback.is_some() { vec![0.0; zd.len()] } else { Vec::new() };
    for j in 0..zd.len() / 2 {
        let (re, im) = (zd[2 * j], zd[2 * j + 1]);
        let r = re.hypot(im);
        let (gr, gi) = (g[2 * j], g[2 * j + 1]);
        if r < eps {
            if fallback.is_some() {
                gf[2 * j] = gr;
                gf[2 * j + 1] = gi;
            }
            continue;
        }
        if r < BRANCH_EPS {
            continue;
        }
        let t = (gr * im - gi * re) / (r * r * r);
        gz[2 * j] = im * t;
        gz[2 * j + 1] = -re * t;
    }
    (gz, gf)
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of a leaf. `None` if the leaf did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients laid out like `params`; unbound or unused slots are zero.
    pub fn param_grads(&self, params: &ParamSet) -> ParamSet {
        let mut out = params.zeros_like();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (a, b) in out.get_mut(id).data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        out
    }
}
