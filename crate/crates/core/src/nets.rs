//! Stacks of 3×3 convolutions used by the radar encoder, decoder and the
//! memory encoder. Each layer is followed by ReLU except the last, whose
//! activation is chosen per stack.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::kernels::{self, ConvGeom};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::RealField;
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

/// One layer. A transposed layer upsamples by `stride` and stores its
/// kernel as `(K, K, C_out, C_in)`; a plain layer stores `(K, K, C_in, C_out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub transpose: bool,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> Vec<usize> {
        if self.transpose {
            vec![KERNEL, KERNEL, self.c_out, self.c_in]
        } else {
            vec![KERNEL, KERNEL, self.c_in, self.c_out]
        }
    }

    /// He-normal kernel, zero bias.
    pub fn init<R: Rng>(&self, rng: &mut R) -> (Tensor, Tensor) {
        let fan_in = (KERNEL * KERNEL * self.c_in) as f64;
        let d = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let shape = self.weight_shape();
        let n = shape.iter().product();
        let w = Tensor::from_parts(shape, (0..n).map(|_| d.sample(rng)).collect());
        (w, Tensor::zeros(&[self.c_out]))
    }
}

/// Value-level stack with owned weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub specs: Vec<LayerSpec>,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub last: Activation,
}

fn activate(v: &mut [f64], a: Activation) {
    match a {
        Activation::Identity => {}
        Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Sigmoid => v.iter_mut().for_each(|x| {
            *x = if *x >= 0.0 {
                1.0 / (1.0 + (-*x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }),
    }
}

impl ConvStack {
    pub fn new(specs: Vec<LayerSpec>, weights: Vec<Tensor>, biases: Vec<Tensor>, last: Activation) -> Result<Self> {
        if specs.len() != weights.len() || specs.len() != biases.len() {
            return Err(Error::InvalidArgument("conv stack needs one weight and bias per layer".into()));
        }
        for (i, (s, (w, b))) in specs.iter().zip(weights.iter().zip(&biases)).enumerate() {
            if w.shape() != s.weight_shape() {
                return Err(Error::shape("ConvStack weight", &s.weight_shape(), w.shape()));
            }
            if b.shape() != [s.c_out] {
                return Err(Error::shape("ConvStack bias", &[s.c_out], b.shape()));
            }
            if i > 0 && specs[i - 1].c_out != s.c_in {
                return Err(Error::ChannelMismatch {
                    what: "ConvStack layer chain",
                    expected: specs[i - 1].c_out,
                    actual: s.c_in,
                });
            }
        }
        Ok(ConvStack { specs, weights, biases, last })
    }

    pub fn random<R: Rng>(rng: &mut R, specs: Vec<LayerSpec>, last: Activation) -> Result<Self> {
        let (weights, biases) = specs.iter().map(|s| s.init(rng)).unzip();
        Self::new(specs, weights, biases, last)
    }

    pub fn apply(&self, x: &RealField) -> Result<RealField> {
        let (mut h, mut w, c) = x.dims();
        if self.specs.first().is_some_and(|s| s.c_in != c) {
            return Err(Error::ChannelMismatch {
                what: "ConvStack input",
                expected: self.specs[0].c_in,
                actual: c,
            });
        }
        let mut cur = x.data().to_vec();
        let n = self.specs.len();
        for (i, s) in self.specs.iter().enumerate() {
            let mut y = if s.transpose {
                let g = ConvGeom {
                    h: h * s.stride,
                    w: w * s.stride,
                    c_in: s.c_out,
                    c_out: s.c_in,
                    k: KERNEL,
                    stride: s.stride,
                    pad: PAD,
                };
                if g.out_hw() != (h, w) {
                    return Err(Error::shape("ConvStack transpose", &[h, w], &[g.out_hw().0, g.out_hw().1]));
                }
                h = g.h;
                w = g.w;
                kernels::conv2d_input_adjoint(&cur, self.weights[i].data(), g)
            } else {
                let g = ConvGeom {
                    h,
                    w,
                    c_in: s.c_in,
                    c_out: s.c_out,
                    k: KERNEL,
                    stride: s.stride,
                    pad: PAD,
                };
                (h, w) = g.out_hw();
                kernels::conv2d(&cur, self.weights[i].data(), g)
            };
            let b = self.biases[i].data();
            for (j, v) in y.iter_mut().enumerate() {
                *v += b[j % s.c_out];
            }
            activate(&mut y, if i + 1 == n { self.last } else { Activation::Relu });
            cur = y;
        }
        let c_out = self.specs.last().map_or(c, |s| s.c_out);
        RealField::new(h, w, c_out, cur)
    }
}

/// Tape version of [`ConvStack::apply`]; `x` is `(H, W, C)`.
pub fn conv_stack_var(t: &mut Tape, x: Var, specs: &[LayerSpec], weights: &[Var], biases: &[Var], last: Activation) -> Result<Var> {
    let mut cur = x;
    let n = specs.len();
    for (i, s) in specs.iter().enumerate() {
        let y = if s.transpose {
            t.conv_transpose2d(cur, weights[i], s.stride, PAD)?
        } else {
            t.conv2d(cur, weights[i], s.stride, PAD)?
        };
        let y = t.add_bcast(y, biases[i], 1)?;
        cur = match if i + 1 == n { last } else { Activation::Relu } {
            Activation::Identity => y,
            Activation::Relu => t.relu(y),
            Activation::Sigmoid => t.sigmoid(y),
        };
    }
    Ok(cur)
}

/// Stride-2 placement for a `2^k` downsample over four stages: the middle
/// stages first, then the outer ones.
pub fn stage_strides(k: usize) -> Result<[usize; 4]> {
    const ORDER: [usize; 4] = [1, 2, 3, 0];
    if k > 4 {
        return Err(Error::InvalidArgument(format!("downsample factor 2^{k} exceeds four stride-2 stages")));
    }
    let mut s = [1; 4];
    for &i in &ORDER[..k] {
        s[i] = 2;
    }
    Ok(s)
}

/// Four-stage encoder `c_in → channels[0] → channels[1] → channels[2] → c_out`.
pub fn encoder_specs(c_in: usize, channels: [usize; 3], c_out: usize, down_log2: usize) -> Result<Vec<LayerSpec>> {
    let strides = stage_strides(down_log2)?;
    let chans = [c_in, channels[0], channels[1], channels[2], c_out];
    Ok((0..4)
        .map(|i| LayerSpec {
            c_in: chans[i],
            c_out: chans[i + 1],
            stride: strides[i],
            transpose: false,
        })
        .collect())
}

/// Mirror of [`encoder_specs`]: stride-2 stages become transposed upsampling.
pub fn decoder_specs(c_in: usize, channels: [usize; 3], c_out: usize, down_log2: usize) -> Result<Vec<LayerSpec>> {
    let strides = stage_strides(down_log2)?;
    let chans = [c_in, channels[2], channels[1], channels[0], c_out];
    Ok((0..4)
        .map(|i| {
            let s = strides[3 - i];
            LayerSpec {
                c_in: chans[i],
                c_out: chans[i + 1],
                stride: s,
                transpose: s > 1,
            }
        })
        .collect())
}
