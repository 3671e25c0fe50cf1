//! Adaptive Fourier Neural Operator channel mixing.
//!
//! At every frequency bin the channel vector is passed through a two-layer
//! complex MLP whose weight matrices are block-diagonal. The same weights
//! are shared by every bin. The activation is split-ReLU: the real and
//! imaginary parts are rectified independently.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::ComplexSpectrum;
use crate::tensor::Tensor;

/// Block-diagonal complex weights `W1: C_in → C_hidden`, `W2: C_hidden → C_out`.
///
/// Only the diagonal blocks are stored: `w1` is `(n_blocks, C_hidden/n, C_in/n)`
/// and `w2` is `(n_blocks, C_out/n, C_hidden/n)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AfnoWeights {
    c_in: usize,
    c_hidden: usize,
    c_out: usize,
    n_blocks: usize,
    pub w1: Vec<Complex64>,
    pub b1: Option<Vec<Complex64>>,
    pub w2: Vec<Complex64>,
    pub b2: Option<Vec<Complex64>>,
}

impl AfnoWeights {
    fn check_dims(c_in: usize, c_hidden: usize, c_out: usize, n_blocks: usize) -> Result<()> {
        if n_blocks == 0 {
            return Err(Error::InvalidArgument("n_blocks must be positive".into()));
        }
        for (name, c) in [("c_in", c_in), ("c_hidden", c_hidden), ("c_out", c_out)] {
            if c == 0 || c % n_blocks != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {c} is not a positive multiple of n_blocks = {n_blocks}"
                )));
            }
        }
        Ok(())
    }

    pub fn zeros(c_in: usize, c_hidden: usize, c_out: usize, n_blocks: usize, bias: bool) -> Result<Self> {
        Self::check_dims(c_in, c_hidden, c_out, n_blocks)?;
        let zero = Complex64::new(0.0, 0.0);
        Ok(AfnoWeights {
            c_in,
            c_hidden,
            c_out,
            n_blocks,
            w1: vec![zero; c_hidden * c_in / n_blocks],
            b1: bias.then(|| vec![zero; c_hidden]),
            w2: vec![zero; c_out * c_hidden / n_blocks],
            b2: bias.then(|| vec![zero; c_out]),
        })
    }

    /// Identity blocks (requires `c_in = c_hidden = c_out`) and zero biases.
    pub fn identity(c: usize, n_blocks: usize, bias: bool) -> Result<Self> {
        let mut w = Self::zeros(c, c, c, n_blocks, bias)?;
        let b = c / n_blocks;
        for blk in 0..n_blocks {
            for i in 0..b {
                w.w1[(blk * b + i) * b + i] = Complex64::new(1.0, 0.0);
                w.w2[(blk * b + i) * b + i] = Complex64::new(1.0, 0.0);
            }
        }
        Ok(w)
    }

    /// Random blocks with re/im drawn independently so each complex entry
    /// has variance `1/block_in`; biases start at zero.
    pub fn random<R: Rng>(rng: &mut R, c_in: usize, c_hidden: usize, c_out: usize, n_blocks: usize, bias: bool) -> Result<Self> {
        let mut w = Self::zeros(c_in, c_hidden, c_out, n_blocks, bias)?;
        let fill = |v: &mut [Complex64], fan_in: usize, rng: &mut R| {
            let d = Normal::new(0.0, (0.5 / fan_in as f64).sqrt()).unwrap();
            for z in v.iter_mut() {
                *z = Complex64::new(d.sample(rng), d.sample(rng));
            }
        };
        fill(&mut w.w1, c_in / n_blocks, rng);
        fill(&mut w.w2, c_hidden / n_blocks, rng);
        Ok(w)
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn c_hidden(&self) -> usize {
        self.c_hidden
    }
    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }
    pub fn has_bias(&self) -> bool {
        self.b1.is_some()
    }

    /// Parameter tensors in storage order: `w1, [b1], w2, [b2]`.
    pub fn to_tensors(&self) -> Vec<(&'static str, Tensor)> {
        let nb = self.n_blocks;
        let mut out = vec![("w1", complex_tensor(&self.w1, vec![nb, self.c_hidden / nb, self.c_in / nb, 2]))];
        if let Some(b1) = &self.b1 {
            out.push(("b1", complex_tensor(b1, vec![self.c_hidden, 2])));
        }
        out.push(("w2", complex_tensor(&self.w2, vec![nb, self.c_out / nb, self.c_hidden / nb, 2])));
        if let Some(b2) = &self.b2 {
            out.push(("b2", complex_tensor(b2, vec![self.c_out, 2])));
        }
        out
    }

    /// Rebuild from tensors in [`AfnoWeights::to_tensors`] order.
    pub fn from_tensors(w1: &Tensor, b1: Option<&Tensor>, w2: &Tensor, b2: Option<&Tensor>) -> Result<Self> {
        let [nb, bh, bi, 2] = w1.shape()[..] else {
            return Err(Error::shape("AfnoWeights w1", &[0, 0, 0, 2], w1.shape()));
        };
        let [nb2, bo, bh2, 2] = w2.shape()[..] else {
            return Err(Error::shape("AfnoWeights w2", &[0, 0, 0, 2], w2.shape()));
        };
        if nb2 != nb || bh2 != bh {
            return Err(Error::shape("AfnoWeights w2", &[nb, bo, bh, 2], w2.shape()));
        }
        let mut w = Self::zeros(nb * bi, nb * bh, nb * bo, nb, false)?;
        w.w1 = from_interleaved(w1.data());
        w.w2 = from_interleaved(w2.data());
        if let Some(b) = b1 {
            if b.shape() != [nb * bh, 2] {
                return Err(Error::shape("AfnoWeights b1", &[nb * bh, 2], b.shape()));
            }
            w.b1 = Some(from_interleaved(b.data()));
        }
        if let Some(b) = b2 {
            if b.shape() != [nb * bo, 2] {
                return Err(Error::shape("AfnoWeights b2", &[nb * bo, 2], b.shape()));
            }
            w.b2 = Some(from_interleaved(b.data()));
        }
        Ok(w)
    }

    fn mix(&self, z: &[Complex64], out: &mut [Complex64]) {
        let nb = self.n_blocks;
        let (bi, bh, bo) = (self.c_in / nb, self.c_hidden / nb, self.c_out / nb);
        let mut hidden = vec![Complex64::new(0.0, 0.0); self.c_hidden];
        for blk in 0..nb {
            for o in 0..bh {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..bi {
                    acc += self.w1[(blk * bh + o) * bi + i] * z[blk * bi + i];
                }
                hidden[blk * bh + o] = acc;
            }
        }
        if let Some(b1) = &self.b1 {
            for (h, b) in hidden.iter_mut().zip(b1) {
                *h += b;
            }
        }
        for h in hidden.iter_mut() {
            *h = Complex64::new(h.re.max(0.0), h.im.max(0.0));
        }
        for blk in 0..nb {
            for o in 0..bo {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..bh {
                    acc += self.w2[(blk * bo + o) * bh + i] * hidden[blk * bh + i];
                }
                out[blk * bo + o] = acc;
            }
        }
        if let Some(b2) = &self.b2 {
            for (y, b) in out.iter_mut().zip(b2) {
                *y += b;
            }
        }
    }
}

pub(crate) fn complex_tensor(v: &[Complex64], shape: Vec<usize>) -> Tensor {
    let mut d = Vec::with_capacity(v.len() * 2);
    for z in v {
        d.push(z.re);
        d.push(z.im);
    }
    Tensor::from_parts(shape, d)
}

pub(crate) fn from_interleaved(d: &[f64]) -> Vec<Complex64> {
    d.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

/// `Ẑ(h,w,·) = W₂·σ(W₁·Z(h,w,·) + b₁) + b₂` at every bin.
pub fn afno_apply(z: &ComplexSpectrum, w: &AfnoWeights) -> Result<ComplexSpectrum> {
    if z.channels() != w.c_in {
        return Err(Error::ChannelMismatch {
            what: "afno_apply",
            expected: w.c_in,
            actual: z.channels(),
        });
    }
    let shape = z.shape().with_channels(w.c_out);
    let mut out = vec![Complex64::new(0.0, 0.0); shape.len()];
    for (zin, zout) in z.data().chunks_exact(w.c_in).zip(out.chunks_exact_mut(w.c_out)) {
        w.mix(zin, zout);
    }
    ComplexSpectrum::new(shape, out)
}

/// Channel alignment of the memory query: the same two-layer block MLP,
/// mapping `C_in` to the memory slot width.
pub fn channel_align(f_in: &ComplexSpectrum, w: &AfnoWeights) -> Result<ComplexSpectrum> {
    afno_apply(f_in, w)
}

/// Tape handles for one set of AFNO weights.
#[derive(Debug, Clone, Copy)]
pub struct AfnoVars {
    pub w1: Var,
    pub b1: Option<Var>,
    pub w2: Var,
    pub b2: Option<Var>,
}

/// Tape version of [`afno_apply`] on an interleaved `(..., C, 2)` tensor.
pub fn afno_var(t: &mut Tape, z: Var, w: &AfnoVars) -> Result<Var> {
    let mut h = t.block_cmatmul(z, w.w1)?;
    if let Some(b1) = w.b1 {
        h = t.add_bcast(h, b1, 1)?;
    }
    let h = t.relu(h);
    let mut y = t.block_cmatmul(h, w.w2)?;
    if let Some(b2) = w.b2 {
        y = t.add_bcast(y, b2, 1)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SpectrumShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spectrum(rng: &mut ChaCha8Rng, shape: SpectrumShape) -> ComplexSpectrum {
        let d = (0..shape.len())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexSpectrum::new(shape, d).unwrap()
    }

    /// Dense `C_out × C_in` matrices with the blocks embedded on the diagonal.
    fn dense(w: &AfnoWeights) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
        let nb = w.n_blocks();
        let (bi, bh, bo) = (w.c_in() / nb, w.c_hidden() / nb, w.c_out() / nb);
        let zero = Complex64::new(0.0, 0.0);
        let mut d1 = vec![vec![zero; w.c_in()]; w.c_hidden()];
        let mut d2 = vec![vec![zero; w.c_hidden()]; w.c_out()];
        for blk in 0..nb {
            for o in 0..bh {
                for i in 0..bi {
                    d1[blk * bh + o][blk * bi + i] = w.w1[(blk * bh + o) * bi + i];
                }
            }
            for o in 0..bo {
                for i in 0..bh {
                    d2[blk * bo + o][blk * bh + i] = w.w2[(blk * bo + o) * bh + i];
                }
            }
        }
        (d1, d2)
    }

    #[test]
    fn identity_on_nonnegative_input() {
        let shape = SpectrumShape::half(4, 4, 4);
        let d = (0..shape.len())
            .map(|i| Complex64::new((i % 5) as f64, (i % 3) as f64 * 0.5))
            .collect();
        let z = ComplexSpectrum::new(shape, d).unwrap();
        let w = AfnoWeights::identity(4, 2, true).unwrap();
        assert_eq!(afno_apply(&z, &w).unwrap(), z);
        assert_eq!(channel_align(&z, &w).unwrap(), z);
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = AfnoWeights::random(&mut rng, 8, 8, 8, 4, true).unwrap();
        let z = ComplexSpectrum::zeros(SpectrumShape::half(3, 4, 8));
        let y = afno_apply(&z, &w).unwrap();
        assert!(y.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn matches_dense_embedding_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(ci, ch, co, nb) in &[(8, 8, 8, 2), (8, 16, 4, 4), (16, 16, 16, 4), (6, 6, 12, 3)] {
            let mut w = AfnoWeights::random(&mut rng, ci, ch, co, nb, true).unwrap();
            for b in w.b1.iter_mut().chain(w.b2.iter_mut()) {
                for v in b.iter_mut() {
                    *v = Complex64::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
                }
            }
            let z = random_spectrum(&mut rng, SpectrumShape::half(4, 6, ci));
            let y = afno_apply(&z, &w).unwrap();
            let (d1, d2) = dense(&w);
            for (bin, zin) in z.data().chunks_exact(ci).enumerate() {
                let mut hid: Vec<Complex64> = (0..ch)
                    .map(|o| (0..ci).map(|i| d1[o][i] * zin[i]).sum::<Complex64>() + w.b1.as_ref().unwrap()[o])
                    .collect();
                for h in &mut hid {
                    *h = Complex64::new(h.re.max(0.0), h.im.max(0.0));
                }
                for o in 0..co {
                    let want = (0..ch).map(|i| d2[o][i] * hid[i]).sum::<Complex64>() + w.b2.as_ref().unwrap()[o];
                    assert!((y.data()[bin * co + o] - want).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_version_matches_value_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = AfnoWeights::random(&mut rng, 8, 8, 8, 2, true).unwrap();
        w.b1.as_mut().unwrap()[3] = Complex64::new(0.3, -0.1);
        let z = random_spectrum(&mut rng, SpectrumShape::half(4, 4, 8));
        let mut t = Tape::new();
        let zt = t.constant(z.to_tensor());
        let tensors = w.to_tensors();
        let vars: Vec<Var> = tensors.into_iter().map(|(_, x)| t.constant(x)).collect();
        let av = AfnoVars { w1: vars[0], b1: Some(vars[1]), w2: vars[2], b2: Some(vars[3]) };
        let y = afno_var(&mut t, zt, &av).unwrap();
        let want = afno_apply(&z, &w).unwrap().to_tensor();
        for (a, b) in t.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn channel_mismatch_and_bad_blocks() {
        let w = AfnoWeights::identity(4, 2, false).unwrap();
        let z = ComplexSpectrum::zeros(SpectrumShape::half(2, 2, 3));
        assert!(matches!(afno_apply(&z, &w), Err(Error::ChannelMismatch { .. })));
        assert!(AfnoWeights::zeros(6, 6, 6, 4, true).is_err());
    }

    #[test]
    fn tensors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = AfnoWeights::random(&mut rng, 4, 8, 4, 2, true).unwrap();
        let t = w.to_tensors();
        let back = AfnoWeights::from_tensors(&t[0].1, Some(&t[1].1), &t[2].1, Some(&t[3].1)).unwrap();
        assert_eq!(back, w);
    }
}
