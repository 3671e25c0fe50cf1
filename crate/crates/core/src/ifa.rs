//! Inverted frequency attention: a learned per-bin complex filter plus a
//! gated reinjection of whatever the filter removed.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::{ComplexSpectrum, SpectrumShape};

pub const GATE_INIT: f64 = 0.1;
pub const ATTENTION_INIT_NOISE: f64 = 0.02;

/// Per-bin, per-channel complex weights `W_learned`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyAttention {
    pub weights: ComplexSpectrum,
}

impl FrequencyAttention {
    pub fn ones(shape: SpectrumShape) -> Self {
        let data = vec![Complex64::new(1.0, 0.0); shape.len()];
        FrequencyAttention {
            weights: ComplexSpectrum::from_parts(shape, data),
        }
    }

    /// All-ones plus independent `N(0, 0.02²)` noise on re and im.
    pub fn near_identity<R: Rng>(rng: &mut R, shape: SpectrumShape) -> Self {
        let d = Normal::new(0.0, ATTENTION_INIT_NOISE).unwrap();
        let data = (0..shape.len())
            .map(|_| Complex64::new(1.0 + d.sample(rng), d.sample(rng)))
            .collect();
        FrequencyAttention {
            weights: ComplexSpectrum::from_parts(shape, data),
        }
    }
}

/// Real gate per channel, broadcast over every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct HighFreqGate {
    pub w_high: Vec<f64>,
}

impl HighFreqGate {
    pub fn new(w_high: Vec<f64>) -> Result<Self> {
        if w_high.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "HighFreqGate" });
        }
        Ok(HighFreqGate { w_high })
    }

    pub fn constant(c: usize, value: f64) -> Self {
        HighFreqGate {
            w_high: vec![value; c],
        }
    }
}

/// `F_out = W_learned ⊙ F_in`.
pub fn freq_attention(f_in: &ComplexSpectrum, w: &FrequencyAttention) -> Result<ComplexSpectrum> {
    f_in.ensure_same_shape(&w.weights, "freq_attention")?;
    let data = f_in
        .data()
        .iter()
        .zip(w.weights.data())
        .map(|(a, b)| a * b)
        .collect();
    Ok(ComplexSpectrum::from_parts(f_in.shape(), data))
}

/// `F_out + w_high ⊙ (F_in − F_out)` with the gate broadcast over bins.
pub fn ifa_apply(f_in: &ComplexSpectrum, w: &FrequencyAttention, g: &HighFreqGate) -> Result<ComplexSpectrum> {
    let c = f_in.channels();
    if g.w_high.len() != c {
        return Err(Error::ChannelMismatch {
            what: "ifa_apply gate",
            expected: c,
            actual: g.w_high.len(),
        });
    }
    let f_out = freq_attention(f_in, w)?;
    let data = f_in
        .data()
        .iter()
        .zip(f_out.data())
        .enumerate()
        .map(|(i, (&x, &y))| y + g.w_high[i % c] * (x - y))
        .collect();
    Ok(ComplexSpectrum::from_parts(f_in.shape(), data))
}

/// Tape version of [`freq_attention`].
pub fn freq_attention_var(t: &mut Tape, f_in: Var, w_learned: Var) -> Result<Var> {
    t.cmul(w_learned, f_in)
}

/// Tape version of [`ifa_apply`]; `gate` has one entry per channel.
pub fn ifa_var(t: &mut Tape, f_in: Var, w_learned: Var, gate: Var) -> Result<Var> {
    let f_out = freq_attention_var(t, f_in, w_learned)?;
    let high = t.sub(f_in, f_out)?;
    let gated = t.mul_bcast(high, gate, 2)?;
    t.add(f_out, gated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: SpectrumShape) -> ComplexSpectrum {
        let d = (0..shape.len())
            .map(|_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        ComplexSpectrum::new(shape, d).unwrap()
    }

    #[test]
    fn attention_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = SpectrumShape::half(4, 6, 3);
        let f = random(&mut rng, shape);
        assert_eq!(freq_attention(&f, &FrequencyAttention::ones(shape)).unwrap(), f);
        let zero = FrequencyAttention {
            weights: ComplexSpectrum::zeros(shape),
        };
        assert!(freq_attention(&f, &zero).unwrap().data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn gate_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = SpectrumShape::half(4, 4, 3);
        let f = random(&mut rng, shape);
        let w = FrequencyAttention::near_identity(&mut rng, shape);
        let full = ifa_apply(&f, &w, &HighFreqGate::constant(3, 1.0)).unwrap();
        for (a, b) in full.data().iter().zip(f.data()) {
            assert!((a - b).norm() <= 1e-15 * (1.0 + b.norm()) * 4.0);
        }
        let none = ifa_apply(&f, &w, &HighFreqGate::constant(3, 0.0)).unwrap();
        assert_eq!(none, freq_attention(&f, &w).unwrap());
    }

    #[test]
    fn matches_per_entry_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = SpectrumShape::half(3, 5, 4);
        let f = random(&mut rng, shape);
        let w = FrequencyAttention {
            weights: random(&mut rng, shape),
        };
        let g = HighFreqGate::new((0..4).map(|_| rng.random_range(-1.0..2.0)).collect()).unwrap();
        let y = ifa_apply(&f, &w, &g).unwrap();
        for k in 0..3 {
            for l in 0..3 {
                for c in 0..4 {
                    let (x, m) = (f.get(k, l, c), w.weights.get(k, l, c));
                    let out = Complex64::new(m.re * x.re - m.im * x.im, m.re * x.im + m.im * x.re);
                    let want = out + g.w_high[c] * (x - out);
                    assert!((y.get(k, l, c) - want).norm() <= 1e-15 * (1.0 + want.norm()) * 4.0);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let f = ComplexSpectrum::zeros(SpectrumShape::half(2, 2, 2));
        let w = FrequencyAttention::ones(SpectrumShape::half(2, 4, 2));
        assert!(freq_attention(&f, &w).is_err());
        let w = FrequencyAttention::ones(f.shape());
        assert!(ifa_apply(&f, &w, &HighFreqGate::constant(3, 0.1)).is_err());
    }
}
