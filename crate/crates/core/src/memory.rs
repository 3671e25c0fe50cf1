//! Frequency memory: a bank of unit-modulus spectral slots, attention-based
//! matching of a query spectrum against it, and rotation of hidden phases
//! toward the matched pattern.

use num_complex::Complex64;
use rand::Rng;

use crate::afno::{channel_align, complex_tensor, from_interleaved, AfnoWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{conv_stack_var, Activation, ConvStack};
use crate::sequence::RadarSequence;
use crate::spectral::{arg, dft2_forward, unit_or_one, wrap_phase, ComplexSpectrum, RealField, UNIT_EPS};
use crate::tensor::Tensor;

/// Tolerance on stored slot magnitudes.
pub const SLOT_UNIT_TOL: f64 = 1e-9;
/// A matched coefficient larger than this cannot come from a unit bank.
pub const MATCH_BOUND_TOL: f64 = 1e-6;
/// Below this matched magnitude the hidden coefficient is left untouched.
pub const PHASE_ALIGN_EPS: f64 = 1e-8;

/// `S` slots of `C` unit-modulus complex entries, row-major `(S, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    s: usize,
    c: usize,
    slots: Vec<Complex64>,
    pub frozen: bool,
}

impl MemoryBank {
    pub fn new(s: usize, c: usize, slots: Vec<Complex64>) -> Result<Self> {
        if s == 0 || c == 0 {
            return Err(Error::InvalidArgument("memory bank needs at least one slot and channel".into()));
        }
        if slots.len() != s * c {
            return Err(Error::shape("MemoryBank", &[s, c], &[slots.len()]));
        }
        if let Some((i, m)) = slots.iter().enumerate().find(|(_, m)| (m.norm() - 1.0).abs() > SLOT_UNIT_TOL) {
            return Err(Error::MatchMagnitude {
                index: i,
                magnitude: m.norm(),
            });
        }
        Ok(MemoryBank { s, c, slots, frozen: false })
    }

    /// Unit phasors with phases uniform on `[-π, π)`.
    pub fn random<R: Rng>(rng: &mut R, s: usize, c: usize) -> Result<Self> {
        let slots = (0..s * c)
            .map(|_| Complex64::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)))
            .collect();
        Self::new(s, c, slots)
    }

    pub fn slots(&self) -> &[Complex64] {
        &self.slots
    }

    pub fn num_slots(&self) -> usize {
        self.s
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    /// `(S, C, 2)` interleaved.
    pub fn to_tensor(&self) -> Tensor {
        complex_tensor(&self.slots, vec![self.s, self.c, 2])
    }

    /// Reads `(S, C, 2)` and projects every entry back onto the unit circle.
    pub fn from_tensor_normalized(t: &Tensor) -> Result<Self> {
        let [s, c, 2] = t.shape()[..] else {
            return Err(Error::shape("MemoryBank", &[0, 0, 2], t.shape()));
        };
        let slots = from_interleaved(t.data()).into_iter().map(|m| unit_or_one(m, UNIT_EPS)).collect();
        Self::new(s, c, slots)
    }
}

/// Project every complex entry of an `(S, C, 2)` tensor onto the unit circle.
pub fn renormalize_slots(t: &mut Tensor) {
    for p in t.data_mut().chunks_exact_mut(2) {
        let u = unit_or_one(Complex64::new(p[0], p[1]), UNIT_EPS);
        p[0] = u.re;
        p[1] = u.im;
    }
}

/// Slot attention `alpha: (H, W_f, S)` and matched spectrum `(H, W_f, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub alpha: Tensor,
    pub f_match: ComplexSpectrum,
}

/// Softmax over slots of `Σ_d Re(q̂_d · conj(m̂_{i,d}))`, then the
/// attention-weighted sum of slots.
pub fn memory_match(query: &ComplexSpectrum, bank: &MemoryBank) -> Result<MatchResult> {
    let c = bank.c;
    if query.channels() != c {
        return Err(Error::ChannelMismatch {
            what: "memory_match",
            expected: c,
            actual: query.channels(),
        });
    }
    let shape = query.shape();
    let slots: Vec<Complex64> = bank.slots.iter().map(|&m| unit_or_one(m, UNIT_EPS)).collect();
    let n_bins = shape.h * shape.w_f;
    let mut alpha = vec![0.0; n_bins * bank.s];
    let mut out = vec![Complex64::new(0.0, 0.0); shape.len()];
    for (bin, q) in query.data().chunks_exact(c).enumerate() {
        let q: Vec<Complex64> = q.iter().map(|&v| unit_or_one(v, UNIT_EPS)).collect();
        let a = &mut alpha[bin * bank.s..(bin + 1) * bank.s];
        for (i, slot) in slots.chunks_exact(c).enumerate() {
            a[i] = q.iter().zip(slot).map(|(x, m)| x.re * m.re + x.im * m.im).sum();
        }
        let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in a.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in a.iter_mut() {
            *v /= z;
        }
        let o = &mut out[bin * c..(bin + 1) * c];
        for (i, slot) in slots.chunks_exact(c).enumerate() {
            for (acc, m) in o.iter_mut().zip(slot) {
                *acc += a[i] * m;
            }
        }
    }
    Ok(MatchResult {
        alpha: Tensor::from_parts(vec![shape.h, shape.w_f, bank.s], alpha),
        f_match: ComplexSpectrum::new(shape, out)?,
    })
}

/// Intermediate quantities of [`phase_align`], one entry per coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseAlignDetail {
    pub output: ComplexSpectrum,
    pub sim: Vec<f64>,
    pub w_phase: Vec<f64>,
    pub delta_phi: Vec<f64>,
}

/// Rotate each hidden coefficient by `w·ΔΦ` where `sim = |m|·cos(Φ̂_hid − Φ_m)`,
/// `w = (1 − sim)/2` and `ΔΦ = wrap(Φ_m − Φ̂_hid)`. Entries with `|m| < eps`
/// pass through.
pub fn phase_align(f_hid: &ComplexSpectrum, f_match: &ComplexSpectrum, eps: f64) -> Result<ComplexSpectrum> {
    Ok(phase_align_detail(f_hid, f_match, eps)?.output)
}

pub fn phase_align_detail(f_hid: &ComplexSpectrum, f_match: &ComplexSpectrum, eps: f64) -> Result<PhaseAlignDetail> {
    f_hid.ensure_same_shape(f_match, "phase_align")?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("phase_align eps must be positive, got {eps}")));
    }
    if let Some((i, m)) = f_match.data().iter().enumerate().find(|(_, m)| m.norm() > 1.0 + MATCH_BOUND_TOL) {
        return Err(Error::MatchMagnitude {
            index: i,
            magnitude: m.norm(),
        });
    }
    let n = f_hid.data().len();
    let (mut sim, mut w_phase, mut delta_phi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut out = Vec::with_capacity(n);
    for (i, (&h, &m)) in f_hid.data().iter().zip(f_match.data()).enumerate() {
        let r = m.norm();
        if r < eps {
            sim[i] = 0.0;
            out.push(h);
            continue;
        }
        let phi_h = arg(h);
        let phi_m = arg(m);
        sim[i] = r * (phi_h - phi_m).cos();
        w_phase[i] = (1.0 - sim[i]) / 2.0;
        delta_phi[i] = wrap_phase(phi_m - phi_h);
        out.push(h * Complex64::from_polar(1.0, w_phase[i] * delta_phi[i]));
    }
    Ok(PhaseAlignDetail {
        output: ComplexSpectrum::new(f_hid.shape(), out)?,
        sim,
        w_phase,
        delta_phi,
    })
}

/// Per-frame shared conv stack followed by a mean over frames, mapping a
/// radar sequence to a `(H_emb, W_emb, C_emb)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct MemEncoder {
    pub stack: ConvStack,
    /// Sequence lengths the encoder accepts: the input length and the full
    /// observed-plus-future length.
    pub lengths: [usize; 2],
}

impl MemEncoder {
    pub fn new(stack: ConvStack, t_in: usize, k_out: usize) -> Result<Self> {
        if stack.specs.first().map(|s| s.c_in) != Some(1) {
            return Err(Error::InvalidArgument("memory encoder consumes single-channel frames".into()));
        }
        Ok(MemEncoder {
            stack,
            lengths: [t_in, t_in + k_out],
        })
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if !self.lengths.contains(&n) {
            return Err(Error::SequenceLength {
                what: "memory encoder",
                expected: self.lengths.to_vec(),
                actual: n,
            });
        }
        Ok(())
    }

    pub fn encode(&self, seq: &RadarSequence) -> Result<RealField> {
        self.check_len(seq.len())?;
        let (h, w) = seq.hw();
        let mut acc: Option<Vec<f64>> = None;
        let mut dims = (0, 0, 0);
        for f in 0..seq.len() {
            let y = self.stack.apply(&RealField::new(h, w, 1, seq.frame(f).to_vec())?)?;
            dims = y.dims();
            match &mut acc {
                None => acc = Some(y.data().to_vec()),
                Some(a) => a.iter_mut().zip(y.data()).for_each(|(s, v)| *s += v),
            }
        }
        let inv = 1.0 / seq.len() as f64;
        let data = acc.unwrap_or_default().into_iter().map(|v| v * inv).collect();
        RealField::new(dims.0, dims.1, dims.2, data)
    }
}

/// `dft2_forward(E_mem(seq))`.
pub fn encode_to_spectrum(seq: &RadarSequence, enc: &MemEncoder) -> Result<ComplexSpectrum> {
    dft2_forward(&enc.encode(seq)?)
}

/// Query from the observed frames alone, channel-aligned to the slot width.
pub fn phase2_query(seq: &RadarSequence, enc: &MemEncoder, align: &AfnoWeights) -> Result<ComplexSpectrum> {
    if seq.len() != enc.lengths[0] {
        return Err(Error::SequenceLength {
            what: "phase2_query",
            expected: vec![enc.lengths[0]],
            actual: seq.len(),
        });
    }
    channel_align(&encode_to_spectrum(seq, enc)?, align)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingPhase {
    /// Bank trainable; queries come from observed-plus-future frames.
    One,
    /// Bank frozen; queries come from the observed frames.
    Two,
}

impl TrainingPhase {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(TrainingPhase::One),
            2 => Ok(TrainingPhase::Two),
            _ => Err(Error::InvalidArgument(format!("training phase must be 1 or 2, got {id}"))),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            TrainingPhase::One => 1,
            TrainingPhase::Two => 2,
        }
    }
}

/// Set the bank's frozen flag for `phase` (1 or 2).
pub fn training_phase(mut bank: MemoryBank, phase: u8) -> Result<MemoryBank> {
    bank.frozen = TrainingPhase::from_id(phase)? == TrainingPhase::Two;
    Ok(bank)
}

/// Tape version of [`memory_match`]. `query` is `(H, W_f, C, 2)`, `slots`
/// is `(S, C, 2)`; returns the matched `(H, W_f, C, 2)` and `alpha (H·W_f, S)`.
pub fn memory_match_var(t: &mut Tape, query: Var, slots: Var) -> Result<(Var, Var)> {
    let qs = t.shape(query).to_vec();
    let ss = t.shape(slots).to_vec();
    let [h, wf, c, 2] = qs[..] else {
        return Err(Error::shape("memory_match_var query", &[0, 0, 0, 2], &qs));
    };
    let [s, c2, 2] = ss[..] else {
        return Err(Error::shape("memory_match_var slots", &[0, c, 2], &ss));
    };
    if c2 != c {
        return Err(Error::ChannelMismatch {
            what: "memory_match_var",
            expected: c2,
            actual: c,
        });
    }
    let q = t.cnormalize(query, UNIT_EPS)?;
    let m = t.cnormalize(slots, UNIT_EPS)?;
    let q = t.reshape(q, &[h * wf, 2 * c])?;
    let m = t.reshape(m, &[s, 2 * c])?;
    let scores = t.matmul(q, m, true)?;
    let alpha = t.softmax(scores)?;
    let f = t.matmul(alpha, m, false)?;
    let f = t.reshape(f, &[h, wf, c, 2])?;
    Ok((f, alpha))
}

/// Tape version of [`phase_align`].
pub fn phase_align_var(t: &mut Tape, f_hid: Var, f_match: Var, eps: f64) -> Result<Var> {
    let keep: Vec<f64> = t
        .value(f_match)
        .data()
        .chunks_exact(2)
        .map(|p| if p[0].hypot(p[1]) < eps { 0.0 } else { 1.0 })
        .collect();
    let u = t.cnormalize(f_hid, UNIT_EPS)?;
    let sim = t.cinner_re(u, f_match)?;
    let w = t.scale(sim, -0.5);
    let w = t.add_scalar(w, 0.5);
    let rel = t.cmul_conj(f_match, u)?;
    let dphi = t.carg(rel)?;
    let theta = t.mul(w, dphi)?;
    let theta = t.mul_const(theta, keep)?;
    let rot = t.cexp_i(theta);
    t.cmul(f_hid, rot)
}

/// Tape version of [`MemEncoder::encode`] on single-channel frames `(H, W, 1)`.
pub fn mem_encode_var(t: &mut Tape, frames: &[Var], enc: &MemEncoder, weights: &[Var], biases: &[Var]) -> Result<Var> {
    enc.check_len(frames.len())?;
    let mut acc: Option<Var> = None;
    for &f in frames {
        let y = conv_stack_var(t, f, &enc.stack.specs, weights, biases, enc.stack.last)?;
        acc = Some(match acc {
            None => y,
            Some(a) => t.add(a, y)?,
        });
    }
    let sum = acc.expect("lengths are positive");
    Ok(t.scale(sum, 1.0 / frames.len() as f64))
}

/// Default last-layer activation of the memory encoder.
pub const MEM_ENCODER_LAST: Activation = Activation::Identity;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::encoder_specs;
    use crate::spectral::SpectrumShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random(rng: &mut ChaCha8Rng, shape: SpectrumShape, scale: f64) -> ComplexSpectrum {
        let d = (0..shape.len())
            .map(|_| Complex64::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale)))
            .collect();
        ComplexSpectrum::new(shape, d).unwrap()
    }

    #[test]
    fn single_slot_replicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = MemoryBank::random(&mut rng, 1, 3).unwrap();
        let q = random(&mut rng, SpectrumShape::half(4, 4, 3), 1.0);
        let r = memory_match(&q, &bank).unwrap();
        assert!(r.alpha.data().iter().all(|&a| a == 1.0));
        for row in r.f_match.data().chunks_exact(3) {
            assert_eq!(row, bank.slots());
        }
    }

    #[test]
    fn matching_slot_wins() {
        // Slots built from distinct columns of a 4-point DFT are orthogonal
        // under the real inner product summed over channels.
        let c = 4;
        let slots: Vec<Complex64> = (0..3)
            .flat_map(|k| (0..c).map(move |d| Complex64::from_polar(1.0, 2.0 * PI * (k * d) as f64 / c as f64)))
            .collect();
        let bank = MemoryBank::new(3, c, slots.clone()).unwrap();
        let shape = SpectrumShape::half(2, 2, c);
        let q = ComplexSpectrum::new(shape, (0..shape.len()).map(|i| slots[c + i % c] * 2.5).collect()).unwrap();
        let r = memory_match(&q, &bank).unwrap();
        for a in r.alpha.data().chunks_exact(3) {
            assert!(a[1] > a[0] && a[1] > a[2]);
        }
    }

    #[test]
    fn matches_brute_force_oracle_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = MemoryBank::random(&mut rng, 8, 4).unwrap();
        let q = random(&mut rng, SpectrumShape::half(4, 6, 4), 3.0);
        let r = memory_match(&q, &bank).unwrap();
        for k in 0..4 {
            for l in 0..4 {
                let s: Vec<f64> = (0..8)
                    .map(|i| {
                        (0..4)
                            .map(|d| {
                                let x = q.get(k, l, d) / q.get(k, l, d).norm();
                                let m = bank.slots()[i * 4 + d];
                                x.re * m.re + x.im * m.im
                            })
                            .sum()
                    })
                    .collect();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                for i in 0..8 {
                    assert!((r.alpha.data()[(k * 4 + l) * 8 + i] - s[i].exp() / z).abs() < 1e-12);
                }
            }
        }
        assert!(r.f_match.data().iter().all(|m| m.norm() <= 1.0 + 1e-9));
    }

    #[test]
    fn phase_align_cases() {
        let s = SpectrumShape::half(1, 1, 3);
        let h = ComplexSpectrum::new(s, vec![Complex64::from_polar(2.0, 0.4); 3]).unwrap();
        let aligned = ComplexSpectrum::new(s, vec![Complex64::from_polar(1.0, 0.4); 3]).unwrap();
        let y = phase_align(&h, &aligned, PHASE_ALIGN_EPS).unwrap();
        for (a, b) in y.data().iter().zip(h.data()) {
            assert!((a - b).norm() < 1e-15);
        }
        let opposite = ComplexSpectrum::new(s, vec![Complex64::from_polar(1.0, 0.4 + PI); 3]).unwrap();
        let d = phase_align_detail(&h, &opposite, PHASE_ALIGN_EPS).unwrap();
        assert!((d.sim[0] + 1.0).abs() < 1e-15 && (d.w_phase[0] - 1.0).abs() < 1e-15);
        let z = d.output.data()[0];
        assert!((z.norm() - 2.0).abs() < 1e-12);
        assert!((wrap_phase(arg(z) - (0.4 + PI))).abs() < 1e-12);
        let tiny = ComplexSpectrum::new(s, vec![Complex64::new(1e-9, 0.0); 3]).unwrap();
        assert_eq!(phase_align(&h, &tiny, PHASE_ALIGN_EPS).unwrap(), h);
        let big = ComplexSpectrum::new(s, vec![Complex64::new(1.5, 0.0); 3]).unwrap();
        assert!(matches!(phase_align(&h, &big, PHASE_ALIGN_EPS), Err(Error::MatchMagnitude { .. })));
    }

    #[test]
    fn phase_align_per_entry_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SpectrumShape::half(4, 4, 3);
        let h = random(&mut rng, s, 2.0);
        let bank = MemoryBank::random(&mut rng, 5, 3).unwrap();
        let m = memory_match(&random(&mut rng, s, 1.0), &bank).unwrap().f_match;
        let d = phase_align_detail(&h, &m, PHASE_ALIGN_EPS).unwrap();
        for i in 0..s.len() {
            let (x, y) = (h.data()[i], m.data()[i]);
            let sim = (x.re * y.re + x.im * y.im) / x.norm();
            assert!((d.sim[i] - sim).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&d.sim[i]) && (0.0..=1.0).contains(&d.w_phase[i]));
            assert!((d.output.data()[i].norm() - x.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_routes_match_value_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = SpectrumShape::half(4, 4, 3);
        let (q, h) = (random(&mut rng, s, 1.0), random(&mut rng, s, 2.0));
        let bank = MemoryBank::random(&mut rng, 6, 3).unwrap();
        let want = memory_match(&q, &bank).unwrap();
        let want_pa = phase_align(&h, &want.f_match, PHASE_ALIGN_EPS).unwrap();
        let mut t = Tape::new();
        let qv = t.constant(q.to_tensor());
        let sv = t.constant(bank.to_tensor());
        let hv = t.constant(h.to_tensor());
        let (f, alpha) = memory_match_var(&mut t, qv, sv).unwrap();
        let pa = phase_align_var(&mut t, hv, f, PHASE_ALIGN_EPS).unwrap();
        for (a, b) in t.value(alpha).data().iter().zip(want.alpha.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in t.value(pa).data().iter().zip(want_pa.to_tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = ConvStack::random(&mut rng, encoder_specs(1, [2, 3, 3], 4, 1).unwrap(), MEM_ENCODER_LAST).unwrap();
        let enc = MemEncoder::new(stack, 2, 3).unwrap();
        let frames = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i % 9) as f64 / 9.0).collect()).unwrap();
        let seq = RadarSequence::with_cadence(frames, -10.0, 10.0).unwrap();
        let spec = encode_to_spectrum(&seq, &enc).unwrap();
        assert_eq!(spec.shape().dims(), [4, 3, 4]);
        assert_eq!(spec, dft2_forward(&enc.encode(&seq).unwrap()).unwrap());
        let zero = RadarSequence::with_cadence(Tensor::zeros(&[5, 1, 8, 8]), 0.0, 10.0).unwrap();
        assert!(encode_to_spectrum(&zero, &enc).unwrap().data().iter().all(|v| v.norm() == 0.0));
        assert!(matches!(phase2_query(&zero, &enc, &AfnoWeights::identity(4, 2, true).unwrap()), Err(Error::SequenceLength { .. })));
        let bad = RadarSequence::with_cadence(Tensor::zeros(&[3, 1, 8, 8]), 0.0, 10.0).unwrap();
        assert!(enc.encode(&bad).is_err());
        let align = AfnoWeights::random(&mut rng, 4, 4, 4, 2, true).unwrap();
        let q = phase2_query(&seq, &enc, &align).unwrap();
        assert_eq!(q, channel_align(&spec, &align).unwrap());

        let mut t = Tape::new();
        let fr: Vec<Var> = (0..2).map(|f| t.constant(Tensor::new(vec![8, 8, 1], seq.frame(f).to_vec()).unwrap())).collect();
        let ws: Vec<Var> = enc.stack.weights.iter().map(|w| t.constant(w.clone())).collect();
        let bs: Vec<Var> = enc.stack.biases.iter().map(|b| t.constant(b.clone())).collect();
        let y = mem_encode_var(&mut t, &fr, &enc, &ws, &bs).unwrap();
        let want = enc.encode(&seq).unwrap();
        for (a, b) in t.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn phase_selector_and_renormalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = MemoryBank::random(&mut rng, 2, 2).unwrap();
        assert!(training_phase(bank.clone(), 2).unwrap().frozen);
        assert!(!training_phase(bank.clone(), 1).unwrap().frozen);
        assert!(training_phase(bank.clone(), 3).is_err());
        let mut t = bank.to_tensor();
        t.data_mut()[0] += 0.3;
        renormalize_slots(&mut t);
        let back = MemoryBank::from_tensor_normalized(&t).unwrap();
        assert!(back.slots().iter().all(|m| (m.norm() - 1.0).abs() < 1e-12));
    }
}
