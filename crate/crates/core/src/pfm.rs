//! Covariate-guided frequency modulation.
//!
//! Hidden amplitudes are reweighted by a per-bin softmax over channels of
//! the phase agreement between hidden and covariate spectra; hidden phases
//! are pulled toward the covariate phases by interpolating unit phasors.

use num_complex::Complex64;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::spectral::{arg, ComplexSpectrum, SpectrumShape};
use crate::tensor::Tensor;

/// Denominator floor of the alignment score.
pub const ALIGN_EPS: f64 = 1e-8;
/// Below this magnitude the interpolated phasor falls back to the hidden one.
pub const FUSE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfmParams {
    pub beta_logit: f64,
}

impl Default for PfmParams {
    fn default() -> Self {
        PfmParams { beta_logit: 0.0 }
    }
}

impl PfmParams {
    /// `β = 1/(1 + e^{-beta_logit})`, always in `(0, 1)`.
    pub fn beta(&self) -> f64 {
        1.0 / (1.0 + (-self.beta_logit).exp())
    }
}

/// How alignment scores are pooled before the channel softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignmentMode {
    /// One score per bin and channel.
    #[default]
    PerBin,
    /// One score per channel from inner products summed over all bins,
    /// broadcast back to every bin.
    PerChannel,
}

/// Alignment scores `s` and channel-softmax weights `w`, both `(H, W_f, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentWeights {
    pub scores: Tensor,
    pub weights: Tensor,
}

fn softmax_rows(v: &mut [f64], n: usize) {
    for row in v.chunks_exact_mut(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
}

fn dims_tensor(shape: SpectrumShape, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape.dims().to_vec(), data)
}

/// Per-bin alignment weights.
pub fn phase_alignment_weights(f_hid: &ComplexSpectrum, f_met: &ComplexSpectrum, eps: f64) -> Result<Tensor> {
    Ok(alignment(f_hid, f_met, eps, AlignmentMode::PerBin)?.weights)
}

/// Alignment scores and weights under the chosen pooling.
pub fn alignment(f_hid: &ComplexSpectrum, f_met: &ComplexSpectrum, eps: f64, mode: AlignmentMode) -> Result<AlignmentWeights> {
    f_hid.ensure_same_shape(f_met, "phase_alignment_weights")?;
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("alignment eps must be positive, got {eps}")));
    }
    let shape = f_hid.shape();
    let c = shape.c;
    let scores: Vec<f64> = match mode {
        AlignmentMode::PerBin => f_hid
            .data()
            .iter()
            .zip(f_met.data())
            .map(|(a, b)| (a * b.conj()).re / (a.norm() * b.norm() + eps))
            .collect(),
        AlignmentMode::PerChannel => {
            let (mut inner, mut na, mut nb) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
            for (i, (a, b)) in f_hid.data().iter().zip(f_met.data()).enumerate() {
                inner[i % c] += (a * b.conj()).re;
                na[i % c] += a.norm_sqr();
                nb[i % c] += b.norm_sqr();
            }
            let per: Vec<f64> = (0..c).map(|i| inner[i] / (na[i].sqrt() * nb[i].sqrt() + eps)).collect();
            (0..shape.len()).map(|i| per[i % c]).collect()
        }
    };
    let mut weights = scores.clone();
    softmax_rows(&mut weights, c);
    Ok(AlignmentWeights {
        scores: dims_tensor(shape, scores),
        weights: dims_tensor(shape, weights),
    })
}

/// `Â = w ⊙ A`.
pub fn amplitude_reweight(a_hid: &Tensor, w: &Tensor) -> Result<Tensor> {
    if a_hid.shape() != w.shape() {
        return Err(Error::shape("amplitude_reweight", a_hid.shape(), w.shape()));
    }
    if let Some((i, &v)) = a_hid.data().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeAmplitude { index: i, value: v });
    }
    if let Some((i, &v)) = w.data().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative weight {v} at index {i}")));
    }
    let data = a_hid.data().iter().zip(w.data()).map(|(a, b)| a * b).collect();
    Ok(Tensor::from_parts(a_hid.shape().to_vec(), data))
}

/// Unit phasor of `β·e^{jΦ_hid} + (1−β)·e^{jΦ_met}`, or `e^{jΦ_hid}` where
/// that sum has magnitude below `eps`.
pub fn phasor_fuse(shape: SpectrumShape, phi_hid: &[f64], phi_met: &[f64], beta: f64, eps: f64) -> Result<ComplexSpectrum> {
    if phi_hid.len() != shape.len() || phi_met.len() != shape.len() {
        return Err(Error::shape("phasor_fuse", &[shape.len()], &[phi_hid.len(), phi_met.len()]));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0, 1), got {beta}")));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("fusion eps must be positive, got {eps}")));
    }
    let data = phi_hid
        .iter()
        .zip(phi_met)
        .map(|(&a, &b)| {
            let ph = Complex64::from_polar(1.0, a);
            let z = beta * ph + (1.0 - beta) * Complex64::from_polar(1.0, b);
            let r = z.norm();
            if r < eps {
                ph
            } else {
                z / r
            }
        })
        .collect();
    ComplexSpectrum::new(shape, data)
}

/// Full modulation with per-bin alignment.
pub fn pfm_apply(f_hid: &ComplexSpectrum, f_met: &ComplexSpectrum, params: &PfmParams) -> Result<ComplexSpectrum> {
    pfm_apply_with(f_hid, f_met, params, AlignmentMode::PerBin)
}

pub fn pfm_apply_with(
    f_hid: &ComplexSpectrum,
    f_met: &ComplexSpectrum,
    params: &PfmParams,
    mode: AlignmentMode,
) -> Result<ComplexSpectrum> {
    let shape = f_hid.shape();
    let w = alignment(f_hid, f_met, ALIGN_EPS, mode)?.weights;
    let amp = dims_tensor(shape, f_hid.data().iter().map(|z| z.norm()).collect());
    let amp = amplitude_reweight(&amp, &w)?;
    let phi_hid: Vec<f64> = f_hid.data().iter().map(|&z| arg(z)).collect();
    let phi_met: Vec<f64> = f_met.data().iter().map(|&z| arg(z)).collect();
    let fused = phasor_fuse(shape, &phi_hid, &phi_met, params.beta(), FUSE_EPS)?;
    let data = fused.data().iter().zip(amp.data()).map(|(p, a)| p * *a).collect();
    ComplexSpectrum::new(shape, data)
}

/// Tape version of [`pfm_apply_with`]. `f_hid`, `f_met` are `(H, W_f, C, 2)`
/// and `beta_logit` holds one value.
pub fn pfm_var(t: &mut Tape, f_hid: Var, f_met: Var, beta_logit: Var, mode: AlignmentMode) -> Result<Var> {
    let shape = t.shape(f_hid).to_vec();
    let c = shape[shape.len() - 2];
    let n_bins = t.value(f_hid).len() / (2 * c);
    let a_hid = t.cabs(f_hid)?;
    let a_met = t.cabs(f_met)?;
    let inner = t.cinner_re(f_hid, f_met)?;
    let w = match mode {
        AlignmentMode::PerBin => {
            let den = t.mul(a_hid, a_met)?;
            let den = t.add_scalar(den, ALIGN_EPS);
            let s = t.div(inner, den)?;
            t.softmax(s)?
        }
        AlignmentMode::PerChannel => {
            let rows = |t: &mut Tape, v: Var| -> Result<Var> {
                let r = t.reshape(v, &[n_bins, c])?;
                t.sum_axis0(r)
            };
            let ip = rows(t, inner)?;
            let hh = t.mul(a_hid, a_hid)?;
            let mm = t.mul(a_met, a_met)?;
            let nh = rows(t, hh)?;
            let nm = rows(t, mm)?;
            let nh = t.sqrt(nh);
            let nm = t.sqrt(nm);
            let den = t.mul(nh, nm)?;
            let den = t.add_scalar(den, ALIGN_EPS);
            let s = t.div(ip, den)?;
            let wc = t.softmax(s)?;
            let ones = t.constant(Tensor::full(&[n_bins, c], 1.0));
            let wf = t.mul_bcast(ones, wc, 1)?;
            t.reshape(wf, &shape[..shape.len() - 1])?
        }
    };
    let beta = t.sigmoid(beta_logit);
    let p_hid = t.cnormalize(f_hid, crate::spectral::UNIT_EPS)?;
    let p_met = t.cnormalize(f_met, crate::spectral::UNIT_EPS)?;
    let ph = t.mul_scalar(p_hid, beta)?;
    let nb = t.scale(beta, -1.0);
    let one_minus = t.add_scalar(nb, 1.0);
    let pm = t.mul_scalar(p_met, one_minus)?;
    let mixed = t.add(ph, pm)?;
    let fused = t.cnormalize_or(mixed, p_hid, FUSE_EPS)?;
    let amp = t.mul(w, a_hid)?;
    t.cmul_real(fused, amp)
}
