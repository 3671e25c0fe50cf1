//! Complex spectra, 2D discrete Fourier transforms and polar/phasor algebra.
//!
//! Conventions:
//! - fields are stored `(H, W, C)` row-major with the channel axis fastest;
//! - transforms act over the two spatial axes independently per channel;
//! - the forward transform is unnormalized, the inverse carries `1/(H·W)`;
//! - a real field transforms to the Hermitian half spectrum of width
//!   `W/2 + 1`, and every fusion operator works on that stored half;
//! - a zero coefficient has phase 0, so its unit phasor is `1 + 0j`.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default guard below which a coefficient is treated as zero.
pub const UNIT_EPS: f64 = 1e-12;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(buf: &mut [Complex64], len: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let fft = if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        };
        fft.process(buf);
    });
}

/// Width of the stored half spectrum for a real signal of width `w`.
pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Multiplicity of half-spectrum column `l` in the full spectrum: 1 for the
/// self-conjugate DC and (even-width) Nyquist columns, 2 otherwise.
pub fn column_weight(l: usize, w: usize) -> f64 {
    if l == 0 || (w % 2 == 0 && l == w / 2) {
        1.0
    } else {
        2.0
    }
}

/// Forward real-to-half-spectrum 2D DFT of an `(H, W, C)` buffer.
/// Output is `(H, W/2+1, C, 2)` interleaved.
pub(crate) fn rfft2_raw(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let wf = half_width(w);
    let mut out = vec![0.0; h * wf * c * 2];
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    let mut cols = vec![Complex64::new(0.0, 0.0); wf * h];
    for ch in 0..c {
        for (i, slot) in rows.iter_mut().enumerate() {
            *slot = Complex64::new(x[i * c + ch], 0.0);
        }
        fft_in_place(&mut rows, w, false);
        for k in 0..h {
            for l in 0..wf {
                cols[l * h + k] = rows[k * w + l];
            }
        }
        fft_in_place(&mut cols, h, false);
        for k in 0..h {
            for l in 0..wf {
                let v = cols[l * h + k];
                let o = ((k * wf + l) * c + ch) * 2;
                out[o] = v.re;
                out[o + 1] = v.im;
            }
        }
    }
    out
}

/// Inverse of [`rfft2_raw`]: `(H, W/2+1, C, 2)` interleaved to `(H, W, C)`.
///
/// Defined for any half spectrum (Hermitian-consistent or not) as
/// `x = Re(Σ_k Σ_l c_l Z[k,l] e^{+iθ}) / (H·W)` with `c_l` from
/// [`column_weight`]; on consistent input this is the exact inverse.
pub(crate) fn irfft2_raw(z: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let wf = half_width(w);
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; h * w * c];
    let mut cols = vec![Complex64::new(0.0, 0.0); wf * h];
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for k in 0..h {
            for l in 0..wf {
                let o = ((k * wf + l) * c + ch) * 2;
                cols[l * h + k] = Complex64::new(z[o], z[o + 1]);
            }
        }
        fft_in_place(&mut cols, h, true);
        for n in 0..h {
            for l in 0..w {
                rows[n * w + l] = if l < wf {
                    cols[l * h + n]
                } else {
                    cols[(w - l) * h + n].conj()
                };
            }
        }
        fft_in_place(&mut rows, w, true);
        for (i, v) in rows.iter().enumerate() {
            out[i * c + ch] = v.re * scale;
        }
    }
    out
}

/// Real feature map of shape `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealField {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl RealField {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::InvalidArgument(format!(
                "field dims must be positive, got ({h}, {w}, {c})"
            )));
        }
        if data.len() != h * w * c {
            return Err(Error::shape("RealField", &[h, w, c], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "RealField" });
        }
        Ok(RealField { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        RealField {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, c] => RealField::new(*h, *w, *c, t.data().to_vec()),
            s => Err(Error::shape("RealField::from_tensor", &[0, 0, 0], s)),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.h, self.w, self.c], self.data.clone())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Whether a spectrum holds every frequency or only the Hermitian half.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumLayout {
    Full,
    /// Half spectrum of a real signal of the given spatial width.
    Half { width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectrumShape {
    pub h: usize,
    pub w_f: usize,
    pub c: usize,
    pub layout: SpectrumLayout,
}

impl SpectrumShape {
    pub fn half(h: usize, w: usize, c: usize) -> Self {
        SpectrumShape {
            h,
            w_f: half_width(w),
            c,
            layout: SpectrumLayout::Half { width: w },
        }
    }

    pub fn len(&self) -> usize {
        self.h * self.w_f * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial width of the signal this spectrum describes.
    pub fn spatial_width(&self) -> usize {
        match self.layout {
            SpectrumLayout::Full => self.w_f,
            SpectrumLayout::Half { width } => width,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.h, self.w_f, self.c]
    }

    pub fn with_channels(self, c: usize) -> Self {
        SpectrumShape { c, ..self }
    }
}

/// Complex frequency tensor `(H_f, W_f, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    shape: SpectrumShape,
    data: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn new(shape: SpectrumShape, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("ComplexSpectrum", &shape.dims(), &[data.len()]));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite {
                what: "ComplexSpectrum",
            });
        }
        Ok(ComplexSpectrum { shape, data })
    }

    pub(crate) fn from_parts(shape: SpectrumShape, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        ComplexSpectrum { shape, data }
    }

    pub fn zeros(shape: SpectrumShape) -> Self {
        ComplexSpectrum {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.len()],
        }
    }

    pub fn shape(&self) -> SpectrumShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.c
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, k: usize, l: usize, ch: usize) -> Complex64 {
        self.data[(k * self.shape.w_f + l) * self.shape.c + ch]
    }

    /// Interleaved `(H_f, W_f, C, 2)` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let mut v = Vec::with_capacity(self.data.len() * 2);
        for z in &self.data {
            v.push(z.re);
            v.push(z.im);
        }
        Tensor::from_parts(vec![self.shape.h, self.shape.w_f, self.shape.c, 2], v)
    }

    pub fn from_tensor(shape: SpectrumShape, t: &Tensor) -> Result<Self> {
        let want = [shape.h, shape.w_f, shape.c, 2];
        if t.shape() != want {
            return Err(Error::shape("ComplexSpectrum::from_tensor", &want, t.shape()));
        }
        let data = t
            .data()
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        ComplexSpectrum::new(shape, data)
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &'static str) -> Result<()> {
        if self.shape.dims() != other.shape.dims() {
            return Err(Error::shape(what, &self.shape.dims(), &other.shape.dims()));
        }
        Ok(())
    }

    /// Expand a half spectrum to the full `(H, W, C)` spectrum using
    /// `Z[k, l] = conj(Z[-k mod H, W-l])` for the missing columns.
    pub fn expand_hermitian(&self) -> ComplexSpectrum {
        let SpectrumLayout::Half { width: w } = self.shape.layout else {
            return self.clone();
        };
        let (h, wf, c) = (self.shape.h, self.shape.w_f, self.shape.c);
        let mut data = vec![Complex64::new(0.0, 0.0); h * w * c];
        for k in 0..h {
            for l in 0..w {
                for ch in 0..c {
                    data[(k * w + l) * c + ch] = if l < wf {
                        self.data[(k * wf + l) * c + ch]
                    } else {
                        self.data[(((h - k) % h) * wf + (w - l)) * c + ch].conj()
                    };
                }
            }
        }
        ComplexSpectrum {
            shape: SpectrumShape {
                h,
                w_f: w,
                c,
                layout: SpectrumLayout::Full,
            },
            data,
        }
    }
}

/// Amplitude/phase decomposition of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarSpectrum {
    pub shape: SpectrumShape,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let mut p = phi.rem_euclid(2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    }
    if p <= -PI {
        p += 2.0 * PI;
    }
    p
}

/// `arg(z)` in `(-π, π]`, with `arg(0) = 0`.
pub fn arg(z: Complex64) -> f64 {
    if z.re == 0.0 && z.im == 0.0 {
        return 0.0;
    }
    let a = z.im.atan2(z.re);
    if a == -PI {
        PI
    } else {
        a
    }
}

pub fn dft2_forward(x: &RealField) -> Result<ComplexSpectrum> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "dft2_forward input",
        });
    }
    let raw = rfft2_raw(&x.data, x.h, x.w, x.c);
    let data = raw
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect();
    Ok(ComplexSpectrum {
        shape: SpectrumShape::half(x.h, x.w, x.c),
        data,
    })
}

/// Full-spectrum forward transform of a real field (complex FFT on both axes).
pub fn dft2_forward_full(x: &RealField) -> Result<ComplexSpectrum> {
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "dft2_forward_full input",
        });
    }
    let (h, w, c) = (x.h, x.w, x.c);
    let mut data = vec![Complex64::new(0.0, 0.0); h * w * c];
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    let mut cols = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(x.data[i * c + ch], 0.0);
        }
        fft_in_place(&mut buf, w, false);
        for k in 0..h {
            for l in 0..w {
                cols[l * h + k] = buf[k * w + l];
            }
        }
        fft_in_place(&mut cols, h, false);
        for k in 0..h {
            for l in 0..w {
                data[(k * w + l) * c + ch] = cols[l * h + k];
            }
        }
    }
    Ok(ComplexSpectrum {
        shape: SpectrumShape {
            h,
            w_f: w,
            c,
            layout: SpectrumLayout::Full,
        },
        data,
    })
}

pub fn dft2_inverse(z: &ComplexSpectrum) -> Result<RealField> {
    if z.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite {
            what: "dft2_inverse input",
        });
    }
    let (h, c) = (z.shape.h, z.shape.c);
    match z.shape.layout {
        SpectrumLayout::Half { width } => {
            let mut raw = Vec::with_capacity(z.data.len() * 2);
            for v in &z.data {
                raw.push(v.re);
                raw.push(v.im);
            }
            let data = irfft2_raw(&raw, h, width, c);
            Ok(RealField {
                h,
                w: width,
                c,
                data,
            })
        }
        SpectrumLayout::Full => {
            let w = z.shape.w_f;
            let scale = 1.0 / (h * w) as f64;
            let mut data = vec![0.0; h * w * c];
            let mut cols = vec![Complex64::new(0.0, 0.0); h * w];
            let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
            for ch in 0..c {
                for k in 0..h {
                    for l in 0..w {
                        cols[l * h + k] = z.data[(k * w + l) * c + ch];
                    }
                }
                fft_in_place(&mut cols, h, true);
                for n in 0..h {
                    for l in 0..w {
                        rows[n * w + l] = cols[l * h + n];
                    }
                }
                fft_in_place(&mut rows, w, true);
                for (i, v) in rows.iter().enumerate() {
                    data[i * c + ch] = v.re * scale;
                }
            }
            Ok(RealField { h, w, c, data })
        }
    }
}

pub fn to_polar(z: &ComplexSpectrum) -> Result<PolarSpectrum> {
    if z.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite { what: "to_polar" });
    }
    let amplitude = z.data.iter().map(|v| v.norm()).collect();
    let phase = z.data.iter().map(|&v| arg(v)).collect();
    Ok(PolarSpectrum {
        shape: z.shape,
        amplitude,
        phase,
    })
}

pub fn from_polar(p: &PolarSpectrum) -> Result<ComplexSpectrum> {
    if p.amplitude.len() != p.shape.len() || p.phase.len() != p.shape.len() {
        return Err(Error::shape(
            "from_polar",
            &p.shape.dims(),
            &[p.amplitude.len(), p.phase.len()],
        ));
    }
    if let Some((index, &value)) = p.amplitude.iter().enumerate().find(|(_, a)| **a < 0.0) {
        return Err(Error::NegativeAmplitude { index, value });
    }
    let data = p
        .amplitude
        .iter()
        .zip(&p.phase)
        .map(|(&a, &phi)| Complex64::new(a * phi.cos(), a * phi.sin()))
        .collect();
    ComplexSpectrum::new(p.shape, data)
}

/// Unit phasors `exp(jΦ)` for a phase tensor laid out as `shape`.
pub fn phasor(shape: SpectrumShape, phi: &[f64]) -> Result<ComplexSpectrum> {
    if phi.len() != shape.len() {
        return Err(Error::shape("phasor", &shape.dims(), &[phi.len()]));
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "phasor" });
    }
    let data = phi.iter().map(|&p| Complex64::new(p.cos(), p.sin())).collect();
    Ok(ComplexSpectrum { shape, data })
}

/// `z / |z|` elementwise; entries with `|z| < eps` become `1 + 0j`.
pub fn unit_normalize(z: &ComplexSpectrum, eps: f64) -> Result<ComplexSpectrum> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "unit_normalize eps must be positive, got {eps}"
        )));
    }
    let data = z.data.iter().map(|&v| unit_or_one(v, eps)).collect();
    Ok(ComplexSpectrum {
        shape: z.shape,
        data,
    })
}

#[inline]
pub(crate) fn unit_or_one(v: Complex64, eps: f64) -> Complex64 {
    let r = v.norm();
    if r < eps {
        Complex64::new(1.0, 0.0)
    } else {
        v / r
    }
}

/// `(Σx², (1/(H·W))·Σ|Z|²)` with the half spectrum counted at its
/// full-spectrum multiplicity.
pub fn parseval_energy(x: &RealField, z: &ComplexSpectrum) -> Result<(f64, f64)> {
    let spatial = x.data.iter().map(|v| v * v).sum::<f64>();
    let zs = z.shape;
    if zs.h != x.h || zs.c != x.c || zs.spatial_width() != x.w {
        return Err(Error::shape(
            "parseval_energy",
            &[x.h, x.w, x.c],
            &[zs.h, zs.spatial_width(), zs.c],
        ));
    }
    let full_width = matches!(zs.layout, SpectrumLayout::Full);
    if (full_width && zs.w_f != x.w) || (!full_width && zs.w_f != half_width(x.w)) {
        return Err(Error::shape("parseval_energy", &[x.h, x.w, x.c], &zs.dims()));
    }
    let mut spectral = 0.0;
    for k in 0..zs.h {
        for l in 0..zs.w_f {
            let weight = if full_width { 1.0 } else { column_weight(l, x.w) };
            for ch in 0..zs.c {
                spectral += weight * z.get(k, l, ch).norm_sqr();
            }
        }
    }
    Ok((spatial, spectral / (x.h * x.w) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> RealField {
        RealField::new(h, w, c, (0..h * w * c).map(f).collect()).unwrap()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let x = field(4, 4, 1, |i| if i == 0 { 1.0 } else { 0.0 });
        let z = dft2_forward(&x).unwrap();
        assert_eq!(z.shape().w_f, 3);
        for v in z.data() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_field_is_dc_only() {
        let x = field(6, 6, 2, |_| 0.75);
        let z = dft2_forward(&x).unwrap();
        for k in 0..6 {
            for l in 0..4 {
                for ch in 0..2 {
                    let v = z.get(k, l, ch);
                    if k == 0 && l == 0 {
                        assert!((v.re - 0.75 * 36.0).abs() < 1e-12);
                        assert!(v.im.abs() < 1e-12);
                    } else {
                        assert!(v.norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn all_ones_half_spectrum_inverts_to_impulse() {
        let shape = SpectrumShape::half(4, 4, 1);
        let z = ComplexSpectrum::new(shape, vec![Complex64::new(1.0, 0.0); shape.len()]).unwrap();
        let x = dft2_inverse(&z).unwrap();
        for (i, v) in x.data().iter().enumerate() {
            let want = if i == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15, "{i}: {v}");
        }
    }

    #[test]
    fn odd_width_round_trip() {
        let x = field(5, 7, 2, |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
        let back = dft2_inverse(&dft2_forward(&x).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn polar_conventions() {
        let shape = SpectrumShape::half(1, 2, 1);
        let z = ComplexSpectrum::new(
            shape,
            vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
        )
        .unwrap();
        let p = to_polar(&z).unwrap();
        assert_eq!(p.amplitude, vec![1.0, 0.0]);
        assert_eq!(p.phase, vec![0.0, 0.0]);

        let q = PolarSpectrum {
            shape,
            amplitude: vec![1.0, 0.0],
            phase: vec![PI / 2.0, 1.234],
        };
        let z = from_polar(&q).unwrap();
        assert!((z.data()[0] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        assert_eq!(z.data()[1], Complex64::new(0.0, 0.0));

        let bad = PolarSpectrum {
            shape,
            amplitude: vec![1.0, -0.5],
            phase: vec![0.0, 0.0],
        };
        assert!(matches!(
            from_polar(&bad),
            Err(Error::NegativeAmplitude { index: 1, .. })
        ));
    }

    #[test]
    fn phasor_endpoints() {
        let shape = SpectrumShape::half(1, 2, 1);
        let z = phasor(shape, &[0.0, PI]).unwrap();
        assert_eq!(z.data()[0], Complex64::new(1.0, 0.0));
        assert!((z.data()[1] - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn unit_normalize_cases() {
        let shape = SpectrumShape::half(1, 2, 1);
        let z = ComplexSpectrum::new(
            shape,
            vec![Complex64::new(3.0, 4.0), Complex64::new(0.0, 0.0)],
        )
        .unwrap();
        let u = unit_normalize(&z, UNIT_EPS).unwrap();
        assert!((u.data()[0] - Complex64::new(0.6, 0.8)).norm() < 1e-15);
        assert_eq!(u.data()[1], Complex64::new(1.0, 0.0));
        assert!(unit_normalize(&z, 0.0).is_err());
    }

    #[test]
    fn parseval_small_cases() {
        let zero = RealField::zeros(4, 4, 1);
        let e = parseval_energy(&zero, &dft2_forward(&zero).unwrap()).unwrap();
        assert_eq!(e, (0.0, 0.0));
        let imp = field(4, 4, 1, |i| if i == 0 { 1.0 } else { 0.0 });
        let e = parseval_energy(&imp, &dft2_forward(&imp).unwrap()).unwrap();
        assert!((e.0 - 1.0).abs() < 1e-15 && (e.1 - 1.0).abs() < 1e-15);
        let other = RealField::zeros(4, 6, 1);
        assert!(parseval_energy(&other, &dft2_forward(&imp).unwrap()).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(RealField::new(1, 1, 1, vec![f64::NAN]).is_err());
        let shape = SpectrumShape::half(1, 1, 1);
        assert!(ComplexSpectrum::new(shape, vec![Complex64::new(f64::INFINITY, 0.0)]).is_err());
    }

    #[test]
    fn wrap_and_arg_range() {
        assert_eq!(arg(Complex64::new(-1.0, -0.0)), PI);
        assert!((wrap_phase(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(-PI) - PI).abs() < 1e-12);
        assert!((wrap_phase(0.5) - 0.5).abs() < 1e-15);
    }
}
