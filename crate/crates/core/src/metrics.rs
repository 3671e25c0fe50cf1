//! Training objective and verification scores.
//!
//! Scores are computed on the 0–255 pixel scale: radar values in `[0, 1]`
//! are multiplied by 255 before thresholding and before the error,
//! PSNR and SSIM computations.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sequence::RadarSequence;
use crate::spectral::{column_weight, dft2_forward, half_width, RealField};
use crate::tensor::Tensor;

pub const PIXEL_SCALE: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub const SEVIR_THRESHOLDS: [f64; 6] = [16.0, 74.0, 133.0, 160.0, 181.0, 219.0];
pub const METEONET_THRESHOLDS: [f64; 3] = [12.0, 24.0, 32.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    lambda: f64,
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {lambda}")));
        }
        Ok(LossConfig { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

fn same_dims(what: &'static str, a: &RadarSequence, b: &RadarSequence) -> Result<()> {
    if a.frames().shape() != b.frames().shape() {
        return Err(Error::shape(what, b.frames().shape(), a.frames().shape()));
    }
    Ok(())
}

/// `mean((p − g)²) + λ · mean_{frames, bins} |F(p) − F(g)|` with `F` the
/// per-frame orthonormal 2D DFT (the unnormalized transform times
/// `1/√(H·W)`); the spectral mean runs over all `H·W` bins of each frame's
/// full spectrum.
pub fn combined_loss(pred: &RadarSequence, gt: &RadarSequence, cfg: &LossConfig) -> Result<f64> {
    same_dims("combined_loss", pred, gt)?;
    let n = pred.frames().len() as f64;
    let mse = pred
        .frames()
        .data()
        .iter()
        .zip(gt.frames().data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if cfg.lambda == 0.0 {
        return Ok(mse);
    }
    let (h, w) = pred.hw();
    let unitary = 1.0 / ((h * w) as f64).sqrt();
    let mut spec = 0.0;
    for f in 0..pred.len() {
        let d: Vec<f64> = pred.frame(f).iter().zip(gt.frame(f)).map(|(a, b)| a - b).collect();
        let z = dft2_forward(&RealField::new(h, w, 1, d)?)?;
        let wf = half_width(w);
        for (i, v) in z.data().iter().enumerate() {
            spec += column_weight(i % wf, w) * v.norm();
        }
    }
    Ok(mse + cfg.lambda * unitary * spec / n)
}

/// Tape version of [`combined_loss`] on channel-stacked frames `(H, W, K)`.
pub fn combined_loss_var(t: &mut Tape, pred: Var, gt: &Tensor, lambda: f64) -> Result<Var> {
    let shape = t.shape(pred).to_vec();
    if shape != gt.shape() {
        return Err(Error::shape("combined_loss_var", gt.shape(), &shape));
    }
    let [h, w, k] = shape[..] else {
        return Err(Error::shape("combined_loss_var", &[0, 0, 0], &shape));
    };
    let g = t.constant(gt.clone());
    let d = t.sub(pred, g)?;
    let sq = t.mul(d, d)?;
    let mse = t.mean(sq);
    if lambda == 0.0 {
        return Ok(mse);
    }
    let z = t.rfft2(d)?;
    let a = t.cabs(z)?;
    let wf = half_width(w);
    let weights: Vec<f64> = (0..t.value(a).len()).map(|i| column_weight((i / k) % wf, w)).collect();
    let a = t.mul_const(a, weights)?;
    let s = t.sum(a);
    let n = t.value(pred).len() as f64;
    let spec = t.scale(s, lambda / (n * ((h * w) as f64).sqrt()));
    t.add(mse, spec)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    pub fn merge(&mut self, o: &ContingencyCounts) {
        self.hits += o.hits;
        self.misses += o.misses;
        self.false_alarms += o.false_alarms;
        self.correct_negatives += o.correct_negatives;
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=PIXEL_SCALE).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 255]")));
    }
    Ok(())
}

/// Counts over raw `[0, 1]` values; an event is `255·v ≥ threshold`.
pub fn contingency_values(pred: &[f64], gt: &[f64], threshold: f64) -> Result<ContingencyCounts> {
    check_threshold(threshold)?;
    if pred.len() != gt.len() {
        return Err(Error::shape("contingency", &[gt.len()], &[pred.len()]));
    }
    let mut c = ContingencyCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p * PIXEL_SCALE >= threshold, g * PIXEL_SCALE >= threshold) {
            (true, true) => c.hits += 1,
            (false, true) => c.misses += 1,
            (true, false) => c.false_alarms += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    Ok(c)
}

pub fn contingency(pred: &RadarSequence, gt: &RadarSequence, threshold: f64) -> Result<ContingencyCounts> {
    same_dims("contingency", pred, gt)?;
    contingency_values(pred.frames().data(), gt.frames().data(), threshold)
}

/// `hits / (hits + misses + false_alarms)`, 0 when nothing was observed or forecast.
pub fn csi(c: &ContingencyCounts) -> f64 {
    let den = c.hits + c.misses + c.false_alarms;
    if den == 0 {
        0.0
    } else {
        c.hits as f64 / den as f64
    }
}

/// Heidke skill score, 0 when its denominator vanishes.
pub fn hss(c: &ContingencyCounts) -> f64 {
    let (a, b, cc, d) = (c.hits as f64, c.false_alarms as f64, c.misses as f64, c.correct_negatives as f64);
    let den = (a + cc) * (cc + d) + (a + b) * (b + d);
    if den == 0.0 {
        0.0
    } else {
        2.0 * (a * d - b * cc) / den
    }
}

fn scaled_errors(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    pred.iter().zip(gt).fold((0.0, 0.0), |(sq, ab), (p, g)| {
        let d = (p - g) * PIXEL_SCALE;
        (sq + d * d, ab + d.abs())
    })
}

pub fn mse(pred: &RadarSequence, gt: &RadarSequence) -> Result<f64> {
    same_dims("mse", pred, gt)?;
    Ok(scaled_errors(pred.frames().data(), gt.frames().data()).0 / pred.frames().len() as f64)
}

pub fn mae(pred: &RadarSequence, gt: &RadarSequence) -> Result<f64> {
    same_dims("mae", pred, gt)?;
    Ok(scaled_errors(pred.frames().data(), gt.frames().data()).1 / pred.frames().len() as f64)
}

/// `10·log10(255² / MSE)`; identical inputs give `+∞`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PIXEL_SCALE * PIXEL_SCALE / mse).log10()
    }
}

pub fn psnr(pred: &RadarSequence, gt: &RadarSequence) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

/// Normalized 1D Gaussian of `n` taps.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Window length used for an `h × w` image: 11, or the largest odd size
/// that fits.
pub fn ssim_window_len(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m % 2 == 0 {
        m.saturating_sub(1).max(1)
    } else {
        m
    }
}

/// Valid-region separable Gaussian filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..n).map(|k| g[k] * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..n).map(|k| g[k] * rows[(yo + k) * wo + xo]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h × w` planes given on the 0–255 scale.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window(ssim_window_len(h, w), SSIM_SIGMA);
    let c1 = (SSIM_K1 * PIXEL_SCALE).powi(2);
    let c2 = (SSIM_K2 * PIXEL_SCALE).powi(2);
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut s = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    s / n as f64
}

fn scaled(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x * PIXEL_SCALE).collect()
}

/// Mean over frames of the per-frame SSIM.
pub fn ssim(pred: &RadarSequence, gt: &RadarSequence) -> Result<f64> {
    same_dims("ssim", pred, gt)?;
    let (h, w) = pred.hw();
    let s: f64 = (0..pred.len())
        .map(|f| ssim_plane(&scaled(pred.frame(f)), &scaled(gt.frame(f)), h, w))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Running sums for one slice of the evaluation (all frames, or one lead time).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSums {
    pub counts: Vec<ContingencyCounts>,
    pub sq_err: f64,
    pub abs_err: f64,
    pub pixels: u64,
    pub ssim_sum: f64,
    pub frames: u64,
}

impl ScoreSums {
    fn new(n_thresholds: usize) -> Self {
        ScoreSums {
            counts: vec![ContingencyCounts::default(); n_thresholds],
            sq_err: 0.0,
            abs_err: 0.0,
            pixels: 0,
            ssim_sum: 0.0,
            frames: 0,
        }
    }

    fn add_frame(&mut self, p: &[f64], g: &[f64], h: usize, w: usize, thresholds: &[f64]) -> Result<()> {
        for (c, &t) in self.counts.iter_mut().zip(thresholds) {
            c.merge(&contingency_values(p, g, t)?);
        }
        let (sq, ab) = scaled_errors(p, g);
        self.sq_err += sq;
        self.abs_err += ab;
        self.pixels += p.len() as u64;
        self.ssim_sum += ssim_plane(&scaled(p), &scaled(g), h, w);
        self.frames += 1;
        Ok(())
    }

    fn merge(&mut self, o: &ScoreSums) {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            a.merge(b);
        }
        self.sq_err += o.sq_err;
        self.abs_err += o.abs_err;
        self.pixels += o.pixels;
        self.ssim_sum += o.ssim_sum;
        self.frames += o.frames;
    }

    pub fn summary(&self, thresholds: &[f64]) -> ScoreSummary {
        let px = self.pixels.max(1) as f64;
        let mse = self.sq_err / px;
        let per_threshold: Vec<(f64, f64, f64)> = thresholds
            .iter()
            .zip(&self.counts)
            .map(|(&t, c)| (t, csi(c), hss(c)))
            .collect();
        let nt = per_threshold.len().max(1) as f64;
        ScoreSummary {
            avg_csi: per_threshold.iter().map(|p| p.1).sum::<f64>() / nt,
            avg_hss: per_threshold.iter().map(|p| p.2).sum::<f64>() / nt,
            per_threshold,
            mse,
            mae: self.abs_err / px,
            psnr: psnr_from_mse(mse),
            ssim: self.ssim_sum / self.frames.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    /// `(threshold, csi, hss)`.
    pub per_threshold: Vec<(f64, f64, f64)>,
    /// Unweighted means over the threshold list.
    pub avg_csi: f64,
    pub avg_hss: f64,
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Accumulates scores over samples, overall and per lead time. Merging
/// accumulators in a fixed order gives a deterministic result.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAccumulator {
    thresholds: Vec<f64>,
    pub overall: ScoreSums,
    pub per_lead: Vec<ScoreSums>,
}

impl EvalAccumulator {
    pub fn new(thresholds: &[f64], k_out: usize) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::config("thresholds", "at least one threshold is required"));
        }
        for &t in thresholds {
            check_threshold(t).map_err(|_| Error::config("thresholds", format!("{t} is outside [0, 255]")))?;
        }
        Ok(EvalAccumulator {
            thresholds: thresholds.to_vec(),
            overall: ScoreSums::new(thresholds.len()),
            per_lead: vec![ScoreSums::new(thresholds.len()); k_out],
        })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn add(&mut self, pred: &RadarSequence, gt: &RadarSequence) -> Result<()> {
        same_dims("evaluation", pred, gt)?;
        if pred.len() != self.per_lead.len() {
            return Err(Error::SequenceLength {
                what: "evaluation",
                expected: vec![self.per_lead.len()],
                actual: pred.len(),
            });
        }
        let (h, w) = pred.hw();
        for f in 0..pred.len() {
            self.overall.add_frame(pred.frame(f), gt.frame(f), h, w, &self.thresholds)?;
            self.per_lead[f].add_frame(pred.frame(f), gt.frame(f), h, w, &self.thresholds)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &EvalAccumulator) {
        self.overall.merge(&o.overall);
        for (a, b) in self.per_lead.iter_mut().zip(&o.per_lead) {
            a.merge(b);
        }
    }

    pub fn summary(&self) -> ScoreSummary {
        self.overall.summary(&self.thresholds)
    }

    pub fn lead_summaries(&self) -> Vec<ScoreSummary> {
        self.per_lead.iter().map(|s| s.summary(&self.thresholds)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> RadarSequence {
        RadarSequence::with_cadence(Tensor::new(vec![n, 1, h, w], (0..n * h * w).map(f).collect()).unwrap(), 0.0, 10.0).unwrap()
    }

    #[test]
    fn loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = seq(2, 4, 4, |_| rng.random_range(0.0..1.0));
        let b = seq(2, 4, 4, |_| rng.random_range(0.0..1.0));
        let cfg = LossConfig::new(0.57).unwrap();
        assert_eq!(combined_loss(&a, &a, &cfg).unwrap(), 0.0);
        let plain = a.frames().data().iter().zip(b.frames().data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 32.0;
        assert!((combined_loss(&a, &b, &LossConfig::new(0.0).unwrap()).unwrap() - plain).abs() < 1e-12);
        assert!(LossConfig::new(1.5).is_err());
    }

    #[test]
    fn loss_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = seq(1, 4, 4, |_| rng.random_range(0.0..1.0));
        let b = seq(1, 4, 4, |_| rng.random_range(0.0..1.0));
        let d: Vec<f64> = a.frame(0).iter().zip(b.frame(0)).map(|(x, y)| x - y).collect();
        let mut spec = 0.0;
        for k in 0..4 {
            for l in 0..4 {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..4 {
                    for x in 0..4 {
                        let th = -2.0 * std::f64::consts::PI * ((k * y) as f64 / 4.0 + (l * x) as f64 / 4.0);
                        re += d[y * 4 + x] * th.cos();
                        im += d[y * 4 + x] * th.sin();
                    }
                }
                spec += re.hypot(im);
            }
        }
        let mse = d.iter().map(|v| v * v).sum::<f64>() / 16.0;
        let got = combined_loss(&a, &b, &LossConfig::new(1.0).unwrap()).unwrap();
        assert!((got - (mse + spec / 4.0 / 16.0)).abs() < 1e-10);
    }

    #[test]
    fn tape_loss_matches_value_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = seq(3, 6, 5, |_| rng.random_range(0.0..1.0));
        let b = seq(3, 6, 5, |_| rng.random_range(0.0..1.0));
        let want = combined_loss(&a, &b, &LossConfig::new(0.57).unwrap()).unwrap();
        let mut t = Tape::new();
        let p = t.constant(a.to_channels().to_tensor());
        let l = combined_loss_var(&mut t, p, &b.to_channels().to_tensor(), 0.57).unwrap();
        assert!((t.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn contingency_cases() {
        let gt = seq(1, 4, 4, |i| if i < 3 { 1.0 } else { 0.0 });
        let pred = seq(1, 4, 4, |i| if i == 0 || i == 1 || i == 5 { 1.0 } else { 0.0 });
        let c = contingency(&pred, &gt, 74.0).unwrap();
        assert_eq!((c.hits, c.misses, c.false_alarms, c.correct_negatives), (2, 1, 1, 12));
        assert_eq!(csi(&c), 0.5);
        let perfect = contingency(&gt, &gt, 74.0).unwrap();
        assert_eq!((csi(&perfect), hss(&perfect)), (1.0, 1.0));
        let zero = seq(1, 4, 4, |_| 0.0);
        let z = contingency(&zero, &gt, 16.0).unwrap();
        assert_eq!((z.hits, z.misses), (0, 3));
        let none = contingency(&zero, &zero, 16.0).unwrap();
        assert_eq!((csi(&none), hss(&none)), (0.0, 0.0));
        assert!(contingency(&zero, &zero, 256.0).is_err());
        let at = seq(1, 1, 1, |_| 74.0 / 255.0);
        assert_eq!(contingency(&at, &at, 74.0).unwrap().hits, 1);
    }

    #[test]
    fn pixel_metric_endpoints() {
        let a = seq(2, 12, 12, |_| 0.0);
        let b = seq(2, 12, 12, |_| 1.0);
        assert_eq!(mse(&a, &b).unwrap(), 255.0 * 255.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert!((ssim(&b, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_length_for_small_images() {
        assert_eq!(ssim_window_len(128, 128), 11);
        assert_eq!(ssim_window_len(8, 16), 7);
        assert_eq!(ssim_window_len(9, 9), 9);
        let g = gaussian_window(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn accumulator_matches_direct_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = seq(2, 12, 12, |_| rng.random_range(0.0..1.0));
        let b = seq(2, 12, 12, |_| rng.random_range(0.0..1.0));
        let mut acc = EvalAccumulator::new(&SEVIR_THRESHOLDS, 2).unwrap();
        acc.add(&a, &b).unwrap();
        let s = acc.summary();
        assert!((s.mse - mse(&a, &b).unwrap()).abs() < 1e-9);
        assert!((s.ssim - ssim(&a, &b).unwrap()).abs() < 1e-12);
        let c0 = contingency(&a, &b, 16.0).unwrap();
        assert_eq!(s.per_threshold[0].1, csi(&c0));
        assert!((s.avg_csi - s.per_threshold.iter().map(|p| p.1).sum::<f64>() / 6.0).abs() < 1e-15);
        assert_eq!(acc.lead_summaries().len(), 2);
        assert!(EvalAccumulator::new(&[300.0], 2).is_err());
    }
}
