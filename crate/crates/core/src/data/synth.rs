//! Seeded synthetic precipitation events with physically linked covariates.
//!
//! Radar frames are sums of advecting anisotropic Gaussian cells on a
//! periodic domain. Every covariate channel is a smoothed, positively
//! scaled function of the same noise-free cell field evaluated at the
//! covariate valid time, so covariates at forecast times carry the phase
//! structure of the future radar frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::sequence::{ChannelStats, CovariateGrid, RadarSequence, COVARIATE_CHANNELS, LEVELS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEventConfig {
    pub seed: u64,
    pub t_in: usize,
    pub k_out: usize,
    pub hw: usize,
    pub cov_hw: usize,
    /// Radar frames between consecutive covariate fields.
    pub cov_step: usize,
    /// Minutes between radar frames.
    pub cadence: f64,
    pub n_blobs: usize,
    /// Cell speed range in pixels per frame.
    pub velocity: (f64, f64),
    /// Log-amplitude change per frame.
    pub growth: (f64, f64),
    /// Major to minor axis ratio.
    pub anisotropy: (f64, f64),
    /// Geometric-mean axis length in pixels.
    pub radius: (f64, f64),
    pub amplitude: (f64, f64),
    /// Standard deviation of additive radar noise before clipping.
    pub noise: f64,
    /// Standard deviation of additive covariate noise.
    pub cov_noise: f64,
}

impl Default for SyntheticEventConfig {
    fn default() -> Self {
        SyntheticEventConfig {
            seed: 0,
            t_in: 4,
            k_out: 6,
            hw: 32,
            cov_hw: 16,
            cov_step: 2,
            cadence: 10.0,
            n_blobs: 3,
            velocity: (0.5, 1.5),
            growth: (-0.05, 0.05),
            anisotropy: (1.0, 2.5),
            radius: (2.5, 5.0),
            amplitude: (0.4, 1.0),
            noise: 0.02,
            cov_noise: 0.05,
        }
    }
}

/// Blur width of the covariate smoothing, in covariate pixels.
const COV_BLUR_SIGMA: f64 = 1.0;

fn check_range(key: &str, r: (f64, f64), lo: f64) -> Result<()> {
    if !r.0.is_finite() || !r.1.is_finite() {
        return Err(Error::config(format!("{key}_min"), "range bounds must be finite"));
    }
    if r.0 < lo {
        return Err(Error::config(format!("{key}_min"), format!("must be at least {lo}, got {}", r.0)));
    }
    if r.1 < r.0 {
        return Err(Error::config(format!("{key}_max"), format!("{} is below {key}_min = {}", r.1, r.0)));
    }
    Ok(())
}

impl SyntheticEventConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v, min) in [("t_in", self.t_in, 1), ("k_out", self.k_out, 1), ("hw", self.hw, 2), ("cov_hw", self.cov_hw, 2), ("cov_step", self.cov_step, 1)] {
            if v < min {
                return Err(Error::config(k, format!("must be at least {min}, got {v}")));
            }
        }
        if !(self.cadence > 0.0) || !self.cadence.is_finite() {
            return Err(Error::config("cadence", format!("must be positive, got {}", self.cadence)));
        }
        check_range("velocity", self.velocity, 0.0)?;
        check_range("growth", self.growth, f64::MIN)?;
        check_range("anisotropy", self.anisotropy, 1.0)?;
        check_range("radius", self.radius, f64::MIN_POSITIVE)?;
        check_range("amplitude", self.amplitude, 0.0)?;
        for (k, v) in [("noise", self.noise), ("cov_noise", self.cov_noise)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(k, format!("must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Number of covariate fields covering all `t_in + k_out` frames.
    pub fn n_cov(&self) -> usize {
        (self.t_in + self.k_out - 1).div_ceil(self.cov_step) + 1
    }

    /// Valid time of the first frame; the last observed frame sits at 0.
    pub fn start_time(&self) -> f64 {
        -((self.t_in - 1) as f64) * self.cadence
    }

    pub fn cov_times(&self) -> Vec<f64> {
        (0..self.n_cov())
            .map(|j| self.start_time() + (j * self.cov_step) as f64 * self.cadence)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEvent {
    /// `t_in + k_out` frames.
    pub radar: RadarSequence,
    /// Raw covariates with identity statistics.
    pub covariates: CovariateGrid,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    cy: f64,
    cx: f64,
    vy: f64,
    vx: f64,
    amp: f64,
    growth: f64,
    /// Inverse squared axis lengths.
    ia: f64,
    ib: f64,
    cos: f64,
    sin: f64,
}

impl Cell {
    /// Value at `(y, x)` in radar pixels, `tau` frames after the first.
    fn eval(&self, y: f64, x: f64, tau: f64, n: f64) -> f64 {
        let wrap = |d: f64| d - n * (d / n).round();
        let dy = wrap(y - (self.cy + self.vy * tau));
        let dx = wrap(x - (self.cx + self.vx * tau));
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        self.amp * (self.growth * tau).exp() * (-0.5 * (u * u * self.ia + v * v * self.ib)).exp()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

/// Periodic separable Gaussian blur of an `n × n` plane.
fn blur(x: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / s).collect();
    let idx = |i: isize| i.rem_euclid(n as isize) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for xx in 0..n {
            tmp[y * n + xx] = (-r..=r).map(|d| k[(d + r) as usize] * x[y * n + idx(xx as isize + d)]).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for xx in 0..n {
            out[y * n + xx] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[idx(y as isize + d) * n + xx]).sum();
        }
    }
    out
}

/// Deterministic in `cfg`; `n_blobs = 0` yields all-zero radar frames.
pub fn generate_event(cfg: &SyntheticEventConfig) -> Result<SyntheticEvent> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.hw;
    let nf = n as f64;
    let cells: Vec<Cell> = (0..cfg.n_blobs)
        .map(|_| {
            let speed = uniform(&mut rng, cfg.velocity);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let ratio = uniform(&mut rng, cfg.anisotropy);
            let radius = uniform(&mut rng, cfg.radius);
            let (a, b) = (radius * ratio.sqrt(), radius / ratio.sqrt());
            let orient = rng.random_range(0.0..std::f64::consts::PI);
            Cell {
                cy: rng.random_range(0.0..nf),
                cx: rng.random_range(0.0..nf),
                vy: speed * dir.sin(),
                vx: speed * dir.cos(),
                amp: uniform(&mut rng, cfg.amplitude),
                growth: uniform(&mut rng, cfg.growth),
                ia: 1.0 / (a * a),
                ib: 1.0 / (b * b),
                cos: orient.cos(),
                sin: orient.sin(),
            }
        })
        .collect();

    let n_frames = cfg.t_in + cfg.k_out;
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut frames = Vec::with_capacity(n_frames * n * n);
    for f in 0..n_frames {
        for y in 0..n {
            for x in 0..n {
                let clean: f64 = cells.iter().map(|c| c.eval(y as f64, x as f64, f as f64, nf)).sum();
                let noisy = if cfg.n_blobs == 0 { 0.0 } else { clean + cfg.noise * gauss.sample(&mut rng) };
                frames.push(noisy.clamp(0.0, 1.0));
            }
        }
    }
    let radar = RadarSequence::with_cadence(Tensor::new(vec![n_frames, 1, n, n], frames)?, cfg.start_time(), cfg.cadence)?;

    let m = cfg.cov_hw;
    let scale = nf / m as f64;
    let levels = LEVELS.len();
    let gain: Vec<f64> = (0..COVARIATE_CHANNELS).map(|_| rng.random_range(0.5..1.5)).collect();
    let offset: Vec<f64> = (0..COVARIATE_CHANNELS).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut fields = Vec::with_capacity(cfg.n_cov() * COVARIATE_CHANNELS * m * m);
    for j in 0..cfg.n_cov() {
        let tau = (j * cfg.cov_step) as f64;
        let mut dens = vec![0.0; m * m];
        let mut mu = vec![0.0; m * m];
        let mut mv = vec![0.0; m * m];
        for y in 0..m {
            for x in 0..m {
                let (py, px) = ((y as f64 + 0.5) * scale - 0.5, (x as f64 + 0.5) * scale - 0.5);
                for c in &cells {
                    let g = c.eval(py, px, tau, nf);
                    dens[y * m + x] += g;
                    mu[y * m + x] += c.vx * g;
                    mv[y * m + x] += c.vy * g;
                }
            }
        }
        let d = blur(&dens, m, COV_BLUR_SIGMA);
        let u = blur(&mu, m, COV_BLUR_SIGMA);
        let v = blur(&mv, m, COV_BLUR_SIGMA);
        let grad: Vec<f64> = (0..m * m)
            .map(|i| {
                let (y, x) = (i / m, i % m);
                let gx = d[y * m + (x + 1) % m] - d[y * m + (x + m - 1) % m];
                let gy = d[((y + 1) % m) * m + x] - d[((y + m - 1) % m) * m + x];
                0.5 * gx.hypot(gy)
            })
            .collect();
        for ch in 0..COVARIATE_CHANNELS {
            let var = ch / levels;
            let lvl = ch % levels;
            let smooth = 1.0 + 0.25 * lvl as f64;
            for i in 0..m * m {
                let base = match var {
                    0 | 1 => d[i],
                    2 => d[i] + grad[i],
                    3 => u[i],
                    _ => v[i],
                };
                fields.push(gain[ch] * smooth * base + offset[ch] + cfg.cov_noise * gauss.sample(&mut rng));
            }
        }
    }
    let covariates = CovariateGrid::new(
        Tensor::new(vec![cfg.n_cov(), COVARIATE_CHANNELS, m, m], fields)?,
        cfg.cov_times(),
        vec![ChannelStats::default(); COVARIATE_CHANNELS],
    )?;
    Ok(SyntheticEvent { radar, covariates })
}

/// Per-channel population mean and standard deviation over `grids`; a
/// constant channel gets unit deviation.
pub fn covariate_stats<'a>(grids: impl IntoIterator<Item = &'a CovariateGrid>) -> Vec<ChannelStats> {
    let mut sum = [0.0; COVARIATE_CHANNELS];
    let mut sq = [0.0; COVARIATE_CHANNELS];
    let mut count = [0usize; COVARIATE_CHANNELS];
    for g in grids {
        for n in 0..g.len() {
            for (ch, ((s, q), c)) in sum.iter_mut().zip(sq.iter_mut()).zip(count.iter_mut()).enumerate() {
                for &v in g.plane(n, ch) {
                    *s += v;
                    *q += v * v;
                    *c += 1;
                }
            }
        }
    }
    (0..COVARIATE_CHANNELS)
        .map(|ch| {
            if count[ch] == 0 {
                return ChannelStats::default();
            }
            let mean = sum[ch] / count[ch] as f64;
            let var = (sq[ch] / count[ch] as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            ChannelStats {
                mean,
                std: if std > 1e-12 { std } else { 1.0 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_blobs_gives_zero_frames() {
        let e = generate_event(&SyntheticEventConfig {
            n_blobs: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(e.radar.frames().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_and_in_range() {
        let cfg = SyntheticEventConfig {
            seed: 7,
            ..Default::default()
        };
        let a = generate_event(&cfg).unwrap();
        assert_eq!(a, generate_event(&cfg).unwrap());
        assert!(a.radar.frames().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.radar.len(), 10);
        assert_eq!(a.covariates.len(), 6);
        assert_eq!(a.covariates.lead_times()[0], -30.0);
        assert_ne!(a, generate_event(&SyntheticEventConfig { seed: 8, ..cfg }).unwrap());
    }

    #[test]
    fn invalid_range_names_key() {
        let cfg = SyntheticEventConfig {
            velocity: (2.0, 1.0),
            ..Default::default()
        };
        match generate_event(&cfg) {
            Err(Error::InvalidConfig { key, .. }) => assert_eq!(key, "velocity_max"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cells_wrap_periodically() {
        let c = Cell {
            cy: 0.0,
            cx: 0.0,
            vy: 0.0,
            vx: 1.0,
            amp: 1.0,
            growth: 0.0,
            ia: 1.0,
            ib: 1.0,
            cos: 1.0,
            sin: 0.0,
        };
        assert!((c.eval(0.0, 0.0, 8.0, 8.0) - 1.0).abs() < 1e-15);
        assert!((c.eval(0.0, 7.0, 0.0, 8.0) - c.eval(0.0, 1.0, 0.0, 8.0)).abs() < 1e-15);
    }

    #[test]
    fn stats_normalize_to_unit() {
        let grids: Vec<CovariateGrid> = (0..3)
            .map(|s| generate_event(&SyntheticEventConfig { seed: s, ..Default::default() }).unwrap().covariates)
            .collect();
        let stats = covariate_stats(&grids);
        let normed: Vec<CovariateGrid> = grids.into_iter().map(|g| g.with_stats(stats.clone()).unwrap()).collect();
        let again = covariate_stats(&normed);
        assert_eq!(stats, again);
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for g in &normed {
            for n in 0..g.len() {
                for &v in g.plane(n, 0) {
                    acc += (v - stats[0].mean) / stats[0].std;
                    cnt += 1.0;
                }
            }
        }
        assert!((acc / cnt).abs() < 1e-9);
    }
}
