//! Resampling of covariate forecasts onto the hidden grid and the radar
//! forecast times.

use crate::error::{Error, Result};
use crate::sequence::{CovariateGrid, COVARIATE_CHANNELS};
use crate::tensor::Tensor;

/// Bilinear resampling of one `(h, w)` plane to `(ho, wo)` with corner
/// pixels aligned, so affine fields are reproduced exactly.
pub fn bilinear(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (x.floor() as usize).min(n_in - 2);
        (i0, i0 + 1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(ho * wo);
    for y in 0..ho {
        let (y0, y1, fy) = coord(y, ho, h);
        for x in 0..wo {
            let (x0, x1, fx) = coord(x, wo, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Index pair and weight of the second for linear interpolation at `t`,
/// clamped to the ends of `times`.
fn time_weights(times: &[f64], t: f64) -> (usize, usize, f64) {
    let n = times.len();
    if n == 1 || t <= times[0] {
        return (0, 0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let j = times.partition_point(|&v| v <= t).min(n - 1);
    let (a, b) = (times[j - 1], times[j]);
    (j - 1, j, (t - a) / (b - a))
}

/// Spatial and temporal resampling without normalization:
/// `(len(target_times), M, ho, wo)`.
pub fn regrid_raw(cov: &CovariateGrid, target_times: &[f64], target_hw: (usize, usize)) -> Result<Tensor> {
    if cov.is_empty() {
        return Err(Error::InvalidArgument("regrid needs at least one covariate field".into()));
    }
    let (h, w) = cov.hw();
    let (ho, wo) = target_hw;
    if ho == 0 || wo == 0 {
        return Err(Error::InvalidArgument("regrid target must be non-empty".into()));
    }
    let m = COVARIATE_CHANNELS;
    let mut out = Vec::with_capacity(target_times.len() * m * ho * wo);
    for &t in target_times {
        if !t.is_finite() {
            return Err(Error::NonFinite { what: "regrid target time" });
        }
        let (i0, i1, f) = time_weights(cov.lead_times(), t);
        for ch in 0..m {
            let a = cov.plane(i0, ch);
            let b = cov.plane(i1, ch);
            let plane: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * (1.0 - f) + y * f).collect();
            out.extend(bilinear(&plane, h, w, ho, wo));
        }
    }
    Tensor::new(vec![target_times.len(), m, ho, wo], out)
}

/// [`regrid_raw`] followed by per-channel z-scoring with the grid's stats.
pub fn regrid(cov: &CovariateGrid, target_times: &[f64], target_hw: (usize, usize)) -> Result<Tensor> {
    let mut t = regrid_raw(cov, target_times, target_hw)?;
    let plane = target_hw.0 * target_hw.1;
    let stats = cov.stats().to_vec();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let s = stats[(i / plane) % COVARIATE_CHANNELS];
        *v = (*v - s.mean) / s.std;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::ChannelStats;

    fn grid(n: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize, usize) -> f64, times: Vec<f64>) -> CovariateGrid {
        let mut d = Vec::new();
        for t in 0..n {
            for c in 0..COVARIATE_CHANNELS {
                for y in 0..h {
                    for x in 0..w {
                        d.push(f(t, c, y, x));
                    }
                }
            }
        }
        CovariateGrid::new(
            Tensor::new(vec![n, COVARIATE_CHANNELS, h, w], d).unwrap(),
            times,
            vec![ChannelStats::default(); COVARIATE_CHANNELS],
        )
        .unwrap()
    }

    #[test]
    fn identity_on_same_grid_and_times() {
        let g = grid(3, 4, 5, |t, c, y, x| (t * 7 + c * 3 + y * 5 + x) as f64 * 0.1, vec![0.0, 10.0, 20.0]);
        let r = regrid_raw(&g, &[0.0, 10.0, 20.0], (4, 5)).unwrap();
        assert_eq!(r.data(), g.fields().data());
    }

    #[test]
    fn affine_ramp_reproduced() {
        let g = grid(1, 5, 7, |_, c, y, x| 2.0 * y as f64 / 4.0 - 3.0 * x as f64 / 6.0 + c as f64, vec![0.0]);
        let r = regrid_raw(&g, &[0.0], (9, 13)).unwrap();
        for c in 0..COVARIATE_CHANNELS {
            for y in 0..9 {
                for x in 0..13 {
                    let want = 2.0 * y as f64 / 8.0 - 3.0 * x as f64 / 12.0 + c as f64;
                    assert!((r.data()[(c * 9 + y) * 13 + x] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_midpoint_and_clamping() {
        let g = grid(2, 2, 2, |t, _, _, _| if t == 0 { 1.0 } else { 3.0 }, vec![0.0, 20.0]);
        let r = regrid_raw(&g, &[10.0, -5.0, 40.0], (2, 2)).unwrap();
        let plane = COVARIATE_CHANNELS * 4;
        assert!(r.data()[..plane].iter().all(|&v| v == 2.0));
        assert!(r.data()[plane..2 * plane].iter().all(|&v| v == 1.0));
        assert!(r.data()[2 * plane..].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn normalization_uses_stats() {
        let g = grid(1, 2, 2, |_, c, _, _| c as f64, vec![0.0]);
        let stats = (0..COVARIATE_CHANNELS).map(|c| ChannelStats { mean: c as f64, std: 2.0 }).collect();
        let g = g.with_stats(stats).unwrap();
        let r = regrid(&g, &[0.0], (3, 3)).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }
}
