//! Radar frame sequences and forecast covariate grids.

use crate::error::{Error, Result};
use crate::spectral::RealField;
use crate::tensor::Tensor;

/// Upper-air variables carried by a covariate grid, in channel order.
pub const VARIABLES: [&str; 5] = ["z", "q", "t", "u", "v"];
/// Pressure levels in hPa; channel `v·4 + l` holds variable `v` at level `l`.
pub const LEVELS: [u32; 4] = [500, 600, 700, 850];
pub const COVARIATE_CHANNELS: usize = VARIABLES.len() * LEVELS.len();

const CADENCE_TOL: f64 = 1e-9;

/// Frames `(N, 1, H, W)` with values in `[0, 1]` and uniformly spaced
/// timestamps in minutes relative to forecast issue.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarSequence {
    frames: Tensor,
    timestamps: Vec<f64>,
}

fn check_cadence(times: &[f64], what: &'static str) -> Result<()> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { what });
    }
    if times.len() < 2 {
        return Ok(());
    }
    let step = times[1] - times[0];
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("{what}: timestamps must be strictly increasing")));
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - step).abs() > CADENCE_TOL * step.abs().max(1.0) {
            return Err(Error::InvalidArgument(format!("{what}: timestamps are not uniformly spaced")));
        }
    }
    Ok(())
}

impl RadarSequence {
    pub fn new(frames: Tensor, timestamps: Vec<f64>) -> Result<Self> {
        let [n, 1, _, _] = frames.shape()[..] else {
            return Err(Error::shape("RadarSequence", &[timestamps.len(), 1, 0, 0], frames.shape()));
        };
        if n != timestamps.len() {
            return Err(Error::SequenceLength {
                what: "RadarSequence timestamps",
                expected: vec![n],
                actual: timestamps.len(),
            });
        }
        if let Some((i, &v)) = frames.data().iter().enumerate().find(|(_, v)| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidArgument(format!("radar value {v} at index {i} is outside [0, 1]")));
        }
        check_cadence(&timestamps, "RadarSequence")?;
        Ok(RadarSequence { frames, timestamps })
    }

    /// Frames stamped `start, start + cadence, ...`.
    pub fn with_cadence(frames: Tensor, start: f64, cadence: f64) -> Result<Self> {
        let n = frames.shape().first().copied().unwrap_or(0);
        let ts = (0..n).map(|i| start + cadence * i as f64).collect();
        Self::new(frames, ts)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// `(H, W)`.
    pub fn hw(&self) -> (usize, usize) {
        (self.frames.shape()[2], self.frames.shape()[3])
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Spacing between frames in minutes, if there are at least two.
    pub fn cadence(&self) -> Option<f64> {
        (self.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let (h, w) = self.hw();
        &self.frames.data()[i * h * w..(i + 1) * h * w]
    }

    /// Frames `range` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "frame range {start}..{end} outside a sequence of length {}",
                self.len()
            )));
        }
        let (h, w) = self.hw();
        let data = self.frames.data()[start * h * w..end * h * w].to_vec();
        Ok(RadarSequence {
            frames: Tensor::from_parts(vec![end - start, 1, h, w], data),
            timestamps: self.timestamps[start..end].to_vec(),
        })
    }

    /// Frames stacked on the channel axis as an `(H, W, N)` field.
    pub fn to_channels(&self) -> RealField {
        let (h, w) = self.hw();
        let n = self.len();
        let mut out = vec![0.0; h * w * n];
        for f in 0..n {
            for (p, &v) in self.frame(f).iter().enumerate() {
                out[p * n + f] = v;
            }
        }
        RealField::new(h, w, n, out).expect("radar values are finite")
    }

    /// Inverse of [`RadarSequence::to_channels`].
    pub fn from_channels(field: &RealField, timestamps: Vec<f64>) -> Result<Self> {
        let (h, w, n) = field.dims();
        let mut frames = vec![0.0; h * w * n];
        for (p, px) in field.data().chunks_exact(n.max(1)).enumerate() {
            for (f, &v) in px.iter().enumerate() {
                frames[f * h * w + p] = v;
            }
        }
        Self::new(Tensor::new(vec![n, 1, h, w], frames)?, timestamps)
    }
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for ChannelStats {
    fn default() -> Self {
        ChannelStats { mean: 0.0, std: 1.0 }
    }
}

/// Covariate forecasts `(N, M, H', W')` at the given lead times (minutes).
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateGrid {
    fields: Tensor,
    lead_times: Vec<f64>,
    stats: Vec<ChannelStats>,
}

impl CovariateGrid {
    pub fn new(fields: Tensor, lead_times: Vec<f64>, stats: Vec<ChannelStats>) -> Result<Self> {
        let [n, m, _, _] = fields.shape()[..] else {
            return Err(Error::shape("CovariateGrid", &[lead_times.len(), COVARIATE_CHANNELS, 0, 0], fields.shape()));
        };
        if m != COVARIATE_CHANNELS {
            return Err(Error::ChannelMismatch {
                what: "CovariateGrid",
                expected: COVARIATE_CHANNELS,
                actual: m,
            });
        }
        if n != lead_times.len() {
            return Err(Error::SequenceLength {
                what: "CovariateGrid lead times",
                expected: vec![n],
                actual: lead_times.len(),
            });
        }
        if stats.len() != m {
            return Err(Error::ChannelMismatch {
                what: "CovariateGrid stats",
                expected: m,
                actual: stats.len(),
            });
        }
        if stats.iter().any(|s| !s.mean.is_finite() || !(s.std > 0.0) || !s.std.is_finite()) {
            return Err(Error::InvalidArgument("covariate statistics need finite means and positive deviations".into()));
        }
        if !fields.is_finite() {
            return Err(Error::NonFinite { what: "CovariateGrid" });
        }
        if lead_times.iter().any(|t| !t.is_finite()) || lead_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("covariate lead times must be finite and strictly increasing".into()));
        }
        Ok(CovariateGrid { fields, lead_times, stats })
    }

    pub fn fields(&self) -> &Tensor {
        &self.fields
    }

    pub fn lead_times(&self) -> &[f64] {
        &self.lead_times
    }

    pub fn stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    pub fn with_stats(mut self, stats: Vec<ChannelStats>) -> Result<Self> {
        let fields = std::mem::replace(&mut self.fields, Tensor::zeros(&[0]));
        Self::new(fields, self.lead_times, stats)
    }

    pub fn len(&self) -> usize {
        self.lead_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lead_times.is_empty()
    }

    /// `(H', W')`.
    pub fn hw(&self) -> (usize, usize) {
        (self.fields.shape()[2], self.fields.shape()[3])
    }

    /// Field `n`, channel `m` as an `H'·W'` slice.
    pub fn plane(&self, n: usize, m: usize) -> &[f64] {
        let (h, w) = self.hw();
        let off = (n * COVARIATE_CHANNELS + m) * h * w;
        &self.fields.data()[off..off + h * w]
    }

    pub fn channel_name(m: usize) -> String {
        format!("{}{}", VARIABLES[m / LEVELS.len()], LEVELS[m % LEVELS.len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_validation() {
        let ok = Tensor::full(&[3, 1, 2, 2], 0.5);
        assert!(RadarSequence::with_cadence(ok.clone(), -20.0, 10.0).is_ok());
        assert!(RadarSequence::new(ok.clone(), vec![0.0, 10.0, 25.0]).is_err());
        assert!(RadarSequence::new(ok.clone(), vec![0.0, 0.0, 0.0]).is_err());
        assert!(RadarSequence::new(ok, vec![0.0, 10.0]).is_err());
        assert!(RadarSequence::with_cadence(Tensor::full(&[1, 1, 2, 2], 1.5), 0.0, 10.0).is_err());
    }

    #[test]
    fn channel_stacking_round_trips() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 / 24.0).collect();
        let s = RadarSequence::with_cadence(Tensor::new(vec![2, 1, 3, 4], data).unwrap(), 0.0, 5.0).unwrap();
        let f = s.to_channels();
        assert_eq!(f.dims(), (3, 4, 2));
        assert_eq!(f.get(1, 2, 1), s.frame(1)[6]);
        let back = RadarSequence::from_channels(&f, s.timestamps().to_vec()).unwrap();
        assert_eq!(back, s);
        let tail = s.slice(1, 2).unwrap();
        assert_eq!(tail.frame(0), s.frame(1));
    }

    #[test]
    fn covariate_layout() {
        let g = CovariateGrid::new(
            Tensor::zeros(&[2, COVARIATE_CHANNELS, 4, 4]),
            vec![0.0, 20.0],
            vec![ChannelStats::default(); COVARIATE_CHANNELS],
        )
        .unwrap();
        assert_eq!(g.hw(), (4, 4));
        assert_eq!(CovariateGrid::channel_name(0), "z500");
        assert_eq!(CovariateGrid::channel_name(19), "v850");
        assert!(CovariateGrid::new(Tensor::zeros(&[2, 5, 4, 4]), vec![0.0, 1.0], vec![ChannelStats::default(); 5]).is_err());
    }
}
