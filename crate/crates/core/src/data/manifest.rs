//! Line-oriented dataset index.
//!
//! ```text
//! foucast-manifest 1
//! t_in 4
//! k_out 6
//! hw 32
//! cov_hw 16
//! cadence 10.0
//! cov_times -30.0,-10.0,10.0,30.0,50.0,70.0
//! stats z500 0.31 0.42
//! event train events/e0000.radar.fct events/e0000.cov.fct
//! ```
//!
//! One `stats` line per covariate channel, in channel order. Event paths
//! are relative to the manifest's directory. Blank lines and lines
//! starting with `#` are ignored.

use std::path::{Path, PathBuf};

use crate::data::tensorfile::{read_header, read_tensor, Dtype, Header};
use crate::error::{Error, Result};
use crate::sequence::{ChannelStats, CovariateGrid, RadarSequence, COVARIATE_CHANNELS};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "foucast-manifest 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventEntry {
    pub split: Split,
    /// Relative to the manifest directory.
    pub radar: PathBuf,
    pub cov: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub t_in: usize,
    pub k_out: usize,
    pub hw: usize,
    pub cov_hw: usize,
    pub cadence: f64,
    pub cov_times: Vec<f64>,
    /// z-score statistics of the training split covariates.
    pub stats: Vec<ChannelStats>,
    pub events: Vec<EventEntry>,
}

/// One event split into observed frames, target frames and normalized
/// covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: RadarSequence,
    pub target: RadarSequence,
    pub covariates: CovariateGrid,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        s += &format!("t_in {}\nk_out {}\nhw {}\ncov_hw {}\n", self.t_in, self.k_out, self.hw, self.cov_hw);
        s += &format!("cadence {:?}\n", self.cadence);
        s += &format!("cov_times {}\n", self.cov_times.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>().join(","));
        for (m, st) in self.stats.iter().enumerate() {
            s += &format!("stats {} {:?} {:?}\n", CovariateGrid::channel_name(m), st.mean, st.std);
        }
        for e in &self.events {
            s += &format!("event {} {} {}\n", e.split.name(), e.radar.display(), e.cov.display());
        }
        s
    }

    /// Parse manifest text; `origin` only labels errors.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Manifest {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, l)) if l == MANIFEST_HEADER => {}
            Some((n, l)) => return Err(err(n, format!("expected `{MANIFEST_HEADER}`, found `{l}`"))),
            None => return Err(err(0, "empty manifest".into())),
        }
        let (mut t_in, mut k_out, mut hw, mut cov_hw, mut cadence, mut cov_times) = (None, None, None, None, None, None);
        let mut stats = Vec::new();
        let mut events = Vec::new();
        for (n, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let uint = |v: Option<&&str>| -> Result<usize> {
                v.and_then(|s| s.parse().ok()).ok_or_else(|| err(n, format!("`{}` needs a non-negative integer", toks[0])))
            };
            let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|_| err(n, format!("`{s}` is not a number"))) };
            match toks[0] {
                "t_in" => t_in = Some(uint(toks.get(1))?),
                "k_out" => k_out = Some(uint(toks.get(1))?),
                "hw" => hw = Some(uint(toks.get(1))?),
                "cov_hw" => cov_hw = Some(uint(toks.get(1))?),
                "cadence" => cadence = Some(num(toks.get(1).ok_or_else(|| err(n, "`cadence` needs a value".into()))?)?),
                "cov_times" => {
                    let v = toks.get(1).ok_or_else(|| err(n, "`cov_times` needs a list".into()))?;
                    cov_times = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?);
                }
                "stats" => {
                    if toks.len() != 4 {
                        return Err(err(n, "`stats` needs a channel name, a mean and a deviation".into()));
                    }
                    let want = CovariateGrid::channel_name(stats.len().min(COVARIATE_CHANNELS - 1));
                    if stats.len() >= COVARIATE_CHANNELS || toks[1] != want {
                        return Err(err(n, format!("expected stats for `{want}`, found `{}`", toks[1])));
                    }
                    stats.push(ChannelStats {
                        mean: num(toks[2])?,
                        std: num(toks[3])?,
                    });
                }
                "event" => {
                    if toks.len() != 4 {
                        return Err(err(n, "`event` needs a split, a radar path and a covariate path".into()));
                    }
                    let split = Split::parse(toks[1]).ok_or_else(|| err(n, format!("unknown split `{}`", toks[1])))?;
                    events.push(EventEntry {
                        split,
                        radar: toks[2].into(),
                        cov: toks[3].into(),
                    });
                }
                other => return Err(err(n, format!("unknown entry `{other}`"))),
            }
        }
        let missing = |k: &str| err(0, format!("missing `{k}`"));
        if stats.len() != COVARIATE_CHANNELS {
            return Err(err(0, format!("expected {COVARIATE_CHANNELS} stats lines, found {}", stats.len())));
        }
        let m = DatasetManifest {
            t_in: t_in.ok_or_else(|| missing("t_in"))?,
            k_out: k_out.ok_or_else(|| missing("k_out"))?,
            hw: hw.ok_or_else(|| missing("hw"))?,
            cov_hw: cov_hw.ok_or_else(|| missing("cov_hw"))?,
            cadence: cadence.ok_or_else(|| missing("cadence"))?,
            cov_times: cov_times.ok_or_else(|| missing("cov_times"))?,
            stats,
            events,
        };
        m.check().map_err(|reason| err(0, reason))?;
        Ok(m)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.t_in == 0 || self.k_out == 0 || self.hw == 0 || self.cov_hw == 0 {
            return Err("t_in, k_out, hw and cov_hw must be positive".into());
        }
        if !(self.cadence > 0.0) {
            return Err(format!("cadence must be positive, got {}", self.cadence));
        }
        if self.cov_times.windows(2).any(|w| w[1] <= w[0]) || self.cov_times.is_empty() {
            return Err("cov_times must be non-empty and strictly increasing".into());
        }
        if self.stats.iter().any(|s| !s.mean.is_finite() || !(s.std > 0.0)) {
            return Err("stats need finite means and positive deviations".into());
        }
        Ok(())
    }

    /// Read, parse, and validate every referenced file header against the
    /// declared shapes.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&text, path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for (i, e) in m.events.iter().enumerate() {
            m.check_header(&read_header(&dir.join(&e.radar))?, &m.radar_shape(), &dir.join(&e.radar), i)?;
            m.check_header(&read_header(&dir.join(&e.cov))?, &m.cov_shape(), &dir.join(&e.cov), i)?;
        }
        Ok(m)
    }

    fn check_header(&self, h: &Header, want: &[usize], file: &Path, i: usize) -> Result<()> {
        if h.dtype == Dtype::C128 || h.dims != want {
            return Err(Error::InvalidArgument(format!(
                "event {i} file {}: expected a real tensor of shape {want:?}, found {} {:?}",
                file.display(),
                h.dtype.name(),
                h.dims
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn radar_shape(&self) -> [usize; 4] {
        [self.t_in + self.k_out, 1, self.hw, self.hw]
    }

    pub fn cov_shape(&self) -> [usize; 4] {
        [self.cov_times.len(), COVARIATE_CHANNELS, self.cov_hw, self.cov_hw]
    }

    /// Indices of the events in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.events.len()).filter(|&i| self.events[i].split == split).collect()
    }

    /// Load event `i` from files under `dir`.
    pub fn load_sample(&self, dir: &Path, i: usize) -> Result<Sample> {
        let e = self
            .events
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("event index {i} out of range ({} events)", self.events.len())))?;
        let real = |p: &Path, shape: [usize; 4]| -> Result<Tensor> {
            let (dt, t) = read_tensor(p)?;
            if dt == Dtype::C128 || t.shape() != shape {
                return Err(Error::InvalidArgument(format!("{}: expected a real tensor of shape {shape:?}", p.display())));
            }
            Ok(t)
        };
        let radar = real(&dir.join(&e.radar), self.radar_shape())?;
        let cov = real(&dir.join(&e.cov), self.cov_shape())?;
        let start = -((self.t_in - 1) as f64) * self.cadence;
        let full = RadarSequence::with_cadence(radar, start, self.cadence)?;
        Ok(Sample {
            input: full.slice(0, self.t_in)?,
            target: full.slice(self.t_in, self.t_in + self.k_out)?,
            covariates: CovariateGrid::new(cov, self.cov_times.clone(), self.stats.clone())?,
        })
    }

    /// All samples of `split` in manifest order.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<Sample>> {
        self.indices(split).into_iter().map(|i| self.load_sample(dir, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            t_in: 2,
            k_out: 3,
            hw: 8,
            cov_hw: 4,
            cadence: 10.0,
            cov_times: vec![-10.0, 10.0, 30.0],
            stats: (0..COVARIATE_CHANNELS).map(|m| ChannelStats { mean: m as f64 * 0.1, std: 1.5 }).collect(),
            events: vec![
                EventEntry {
                    split: Split::Train,
                    radar: "a.radar.fct".into(),
                    cov: "a.cov.fct".into(),
                },
                EventEntry {
                    split: Split::Test,
                    radar: "b.radar.fct".into(),
                    cov: "b.cov.fct".into(),
                },
            ],
        }
    }

    #[test]
    fn text_round_trip() {
        let m = manifest();
        assert_eq!(DatasetManifest::parse(&m.to_text(), Path::new("m")).unwrap(), m);
        assert_eq!(m.indices(Split::Test), vec![1]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = manifest().to_text().replace("event test", "event holdout");
        match DatasetManifest::parse(&text, Path::new("m")) {
            Err(Error::Manifest { line, reason, .. }) => {
                assert_eq!(line, 29);
                assert!(reason.contains("holdout"));
            }
            other => panic!("{other:?}"),
        }
        let text = manifest().to_text().replace("stats q500", "stats q600");
        assert!(DatasetManifest::parse(&text, Path::new("m")).is_err());
    }
}
