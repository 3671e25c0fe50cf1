//! Binary checkpoints: model config, training state, parameters and
//! optimizer moments.
//!
//! Layout (little-endian): magic `FCK1`, `u32` version, `u32` count of
//! config pairs as length-prefixed UTF-8 strings, `u8` phase, `u8`
//! memory-frozen flag, `u64` step, the parameter set, then a `u8` flag
//! followed by the optimizer (five `f64` hyperparameters, `u64` step, first
//! and second moments). A parameter set is a `u32` count of entries, each a
//! name, a `u8` rank, `u32` dims and an `f64` payload.

use std::path::Path;

use crate::autodiff::{AdamWConfig, OptimizerState, ParamSet};
use crate::error::{Error, Result};
use crate::memory::TrainingPhase;
use crate::model::{ModelConfig, NowcastModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    pub phase: TrainingPhase,
    pub memory_frozen: bool,
    /// Optimization steps completed.
    pub step: u64,
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            phase: TrainingPhase::One,
            memory_frozen: false,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: TrainState,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    /// Rebuild the model, rejecting any architecture key that differs from
    /// `expected`.
    pub fn into_model(self, expected: Option<&ModelConfig>) -> Result<(NowcastModel, TrainState, Option<OptimizerState>)> {
        if let Some(exp) = expected {
            check_config(&self.config, exp)?;
        }
        let model = NowcastModel::from_params(self.config, self.params)?;
        if let Some(o) = &self.optimizer {
            if !o.m.same_layout(model.params()) || !o.v.same_layout(model.params()) {
                return Err(Error::InvalidArgument("optimizer moments do not match the parameter layout".into()));
            }
        }
        Ok((model, self.state, self.optimizer))
    }
}

/// First differing architecture key, reported with both values.
pub fn check_config(stored: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    for ((k, s), (_, e)) in stored.to_pairs().into_iter().zip(expected.to_pairs()) {
        if s != e {
            return Err(Error::CheckpointMismatch {
                key: k.into(),
                stored: s,
                expected: e,
            });
        }
    }
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, p: &ParamSet) {
        self.u32(p.len() as u32);
        for (_, name, t) in p.iter() {
            self.str(name);
            self.u8(t.shape().len() as u8);
            t.shape().iter().for_each(|&d| self.u32(d as u32));
            t.data().iter().for_each(|&v| self.f64(v));
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                expected: (self.pos + n) as u64,
                actual: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::InvalidArgument(format!("invalid UTF-8 string at byte offset {at}")))
    }
    fn params(&mut self) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for _ in 0..self.u32()? {
            let name = self.str()?;
            let rank = self.u8()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let raw = self.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            p.insert(name, Tensor::new(dims, data)?)?;
        }
        Ok(p)
    }
}

pub fn encode_checkpoint(model: &NowcastModel, state: TrainState, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let pairs = model.config().to_pairs();
    w.u32(pairs.len() as u32);
    for (k, v) in &pairs {
        w.str(k);
        w.str(v);
    }
    w.u8(state.phase.id());
    w.u8(state.memory_frozen as u8);
    w.u64(state.step);
    w.params(model.params());
    match optimizer {
        None => w.u8(0),
        Some(o) => {
            w.u8(1);
            let c = o.config;
            for v in [c.lr, c.beta1, c.beta2, c.weight_decay, c.eps] {
                w.f64(v);
            }
            w.u64(o.step);
            w.params(&o.m);
            w.params(&o.v);
        }
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut config = ModelConfig::default();
    for _ in 0..r.u32()? {
        let k = r.str()?;
        let v = r.str()?;
        config.set(&k, &v)?;
    }
    config.validate()?;
    let phase = TrainingPhase::from_id(r.u8()?)?;
    let memory_frozen = r.u8()? != 0;
    let step = r.u64()?;
    let params = r.params()?;
    let optimizer = match r.u8()? {
        0 => None,
        _ => {
            let mut h = [0.0; 5];
            for v in &mut h {
                *v = r.f64()?;
            }
            let config = AdamWConfig {
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                weight_decay: h[3],
                eps: h[4],
            };
            let step = r.u64()?;
            let m = r.params()?;
            let v = r.params()?;
            Some(OptimizerState { config, step, m, v })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!("{} trailing bytes at byte offset {}", bytes.len() - r.pos, r.pos)));
    }
    Ok(Checkpoint {
        config,
        state: TrainState {
            phase,
            memory_frozen,
            step,
        },
        params,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, model: &NowcastModel, state: TrainState, optimizer: Option<&OptimizerState>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, state, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Read and rebuild in one step; see [`Checkpoint::into_model`].
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(NowcastModel, TrainState, Option<OptimizerState>)> {
    read_checkpoint(path)?.into_model(expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            t_in: 2,
            k_out: 2,
            hw: 8,
            hidden_hw: 4,
            c_emb: 4,
            depth_l: 1,
            n_blocks: 2,
            memory_slots: 3,
            enc_channels: [2, 2, 2],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = NowcastModel::new(small(), 3).unwrap();
        let mut opt = OptimizerState::new(model.params(), AdamWConfig::default());
        opt.step = 5;
        let state = TrainState {
            phase: TrainingPhase::Two,
            memory_frozen: true,
            step: 17,
        };
        let bytes = encode_checkpoint(&model, state, Some(&opt));
        let (m2, s2, o2) = decode_checkpoint(&bytes).unwrap().into_model(Some(&small())).unwrap();
        assert_eq!(m2, model);
        assert_eq!(s2, state);
        assert_eq!(o2.unwrap(), opt);
        assert_eq!(encode_checkpoint(&m2, s2, Some(&opt)), bytes);
    }

    #[test]
    fn config_mismatch_names_both_values() {
        let model = NowcastModel::new(small(), 3).unwrap();
        let bytes = encode_checkpoint(&model, TrainState::default(), None);
        let other = ModelConfig { depth_l: 2, ..small() };
        match decode_checkpoint(&bytes).unwrap().into_model(Some(&other)) {
            Err(Error::CheckpointMismatch { key, stored, expected }) => {
                assert_eq!((key.as_str(), stored.as_str(), expected.as_str()), ("depth_l", "1", "2"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn header_errors() {
        let model = NowcastModel::new(small(), 3).unwrap();
        let mut bytes = encode_checkpoint(&model, TrainState::default(), None);
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::BadMagic { .. })));
    }
}
