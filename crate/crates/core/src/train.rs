//! Two-phase training loop.
//!
//! Steps `0..phase1_steps` run phase 1: the memory bank is trainable, the
//! memory query is built from the observed and target frames, and the slots
//! are projected back onto the unit circle after every update. The
//! remaining steps run phase 2 with the bank frozen and the query built
//! from observed frames only. Batches are a pure function of
//! `(seed, step)`, so a resumed run replays the uninterrupted one.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adamw_step, AdamWConfig, OptimizerState, ParamId, Tape};
use crate::data::checkpoint::TrainState;
use crate::data::manifest::Sample;
use crate::error::{Error, Result};
use crate::memory::{renormalize_slots, TrainingPhase};
use crate::metrics::combined_loss_var;
use crate::model::NowcastModel;
use crate::sequence::RadarSequence;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            batch: 4,
            phase1_steps: 250,
            phase2_steps: 750,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.phase1_steps + self.phase2_steps
    }

    pub fn phase_at(&self, step: u64) -> TrainingPhase {
        if step < self.phase1_steps {
            TrainingPhase::One
        } else {
            TrainingPhase::Two
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Sample indices for `step`: without replacement when the batch fits.
    pub fn batch_indices(&self, step: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        if self.batch <= n {
            sample(&mut rng, n, self.batch).into_vec()
        } else {
            (0..self.batch).map(|_| rng.random_range(0..n)).collect()
        }
    }
}

/// A sample with covariates aligned to the model grid and targets stacked
/// as `(H, W, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub input: RadarSequence,
    pub target: RadarSequence,
    pub aligned: Tensor,
    pub target_channels: Tensor,
}

pub fn prepare(model: &NowcastModel, samples: &[Sample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                aligned: model.align_covariates(&s.input, &s.covariates)?,
                target_channels: s.target.to_channels().to_tensor(),
                input: s.input.clone(),
                target: s.target.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub phase: TrainingPhase,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    model: NowcastModel,
    optimizer: OptimizerState,
    state: TrainState,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model: NowcastModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params(), config.adamw());
        let state = TrainState {
            phase: config.phase_at(0),
            memory_frozen: config.phase_at(0) == TrainingPhase::Two,
            step: 0,
        };
        Ok(Trainer {
            model,
            optimizer,
            state,
            config,
        })
    }

    /// Continue from a saved state. Without stored moments the optimizer
    /// restarts from zero.
    pub fn resume(model: NowcastModel, state: TrainState, optimizer: Option<OptimizerState>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut optimizer = optimizer.unwrap_or_else(|| OptimizerState::new(model.params(), config.adamw()));
        optimizer.config = config.adamw();
        Ok(Trainer {
            model,
            optimizer,
            state,
            config,
        })
    }

    pub fn model(&self) -> &NowcastModel {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_parts(self) -> (NowcastModel, TrainState, OptimizerState) {
        (self.model, self.state, self.optimizer)
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps()
    }

    /// Parameters held fixed in `phase`: the bank in phase 2, the unused
    /// query alignment in phase 1.
    pub fn frozen(&self, phase: TrainingPhase) -> Vec<ParamId> {
        match phase {
            TrainingPhase::One => self
                .model
                .params()
                .iter()
                .filter(|(_, name, _)| name.starts_with("align."))
                .map(|(id, _, _)| id)
                .collect(),
            TrainingPhase::Two => self.model.slots_id().into_iter().collect(),
        }
    }

    /// Mean combined loss over `batch` and its parameter gradients. A
    /// non-finite loss is reported against the current step.
    pub fn batch_loss(&self, data: &[PreparedSample], batch: &[usize], phase: TrainingPhase) -> Result<(f64, crate::autodiff::ParamSet)> {
        let mut t = Tape::new();
        let vars = t.bind(self.model.params());
        let mut total = None;
        for &i in batch {
            let s = &data[i];
            let out = self.model.forward_var(&mut t, &vars, &s.input, &s.aligned, phase, Some(&s.target))?;
            let l = combined_loss_var(&mut t, out.pred, &s.target_channels, self.model.config().lambda)?;
            total = Some(match total {
                None => l,
                Some(acc) => t.add(acc, l)?,
            });
        }
        let total = total.ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let loss = t.scale(total, 1.0 / batch.len() as f64);
        let value = t.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step as usize,
                loss: value,
            });
        }
        let grads = t.backward(loss)?.param_grads(self.model.params());
        Ok((value, grads))
    }

    /// One optimization step on the batch drawn for the current step.
    pub fn step(&mut self, data: &[PreparedSample]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one sample".into()));
        }
        let step = self.state.step;
        let phase = self.config.phase_at(step);
        let batch = self.config.batch_indices(step, data.len());
        let (loss, grads) = self.batch_loss(data, &batch, phase)?;
        let frozen = self.frozen(phase);
        adamw_step(self.model.params_mut(), &grads, &mut self.optimizer, &frozen)?;
        if phase == TrainingPhase::One {
            if let Some(id) = self.model.slots_id() {
                renormalize_slots(self.model.params_mut().get_mut(id));
            }
        }
        self.state.step += 1;
        self.state.phase = self.config.phase_at(self.state.step);
        self.state.memory_frozen = self.state.phase == TrainingPhase::Two;
        log::debug!("step {step} phase {} loss {loss:.6}", phase.id());
        Ok(StepRecord { step, phase, loss })
    }

    /// Step until `until` (capped at the configured total), reporting each step.
    pub fn run_until(&mut self, data: &[PreparedSample], until: u64, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        let until = until.min(self.config.total_steps());
        let mut records = Vec::new();
        while self.state.step < until {
            let r = self.step(data)?;
            on_step(&r);
            records.push(r);
        }
        Ok(records)
    }

    pub fn run(&mut self, data: &[PreparedSample], on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        self.run_until(data, self.config.total_steps(), on_step)
    }
}
