//! AdamW with decoupled weight decay.

use crate::autodiff::params::{ParamId, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW step over every parameter not listed in `frozen`.
///
/// Frozen parameters keep their values and moments untouched. The step
/// counter advances once per call.
pub fn adamw_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState, frozen: &[ParamId]) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::InvalidArgument(
            "adamw_step: parameter, gradient and moment layouts differ".into(),
        ));
    }
    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        weight_decay,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for id in params.ids().collect::<Vec<_>>() {
        if frozen.contains(&id) {
            continue;
        }
        let g = grads.get(id).data();
        let m = state.m.get_mut(id).data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
        }
        let v = state.v.get_mut(id).data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(id).data(), state.v.get(id).data());
        for ((p, mi), vi) in params.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
            *p *= 1.0 - lr * weight_decay;
            *p -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(0.7);
        let g = single(0.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&p, cfg);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, &[]).unwrap();
        }
        assert_eq!(p.get(ParamId(0)).data(), &[0.7]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m = (1-b1)g, v = (1-b2)g², bias-corrected to g and g²:
        // θ1 = θ0(1 - lr·wd) - lr·g/(|g| + eps)
        let (theta0, g0) = (0.3, -2.5);
        let cfg = AdamWConfig::default();
        let mut p = single(theta0);
        let mut st = OptimizerState::new(&p, cfg);
        adamw_step(&mut p, &single(g0), &mut st, &[]).unwrap();
        let expected = theta0 * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * g0 / (g0.abs() + cfg.eps);
        assert!((p.get(ParamId(0)).item() - expected).abs() < 1e-15);
        assert!((p.get(ParamId(0)).item() - (theta0 + cfg.lr)).abs() < 1e-5);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut p = single(1.5);
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        adamw_step(&mut p, &single(3.0), &mut st, &[ParamId(0)]).unwrap();
        assert_eq!(p.get(ParamId(0)).item().to_bits(), 1.5f64.to_bits());
        assert_eq!(st.m.get(ParamId(0)).item(), 0.0);
    }

    #[test]
    fn layout_mismatch_rejected() {
        let mut p = single(1.0);
        let mut other = ParamSet::new();
        other.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut st = OptimizerState::new(&p, AdamWConfig::default());
        assert!(adamw_step(&mut p, &other, &mut st, &[]).is_err());
    }
}
