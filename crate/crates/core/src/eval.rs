//! Parallel scoring of forecasts over a sample list.
//!
//! Each sample is scored into its own accumulator and the accumulators are
//! merged in sample order, so results do not depend on the worker count.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::data::manifest::Sample;
use crate::error::{Error, Result};
use crate::metrics::EvalAccumulator;
use crate::model::NowcastModel;
use crate::sequence::RadarSequence;
use crate::tensor::Tensor;

/// Environment variable capping the evaluation worker pool.
pub const THREADS_ENV: &str = "FOUCAST_THREADS";

/// Worker count: `FOUCAST_THREADS` when set to a positive integer,
/// otherwise the available parallelism.
pub fn worker_limit() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Repeats the last observed frame at the forecast times.
pub fn persistence(input: &RadarSequence, k_out: usize, times: Vec<f64>) -> Result<RadarSequence> {
    if input.is_empty() {
        return Err(Error::InvalidArgument("persistence needs at least one observed frame".into()));
    }
    let (h, w) = input.hw();
    let last = input.frame(input.len() - 1);
    let data = (0..k_out).flat_map(|_| last.iter().copied()).collect();
    RadarSequence::new(Tensor::new(vec![k_out, 1, h, w], data)?, times)
}

/// Score `predict` on every sample with at most `workers` threads.
pub fn evaluate<F>(samples: &[Sample], thresholds: &[f64], k_out: usize, workers: usize, predict: F) -> Result<EvalAccumulator>
where
    F: Fn(&Sample) -> Result<RadarSequence> + Sync,
{
    let empty = EvalAccumulator::new(thresholds, k_out)?;
    let score = |s: &Sample| -> Result<EvalAccumulator> {
        let mut acc = empty.clone();
        acc.add(&predict(s)?, &s.target)?;
        Ok(acc)
    };
    let workers = workers.clamp(1, samples.len().max(1));
    let next = AtomicUsize::new(0);
    let mut per_sample: Vec<Option<Result<EvalAccumulator>>> = (0..samples.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= samples.len() {
                            break done;
                        }
                        done.push((i, score(&samples[i])));
                    }
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                per_sample[i] = Some(r);
            }
        }
    });
    let mut total = empty;
    for r in per_sample {
        total.merge(&r.expect("every sample is scored")?);
    }
    Ok(total)
}

/// [`evaluate`] for a trained model.
pub fn evaluate_model(model: &NowcastModel, samples: &[Sample], thresholds: &[f64], workers: usize) -> Result<EvalAccumulator> {
    evaluate(samples, thresholds, model.config().k_out, workers, |s| model.forward(&s.input, &s.covariates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_event, SyntheticEventConfig};
    use crate::metrics::SEVIR_THRESHOLDS;

    fn samples(n: u64) -> Vec<Sample> {
        (0..n)
            .map(|seed| {
                let e = generate_event(&SyntheticEventConfig {
                    seed,
                    hw: 16,
                    cov_hw: 8,
                    ..Default::default()
                })
                .unwrap();
                Sample {
                    input: e.radar.slice(0, 4).unwrap(),
                    target: e.radar.slice(4, 10).unwrap(),
                    covariates: e.covariates,
                }
            })
            .collect()
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let s = samples(3);
        let acc = evaluate(&s, &SEVIR_THRESHOLDS, 6, 2, |x| Ok(x.target.clone())).unwrap();
        let sum = acc.summary();
        assert_eq!((sum.mse, sum.mae), (0.0, 0.0));
        assert_eq!(sum.ssim, 1.0);
        assert_eq!(sum.psnr, f64::INFINITY);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let s = samples(5);
        let run = |w| {
            evaluate(&s, &SEVIR_THRESHOLDS, 6, w, |x| persistence(&x.input, 6, x.target.timestamps().to_vec())).unwrap()
        };
        assert_eq!(run(1), run(3));
        assert_eq!(run(1), run(8));
    }
}
