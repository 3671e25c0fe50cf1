//! Synthetic covariates carry the phase structure of the future radar
//! frames: their per-bin alignment score against the future spectra beats
//! the same score after randomizing the covariate phases.

use foucast_core::data::synth::{generate_event, SyntheticEventConfig};
use foucast_core::model::regrid::regrid_raw;
use foucast_core::pfm::{alignment, AlignmentMode};
use foucast_core::sequence::COVARIATE_CHANNELS;
use foucast_core::spectral::{dft2_forward, ComplexSpectrum, RealField};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EVENTS: u64 = 100;

/// Mean per-bin alignment score over every non-DC bin and channel.
fn mean_score(radar: &ComplexSpectrum, cov: &ComplexSpectrum) -> f64 {
    let s = alignment(radar, cov, 1e-8, AlignmentMode::PerBin).unwrap().scores;
    let c = radar.channels();
    let v: Vec<f64> = s.data().iter().skip(c).copied().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn covariates_beat_phase_randomized_covariates() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut real, mut shuffled) = (0.0, 0.0);
    for seed in 0..EVENTS {
        let cfg = SyntheticEventConfig { seed, ..SyntheticEventConfig::default() };
        let ev = generate_event(&cfg).unwrap();
        let hw = cfg.hw;
        let times: Vec<f64> = ev.radar.timestamps()[cfg.t_in..].to_vec();
        let cov = regrid_raw(&ev.covariates, &times, (hw, hw)).unwrap();
        let plane = hw * hw;
        for (k, _) in times.iter().enumerate() {
            let frame = ev.radar.frame(cfg.t_in + k);
            // Radar frame repeated across the covariate channels, laid out (H, W, M).
            let m = COVARIATE_CHANNELS;
            let mut radar = vec![0.0; plane * m];
            let mut covs = vec![0.0; plane * m];
            for p in 0..plane {
                for ch in 0..m {
                    radar[p * m + ch] = frame[p];
                    covs[p * m + ch] = cov.data()[(k * m + ch) * plane + p];
                }
            }
            let fr = dft2_forward(&RealField::new(hw, hw, m, radar).unwrap()).unwrap();
            let fc = dft2_forward(&RealField::new(hw, hw, m, covs).unwrap()).unwrap();
            let rotated: Vec<Complex64> = fc.data().iter().map(|z| z * Complex64::from_polar(1.0, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))).collect();
            let fc_rand = ComplexSpectrum::new(fc.shape(), rotated).unwrap();
            real += mean_score(&fr, &fc);
            shuffled += mean_score(&fr, &fc_rand);
        }
    }
    let n = (EVENTS * SyntheticEventConfig::default().k_out as u64) as f64;
    let (real, shuffled) = (real / n, shuffled / n);
    assert!(real > shuffled, "aligned {real:.4} vs randomized {shuffled:.4}");
    assert!(real > 0.0);
}
