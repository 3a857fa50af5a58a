//! Synthetic olfactory-bulb trials: 1/f background on every channel, and on
//! odor trials a gamma burst after onset plus sustained beta power, both
//! scaled by `snr` times a per-trial response strength.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;

use super::{Label, TrialRecord};
use crate::error::{Error, Result};
use crate::util::{derive_seed, stream};

pub const RAW_SAMPLE_RATE_HZ: f64 = 30_000.0;
pub const RAW_SAMPLES: usize = 60_000;

/// Background standard deviation in microvolts.
const NOISE_UV: f64 = 100.0;
/// Fraction of background variance shared by all channels.
const SHARED_VARIANCE: f64 = 0.36;
/// Gamma and beta amplitudes at snr 1 and unit response strength.
const GAMMA_UV: f64 = 125.0;
const BETA_UV: f64 = 40.0;

const LABEL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_trials: usize,
    pub snr: f64,
    pub seed: u64,
    /// Fraction of odor trials.
    pub class_balance: f64,
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_trials: 400,
            snr: 1.5,
            seed: 7,
            class_balance: 0.5,
            channels: 32,
            samples: RAW_SAMPLES,
            sample_rate_hz: RAW_SAMPLE_RATE_HZ,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials < 2 {
            return Err(Error::invalid(format!("synth.n_trials must be >= 2, got {}", self.n_trials)));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(Error::invalid(format!("synth.snr must be finite and >= 0, got {}", self.snr)));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(Error::invalid(format!("synth.class_balance must lie in [0, 1], got {}", self.class_balance)));
        }
        if self.channels == 0 || self.samples < 16 || !(self.sample_rate_hz > 160.0) {
            return Err(Error::invalid("synth needs channels >= 1, samples >= 16 and a sample rate above 160 Hz"));
        }
        Ok(())
    }
}

/// Labels for all trials: `round(n * balance)` odor trials in seeded order.
pub fn synth_labels(config: &SynthConfig) -> Result<Vec<Label>> {
    config.validate()?;
    let n_odor = (config.n_trials as f64 * config.class_balance).round() as usize;
    let mut labels: Vec<Label> = (0..config.n_trials).map(|i| if i < n_odor { Label::Odor } else { Label::Blank }).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[stream::SYNTH, LABEL_STREAM])));
    Ok(labels)
}

/// Unit-variance noise with power density proportional to 1/f.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut spec = vec![Complex64::default(); n];
    let mut power = 0.0;
    for k in 1..=n / 2 {
        let amp = 1.0 / (k as f64).sqrt();
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        let c = Complex64::new(re, im) * amp;
        spec[k] = c;
        spec[n - k] = c.conj();
        power += if 2 * k == n { 1.0 } else { 2.0 } * amp * amp;
    }
    if n.is_multiple_of(2) {
        spec[n / 2] = Complex64::new(spec[n / 2].re * std::f64::consts::SQRT_2, 0.0);
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    // each conjugate pair adds 2 * E|X_k|^2 = 4 amp^2 to the variance
    let norm = 1.0 / (2.0 * power).sqrt();
    spec.iter().map(|c| c.re * norm).collect()
}

/// Generates trial `index` with the given label. Each trial draws from its
/// own seed stream, so trials can be produced in any order.
pub fn synth_trial(config: &SynthConfig, index: usize, label: Label) -> Result<TrialRecord> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[stream::SYNTH, index as u64]));
    let mut planner = FftPlanner::new();
    let (n, fs) = (config.samples, config.sample_rate_hz);

    let shared = pink_noise(n, &mut rng, &mut planner);
    let trial_gain = (0.2 * rng.sample::<f64, _>(StandardNormal)).exp();
    let mut data = Vec::with_capacity(config.channels * n);
    let mut channel_weights = Vec::with_capacity(config.channels);
    for _ in 0..config.channels {
        let own = pink_noise(n, &mut rng, &mut planner);
        let gain = NOISE_UV * trial_gain * (1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal));
        let (a, b) = (SHARED_VARIANCE.sqrt(), (1.0 - SHARED_VARIANCE).sqrt());
        data.extend(shared.iter().zip(&own).map(|(s, o)| gain * (a * s + b * o)));
        channel_weights.push(rng.random_range(0.5..1.0));
    }

    // Response parameters are drawn for every trial so that the noise of a
    // trial does not depend on its label.
    let strength = config.snr * rng.random_range(0.0..2.0);
    let gamma_hz: f64 = rng.random_range(40.0..80.0);
    let gamma_len = (rng.random_range(0.6..1.2) * fs) as usize;
    let gamma_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let beta_hz: f64 = rng.random_range(15.0..30.0);
    let beta_phase: f64 = rng.random_range(0.0..2.0 * PI);
    let jitter: Vec<f64> = (0..config.channels).map(|_| rng.random_range(-0.3..0.3)).collect();

    if label == Label::Odor && strength > 0.0 {
        let burst = gamma_len.min(n);
        for c in 0..config.channels {
            let w = channel_weights[c] * strength;
            let row = &mut data[c * n..(c + 1) * n];
            for (i, v) in row.iter_mut().enumerate() {
                let t = i as f64 / fs;
                let mut add = w * BETA_UV * (2.0 * PI * beta_hz * t + beta_phase + jitter[c]).sin();
                if i < burst {
                    let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / burst as f64).cos();
                    add += w * GAMMA_UV * env * (2.0 * PI * gamma_hz * t + gamma_phase + jitter[c]).sin();
                }
                *v += add;
            }
        }
    }

    Ok(TrialRecord {
        trial_id: index as u64,
        mouse_id: format!("synth-{}", index % 7),
        label,
        odorant: (label == Label::Odor).then(|| "synthetic".to_string()),
        sample_rate_hz: fs,
        onset_offset_samples: 0,
        channels: config.channels,
        data: data.into_iter().map(|v| v as f32).collect(),
    })
}

/// All trials in memory. Each full-size trial is about 7.7 MB, so large runs
/// should stream [`synth_trial`] instead.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<TrialRecord>> {
    let labels = synth_labels(config)?;
    labels.iter().enumerate().map(|(i, &l)| synth_trial(config, i, l)).collect()
}
