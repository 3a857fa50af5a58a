//! Raw trial to normalized spectrum: zero-phase bandpass, decimation, Welch
//! PSD per channel, then per-feature median/IQR scaling.

mod filter;
mod scaler;
mod welch;

pub use filter::{decimate, design_butterworth_bandpass, filter_zero_phase, Biquad, BiquadCascade};
pub use scaler::{apply_scaler, fit_scaler, quantile_sorted, ScalerParams, IQR_EPS, MIN_FIT_TRIALS};
pub use welch::{hann, segment_count, welch_psd, Spectrum, Welch};

use crate::datasets::{Label, TrialRecord};
use crate::error::{Error, Result};

/// Channels x bins matrix, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    pub trial_id: u64,
    pub label: Label,
    pub channels: usize,
    pub bins: usize,
    pub bin_hz: f64,
    pub values: Vec<f64>,
}

impl SpectralFeatures {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.bins..(c + 1) * self.bins]
    }

    pub fn bin_frequencies(&self) -> Vec<f64> {
        (0..self.bins).map(|k| k as f64 * self.bin_hz).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub decimate: usize,
    pub nperseg: usize,
    pub overlap: f64,
    /// Expected channel count; trials with another count are rejected.
    pub channels: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { order: 5, low_hz: 0.5, high_hz: 100.0, decimate: 30, nperseg: 256, overlap: 0.5, channels: 32 }
    }
}

/// Filter and Welch estimator for one input sample rate, built once and
/// reused across trials.
pub struct Preprocessor {
    config: PreprocessConfig,
    fs_hz: f64,
    cascade: BiquadCascade,
    welch: Welch,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig, fs_hz: f64) -> Result<Self> {
        if config.decimate < 1 {
            return Err(Error::invalid("preprocess.decimate must be at least 1"));
        }
        if config.high_hz >= fs_hz / config.decimate as f64 / 2.0 {
            return Err(Error::invalid(format!(
                "preprocess.high_hz {} must stay below the decimated Nyquist {}",
                config.high_hz,
                fs_hz / config.decimate as f64 / 2.0
            )));
        }
        let cascade = design_butterworth_bandpass(config.order, config.low_hz, config.high_hz, fs_hz)?;
        let welch = Welch::new(fs_hz / config.decimate as f64, config.nperseg, config.overlap)?;
        Ok(Self { config, fs_hz, cascade, welch })
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    pub fn cascade(&self) -> &BiquadCascade {
        &self.cascade
    }

    pub fn bins(&self) -> usize {
        self.welch.bins()
    }

    /// Unscaled power spectra. Values are rounded to f32 so the in-memory
    /// result equals what the dataset container stores.
    pub fn spectral_features(&self, raw: &TrialRecord) -> Result<SpectralFeatures> {
        raw.validate()?;
        if raw.channels != self.config.channels {
            return Err(Error::invalid(format!(
                "trial {} has {} channels, expected {}",
                raw.trial_id, raw.channels, self.config.channels
            )));
        }
        if raw.sample_rate_hz != self.fs_hz {
            return Err(Error::invalid(format!(
                "trial {} is sampled at {} Hz, preprocessor built for {} Hz",
                raw.trial_id, raw.sample_rate_hz, self.fs_hz
            )));
        }
        let mut values = Vec::with_capacity(raw.channels * self.bins());
        let mut signal = Vec::with_capacity(raw.samples());
        for c in 0..raw.channels {
            signal.clear();
            signal.extend(raw.channel(c).iter().map(|&v| f64::from(v)));
            let filtered = filter_zero_phase(&self.cascade, &signal)?;
            let low_rate = decimate(&filtered, self.config.decimate)?;
            let spectrum = self.welch.psd(&low_rate)?;
            values.extend(spectrum.density.iter().map(|&d| f64::from(d as f32)));
        }
        Ok(SpectralFeatures {
            trial_id: raw.trial_id,
            label: raw.label,
            channels: raw.channels,
            bins: self.bins(),
            bin_hz: self.welch.bin_hz(),
            values,
        })
    }

    /// Full per-trial pipeline including scaling.
    pub fn preprocess_trial(&self, raw: &TrialRecord, scaler: &ScalerParams) -> Result<SpectralFeatures> {
        scaler.apply(&self.spectral_features(raw)?)
    }
}

pub fn preprocess_trial(
    raw: &TrialRecord,
    config: &PreprocessConfig,
    scaler: &ScalerParams,
) -> Result<SpectralFeatures> {
    Preprocessor::new(config.clone(), raw.sample_rate_hz)?.preprocess_trial(raw, scaler)
}
