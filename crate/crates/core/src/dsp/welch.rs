use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// One-sided power spectral density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub density: Vec<f64>,
    /// Spacing between bins; bin `k` sits at `k * bin_hz`.
    pub bin_hz: f64,
    pub segments: usize,
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn segment_count(len: usize, nperseg: usize, step: usize) -> usize {
    if len < nperseg {
        0
    } else {
        (len - nperseg) / step + 1
    }
}

/// Reusable Welch estimator: window and FFT plan are built once.
pub struct Welch {
    fs_hz: f64,
    nperseg: usize,
    step: usize,
    window: Vec<f64>,
    scale: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl Welch {
    pub fn new(fs_hz: f64, nperseg: usize, overlap: f64) -> Result<Self> {
        if nperseg < 2 || !(0.0..1.0).contains(&overlap) || fs_hz <= 0.0 {
            return Err(Error::invalid(format!(
                "welch needs nperseg >= 2, overlap in [0, 1), fs > 0; got {nperseg}, {overlap}, {fs_hz}"
            )));
        }
        let noverlap = (nperseg as f64 * overlap).floor() as usize;
        let window = hann(nperseg);
        let power: f64 = window.iter().map(|w| w * w).sum();
        Ok(Self {
            fs_hz,
            nperseg,
            step: nperseg - noverlap,
            window,
            scale: 1.0 / (fs_hz * power),
            fft: FftPlanner::new().plan_fft_forward(nperseg),
        })
    }

    pub fn bins(&self) -> usize {
        self.nperseg / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.fs_hz / self.nperseg as f64
    }

    /// Average of mean-detrended, Hann-windowed segment periodograms,
    /// density-scaled; interior bins doubled, DC and Nyquist kept single.
    pub fn psd(&self, signal: &[f64]) -> Result<Spectrum> {
        let segments = segment_count(signal.len(), self.nperseg, self.step);
        if segments == 0 {
            return Err(Error::invalid(format!(
                "signal of {} samples is shorter than the {}-sample segment",
                signal.len(),
                self.nperseg
            )));
        }
        let bins = self.bins();
        let mut density = vec![0.0; bins];
        let mut buf = vec![Complex64::default(); self.nperseg];
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        for s in 0..segments {
            let seg = &signal[s * self.step..s * self.step + self.nperseg];
            let mean = seg.iter().sum::<f64>() / self.nperseg as f64;
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex64::new((x - mean) * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (d, b) in density.iter_mut().zip(&buf) {
                *d += b.norm_sqr();
            }
        }
        let nyquist = if self.nperseg.is_multiple_of(2) { Some(bins - 1) } else { None };
        for (k, d) in density.iter_mut().enumerate() {
            let one_sided = if k == 0 || Some(k) == nyquist { 1.0 } else { 2.0 };
            *d *= self.scale * one_sided / segments as f64;
        }
        Ok(Spectrum { density, bin_hz: self.bin_hz(), segments })
    }
}

pub fn welch_psd(signal: &[f64], fs_hz: f64, nperseg: usize, overlap: f64) -> Result<Spectrum> {
    Welch::new(fs_hz, nperseg, overlap)?.psd(signal)
}
