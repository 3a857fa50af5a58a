use crate::error::{Error, Result};

use super::SpectralFeatures;
use crate::tensor::{Checkpoint, Scalar, Tensor};

/// IQR guard: features whose spread is below this map to zero.
pub const IQR_EPS: f64 = 1e-12;

pub const MIN_FIT_TRIALS: usize = 4;

/// Per-feature robust location and scale, fitted on training spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerParams {
    pub channels: usize,
    pub bins: usize,
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
    pub degenerate: Vec<bool>,
}

/// Quantile by linear interpolation between order statistics at
/// position `q * (n - 1)`. `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn fit_scaler<'a, I>(training: I) -> Result<ScalerParams>
where
    I: IntoIterator<Item = &'a SpectralFeatures>,
{
    let spectra: Vec<&SpectralFeatures> = training.into_iter().collect();
    if spectra.len() < MIN_FIT_TRIALS {
        return Err(Error::invalid(format!(
            "fit_scaler needs at least {MIN_FIT_TRIALS} training spectra, got {}",
            spectra.len()
        )));
    }
    let first = spectra[0];
    let (channels, bins) = (first.channels, first.bins);
    if let Some(bad) = spectra.iter().find(|s| s.channels != channels || s.bins != bins) {
        return Err(Error::shapes("fit_scaler", &[&[channels, bins], &[bad.channels, bad.bins]]));
    }
    let features = channels * bins;
    let mut median = Vec::with_capacity(features);
    let mut iqr = Vec::with_capacity(features);
    let mut column = vec![0.0; spectra.len()];
    for f in 0..features {
        for (c, s) in column.iter_mut().zip(&spectra) {
            *c = s.values[f];
        }
        column.sort_by(f64::total_cmp);
        median.push(quantile_sorted(&column, 0.5));
        iqr.push(quantile_sorted(&column, 0.75) - quantile_sorted(&column, 0.25));
    }
    let degenerate = iqr.iter().map(|&r| r < IQR_EPS).collect();
    Ok(ScalerParams { channels, bins, median, iqr, degenerate })
}

impl ScalerParams {
    pub fn apply(&self, spectrum: &SpectralFeatures) -> Result<SpectralFeatures> {
        if spectrum.channels != self.channels || spectrum.bins != self.bins {
            return Err(Error::shapes("apply_scaler", &[&[self.channels, self.bins], &[spectrum.channels, spectrum.bins]]));
        }
        let values = spectrum
            .values
            .iter()
            .enumerate()
            .map(|(f, &v)| if self.degenerate[f] { 0.0 } else { (v - self.median[f]) / self.iqr[f].max(IQR_EPS) })
            .collect();
        Ok(SpectralFeatures { values, ..spectrum.clone() })
    }

    /// Maps scaled values back; degenerate features come back as the median.
    pub fn invert(&self, scaled: &SpectralFeatures) -> SpectralFeatures {
        let values = scaled.values.iter().enumerate().map(|(f, &v)| v * self.iqr[f] + self.median[f]).collect();
        SpectralFeatures { values, ..scaled.clone() }
    }
}

const SCALER_PREFIX: &str = "scaler.";

impl ScalerParams {
    /// Appends the scaler to `ck` as `scaler.median`, `scaler.iqr` and
    /// `scaler.degenerate` (0/1), each shaped `(channels, bins)` at the
    /// checkpoint's precision.
    pub fn store_in<T: Scalar>(&self, ck: &mut Checkpoint<T>) {
        let shape = vec![self.channels, self.bins];
        let mut put = |name: &str, v: Vec<f64>| {
            let data = v.into_iter().map(T::from_f64).collect();
            ck.push(format!("{SCALER_PREFIX}{name}"), Tensor::new(shape.clone(), data).expect("scaler shape"));
        };
        put("median", self.median.clone());
        put("iqr", self.iqr.clone());
        put("degenerate", self.degenerate.iter().map(|&d| f64::from(u8::from(d))).collect());
    }

    /// Scaler stored by [`ScalerParams::store_in`], if present.
    pub fn load_from<T: Scalar>(ck: &Checkpoint<T>) -> Result<Option<Self>> {
        let get = |name: &str| ck.get(&format!("{SCALER_PREFIX}{name}"));
        let (Some(median), Some(iqr), Some(degenerate)) = (get("median"), get("iqr"), get("degenerate")) else {
            return Ok(None);
        };
        let shape = median.shape();
        if shape.len() != 2 || iqr.shape() != shape || degenerate.shape() != shape {
            return Err(Error::invalid("checkpoint scaler entries have inconsistent shapes"));
        }
        Ok(Some(Self {
            channels: shape[0],
            bins: shape[1],
            median: median.to_f64_vec(),
            iqr: iqr.to_f64_vec(),
            degenerate: degenerate.to_f64_vec().into_iter().map(|v| v != 0.0).collect(),
        }))
    }
}

pub fn apply_scaler(params: &ScalerParams, spectrum: &SpectralFeatures) -> Result<SpectralFeatures> {
    params.apply(spectrum)
}
