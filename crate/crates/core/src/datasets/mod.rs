//! Trial storage, class balancing, fold planning and synthetic trials.

mod container;
mod import;
mod split;
mod synth;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use container::{
    load_dataset, load_spectra, read_manifest, save_dataset, save_spectra, ClassCounts, DatasetKind, DatasetManifest,
    DatasetReader, DatasetWriter, TrialEntry, FORMAT_NAME, FORMAT_VERSION, MANIFEST_FILE, PAYLOAD_FILE,
};
pub use import::{import_index, ImportSummary};
pub use split::{balance_undersample, stratified_folds, Fold, FoldPlan};
pub use synth::{synth_generate, synth_trial, synth_labels, SynthConfig, RAW_SAMPLES, RAW_SAMPLE_RATE_HZ};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Blank,
    Odor,
}

impl Label {
    /// Class index used by the models: blank 0, odor 1.
    pub fn index(self) -> usize {
        match self {
            Label::Blank => 0,
            Label::Odor => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Blank),
            1 => Ok(Label::Odor),
            _ => Err(Error::invalid(format!("class index {i} is not 0 (blank) or 1 (odor)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Blank => "blank",
            Label::Odor => "odor",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "odor" | "1" => Ok(Label::Odor),
            "blank" | "0" => Ok(Label::Blank),
            other => Err(Error::invalid(format!("unknown label {other:?} (expected odor or blank)"))),
        }
    }
}

/// One recorded trial, channel-major samples in microvolts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub mouse_id: String,
    pub label: Label,
    pub odorant: Option<String>,
    pub sample_rate_hz: f64,
    /// Samples between odor onset and the first stored sample.
    pub onset_offset_samples: i64,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl TrialRecord {
    pub fn samples(&self) -> usize {
        self.data.len().checked_div(self.channels).unwrap_or(0)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.samples();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.data.is_empty() || !self.data.len().is_multiple_of(self.channels) {
            return Err(Error::invalid(format!(
                "trial {}: {} values do not split into {} equal channels",
                self.trial_id,
                self.data.len(),
                self.channels
            )));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::invalid(format!("trial {}: sample rate must be positive", self.trial_id)));
        }
        Ok(())
    }
}

/// Anything carrying a trial id and a label; lets balancing and fold planning
/// work on raw trials and spectra alike.
pub trait Labeled {
    fn trial_id(&self) -> u64;
    fn label(&self) -> Label;
}

impl Labeled for TrialRecord {
    fn trial_id(&self) -> u64 {
        self.trial_id
    }
    fn label(&self) -> Label {
        self.label
    }
}

impl Labeled for crate::dsp::SpectralFeatures {
    fn trial_id(&self) -> u64 {
        self.trial_id
    }
    fn label(&self) -> Label {
        self.label
    }
}

impl Labeled for (u64, Label) {
    fn trial_id(&self) -> u64 {
        self.0
    }
    fn label(&self) -> Label {
        self.1
    }
}
