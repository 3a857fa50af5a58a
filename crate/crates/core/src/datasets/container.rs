//! Dataset directory: a `manifest` (TOML) describing every trial plus
//! `trials.bin`, the concatenated little-endian f32 payloads, channel-major
//! per trial. The manifest carries the SHA-256 of the whole payload file.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Label, TrialRecord};
use crate::dsp::SpectralFeatures;
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "odorcnn-trials";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const PAYLOAD_FILE: &str = "trials.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Time-domain trials; per-channel length is samples.
    Raw,
    /// Power spectra; per-channel length is frequency bins.
    Spectra,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub odor: usize,
    pub blank: usize,
}

impl ClassCounts {
    pub fn add(&mut self, label: Label) {
        match label {
            Label::Odor => self.odor += 1,
            Label::Blank => self.blank += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.odor + self.blank
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub id: u64,
    #[serde(default)]
    pub mouse: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odorant: Option<String>,
    #[serde(default)]
    pub onset_offset_samples: i64,
    /// Byte offset of this trial's payload in `trials.bin`.
    pub offset: u64,
    /// Values per channel.
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub kind: DatasetKind,
    pub trial_count: usize,
    pub channels: usize,
    /// Samples per second for raw data, bin spacing in Hz for spectra.
    pub rate_hz: f64,
    pub class_counts: ClassCounts,
    #[serde(default)]
    pub provenance: String,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    pub trials: Vec<TrialEntry>,
}

impl DatasetManifest {
    fn validate(&self, path: &str) -> Result<()> {
        if self.format != FORMAT_NAME {
            return Err(Error::UnsupportedFormat(format!("{path}: format {:?}", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat(format!("{path}: version {}", self.version)));
        }
        let corrupt = |reason: String| Err(Error::corrupt(path, reason));
        if self.trial_count != self.trials.len() || self.trial_count == 0 {
            return corrupt(format!("trial_count {} but {} entries", self.trial_count, self.trials.len()));
        }
        let mut counts = ClassCounts::default();
        let mut expected_offset = 0u64;
        for t in &self.trials {
            counts.add(t.label.parse().map_err(|_| Error::corrupt(path, format!("trial {} label {:?}", t.id, t.label)))?);
            if t.offset != expected_offset || t.len == 0 {
                return corrupt(format!("trial {} offset {} (expected {expected_offset})", t.id, t.offset));
            }
            expected_offset += t.len * self.channels as u64 * 4;
        }
        if counts != self.class_counts {
            return corrupt(format!("class counts {:?} disagree with labels {counts:?}", self.class_counts));
        }
        if expected_offset != self.payload_bytes {
            return corrupt(format!("entries cover {expected_offset} bytes, manifest says {}", self.payload_bytes));
        }
        Ok(())
    }
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let shown = path.display().to_string();
    let text = fs::read_to_string(&path)?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::corrupt(&shown, format!("manifest does not parse: {e}")))?;
    manifest.validate(&shown)?;
    Ok(manifest)
}

/// Streams trials into a dataset directory; the manifest is written by
/// [`DatasetWriter::finish`], so an interrupted write leaves no manifest.
pub struct DatasetWriter {
    dir: PathBuf,
    kind: DatasetKind,
    provenance: String,
    shape: Option<(usize, f64)>,
    out: BufWriter<File>,
    hasher: Sha256,
    offset: u64,
    counts: ClassCounts,
    entries: Vec<TrialEntry>,
}

impl DatasetWriter {
    pub fn create(dir: impl AsRef<Path>, kind: DatasetKind, provenance: impl Into<String>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let _ = fs::remove_file(dir.join(MANIFEST_FILE));
        let out = BufWriter::new(File::create(dir.join(PAYLOAD_FILE))?);
        Ok(Self {
            dir,
            kind,
            provenance: provenance.into(),
            shape: None,
            out,
            hasher: Sha256::new(),
            offset: 0,
            counts: ClassCounts::default(),
            entries: Vec::new(),
        })
    }

    fn check_shape(&mut self, channels: usize, rate: f64) -> Result<()> {
        match self.shape {
            None => self.shape = Some((channels, rate)),
            Some((c, r)) if c == channels && r == rate => {}
            Some((c, r)) => {
                return Err(Error::invalid(format!(
                    "dataset holds {c} channels at {r} Hz; cannot add {channels} channels at {rate} Hz"
                )))
            }
        }
        Ok(())
    }

    fn write_values(&mut self, values: impl Iterator<Item = f32>) -> Result<u64> {
        let mut bytes = Vec::new();
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.hasher.update(&bytes);
        self.out.write_all(&bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn push_trial(&mut self, trial: &TrialRecord) -> Result<()> {
        if self.kind != DatasetKind::Raw {
            return Err(Error::invalid("cannot add a raw trial to a spectra dataset"));
        }
        trial.validate()?;
        self.check_shape(trial.channels, trial.sample_rate_hz)?;
        let entry = TrialEntry {
            id: trial.trial_id,
            mouse: trial.mouse_id.clone(),
            label: trial.label.to_string(),
            odorant: trial.odorant.clone(),
            onset_offset_samples: trial.onset_offset_samples,
            offset: self.offset,
            len: trial.samples() as u64,
        };
        self.offset += self.write_values(trial.data.iter().copied())?;
        self.counts.add(trial.label);
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_spectrum(&mut self, spectrum: &SpectralFeatures) -> Result<()> {
        if self.kind != DatasetKind::Spectra {
            return Err(Error::invalid("cannot add a spectrum to a raw dataset"));
        }
        if spectrum.values.len() != spectrum.channels * spectrum.bins || spectrum.bins == 0 {
            return Err(Error::shapes("push_spectrum", &[&[spectrum.channels, spectrum.bins], &[spectrum.values.len()]]));
        }
        self.check_shape(spectrum.channels, spectrum.bin_hz)?;
        let entry = TrialEntry {
            id: spectrum.trial_id,
            mouse: String::new(),
            label: spectrum.label.to_string(),
            odorant: None,
            onset_offset_samples: 0,
            offset: self.offset,
            len: spectrum.bins as u64,
        };
        self.offset += self.write_values(spectrum.values.iter().map(|&v| v as f32))?;
        self.counts.add(spectrum.label);
        self.entries.push(entry);
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        let Some((channels, rate_hz)) = self.shape else {
            return Err(Error::invalid("refusing to write an empty dataset"));
        };
        self.out.flush()?;
        let manifest = DatasetManifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            kind: self.kind,
            trial_count: self.entries.len(),
            channels,
            rate_hz,
            class_counts: self.counts,
            provenance: self.provenance,
            payload_bytes: self.offset,
            payload_sha256: hex::encode(self.hasher.finalize()),
            trials: self.entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

/// Sequential reader. The payload checksum is verified when the last trial
/// has been read; a mismatch surfaces as an error from that final read.
pub struct DatasetReader {
    manifest: DatasetManifest,
    path: String,
    input: BufReader<File>,
    hasher: Sha256,
    next: usize,
}

impl DatasetReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let manifest = read_manifest(&dir)?;
        let payload = dir.as_ref().join(PAYLOAD_FILE);
        let path = payload.display().to_string();
        let file = File::open(&payload)?;
        let size = file.metadata()?.len();
        if size != manifest.payload_bytes {
            return Err(Error::corrupt(&path, format!("{size} bytes on disk, manifest expects {}", manifest.payload_bytes)));
        }
        Ok(Self { manifest, path, input: BufReader::new(file), hasher: Sha256::new(), next: 0 })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn next_values(&mut self) -> Result<Option<(TrialEntry, Vec<f32>)>> {
        let Some(entry) = self.manifest.trials.get(self.next).cloned() else {
            return Ok(None);
        };
        let mut bytes = vec![0u8; (entry.len as usize) * self.manifest.channels * 4];
        self.input
            .read_exact(&mut bytes)
            .map_err(|e| Error::corrupt(&self.path, format!("trial {}: {e}", entry.id)))?;
        self.hasher.update(&bytes);
        self.next += 1;
        if self.next == self.manifest.trials.len() {
            let digest = hex::encode(std::mem::take(&mut self.hasher).finalize());
            if digest != self.manifest.payload_sha256 {
                return Err(Error::corrupt(&self.path, "payload checksum mismatch"));
            }
        }
        let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(Some((entry, values)))
    }

    pub fn next_trial(&mut self) -> Result<Option<TrialRecord>> {
        if self.manifest.kind != DatasetKind::Raw {
            return Err(Error::invalid(format!("{} holds spectra, not raw trials", self.path)));
        }
        let Some((e, data)) = self.next_values()? else { return Ok(None) };
        Ok(Some(TrialRecord {
            trial_id: e.id,
            mouse_id: e.mouse,
            label: e.label.parse()?,
            odorant: e.odorant,
            sample_rate_hz: self.manifest.rate_hz,
            onset_offset_samples: e.onset_offset_samples,
            channels: self.manifest.channels,
            data,
        }))
    }

    pub fn next_spectrum(&mut self) -> Result<Option<SpectralFeatures>> {
        if self.manifest.kind != DatasetKind::Spectra {
            return Err(Error::invalid(format!("{} holds raw trials, not spectra", self.path)));
        }
        let Some((e, data)) = self.next_values()? else { return Ok(None) };
        Ok(Some(SpectralFeatures {
            trial_id: e.id,
            label: e.label.parse()?,
            channels: self.manifest.channels,
            bins: e.len as usize,
            bin_hz: self.manifest.rate_hz,
            values: data.into_iter().map(f64::from).collect(),
        }))
    }
}

pub fn save_dataset(trials: &[TrialRecord], dir: impl AsRef<Path>, provenance: &str) -> Result<DatasetManifest> {
    if trials.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    let mut w = DatasetWriter::create(dir, DatasetKind::Raw, provenance)?;
    for t in trials {
        w.push_trial(t)?;
    }
    w.finish()
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let mut r = DatasetReader::open(dir)?;
    let mut out = Vec::with_capacity(r.manifest().trial_count);
    while let Some(t) = r.next_trial()? {
        out.push(t);
    }
    Ok(out)
}

pub fn save_spectra(spectra: &[SpectralFeatures], dir: impl AsRef<Path>, provenance: &str) -> Result<DatasetManifest> {
    if spectra.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    let mut w = DatasetWriter::create(dir, DatasetKind::Spectra, provenance)?;
    for s in spectra {
        w.push_spectrum(s)?;
    }
    w.finish()
}

pub fn load_spectra(dir: impl AsRef<Path>) -> Result<Vec<SpectralFeatures>> {
    let mut r = DatasetReader::open(dir)?;
    let mut out = Vec::with_capacity(r.manifest().trial_count);
    while let Some(s) = r.next_spectrum()? {
        out.push(s);
    }
    Ok(out)
}
