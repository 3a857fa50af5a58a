//! Import from an external index: a CSV with one row per trial pointing at a
//! raw file of little-endian f32 samples, channel-major.
//!
//! Columns: `trial_id,mouse_id,label,odorant,onset_offset_samples,sample_rate_hz,channels,file`.
//! `file` is resolved relative to the index's directory; `odorant` may be empty.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{DatasetKind, DatasetManifest, DatasetWriter, TrialRecord};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct IndexRow {
    trial_id: u64,
    mouse_id: String,
    label: String,
    #[serde(default)]
    odorant: Option<String>,
    onset_offset_samples: i64,
    sample_rate_hz: f64,
    channels: usize,
    file: String,
}

#[derive(Debug, Clone)]
pub struct ImportSummary {
    pub manifest: DatasetManifest,
    pub rows: usize,
}

pub fn import_index(index_csv: impl AsRef<Path>, out_dir: impl AsRef<Path>, provenance: &str) -> Result<ImportSummary> {
    let index_csv = index_csv.as_ref();
    let base = index_csv.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(index_csv)
        .map_err(|e| Error::invalid(format!("{}: {e}", index_csv.display())))?;
    let mut writer = DatasetWriter::create(out_dir, DatasetKind::Raw, provenance)?;
    let mut rows = 0;
    for (line, row) in reader.deserialize::<IndexRow>().enumerate() {
        let row = row.map_err(|e| Error::invalid(format!("{} row {}: {e}", index_csv.display(), line + 1)))?;
        let path = base.join(&row.file);
        let bytes = fs::read(&path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::corrupt(path.display().to_string(), "length is not a multiple of 4 bytes"));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let trial = TrialRecord {
            trial_id: row.trial_id,
            mouse_id: row.mouse_id,
            label: row.label.parse()?,
            odorant: row.odorant.filter(|o| !o.is_empty()),
            sample_rate_hz: row.sample_rate_hz,
            onset_offset_samples: row.onset_offset_samples,
            channels: row.channels,
            data,
        };
        writer.push_trial(&trial)?;
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::invalid(format!("{} lists no trials", index_csv.display())));
    }
    Ok(ImportSummary { manifest: writer.finish()?, rows })
}
