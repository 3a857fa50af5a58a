use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datasets::Label;
use crate::error::Result;
use crate::models::ModelGraph;
use crate::tensor::Scalar;
use crate::training::SampleSet;

/// Penultimate features of every sample in eval mode, as CSV rows
/// `trial_id,label,f0,...`. Returns the text and the feature width.
pub fn feature_matrix_csv<T: Scalar>(model: &ModelGraph<T>, set: &SampleSet, batch: usize) -> Result<(String, usize)> {
    let dim = model.feature_dim();
    let mut out = String::from("trial_id,label");
    for j in 0..dim {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(batch.max(1)) {
        let pred = model.predict(&set.batch::<T>(chunk))?;
        for (k, &r) in chunk.iter().enumerate() {
            let _ = write!(out, "{},{}", set.ids[r], Label::from_index(set.labels[r])?);
            for v in &pred.features[k] {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
    }
    Ok((out, dim))
}

pub fn export_features<T: Scalar>(model: &ModelGraph<T>, set: &SampleSet, path: impl AsRef<Path>) -> Result<usize> {
    let (csv, _) = feature_matrix_csv(model, set, 128)?;
    fs::write(path, csv)?;
    Ok(set.len())
}
