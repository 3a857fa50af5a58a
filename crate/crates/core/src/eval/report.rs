use std::fmt::Write as _;

use super::metrics::{
    calibration_report, confidence_histogram, confusion_metrics, decide, roc_auc, CalibrationBin, Confusion,
    ConfidenceHistogram,
};
use crate::datasets::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrialPrediction {
    pub trial_id: u64,
    pub truth: Label,
    pub p_odor: f64,
    pub predicted: Label,
}

impl TrialPrediction {
    pub fn correct(&self) -> bool {
        self.truth == self.predicted
    }
}

/// Test-set metrics of one model in one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub model: String,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    /// `None` when the test set holds a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub degenerate: Vec<&'static str>,
    pub trials: Vec<TrialPrediction>,
}

impl FoldReport {
    /// `probs` rows are `[p_blank, p_odor]`, one per id.
    pub fn from_probs(fold: usize, model: &str, ids: &[u64], truth: &[Label], probs: &[[f64; 2]]) -> Result<Self> {
        if ids.len() != truth.len() || ids.len() != probs.len() {
            return Err(Error::invalid(format!(
                "fold report needs matching ids/labels/probs, got {}/{}/{}",
                ids.len(),
                truth.len(),
                probs.len()
            )));
        }
        let p_odor: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let predicted: Vec<Label> = p_odor.iter().map(|&p| decide(p)).collect();
        let m = confusion_metrics(&predicted, truth)?;
        let auc = match roc_auc(&p_odor, truth) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        };
        let mut degenerate = m.degenerate;
        if auc.is_none() {
            degenerate.push("auc");
        }
        let trials = ids
            .iter()
            .zip(truth)
            .zip(p_odor.iter().zip(&predicted))
            .map(|((&trial_id, &truth), (&p_odor, &predicted))| TrialPrediction { trial_id, truth, p_odor, predicted })
            .collect();
        Ok(Self {
            fold,
            model: model.to_string(),
            accuracy: m.accuracy,
            precision: m.precision,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            f1: m.f1,
            auc,
            confusion: m.confusion,
            degenerate,
            trials,
        })
    }

    pub fn truth(&self) -> Vec<Label> {
        self.trials.iter().map(|t| t.truth).collect()
    }

    pub fn p_odor(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.p_odor).collect()
    }

    /// One row per test trial.
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("trial_id,true_label,p_odor,predicted_label,correct\n");
        for t in &self.trials {
            let _ = writeln!(out, "{},{},{:.9},{},{}", t.trial_id, t.truth, t.p_odor, t.predicted, u8::from(t.correct()));
        }
        out
    }

    pub fn calibration(&self, n_bins: usize) -> Result<Vec<CalibrationBin>> {
        calibration_report(&self.p_odor(), &self.truth(), n_bins)
    }

    pub fn confidence(&self, n_bins: usize) -> Result<ConfidenceHistogram> {
        confidence_histogram(&self.p_odor(), &self.truth(), n_bins)
    }
}

pub const METRIC_NAMES: [&str; 6] = ["accuracy", "f1", "auc", "sensitivity", "specificity", "precision"];

fn metric(r: &FoldReport, name: &str) -> Option<f64> {
    match name {
        "accuracy" => Some(r.accuracy),
        "f1" => Some(r.f1),
        "auc" => r.auc,
        "sensitivity" => Some(r.sensitivity),
        "specificity" => Some(r.specificity),
        "precision" => Some(r.precision),
        _ => None,
    }
}

/// Mean and sample standard deviation (n - 1 denominator) over the folds in
/// which the metric is defined. `sd` is 0 for a single fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Option<MetricSummary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(MetricSummary { mean, sd, n })
}

/// All fold reports of one model plus their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub model: String,
    pub folds: Vec<FoldReport>,
}

impl ModelSummary {
    pub fn metric(&self, name: &str) -> Option<MetricSummary> {
        let values: Vec<f64> = self.folds.iter().filter_map(|r| metric(r, name)).collect();
        summarize(&values)
    }

    /// Test predictions of every fold pooled together.
    pub fn pooled(&self) -> (Vec<f64>, Vec<Label>) {
        self.folds.iter().flat_map(|r| r.trials.iter().map(|t| (t.p_odor, t.truth))).unzip()
    }

    pub fn pooled_confidence(&self, n_bins: usize) -> Result<ConfidenceHistogram> {
        let (p, t) = self.pooled();
        confidence_histogram(&p, &t, n_bins)
    }

    pub fn pooled_calibration(&self, n_bins: usize) -> Result<Vec<CalibrationBin>> {
        let (p, t) = self.pooled();
        calibration_report(&p, &t, n_bins)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub models: Vec<ModelSummary>,
    /// `(fold, reason)` for every fold that did not finish.
    pub aborted: Vec<(usize, String)>,
    pub config_echo: String,
}

impl CvReport {
    pub fn complete(&self) -> bool {
        self.aborted.is_empty()
    }

    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.model == name)
    }

    /// Aggregate table with the columns Acc, F1, AUC, Sens, Spec as
    /// mean ± SD across folds.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let done = self.models.first().map_or(0, |m| m.folds.len());
        let _ = writeln!(out, "# cross-validation report");
        let _ = writeln!(out, "# seed = {}", self.seed);
        let _ = writeln!(
            out,
            "# folds = {done}/{} ({})",
            self.k,
            if self.complete() { "complete" } else { "incomplete" }
        );
        for (fold, reason) in &self.aborted {
            let _ = writeln!(out, "# aborted fold {fold}: {reason}");
        }
        let _ = writeln!(out, "# cells are mean ± SD over folds; SD uses the sample (n-1) convention");
        let _ = writeln!(out, "# Acc, F1, Sens, Spec in percent; AUC as a fraction");
        let _ = writeln!(
            out,
            "{:<16} {:>14} {:>14} {:>17} {:>14} {:>14}",
            "Model", "Acc", "F1", "AUC", "Sens", "Spec"
        );
        for m in &self.models {
            let pct = |name: &str| match m.metric(name) {
                Some(s) => format!("{:.1} ± {:.1}", 100.0 * s.mean, 100.0 * s.sd),
                None => "n/a".to_string(),
            };
            let auc = match m.metric("auc") {
                Some(s) => format!("{:.4} ± {:.4}", s.mean, s.sd),
                None => "n/a".to_string(),
            };
            let _ = writeln!(
                out,
                "{:<16} {:>14} {:>14} {:>17} {:>14} {:>14}",
                m.model,
                pct("accuracy"),
                pct("f1"),
                auc,
                pct("sensitivity"),
                pct("specificity")
            );
        }
        out
    }

    /// Per-model, per-fold metric rows.
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("model,fold,n_test,accuracy,f1,auc,sensitivity,specificity,precision,tp,fp,tn,fn,degenerate\n");
        for m in &self.models {
            for r in &m.folds {
                let c = r.confusion;
                let _ = writeln!(
                    out,
                    "{},{},{},{:.9},{:.9},{},{:.9},{:.9},{:.9},{},{},{},{},{}",
                    m.model,
                    r.fold,
                    c.total(),
                    r.accuracy,
                    r.f1,
                    r.auc.map_or("".into(), |a| format!("{a:.9}")),
                    r.sensitivity,
                    r.specificity,
                    r.precision,
                    c.tp,
                    c.fp,
                    c.tn,
                    c.fn_,
                    r.degenerate.join(";")
                );
            }
        }
        out
    }
}

pub fn calibration_csv(bins: &[CalibrationBin]) -> String {
    let mut out = String::from("lower,upper,count,mean_confidence,accuracy\n");
    for b in bins {
        let _ = writeln!(out, "{:.2},{:.2},{},{:.9},{:.9}", b.lower, b.upper, b.count, b.confidence, b.accuracy);
    }
    out
}

/// Histogram rows followed by the two group means as comment lines.
pub fn confidence_csv(h: &ConfidenceHistogram) -> String {
    let mut out = String::from("lower,upper,correct,incorrect\n");
    for i in 0..h.correct.len() {
        let _ = writeln!(out, "{:.3},{:.3},{},{}", h.edges[i], h.edges[i + 1], h.correct[i], h.incorrect[i]);
    }
    let fmt = |m: Option<f64>| m.map_or("undefined".to_string(), |v| format!("{v:.6}"));
    let _ = writeln!(out, "# mean_correct = {}", fmt(h.mean_correct));
    let _ = writeln!(out, "# mean_incorrect = {}", fmt(h.mean_incorrect));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_sd() {
        let s = summarize(&[0.86, 0.87, 0.85, 0.88, 0.87]).unwrap();
        assert!((s.mean - 0.866).abs() < 1e-12);
        assert!((s.sd - 0.011_401_754_250_991_38).abs() < 1e-12);
        assert_eq!(summarize(&[0.5]).unwrap().sd, 0.0);
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn fold_report_counts_and_csv() {
        let truth = [Label::Odor, Label::Odor, Label::Blank, Label::Blank];
        let probs = [[0.2, 0.8], [0.6, 0.4], [0.9, 0.1], [0.3, 0.7]];
        let r = FoldReport::from_probs(0, "m", &[10, 11, 12, 13], &truth, &probs).unwrap();
        assert_eq!(r.confusion, Confusion { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(r.auc, Some(0.75));
        let csv = r.trials_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(2).unwrap().starts_with("11,odor,0.4"));
    }

    #[test]
    fn single_class_fold_has_no_auc() {
        let r = FoldReport::from_probs(0, "m", &[1, 2], &[Label::Odor; 2], &[[0.1, 0.9], [0.2, 0.8]]).unwrap();
        assert_eq!(r.auc, None);
        assert!(r.degenerate.contains(&"auc"));
    }
}
