use crate::datasets::Label;
use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-5;

/// Arithmetic mean of two members' class probabilities.
pub fn ensemble_probs(p_res: &[[f64; 2]], p_att: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if p_res.len() != p_att.len() {
        return Err(Error::shapes("ensemble_probs", &[&[p_res.len(), 2], &[p_att.len(), 2]]));
    }
    for (i, row) in p_res.iter().chain(p_att).enumerate() {
        if (row[0] + row[1] - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("probability row {} = {row:?} does not sum to 1", i % p_res.len().max(1))));
        }
    }
    Ok(p_res.iter().zip(p_att).map(|(a, b)| [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]).collect())
}

/// Odor iff the odor probability exceeds 0.5.
pub fn decide(p_odor: f64) -> Label {
    if p_odor > 0.5 {
        Label::Odor
    } else {
        Label::Blank
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Threshold metrics with odor as the positive class. A zero denominator
/// gives 0 and adds the metric's name to `degenerate`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMetrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub degenerate: Vec<&'static str>,
}

pub fn confusion_metrics(predicted: &[Label], truth: &[Label]) -> Result<ConfusionMetrics> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "confusion_metrics needs equal non-empty inputs, got {} predictions and {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (Label::Odor, Label::Odor) => c.tp += 1,
            (Label::Odor, Label::Blank) => c.fp += 1,
            (Label::Blank, Label::Blank) => c.tn += 1,
            (Label::Blank, Label::Odor) => c.fn_ += 1,
        }
    }
    let mut degenerate = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &'static str| {
        if den == 0 {
            degenerate.push(name);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio(c.tp + c.tn, c.total(), "accuracy");
    let precision = ratio(c.tp, c.tp + c.fp, "precision");
    let sensitivity = ratio(c.tp, c.tp + c.fn_, "sensitivity");
    let specificity = ratio(c.tn, c.tn + c.fp, "specificity");
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "f1");
    Ok(ConfusionMetrics { confusion: c, accuracy, precision, sensitivity, specificity, f1, degenerate })
}

/// Area under the ROC curve as the Mann-Whitney statistic with average ranks
/// for ties, which counts tied positive/negative pairs as one half.
pub fn roc_auc(scores: &[f64], truth: &[Label]) -> Result<f64> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::invalid("roc_auc needs one label per score"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "roc_auc" });
    }
    let n_pos = truth.iter().filter(|&&l| l == Label::Odor).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept integral so the result is exact
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| truth[k] == Label::Odor).count() as u64;
        twice_rank_sum += twice_avg_rank * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean predicted odor probability; 0 for empty bins.
    pub confidence: f64,
    /// Fraction of odor trials; 0 for empty bins.
    pub accuracy: f64,
}

/// Reliability table over `n_bins` equal-width bins of the odor probability.
pub fn calibration_report(p_odor: &[f64], truth: &[Label], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    if n_bins == 0 || p_odor.len() != truth.len() {
        return Err(Error::invalid("calibration_report needs n_bins >= 1 and one label per probability"));
    }
    if let Some(p) = p_odor.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let mut sums = vec![(0usize, 0.0, 0usize); n_bins];
    for (&p, &t) in p_odor.iter().zip(truth) {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        sums[b].0 += 1;
        sums[b].1 += p;
        sums[b].2 += usize::from(t == Label::Odor);
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (count, p_sum, odor))| CalibrationBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count,
            confidence: if count == 0 { 0.0 } else { p_sum / count as f64 },
            accuracy: if count == 0 { 0.0 } else { odor as f64 / count as f64 },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceHistogram {
    /// Bin edges over [0.5, 1], `n_bins + 1` values.
    pub edges: Vec<f64>,
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
    /// `None` when the group is empty.
    pub mean_correct: Option<f64>,
    pub mean_incorrect: Option<f64>,
}

/// Histogram of `max(p, 1 - p)` split by whether the thresholded prediction
/// was right.
pub fn confidence_histogram(p_odor: &[f64], truth: &[Label], n_bins: usize) -> Result<ConfidenceHistogram> {
    if n_bins == 0 || p_odor.len() != truth.len() {
        return Err(Error::invalid("confidence_histogram needs n_bins >= 1 and one label per probability"));
    }
    let edges: Vec<f64> = (0..=n_bins).map(|i| 0.5 + 0.5 * i as f64 / n_bins as f64).collect();
    let mut correct = vec![0; n_bins];
    let mut incorrect = vec![0; n_bins];
    let (mut sum_c, mut sum_i) = (0.0, 0.0);
    for (&p, &t) in p_odor.iter().zip(truth) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        let conf = p.max(1.0 - p);
        let b = (((conf - 0.5) * 2.0 * n_bins as f64) as usize).min(n_bins - 1);
        if decide(p) == t {
            correct[b] += 1;
            sum_c += conf;
        } else {
            incorrect[b] += 1;
            sum_i += conf;
        }
    }
    let mean = |sum: f64, counts: &[usize]| {
        let n: usize = counts.iter().sum();
        (n > 0).then(|| sum / n as f64)
    };
    Ok(ConfidenceHistogram {
        mean_correct: mean(sum_c, &correct),
        mean_incorrect: mean(sum_i, &incorrect),
        edges,
        correct,
        incorrect,
    })
}
