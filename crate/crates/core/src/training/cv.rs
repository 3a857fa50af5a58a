use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use super::trainer::{evaluate, train_model, SampleSet, ScheduleKind, TrainConfig, TrainOutcome};
use crate::datasets::{balance_undersample, stratified_folds, Fold, FoldPlan, Label};
use crate::dsp::{fit_scaler, ScalerParams, SpectralFeatures};
use crate::error::{Error, Result};
use crate::eval::{ensemble_probs, CvReport, FoldReport, ModelSummary};
use crate::models::{Arch, ModelGraph};
use crate::tensor::{Checkpoint, Scalar};
use crate::util::{derive_seed, stream};

pub const ENSEMBLE_NAME: &str = "ensemble";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvMode {
    Single(Arch),
    /// Both architectures, fused by probability averaging inside each fold.
    Ensemble,
}

impl CvMode {
    pub fn members(self) -> Vec<Arch> {
        match self {
            CvMode::Single(a) => vec![a],
            CvMode::Ensemble => vec![Arch::ResCnn, Arch::AttentionCnn],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub k: usize,
    pub val_fraction: f64,
    /// Undersample the majority class before splitting.
    pub balance: bool,
    pub mode: CvMode,
    pub train: TrainConfig,
    pub seed: u64,
    /// Folds trained concurrently.
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            val_fraction: 0.1,
            balance: true,
            mode: CvMode::Ensemble,
            train: TrainConfig::default(),
            seed: 7,
            jobs: 1,
        }
    }
}

impl CvConfig {
    /// Training settings for one member. Ensemble members use the one-cycle
    /// policy; single-model runs keep the configured schedule.
    pub fn member_train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        if self.mode == CvMode::Ensemble {
            cfg.schedule = ScheduleKind::OneCycle;
        }
        cfg
    }
}

/// A trained member of one fold, with the fold's scaler stored alongside the
/// weights.
#[derive(Debug, Clone)]
pub struct FoldModel<T> {
    pub fold: usize,
    pub arch: Arch,
    pub checkpoint: Checkpoint<T>,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct CvOutcome<T> {
    pub report: CvReport,
    pub plan: FoldPlan,
    pub models: Vec<FoldModel<T>>,
    /// One line per fold describing the leakage checks that passed.
    pub audit: Vec<String>,
}

struct FoldResult<T> {
    reports: Vec<FoldReport>,
    models: Vec<FoldModel<T>>,
    audit: String,
}

fn arch_label(arch: Arch) -> u64 {
    match arch {
        Arch::ResCnn => 0,
        Arch::AttentionCnn => 1,
    }
}

fn gather<'a>(by_id: &HashMap<u64, &'a SpectralFeatures>, ids: &[u64]) -> Result<Vec<&'a SpectralFeatures>> {
    ids.iter()
        .map(|id| by_id.get(id).copied().ok_or_else(|| Error::Leakage(format!("fold references unknown trial id {id}"))))
        .collect()
}

/// Confirms that test ids were never seen in training or validation and that
/// the scaler is a function of the training ids alone.
fn audit_fold(fold_idx: usize, fold: &Fold, by_id: &HashMap<u64, &SpectralFeatures>, scaler: &ScalerParams) -> Result<String> {
    let seen: HashSet<u64> = fold.train.iter().chain(&fold.validation).copied().collect();
    if let Some(id) = fold.test.iter().find(|id| seen.contains(id)) {
        return Err(Error::Leakage(format!("fold {fold_idx}: test trial {id} also used for fitting")));
    }
    if let Some(id) = fold.validation.iter().find(|id| fold.train.contains(id)) {
        return Err(Error::Leakage(format!("fold {fold_idx}: validation trial {id} also in training")));
    }
    // refit from the training ids in a different order; any dependence on
    // other trials or on ordering would show up as a mismatch
    let mut ids = fold.train.clone();
    ids.reverse();
    let refit = fit_scaler(gather(by_id, &ids)?)?;
    if &refit != scaler {
        return Err(Error::Leakage(format!("fold {fold_idx}: scaler does not match a refit on training ids")));
    }
    Ok(format!(
        "fold {fold_idx}: train={} validation={} test={} disjoint; scaler refit on {} training ids matches",
        fold.train.len(),
        fold.validation.len(),
        fold.test.len(),
        fold.train.len()
    ))
}

fn run_fold<T: Scalar>(
    fold_idx: usize,
    fold: &Fold,
    by_id: &HashMap<u64, &SpectralFeatures>,
    config: &CvConfig,
) -> Result<FoldResult<T>> {
    let train_spectra = gather(by_id, &fold.train)?;
    let scaler = fit_scaler(train_spectra.iter().copied())?;
    let audit = audit_fold(fold_idx, fold, by_id, &scaler)?;

    let train = SampleSet::from_spectra(&train_spectra, Some(&scaler))?;
    let val = SampleSet::from_spectra(&gather(by_id, &fold.validation)?, Some(&scaler))?;
    let test = SampleSet::from_spectra(&gather(by_id, &fold.test)?, Some(&scaler))?;
    let truth: Vec<Label> = test.labels.iter().map(|&l| Label::from_index(l)).collect::<Result<_>>()?;

    let train_cfg = config.member_train_config();
    let mut reports = Vec::new();
    let mut models = Vec::new();
    let mut member_probs = Vec::new();
    for arch in config.mode.members() {
        let path = [fold_idx as u64, arch_label(arch)];
        let init_seed = derive_seed(config.seed, &[stream::INIT, path[0], path[1]]);
        let mut model = ModelGraph::<T>::build(arch, train.channels, init_seed);
        let outcome = train_model(&mut model, &train, &val, &train_cfg, derive_seed(config.seed, &path))?;
        let (_, _, probs) = evaluate(&model, &test, train_cfg.eval_batch)?;
        reports.push(FoldReport::from_probs(fold_idx, arch.tag(), &test.ids, &truth, &probs)?);
        let mut checkpoint = model.to_checkpoint();
        scaler.store_in(&mut checkpoint);
        models.push(FoldModel { fold: fold_idx, arch, checkpoint, outcome });
        member_probs.push(probs);
    }
    if config.mode == CvMode::Ensemble {
        let fused = ensemble_probs(&member_probs[0], &member_probs[1])?;
        reports.push(FoldReport::from_probs(fold_idx, ENSEMBLE_NAME, &test.ids, &truth, &fused)?);
    }
    Ok(FoldResult { reports, models, audit })
}

fn plan_folds(spectra: &[SpectralFeatures], config: &CvConfig) -> Result<(Vec<SpectralFeatures>, FoldPlan)> {
    let data = if config.balance {
        balance_undersample(spectra, derive_seed(config.seed, &[stream::BALANCE]))?
    } else {
        spectra.to_vec()
    };
    let plan = stratified_folds(&data, config.k, config.val_fraction, derive_seed(config.seed, &[stream::FOLDS]))?;
    let ids: Vec<u64> = data.iter().map(|s| s.trial_id).collect();
    plan.check_partition(&ids)?;
    Ok((data, plan))
}

/// Trains and tests on one split of the cross-validation plan only: the
/// train/validation/test partition of fold `fold`, with the same seeds the
/// full run would use for that fold.
pub fn run_single_split<T: Scalar>(
    spectra: &[SpectralFeatures],
    config: &CvConfig,
    fold: usize,
    config_echo: &str,
) -> Result<CvOutcome<T>> {
    config.train.validate()?;
    let (data, plan) = plan_folds(spectra, config)?;
    if fold >= plan.folds.len() {
        return Err(Error::invalid(format!("fold {fold} out of range for k = {}", plan.k)));
    }
    let by_id: HashMap<u64, &SpectralFeatures> = data.iter().map(|s| (s.trial_id, s)).collect();
    let r = run_fold::<T>(fold, &plan.folds[fold], &by_id, config)?;
    let models = r
        .reports
        .into_iter()
        .map(|report| ModelSummary { model: report.model.clone(), folds: vec![report] })
        .collect();
    let report = CvReport { k: config.k, seed: config.seed, models, aborted: Vec::new(), config_echo: config_echo.to_string() };
    Ok(CvOutcome { report, plan, models: r.models, audit: vec![r.audit] })
}

/// Stratified k-fold cross-validation over preprocessed (unscaled) spectra.
/// A fold that fails is recorded in `report.aborted` and the remaining folds
/// still run.
pub fn run_cross_validation<T: Scalar>(
    spectra: &[SpectralFeatures],
    config: &CvConfig,
    config_echo: &str,
) -> Result<CvOutcome<T>> {
    config.train.validate()?;
    if config.jobs == 0 {
        return Err(Error::invalid("cv.jobs must be at least 1"));
    }
    let (data, plan) = plan_folds(spectra, config)?;
    let by_id: HashMap<u64, &SpectralFeatures> = data.iter().map(|s| (s.trial_id, s)).collect();

    let slots: Vec<Mutex<Option<Result<FoldResult<T>>>>> = plan.folds.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..config.jobs.min(plan.folds.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("fold counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= plan.folds.len() {
                    break;
                }
                let result = run_fold::<T>(i, &plan.folds[i], &by_id, config);
                *slots[i].lock().expect("fold slot") = Some(result);
            });
        }
    });

    let mut names: Vec<String> = config.mode.members().iter().map(|a| a.tag().to_string()).collect();
    if config.mode == CvMode::Ensemble {
        names.push(ENSEMBLE_NAME.to_string());
    }
    let mut summaries: Vec<ModelSummary> =
        names.into_iter().map(|model| ModelSummary { model, folds: Vec::new() }).collect();
    let mut aborted = Vec::new();
    let mut models = Vec::new();
    let mut audit = Vec::new();
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.into_inner().expect("fold slot").expect("every fold ran") {
            Ok(r) => {
                for (summary, report) in summaries.iter_mut().zip(r.reports) {
                    summary.folds.push(report);
                }
                models.extend(r.models);
                audit.push(r.audit);
            }
            // leakage is a defect in the pipeline, not a property of one fold
            Err(e @ Error::Leakage(_)) => return Err(e),
            Err(e) => aborted.push((i, format!("{}: {e}", e.kind()))),
        }
    }
    let report = CvReport { k: config.k, seed: config.seed, models: summaries, aborted, config_echo: config_echo.to_string() };
    Ok(CvOutcome { report, plan, models, audit })
}
