mod common;
mod oracles;

use odorcnn::dsp::{fit_scaler, SpectralFeatures};
use odorcnn::models::{Arch, ModelGraph};
use odorcnn::tensor::Tensor;
use odorcnn::training::{
    adamw_step, lr_cosine_warm_restarts, lr_one_cycle, run_cross_validation, train_model, AdamWConfig, CvConfig,
    CvMode, EarlyStopState, OptimizerState, SampleSet, StopDecision, TrainConfig, ENSEMBLE_NAME,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adamw_without_decay_tracks_reference_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let mut w = Tensor::<f64>::full(&[1], rng.random_range(-2.0..2.0));
    let mut state = OptimizerState::new([&w]);
    let (mut rw, mut rm, mut rv) = (w.data()[0], 0.0, 0.0);
    let mut worst = 0.0f64;
    for t in 1..=1000 {
        let g: f64 = rng.random_range(-3.0..3.0);
        let lr = rng.random_range(1e-5..1e-2);
        adamw_step(&mut [&mut w], &[Tensor::full(&[1], g)], &mut state, &cfg, lr).unwrap();
        (rw, rm, rv) = oracles::adam_step(rw, g, rm, rv, t, lr);
        worst = worst.max((w.data()[0] - rw).abs());
    }
    assert!(worst <= 1e-12, "{worst}");
}

#[test]
fn warm_restart_schedule() {
    let lr = |e| lr_cosine_warm_restarts(e, 10, 2, 5e-4, 0.0);
    assert_eq!(lr(0), 5e-4);
    assert!((lr(5) - 2.5e-4).abs() < 1e-18);
    assert_eq!(lr(10), 5e-4);
    assert_eq!(lr(30), 5e-4);
    for e in 0..200 {
        assert!((lr(e) - oracles::warm_restart_lr(e, 10, 2, 5e-4)).abs() < 1e-18, "epoch {e}");
        assert_eq!(lr(e), lr(e));
    }
}

#[test]
fn one_cycle_schedule() {
    let total = 1000;
    let lr = |s| lr_one_cycle(s, total, 5e-4, 0.3, 25.0, 1e4);
    assert!((lr(0) - 2e-5).abs() < 1e-18);
    assert!((lr(300) - 5e-4).abs() < 1e-18);
    assert!((lr(total - 1) - 5e-8).abs() < 1e-18);
    let values: Vec<f64> = (0..total).map(lr).collect();
    let peak = values.iter().cloned().fold(0.0, f64::max);
    assert_eq!(peak, 5e-4);
    let top = values.iter().position(|&v| v == peak).unwrap();
    assert!(values[..=top].windows(2).all(|w| w[1] >= w[0]));
    assert!(values[top..].windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn early_stopping_rules() {
    let mut s = EarlyStopState::new(15, 1e-3);
    for (e, l) in [1.0, 0.9, 0.8].into_iter().enumerate() {
        assert_eq!(s.update(e, l, || e), StopDecision::Continue);
    }
    assert_eq!((s.best, s.best_epoch), (Some(2), Some(2)));

    let mut s = EarlyStopState::new(15, 1e-3);
    s.update(0, 1.0, || 0);
    s.update(1, 0.9995, || 1);
    assert_eq!((s.best, s.epochs_since), (Some(0), 1));

    let mut s = EarlyStopState::new(15, 1e-3);
    s.update(0, 1.0, || 0);
    let decisions: Vec<StopDecision> = (1..=15).map(|e| s.update(e, 1.0, || e)).collect();
    assert!(decisions[..14].iter().all(|d| *d == StopDecision::Continue));
    assert_eq!(decisions[14], StopDecision::Stop);
}

fn sets(spectra: &[SpectralFeatures]) -> (SampleSet, SampleSet) {
    let refs: Vec<&SpectralFeatures> = spectra.iter().collect();
    let scaler = fit_scaler(refs[..32].iter().copied()).unwrap();
    (
        SampleSet::from_spectra(&refs[..32], Some(&scaler)).unwrap(),
        SampleSet::from_spectra(&refs[32..], Some(&scaler)).unwrap(),
    )
}

#[test]
fn training_is_deterministic_and_restores_best_epoch() {
    let spectra = common::toy_spectra(40, 4, 2.0, 1);
    let (train, val) = sets(&spectra);
    let cfg = TrainConfig { max_epochs: 12, batch_size: 8, ..Default::default() };
    let run = || {
        let mut model = ModelGraph::<f32>::build(Arch::ResCnn, 4, 5);
        let out = train_model(&mut model, &train, &val, &cfg, 9).unwrap();
        (out, model.to_checkpoint())
    };
    let (a, ck_a) = run();
    let (b, ck_b) = run();
    assert_eq!(a.curves, b.curves);
    assert_eq!(ck_a, ck_b);
    assert_eq!(a.curves.len(), 12);
    let best = a.curves.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_val_loss, a.curves[a.best_epoch].val_loss);
    assert!(a.best_val_loss <= best + 1e-3);

    let mut restored = ModelGraph::<f32>::build(Arch::ResCnn, 4, 77);
    restored.load_checkpoint(&ck_a).unwrap();
    let (val_loss, _, _) = odorcnn::training::evaluate(&restored, &val, 64).unwrap();
    assert!((val_loss - a.best_val_loss).abs() < 1e-9);
    assert!(a.curves_csv().starts_with("epoch,lr,train_loss,val_loss,val_acc\n"));
}

#[test]
fn flat_loss_stops_early() {
    let mut spectra = common::toy_spectra(40, 4, 0.0, 2);
    for s in &mut spectra {
        s.values.iter_mut().for_each(|v| *v = 1.0);
    }
    let (train, val) = sets(&spectra);
    let cfg = TrainConfig { max_epochs: 100, batch_size: 8, patience: 5, ..Default::default() };
    let mut model = ModelGraph::<f32>::build(Arch::ResCnn, 4, 5);
    let out = train_model(&mut model, &train, &val, &cfg, 3).unwrap();
    assert!(out.stopped_early);
    assert!(out.curves.len() < 100);
}

#[test]
fn runaway_learning_rate_is_reported_as_divergence() {
    let spectra = common::toy_spectra(40, 4, 2.0, 1);
    let (train, val) = sets(&spectra);
    let cfg = TrainConfig { max_epochs: 5, batch_size: 8, lr_max: 1e30, ..Default::default() };
    let mut model = ModelGraph::<f32>::build(Arch::ResCnn, 4, 5);
    let err = train_model(&mut model, &train, &val, &cfg, 3).unwrap_err();
    assert_eq!(err.kind(), "diverged");
}

fn quick_cv(mode: CvMode, jobs: usize) -> CvConfig {
    CvConfig {
        mode,
        jobs,
        train: TrainConfig { max_epochs: 4, batch_size: 16, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn ensemble_cross_validation_contract() {
    let spectra = common::toy_spectra(60, 4, 2.0, 3);
    let out = run_cross_validation::<f32>(&spectra, &quick_cv(CvMode::Ensemble, 1), "echo").unwrap();
    let r = &out.report;
    assert!(r.complete());
    let names: Vec<&str> = r.models.iter().map(|m| m.model.as_str()).collect();
    assert_eq!(names, vec!["res_cnn", "attention_cnn", ENSEMBLE_NAME]);
    for m in &r.models {
        assert_eq!(m.folds.len(), 5);
        for name in odorcnn::eval::METRIC_NAMES {
            let s = m.metric(name).unwrap();
            assert_eq!(s.n, 5);
            assert!(s.mean.is_finite() && s.sd.is_finite());
        }
    }
    assert_eq!(out.models.len(), 10);
    assert_eq!(out.audit.len(), 5);
    // every test trial appears exactly once across folds
    let mut tested: Vec<u64> = r.models[2].folds.iter().flat_map(|f| f.trials.iter().map(|t| t.trial_id)).collect();
    tested.sort_unstable();
    assert_eq!(tested, spectra.iter().map(|s| s.trial_id).collect::<Vec<_>>());
    // each stored checkpoint carries the scaler fitted on its fold's training ids
    for m in &out.models {
        let fold = &out.plan.folds[m.fold];
        let train: Vec<&SpectralFeatures> = spectra.iter().filter(|s| fold.train.contains(&s.trial_id)).collect();
        let stored = odorcnn::dsp::ScalerParams::load_from(&m.checkpoint).unwrap().unwrap();
        let refit = fit_scaler(train).unwrap();
        for (a, b) in stored.median.iter().zip(&refit.median) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-30));
        }
    }
    assert!(r.table().contains("complete"));
}

#[test]
fn cross_validation_is_reproducible_and_independent_of_jobs() {
    let spectra = common::toy_spectra(60, 4, 2.0, 4);
    let cfg = quick_cv(CvMode::Single(Arch::ResCnn), 1);
    let a = run_cross_validation::<f32>(&spectra, &cfg, "").unwrap().report;
    let b = run_cross_validation::<f32>(&spectra, &cfg, "").unwrap().report;
    let c = run_cross_validation::<f32>(&spectra, &CvConfig { jobs: 3, ..cfg }, "").unwrap().report;
    assert_eq!(a, b);
    assert_eq!(a.table(), c.table());
    assert_eq!(a.folds_csv(), c.folds_csv());
}

#[test]
fn failed_folds_mark_the_report_incomplete() {
    let spectra = common::toy_spectra(60, 4, 2.0, 5);
    let mut cfg = quick_cv(CvMode::Single(Arch::ResCnn), 1);
    cfg.train.lr_max = 1e30;
    let out = run_cross_validation::<f32>(&spectra, &cfg, "").unwrap();
    assert!(!out.report.complete());
    assert_eq!(out.report.aborted.len(), 5);
    assert!(out.report.aborted[0].1.starts_with("diverged"));
    assert!(out.report.table().contains("incomplete"));
}

#[test]
fn unbalanced_input_is_undersampled_before_splitting() {
    let mut spectra = common::toy_spectra(60, 4, 2.0, 6);
    spectra.extend(common::toy_spectra(20, 4, 2.0, 7).into_iter().filter(|s| s.label == odorcnn::datasets::Label::Odor).map(
        |mut s| {
            s.trial_id += 10_000;
            s
        },
    ));
    let out = run_cross_validation::<f32>(&spectra, &quick_cv(CvMode::Single(Arch::ResCnn), 1), "").unwrap();
    let tested: usize = out.report.models[0].folds.iter().map(|f| f.trials.len()).sum();
    assert_eq!(tested, 60);
}
