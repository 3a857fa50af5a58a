//! Acceptance run: one PASS/FAIL line per criterion with the measured values
//! and wall-clock time. Lines go straight to stderr so they show up even when
//! the test harness captures output.

mod common;
mod oracles;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use odorcnn::datasets::{import_index, load_spectra, synth_labels, synth_trial, stratified_folds, Label, SynthConfig};
use odorcnn::dsp::{design_butterworth_bandpass, welch_psd, PreprocessConfig, Preprocessor, ScalerParams, SpectralFeatures};
use odorcnn::eval::{decide, ensemble_probs, roc_auc, CvReport};
use odorcnn::models::{grad_check_arch, Arch, ModelGraph};
use odorcnn::tensor::Tensor;
use odorcnn::training::{
    adamw_step, lr_cosine_warm_restarts, lr_one_cycle, run_cross_validation, AdamWConfig, CvConfig, CvOutcome,
    OptimizerState, SampleSet, TrainConfig, ENSEMBLE_NAME,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Ledger {
    lines: Vec<String>,
    failed: usize,
}

impl Ledger {
    fn run(&mut self, id: &str, name: &str, body: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        let line = format!("{tag} [{id}] {name}: {detail} ({secs:.1} s)");
        let _ = writeln!(std::io::stderr(), "{line}");
        self.lines.push(line);
    }
}

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst_layer = ("", 0.0f64);
    for case in common::layer_cases() {
        for seed in 0..100 {
            let e = common::check_layer(&case, seed).map_err(|e| format!("{} seed {seed}: {e}", case.0))?;
            if e > worst_layer.1 {
                worst_layer = (case.0, e);
            }
        }
    }
    let mut worst_prim = ("", 0.0f64);
    for (name, shapes, f) in common::primitive_cases() {
        for seed in 0..100 {
            let e = common::check_primitive(&shapes, f, seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            if e > worst_prim.1 {
                worst_prim = (name, e);
            }
        }
    }
    let mut models = String::new();
    let mut worst_model = 0.0f64;
    for arch in [Arch::ResCnn, Arch::AttentionCnn] {
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let r = grad_check_arch(arch, 4, seed, 40, 1e-4).map_err(|e| format!("{arch} seed {seed}: {e}"))?;
            worst = worst.max(r.max_relative_error);
        }
        let _ = write!(models, " {arch} {worst:.2e};");
        worst_model = worst_model.max(worst);
    }
    let secs = t0.elapsed().as_secs_f64();
    let tol = common::TOLERANCE;
    check(
        worst_layer.1 <= tol && worst_prim.1 <= tol && worst_model <= tol && secs <= 600.0,
        format!(
            "{} layers, {} primitives, 2 models x 100 seeds; worst layer {} {:.2e}, worst primitive {} {:.2e};{models} tolerance {tol:e}, {secs:.0} s of 600 s",
            common::layer_cases().len(),
            common::primitive_cases().len(),
            worst_layer.0,
            worst_layer.1,
            worst_prim.0,
            worst_prim.1
        ),
    )
}

fn dsp_oracle() -> Outcome {
    let c = design_butterworth_bandpass(5, 0.5, 100.0, 30_000.0).map_err(|e| e.to_string())?;
    let worst = (0..200)
        .map(|i| 0.1 * (500.0f64 / 0.1).powf(i as f64 / 199.0))
        .map(|f| (c.magnitude_db(f) - oracles::butterworth_bandpass_db(f, 5, 0.5, 100.0, 30_000.0)).abs())
        .fold(0.0, f64::max);
    let (lo, hi) = (c.magnitude_db(0.5), c.magnitude_db(100.0));
    check(
        worst <= 1.0 && (lo + 3.0).abs() <= 0.5 && (hi + 3.0).abs() <= 0.5,
        format!("max deviation {worst:.2e} dB over 200 frequencies; |H| at 0.5 Hz {lo:.4} dB, at 100 Hz {hi:.4} dB"),
    )
}

fn welch_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0 + 0.5).collect();
        let fast = welch_psd(&x, 1000.0, 256, 0.5).map_err(|e| e.to_string())?;
        let (slow, segments) = oracles::welch_bruteforce(&x, 1000.0, 256, 128);
        if fast.segments != 14 || segments != 14 || fast.density.len() != 129 {
            return Err(format!("seed {seed}: {} segments, {} bins", fast.segments, fast.density.len()));
        }
        for (a, b) in fast.density.iter().zip(&slow) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-300));
        }
    }
    let probe: Vec<f64> = (0..2000).map(|i| (2.0 * PI * 50.0 * i as f64 / 1000.0).sin()).collect();
    let s = welch_psd(&probe, 1000.0, 256, 0.5).map_err(|e| e.to_string())?;
    let peak = (0..s.density.len()).max_by(|&a, &b| s.density[a].total_cmp(&s.density[b])).unwrap_or(0);
    check(
        worst <= 1e-10 && (peak == 12 || peak == 13),
        format!("50 signals, 14 segments, 129 bins; max relative error {worst:.2e}; 50 Hz peak at bin {peak}"),
    )
}

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let mut labels: Vec<Label> =
            (0..n).map(|_| if rng.random_bool(0.5) { Label::Odor } else { Label::Blank }).collect();
        labels[0] = Label::Odor;
        labels[1] = Label::Blank;
        // a coarse score grid injects ties
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10u8)) / 9.0).collect();
        let flags: Vec<bool> = labels.iter().map(|&l| l == Label::Odor).collect();
        let fast = roc_auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((fast - oracles::auc_pairs(&scores, &flags)).abs());
    }
    check(worst <= 1e-12, format!("1000 instances, n <= 50, ties injected; max |diff| {worst:.1e}"))
}

fn ensemble_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut row = || {
        let p: f64 = rng.random();
        [1.0 - p, p]
    };
    let a: Vec<[f64; 2]> = (0..100_000).map(|_| row()).collect();
    let b: Vec<[f64; 2]> = (0..100_000).map(|_| row()).collect();
    let fused = ensemble_probs(&a, &b).map_err(|e| e.to_string())?;
    let (mut formula, mut norm, mut agree, mut agreements) = (0, 0.0f64, 0, 0);
    for ((x, y), f) in a.iter().zip(&b).zip(&fused) {
        formula += usize::from(f[0] != (x[0] + y[0]) / 2.0 || f[1] != (x[1] + y[1]) / 2.0);
        norm = norm.max((f[0] + f[1] - 1.0).abs());
        if decide(x[1]) == decide(y[1]) {
            agreements += 1;
            agree += usize::from(decide(f[1]) == decide(x[1]));
        }
    }
    check(
        formula == 0 && norm <= 1e-12 && agree == agreements,
        format!(
            "1e5 pairs: {formula} formula mismatches, max |row sum - 1| {norm:.1e}, fused label kept on {agree}/{agreements} agreeing pairs"
        ),
    )
}

fn optimizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let mut w = Tensor::<f64>::full(&[1], rng.random_range(-2.0..2.0));
    let mut state = OptimizerState::new([&w]);
    let (mut rw, mut rm, mut rv) = (w.data()[0], 0.0, 0.0);
    let mut worst = 0.0f64;
    for t in 1..=1000 {
        let g: f64 = rng.random_range(-3.0..3.0);
        let lr = rng.random_range(1e-5..1e-2);
        adamw_step(&mut [&mut w], &[Tensor::full(&[1], g)], &mut state, &cfg, lr).map_err(|e| e.to_string())?;
        (rw, rm, rv) = oracles::adam_step(rw, g, rm, rv, t, lr);
        worst = worst.max((w.data()[0] - rw).abs());
    }
    let mut one = Tensor::<f64>::full(&[1], 1.0);
    let mut st = OptimizerState::new([&one]);
    adamw_step(&mut [&mut one], &[Tensor::full(&[1], 1.0)], &mut st, &AdamWConfig::default(), 5e-4)
        .map_err(|e| e.to_string())?;
    let example = format!("{:.8}", one.data()[0]);
    check(
        worst <= 1e-12 && example == "0.99949995",
        format!("1000 steps, max |w - w_ref| {worst:.1e}; single step w = {:.14} (rounds to {example})", one.data()[0]),
    )
}

fn schedules() -> Outcome {
    let warm: Vec<f64> = [0, 5, 10].iter().map(|&e| lr_cosine_warm_restarts(e, 10, 2, 5e-4, 0.0)).collect();
    let expected = [5e-4, 2.5e-4, 5e-4];
    let warm_ok = warm.iter().zip(expected).all(|(a, b)| (a - b).abs() <= 1e-15);
    let total = 1000;
    let lr: Vec<f64> = (0..total).map(|s| lr_one_cycle(s, total, 5e-4, 0.3, 25.0, 1e4)).collect();
    let peak = lr.iter().cloned().fold(f64::MIN, f64::max);
    let at = lr.iter().position(|&v| v == peak).unwrap_or(0);
    let unimodal = lr[..=at].windows(2).all(|w| w[1] >= w[0]) && lr[at..].windows(2).all(|w| w[1] <= w[0]);
    check(
        warm_ok && unimodal && (peak - 5e-4).abs() <= 1e-15 && at == 300,
        format!(
            "warm restarts at epochs 0/5/10 = {:.2e}/{:.2e}/{:.2e}; one-cycle peak {peak:.2e} at step {at} of {total}, unimodal {unimodal}",
            warm[0], warm[1], warm[2]
        ),
    )
}

/// Synthesizes and preprocesses trials one at a time.
fn synthetic_spectra(snr: f64) -> Vec<SpectralFeatures> {
    let cfg = SynthConfig { n_trials: 400, snr, seed: 7, ..Default::default() };
    let pre = Preprocessor::new(PreprocessConfig::default(), cfg.sample_rate_hz).expect("preprocessor");
    let labels = synth_labels(&cfg).expect("labels");
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| pre.spectral_features(&synth_trial(&cfg, i, l).expect("trial")).expect("spectra"))
        .collect()
}

struct EndToEnd {
    outcome: CvOutcome<f32>,
    spectra: Vec<SpectralFeatures>,
    prep_s: f64,
    cv_s: f64,
}

fn end_to_end(snr: f64) -> EndToEnd {
    let t0 = Instant::now();
    let spectra = synthetic_spectra(snr);
    let prep_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let outcome = run_cross_validation::<f32>(&spectra, &CvConfig::default(), "acceptance").expect("cross-validation");
    EndToEnd { outcome, spectra, prep_s, cv_s: t1.elapsed().as_secs_f64() }
}

fn auc_of(report: &CvReport, model: &str) -> (f64, f64) {
    report.model(model).and_then(|m| m.metric("auc")).map_or((f64::NAN, f64::NAN), |s| (s.mean, s.sd))
}

fn criterion_8(run: &EndToEnd) -> Outcome {
    let r = &run.outcome.report;
    let (res, res_sd) = auc_of(r, "res_cnn");
    let (att, att_sd) = auc_of(r, "attention_cnn");
    let (ens, ens_sd) = auc_of(r, ENSEMBLE_NAME);
    let h = r.model(ENSEMBLE_NAME).ok_or("no ensemble row")?.pooled_confidence(10).map_err(|e| e.to_string())?;
    let (mc, mi) = (h.mean_correct.unwrap_or(f64::NAN), h.mean_incorrect.unwrap_or(f64::NAN));
    let total = run.prep_s + run.cv_s;
    check(
        r.complete() && res >= 0.90 && ens >= res - 0.02 && mc > mi && total <= 1200.0,
        format!(
            "ResCNN AUC {res:.4} ± {res_sd:.4} (>= 0.90), AttentionCNN {att:.4} ± {att_sd:.4}, ensemble {ens:.4} ± {ens_sd:.4} (>= {:.4}); ensemble confidence correct {mc:.3} > incorrect {mi:.3}; synth+preprocess {:.0} s + CV {:.0} s on {} core(s)",
            res - 0.02,
            run.prep_s,
            run.cv_s,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    )
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Held-out features of the fold-0 ResCNN: distance between the class
/// centroids against the mean distance of a trial to its own centroid.
fn feature_separation(run: &EndToEnd) -> Outcome {
    let fm = run
        .outcome
        .models
        .iter()
        .find(|m| m.fold == 0 && m.arch == Arch::ResCnn)
        .ok_or("no fold-0 ResCNN")?;
    let mut model = ModelGraph::<f32>::build(Arch::ResCnn, 32, 0);
    model.load_checkpoint(&fm.checkpoint).map_err(|e| e.to_string())?;
    let scaler = ScalerParams::load_from(&fm.checkpoint).map_err(|e| e.to_string())?.ok_or("no scaler")?;
    let test = &run.outcome.plan.folds[0].test;
    let held: Vec<&SpectralFeatures> = run.spectra.iter().filter(|s| test.contains(&s.trial_id)).collect();
    let set = SampleSet::from_spectra(&held, Some(&scaler)).map_err(|e| e.to_string())?;
    let feats = model.predict(&set.batch::<f32>(&(0..set.len()).collect::<Vec<_>>())).map_err(|e| e.to_string())?.features;
    let dim = feats[0].len();
    let mut centroids = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for (f, &l) in feats.iter().zip(&set.labels) {
        counts[l] += 1;
        for (c, v) in centroids[l].iter_mut().zip(f) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let between = distance(&centroids[0], &centroids[1]);
    let within = feats.iter().zip(&set.labels).map(|(f, &l)| distance(f, &centroids[l])).sum::<f64>() / feats.len() as f64;
    check(
        between > within,
        format!("{} held-out trials, {dim} features: centroid distance {between:.3} vs mean within-class distance {within:.3}", feats.len()),
    )
}

fn criterion_9(run: &EndToEnd) -> Outcome {
    let r = &run.outcome.report;
    let rows: Vec<(String, f64)> = r.models.iter().map(|m| (m.model.clone(), auc_of(r, &m.model).0)).collect();
    let ok = r.complete() && rows.iter().all(|(_, a)| (0.40..=0.60).contains(a));
    let detail = rows.iter().map(|(m, a)| format!("{m} AUC {a:.4}")).collect::<Vec<_>>().join(", ");
    check(ok, format!("snr 0: {detail} (each within [0.40, 0.60]); CV {:.0} s", run.cv_s))
}

fn criterion_10(first: &EndToEnd, second: &EndToEnd) -> Outcome {
    let (a, b) = (&first.outcome.report, &second.outcome.report);
    let same_table = a.table() == b.table();
    let same_folds = a.folds_csv() == b.folds_csv();
    let same_trials = a.models.iter().zip(&b.models).all(|(x, y)| x.folds == y.folds);
    check(
        same_table && same_folds && same_trials,
        format!("second full run: table identical {same_table}, per-fold metrics identical {same_folds}, per-trial probabilities identical {same_trials}"),
    )
}

/// Writes `n` raw trials as separate little-endian f32 files plus an index,
/// imports them and preprocesses the result. Trials are 4 channels x 2000
/// samples at 1 kHz to keep the 2349-trial run small.
fn converted_dataset(dir: &Path, n: usize) -> Vec<SpectralFeatures> {
    let cfg = SynthConfig { n_trials: n, snr: 1.0, seed: 11, channels: 4, samples: 2000, sample_rate_hz: 1000.0, ..Default::default() };
    let src = dir.join("source");
    fs::create_dir_all(&src).expect("mkdir");
    let mut index = String::from("trial_id,mouse_id,label,odorant,onset_offset_samples,sample_rate_hz,channels,file\n");
    for (i, &label) in synth_labels(&cfg).expect("labels").iter().enumerate() {
        let t = synth_trial(&cfg, i, label).expect("trial");
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(src.join(format!("trial{i:04}.f32")), bytes).expect("write trial");
        let _ = writeln!(index, "{},mouse{},{},,0,1000,4,trial{i:04}.f32", 5000 + i, i % 7, label);
    }
    fs::write(src.join("index.csv"), index).expect("write index");
    let raw = dir.join("raw");
    import_index(src.join("index.csv"), &raw, "structural check").expect("import");
    let pre = Preprocessor::new(PreprocessConfig { decimate: 1, channels: 4, ..Default::default() }, 1000.0).expect("preprocessor");
    let spectra: Vec<SpectralFeatures> = odorcnn::datasets::load_dataset(&raw)
        .expect("load")
        .iter()
        .map(|t| pre.spectral_features(t).expect("spectra"))
        .collect();
    let out = dir.join("spectra");
    odorcnn::datasets::save_spectra(&spectra, &out, "structural check").expect("save");
    load_spectra(&out).expect("reload")
}

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spectra = converted_dataset(tmp.path(), 2349);
    let odor = spectra.iter().filter(|s| s.label == Label::Odor).count();
    // an odd trial count cannot be balanced exactly, so folds are planned
    // over all trials
    let cfg = CvConfig { balance: false, train: TrainConfig { max_epochs: 1, ..Default::default() }, ..Default::default() };
    let plan = stratified_folds(&spectra, 5, cfg.val_fraction, odorcnn::util::derive_seed(cfg.seed, &[2]))
        .map_err(|e| e.to_string())?;
    let mut sizes = plan.test_sizes();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let out = run_cross_validation::<f32>(&spectra, &cfg, "structural").map_err(|e| e.to_string())?;
    let mut run_sizes: Vec<usize> = out.report.models[0].folds.iter().map(|f| f.trials.len()).collect();
    run_sizes.sort_unstable_by(|a, b| b.cmp(a));
    let table = out.report.table();
    let header = table.lines().find(|l| l.starts_with("Model")).unwrap_or("");
    let columns = header.split_whitespace().collect::<Vec<_>>() == ["Model", "Acc", "F1", "AUC", "Sens", "Spec"];
    let rows = ["res_cnn", "attention_cnn", ENSEMBLE_NAME].iter().all(|m| table.lines().any(|l| l.starts_with(m)));
    check(
        sizes == [470, 470, 470, 470, 469] && run_sizes == sizes && columns && rows && out.report.complete(),
        format!(
            "{} imported trials ({odor} odor), test folds {run_sizes:?}, report columns {header:?}",
            spectra.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut ledger = Ledger { lines: Vec::new(), failed: 0 };
    ledger.run("1", "gradient suite", gradient_suite);
    ledger.run("2", "DSP oracle", dsp_oracle);
    ledger.run("3", "Welch oracle", welch_oracle);
    ledger.run("4", "AUC oracle", auc_oracle);
    ledger.run("5", "ensemble algebra", ensemble_algebra);
    ledger.run("6", "optimizer oracle", optimizer_oracle);
    ledger.run("7", "schedules", schedules);

    let t0 = Instant::now();
    let first = catch_unwind(|| end_to_end(1.5)).ok();
    let first_s = t0.elapsed().as_secs_f64();
    match &first {
        Some(run) => {
            ledger.run("8", "end-to-end synthetic run", || criterion_8(run));
            ledger.run("8+", "held-out feature separation", || feature_separation(run));
        }
        None => ledger.run("8", "end-to-end synthetic run", || Err(format!("pipeline failed after {first_s:.0} s"))),
    }
    ledger.run("9", "degradation control", || criterion_9(&end_to_end(0.0)));
    ledger.run("10", "reproducibility", || {
        let first = first.as_ref().ok_or("first run failed")?;
        criterion_10(first, &end_to_end(1.5))
    });
    ledger.run("11", "structural real-data path", criterion_11);

    let summary = format!("acceptance: {} of {} criteria passed", ledger.lines.len() - ledger.failed, ledger.lines.len());
    let _ = writeln!(std::io::stderr(), "{summary}");
    assert_eq!(ledger.failed, 0, "\n{}\n{summary}", ledger.lines.join("\n"));
}
