use std::path::{Path, PathBuf};

use odorcnn::datasets::{
    import_index, read_manifest, synth_labels, synth_trial, DatasetKind, DatasetManifest, DatasetReader, DatasetWriter,
    Label, MANIFEST_FILE, PAYLOAD_FILE,
};
use odorcnn::dsp::{Preprocessor, ScalerParams, SpectralFeatures};
use odorcnn::eval::{calibration_csv, confidence_csv, feature_matrix_csv, CvReport, FoldReport, ModelSummary};
use odorcnn::models::{grad_check_arch, Arch, ModelGraph};
use odorcnn::tensor::{Checkpoint, Scalar};
use odorcnn::training::{run_cross_validation, run_single_split, CvMode, SampleSet};
use odorcnn::Error;

use crate::config::RunConfig;
use crate::run::{resolve, resolve_input, Run};
use crate::CliError;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Runs `body` inside an output directory and always leaves a manifest
/// behind; a failed or partial run is marked incomplete.
pub fn with_run(
    name: &'static str,
    cfg: &RunConfig,
    body: impl FnOnce(&RunConfig, &mut Run) -> Result<bool, CliError>,
) -> Result<(), CliError> {
    let out = match cfg.str("out") {
        "" => PathBuf::from("runs").join(name),
        p => PathBuf::from(p),
    };
    let mut run = Run::start(name, resolve(&out))?;
    let result = body(cfg, &mut run);
    let (complete, error) = match &result {
        Ok(true) => (true, None),
        Ok(false) => (false, Some(CliError::new("incomplete_run", "some folds aborted; see report.txt"))),
        Err(e) => (false, Some(e.clone())),
    };
    run.finish(cfg, complete, error.as_ref())?;
    match error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    match cfg.str("data") {
        "" => Err(CliError::new("invalid_config", "data: a dataset directory is required (--data)")),
        p => {
            let dir = resolve_input(Path::new(p));
            if dir.join(MANIFEST_FILE).is_file() {
                Ok(dir)
            } else {
                Err(CliError::new("io", format!("{}: no dataset manifest found", dir.display())))
            }
        }
    }
}

fn record_dataset(run: &mut Run, manifest: &DatasetManifest) -> Result<(), CliError> {
    let dir = run.out.clone();
    run.record_file(&dir.join(MANIFEST_FILE))?;
    run.record_known(&dir.join(PAYLOAD_FILE), manifest.payload_bytes, manifest.payload_sha256.clone());
    Ok(())
}

fn describe(manifest: &DatasetManifest) -> String {
    format!(
        "{} trials (odor {}, blank {}), {} channels",
        manifest.trial_count, manifest.class_counts.odor, manifest.class_counts.blank, manifest.channels
    )
}

pub fn synth(cfg: &RunConfig, run: &mut Run) -> Result<bool, CliError> {
    let sc = cfg.synth()?;
    let labels = synth_labels(&sc)?;
    let provenance = format!("synthetic seed={} snr={}", sc.seed, sc.snr);
    let mut writer = DatasetWriter::create(&run.out, DatasetKind::Raw, provenance)?;
    for (i, &label) in labels.iter().enumerate() {
        writer.push_trial(&synth_trial(&sc, i, label)?)?;
        if (i + 1) % 50 == 0 {
            eprintln!("synth: {}/{}", i + 1, labels.len());
        }
    }
    let manifest = writer.finish()?;
    record_dataset(run, &manifest)?;
    println!("wrote {} to {}", describe(&manifest), run.out.display());
    Ok(true)
}

pub fn import(cfg: &RunConfig, run: &mut Run, index: &Path) -> Result<bool, CliError> {
    let _ = cfg;
    run.input("index", index.display().to_string());
    let summary = import_index(index, &run.out, &format!("import {}", index.display()))?;
    record_dataset(run, &summary.manifest)?;
    println!("imported {} from {} rows", describe(&summary.manifest), summary.rows);
    Ok(true)
}

pub fn preprocess(cfg: &RunConfig, run: &mut Run) -> Result<bool, CliError> {
    let input = data_dir(cfg)?;
    let mut reader = DatasetReader::open(&input)?;
    let source = reader.manifest().clone();
    run.input("data", input.display().to_string());
    run.input("data_payload_sha256", source.payload_sha256.clone());
    let pre = Preprocessor::new(cfg.preprocess()?, source.rate_hz)?;
    let provenance = format!("spectra of {}", input.display());
    let mut writer = DatasetWriter::create(&run.out, DatasetKind::Spectra, provenance)?;
    let mut done = 0;
    while let Some(trial) = reader.next_trial()? {
        writer.push_spectrum(&pre.spectral_features(&trial)?)?;
        done += 1;
        if done % 50 == 0 {
            eprintln!("preprocess: {done}/{}", source.trial_count);
        }
    }
    let manifest = writer.finish()?;
    record_dataset(run, &manifest)?;
    println!("wrote spectra of {} x {} bins to {}", describe(&manifest), pre.bins(), run.out.display());
    Ok(true)
}

fn load_input_spectra(cfg: &RunConfig, run: &mut Run) -> Result<Vec<SpectralFeatures>, CliError> {
    let dir = data_dir(cfg)?;
    let manifest = read_manifest(&dir)?;
    run.input("data", dir.display().to_string());
    run.input("data_payload_sha256", manifest.payload_sha256);
    Ok(odorcnn::datasets::load_spectra(&dir)?)
}

fn write_fold_files<T: Scalar>(run: &mut Run, dir: &str, report: &CvReport, models: &[odorcnn::training::FoldModel<T>]) -> Result<(), CliError> {
    for m in &report.models {
        for f in &m.folds {
            run.write(format!("{dir}{}/{}_trials.csv", f.fold, m.model), f.trials_csv())?;
        }
    }
    for fm in models {
        run.write(format!("{dir}{}/{}_curves.csv", fm.fold, fm.arch), fm.outcome.curves_csv())?;
        run.write(format!("{dir}{}/{}.ckpt", fm.fold, fm.arch), fm.checkpoint.to_bytes())?;
    }
    Ok(())
}

fn write_pooled_curves(run: &mut Run, models: &[ModelSummary], bins: usize) -> Result<(), CliError> {
    for m in models.iter().filter(|m| !m.folds.is_empty()) {
        run.write(format!("{}_calibration.csv", m.model), calibration_csv(&m.pooled_calibration(bins)?))?;
        run.write(format!("{}_confidence.csv", m.model), confidence_csv(&m.pooled_confidence(bins)?))?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, run: &mut Run) -> Result<bool, CliError> {
    if cfg.double_precision()? {
        train_as::<f64>(cfg, run)
    } else {
        train_as::<f32>(cfg, run)
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, run: &mut Run) -> Result<bool, CliError> {
    let arch = cfg.arch()?;
    let cv = cfg.cv(CvMode::Single(arch))?;
    let fold = cfg.usize("train.fold")?;
    let spectra = load_input_spectra(cfg, run)?;
    let out = run_single_split::<T>(&spectra, &cv, fold, &cfg.echo())?;
    let fm = &out.models[0];
    let report = &out.report.models[0].folds[0];
    run.write("model.ckpt", fm.checkpoint.to_bytes())?;
    run.write("curves.csv", fm.outcome.curves_csv())?;
    run.write("trials.csv", report.trials_csv())?;
    run.write("metrics.csv", out.report.folds_csv())?;
    run.write("audit.txt", out.audit.join("\n") + "\n")?;
    let bins = cfg.usize("eval.bins")?;
    write_pooled_curves(run, &out.report.models, bins)?;
    println!(
        "{arch} split {fold}: best epoch {} of {}, test accuracy {:.4}, auc {}",
        fm.outcome.best_epoch,
        fm.outcome.curves.len(),
        report.accuracy,
        report.auc.map_or("undefined".to_string(), |a| format!("{a:.4}"))
    );
    Ok(true)
}

pub fn cross_validate(cfg: &RunConfig, run: &mut Run) -> Result<bool, CliError> {
    if cfg.double_precision()? {
        cv_as::<f64>(cfg, run)
    } else {
        cv_as::<f32>(cfg, run)
    }
}

fn cv_as<T: Scalar>(cfg: &RunConfig, run: &mut Run) -> Result<bool, CliError> {
    let mode = if cfg.bool("cv.ensemble") { CvMode::Ensemble } else { CvMode::Single(cfg.arch()?) };
    let cv = cfg.cv(mode)?;
    let spectra = load_input_spectra(cfg, run)?;
    let out = run_cross_validation::<T>(&spectra, &cv, &cfg.echo())?;
    let table = out.report.table();
    run.write("report.txt", &table)?;
    run.write("folds.csv", out.report.folds_csv())?;
    run.write("audit.txt", out.audit.join("\n") + "\n")?;
    write_fold_files(run, "fold", &out.report, &out.models)?;
    write_pooled_curves(run, &out.report.models, cfg.usize("eval.bins")?)?;
    print!("{table}");
    Ok(out.report.complete())
}

/// A checkpoint of either precision.
pub enum AnyCheckpoint {
    Single(Checkpoint<f32>),
    Double(Checkpoint<f64>),
}

pub fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint, CliError> {
    match Checkpoint::<f32>::load(path) {
        Ok(ck) => Ok(AnyCheckpoint::Single(ck)),
        Err(Error::UnsupportedFormat(_)) => Ok(AnyCheckpoint::Double(Checkpoint::<f64>::load(path)?)),
        Err(Error::Io(e)) => Err(CliError::io(path, e)),
        Err(e) => Err(e.into()),
    }
}

/// Rebuilds the model a checkpoint was taken from, plus its stored scaler.
fn restore<T: Scalar>(ck: &Checkpoint<T>) -> Result<(ModelGraph<T>, ScalerParams), CliError> {
    let mut parts = ck.descriptor.split(';');
    let arch: Arch = parts.next().unwrap_or_default().parse()?;
    let channels = parts
        .find_map(|p| p.strip_prefix("in_channels="))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| CliError::new("unsupported_format", format!("checkpoint descriptor {:?}", ck.descriptor)))?;
    let mut model = ModelGraph::<T>::build(arch, channels, 0);
    model.load_checkpoint(ck)?;
    let scaler = ScalerParams::load_from(ck)?
        .ok_or_else(|| CliError::new("unsupported_format", "checkpoint carries no scaler parameters"))?;
    Ok((model, scaler))
}

fn scaled_set(spectra: &[SpectralFeatures], scaler: &ScalerParams) -> Result<SampleSet, CliError> {
    let refs: Vec<&SpectralFeatures> = spectra.iter().collect();
    Ok(SampleSet::from_spectra(&refs, Some(scaler))?)
}

pub fn evaluate(cfg: &RunConfig, run: &mut Run, path: &Path, ck: &AnyCheckpoint) -> Result<bool, CliError> {
    run.input("checkpoint", resolve_input(path).display().to_string());
    match ck {
        AnyCheckpoint::Single(ck) => evaluate_as(cfg, run, ck),
        AnyCheckpoint::Double(ck) => evaluate_as(cfg, run, ck),
    }
}

fn evaluate_as<T: Scalar>(cfg: &RunConfig, run: &mut Run, ck: &Checkpoint<T>) -> Result<bool, CliError> {
    let (model, scaler) = restore(ck)?;
    let spectra = load_input_spectra(cfg, run)?;
    let set = scaled_set(&spectra, &scaler)?;
    let (_, _, probs) = odorcnn::training::evaluate(&model, &set, cfg.usize("train.eval_batch")?)?;
    let truth: Vec<Label> = spectra.iter().map(|s| s.label).collect();
    let report = FoldReport::from_probs(0, model.arch().tag(), &set.ids, &truth, &probs)?;
    let summary = CvReport {
        k: 1,
        seed: cfg.seed()?,
        models: vec![ModelSummary { model: model.arch().tag().to_string(), folds: vec![report.clone()] }],
        aborted: Vec::new(),
        config_echo: cfg.echo(),
    };
    run.write("trials.csv", report.trials_csv())?;
    run.write("metrics.csv", summary.folds_csv())?;
    write_pooled_curves(run, &summary.models, cfg.usize("eval.bins")?)?;
    println!(
        "{}: n={} accuracy={:.4} f1={:.4} auc={} sensitivity={:.4} specificity={:.4}",
        model.arch(),
        set.len(),
        report.accuracy,
        report.f1,
        report.auc.map_or("undefined".to_string(), |a| format!("{a:.4}")),
        report.sensitivity,
        report.specificity
    );
    Ok(true)
}

pub fn export(cfg: &RunConfig, run: &mut Run, ck: &AnyCheckpoint) -> Result<bool, CliError> {
    match ck {
        AnyCheckpoint::Single(ck) => export_as(cfg, run, ck),
        AnyCheckpoint::Double(ck) => export_as(cfg, run, ck),
    }
}

fn export_as<T: Scalar>(cfg: &RunConfig, run: &mut Run, ck: &Checkpoint<T>) -> Result<bool, CliError> {
    let (model, scaler) = restore(ck)?;
    let spectra = load_input_spectra(cfg, run)?;
    let set = scaled_set(&spectra, &scaler)?;
    let (csv, dim) = feature_matrix_csv(&model, &set, cfg.usize("train.eval_batch")?)?;
    let path = run.write("features.csv", csv)?;
    println!("wrote {} rows x {} features to {}", set.len(), dim, path.display());
    Ok(true)
}

pub fn gradcheck(cfg: &RunConfig, batch: usize, coords: usize, seeds: u64, h: f64) -> Result<(), CliError> {
    let arch = cfg.arch()?;
    let master = cfg.seed()?;
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for s in 0..seeds.max(1) {
        let r = grad_check_arch(arch, batch, master.wrapping_add(s), coords, h)?;
        worst = worst.max(r.max_relative_error);
        skipped += r.kinks_skipped;
    }
    println!("arch={arch} seeds={} batch={batch} coords={coords} h={h:e} kinks_skipped={skipped} max_relative_error={worst:.3e}", seeds.max(1));
    if worst <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::new("gradcheck_failed", format!("max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}

pub fn info(data: Option<&Path>, checkpoint: Option<&Path>) -> Result<(), CliError> {
    if let Some(dir) = data {
        let dir = resolve_input(dir);
        let m = read_manifest(&dir)?;
        let kind = match m.kind {
            DatasetKind::Raw => "raw",
            DatasetKind::Spectra => "spectra",
        };
        let rate = match m.kind {
            DatasetKind::Raw => "sample_rate_hz",
            DatasetKind::Spectra => "bin_hz",
        };
        println!("path = {}", dir.display());
        println!("format = {} v{}", m.format, m.version);
        println!("kind = {kind}");
        println!("trials = {}", m.trial_count);
        println!("odor = {}", m.class_counts.odor);
        println!("blank = {}", m.class_counts.blank);
        println!("channels = {}", m.channels);
        println!("{rate} = {}", m.rate_hz);
        if let Some(first) = m.trials.first() {
            println!("values_per_channel = {}", first.len);
        }
        println!("payload_bytes = {}", m.payload_bytes);
        println!("payload_sha256 = {}", m.payload_sha256);
        println!("provenance = {}", m.provenance);
    }
    if let Some(path) = checkpoint {
        let path = resolve_input(path);
        let (precision, descriptor, entries, values, scaler) = match load_checkpoint(&path)? {
            AnyCheckpoint::Single(ck) => summarize_checkpoint("f32", &ck)?,
            AnyCheckpoint::Double(ck) => summarize_checkpoint("f64", &ck)?,
        };
        println!("checkpoint = {}", path.display());
        println!("precision = {precision}");
        println!("descriptor = {descriptor}");
        println!("entries = {entries}");
        println!("values = {values}");
        println!("scaler = {scaler}");
    }
    Ok(())
}

fn summarize_checkpoint<T: Scalar>(
    precision: &'static str,
    ck: &Checkpoint<T>,
) -> Result<(&'static str, String, usize, usize, bool), CliError> {
    let values = ck.entries.iter().map(|(_, t)| t.numel()).sum();
    let scaler = ScalerParams::load_from(ck)?.is_some();
    Ok((precision, ck.descriptor.clone(), ck.entries.len(), values, scaler))
}
