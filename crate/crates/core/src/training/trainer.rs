use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::early_stop::{EarlyStopState, StopDecision};
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::schedule::{lr_cosine_warm_restarts, lr_one_cycle};
use crate::dsp::{ScalerParams, SpectralFeatures};
use crate::error::{Error, Result};
use crate::models::ModelGraph;
use crate::nn::Pass;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::util::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    CosineWarmRestarts,
    OneCycle,
}

impl ScheduleKind {
    pub fn tag(self) -> &'static str {
        match self {
            ScheduleKind::CosineWarmRestarts => "cosine_warm_restarts",
            ScheduleKind::OneCycle => "one_cycle",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine_warm_restarts" | "cosine" => Ok(ScheduleKind::CosineWarmRestarts),
            "one_cycle" | "onecycle" => Ok(ScheduleKind::OneCycle),
            other => Err(Error::invalid(format!("unknown schedule {other:?} (cosine_warm_restarts | one_cycle)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub schedule: ScheduleKind,
    pub lr_max: f64,
    pub lr_min: f64,
    pub t0: usize,
    pub t_mult: usize,
    pub pct_start: f64,
    pub div: f64,
    pub final_div: f64,
    pub optimizer: AdamWConfig,
    pub patience: usize,
    pub min_delta: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 150,
            schedule: ScheduleKind::CosineWarmRestarts,
            lr_max: 5e-4,
            lr_min: 0.0,
            t0: 10,
            t_mult: 2,
            pct_start: 0.3,
            div: 25.0,
            final_div: 1e4,
            optimizer: AdamWConfig::default(),
            patience: 15,
            min_delta: 1e-3,
            eval_batch: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("train.batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.max_epochs == 0 || self.eval_batch == 0 {
            return Err(Error::invalid("train.max_epochs and train.eval_batch must be positive"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::invalid(format!("train.lr_max must be positive, got {}", self.lr_max)));
        }
        if !(0.0..1.0).contains(&self.pct_start) || self.div <= 0.0 || self.final_div <= 0.0 {
            return Err(Error::invalid("one-cycle needs pct_start in [0, 1) and positive div/final_div"));
        }
        Ok(())
    }
}

/// Model-ready samples: `x` is `(len, channels, bins)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub bins: usize,
    pub x: Vec<f32>,
}

impl SampleSet {
    /// Stacks spectra, scaling them first when `scaler` is given.
    pub fn from_spectra(spectra: &[&SpectralFeatures], scaler: Option<&ScalerParams>) -> Result<Self> {
        let first = spectra.first().ok_or_else(|| Error::invalid("empty sample set"))?;
        let (channels, bins) = (first.channels, first.bins);
        let mut set = Self { ids: Vec::new(), labels: Vec::new(), channels, bins, x: Vec::new() };
        for s in spectra {
            let scaled;
            let s = match scaler {
                Some(p) => {
                    scaled = p.apply(s)?;
                    &scaled
                }
                None => *s,
            };
            if s.channels != channels || s.bins != bins {
                return Err(Error::shapes("sample set", &[&[channels, bins], &[s.channels, s.bins]]));
            }
            set.ids.push(s.trial_id);
            set.labels.push(s.label.index());
            set.x.extend(s.values.iter().map(|&v| v as f32));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch<T: Scalar>(&self, rows: &[usize]) -> Tensor<T> {
        let per = self.channels * self.bins;
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend(self.x[r * per..(r + 1) * per].iter().map(|&v| T::from_f64(f64::from(v))));
        }
        Tensor::new(vec![rows.len(), self.channels, self.bins], data).expect("batch shape")
    }

    pub fn batch_labels(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curves: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// `epoch,lr,train_loss,val_loss,val_acc` rows with a header.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,val_acc\n");
        for r in &self.curves {
            out.push_str(&format!("{},{:e},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.val_loss, r.val_acc));
        }
        out
    }
}

fn argmax2(row: &[f64]) -> usize {
    usize::from(row[1] > row[0])
}

/// Forward, backward and one AdamW update on a single batch. Returns the
/// batch loss and the number of correct argmax predictions.
pub fn train_step<T: Scalar>(
    model: &mut ModelGraph<T>,
    x: Tensor<T>,
    labels: &[usize],
    state: &mut OptimizerState<T>,
    config: &AdamWConfig,
    lr: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let mut pass = Pass::train(&mut tape, dropout_rng);
    let xv = pass.tape.constant(x)?;
    let out = model.forward(&mut pass, xv)?;
    let loss = pass.tape.cross_entropy(out.logits, labels)?;
    let loss_value = pass.tape.value(loss).data()[0].as_f64();
    let logits = pass.tape.value(out.logits).to_f64_vec();
    let correct = logits.chunks_exact(2).zip(labels).filter(|(row, &y)| argmax2(row) == y).count();
    pass.tape.backward(loss)?;
    let grads: Vec<Tensor<T>> = model
        .named_params()
        .iter()
        .map(|(_, p)| pass.binding(p.id).and_then(|v| pass.tape.grad(v)).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    model.apply_stat_updates(&mut pass);
    let mut params: Vec<&mut Tensor<T>> = model.params_mut().into_iter().map(|p| &mut p.value).collect();
    adamw_step(&mut params, &grads, state, config, lr)?;
    Ok((loss_value, correct))
}

/// Eval-mode mean cross-entropy, accuracy, and per-sample class probabilities.
pub fn evaluate<T: Scalar>(model: &ModelGraph<T>, set: &SampleSet, batch: usize) -> Result<(f64, f64, Vec<[f64; 2]>)> {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut probs = Vec::with_capacity(set.len());
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(batch.max(1)) {
        let pred = model.predict(&set.batch::<T>(chunk))?;
        for (k, &r) in chunk.iter().enumerate() {
            let z = pred.logits[k];
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            loss += lse - z[set.labels[r]];
            correct += usize::from(argmax2(&z) == set.labels[r]);
            probs.push(pred.probs[k]);
        }
    }
    let n = set.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n, probs))
}

/// Mini-batch training with the scheduled learning rate, validation after
/// every epoch and early stopping. On return `model` holds the parameters
/// and running statistics from the best validation epoch.
pub fn train_model<T: Scalar>(
    model: &mut ModelGraph<T>,
    train: &SampleSet,
    val: &SampleSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::invalid(format!(
            "training needs >= 2 training and >= 1 validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::SHUFFLE]));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::DROPOUT]));
    let mut state = {
        let params = model.named_params();
        OptimizerState::new(params.iter().map(|(_, p)| &p.value))
    };
    let mut stopper = EarlyStopState::new(config.patience, config.min_delta);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches_per_epoch = order.chunks(config.batch_size).filter(|c| c.len() >= 2).count();
    let total_steps = batches_per_epoch * config.max_epochs;
    let mut step = 0;
    let mut curves = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let epoch_lr = lr_cosine_warm_restarts(epoch, config.t0, config.t_mult, config.lr_max, config.lr_min);
        let mut first_lr = None;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        // a trailing single-sample batch is skipped: batch norm needs two
        for rows in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let lr = match config.schedule {
                ScheduleKind::CosineWarmRestarts => epoch_lr,
                ScheduleKind::OneCycle => {
                    lr_one_cycle(step, total_steps, config.lr_max, config.pct_start, config.div, config.final_div)
                }
            };
            first_lr.get_or_insert(lr);
            let labels = train.batch_labels(rows);
            let (loss, ok) = train_step(
                model,
                train.batch::<T>(rows),
                &labels,
                &mut state,
                &config.optimizer,
                lr,
                Some(&mut dropout_rng),
            )
            .map_err(|e| Error::Diverged { epoch, reason: e.to_string() })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, reason: format!("training loss {loss}") });
            }
            loss_sum += loss * rows.len() as f64;
            correct += ok;
            seen += rows.len();
            step += 1;
        }
        let (val_loss, val_acc, _) =
            evaluate(model, val, config.eval_batch).map_err(|e| Error::Diverged { epoch, reason: e.to_string() })?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, reason: format!("validation loss {val_loss}") });
        }
        curves.push(EpochRecord {
            epoch,
            lr: first_lr.unwrap_or(epoch_lr),
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_loss,
            val_acc,
        });
        if stopper.update(epoch, val_loss, || model.to_checkpoint()) == StopDecision::Stop {
            stopped_early = epoch + 1 < config.max_epochs;
            break;
        }
    }
    let best = stopper.best.take().expect("first epoch always improves on an infinite best loss");
    model.load_checkpoint(&best)?;
    Ok(TrainOutcome {
        curves,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        best_val_loss: stopper.best_loss,
        stopped_early,
    })
}
