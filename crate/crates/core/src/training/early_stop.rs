/// Tracks the best validation loss and holds the state captured at it.
#[derive(Debug, Clone)]
pub struct EarlyStopState<C> {
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub best: Option<C>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

impl<C> EarlyStopState<C> {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { best_loss: f64::INFINITY, best_epoch: None, epochs_since: 0, patience, min_delta, best: None }
    }

    /// An epoch improves only if `val_loss < best - min_delta`; `capture` is
    /// called just for improving epochs.
    pub fn update(&mut self, epoch: usize, val_loss: f64, capture: impl FnOnce() -> C) -> StopDecision {
        if val_loss < self.best_loss - self.min_delta {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.epochs_since = 0;
            self.best = Some(capture());
        } else {
            self.epochs_since += 1;
        }
        if self.epochs_since >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}
