//! Patience-based early stopping on a validation loss stream.

/// Tracks the best loss seen so far. Epochs are numbered from 1; a loss equal
/// to the best counts as no improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    stale: usize,
}

/// Outcome of one [`EarlyStopper::observe`] call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Observation {
        self.epoch += 1;
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Observation {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best loss, 0 before any improvement.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epochs_seen(&self) -> usize {
        self.epoch
    }
}

/// Feeds `losses` until a stop is signalled; returns `(stop_epoch, best_epoch)`,
/// with `stop_epoch = None` if the stream ran out first.
pub fn simulate(losses: &[f64], patience: usize) -> (Option<usize>, usize) {
    let mut s = EarlyStopper::new(patience);
    for &l in losses {
        if s.observe(l).stop {
            return (Some(s.epochs_seen()), s.best_epoch());
        }
    }
    (None, s.best_epoch())
}
