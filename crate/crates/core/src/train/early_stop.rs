use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Validation loss stayed above training loss for too long.
    Overfitting,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// This epoch has the lowest validation loss so far.
    pub improved: bool,
    pub stop: Option<StopReason>,
}

/// Stopping rule over per-epoch (train, val) losses.
///
/// Epochs up to `min_epochs` always run. After that, every epoch with
/// `val > train` extends a streak of violations, any other epoch resets it,
/// and training stops once the streak exceeds `patience`. The best epoch is
/// the earliest one with the minimal validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    min_epochs: usize,
    patience: usize,
    max_epochs: usize,
    streak: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(min_epochs: usize, patience: usize, max_epochs: usize) -> Self {
        EarlyStopping {
            min_epochs,
            patience,
            max_epochs,
            streak: 0,
            best: None,
        }
    }

    /// Feed the losses of `epoch` (1-based, consecutive).
    pub fn observe(&mut self, epoch: usize, train_loss: f64, val_loss: f64) -> Observation {
        let improved = match self.best {
            Some((_, best)) => val_loss < best,
            None => true,
        };
        if improved {
            self.best = Some((epoch, val_loss));
        }
        if epoch > self.min_epochs {
            if val_loss > train_loss {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        let stop = if self.streak > self.patience {
            Some(StopReason::Overfitting)
        } else if epoch >= self.max_epochs {
            Some(StopReason::MaxEpochs)
        } else {
            None
        };
        Observation { improved, stop }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best.map(|(_, v)| v)
    }

    pub fn streak(&self) -> usize {
        self.streak
    }
}

/// Runs the rule over scripted loss curves. Returns the stop epoch (or the
/// script length when it never fires), the reason, and the best epoch.
pub fn simulate(
    min_epochs: usize,
    patience: usize,
    max_epochs: usize,
    train_losses: &[f64],
    val_losses: &[f64],
) -> (usize, Option<StopReason>, Option<usize>) {
    let mut es = EarlyStopping::new(min_epochs, patience, max_epochs);
    let n = train_losses.len().min(val_losses.len());
    for e in 0..n {
        if let Some(reason) = es.observe(e + 1, train_losses[e], val_losses[e]).stop {
            return (e + 1, Some(reason), es.best_epoch());
        }
    }
    (n, None, es.best_epoch())
}
