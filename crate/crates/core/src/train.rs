//! Shared optimisation settings and the early-stopping loop.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
        }
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_accuracy: Option<f64>,
    pub best: bool,
}

/// Dev score: higher accuracy wins, then lower loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DevScore {
    pub accuracy: f64,
    pub loss: f64,
    /// Dev accuracy reported in the log when selection ignores it.
    pub observed: Option<f64>,
}

impl DevScore {
    pub fn beats(&self, other: &DevScore) -> bool {
        self.accuracy > other.accuracy || (self.accuracy == other.accuracy && self.loss < other.loss)
    }
}

/// Runs `epoch` up to `max_epochs` times, keeping the parameters with the
/// best dev score and stopping after `patience` epochs without improvement.
pub(crate) fn early_stopping<M: Clone>(
    stage: &str,
    model: &mut M,
    optim: &OptimConfig,
    mut epoch: impl FnMut(&mut M, usize) -> f64,
    mut score: impl FnMut(&M) -> DevScore,
    log: &mut Vec<EpochRecord>,
) {
    let mut best: Option<(DevScore, M)> = None;
    let mut since_best = 0;
    for e in 1..=optim.max_epochs {
        let train_loss = epoch(model, e);
        let s = score(model);
        let improved = best.as_ref().is_none_or(|(b, _)| s.beats(b));
        if improved {
            best = Some((s, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            stage: stage.to_string(),
            epoch: e,
            train_loss,
            dev_loss: s.loss,
            dev_accuracy: s.observed.or(s.accuracy.is_finite().then_some(s.accuracy)),
            best: improved,
        };
        log::info!("{}", serde_json::to_string(&record).unwrap_or_default());
        log.push(record);
        if since_best >= optim.patience {
            break;
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
}
