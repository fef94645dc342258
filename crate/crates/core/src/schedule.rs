//! "Newbob" learning-rate control driven by cross-validation accuracy, and
//! the per-epoch report every trainer emits.

use std::fmt;

use crate::error::{Error, Result};

/// Thresholds are absolute improvements in accuracy percentage points.
#[derive(Clone, Debug, PartialEq)]
pub struct NewbobConfig {
    pub initial_lr: f64,
    pub halving_threshold: f64,
    pub stop_threshold: f64,
    /// Epochs that must complete before the rate may change or training stop.
    pub min_epochs: usize,
}

impl NewbobConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.initial_lr)));
        }
        if !(self.halving_threshold > 0.0 && self.stop_threshold > 0.0) {
            return Err(Error::Config("newbob thresholds must be positive".into()));
        }
        if self.stop_threshold > self.halving_threshold {
            return Err(Error::Config(format!(
                "stop threshold {} exceeds halving threshold {}",
                self.stop_threshold, self.halving_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Continue,
    Stop,
}

#[derive(Clone, Debug)]
pub struct Newbob {
    config: NewbobConfig,
    lr: f64,
    halving: bool,
    previous: f64,
    epochs: usize,
}

impl Newbob {
    /// `baseline` is the cross-validation accuracy (percent) before training.
    pub fn new(config: NewbobConfig, baseline: f64) -> Result<Self> {
        config.validate()?;
        Ok(Newbob {
            lr: config.initial_lr,
            config,
            halving: false,
            previous: baseline,
            epochs: 0,
        })
    }

    /// Rate to use for the next epoch.
    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn is_halving(&self) -> bool {
        self.halving
    }

    /// Records the accuracy reached by the epoch just finished. Once the
    /// improvement drops under the halving threshold the rate halves after
    /// that epoch and every later one; an improvement under the stop
    /// threshold while halving ends training.
    pub fn record(&mut self, accuracy: f64) -> Step {
        self.epochs += 1;
        let improvement = accuracy - self.previous;
        self.previous = accuracy;
        if self.epochs < self.config.min_epochs {
            return Step::Continue;
        }
        if improvement < self.config.halving_threshold {
            self.halving = true;
        }
        if self.halving && improvement < self.config.stop_threshold {
            return Step::Stop;
        }
        if self.halving {
            self.lr *= 0.5;
        }
        Step::Continue
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    /// frame accuracy on the cross-validation set, percent
    pub cv_accuracy: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

impl EpochReport {
    /// Columns that do not depend on wall-clock time.
    pub fn deterministic_fields(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:e}",
            self.epoch, self.loss, self.cv_accuracy, self.learning_rate
        )
    }
}

/// One training-log line: `epoch\tloss\tcv_acc\tlr\tseconds`.
impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.3}", self.deterministic_fields(), self.seconds)
    }
}

impl std::str::FromStr for EpochReport {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let cols: Vec<&str> = line.trim_end().split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::format("training log", format!("expected 5 columns in {line:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::format("training log", format!("{s:?}: {e}")))
        };
        Ok(EpochReport {
            epoch: cols[0]
                .parse()
                .map_err(|e| Error::format("training log", format!("{:?}: {e}", cols[0])))?,
            loss: num(cols[1])?,
            cv_accuracy: num(cols[2])?,
            learning_rate: num(cols[3])?,
            seconds: num(cols[4])?,
        })
    }
}
