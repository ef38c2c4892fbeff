use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    CosineDecay,
    WarmupThenDecay,
    Constant,
}

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base: f64,
    pub floor: f64,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
}

impl Schedule {
    pub fn cosine(base: f64, floor: f64, total_epochs: usize) -> Result<Self> {
        Self::new(ScheduleKind::CosineDecay, base, floor, total_epochs, 0)
    }

    pub fn warmup_cosine(base: f64, floor: f64, total_epochs: usize, warmup_epochs: usize) -> Result<Self> {
        Self::new(ScheduleKind::WarmupThenDecay, base, floor, total_epochs, warmup_epochs)
    }

    pub fn constant(base: f64, total_epochs: usize) -> Result<Self> {
        Self::new(ScheduleKind::Constant, base, base, total_epochs, 0)
    }

    pub fn new(kind: ScheduleKind, base: f64, floor: f64, total_epochs: usize, warmup_epochs: usize) -> Result<Self> {
        if !(base > 0.0 && base.is_finite()) {
            return Err(Error::Range {
                what: "base learning rate",
                value: base,
                range: "(0, inf)".into(),
            });
        }
        if !(0.0..=base).contains(&floor) {
            return Err(Error::Range {
                what: "floor learning rate",
                value: floor,
                range: format!("[0, {base}]"),
            });
        }
        if kind == ScheduleKind::WarmupThenDecay && warmup_epochs >= total_epochs.max(1) {
            return Err(Error::Range {
                what: "warmup epochs",
                value: warmup_epochs as f64,
                range: format!("[0, {total_epochs})"),
            });
        }
        Ok(Self {
            kind,
            base,
            floor,
            total_epochs,
            warmup_epochs,
        })
    }

    /// Learning rate for `epoch`, with `0 ≤ epoch < total_epochs`.
    pub fn rate(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Range {
                what: "epoch",
                value: epoch as f64,
                range: format!("[0, {})", self.total_epochs),
            });
        }
        let last = self.total_epochs - 1;
        Ok(match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::CosineDecay => self.cosine_between(epoch, 0, last),
            ScheduleKind::WarmupThenDecay => {
                if epoch < self.warmup_epochs {
                    self.base * (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64
                } else {
                    self.cosine_between(epoch, self.warmup_epochs, last)
                }
            }
        })
    }

    fn cosine_between(&self, epoch: usize, start: usize, end: usize) -> f64 {
        if end <= start {
            return self.base;
        }
        let progress = (epoch - start) as f64 / (end - start) as f64;
        self.floor + (self.base - self.floor) * 0.5 * (1.0 + (PI * progress).cos())
    }
}
