//! Epoch-indexed precision and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{check_bits, PASS_THROUGH_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Rises from `b_min` to `b_max` along half a cosine period, then resets.
    Cosine,
    /// Rising sawtooth: linear from `b_min` at the cycle start to `b_max` at its last epoch.
    Triangular,
    /// Starts at `b_max` and anneals to `b_min` along half a cosine, then restarts.
    CosineAnneal,
    Static,
    /// Uniform staircase from `b_min` to `b_max` over the first half of training.
    Progressive,
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Pattern::Cosine),
            "triangular" => Ok(Pattern::Triangular),
            "cosine_anneal" => Ok(Pattern::CosineAnneal),
            "static" => Ok(Pattern::Static),
            "progressive" => Ok(Pattern::Progressive),
            other => Err(Error::Invalid(format!("unknown schedule pattern `{other}`"))),
        }
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pattern::Cosine => "cosine",
            Pattern::Triangular => "triangular",
            Pattern::CosineAnneal => "cosine_anneal",
            Pattern::Static => "static",
            Pattern::Progressive => "progressive",
        })
    }
}

/// Maps an epoch to a forward bitwidth.
///
/// The cycle length is `total_epochs / num_cycles` rounded down; when the
/// division is inexact the trailing partial cycle is truncated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionSchedule {
    pub b_min: u32,
    pub b_max: u32,
    pub total_epochs: usize,
    pub num_cycles: usize,
    pub pattern: Pattern,
    /// Evaluate the schedule at fractional epochs (per iteration) instead of per epoch.
    #[serde(default)]
    pub per_iteration: bool,
}

pub const DEFAULT_NUM_CYCLES: usize = 32;

impl PrecisionSchedule {
    pub fn new(
        b_min: u32,
        b_max: u32,
        total_epochs: usize,
        num_cycles: usize,
        pattern: Pattern,
    ) -> Result<Self> {
        let s = Self {
            b_min,
            b_max,
            total_epochs,
            num_cycles,
            pattern,
            per_iteration: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn cosine(b_min: u32, b_max: u32, total_epochs: usize, num_cycles: usize) -> Result<Self> {
        Self::new(b_min, b_max, total_epochs, num_cycles, Pattern::Cosine)
    }

    pub fn fixed(bits: u32, total_epochs: usize) -> Result<Self> {
        Self::new(bits, bits, total_epochs, 1, Pattern::Static)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.b_min)?;
        check_bits(self.b_max)?;
        if self.b_min > self.b_max {
            return Err(Error::Config(format!(
                "b_min {} exceeds b_max {}",
                self.b_min, self.b_max
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if self.num_cycles == 0 || self.num_cycles > self.total_epochs {
            return Err(Error::Config(format!(
                "num_cycles {} must be in [1, total_epochs = {}]",
                self.num_cycles, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Epochs per cycle.
    pub fn cycle_length(&self) -> usize {
        self.total_epochs / self.num_cycles
    }

    pub fn is_static(&self) -> bool {
        self.b_min == self.b_max || self.pattern == Pattern::Static
    }

    pub fn bits_at(&self, t: usize) -> Result<u32> {
        self.bits_at_position(t, 0.0)
    }

    /// Bits at epoch `t` plus a fraction `progress ∈ [0, 1)` of that epoch. The
    /// fraction is ignored unless `per_iteration` is set.
    pub fn bits_at_position(&self, t: usize, progress: f64) -> Result<u32> {
        if t >= self.total_epochs {
            return Err(Error::EpochOutOfRange {
                epoch: t,
                total: self.total_epochs,
            });
        }
        if self.b_min == self.b_max {
            return Ok(self.b_max);
        }
        let x = if self.per_iteration {
            t as f64 + progress.clamp(0.0, 1.0 - f64::EPSILON)
        } else {
            t as f64
        };
        let period = self.cycle_length() as f64;
        let phase = x % period;
        let lo = self.b_min as f64;
        let span = (self.b_max - self.b_min) as f64;
        let raw = match self.pattern {
            Pattern::Static => return Ok(self.b_max),
            Pattern::Cosine => lo + 0.5 * span * (1.0 - (PI * phase / period).cos()),
            Pattern::CosineAnneal => lo + 0.5 * span * (1.0 + (PI * phase / period).cos()),
            Pattern::Triangular => {
                if period <= 1.0 {
                    lo
                } else {
                    lo + span * (phase / (period - 1.0)).min(1.0)
                }
            }
            Pattern::Progressive => {
                let half = (self.total_epochs / 2).max(1) as f64;
                if x >= half {
                    return Ok(self.b_max);
                }
                let levels = span + 1.0;
                return Ok((lo + (levels * x / half).floor()).min(self.b_max as f64) as u32);
            }
        };
        Ok((round_half_even(raw) as u32).clamp(self.b_min, self.b_max))
    }

    /// The whole epoch -> bits table.
    pub fn table(&self) -> Vec<u32> {
        (0..self.total_epochs)
            .map(|t| self.bits_at(t).expect("t within range"))
            .collect()
    }

    /// Pre-rounding value of the cosine curve, for plotting next to the bits.
    pub fn cosine_raw(&self, t: usize) -> f64 {
        let period = self.cycle_length() as f64;
        let phase = (t as f64) % period;
        self.b_min as f64
            + 0.5 * (self.b_max - self.b_min) as f64 * (1.0 - (PI * phase / period).cos())
    }
}

/// Round half to even. Values within 1e-9 of a half-integer count as exact
/// ties so that trigonometric round-off cannot decide the direction.
pub fn round_half_even(x: f64) -> f64 {
    let twice = 2.0 * x;
    let nearest_half = twice.round();
    if (twice - nearest_half).abs() <= 2e-9 && (nearest_half as i64) % 2 != 0 {
        (nearest_half / 2.0).round_ties_even()
    } else {
        x.round()
    }
}

/// Piecewise-constant learning rate. `stage_boundaries[i]` is the exclusive
/// end epoch of stage `i`; a boundary epoch belongs to the following stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub stage_boundaries: Vec<usize>,
    pub stage_lrs: Vec<f64>,
}

impl LrSchedule {
    pub fn new(stage_boundaries: Vec<usize>, stage_lrs: Vec<f64>) -> Result<Self> {
        let s = Self {
            stage_boundaries,
            stage_lrs,
        };
        s.validate()?;
        Ok(s)
    }

    /// Staircase `lrs` with boundaries at 50% and 75% of `epochs`.
    pub fn three_stage(epochs: usize, lrs: [f64; 3]) -> Result<Self> {
        Self::new(vec![epochs / 2, epochs * 3 / 4, epochs], lrs.to_vec())
    }

    pub fn constant(lr: f64, epochs: usize) -> Result<Self> {
        Self::new(vec![epochs], vec![lr])
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_boundaries.is_empty() || self.stage_boundaries.len() != self.stage_lrs.len() {
            return Err(Error::Config(
                "lr schedule needs one learning rate per stage boundary".into(),
            ));
        }
        if self.stage_boundaries[0] == 0
            || self.stage_boundaries.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("lr stage boundaries must strictly increase".into()));
        }
        if self.stage_lrs.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        *self.stage_boundaries.last().expect("validated non-empty")
    }

    pub fn lr_at(&self, t: usize) -> Result<f64> {
        self.stage_boundaries
            .iter()
            .position(|&end| t < end)
            .map(|i| self.stage_lrs[i])
            .ok_or(Error::EpochOutOfRange {
                epoch: t,
                total: self.total_epochs(),
            })
    }
}

/// Cosine annealing with warm restarts every `period` epochs.
pub fn clr_at(t: usize, lr_max: f64, lr_min: f64, period: usize) -> Result<f64> {
    if lr_min > lr_max || period == 0 {
        return Err(Error::Invalid(format!(
            "cyclic lr needs lr_min <= lr_max and a positive period (got {lr_min}, {lr_max}, {period})"
        )));
    }
    let phase = (t % period) as f64 / period as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * phase).cos()))
}

/// Backward bits under gradient CPT: the forward pattern replayed over
/// `[bw_min, bw_max]`.
pub fn gradient_schedule(fw: &PrecisionSchedule, bw_min: u32, bw_max: u32) -> Result<PrecisionSchedule> {
    let mut s = *fw;
    s.b_min = bw_min;
    s.b_max = bw_max;
    s.validate()?;
    Ok(s)
}

pub fn is_full_precision(bits: u32) -> bool {
    bits >= PASS_THROUGH_BITS
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let s = PrecisionSchedule::cosine(3, 8, 32, 2).unwrap();
        assert_eq!(s.cycle_length(), 16);
        assert_eq!(s.bits_at(0).unwrap(), 3);
        assert_eq!(s.bits_at(8).unwrap(), 6);
        assert_eq!(s.bits_at(15).unwrap(), 8);
        assert_eq!(s.bits_at(16).unwrap(), 3);
        assert!(matches!(
            s.bits_at(32),
            Err(Error::EpochOutOfRange { epoch: 32, .. })
        ));
    }

    #[test]
    fn other_patterns() {
        let tri = PrecisionSchedule::new(3, 8, 12, 2, Pattern::Triangular).unwrap();
        assert_eq!(tri.table(), vec![3, 4, 5, 6, 7, 8, 3, 4, 5, 6, 7, 8]);

        let ann = PrecisionSchedule::new(3, 8, 16, 2, Pattern::CosineAnneal).unwrap();
        assert_eq!(ann.bits_at(0).unwrap(), 8);
        assert_eq!(ann.bits_at(8).unwrap(), 8);
        assert_eq!(ann.bits_at(7).unwrap(), 3);

        let st = PrecisionSchedule::new(3, 8, 10, 2, Pattern::Static).unwrap();
        assert!(st.table().iter().all(|&b| b == 8));

        let prog = PrecisionSchedule::new(3, 8, 160, 1, Pattern::Progressive).unwrap();
        let table = prog.table();
        assert_eq!(table[0], 3);
        assert_eq!(table[79], 8);
        assert!(table[80..].iter().all(|&b| b == 8));
        assert!(table.windows(2).all(|w| w[0] <= w[1]));
        for bits in 3..=8 {
            let n = table[..80].iter().filter(|&&b| b == bits).count();
            assert!((13..=14).contains(&n), "{bits}-bit held for {n} epochs");
        }
    }

    #[test]
    fn non_divisible_truncates_last_cycle() {
        let s = PrecisionSchedule::cosine(3, 8, 10, 3).unwrap();
        assert_eq!(s.cycle_length(), 3);
        assert_eq!(s.bits_at(9).unwrap(), 3);
    }

    #[test]
    fn invalid_schedules() {
        assert!(PrecisionSchedule::cosine(8, 3, 10, 2).is_err());
        assert!(PrecisionSchedule::cosine(1, 3, 10, 2).is_err());
        assert!(PrecisionSchedule::cosine(3, 8, 10, 0).is_err());
        assert!(PrecisionSchedule::cosine(3, 8, 4, 5).is_err());
    }

    #[test]
    fn per_iteration_moves_within_epoch() {
        let mut s = PrecisionSchedule::cosine(2, 8, 4, 1).unwrap();
        assert_eq!(s.bits_at_position(1, 0.9).unwrap(), 3);
        s.per_iteration = true;
        assert_eq!(s.bits_at_position(1, 0.9).unwrap(), 5);
    }

    #[test]
    fn lr_staircase() {
        let lr = LrSchedule::new(vec![80, 120, 160], vec![0.1, 0.01, 0.001]).unwrap();
        assert_eq!(lr.lr_at(0).unwrap(), 0.1);
        assert_eq!(lr.lr_at(79).unwrap(), 0.1);
        assert_eq!(lr.lr_at(80).unwrap(), 0.01);
        assert_eq!(lr.lr_at(159).unwrap(), 0.001);
        assert!(lr.lr_at(160).is_err());
        assert!(LrSchedule::new(vec![80, 80], vec![0.1, 0.01]).is_err());
        assert!(LrSchedule::new(vec![80], vec![0.0]).is_err());
    }

    #[test]
    fn cyclic_lr() {
        assert!((clr_at(0, 0.1, 0.001, 10).unwrap() - 0.1).abs() < 1e-15);
        assert!((clr_at(5, 0.1, 0.001, 10).unwrap() - 0.0505).abs() < 1e-12);
        assert!((clr_at(10, 0.1, 0.001, 10).unwrap() - 0.1).abs() < 1e-15);
        assert!(clr_at(0, 0.001, 0.1, 10).is_err());
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(5.5), 6.0);
        assert_eq!(round_half_even(4.5), 4.0);
        assert_eq!(round_half_even(4.4999999999999), 4.0);
        assert_eq!(round_half_even(3.5000000000001), 4.0);
        assert_eq!(round_half_even(2.6), 3.0);
    }
}
