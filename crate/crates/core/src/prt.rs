//! Precision range test: find the lowest forward bitwidth at which training
//! starts to make progress.
//!
//! Probes run at `start_bits, start_bits + 1, …`, each for `epochs_per_probe`
//! epochs on the same model. After each probe the training accuracy is averaged
//! over the last `window` iterations; the probe's delta is that average minus
//! the previous probe's (for the first probe, minus the average of its own first
//! `window` iterations). The first probe whose delta exceeds `threshold`
//! percentage points sets the lower bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::check_bits;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrtConfig {
    pub start_bits: u32,
    pub max_probe_bits: u32,
    pub epochs_per_probe: usize,
    /// Consecutive iterations averaged per reading.
    pub window: usize,
    /// Accuracy delta, in percentage points, that marks the switching point.
    pub threshold: f64,
}

impl Default for PrtConfig {
    fn default() -> Self {
        Self {
            start_bits: 2,
            max_probe_bits: 8,
            epochs_per_probe: 1,
            window: 50,
            threshold: 1.0,
        }
    }
}

impl PrtConfig {
    pub fn num_probes(&self) -> usize {
        (self.max_probe_bits.saturating_sub(self.start_bits) + 1) as usize
    }

    /// Validates the config against the first cycle length `first_cycle`.
    pub fn validate(&self, first_cycle: usize) -> Result<()> {
        check_bits(self.start_bits)?;
        check_bits(self.max_probe_bits)?;
        if self.max_probe_bits < self.start_bits {
            return Err(Error::Config("max_probe_bits below start_bits".into()));
        }
        if self.window < 2 {
            return Err(Error::Config("prt window must be at least 2".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config("prt threshold must be positive".into()));
        }
        if self.epochs_per_probe == 0 {
            return Err(Error::Config("epochs_per_probe must be positive".into()));
        }
        let budget = self.epochs_per_probe * self.num_probes();
        if budget > first_cycle {
            return Err(Error::Config(format!(
                "{} probes x {} epochs = {budget} epochs exceeds the first cycle ({first_cycle} epochs)",
                self.num_probes(),
                self.epochs_per_probe
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub bits: u32,
    pub epochs: usize,
    pub window_accuracy: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrtResult {
    pub lower_bound_bits: u32,
    pub trace: Vec<ProbeRecord>,
    pub converged: bool,
    pub epochs_used: usize,
}

/// Supplies per-iteration training accuracy (percent) for a probe. The real
/// implementation trains the model; tests inject canned traces.
pub trait AccuracySource {
    fn probe(&mut self, bits: u32, epochs: usize) -> Result<Vec<f64>>;
}

impl<F> AccuracySource for F
where
    F: FnMut(u32, usize) -> Result<Vec<f64>>,
{
    fn probe(&mut self, bits: u32, epochs: usize) -> Result<Vec<f64>> {
        self(bits, epochs)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn run_prt(
    cfg: &PrtConfig,
    source: &mut dyn AccuracySource,
    first_cycle: usize,
) -> Result<PrtResult> {
    cfg.validate(first_cycle)?;
    let mut trace = Vec::new();
    let mut previous: Option<f64> = None;
    let mut epochs_used = 0;
    for bits in cfg.start_bits..=cfg.max_probe_bits {
        let acc = source.probe(bits, cfg.epochs_per_probe)?;
        epochs_used += cfg.epochs_per_probe;
        if acc.is_empty() {
            return Err(Error::Data("probe produced no training iterations".into()));
        }
        if acc.len() < cfg.window {
            return Err(Error::Config(format!(
                "prt window {} exceeds the {} iterations of a probe",
                cfg.window,
                acc.len()
            )));
        }
        let reading = mean(&acc[acc.len() - cfg.window..]);
        let reference = previous.unwrap_or_else(|| mean(&acc[..cfg.window]));
        let delta = reading - reference;
        trace.push(ProbeRecord {
            bits,
            epochs: cfg.epochs_per_probe,
            window_accuracy: reading,
            delta,
        });
        if delta > cfg.threshold {
            return Ok(PrtResult {
                lower_bound_bits: bits,
                trace,
                converged: true,
                epochs_used,
            });
        }
        previous = Some(reading);
    }
    Ok(PrtResult {
        lower_bound_bits: cfg.max_probe_bits,
        trace,
        converged: false,
        epochs_used,
    })
}

/// Lower bound from the test, upper bound from the static-precision counterpart.
pub fn resolve_bounds(result: &PrtResult, static_baseline_bits: u32) -> Result<(u32, u32)> {
    if !result.converged {
        return Err(Error::Invalid(
            "precision range test did not find a lower bound".into(),
        ));
    }
    check_bits(static_baseline_bits)?;
    if result.lower_bound_bits > static_baseline_bits {
        return Err(Error::Invalid(format!(
            "lower bound {} exceeds the static baseline's {} bits; the model needs more precision than the budget",
            result.lower_bound_bits, static_baseline_bits
        )));
    }
    Ok((result.lower_bound_bits, static_baseline_bits))
}
