//! Bit-operation (BitOPs) accounting for quantized training.
//!
//! One multiply-accumulate between an `a`-bit and a `b`-bit operand costs
//! `a * b` BitOPs. A training step is three GEMMs of the layer's MAC count:
//!
//! * forward:        `macs * b_w * b_a`
//! * error backprop: `macs * b_w * b_e`
//! * weight grad:    `macs * b_a * b_e`
//!
//! The optimizer update, `params * b_g * b_g`, is tracked separately and is not
//! part of the total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::check_bits;

/// Label written into every report so numbers are never compared across
/// incompatible accounting rules.
pub const ACCOUNTING_VERSION: &str = "three-gemm-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv {
        batch: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        batch: usize,
        in_features: usize,
        out_features: usize,
    },
}

/// Multiply-accumulates of one forward pass through a layer.
pub fn layer_macs(layer: &LayerDesc) -> Result<u64> {
    match *layer {
        LayerDesc::Conv {
            batch,
            in_channels,
            height,
            width,
            filters,
            kernel,
            stride,
            padding,
        } => {
            let (h, w) = (height + 2 * padding, width + 2 * padding);
            if stride == 0 || kernel == 0 || kernel > h || kernel > w {
                return Err(Error::Invalid(format!("conv layer {layer:?} has no output")));
            }
            let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
            Ok((batch * filters * in_channels * kernel * kernel * oh * ow) as u64)
        }
        LayerDesc::Linear {
            batch,
            in_features,
            out_features,
        } => Ok((batch * in_features * out_features) as u64),
    }
}

/// Bitwidths in effect for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBits {
    pub weight: u32,
    pub activation: u32,
    pub error: u32,
    pub gradient: u32,
}

impl StepBits {
    /// FW bits for weights and activations, BW bits for errors and gradients.
    pub fn fw_bw(fw: u32, bw: u32) -> Self {
        Self {
            weight: fw,
            activation: fw,
            error: bw,
            gradient: bw,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    pub forward: u64,
    pub error_backprop: u64,
    pub weight_grad: u64,
    pub update: u64,
}

pub fn step_cost(macs: u64, params: u64, bits: StepBits) -> Result<StepCost> {
    for b in [bits.weight, bits.activation, bits.error, bits.gradient] {
        check_bits(b)?;
    }
    let (w, a, e, g) = (
        bits.weight as u64,
        bits.activation as u64,
        bits.error as u64,
        bits.gradient as u64,
    );
    Ok(StepCost {
        forward: macs * w * a,
        error_backprop: macs * w * e,
        weight_grad: macs * a * e,
        update: params * g * g,
    })
}

/// Accumulated BitOPs per training phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub forward_bitops: u64,
    pub error_backprop_bitops: u64,
    pub weight_grad_bitops: u64,
    pub update_bitops: u64,
    pub steps: u64,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, cost: StepCost) {
        self.forward_bitops += cost.forward;
        self.error_backprop_bitops += cost.error_backprop;
        self.weight_grad_bitops += cost.weight_grad;
        self.update_bitops += cost.update;
        self.steps += 1;
    }

    /// Forward + error backprop + weight gradient.
    pub fn total(&self) -> u64 {
        self.forward_bitops + self.error_backprop_bitops + self.weight_grad_bitops
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.forward_bitops += other.forward_bitops;
        self.error_backprop_bitops += other.error_backprop_bitops;
        self.weight_grad_bitops += other.weight_grad_bitops;
        self.update_bitops += other.update_bitops;
        self.steps += other.steps;
    }

    pub fn giga_bitops(&self) -> f64 {
        self.total() as f64 / 1e9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub accounting: String,
    pub steps: u64,
    pub forward_reduction_pct: f64,
    pub error_backprop_reduction_pct: f64,
    pub weight_grad_reduction_pct: f64,
    pub update_reduction_pct: f64,
    pub total_reduction_pct: f64,
    pub total_gbitops: f64,
    pub baseline_total_gbitops: f64,
}

fn reduction_pct(value: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        (1.0 - value as f64 / baseline as f64) * 100.0
    }
}

/// Percentage reduction of `ledger` relative to `baseline`, per phase and total.
pub fn run_report(ledger: &CostLedger, baseline: &CostLedger) -> Result<SavingsReport> {
    if ledger.steps != baseline.steps {
        return Err(Error::Invalid(format!(
            "ledgers cover different step counts ({} vs {})",
            ledger.steps, baseline.steps
        )));
    }
    Ok(SavingsReport {
        accounting: ACCOUNTING_VERSION.to_string(),
        steps: ledger.steps,
        forward_reduction_pct: reduction_pct(ledger.forward_bitops, baseline.forward_bitops),
        error_backprop_reduction_pct: reduction_pct(
            ledger.error_backprop_bitops,
            baseline.error_backprop_bitops,
        ),
        weight_grad_reduction_pct: reduction_pct(
            ledger.weight_grad_bitops,
            baseline.weight_grad_bitops,
        ),
        update_reduction_pct: reduction_pct(ledger.update_bitops, baseline.update_bitops),
        total_reduction_pct: reduction_pct(ledger.total(), baseline.total()),
        total_gbitops: ledger.giga_bitops(),
        baseline_total_gbitops: baseline.giga_bitops(),
    })
}
