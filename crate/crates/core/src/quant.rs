//! Uniform fake quantizers for weights, activations, errors and gradients.
//!
//! Values stay `f64`; quantization snaps them onto a per-tensor grid whose
//! scale is recomputed from the live tensor on every call. Nearest rounding
//! always breaks ties to even.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Bitwidth at which every quantizer is the identity.
pub const PASS_THROUGH_BITS: u32 = 32;
pub const MIN_BITS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorClass {
    Weight,
    Activation,
    Error,
    Gradient,
}

impl TensorClass {
    /// Weights and activations make up the forward ("FW") side.
    pub fn is_forward(self) -> bool {
        matches!(self, TensorClass::Weight | TensorClass::Activation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    MaxScaleSymmetric,
    MaxScaleUnsigned,
    DorefaStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    NearestEven,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitsSource {
    Static(u32),
    /// Bits follow the run's precision schedule.
    Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub tensor_class: TensorClass,
    pub bits_source: BitsSource,
    pub quantizer_kind: QuantizerKind,
    pub rounding: Rounding,
}

impl QuantSpec {
    pub fn defaults_for(tensor_class: TensorClass) -> Self {
        let (bits_source, quantizer_kind, rounding) = match tensor_class {
            TensorClass::Weight => (
                BitsSource::Schedule,
                QuantizerKind::MaxScaleSymmetric,
                Rounding::NearestEven,
            ),
            TensorClass::Activation => (
                BitsSource::Schedule,
                QuantizerKind::MaxScaleUnsigned,
                Rounding::NearestEven,
            ),
            TensorClass::Error | TensorClass::Gradient => (
                BitsSource::Static(8),
                QuantizerKind::MaxScaleSymmetric,
                Rounding::Stochastic,
            ),
        };
        Self {
            tensor_class,
            bits_source,
            quantizer_kind,
            rounding,
        }
    }

    /// Backward tensors only follow a schedule when gradient CPT is enabled.
    pub fn validate(&self, gradient_cpt: bool) -> Result<()> {
        match self.bits_source {
            BitsSource::Static(b) => check_bits(b)?,
            BitsSource::Schedule if !self.tensor_class.is_forward() && !gradient_cpt => {
                return Err(Error::Config(format!(
                    "{:?} tensors use static bits unless gradient_cpt is enabled",
                    self.tensor_class
                )))
            }
            BitsSource::Schedule => {}
        }
        if self.quantizer_kind == QuantizerKind::DorefaStyle
            && self.tensor_class != TensorClass::Weight
        {
            return Err(Error::Config("dorefa_style quantizer only applies to weights".into()));
        }
        Ok(())
    }

    /// Resolves the bitwidth given the scheduled forward/backward bits.
    pub fn bits(&self, scheduled: u32) -> u32 {
        match self.bits_source {
            BitsSource::Static(b) => b,
            BitsSource::Schedule => scheduled,
        }
    }

    pub fn quantize<R: Rng + ?Sized>(&self, x: &Tensor, bits: u32, rng: &mut R) -> Result<Tensor> {
        match (self.quantizer_kind, self.rounding) {
            (QuantizerKind::DorefaStyle, _) => quantize_dorefa_style(x, bits),
            (QuantizerKind::MaxScaleSymmetric, Rounding::Stochastic) => {
                quantize_gradient_stochastic(x, bits, rng)
            }
            (QuantizerKind::MaxScaleUnsigned, Rounding::Stochastic) => Err(Error::Config(
                "stochastic rounding is only defined for the signed grid".into(),
            )),
            (kind, Rounding::NearestEven) => {
                quantize_max_scale(x, bits, kind == QuantizerKind::MaxScaleSymmetric)
            }
        }
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=PASS_THROUGH_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("bitwidth {bits} outside [2, 32]")))
    }
}

fn check_input(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("quantizer input".into()))
    }
}

/// Largest grid index: `2^(bits-1) - 1` signed, `2^bits - 1` unsigned.
pub fn max_level(bits: u32, signed: bool) -> f64 {
    let b = if signed { bits - 1 } else { bits };
    ((1u64 << b) - 1) as f64
}

/// The per-tensor range the max-scale quantizer maps onto its extreme level.
pub fn max_scale_range(x: &[f64], signed: bool) -> f64 {
    if signed {
        x.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else {
        x.iter().fold(0.0, |m, &v| m.max(v))
    }
}

/// Nearest-even quantization on the grid implied by `range`, which must cover
/// the inputs that matter. Outputs are `range * level / L`, so an element equal
/// to `range` is reproduced exactly and the quantizer is idempotent.
pub fn quantize_with_range(x: &[f64], range: f64, bits: u32, signed: bool) -> Vec<f64> {
    if bits >= PASS_THROUGH_BITS || range == 0.0 {
        return x.to_vec();
    }
    let top = max_level(bits, signed);
    let bottom = if signed { -top } else { 0.0 };
    x.iter()
        .map(|&v| {
            let level = (v * top / range).round_ties_even().clamp(bottom, top);
            range * (level / top)
        })
        .collect()
}

/// Per-tensor max-scale quantizer with nearest-even rounding.
///
/// Signed: `s = max|x| / (2^(bits-1) - 1)`. Unsigned: negatives clamp to zero and
/// `s = max(x) / (2^bits - 1)`. A zero range or `bits == 32` returns `x`.
pub fn quantize_max_scale(x: &Tensor, bits: u32, signed: bool) -> Result<Tensor> {
    check_bits(bits)?;
    check_input(x.data())?;
    if bits >= PASS_THROUGH_BITS {
        return Ok(x.clone());
    }
    let range = max_scale_range(x.data(), signed);
    if range == 0.0 {
        return Ok(x.clone());
    }
    Tensor::new(x.shape().to_vec(), quantize_with_range(x.data(), range, bits, signed))
}

/// DoReFa-style weight quantizer: `tanh` squashing, normalization to `[0, 1]`,
/// uniform rounding onto `2^bits - 1` steps, and an affine map back to `[-1, 1]`.
pub fn quantize_dorefa_style(w: &Tensor, bits: u32) -> Result<Tensor> {
    check_bits(bits)?;
    check_input(w.data())?;
    Tensor::new(w.shape().to_vec(), dorefa_values(w.data(), bits).0)
}

/// Returns quantized values and the straight-through factor `d out / d w`
/// (rounding treated as identity, the max held constant).
fn dorefa_values(w: &[f64], bits: u32) -> (Vec<f64>, Vec<f64>) {
    let t: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
    let m = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dydx = t
        .iter()
        .map(|&ti| if m > 0.0 { (1.0 - ti * ti) / m } else { 1.0 })
        .collect();
    let out = if bits >= PASS_THROUGH_BITS {
        t.iter().map(|&ti| if m > 0.0 { ti / m } else { 0.0 }).collect()
    } else {
        let steps = max_level(bits, false);
        t.iter()
            .map(|&ti| {
                let unit = if m > 0.0 { ti / (2.0 * m) + 0.5 } else { 0.5 };
                2.0 * ((unit * steps).round_ties_even() / steps) - 1.0
            })
            .collect()
    };
    (out, dydx)
}

/// Signed max-scale grid with stochastic rounding: each value rounds up with
/// probability equal to its fractional position between the two neighbours.
pub fn quantize_gradient_stochastic<R: Rng + ?Sized>(
    g: &Tensor,
    bits: u32,
    rng: &mut R,
) -> Result<Tensor> {
    let out = quantize_stochastic_slice(g.data(), bits, rng)?;
    Tensor::new(g.shape().to_vec(), out)
}

pub fn quantize_stochastic_slice<R: Rng + ?Sized>(
    g: &[f64],
    bits: u32,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_bits(bits)?;
    check_input(g)?;
    if bits >= PASS_THROUGH_BITS {
        return Ok(g.to_vec());
    }
    let range = max_scale_range(g, true);
    if range == 0.0 {
        return Ok(g.to_vec());
    }
    let top = max_level(bits, true);
    Ok(g
        .iter()
        .map(|&v| {
            let pos = v * top / range;
            let nearest = pos.round_ties_even();
            // Values already on the grid must not move.
            let level = if (pos - nearest).abs() <= 1e-9 {
                nearest
            } else {
                let lo = pos.floor();
                if rng.gen::<f64>() < pos - lo {
                    lo + 1.0
                } else {
                    lo
                }
            };
            range * (level.clamp(-top, top) / top)
        })
        .collect())
}

/// Straight-through estimator: pass `upstream` where `lo <= x <= hi`, zero elsewhere.
pub fn ste_backward(upstream: &Tensor, x: &Tensor, clip_range: (f64, f64)) -> Result<Tensor> {
    if upstream.shape() != x.shape() {
        return Err(Error::shape(
            "ste_backward",
            format!("{:?} vs {:?}", upstream.shape(), x.shape()),
        ));
    }
    let (lo, hi) = clip_range;
    let out = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if (lo..=hi).contains(&v) { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), out)
}

/// Records a fake-quantization node: quantized forward, straight-through backward.
pub fn fake_quantize(tape: &mut Tape, x: Var, kind: QuantizerKind, bits: u32) -> Result<Var> {
    check_bits(bits)?;
    let input = tape.value(x);
    if bits >= PASS_THROUGH_BITS && kind != QuantizerKind::DorefaStyle {
        let ones = vec![1.0; input.len()];
        let out = input.clone();
        return tape.straight_through(x, out, ones);
    }
    let (out, dydx) = match kind {
        QuantizerKind::DorefaStyle => dorefa_values(input.data(), bits),
        QuantizerKind::MaxScaleSymmetric | QuantizerKind::MaxScaleUnsigned => {
            let signed = kind == QuantizerKind::MaxScaleSymmetric;
            let range = max_scale_range(input.data(), signed);
            let lo = if signed { -range } else { 0.0 };
            let mask = input
                .data()
                .iter()
                .map(|v| if (lo..=range).contains(v) { 1.0 } else { 0.0 })
                .collect();
            let q = if signed {
                quantize_with_range(input.data(), range, bits, true)
            } else {
                let clamped: Vec<f64> = input.data().iter().map(|&v| v.max(0.0)).collect();
                quantize_with_range(&clamped, range, bits, false)
            };
            (q, mask)
        }
    };
    let out = Tensor::new(input.shape().to_vec(), out)?;
    tape.straight_through(x, out, dydx)
}
