//! Layer-list models and their fake-quantized forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::cost::{layer_macs, LayerDesc};
use crate::error::{Error, Result};
use crate::quant::{fake_quantize, QuantizerKind, PASS_THROUGH_BITS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    Flatten,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum ModelSpec {
    /// 3 conv + avg-pool + 2 linear, about 156k parameters on 8×8 inputs.
    #[default]
    Cnn,
    /// Three linear layers with relu in between.
    Mlp { hidden: Vec<usize> },
    /// A single linear layer (a linear probe).
    Linear,
    /// Explicit layer list; the last layer must emit one logit per class.
    Custom { layers: Vec<LayerSpec> },
}


impl ModelSpec {
    pub fn mlp() -> Self {
        ModelSpec::Mlp {
            hidden: vec![128, 64],
        }
    }

    pub fn layers(&self, num_classes: usize) -> Vec<LayerSpec> {
        let conv = |filters| LayerSpec::Conv {
            filters,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        match self {
            ModelSpec::Cnn => vec![
                conv(16),
                LayerSpec::Relu,
                conv(32),
                LayerSpec::Relu,
                LayerSpec::AvgPool { kernel: 2 },
                conv(64),
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Linear { out_features: 128 },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    out_features: num_classes,
                },
            ],
            ModelSpec::Mlp { hidden } => {
                let mut layers = vec![LayerSpec::Flatten];
                for &h in hidden {
                    layers.push(LayerSpec::Linear { out_features: h });
                    layers.push(LayerSpec::Relu);
                }
                layers.push(LayerSpec::Linear {
                    out_features: num_classes,
                });
                layers
            }
            ModelSpec::Linear => vec![
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    out_features: num_classes,
                },
            ],
            ModelSpec::Custom { layers } => layers.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv {
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
        in_shape: [usize; 3],
    },
    Linear {
        weight: usize,
        bias: usize,
    },
    Relu,
    AvgPool(usize),
    Flatten,
}

/// How each tensor class is quantized in one forward/backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassPrecision {
    pub weight_bits: u32,
    pub activation_bits: u32,
    pub error_bits: u32,
    pub weight_kind: QuantizerKind,
    pub activation_kind: QuantizerKind,
}

impl PassPrecision {
    pub fn full() -> Self {
        Self {
            weight_bits: PASS_THROUGH_BITS,
            activation_bits: PASS_THROUGH_BITS,
            error_bits: PASS_THROUGH_BITS,
            weight_kind: QuantizerKind::MaxScaleSymmetric,
            activation_kind: QuantizerKind::MaxScaleUnsigned,
        }
    }

    pub fn forward_only(weight_bits: u32, activation_bits: u32, weight_kind: QuantizerKind, activation_kind: QuantizerKind) -> Self {
        Self {
            weight_bits,
            activation_bits,
            error_bits: PASS_THROUGH_BITS,
            weight_kind,
            activation_kind,
        }
    }
}

/// How parameter values group into filters, for filter-wise normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterLayout {
    /// `count` contiguous, equally sized filters (conv weights `[F×C×k×k]`).
    Rows(usize),
    /// One filter per column of a `[in×out]` matrix (linear weights).
    Columns { rows: usize, cols: usize },
    /// Biases: excluded from filter-normalized directions.
    Bias,
}

/// A sequential network. Linear weights are stored `[in×out]`, conv weights
/// `[F×C×k×k]`; biases are never quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    layouts: Vec<FilterLayout>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

impl Model {
    /// Builds the network with Kaiming-uniform fan-in weights and zero biases.
    pub fn build<R: Rng + ?Sized>(
        spec: &ModelSpec,
        input_shape: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::new();
        let mut params = Vec::new();
        let mut layouts = Vec::new();
        let mut push_param = |params: &mut Vec<Tensor>, shape: Vec<usize>, fan_in: Option<usize>| {
            let n: usize = shape.iter().product();
            let data = match fan_in {
                Some(f) => {
                    let bound = (6.0 / f as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                None => vec![0.0; n],
            };
            params.push(Tensor::from_parts_unchecked(shape, data).with_grad());
            params.len() - 1
        };
        for spec in spec.layers(num_classes) {
            match spec {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::Config(format!("conv layer needs a C×H×W input, got {shape:?}")));
                    };
                    let desc = LayerDesc::Conv {
                        batch: 1,
                        in_channels: c,
                        height: h,
                        width: w,
                        filters,
                        kernel,
                        stride,
                        padding,
                    };
                    layer_macs(&desc).map_err(|e| Error::Config(e.to_string()))?;
                    let weight = push_param(&mut params, vec![filters, c, kernel, kernel], Some(c * kernel * kernel));
                    layouts.push(FilterLayout::Rows(filters));
                    let bias = push_param(&mut params, vec![filters], None);
                    layouts.push(FilterLayout::Bias);
                    layers.push(Layer::Conv {
                        weight,
                        bias,
                        stride,
                        padding,
                        in_shape: [c, h, w],
                    });
                    let out = |d: usize| (d + 2 * padding - kernel) / stride + 1;
                    shape = vec![filters, out(h), out(w)];
                }
                LayerSpec::Linear { out_features } => {
                    let [inputs] = shape[..] else {
                        return Err(Error::Config(format!(
                            "linear layer needs a flat input, got {shape:?}; add a flatten layer"
                        )));
                    };
                    let weight = push_param(&mut params, vec![inputs, out_features], Some(inputs));
                    layouts.push(FilterLayout::Columns {
                        rows: inputs,
                        cols: out_features,
                    });
                    let bias = push_param(&mut params, vec![out_features], None);
                    layouts.push(FilterLayout::Bias);
                    layers.push(Layer::Linear { weight, bias });
                    shape = vec![out_features];
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::AvgPool { kernel } => {
                    if shape.len() != 3 || kernel == 0 || shape[1] < kernel || shape[2] < kernel {
                        return Err(Error::Config(format!("cannot pool {shape:?} by {kernel}")));
                    }
                    shape = vec![shape[0], shape[1] / kernel, shape[2] / kernel];
                    layers.push(Layer::AvgPool(kernel));
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    layers.push(Layer::Flatten);
                }
            }
        }
        if shape != [num_classes] {
            return Err(Error::Config(format!(
                "model emits {shape:?}, expected {num_classes} logits"
            )));
        }
        Ok(Self {
            layers,
            params,
            layouts,
            input_shape: input_shape.to_vec(),
            num_classes,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn filter_layouts(&self) -> &[FilterLayout] {
        &self.layouts
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("set_params", "parameter shapes differ from the model"));
        }
        self.params = params
            .into_iter()
            .map(|mut p| {
                p.requires_grad = true;
                p
            })
            .collect();
        Ok(())
    }

    /// Cost-model descriptions of the MAC-bearing layers for a batch.
    pub fn layer_descs(&self, batch: usize) -> Vec<LayerDesc> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                Layer::Conv {
                    weight,
                    stride,
                    padding,
                    in_shape: [c, h, w],
                    ..
                } => {
                    let s = self.params[weight].shape();
                    Some(LayerDesc::Conv {
                        batch,
                        in_channels: c,
                        height: h,
                        width: w,
                        filters: s[0],
                        kernel: s[2],
                        stride,
                        padding,
                    })
                }
                Layer::Linear { weight, .. } => {
                    let s = self.params[weight].shape();
                    Some(LayerDesc::Linear {
                        batch,
                        in_features: s[0],
                        out_features: s[1],
                    })
                }
                _ => None,
            })
            .collect()
    }

    pub fn macs(&self, batch: usize) -> u64 {
        self.layer_descs(batch)
            .iter()
            .map(|d| layer_macs(d).expect("validated at build"))
            .sum()
    }

    /// Records the forward pass on `tape`. Returns the logits and the tape
    /// handles of every parameter, in [`Model::params`] order.
    ///
    /// Each conv/linear layer quantizes its input (activation class) and weight,
    /// and marks its output for error quantization. The raw network input uses
    /// the signed grid when it contains negative values.
    pub fn forward(&self, tape: &mut Tape, input: Var, precision: &PassPrecision) -> Result<(Var, Vec<Var>)> {
        let param_vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p))
            .collect::<Result<Vec<_>>>()?;
        let mut x = input;
        let mut first = true;
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    padding,
                    ..
                } => {
                    let a = self.quantize_input(tape, x, precision, first)?;
                    let w = fake_quantize(tape, param_vars[weight], precision.weight_kind, precision.weight_bits)?;
                    let y = tape.conv2d(a, w, stride, padding)?;
                    let y = self.mark_error(tape, y, precision)?;
                    first = false;
                    tape.add_bias(y, param_vars[bias])?
                }
                Layer::Linear { weight, bias } => {
                    let a = self.quantize_input(tape, x, precision, first)?;
                    let w = fake_quantize(tape, param_vars[weight], precision.weight_kind, precision.weight_bits)?;
                    let y = tape.matmul(a, w)?;
                    let y = self.mark_error(tape, y, precision)?;
                    first = false;
                    tape.add_bias(y, param_vars[bias])?
                }
                Layer::Relu => tape.relu(x)?,
                Layer::AvgPool(k) => tape.avgpool2d(x, k)?,
                Layer::Flatten => tape.flatten(x)?,
            };
        }
        Ok((x, param_vars))
    }

    fn quantize_input(&self, tape: &mut Tape, x: Var, p: &PassPrecision, first: bool) -> Result<Var> {
        let kind = if first
            && p.activation_kind == QuantizerKind::MaxScaleUnsigned
            && tape.value(x).data().iter().any(|&v| v < 0.0)
        {
            QuantizerKind::MaxScaleSymmetric
        } else {
            p.activation_kind
        };
        fake_quantize(tape, x, kind, p.activation_bits)
    }

    fn mark_error(&self, tape: &mut Tape, y: Var, p: &PassPrecision) -> Result<Var> {
        if p.error_bits >= PASS_THROUGH_BITS {
            Ok(y)
        } else {
            tape.quantize_error(y, p.error_bits)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cnn_preset_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::build(&ModelSpec::Cnn, &[1, 8, 8], 10, &mut rng).unwrap();
        let n = m.num_params();
        assert!((140_000..170_000).contains(&n), "{n} params");
        assert_eq!(m.layer_descs(1).len(), 5);
        // 16·9·64 + 32·16·9·64 + 64·32·9·16 + 1024·128 + 128·10
        assert_eq!(m.macs(1), 9_216 + 294_912 + 294_912 + 131_072 + 1_280);
    }

    #[test]
    fn kaiming_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::build(&ModelSpec::mlp(), &[20], 3, &mut rng).unwrap();
        let bound = (6.0f64 / 20.0).sqrt();
        assert!(m.params()[0].data().iter().all(|v| v.abs() <= bound));
        assert!(m.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bad = ModelSpec::Custom {
            layers: vec![LayerSpec::Linear { out_features: 3 }],
        };
        assert!(Model::build(&bad, &[1, 4, 4], 3, &mut rng).is_err());
        let wrong_out = ModelSpec::Custom {
            layers: vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 4 }],
        };
        assert!(Model::build(&wrong_out, &[1, 4, 4], 3, &mut rng).is_err());
    }

    #[test]
    fn forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::build(&ModelSpec::Cnn, &[1, 8, 8], 10, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::new(vec![3, 1, 8, 8], (0..192).map(|v| v as f64 / 192.0).collect()).unwrap())
            .unwrap();
        let (logits, vars) = m.forward(&mut tape, x, &PassPrecision::full()).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, 10]);
        assert_eq!(vars.len(), m.params().len());
    }
}
