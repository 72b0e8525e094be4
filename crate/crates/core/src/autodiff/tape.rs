use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeometry};
use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};
use crate::quant;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        filters: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Relu(Var),
    AvgPool2d {
        x: Var,
        kernel: usize,
    },
    Reshape(Var),
    Sum(Var),
    /// Value replaced by the caller, gradient scaled elementwise by `dydx`.
    StraightThrough {
        x: Var,
        dydx: Vec<f64>,
    },
    /// Identity forward; the incoming gradient is quantized on the way back.
    QuantizeError {
        x: Var,
        bits: u32,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

/// Linear record of executed operations for reverse-mode differentiation.
///
/// A tape supports exactly one backward pass; a second call fails with
/// [`Error::TapeConsumed`] until [`Tape::reset`] is called.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    state: State,
    rng: Option<ChaCha8Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            state: State::Recording,
            rng: None,
        }
    }

    /// A tape whose backward pass may use stochastic rounding for error tensors.
    pub fn with_rng(rng: ChaCha8Rng) -> Self {
        Self {
            rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.state = State::Recording;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.state == State::Consumed {
            return Err(Error::TapeConsumed);
        }
        check_finite("forward value", value.data())?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a copy of `t`; gradients flow to it when `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), t.data().to_vec());
        self.push(value, Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), t.into_data());
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_parts_unchecked(vec![m, n], out),
            Op::MatMul { a, b },
            needs,
        )
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[F×C×kH×kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let geom = conv_geometry(sx, sw, stride, padding)?;
        let filters = sw[0];
        let cols = kernels::im2col(&geom, self.value(x).data());
        let np = geom.batch * geom.out_pixels();
        let mut tmp = vec![0.0; filters * np];
        kernels::gemm_nn(filters, geom.patch_len(), np, self.value(w).data(), &cols, &mut tmp);
        let out = channels_first(&tmp, filters, geom.batch, geom.out_pixels());
        let needs = self.needs(x) || self.needs(w);
        self.push(
            Tensor::from_parts_unchecked(vec![geom.batch, filters, geom.out_h, geom.out_w], out),
            Op::Conv2d {
                x,
                w,
                geom,
                filters,
            },
            needs,
        )
    }

    /// Adds `bias[C]` along dimension 1 of `x[N×C×…]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape();
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b[i % sx[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(
            Tensor::from_parts_unchecked(sx, out),
            Op::AddBias { x, bias },
            needs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts_unchecked(shape, out), Op::Relu(x), needs)
    }

    /// Non-overlapping average pooling with a square window (stride = kernel).
    pub fn avgpool2d(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || kernel == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::shape("avgpool2d", format!("{s:?} with kernel {kernel}")));
        }
        let (oh, ow) = (s[2] / kernel, s[3] / kernel);
        let data = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        let inv = 1.0 / (kernel * kernel) as f64;
        for (plane_idx, plane) in data.chunks(s[2] * s[3]).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += plane[(oy * kernel + ky) * s[3] + ox * kernel + kx];
                        }
                    }
                    out[plane_idx * oh * ow + oy * ow + ox] = acc * inv;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_parts_unchecked(vec![s[0], s[1], oh, ow], out),
            Op::AvgPool2d { x, kernel },
            needs,
        )
    }

    /// Collapses all dimensions after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let shape = vec![s[0], s[1..].iter().product()];
        self.reshape(x, shape)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_parts_unchecked(shape, data), Op::Reshape(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::from_parts_unchecked(vec![1], vec![total]), Op::Sum(x), needs)
    }

    /// Replaces the value of `x` with `out` while routing gradients through the
    /// elementwise factor `dydx` (the straight-through estimator).
    pub fn straight_through(&mut self, x: Var, out: Tensor, dydx: Vec<f64>) -> Result<Var> {
        let xs = self.value(x).shape();
        if out.shape() != xs || dydx.len() != out.len() {
            return Err(Error::shape(
                "straight_through",
                format!("input {xs:?}, output {:?}", out.shape()),
            ));
        }
        let needs = self.needs(x);
        self.push(out, Op::StraightThrough { x, dydx }, needs)
    }

    /// Identity in the forward pass; the gradient arriving here is quantized to
    /// `bits` with stochastic rounding before propagating further.
    pub fn quantize_error(&mut self, x: Var, bits: u32) -> Result<Var> {
        quant::check_bits(bits)?;
        if bits < quant::PASS_THROUGH_BITS && self.rng.is_none() {
            return Err(Error::Invalid(
                "error quantization needs a tape created with an rng".into(),
            ));
        }
        let t = self.value(x);
        let value = Tensor::from_parts_unchecked(t.shape().to_vec(), t.data().to_vec());
        let needs = self.needs(x);
        self.push(value, Op::QuantizeError { x, bits }, needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() - (row[labels[i]] - max);
        }
        loss /= n as f64;
        let needs = self.needs(logits);
        self.push(
            Tensor::from_parts_unchecked(vec![1], vec![loss]),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.state == State::Consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        self.state = State::Consumed;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &upstream)?;
            self.grads[idx] = Some(upstream);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                check_finite(&format!("gradient of node {i}"), g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&mut self, idx: usize, up: &[f64]) -> Result<()> {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let result = self.backward_op(&op, up);
        self.nodes[idx].op = op;
        result
    }

    fn backward_op(&mut self, op: &Op, up: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, up, self.value(b).data(), &mut da);
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm_tn(k, m, n, self.value(a).data(), up, &mut db);
                    self.accumulate(b, db);
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                filters,
            } => {
                let (x, w, geom, f) = (*x, *w, *geom, *filters);
                let np = geom.batch * geom.out_pixels();
                let up_cf = batch_first_inverse(up, f, geom.batch, geom.out_pixels());
                if self.needs(w) {
                    let cols = kernels::im2col(&geom, self.value(x).data());
                    let mut dw = vec![0.0; f * geom.patch_len()];
                    kernels::gemm_nt(f, np, geom.patch_len(), &up_cf, &cols, &mut dw);
                    self.accumulate(w, dw);
                }
                if self.needs(x) {
                    let mut dcols = vec![0.0; geom.patch_len() * np];
                    kernels::gemm_tn(geom.patch_len(), f, np, self.value(w).data(), &up_cf, &mut dcols);
                    let mut dx = vec![0.0; self.value(x).len()];
                    kernels::col2im(&geom, &dcols, &mut dx);
                    self.accumulate(x, dx);
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let s = self.value(x).shape();
                let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                if self.needs(bias) {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in up.chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(bias, db);
                }
                self.accumulate(x, up.to_vec());
            }
            Op::Relu(x) => {
                let x = *x;
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::AvgPool2d { x, kernel } => {
                let (x, kernel) = (*x, *kernel);
                let s = self.value(x).shape().to_vec();
                let (oh, ow) = (s[2] / kernel, s[3] / kernel);
                let inv = 1.0 / (kernel * kernel) as f64;
                let mut dx = vec![0.0; self.value(x).len()];
                for (plane_idx, plane) in dx.chunks_mut(s[2] * s[3]).enumerate() {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = up[plane_idx * oh * ow + oy * ow + ox] * inv;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    plane[(oy * kernel + ky) * s[3] + ox * kernel + kx] += g;
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accumulate(x, up.to_vec());
            }
            Op::Sum(x) => {
                let x = *x;
                let n = self.value(x).len();
                self.accumulate(x, vec![up[0]; n]);
            }
            Op::StraightThrough { x, dydx } => {
                let x = *x;
                let dx = dydx.iter().zip(up).map(|(d, g)| d * g).collect();
                self.accumulate(x, dx);
            }
            Op::QuantizeError { x, bits } => {
                let (x, bits) = (*x, *bits);
                let dx = if bits >= quant::PASS_THROUGH_BITS {
                    up.to_vec()
                } else {
                    let rng = self.rng.as_mut().expect("checked when recorded");
                    quant::quantize_stochastic_slice(up, bits, rng)?
                };
                self.accumulate(x, dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let logits = *logits;
                let k = self.value(logits).shape()[1];
                let scale = up[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(logits, d);
            }
        }
        Ok(())
    }
}

fn conv_geometry(sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
    let (h, w) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
    if sw[2] > h || sw[3] > w {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} larger than padded input {h}x{w}", sw[2], sw[3]),
        ));
    }
    Ok(ConvGeometry {
        batch: sx[0],
        channels: sx[1],
        height: sx[2],
        width: sx[3],
        kernel_h: sw[2],
        kernel_w: sw[3],
        stride,
        padding,
        out_h: (h - sw[2]) / stride + 1,
        out_w: (w - sw[3]) / stride + 1,
    })
}

/// `[F × N·P]` -> `[N × F × P]`
fn channels_first(tmp: &[f64], filters: usize, batch: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; tmp.len()];
    for f in 0..filters {
        for n in 0..batch {
            out[(n * filters + f) * pixels..][..pixels]
                .copy_from_slice(&tmp[f * batch * pixels + n * pixels..][..pixels]);
        }
    }
    out
}

/// `[N × F × P]` -> `[F × N·P]`
fn batch_first_inverse(up: &[f64], filters: usize, batch: usize, pixels: usize) -> Vec<f64> {
    let mut out = vec![0.0; up.len()];
    for n in 0..batch {
        for f in 0..filters {
            out[f * batch * pixels + n * pixels..][..pixels]
                .copy_from_slice(&up[(n * filters + f) * pixels..][..pixels]);
        }
    }
    out
}
