#![allow(dead_code)]

use cptlab::autodiff::{Tape, Tensor, Var};
use cptlab::harness::{Model, ModelSpec, PassPrecision};
use cptlab::quant::{fake_quantize, quantize_max_scale, quantize_stochastic_slice, QuantizerKind};
use cptlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn random_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar probe `sum(op(inputs) · R)` for a fixed random `R`.
fn probe_loss<F>(tape: &mut Tape, op: &F, inputs: &[Var], weights: &Tensor) -> Result<Var>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let out = op(tape, inputs)?;
    let n = tape.value(out).len();
    if n == 1 && tape.value(out).shape().len() == 1 {
        return Ok(out);
    }
    let flat = tape.reshape(out, vec![1, n])?;
    let r = tape.constant(Tensor::new(vec![n, 1], weights.data()[..n].to_vec()).unwrap())?;
    let y = tape.matmul(flat, r)?;
    tape.sum(y)
}

/// Largest relative error between backward-pass gradients and central
/// differences over every input element.
pub fn max_grad_error<F>(op: F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = random_tensor(&mut rng, &[4096]);
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::with_rng(ChaCha8Rng::seed_from_u64(0));
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x).unwrap()).collect();
        let l = probe_loss(&mut tape, &op, &vars, &weights).unwrap();
        tape.value(l).data()[0]
    };
    let with_grad: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut tape = Tape::with_rng(ChaCha8Rng::seed_from_u64(0));
    let vars: Vec<Var> = with_grad.iter().map(|x| tape.leaf(x).unwrap()).collect();
    let l = probe_loss(&mut tape, &op, &vars, &weights).unwrap();
    tape.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("input receives a gradient").to_vec();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Direct evaluation of the cyclic cosine schedule:
/// `b_min + (b_max - b_min) * sin^2(pi * phase / (2T))`, rounded half to even.
pub fn oracle_bits(b_min: u32, b_max: u32, period: usize, t: usize) -> u32 {
    let phase = (t % period) as f64;
    let s = (std::f64::consts::PI * phase / (2.0 * period as f64)).sin();
    let v = b_min as f64 + (b_max - b_min) as f64 * s * s;
    let r = v.round();
    // Ties to even, allowing for the float error of sin^2 near a half.
    let lower = v.floor();
    if (v - lower - 0.5).abs() < 1e-9 {
        if (lower as u64).is_multiple_of(2) {
            lower as u32
        } else {
            lower as u32 + 1
        }
    } else {
        r as u32
    }
}

fn dense_signed(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

/// Checks idempotence, the half-step bound, order preservation and
/// bits-monotone error on random tensors. Returns a failure description.
pub fn check_quantizer_properties(seed: u64, trials: usize) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let n = rng.gen_range(2..200);
        let signed = rng.gen::<bool>();
        let bits = rng.gen_range(2..=16);
        let mut data = dense_signed(&mut rng, n);
        if !signed {
            data.iter_mut().for_each(|v| *v = v.abs());
        }
        let x = Tensor::new(vec![n], data.clone()).unwrap();
        let q = quantize_max_scale(&x, bits, signed).unwrap();
        let qq = quantize_max_scale(&q, bits, signed).unwrap();
        if q != qq {
            return Err(format!("trial {trial}: not idempotent at {bits} bits"));
        }
        let range = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let levels = if signed {
            (1u64 << (bits - 1)) - 1
        } else {
            (1u64 << bits) - 1
        } as f64;
        let half_step = 0.5 * range / levels;
        for (a, b) in data.iter().zip(q.data()) {
            if (a - b).abs() > half_step * (1.0 + 1e-12) {
                return Err(format!("trial {trial}: |{a} - {b}| exceeds half step {half_step}"));
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| data[i].total_cmp(&data[j]));
        for w in order.windows(2) {
            if q.data()[w[0]] > q.data()[w[1]] {
                return Err(format!("trial {trial}: order not preserved"));
            }
        }
    }
    // Bits-monotone error holds in aggregate on dense tensors, where each
    // added bit halves the step.
    for trial in 0..trials {
        let data = dense_signed(&mut rng, 512);
        let x = Tensor::new(vec![512], data.clone()).unwrap();
        let mut prev = f64::INFINITY;
        for bits in 2..=16 {
            let q = quantize_max_scale(&x, bits, true).unwrap();
            let err: f64 = data.iter().zip(q.data()).map(|(a, b)| (a - b).powi(2)).sum();
            if err > prev {
                return Err(format!("trial {trial}: error grew from {prev} to {err} at {bits} bits"));
            }
            prev = err;
        }
    }
    Ok(())
}

/// Mean of `draws` stochastic roundings of each value against its input;
/// returns the largest deviation in standard errors.
pub fn stochastic_bias_sigmas(values: &[f64], bits: u32, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for _ in 0..draws {
        let q = quantize_stochastic_slice(values, bits, &mut rng).unwrap();
        for i in 0..n {
            sum[i] += q[i];
            sum_sq[i] += q[i] * q[i];
        }
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        let mean = sum[i] / draws as f64;
        let var = (sum_sq[i] / draws as f64 - mean * mean).max(0.0);
        let se = (var / draws as f64).sqrt();
        let dev = (mean - values[i]).abs();
        let sig = if se > 0.0 { dev / se } else if dev < 1e-12 { 0.0 } else { f64::INFINITY };
        worst = worst.max(sig);
    }
    worst
}

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub op: OpFn,
    pub inputs: Vec<Tensor>,
}

/// One case per differentiable op (plus both conv geometries and the
/// pass-through quantizers).
pub fn gradient_cases() -> Vec<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut cases = Vec::new();
    let mut add = |name, op: OpFn, inputs| cases.push(GradCase { name, op, inputs });
    let x4 = random_tensor(&mut r, &[2, 3, 4, 4]);
    add("matmul", Box::new(|t, v| t.matmul(v[0], v[1])), vec![random_tensor(&mut r, &[3, 4]), random_tensor(&mut r, &[4, 5])]);
    let cx = random_tensor(&mut r, &[2, 2, 5, 5]);
    let cw = random_tensor(&mut r, &[3, 2, 3, 3]);
    add("conv2d stride 1 pad 1", Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)), vec![cx.clone(), cw.clone()]);
    add("conv2d stride 2 pad 0", Box::new(|t, v| t.conv2d(v[0], v[1], 2, 0)), vec![cx, cw]);
    add("add_bias 4d", Box::new(|t, v| t.add_bias(v[0], v[1])), vec![x4.clone(), random_tensor(&mut r, &[3])]);
    add("add_bias 2d", Box::new(|t, v| t.add_bias(v[0], v[1])), vec![random_tensor(&mut r, &[4, 6]), random_tensor(&mut r, &[6])]);
    add("relu", Box::new(|t, v| t.relu(v[0])), vec![random_tensor_off_zero(&mut r, &[2, 3, 4, 4])]);
    add("avgpool2d", Box::new(|t, v| t.avgpool2d(v[0], 2)), vec![x4.clone()]);
    add("flatten", Box::new(|t, v| t.flatten(v[0])), vec![x4.clone()]);
    add("reshape", Box::new(|t, v| t.reshape(v[0], vec![6, 16])), vec![x4.clone()]);
    add("sum", Box::new(|t, v| t.sum(v[0])), vec![x4]);
    add(
        "softmax_cross_entropy",
        Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 1, 1, 2])),
        vec![random_tensor(&mut r, &[5, 4])],
    );
    let q = random_tensor(&mut r, &[3, 4]);
    add("quantize_error at 32 bits", Box::new(|t, v| t.quantize_error(v[0], 32)), vec![q.clone()]);
    add(
        "fake_quantize at 32 bits",
        Box::new(|t, v| fake_quantize(t, v[0], QuantizerKind::MaxScaleSymmetric, 32)),
        vec![q],
    );
    cases
}

/// Finite differences through the whole CNN at full precision, 24 elements
/// of every parameter tensor.
pub fn network_grad_error() -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let model = Model::build(&ModelSpec::Cnn, &[1, 8, 8], 3, &mut r).unwrap();
    let x = random_tensor(&mut r, &[2, 1, 8, 8]);
    let labels = [1, 2];
    let loss_at = |m: &Model| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone()).unwrap();
        let (lg, _) = m.forward(&mut t, xv, &PassPrecision::full()).unwrap();
        let l = t.softmax_cross_entropy(lg, &labels).unwrap();
        t.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let (logits, pv) = model.forward(&mut tape, xv, &PassPrecision::full()).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &labels).unwrap();
    tape.backward(loss).unwrap();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, p) in model.params().iter().enumerate() {
        let analytic = tape.grad(pv[i]).unwrap().to_vec();
        let stride = (p.len() / 24).max(1);
        for j in (0..p.len()).step_by(stride) {
            let orig = p.data()[j];
            probe.params_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&probe);
            probe.params_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&probe);
            probe.params_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}
