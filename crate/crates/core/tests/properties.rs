mod common;

use common::*;
use cptlab::autodiff::Tensor;
use cptlab::harness::data::{encode_idx_images, encode_idx_labels, parse_idx_images, read_csv};
use cptlab::harness::train::evaluate;
use cptlab::harness::{ingest_dataset, DatasetSpec, ModelSpec, TrainConfig, Trainer};
use cptlab::quant::{quantize_dorefa_style, quantize_max_scale, quantize_with_range};
use cptlab::schedule::{LrSchedule, Pattern, PrecisionSchedule};
use proptest::prelude::*;
use std::sync::Arc;

proptest! {
    #[test]
    fn max_scale_idempotent_and_bounded(
        data in proptest::collection::vec(-100.0f64..100.0, 1..64),
        bits in 2u32..=16,
        signed: bool,
    ) {
        let data: Vec<f64> = if signed { data } else { data.iter().map(|v| v.abs()).collect() };
        let x = Tensor::new(vec![data.len()], data.clone()).unwrap();
        let q = quantize_max_scale(&x, bits, signed).unwrap();
        prop_assert_eq!(&quantize_max_scale(&q, bits, signed).unwrap(), &q);
        let range = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let levels = if signed { (1u64 << (bits - 1)) - 1 } else { (1u64 << bits) - 1 } as f64;
        for (a, b) in data.iter().zip(q.data()) {
            prop_assert!((a - b).abs() <= 0.5 * range / levels * (1.0 + 1e-12));
        }
    }

    #[test]
    fn fixed_range_quantizer_is_monotone(
        a in -5.0f64..5.0, b in -5.0f64..5.0, bits in 2u32..=12,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let q = quantize_with_range(&[lo, hi], 5.0, bits, true);
        prop_assert!(q[0] <= q[1]);
    }

    #[test]
    fn dorefa_stays_in_unit_interval_and_is_odd_without_ties(
        data in proptest::collection::vec(-3.0f64..3.0, 1..32),
        bits in 2u32..=8,
    ) {
        let x = Tensor::new(vec![data.len()], data.clone()).unwrap();
        let q = quantize_dorefa_style(&x, bits).unwrap();
        prop_assert!(q.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // Odd symmetry holds when no normalized value sits on a rounding tie.
        let m = data.iter().map(|v| v.tanh().abs()).fold(0.0, f64::max);
        let steps = ((1u64 << bits) - 1) as f64;
        let tie_free = m > 0.0 && data.iter().all(|v| {
            let u = (v.tanh() / (2.0 * m) + 0.5) * steps;
            (u - u.floor() - 0.5).abs() > 1e-6
        });
        if tie_free {
            let neg = Tensor::new(vec![data.len()], data.iter().map(|v| -v).collect()).unwrap();
            let qn = quantize_dorefa_style(&neg, bits).unwrap();
            for (p, n) in q.data().iter().zip(qn.data()) {
                prop_assert!((p + n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_schedule_matches_oracle(
        b_min in 2u32..=8, span in 0u32..=6, period in 1usize..=40, cycles in 1usize..=5, t in 0usize..200,
    ) {
        let b_max = (b_min + span).min(8);
        let total = period * cycles;
        prop_assume!(t < total);
        let s = PrecisionSchedule::cosine(b_min, b_max, total, cycles).unwrap();
        prop_assert_eq!(s.bits_at(t).unwrap(), oracle_bits(b_min, b_max, period, t));
    }
}

#[test]
fn quantizer_property_sweep() {
    check_quantizer_properties(17, 300).unwrap();
}

#[test]
fn stochastic_rounding_is_unbiased() {
    let values = [0.3, -0.71, 0.05, 0.999, -1.0, 0.5];
    let sig = stochastic_bias_sigmas(&values, 4, 100_000, 3);
    assert!(sig < 3.0, "{sig} sigma");
}

#[test]
fn every_pattern_stays_in_bounds() {
    for pattern in [
        Pattern::Cosine,
        Pattern::Triangular,
        Pattern::CosineAnneal,
        Pattern::Progressive,
    ] {
        let s = PrecisionSchedule::new(3, 8, 40, 4, pattern).unwrap();
        let table = s.table();
        let start = if pattern == Pattern::CosineAnneal { 8 } else { 3 };
        assert_eq!(table[0], start, "{pattern}");
        assert!(table.iter().all(|b| (3..=8).contains(b)), "{pattern}: {table:?}");
        assert!(table.contains(&8) && table.contains(&3), "{pattern}: {table:?}");
    }
}

#[test]
fn idx_ten_images_of_784_bytes() {
    let pixels: Vec<u8> = (0..10 * 28 * 28).map(|i| (i % 251) as u8).collect();
    let bytes = encode_idx_images(28, 28, &pixels);
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    let (n, r, c, px) = parse_idx_images(&bytes).unwrap();
    assert_eq!((n, r, c), (10, 28, 28));
    assert_eq!(px.len(), 10 * 784);
    assert_eq!(&encode_idx_labels(&[1, 2])[..4], &[0, 0, 8, 1]);
}

#[test]
fn csv_row_count_is_dataset_length() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    let mut text = String::from("label,a,b\n");
    for i in 0..37 {
        text.push_str(&format!("{},{}.5,{}\n", i % 3, i, -i));
    }
    std::fs::write(&p, text).unwrap();
    assert_eq!(read_csv(&p, None).unwrap().len(), 37);
}

/// Brute force: a linear model trained at a fixed bitwidth on the k = 4 data.
fn bit_gated_probe(bits: u32) -> f64 {
    let mut cfg = TrainConfig {
        epochs: 6,
        batch_size: 256,
        model: ModelSpec::Linear,
        data: DatasetSpec::BitGated {
            k: 4,
            train_size: 256 * 40,
            test_size: 2000,
            seed: 9,
        },
        lr: LrSchedule::constant(0.3, 6).unwrap(),
        ..TrainConfig::default()
    };
    cfg.precision.pattern = Pattern::Static;
    cfg.precision.num_cycles = 1;
    cfg.precision.b_min = bits;
    cfg.precision.b_max = bits;
    let data = Arc::new(ingest_dataset(&cfg.data).unwrap());
    let mut t = Trainer::with_data(cfg, data.clone()).unwrap();
    t.run().unwrap();
    evaluate(t.model(), &data.test, bits).unwrap()
}

#[test]
fn bit_gated_needs_k_bits() {
    let low = bit_gated_probe(3);
    let high = bit_gated_probe(4);
    // 2000 balanced test samples: chance is exactly 50%, 3 sigma is about 3.4 points.
    assert!((low - 50.0).abs() <= 3.4, "3-bit accuracy {low}");
    assert!(high > 90.0, "4-bit accuracy {high}");
}
