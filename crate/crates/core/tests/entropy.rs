mod common;

use nerfcodec::entropy::{
    decode_stream, encode_stream, ideal_bits, quantize_round, rate_bits, stream_models, DensityModel, FreqTable,
    TOTAL_FREQ,
};
use nerfcodec::param::{Graph, Trainable};
use nerfcodec::autodiff::Tensor;
use nerfcodec::{BitstreamError, CodecError};
use proptest::prelude::*;
use rand::Rng;

fn bits_of(model: &DensityModel, values: &[f64]) -> f64 {
    let none = Trainable::none();
    let mut g: Graph<f64> = Graph::new(&none);
    let x = g.constant(Tensor::new([values.len(), 1], values.to_vec()).unwrap());
    let b = model.bits(&mut g, x).unwrap();
    g.value(b).data()[0]
}

pub fn randomized(seed: u64) -> DensityModel {
    let mut r = common::rng(seed);
    let v: Vec<f32> = (0..DensityModel::param_len()).map(|_| r.random_range(-2.0..2.0)).collect();
    DensityModel::from_vec("m", &v).unwrap()
}

#[test]
fn initial_model_is_symmetric() {
    let m = DensityModel::new("m");
    for x in -20..=20 {
        let (a, b) = (m.mass(x as f64), m.mass(-x as f64));
        assert!((a - b).abs() <= 1e-6, "p({x}) = {a}, p(-{x}) = {b}");
    }
}

#[test]
fn masses_over_any_support_sum_to_at_most_one() {
    for seed in 0..50 {
        let m = randomized(seed);
        let total: f64 = (-200..=200).map(|x| m.mass(x as f64)).sum();
        assert!(total <= 1.0 + 1e-6, "seed {seed}: {total}");
        assert!((-200..=200).all(|x| m.mass(x as f64) >= 0.0));
    }
}

#[test]
fn cumulative_logit_is_nondecreasing() {
    for seed in 0..20 {
        let m = randomized(seed);
        let mut prev = f64::NEG_INFINITY;
        for i in -400..=400 {
            let y = m.logit(i as f64 * 0.25);
            assert!(y >= prev, "seed {seed} at {}", i as f64 * 0.25);
            prev = y;
        }
    }
}

#[test]
fn graph_bits_agree_with_scalar_masses() {
    let m = randomized(3);
    let xs: Vec<f64> = (-6..=6).map(|x| x as f64 * 0.7).collect();
    let want: f64 = xs.iter().map(|&x| -(m.mass(x) + 1e-9).log2()).sum();
    assert!((bits_of(&m, &xs) - want).abs() < 1e-9 * want.max(1.0));
}

#[test]
fn uniform_table_over_256_symbols_costs_eight_bits() {
    let table = FreqTable::from_freqs(vec![TOTAL_FREQ / 256; 256]).unwrap();
    let symbols: Vec<i32> = (0..1000).map(|i| i % 256).collect();
    assert_eq!(ideal_bits(&table, &symbols, 0) / 1000.0, 8.0);
}

#[test]
fn peaked_model_on_zero_matrix_is_nearly_free() {
    let mut m = DensityModel::new("m");
    let w = m.matrices[0].value().map(|_| 190.0);
    m.matrices[0].set(w).unwrap();
    let zeros = vec![0.0; 1000];
    assert!(bits_of(&m, &zeros) / 1000.0 <= 0.01);
}

#[test]
fn doubling_iid_elements_doubles_the_rate() {
    let m = DensityModel::new("m");
    let mut r = common::rng(11);
    for _ in 0..100 {
        let a: Vec<f64> = (0..512).map(|_| r.random_range(-6.0..6.0)).collect();
        let b: Vec<f64> = (0..1024).map(|_| r.random_range(-6.0..6.0)).collect();
        let ratio = bits_of(&m, &b) / bits_of(&m, &a);
        assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
    }
}

#[test]
fn rate_sums_over_streams() {
    let models = stream_models(2);
    let none = Trainable::none();
    let mut g: Graph<f64> = Graph::new(&none);
    let a = g.constant(Tensor::new([1, 2, 2], vec![0.0, 1.0, -2.0, 0.3]).unwrap());
    let b = g.constant(Tensor::new([1, 2, 2], vec![4.0, 0.0, 0.0, 0.0]).unwrap());
    let total = rate_bits(&mut g, &models, &[a, b]).unwrap();
    let want = bits_of(&models[0], &[0.0, 1.0, -2.0, 0.3]) + bits_of(&models[1], &[4.0, 0.0, 0.0, 0.0]);
    assert!((g.value(total).data()[0] - want).abs() < 1e-9);
    assert!(rate_bits(&mut g, &models, &[a]).is_err());
}

#[test]
fn round_half_to_even() {
    let (q, lo, hi) = quantize_round(&[0.5, 1.5, 2.5, -0.5, -1.5, 0.49, -2.6]);
    assert_eq!(q, vec![0, 2, 2, 0, -2, 0, -3]);
    assert_eq!((lo, hi), (-3, 2));
    let (q, lo, hi) = quantize_round(&[0.0; 16]);
    assert!(q.iter().all(|&v| v == 0));
    assert_eq!((lo, hi), (0, 0));
}

#[test]
fn constant_stream_is_tiny() {
    let symbols = vec![7; 10_000];
    let table = DensityModel::new("m").table(7, 7).unwrap();
    let bytes = encode_stream(&symbols, &table, 7, 7).unwrap();
    assert!(bytes.len() <= 30, "{} bytes", bytes.len());
    assert_eq!(decode_stream(&bytes, &table, 7, symbols.len()).unwrap(), symbols);
}

#[test]
fn streams_round_trip_within_the_ideal_length_bound() {
    let mut r = common::rng(5);
    for trial in 0..200 {
        let n = r.random_range(1..3000);
        let spread = r.random_range(0.5..60.0);
        let symbols = common::random_symbols(&mut r, n, spread);
        let (min, max) = (*symbols.iter().min().unwrap(), *symbols.iter().max().unwrap());
        let table = randomized(trial).table(min, max).unwrap();
        let bytes = encode_stream(&symbols, &table, min, max).unwrap();
        assert_eq!(decode_stream(&bytes, &table, min, n).unwrap(), symbols, "trial {trial}");
        let ideal = ideal_bits(&table, &symbols, min) / 8.0;
        assert!(bytes.len() as f64 <= ideal * 1.001 + 64.0, "trial {trial}: {} vs {ideal}", bytes.len());
    }
}

#[test]
fn out_of_support_symbol_is_rejected() {
    let table = DensityModel::new("m").table(-2, 2).unwrap();
    let err = encode_stream(&[0, 3], &table, -2, 2).unwrap_err();
    assert!(matches!(err, CodecError::Bitstream(BitstreamError::OutOfSupport { symbol: 3, .. })));
}

#[test]
fn truncated_stream_is_detected() {
    let mut r = common::rng(9);
    let symbols = common::random_symbols(&mut r, 2000, 30.0);
    let (min, max) = (*symbols.iter().min().unwrap(), *symbols.iter().max().unwrap());
    let table = DensityModel::new("m").table(min, max).unwrap();
    let bytes = encode_stream(&symbols, &table, min, max).unwrap();
    let cut = &bytes[..bytes.len() - 8];
    assert!(decode_stream(cut, &table, min, symbols.len()).is_err());
}

proptest! {
    #[test]
    fn tables_are_positive_and_exact(masses in prop::collection::vec(0.0f64..10.0, 1..2000)) {
        let t = FreqTable::from_masses(&masses).unwrap();
        prop_assert!(t.freqs().iter().all(|&f| f >= 1));
        prop_assert_eq!(t.freqs().iter().map(|&f| f as u64).sum::<u64>(), TOTAL_FREQ as u64);
    }

    #[test]
    fn model_tables_are_positive_and_exact(seed in 0u64..1000, lo in -300i32..0, hi in 0i32..300) {
        let t = randomized(seed).table(lo, hi).unwrap();
        prop_assert_eq!(t.len(), (hi - lo + 1) as usize);
        prop_assert!(t.freqs().iter().all(|&f| f >= 1));
        prop_assert_eq!(t.freqs().iter().map(|&f| f as u64).sum::<u64>(), TOTAL_FREQ as u64);
    }

    #[test]
    fn any_stream_round_trips(symbols in prop::collection::vec(-50i32..50, 0..500), seed in 0u64..100) {
        let table = randomized(seed).table(-50, 49).unwrap();
        let bytes = encode_stream(&symbols, &table, -50, 49).unwrap();
        prop_assert_eq!(decode_stream(&bytes, &table, -50, symbols.len()).unwrap(), symbols);
    }
}
