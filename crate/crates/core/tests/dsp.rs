use std::f64::consts::PI;

use css_core::audio::AudioBuffer;
use css_core::dsp::{
    compute_features, feature_dim, ipd, istft, raw_features, sqrt_hann, stft, wrap_phase, Spectrogram,
};
use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Largest error away from the first and last window, where a single frame covers the signal.
fn interior_error<T: css_core::Float>(x: &[f64], y: &[T], window: usize) -> f64 {
    (window..x.len() - window)
        .map(|i| (x[i] - y[i].to_f64().unwrap()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn round_trip_is_exact_in_the_interior() {
    let x = noise(1, 16_000);
    let spec = stft(&AudioBuffer::mono(x.clone()), 512, 256).unwrap();
    let y = istft(&spec).unwrap();
    assert!(interior_error(&x, y.channel(0), 512) < 1e-6);

    let x32 = AudioBuffer::mono(x.iter().map(|&v| v as f32).collect::<Vec<_>>());
    let y32 = istft(&stft(&x32, 512, 256).unwrap()).unwrap();
    assert!(interior_error(&x, y32.channel(0), 512) < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn round_trip_holds_for_any_length_and_window(seed in 0u64..1000, log2 in 3u32..10, extra in 0usize..3000) {
        let n = 1usize << log2;
        let x = noise(seed, 3 * n + extra);
        let y = istft(&stft(&AudioBuffer::mono(x.clone()), n, n / 2).unwrap()).unwrap();
        prop_assert_eq!(y.len(), (x.len() - n) / (n / 2) * (n / 2) + n);
        let err = (n..y.len() - n).map(|i| (x[i] - y.channel(0)[i]).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9);
    }
}

#[test]
fn frames_match_a_direct_dft() {
    let n = 64;
    let x = noise(2, 4 * n);
    let spec = stft(&AudioBuffer::mono(x.clone()), n, n / 2).unwrap();
    let w: Vec<f64> = (0..n).map(|i| (0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt()).collect();
    assert_eq!(sqrt_hann::<f64>(n), w);
    for frame in [0, 3, spec.frames() - 1] {
        for k in 0..=n / 2 {
            let direct: Complex<f64> = (0..n)
                .map(|i| Complex::from_polar(x[frame * n / 2 + i] * w[i], -2.0 * PI * (k * i) as f64 / n as f64))
                .sum();
            assert!((direct - spec.at(0, frame, k)).norm() < 1e-10);
        }
    }
}

#[test]
fn squared_window_overlaps_to_one() {
    for n in [8, 64, 512] {
        let w = sqrt_hann::<f64>(n);
        for i in 0..n / 2 {
            assert!((w[i] * w[i] + w[i + n / 2] * w[i + n / 2] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn feature_dimension_per_microphone_count() {
    assert_eq!(feature_dim(257, 1), 257);
    assert_eq!(feature_dim(257, 2), 771);
    assert_eq!(feature_dim(257, 7), 3341);
    for c in [1, 2, 7] {
        let audio = AudioBuffer::new((0..c).map(|i| noise(i as u64, 2048)).collect(), 16_000).unwrap();
        let f = compute_features(&stft(&audio, 512, 256).unwrap());
        assert_eq!(f.dim(), feature_dim(257, c));
        assert_eq!(f.frames(), 7);
    }
}

/// Channel 2 is channel 1 advanced through a fractional delay of `d` samples, bin by bin.
fn delayed_pair(d: f64, n: usize) -> Spectrogram<f64> {
    let x = noise(3, 8 * n);
    let reference = stft(&AudioBuffer::mono(x), n, n / 2).unwrap();
    let bins = reference.bins();
    let mut values = reference.values().to_vec();
    let delayed: Vec<Complex<f64>> = reference
        .values()
        .iter()
        .enumerate()
        .map(|(i, &y)| y * Complex::from_polar(1.0, -2.0 * PI * (i % bins) as f64 * d / n as f64))
        .collect();
    values.extend(delayed);
    Spectrogram::new(values, 2, reference.frames(), n, n / 2).unwrap()
}

#[test]
fn ipd_of_a_delay_is_linear_phase() {
    let n = 512;
    for d in [0.0, 0.37, 1.0, 2.5, -3.2] {
        let spec = delayed_pair(d, n);
        let phase = ipd(&spec, 1).unwrap();
        let raw = raw_features(&spec);
        let bins = spec.bins();
        for t in 0..spec.frames() {
            for f in 0..bins {
                let expected = wrap_phase(-2.0 * PI * f as f64 * d / n as f64);
                let got = phase[t * bins + f];
                let diff = wrap_phase(got - expected).abs();
                assert!(diff < 1e-6, "d={d} t={t} f={f}: {got} vs {expected}");
                assert!((raw.get2(t, bins + f) - expected.cos()).abs() < 1e-6);
                assert!((raw.get2(t, 2 * bins + f) - expected.sin()).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn time_domain_delay_gives_linear_phase_on_bin_centred_tones() {
    let n = 512;
    let d = 3usize;
    for k in [8usize, 40, 100, 200] {
        let len = 6 * n;
        let tone = |shift: usize| -> Vec<f64> {
            (0..len).map(|i| (2.0 * PI * k as f64 * (i as f64 - shift as f64) / n as f64).cos()).collect()
        };
        let audio = AudioBuffer::new(vec![tone(0), tone(d)], 16_000).unwrap();
        let spec = stft(&audio, n, n / 2).unwrap();
        let phase = ipd(&spec, 1).unwrap();
        let expected = wrap_phase(-2.0 * PI * (k * d) as f64 / n as f64);
        for t in 0..spec.frames() {
            // Leakage from the mirrored component bounds the error at this level.
            assert!(wrap_phase(phase[t * spec.bins() + k] - expected).abs() < 1e-2);
        }
    }
}

#[test]
fn log_magnitude_is_the_first_block() {
    let x = noise(4, 4096);
    let spec = stft(&AudioBuffer::mono(x), 512, 256).unwrap();
    let raw = raw_features(&spec);
    for (t, f) in [(0, 0), (3, 100), (13, 256)] {
        let expected = (spec.at(0, t, f).norm() + 1e-7).ln();
        assert!((raw.get2(t, f) - expected).abs() < 1e-12);
    }
    let norm = compute_features(&spec);
    for j in [0, 17, 256] {
        let col: Vec<f64> = (0..norm.frames()).map(|t| norm.values.get2(t, j)).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}
