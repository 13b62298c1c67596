use css_core::audio::AudioBuffer;
use css_core::dsp::{feature_dim, MaskSet, Spectrogram};
use css_core::model::{init_weights, ConformerConfig};
use css_core::pipeline::{
    align_channels, analysis_spectrogram, merge_channels, plan_chunks, separate_stream, separate_with,
    synthesize, Chunk, ChunkGeometry, MaskEstimator, Permutation, SeparationMode, SeparationOptions,
};
use css_core::{CssError, Result};
use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn short_recording_is_one_padded_chunk() {
    let plan = plan_chunks(50, ChunkGeometry::default()).unwrap();
    assert_eq!(plan.chunks.len(), 1);
    assert_eq!(plan.chunks[0].window_start, -75);
    assert_eq!((plan.leading_pad(), plan.trailing_pad()), (75, 25));
}

#[test]
fn chunks_advance_by_current_segment() {
    let plan = plan_chunks(125, ChunkGeometry::default()).unwrap();
    let segs: Vec<(usize, usize)> = plan
        .chunks
        .iter()
        .map(|c| (c.current_start, c.current_start + c.current_len))
        .collect();
    assert_eq!(segs, vec![(0, 50), (50, 100), (100, 125)]);
    let one = plan_chunks(1, ChunkGeometry::default()).unwrap();
    assert_eq!((one.chunks.len(), one.chunks[0].current_len), (1, 1));
}

#[test]
fn bad_plans_are_rejected() {
    let g = ChunkGeometry {
        history: 0,
        ..ChunkGeometry::default()
    };
    assert!(matches!(plan_chunks(10, g), Err(CssError::Config(_))));
    assert!(plan_chunks(0, ChunkGeometry::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn current_segments_tile_the_timeline(total in 1usize..5000, h in 1usize..90, c in 1usize..80, f in 1usize..40) {
        let g = ChunkGeometry { history: h, current: c, future: f };
        let plan = plan_chunks(total, g).unwrap();
        prop_assert_eq!(plan.chunks.len(), total.div_ceil(c));
        let mut next = 0;
        for (i, ch) in plan.chunks.iter().enumerate() {
            prop_assert_eq!(ch.current_start, next);
            prop_assert_eq!(ch.window_start + h as isize, ch.current_start as isize);
            if i > 0 {
                prop_assert_eq!(ch.window_start - plan.chunks[i - 1].window_start, c as isize);
            }
            prop_assert!(ch.current_len >= 1);
            next += ch.current_len;
        }
        prop_assert_eq!(next, total);
    }

    #[test]
    fn merging_conserves_energy(seed in 0u64..1000, scale in 0.0f64..1.0, block in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_stream(&mut rng, 37, 1.0);
        let mut b = random_stream(&mut rng, 37, scale);
        // Silence some frames so a few blocks hit the one-sided case.
        for v in b.channel_mut(0)[..5 * 9].iter_mut() { *v = Complex::new(0.0, 0.0); }
        let before = a.energy() + b.energy();
        let mut s = [a, b];
        merge_channels(&mut s, block, 10.0).unwrap();
        let after = s[0].energy() + s[1].energy();
        prop_assert!((after - before).abs() <= 1e-10 * before.max(1.0));
    }
}

fn random_stream(rng: &mut ChaCha8Rng, frames: usize, scale: f64) -> Spectrogram<f64> {
    let values = (0..frames * 9)
        .map(|_| Complex::new(scale * rng.random_range(-1.0..1.0), scale * rng.random_range(-1.0..1.0)))
        .collect();
    Spectrogram::new(values, 1, frames, 16, 8).unwrap()
}

#[test]
fn alignment_recognizes_identity_and_swap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a: Vec<f64> = (0..200).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..200).map(|_| rng.random()).collect();
    assert_eq!(align_channels(&[&a, &b], &[&a, &b]), Permutation::Identity);
    assert_eq!(align_channels(&[&a, &b], &[&b, &a]), Permutation::Swap);
    assert_eq!(align_channels(&[&a, &a], &[&a, &a]), Permutation::Identity);
}

#[test]
fn alignment_survives_small_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let normal = |rng: &mut ChaCha8Rng| -> f64 {
        let (u1, u2): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    for _ in 0..100 {
        let a: Vec<f64> = (0..75 * 257).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..75 * 257).map(|_| rng.random()).collect();
        let na: Vec<f64> = a.iter().map(|v| v + 0.01 * normal(&mut rng)).collect();
        let nb: Vec<f64> = b.iter().map(|v| v + 0.01 * normal(&mut rng)).collect();
        assert_eq!(align_channels(&[&a, &b], &[&na, &nb]), Permutation::Identity);
    }
}

/// Two streams whose energies differ by `db` decibels.
fn pair_with_ratio(db: f64) -> [Spectrogram<f64>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_stream(&mut rng, 50, 1.0);
    let gain = 10f64.powf(-db / 20.0);
    let b_vals = a.values().iter().map(|v| v * gain).rev().collect();
    let b = Spectrogram::new(b_vals, 1, 50, 16, 8).unwrap();
    [a, b]
}

#[test]
fn merge_threshold_examples() {
    let mut s = pair_with_ratio(12.0);
    assert_eq!(merge_channels(&mut s, 50, 10.0).unwrap(), 1);
    assert_eq!(s[1].energy(), 0.0);
    let mut s = pair_with_ratio(8.0);
    let before = s.clone();
    assert_eq!(merge_channels(&mut s, 50, 10.0).unwrap(), 0);
    assert_eq!(s, before);
    let mut s = pair_with_ratio(0.0);
    let before = s.clone();
    assert_eq!(merge_channels(&mut s, 50, 1.0001).unwrap(), 0);
    assert_eq!(s, before);
}

#[test]
fn silent_channel_always_merges() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_stream(&mut rng, 20, 1.0);
    let b = Spectrogram::zeros(1, 20, 16, 8);
    let mut s = [b, a.clone()];
    assert_eq!(merge_channels(&mut s, 10, 1e9).unwrap(), 2);
    assert_eq!(s[0].energy(), 0.0);
    let diff = s[1].values().iter().zip(a.values()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    assert!(diff < 1e-15);
    // Both silent: nothing to do.
    let mut z = [Spectrogram::<f64>::zeros(1, 20, 16, 8), Spectrogram::zeros(1, 20, 16, 8)];
    assert_eq!(merge_channels(&mut z, 10, 10.0).unwrap(), 0);
}

#[test]
fn merge_arguments_are_validated() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = [random_stream(&mut rng, 5, 1.0), random_stream(&mut rng, 5, 1.0)];
    assert!(matches!(merge_channels(&mut s, 5, 1.0), Err(CssError::Config(_))));
    let mut three = [s[0].clone(), s[1].clone(), s[0].clone()];
    assert!(merge_channels(&mut three, 5, 10.0).is_err());
}

fn tone(freq: f64, len: usize, amp: f64) -> Vec<f64> {
    (0..len)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
        .collect()
}

/// Ideal ratio masks from the known sources, with the speaker order
/// shuffled at random in every chunk.
struct ShuffledOracle {
    sources: [Spectrogram<f64>; 2],
    rng: ChaCha8Rng,
}

impl MaskEstimator<f64> for ShuffledOracle {
    fn estimate(&mut self, window: &Spectrogram<f64>, chunk: &Chunk) -> Result<MaskSet<f64>> {
        let n = window.frames();
        let bins = window.bins();
        let a = self.sources[0].frame_window(chunk.window_start, n);
        let b = self.sources[1].frame_window(chunk.window_start, n);
        let mut ma = Vec::with_capacity(n * bins);
        let mut mb = Vec::with_capacity(n * bins);
        for (x, y) in a.channel(0).iter().zip(b.channel(0)) {
            let (ea, eb) = (x.norm(), y.norm());
            let total = ea + eb + 1e-12;
            ma.push(ea / total);
            mb.push(eb / total);
        }
        let noise = vec![0.0; n * bins];
        let values = if self.rng.random::<bool>() {
            [mb, ma, noise].concat()
        } else {
            [ma, mb, noise].concat()
        };
        MaskSet::new(values, 3, n, bins)
    }
}

fn best_source(out: &[f64], a: &[f64], b: &[f64]) -> usize {
    let err = |s: &[f64]| -> f64 { out.iter().zip(s).map(|(o, x)| (o - x).powi(2)).sum() };
    usize::from(err(b) < err(a))
}

#[test]
fn permutation_is_stable_on_constant_oracle_stream() {
    let len = 16000 * 10;
    let a = tone(440.0, len, 0.3);
    let b = tone(2500.0, len, 0.3);
    let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let options = SeparationOptions::default();
    let (sa, _) = analysis_spectrogram(&AudioBuffer::mono(a.clone()), 512, 256).unwrap();
    let (sb, _) = analysis_spectrogram(&AudioBuffer::mono(b.clone()), 512, 256).unwrap();
    let mut est = ShuffledOracle {
        sources: [sa, sb],
        rng: ChaCha8Rng::seed_from_u64(6),
    };
    let sep = separate_with(&AudioBuffer::mono(mix), &mut est, &options).unwrap();
    assert!(sep.chunks > 10);
    let out = sep.outputs[0].channel(0);
    let block = 50 * 256;
    let owners: Vec<usize> = (0..len / block)
        .map(|i| {
            let r = i * block..(i + 1) * block;
            best_source(&out[r.clone()], &a[r.clone()], &b[r])
        })
        .collect();
    assert!(owners.iter().all(|&o| o == owners[0]), "{owners:?}");
}

#[test]
fn analysis_and_synthesis_restore_length_and_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for len in [1usize, 100, 511, 512, 513, 16000, 16001] {
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (spec, offset) = analysis_spectrogram(&AudioBuffer::mono(x.clone()), 512, 256).unwrap();
        let y = synthesize(&spec, offset, len).unwrap();
        assert_eq!(y.len(), len);
        let err = y.channel(0).iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "len {len}: {err}");
    }
}

fn model(channels: usize) -> css_core::model::ConformerWeights<f32> {
    let mut cfg = ConformerConfig::tiny(feature_dim(257, channels));
    cfg.ffn_dim = 32;
    cfg.attn_dim = 16;
    init_weights(&cfg, 1).unwrap()
}

#[test]
fn outputs_match_input_length_and_silence_stays_silent() {
    let w = model(1);
    for len in [1000usize, 16000 + 37] {
        let sep = separate_stream(&AudioBuffer::<f32>::silence(1, len), &w, &SeparationOptions::default()).unwrap();
        assert_eq!(sep.outputs.len(), 2);
        for o in &sep.outputs {
            assert_eq!(o.len(), len);
            assert!(o.rms_dbfs(0) <= -80.0);
        }
    }
}

#[test]
fn multichannel_mode_runs_and_checks_microphones() {
    let w = model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let len = 20000;
    let ch: Vec<Vec<f32>> = (0..2).map(|_| (0..len).map(|_| rng.random_range(-0.1..0.1)).collect()).collect();
    let audio = AudioBuffer::new(ch, 16000).unwrap();
    let opts = SeparationOptions {
        mode: SeparationMode::Multichannel,
        ..SeparationOptions::default()
    };
    let sep = separate_stream(&audio, &w, &opts).unwrap();
    assert!(sep.outputs.iter().all(|o| o.len() == len && o.channel(0).iter().all(|v| v.is_finite())));

    let mono = audio.select_channels(&[0]).unwrap();
    assert!(matches!(separate_stream(&mono, &w, &opts), Err(CssError::NotApplicable(_))));
    assert!(matches!(
        separate_stream(&mono, &w, &SeparationOptions::default()),
        Err(CssError::Dimension(_))
    ));
}

#[test]
fn window_longer_than_model_limit_is_rejected() {
    let w = model(1);
    let opts = SeparationOptions {
        geometry: ChunkGeometry {
            history: 100,
            current: 50,
            future: 25,
        },
        ..SeparationOptions::default()
    };
    assert!(matches!(
        separate_stream(&AudioBuffer::<f32>::silence(1, 4000), &w, &opts),
        Err(CssError::ChunkLength { .. })
    ));
}
