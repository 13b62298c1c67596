use css_core::dsp::MaskSet;
use css_core::pipeline::Permutation;
use css_core::sim::{generate_recipes, OverlapPattern, PatternWeights, SimConfig};
use css_core::train::*;
use css_core::CssError;
use css_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_targets(rng: &mut ChaCha8Rng, frames: usize, bins: usize, noise: bool) -> MaskTargets<f64> {
    let n = frames * bins;
    let mut draw = || (0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>();
    let s0 = draw();
    let s1 = draw();
    let nz = draw();
    let mixture = (0..n).map(|i| s0[i] + s1[i] + if noise { nz[i] } else { 0.0 }).collect();
    MaskTargets {
        frames,
        bins,
        mixture,
        sources: [s0, s1],
        noise: noise.then_some(nz),
    }
}

fn random_masks(rng: &mut ChaCha8Rng, frames: usize, bins: usize) -> MaskSet<f64> {
    let v = (0..3 * frames * bins).map(|_| rng.random_range(0.0..1.0)).collect();
    MaskSet::new(v, 3, frames, bins).unwrap()
}

#[test]
fn swapping_references_keeps_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = random_targets(&mut rng, 7, 5, true);
    let m = random_masks(&mut rng, 7, 5);
    let a = pit_mask_loss(&m, &t).unwrap();
    let mut swapped = t.clone();
    swapped.sources.swap(0, 1);
    let b = pit_mask_loss(&m, &swapped).unwrap();
    assert!((a.value - b.value).abs() < 1e-15);
    assert_ne!(a.permutation, b.permutation);
}

#[test]
fn oracle_masks_nearly_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (f, b) = (20, 9);
    let t = random_targets(&mut rng, f, b, true);
    let eps = 1e-12;
    let mut v = Vec::new();
    for x in [&t.sources[0], &t.sources[1], t.noise.as_ref().unwrap()] {
        v.extend(x.iter().zip(&t.mixture).map(|(x, y)| x / (y + eps)));
    }
    let m = MaskSet::new(v, 3, f, b).unwrap();
    let loss = pit_mask_loss(&m, &t).unwrap();
    let power = t.mixture.iter().map(|y| y * y).sum::<f64>() / (f * b) as f64;
    assert!(loss.value < 1e-3 * power);
    assert_eq!(loss.permutation, Permutation::Identity);
}

#[test]
fn zero_masks_give_mean_squared_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = random_targets(&mut rng, 6, 4, true);
    let m = MaskSet::filled(3, 6, 4, 0.0).unwrap();
    let ms = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / 24.0;
    let expected = ms(&t.sources[0]) + ms(&t.sources[1]) + ms(t.noise.as_ref().unwrap());
    assert!((pit_mask_loss(&m, &t).unwrap().value - expected).abs() < 1e-14);
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = random_targets(&mut rng, 6, 4, true);
    let m = MaskSet::filled(3, 5, 4, 0.5).unwrap();
    assert!(matches!(pit_mask_loss(&m, &t), Err(CssError::Shape { .. })));
    let mut bad = t.clone();
    bad.sources[1].pop();
    let m = MaskSet::filled(3, 6, 4, 0.5).unwrap();
    assert!(matches!(pit_mask_loss(&m, &bad), Err(CssError::Shape { .. })));
}

fn tape_loss(masks: &[Vec<f64>], t: &MaskTargets<f64>) -> (f64, Vec<Vec<f64>>, PitLoss) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = masks
        .iter()
        .map(|m| tape.param(Tensor::new(vec![t.frames, t.bins], m.clone()).unwrap()))
        .collect();
    let (loss, pit) = pit_mask_loss_on_tape(&mut tape, &vars, t).unwrap();
    tape.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| tape.grad(v).map_or(vec![0.0; t.frames * t.bins], |g| g.data().to_vec()))
        .collect();
    (tape.value(loss).data()[0], grads, pit)
}

#[test]
fn tape_loss_matches_value_and_finite_differences() {
    for (seed, noise) in [(5, true), (6, false), (7, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_targets(&mut rng, 5, 6, noise);
        let m = random_masks(&mut rng, 5, 6);
        let masks: Vec<Vec<f64>> = (0..3).map(|s| m.mask(s).to_vec()).collect();
        let (value, grads, pit) = tape_loss(&masks, &t);
        let reference = pit_mask_loss(&m, &t).unwrap();
        assert!((value - reference.value).abs() < 1e-12);
        assert_eq!(pit.permutation, reference.permutation);
        let h = 1e-6;
        for s in 0..3 {
            for i in 0..masks[s].len() {
                let eval = |delta: f64| {
                    let mut v = m.values().to_vec();
                    v[s * 30 + i] += delta;
                    pit_mask_loss(&MaskSet::new(v, 3, 5, 6).unwrap(), &t).unwrap().value
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = grads[s][i];
                let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                assert!(err < 1e-4, "mask {s} element {i}: tape {g} fd {fd}");
            }
        }
    }
}

proptest! {
    #[test]
    fn loss_is_nonnegative_and_zero_for_exact_masks(seed in 0u64..1000, swap in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_targets(&mut rng, 4, 3, true);
        let m = random_masks(&mut rng, 4, 3);
        prop_assert!(pit_mask_loss(&m, &t).unwrap().value >= 0.0);
        // Masks reproducing the targets exactly in either order.
        let n = t.noise.clone().unwrap();
        let order = if swap { [1, 0] } else { [0, 1] };
        let mut exact = t.clone();
        exact.mixture = vec![1.0; 12];
        let mut v = Vec::new();
        v.extend(&t.sources[order[0]]);
        v.extend(&t.sources[order[1]]);
        v.extend(&n);
        exact.noise = Some(n);
        let loss = pit_mask_loss(&MaskSet::new(v, 3, 4, 3).unwrap(), &exact).unwrap();
        prop_assert_eq!(loss.value, 0.0);
    }
}

fn one_param(value: f64, grad: f64, state: &mut OptimizerState<f64>, lr: f64) -> f64 {
    let mut p = Tensor::scalar(value);
    let g = Tensor::scalar(grad);
    adamw_step(
        &mut [Param {
            name: "p",
            value: &mut p,
            grad: &g,
        }],
        state,
        lr,
    )
    .unwrap();
    p.data()[0]
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = OptimizerState::new(cfg);
    let mut p = 0.731;
    for _ in 0..10 {
        p = one_param(p, 0.0, &mut state, 1e-4);
    }
    assert_eq!(p, 0.731);
    assert_eq!(state.step, 10);
}

#[test]
fn zero_gradient_with_decay_shrinks_by_lr_lambda() {
    let mut state = OptimizerState::new(AdamWConfig::default());
    for p0 in [1.0, -2.5, 0.125] {
        let p = one_param(p0, 0.0, &mut state, 1e-4);
        assert!((p - p0 * (1.0 - 1e-6)).abs() <= 1e-16 * p0.abs());
    }
}

#[test]
fn adamw_minimizes_a_quadratic() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = OptimizerState::new(cfg);
    let mut p = 0.0;
    let mut reached = None;
    for step in 1..=2000 {
        p = one_param(p, 2.0 * (p - 3.0), &mut state, 0.02);
        if reached.is_none() && (p - 3.0).abs() < 1e-3 {
            reached = Some(step);
        }
    }
    assert!(reached.is_some());
    assert!((p - 3.0).abs() < 1e-3, "ended at {p}");
}

#[test]
fn non_finite_gradient_aborts_and_names_the_parameter() {
    let mut state = OptimizerState::<f64>::new(AdamWConfig::default());
    let mut a = Tensor::scalar(1.0);
    let mut b = Tensor::scalar(2.0);
    let ga = Tensor::scalar(0.5);
    let gb = Tensor::scalar(f64::NAN);
    let err = adamw_step(
        &mut [
            Param {
                name: "layers.0.ok",
                value: &mut a,
                grad: &ga,
            },
            Param {
                name: "layers.1.bad",
                value: &mut b,
                grad: &gb,
            },
        ],
        &mut state,
        1e-3,
    )
    .unwrap_err();
    assert!(matches!(&err, CssError::NonFinite(m) if m.contains("layers.1.bad")));
    assert_eq!(a.data()[0], 1.0);
    assert_eq!(state.step, 0);
    assert!(state.m.is_empty());
}

#[test]
fn optimizer_state_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = OptimizerState::<f32>::new(AdamWConfig::default());
    let mut w = Tensor::new(vec![2, 3], vec![0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let g = Tensor::new(vec![2, 3], vec![1.0f32, -1.0, 0.5, 0.25, 0.0, 2.0]).unwrap();
    for _ in 0..3 {
        adamw_step(
            &mut [Param {
                name: "w",
                value: &mut w,
                grad: &g,
            }],
            &mut state,
            1e-3,
        )
        .unwrap();
    }
    state.step = 1_234_567;
    let cfg = css_core::model::ConformerConfig::tiny(257);
    let path = dir.path().join("x.opt");
    save_optimizer(&state, &cfg, &path).unwrap();
    let (c, back) = load_optimizer::<f32>(&path, AdamWConfig::default()).unwrap();
    assert_eq!(c, cfg);
    assert_eq!(back, state);
}

#[test]
fn schedule_anchors() {
    let p = Schedule::PAPER;
    assert_eq!(lr_at(0, &p, 1e-4), 0.0);
    assert_eq!(lr_at(10_000, &p, 1e-4), 1e-4);
    assert_eq!(lr_at(260_000, &p, 1e-4), 0.0);
    assert_eq!(lr_at(300_000, &p, 1e-4), 0.0);
    assert_eq!(lr_at(5_000, &p, 1e-4), 0.5e-4);
    assert!((lr_at(135_000, &p, 1e-4) - 0.5e-4).abs() < 1e-18);
    let t = Schedule::default();
    assert_eq!((t.warmup_steps, t.total_steps), (200, 5_000));
    assert!(Schedule { warmup_steps: 0, total_steps: 10 }.validate().is_err());
    assert!(Schedule { warmup_steps: 10, total_steps: 10 }.validate().is_err());
}

proptest! {
    #[test]
    fn schedule_is_continuous_and_peaks_at_warmup(w in 1u64..500, extra in 1u64..5000, s in 0u64..6000) {
        let sch = Schedule { warmup_steps: w, total_steps: w + extra };
        let peak = 1e-4;
        let a = lr_at(s, &sch, peak);
        let b = lr_at(s + 1, &sch, peak);
        prop_assert!(a >= 0.0 && a <= peak);
        prop_assert!((a - b).abs() <= peak / w.min(extra) as f64 + 1e-18);
        prop_assert!(s == w || a < peak);
        prop_assert_eq!(lr_at(w, &sch, peak), peak);
    }
}

fn tone(n: usize, f: f64) -> Vec<f64> {
    (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()).collect()
}

#[test]
fn si_snr_examples() {
    let x = tone(4000, 440.0);
    assert_eq!(si_snr(&x, &x).unwrap(), SI_SNR_CAP_DB);
    let doubled: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    assert_eq!(si_snr(&doubled, &x).unwrap(), SI_SNR_CAP_DB);
    // Orthogonal noise of equal power: a tone at another whole-period frequency.
    let n = tone(4000, 1000.0);
    let noisy: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + b).collect();
    assert!(si_snr(&noisy, &x).unwrap().abs() < 0.2);
    assert!(matches!(si_snr(&x, &vec![0.0; 4000]), Err(CssError::Contract(_))));
    assert!(matches!(si_snr(&x, &vec![1.0; 4000]), Err(CssError::Contract(_))));
    assert!(si_snr(&x[..10], &x[..11]).is_err());
    assert_eq!(si_snr(&vec![0.0; 4000], &x).unwrap(), -SI_SNR_CAP_DB);
}

proptest! {
    #[test]
    fn si_snr_is_scale_invariant(seed in 0u64..500, alpha in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = r.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * alpha).collect();
        prop_assert!((si_snr(&e, &r).unwrap() - si_snr(&scaled, &r).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn best_permutation_picks_the_matching_order() {
    let a = tone(2000, 300.0);
    let b = tone(2000, 700.0);
    let (v, p) = best_permutation_si_snr([&b, &a], [&a, &b]).unwrap();
    assert_eq!(v, SI_SNR_CAP_DB);
    assert_eq!(p, Permutation::Swap);
}

fn small_examples(count: usize, seed: u64) -> Vec<TrainingExample> {
    let cfg = SimConfig {
        num_mics: 1,
        utterance_seconds: (1.0, 1.6),
        patterns: PatternWeights {
            single: 0.0,
            ..PatternWeights::default()
        },
        ..SimConfig::default()
    };
    examples_from_recipes(&generate_recipes(&cfg, count, seed).unwrap(), 1).unwrap()
}

fn short_config(total: u64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::toy(1);
    c.schedule = Schedule {
        warmup_steps: 2,
        total_steps: total,
    };
    c.checkpoint_every = 3;
    c.seed = seed;
    c
}

#[test]
fn empty_dataset_is_a_contract_error() {
    let err = train_toy(&[], &short_config(4, 0), &TrainIo::default()).err().unwrap();
    assert!(matches!(err, CssError::Contract(_)));
}

#[test]
fn training_is_bit_reproducible_and_resumable() {
    let data = small_examples(6, 3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(6, 11);
    let io = TrainIo {
        checkpoint_dir: Some(dir.path().join("a")),
        log_path: Some(dir.path().join("a.csv")),
        resume: None,
    };
    let full = train_toy(&data, &cfg, &io).unwrap();
    let again = train_toy(&data, &cfg, &TrainIo::default()).unwrap();
    assert_eq!(full.weights, again.weights);
    assert_eq!(full.log, again.log);
    assert_eq!(full.checkpoints.len(), 2);

    let resumed = train_toy(
        &data,
        &cfg,
        &TrainIo {
            resume: Some(full.checkpoints[0].clone()),
            log_path: Some(dir.path().join("a.csv")),
            checkpoint_dir: None,
        },
    )
    .unwrap();
    assert_eq!(resumed.log, full.log[3..].to_vec());
    assert_eq!(resumed.weights, full.weights);
    assert_eq!(resumed.optimizer, full.optimizer);

    let csv = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,lr,loss,permutation_flips");
    assert_eq!(lines.len(), 1 + 6 + 3);
    let other = train_toy(&data, &short_config(6, 12), &TrainIo::default()).unwrap();
    assert_ne!(other.weights, full.weights);
}

#[test]
fn training_reduces_the_loss() {
    let data = small_examples(30, 8);
    let mut wins = 0;
    for seed in 0..3 {
        let mut cfg = short_config(500, seed);
        cfg.schedule.warmup_steps = 50;
        let run = train_toy(&data, &cfg, &TrainIo::default()).unwrap();
        let early = run.log[..10].iter().map(|l| l.loss).sum::<f64>() / 10.0;
        let late = run.log[490..].iter().map(|l| l.loss).sum::<f64>() / 10.0;
        wins += (late < early) as usize;
    }
    assert!(wins >= 2);
}

#[test]
fn overlap_buckets() {
    assert_eq!(overlap_bucket(&OverlapPattern::Sequential { gap: 1600 }, 0.0), "0S");
    assert_eq!(overlap_bucket(&OverlapPattern::Sequential { gap: 12000 }, 0.0), "0L");
    assert_eq!(overlap_bucket(&OverlapPattern::Partial { offset: 10 }, 0.15), "10-20");
    assert_eq!(overlap_bucket(&OverlapPattern::Full, 0.9), "40+");
    assert_eq!(overlap_bucket(&OverlapPattern::Single, 0.0), "single");
}

#[test]
fn perfect_outputs_score_the_cap() {
    let data = small_examples(3, 9);
    let rows: Vec<EvalRow> = data
        .iter()
        .map(|ex| {
            let outs = vec![ex.sources[1].clone(), ex.sources[0].clone()];
            evaluate_outputs(ex, &outs).unwrap()
        })
        .collect();
    for r in &rows {
        assert_eq!(r.si_snr, SI_SNR_CAP_DB);
        assert!(r.improvement > 70.0);
    }
    let report = EvalReport::from_rows(rows);
    assert_eq!(report.buckets.iter().map(|b| b.count).sum::<usize>(), 3);
    assert!(report.table().contains("SI-SNRi"));
    assert!(evaluate_outputs(&data[0], &[data[0].sources[0].clone()]).is_err());
}

#[test]
fn constant_masks_are_a_fixed_baseline() {
    let data = small_examples(4, 10);
    let cfg = TrainConfig::toy(1);
    let a = mask_loss(None, &data, &cfg).unwrap();
    let b = mask_loss(None, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a > 0.0);
}
