use css_core::CssError;
use css_core::sim::*;
use num_complex::Complex;
use realfft::RealFftPlanner;

fn room(dims: [f64; 3], order: usize, mics: Vec<[f64; 3]>) -> RoomSpec {
    RoomSpec {
        dims,
        absorption: 0.4,
        max_order: order,
        mics,
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn db(x: f64) -> f64 {
    10.0 * x.log10()
}

// 100 samples at 16 kHz and 343 m/s.
const D100: f64 = 2.14375;

#[test]
fn direct_path_is_one_impulse_at_integer_delay() {
    let src = [1.0, 1.0, 1.5];
    let mic = [1.0 + D100, 1.0, 1.5];
    let r = room([8.0, 6.0, 3.0], 0, vec![mic]);
    let h = image_method_rir(&r, src, mic).unwrap();
    assert!((h[100] - 1.0 / D100).abs() < 1e-12);
    for (i, v) in h.iter().enumerate() {
        if i != 100 {
            assert!(v.abs() < 1e-12, "tap {i} = {v}");
        }
    }
}

#[test]
fn doubling_distance_halves_amplitude() {
    let src = [1.0, 1.0, 1.5];
    let near = [1.0 + D100, 1.0, 1.5];
    let far = [1.0 + 2.0 * D100, 1.0, 1.5];
    let r = room([8.0, 6.0, 3.0], 0, vec![near, far]);
    let h1 = image_method_rir(&r, src, near).unwrap();
    let h2 = image_method_rir(&r, src, far).unwrap();
    assert!((h2[200] / h1[100] - 0.5).abs() < 1e-12);
}

#[test]
fn first_order_cube_has_seven_arrivals() {
    let l = 4.0;
    let src = [1.0, 1.5, 2.5];
    let mic = [3.0, 2.0, 1.2];
    let r = room([l; 3], 1, vec![mic]);
    let beta = (1.0f64 - 0.4).sqrt();
    let mut expected: Vec<(f64, f64)> = Vec::new();
    let mut images = vec![(src, 0)];
    for axis in 0..3 {
        for wall in [0.0, l] {
            let mut p = src;
            p[axis] = 2.0 * wall - src[axis];
            images.push((p, 1));
        }
    }
    for (p, refl) in images {
        let d = ((p[0] - mic[0]).powi(2) + (p[1] - mic[1]).powi(2) + (p[2] - mic[2]).powi(2)).sqrt();
        expected.push((d / 343.0 * 16000.0, beta.powi(refl) / d));
    }
    let mut got = image_arrivals(&r, src, mic).unwrap();
    assert_eq!(got.len(), 7);
    got.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    expected.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (g, e) in got.iter().zip(&expected) {
        assert!((g.0 - e.0).abs() < 1e-9 && (g.1 - e.1).abs() < 1e-12, "{g:?} vs {e:?}");
    }
}

#[test]
fn rir_is_silent_before_the_interpolator_support() {
    let src = [1.3, 2.2, 1.6];
    let mic = [3.7, 1.1, 1.0];
    let r = room([5.0, 4.0, 3.0], 4, vec![mic]);
    let h = image_method_rir(&r, src, mic).unwrap();
    let direct = image_arrivals(&r, src, mic)
        .unwrap()
        .iter()
        .map(|a| a.0)
        .fold(f64::INFINITY, f64::min);
    let first = direct.floor() as usize - (SINC_TAPS / 2 - 1);
    assert!(h[..first].iter().all(|&v| v == 0.0));
    let max_delay = image_arrivals(&r, src, mic).unwrap().iter().map(|a| a.0).fold(0.0, f64::max);
    assert_eq!(h.len(), max_delay.floor() as usize + SINC_TAPS / 2 + 1);
}

#[test]
fn positions_outside_the_room_are_rejected() {
    let r = room([4.0, 4.0, 3.0], 1, vec![[1.0, 1.0, 1.0]]);
    let err = image_method_rir(&r, [5.0, 1.0, 1.0], [1.0, 1.0, 1.0]).unwrap_err();
    assert!(matches!(err, CssError::Geometry(_)));
    let err = image_method_rir(&r, [1.0, 1.0, 1.0], [1.0, 0.0, 1.0]).unwrap_err();
    assert!(matches!(err, CssError::Geometry(_)));
    let bad = room([4.0, 4.0, 3.0], 7, vec![[1.0, 1.0, 1.0]]);
    assert!(image_method_rir(&bad, [2.0, 2.0, 1.0], [1.0, 1.0, 1.0]).is_err());
}

fn power_spectrum(x: &[f64], n: usize) -> Vec<f64> {
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut acc = vec![0.0; n / 2 + 1];
    let mut buf = fft.make_input_vec();
    let mut out = fft.make_output_vec();
    let mut frames = 0;
    for chunk in x.chunks_exact(n) {
        for (i, (b, v)) in buf.iter_mut().zip(chunk).enumerate() {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            *b = v * w;
        }
        fft.process(&mut buf, &mut out).unwrap();
        for (a, o) in acc.iter_mut().zip(&out) {
            *a += o.norm_sqr();
        }
        frames += 1;
    }
    acc.iter().map(|a| a / frames as f64).collect()
}

#[test]
fn noise_marginal_is_white() {
    let r = room([6.0, 5.0, 3.0], 0, circular_array([3.0, 2.5, 1.2], ARRAY_RADIUS));
    let noise = isotropic_noise(&r, 16000 * 20, 3).unwrap();
    let psd = power_spectrum(noise.channel(0), 512);
    // 100 Hz to 7 kHz at 31.25 Hz per bin, smoothed over 8-bin bands.
    let bands: Vec<f64> = psd[4..224].chunks(8).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let mean = bands.iter().sum::<f64>() / bands.len() as f64;
    for b in bands {
        assert!(db(b / mean).abs() < 2.0, "band deviates {} dB", db(b / mean));
    }
    let var = energy(noise.channel(0)) / noise.len() as f64;
    assert!((var - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn colocated_mics_see_identical_noise() {
    let p = [2.0, 2.0, 1.5];
    let r = room([5.0, 4.0, 3.0], 0, vec![p, p]);
    let noise = isotropic_noise(&r, 8000, 11).unwrap();
    assert_eq!(noise.channel(0), noise.channel(1));
}

fn highpass(x: &[f64], cutoff_hz: f64) -> Vec<f64> {
    let n = x.len().next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = fwd.make_input_vec();
    buf[..x.len()].copy_from_slice(x);
    let mut spec = fwd.make_output_vec();
    fwd.process(&mut buf, &mut spec).unwrap();
    let cut = (cutoff_hz / 16000.0 * n as f64) as usize;
    for s in spec.iter_mut().take(cut) {
        *s = Complex::new(0.0, 0.0);
    }
    let last = spec.len() - 1;
    spec[last].im = 0.0;
    inv.process(&mut spec, &mut buf).unwrap();
    buf.truncate(x.len());
    buf
}

#[test]
fn spaced_mics_decorrelate_above_one_khz() {
    let r = room([6.0, 5.0, 3.0], 0, vec![[2.0, 2.0, 1.5], [3.0, 2.0, 1.5]]);
    let noise = isotropic_noise(&r, 16000 * 5, 5).unwrap();
    let a = highpass(noise.channel(0), 1000.0);
    let b = highpass(noise.channel(1), 1000.0);
    let corr: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (energy(&a) * energy(&b)).sqrt();
    assert!(corr.abs() < 0.3, "correlation {corr}");
    let full: f64 = noise.channel(0).iter().zip(noise.channel(1)).map(|(x, y)| x * y).sum::<f64>()
        / (energy(noise.channel(0)) * energy(noise.channel(1))).sqrt();
    assert!(full.abs() < 0.3);
}

fn two_talker(sir_db: f64, snr_db: Option<f64>) -> MixtureRecipe {
    let cfg = SimConfig {
        num_mics: 3,
        utterance_seconds: (1.0, 1.5),
        patterns: PatternWeights {
            single: 0.0,
            full: 1.0,
            partial: 0.0,
            sequential: 0.0,
        },
        ..SimConfig::default()
    };
    let mut r = generate_recipes(&cfg, 1, 21).unwrap().remove(0);
    r.sir_db = sir_db;
    r.snr_db = snr_db;
    r
}

#[test]
fn zero_sir_equalizes_source_energy() {
    let m = simulate(&two_talker(0.0, Some(5.0))).unwrap();
    let e0 = energy(m.images[0].channel(0));
    let e1 = energy(m.images[1].channel(0));
    assert!(db(e0 / e1).abs() < 0.01);
}

#[test]
fn realized_ratios_match_the_recipe() {
    for (sir, snr) in [(-5.0, 0.0), (3.3, 7.5), (5.0, 10.0)] {
        let m = simulate(&two_talker(sir, Some(snr))).unwrap();
        let e0 = energy(m.images[0].channel(0));
        let e1 = energy(m.images[1].channel(0));
        let speech: Vec<f64> = m.images[0].channel(0).iter().zip(m.images[1].channel(0)).map(|(a, b)| a + b).collect();
        assert!((db(e0 / e1) - sir).abs() < 0.1);
        assert!((db(energy(&speech) / energy(m.noise.channel(0))) - snr).abs() < 0.1);
        assert!((m.mixture.rms_dbfs(0) - (-25.0)).abs() < 0.1);
    }
}

#[test]
fn noiseless_mixture_is_the_sum_of_images() {
    let m = simulate(&two_talker(2.0, None)).unwrap();
    for c in 0..m.mixture.num_channels() {
        let sum: Vec<f64> = m.images[0].channel(c).iter().zip(m.images[1].channel(c)).map(|(a, b)| a + b).collect();
        assert_eq!(m.mixture.channel(c), &sum[..]);
        assert!(m.noise.channel(c).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn simulation_is_deterministic() {
    let cfg = SimConfig { num_mics: 2, ..SimConfig::default() };
    let a = generate_recipes(&cfg, 4, 9).unwrap();
    let b = generate_recipes(&cfg, 4, 9).unwrap();
    assert_eq!(a, b);
    for r in &a {
        assert_eq!(simulate(r).unwrap(), simulate(r).unwrap());
    }
}

#[test]
fn empty_source_is_a_contract_error() {
    let r = two_talker(0.0, None);
    let err = synthesize_mixture(&r, &[vec![0.1; 100], vec![]]).unwrap_err();
    assert!(matches!(err, CssError::Contract(_)));
}

#[test]
fn recipes_use_one_or_two_sources_and_valid_ranges() {
    let recipes = generate_recipes(&SimConfig::default(), 300, 1).unwrap();
    let mut singles = 0;
    for r in &recipes {
        assert!(r.sources.len() == 1 || r.sources.len() == 2);
        singles += (r.sources.len() == 1) as usize;
        assert!((-5.0..=5.0).contains(&r.sir_db));
        let snr = r.snr_db.unwrap();
        assert!((0.0..=10.0).contains(&snr));
        assert_eq!(r.room.mics.len(), 7);
        for s in &r.sources {
            r.room.check_inside(s.position, "source").unwrap();
        }
    }
    assert!((25..=35).contains(&singles), "{singles} single-talker recipes");
}

#[test]
fn overlap_ratio_of_intervals() {
    assert_eq!(overlap_ratio(&[(0, 100), (0, 100)], 100), 1.0);
    assert_eq!(overlap_ratio(&[(0, 100), (50, 100)], 150), 50.0 / 150.0);
    assert_eq!(overlap_ratio(&[(0, 100), (120, 100)], 220), 0.0);
    assert_eq!(overlap_ratio(&[(0, 100)], 100), 0.0);
}

#[test]
fn default_set_averages_half_overlap() {
    let start = std::time::Instant::now();
    let recipes = generate_recipes(&SimConfig::default(), 200, 2024).unwrap();
    use rayon::prelude::*;
    let ratios: Vec<f64> = recipes.par_iter().map(|r| simulate(r).unwrap().overlap_ratio).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 0.5).abs() < 0.05, "mean overlap {mean}");
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn dataset_manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        num_mics: 2,
        utterance_seconds: (0.5, 0.8),
        ..SimConfig::default()
    };
    let recipes = generate_recipes(&cfg, 3, 4).unwrap();
    let written = write_dataset(dir.path(), &recipes).unwrap();
    let read = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(written, read);
    for rec in &read {
        let mix = css_core::audio::read_wav(dir.path().join(&rec.mixture_file)).unwrap();
        assert_eq!(mix.num_channels(), 2);
        assert_eq!(rec.source_files.len(), rec.recipe.sources.len());
    }
}
