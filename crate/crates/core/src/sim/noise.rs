use std::f64::consts::PI;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;

use super::rir::{delay_samples, RoomSpec};
use crate::audio::AudioBuffer;
use crate::error::Result;

/// Far-field white sources used to approximate a diffuse field.
pub const NOISE_SOURCES: usize = 36;

/// Unit vectors spread evenly over the sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

/// Approximately isotropic noise at the room's microphones: independent
/// white Gaussian plane waves from [`NOISE_SOURCES`] directions, each
/// delayed per microphone by its projection on the arrival direction.
/// The waves are drawn directly as circular complex Gaussian spectra and
/// delayed by phase rotation. Unit variance per channel before any rescaling.
pub fn isotropic_noise(room: &RoomSpec, len: usize, seed: u64) -> Result<AudioBuffer<f64>> {
    room.validate()?;
    let n_fft = len.max(2).next_power_of_two();
    let bins = n_fft / 2 + 1;
    let mut planner = RealFftPlanner::<f64>::new();
    let inv = planner.plan_fft_inverse(n_fft);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = room.mics.first().copied().unwrap_or([0.0; 3]);
    let mut spectra = vec![vec![Complex::new(0.0, 0.0); bins]; room.mics.len()];
    let mut spec = vec![Complex::new(0.0, 0.0); bins];
    for dir in fibonacci_sphere(NOISE_SOURCES) {
        for (k, v) in spec.iter_mut().enumerate() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            // DC and Nyquist are real with the full variance.
            *v = if k == 0 || k == bins - 1 {
                Complex::new(re * 2f64.sqrt(), 0.0)
            } else {
                Complex::new(re, im)
            };
        }
        for (m, acc) in room.mics.iter().zip(spectra.iter_mut()) {
            // A plane wave from direction `dir` reaches mics further along it earlier.
            let proj: f64 = (0..3).map(|i| (m[i] - centre[i]) * dir[i]).sum();
            let tau = -delay_samples(proj);
            let step = Complex::from_polar(1.0, -2.0 * PI * tau / n_fft as f64);
            let mut rot = Complex::new(1.0, 0.0);
            for (k, (a, s)) in acc.iter_mut().zip(&spec).enumerate() {
                if k % 1024 == 0 {
                    rot = Complex::from_polar(1.0, -2.0 * PI * k as f64 * tau / n_fft as f64);
                }
                *a += s * rot;
                rot *= step;
            }
        }
    }
    // Each bin carries variance 2 per wave; the inverse transform sums n_fft of them.
    let norm = 1.0 / (2.0 * n_fft as f64 * NOISE_SOURCES as f64).sqrt();
    let mut channels = Vec::with_capacity(room.mics.len());
    let mut out = inv.make_output_vec();
    for mut s in spectra {
        s[0].im = 0.0;
        s[bins - 1].im = 0.0;
        inv.process(&mut s, &mut out).expect("fft sizes match");
        channels.push(out[..len].iter().map(|v| v * norm).collect());
    }
    AudioBuffer::new(channels, crate::audio::SAMPLE_RATE)
}
