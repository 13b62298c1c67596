use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::SAMPLE_RATE;

/// Vowel formant targets (F1, F2, F3) in Hz.
const VOWELS: [[f64; 3]; 7] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
];
const BANDWIDTHS: [f64; 3] = [80.0, 100.0, 140.0];
/// RMS of a generated utterance over its active samples.
pub const SPEECH_RMS: f64 = 0.05;

/// Voice characteristics of one synthetic talker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub pitch_hz: f64,
    /// Vocal-tract scaling applied to every formant.
    pub formant_scale: f64,
    /// Share of aspiration noise in voiced sounds.
    pub breathiness: f64,
    /// Syllables per second.
    pub rate: f64,
}

/// Deterministic profile for a speaker id.
pub fn speaker_profile(speaker: u64) -> SpeakerProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(speaker.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    SpeakerProfile {
        pitch_hz: rng.random_range(80.0..280.0),
        formant_scale: rng.random_range(0.85..1.2),
        breathiness: rng.random_range(0.02..0.12),
        rate: rng.random_range(3.5..6.0),
    }
}

struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn step(&mut self, x: f64, freq: f64, bw: f64) -> f64 {
        let fs = SAMPLE_RATE as f64;
        let r = (-PI * bw / fs).exp();
        let a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
        let a2 = -r * r;
        let y = (1.0 - r) * x + a1 * self.y1 + a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// A pseudo-speech utterance of exactly `len` samples: syllables of a
/// formant-filtered glottal pulse train with pitch movement, occasional
/// noise consonants, and pauses between words. Scaled to [`SPEECH_RMS`]
/// over the voiced part.
pub fn surrogate_speech(profile: &SpeakerProfile, len: usize, seed: u64) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut excitation = vec![0.0; len];
    let mut formants = vec![[0.0f64; 3]; len];
    let mut envelope = vec![0.0; len];

    let mut t = (rng.random_range(0.0..0.05) * fs) as usize;
    let mut phase = 0.0;
    let mut prev_vowel = VOWELS[rng.random_range(0..VOWELS.len())];
    while t < len {
        let syllables = rng.random_range(1..=4);
        for _ in 0..syllables {
            if t >= len {
                break;
            }
            // Unvoiced onset.
            if rng.random_bool(0.4) {
                let dur = (rng.random_range(0.03..0.08) * fs) as usize;
                for i in 0..dur.min(len - t) {
                    let w = (PI * i as f64 / dur as f64).sin();
                    excitation[t + i] = 0.6 * w * rng.random_range(-1.0..1.0);
                    formants[t + i] = [2500.0, 3500.0, 4500.0];
                    envelope[t + i] = 1.0;
                }
                t += dur;
            }
            let dur = (rng.random_range(0.6..1.4) / profile.rate * fs) as usize;
            let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
            let f0 = profile.pitch_hz * rng.random_range(0.85..1.15);
            let slope = rng.random_range(-0.25..0.15);
            for i in 0..dur.min(len.saturating_sub(t)) {
                let u = i as f64 / dur as f64;
                let glide = (u * 4.0).min(1.0);
                let pitch = f0 * (1.0 + slope * u) * (1.0 + 0.01 * rng.random_range(-1.0..1.0));
                phase += pitch / fs;
                let mut e = profile.breathiness * rng.random_range(-1.0..1.0);
                if phase >= 1.0 {
                    phase -= 1.0;
                    e += 1.0;
                }
                excitation[t + i] = e;
                for k in 0..3 {
                    formants[t + i][k] =
                        profile.formant_scale * (prev_vowel[k] + (vowel[k] - prev_vowel[k]) * glide);
                }
                envelope[t + i] = (PI * u).sin().powf(0.5);
            }
            prev_vowel = vowel;
            t += dur;
        }
        t += (rng.random_range(0.08..0.35) * fs) as usize;
    }

    let mut res = [Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }, Resonator { y1: 0.0, y2: 0.0 }];
    let mut lowpass = 0.0;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        lowpass = 0.7 * lowpass + excitation[i];
        let mut y = 0.0;
        for (k, r) in res.iter_mut().enumerate() {
            let f = formants[i][k];
            y += if f > 0.0 { r.step(lowpass, f, BANDWIDTHS[k]) } else { r.step(0.0, 1000.0, 100.0) };
        }
        out.push(y * envelope[i]);
    }
    let active: Vec<f64> = out.iter().zip(&envelope).filter(|(_, &e)| e > 0.0).map(|(v, _)| *v).collect();
    let rms = (active.iter().map(|v| v * v).sum::<f64>() / active.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = SPEECH_RMS / rms;
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}
