//! Scenes shared by several test targets.
#![allow(dead_code)]

use css_core::audio::AudioBuffer;
use css_core::dsp::{stft, MaskSet, Spectrogram};
use css_core::mvdr::{apply_weights, estimate_covariance, mvdr_weights};
use css_core::sim::{circular_array, simulate, MixtureRecipe, OverlapPattern, RoomSpec, SourceRef, SourceSpec, ARRAY_RADIUS};

/// Two talkers 90° apart around the 7-microphone array in a mildly
/// reverberant room, plus diffuse noise.
pub fn seven_mic_scene(absorption: f64, max_order: usize, snr_db: f64) -> MixtureRecipe {
    let center = [3.0, 2.5, 1.4];
    let at = |deg: f64, r: f64| {
        let a = deg.to_radians();
        [center[0] + r * a.cos(), center[1] + r * a.sin(), 1.6]
    };
    let talker = |speaker: u64, deg: f64| SourceSpec {
        source: SourceRef::Surrogate {
            speaker,
            seed: speaker + 100,
            samples: 3 * 16_000,
        },
        start: 0,
        position: at(deg, 1.5),
    };
    MixtureRecipe {
        id: "scene".into(),
        seed: 17,
        sir_db: 0.0,
        snr_db: Some(snr_db),
        pattern: OverlapPattern::Full,
        room: RoomSpec {
            dims: [6.0, 5.0, 3.0],
            absorption,
            max_order,
            mics: circular_array(center, ARRAY_RADIUS),
        },
        sources: vec![talker(1, 20.0), talker(2, 110.0)],
        level_dbfs: -25.0,
    }
}

fn energy(s: &Spectrogram<f64>, c: usize) -> f64 {
    s.channel(c).iter().map(|v| v.norm_sqr()).sum()
}

/// Output SINR of an oracle-mask MVDR beamformer for talker 0 and the best
/// single-microphone SINR, both in dB.
pub fn oracle_mvdr_sinr(recipe: &MixtureRecipe) -> (f64, f64) {
    let m = simulate(recipe).unwrap();
    let spec = |a: &AudioBuffer<f64>| stft(a, 512, 256).unwrap();
    let target = spec(&m.images[0]);
    let interference_audio = AudioBuffer::new(
        (0..m.mixture.num_channels())
            .map(|c| {
                m.images[1].channel(c).iter().zip(m.noise.channel(c)).map(|(a, b)| a + b).collect()
            })
            .collect(),
        16_000,
    )
    .unwrap();
    let interference = spec(&interference_audio);
    let mixture = spec(&m.mixture);
    let (frames, bins) = (mixture.frames(), mixture.bins());

    let mut ms = Vec::with_capacity(frames * bins);
    for (s, i) in target.channel(0).iter().zip(interference.channel(0)) {
        let (ps, pi) = (s.norm_sqr(), i.norm_sqr());
        ms.push(ps / (ps + pi + 1e-20));
    }
    let mn: Vec<f64> = ms.iter().map(|v| 1.0 - v).collect();
    let masks = MaskSet::new([ms.clone(), vec![0.0; frames * bins], mn.clone()].concat(), 3, frames, bins).unwrap();
    let phi_s = estimate_covariance(&mixture, masks.mask(0)).unwrap();
    let phi_n = estimate_covariance(&mixture, masks.mask(2)).unwrap();
    let w = mvdr_weights(&phi_s, &phi_n, 0).unwrap();
    let out_s = apply_weights(&target, &w).unwrap();
    let out_i = apply_weights(&interference, &w).unwrap();
    let output = 10.0 * (energy(&out_s, 0) / energy(&out_i, 0)).log10();
    let best_mic = (0..mixture.channels())
        .map(|c| 10.0 * (energy(&target, c) / energy(&interference, c)).log10())
        .fold(f64::NEG_INFINITY, f64::max);
    (output, best_mic)
}
