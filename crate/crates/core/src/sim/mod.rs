//! Synthetic reverberant multi-talker mixtures.
//!
//! Rooms are simulated with the image method, talkers are either WAV files
//! or a deterministic pseudo-speech generator, and diffuse noise comes from
//! far-field plane waves. Every random choice flows from a recipe seed, so
//! a recipe fully determines its mixture.

mod noise;
mod rir;
mod speech;

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

pub use noise::{fibonacci_sphere, isotropic_noise, NOISE_SOURCES};
pub use rir::{
    circular_array, delay_samples, image_arrivals, image_method_rir, RoomSpec, ARRAY_RADIUS,
    MAX_REFLECTION_ORDER, SINC_TAPS, SPEED_OF_SOUND,
};
pub use speech::{speaker_profile, surrogate_speech, SpeakerProfile, SPEECH_RMS};

use crate::audio::{read_wav, write_wav, AudioBuffer, WavEncoding, SAMPLE_RATE};
use crate::error::{CssError, Result};

/// How the two utterances of a mixture are placed in time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum OverlapPattern {
    Single,
    /// Both utterances start together.
    Full,
    /// The second starts `offset` samples after the first.
    Partial { offset: usize },
    /// The second starts `gap` samples after the first ends.
    Sequential { gap: usize },
}

/// Where a talker's clean signal comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SourceRef {
    Surrogate { speaker: u64, seed: u64, samples: usize },
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source: SourceRef,
    /// First sample of the utterance in the mixture.
    pub start: usize,
    pub position: [f64; 3],
}

/// Everything needed to regenerate one mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecipe {
    pub id: String,
    pub seed: u64,
    /// Energy ratio of source 0 to source 1 at the reference microphone.
    pub sir_db: f64,
    /// Speech-to-noise ratio at the reference microphone; `None` disables noise.
    pub snr_db: Option<f64>,
    pub pattern: OverlapPattern,
    pub room: RoomSpec,
    pub sources: Vec<SourceSpec>,
    /// Reference-microphone RMS of the final mixture.
    pub level_dbfs: f64,
}

/// Relative frequency of each overlap pattern.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternWeights {
    pub single: f64,
    pub full: f64,
    pub partial: f64,
    pub sequential: f64,
}

impl Default for PatternWeights {
    fn default() -> Self {
        Self {
            single: 0.1,
            full: 0.45,
            partial: 0.35,
            sequential: 0.1,
        }
    }
}

/// Sampling ranges for [`generate_recipes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Microphones taken from the 7-element circular array (centre first).
    pub num_mics: usize,
    pub utterance_seconds: (f64, f64),
    pub patterns: PatternWeights,
    /// Start of the second utterance in partial overlap, as a fraction of the first.
    pub partial_offset: (f64, f64),
    pub sequential_gap_seconds: (f64, f64),
    pub max_order: usize,
    pub absorption: (f64, f64),
    pub sir_db: (f64, f64),
    pub snr_db: (f64, f64),
    pub noise: bool,
    /// Speaker ids are drawn from `first_speaker .. first_speaker + num_speakers`.
    pub first_speaker: u64,
    pub num_speakers: u64,
    pub level_dbfs: f64,
    /// Clean WAVs to draw talkers from instead of the pseudo-speech generator.
    pub speech_files: Vec<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_mics: 7,
            utterance_seconds: (2.5, 4.5),
            patterns: PatternWeights::default(),
            partial_offset: (0.2, 0.8),
            sequential_gap_seconds: (0.1, 1.0),
            max_order: 3,
            absorption: (0.35, 0.7),
            sir_db: (-5.0, 5.0),
            snr_db: (0.0, 10.0),
            noise: true,
            first_speaker: 0,
            num_speakers: 40,
            level_dbfs: -25.0,
            speech_files: Vec::new(),
        }
    }
}

fn range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Pattern for recipe `index`: a golden-ratio sequence walked through the
/// cumulative weights, so any run of recipes follows the weights closely.
fn pattern_kind(weights: &PatternWeights, index: usize, phase: f64) -> usize {
    let w = [weights.single, weights.full, weights.partial, weights.sequential];
    let total: f64 = w.iter().sum();
    let u = (phase + index as f64 * 0.618_033_988_749_895).fract() * total;
    let mut acc = 0.0;
    for (k, &x) in w.iter().enumerate() {
        acc += x;
        if u < acc {
            return k;
        }
    }
    3
}

fn place_array(rng: &mut ChaCha8Rng, dims: [f64; 3]) -> [f64; 3] {
    [
        rng.random_range(1.0..dims[0] - 1.0),
        rng.random_range(1.0..dims[1] - 1.0),
        rng.random_range(0.9..1.4),
    ]
}

fn place_sources(rng: &mut ChaCha8Rng, dims: [f64; 3], center: [f64; 3], count: usize) -> Vec<[f64; 3]> {
    let margin = 0.3;
    loop {
        let mut out: Vec<([f64; 3], f64)> = Vec::new();
        for _ in 0..count {
            let az = rng.random_range(-PI..PI);
            let r = rng.random_range(0.75..2.5);
            let p = [center[0] + r * az.cos(), center[1] + r * az.sin(), rng.random_range(1.2..1.8)];
            out.push((p, az));
        }
        let inside = out
            .iter()
            .all(|(p, _)| (0..3).all(|i| p[i] > margin && p[i] < dims[i] - margin));
        let apart = count < 2 || {
            let d = (out[0].1 - out[1].1).rem_euclid(2.0 * PI);
            d.min(2.0 * PI - d) > PI / 6.0
        };
        if inside && apart {
            return out.into_iter().map(|(p, _)| p).collect();
        }
    }
}

/// Draws `count` recipes. Recipe `i` uses seed `seed + i`.
pub fn generate_recipes(config: &SimConfig, count: usize, seed: u64) -> Result<Vec<MixtureRecipe>> {
    if config.num_mics == 0 || config.num_mics > 7 {
        return Err(CssError::Config(format!("{} microphones; the array has 1 to 7", config.num_mics)));
    }
    if config.speech_files.is_empty() && config.num_speakers < 2 {
        return Err(CssError::Config("at least two speakers are needed".into()));
    }
    let phase = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5).random::<f64>();
    (0..count)
        .map(|i| {
            let rseed = seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rseed);
            let dims = [rng.random_range(4.0..8.0), rng.random_range(4.0..8.0), rng.random_range(2.5..3.5)];
            let center = place_array(&mut rng, dims);
            let mut mics = circular_array(center, ARRAY_RADIUS);
            mics.truncate(config.num_mics);
            let room = RoomSpec {
                dims,
                absorption: range(&mut rng, config.absorption),
                max_order: config.max_order,
                mics,
            };
            let kind = pattern_kind(&config.patterns, i, phase);
            let n_src = if kind == 0 { 1 } else { 2 };
            let positions = place_sources(&mut rng, dims, center, n_src);
            let first = rng.random_range(0..config.num_speakers.max(1));
            let second = (first + rng.random_range(1..config.num_speakers.max(2))) % config.num_speakers.max(2);
            let speakers = [config.first_speaker + first, config.first_speaker + second];
            let mut refs = Vec::new();
            for s in 0..n_src {
                let source = if config.speech_files.is_empty() {
                    SourceRef::Surrogate {
                        speaker: speakers[s],
                        seed: rng.random(),
                        samples: (range(&mut rng, config.utterance_seconds) * SAMPLE_RATE as f64) as usize,
                    }
                } else {
                    SourceRef::File {
                        path: config.speech_files[rng.random_range(0..config.speech_files.len())].clone(),
                    }
                };
                refs.push(source);
            }
            let lens: Vec<usize> = refs.iter().map(source_len).collect::<Result<_>>()?;
            let pattern = match kind {
                0 => OverlapPattern::Single,
                1 => OverlapPattern::Full,
                2 => OverlapPattern::Partial {
                    offset: (range(&mut rng, config.partial_offset) * lens[0] as f64) as usize,
                },
                _ => OverlapPattern::Sequential {
                    gap: (range(&mut rng, config.sequential_gap_seconds) * SAMPLE_RATE as f64) as usize,
                },
            };
            let starts = match pattern {
                OverlapPattern::Single => vec![0],
                OverlapPattern::Full => vec![0, 0],
                OverlapPattern::Partial { offset } => vec![0, offset],
                OverlapPattern::Sequential { gap } => vec![0, lens[0] + gap],
            };
            let sources = refs
                .into_iter()
                .zip(starts)
                .zip(positions)
                .map(|((source, start), position)| SourceSpec { source, start, position })
                .collect();
            Ok(MixtureRecipe {
                id: format!("mix{i:05}"),
                seed: rseed,
                sir_db: range(&mut rng, config.sir_db),
                snr_db: config.noise.then(|| range(&mut rng, config.snr_db)),
                pattern,
                room,
                sources,
                level_dbfs: config.level_dbfs,
            })
        })
        .collect()
}

fn source_len(r: &SourceRef) -> Result<usize> {
    match r {
        SourceRef::Surrogate { samples, .. } => Ok(*samples),
        SourceRef::File { path } => Ok(hound::WavReader::open(path)?.duration() as usize),
    }
}

/// Dry signal of one source.
pub fn load_source(r: &SourceRef) -> Result<Vec<f64>> {
    match r {
        SourceRef::Surrogate { speaker, seed, samples } => {
            Ok(surrogate_speech(&speaker_profile(*speaker), *samples, *seed))
        }
        SourceRef::File { path } => Ok(read_wav(path)?.into_channels().swap_remove(0)),
    }
}

pub fn clean_sources(recipe: &MixtureRecipe) -> Result<Vec<Vec<f64>>> {
    recipe.sources.iter().map(|s| load_source(&s.source)).collect()
}

/// Linear convolution, truncated to `out_len` samples.
pub fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    convolve_many(x, std::slice::from_ref(&h.to_vec()), out_len).remove(0)
}

/// Convolves `x` with each filter, transforming `x` only once.
fn convolve_many(x: &[f64], filters: &[Vec<f64>], out_len: usize) -> Vec<Vec<f64>> {
    let longest = filters.iter().map(Vec::len).max().unwrap_or(0);
    if x.is_empty() || longest == 0 {
        return vec![vec![0.0; out_len]; filters.len()];
    }
    let n = (x.len() + longest - 1).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = fwd.make_input_vec();
    buf[..x.len()].copy_from_slice(x);
    let mut fx = fwd.make_output_vec();
    fwd.process(&mut buf, &mut fx).expect("fft sizes match");
    let mut fh = fwd.make_output_vec();
    let mut out = inv.make_output_vec();
    filters
        .iter()
        .map(|h| {
            buf.iter_mut().for_each(|v| *v = 0.0);
            buf[..h.len()].copy_from_slice(h);
            fwd.process(&mut buf, &mut fh).expect("fft sizes match");
            for (p, q) in fh.iter_mut().zip(&fx) {
                *p = *p * q / n as f64;
            }
            let last = fh.len() - 1;
            fh[0].im = 0.0;
            fh[last].im = 0.0;
            inv.process(&mut fh, &mut out).expect("fft sizes match");
            let mut y = out[..out_len.min(n)].to_vec();
            y.resize(out_len, 0.0);
            y
        })
        .collect()
}

/// A simulated mixture with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub mixture: AudioBuffer<f64>,
    /// Reverberant image of each source at every microphone.
    pub images: Vec<AudioBuffer<f64>>,
    pub noise: AudioBuffer<f64>,
    /// Samples where both dry utterances are active, over the mixture length.
    pub overlap_ratio: f64,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Fraction of `total` samples covered by both `[start, start + len)` intervals.
pub fn overlap_ratio(placements: &[(usize, usize)], total: usize) -> f64 {
    if placements.len() < 2 || total == 0 {
        return 0.0;
    }
    let (a, b) = (placements[0], placements[1]);
    let lo = a.0.max(b.0);
    let hi = (a.0 + a.1).min(b.0 + b.1);
    hi.saturating_sub(lo) as f64 / total as f64
}

/// Reverberates, rescales and mixes the clean sources of a recipe.
pub fn synthesize_mixture(recipe: &MixtureRecipe, clean: &[Vec<f64>]) -> Result<Mixture> {
    if clean.len() != recipe.sources.len() || clean.is_empty() || clean.len() > 2 {
        return Err(CssError::Contract(format!(
            "recipe has {} sources but {} signals were given",
            recipe.sources.len(),
            clean.len()
        )));
    }
    if let Some(i) = clean.iter().position(Vec::is_empty) {
        return Err(CssError::Contract(format!("source {i} has no samples")));
    }
    recipe.room.validate()?;
    if recipe.room.mics.is_empty() {
        return Err(CssError::Geometry("the room has no microphones".into()));
    }
    let total = recipe
        .sources
        .iter()
        .zip(clean)
        .map(|(s, c)| s.start + c.len())
        .max()
        .unwrap_or(0);
    let mut images: Vec<Vec<Vec<f64>>> = Vec::with_capacity(clean.len());
    for (spec, dry) in recipe.sources.iter().zip(clean) {
        let rirs = recipe
            .room
            .mics
            .iter()
            .map(|&mic| image_method_rir(&recipe.room, spec.position, mic))
            .collect::<Result<Vec<_>>>()?;
        let chans = convolve_many(dry, &rirs, total - spec.start)
            .into_iter()
            .map(|wet| {
                let mut ch = vec![0.0; total];
                ch[spec.start..].copy_from_slice(&wet);
                ch
            })
            .collect();
        images.push(chans);
    }
    if images.len() == 2 {
        let (e0, e1) = (energy(&images[0][0]), energy(&images[1][0]));
        if e1 > 0.0 {
            let g = (e0 / (e1 * 10f64.powf(recipe.sir_db / 10.0))).sqrt();
            images[1].iter_mut().flatten().for_each(|v| *v *= g);
        }
    }
    let speech_ref: Vec<f64> = (0..total).map(|t| images.iter().map(|im| im[0][t]).sum()).collect();
    let mut noise = match recipe.snr_db {
        Some(snr) => {
            let n = isotropic_noise(&recipe.room, total, recipe.seed ^ 0x0153)?.into_channels();
            let en = energy(&n[0]);
            let g = if en > 0.0 {
                (energy(&speech_ref) / (en * 10f64.powf(snr / 10.0))).sqrt()
            } else {
                0.0
            };
            n.into_iter().map(|c| c.into_iter().map(|v| v * g).collect()).collect()
        }
        None => vec![vec![0.0; total]; recipe.room.mics.len()],
    };
    let mix_ref: Vec<f64> = speech_ref.iter().zip(&noise[0]).map(|(s, n)| s + n).collect();
    let rms = (energy(&mix_ref) / total.max(1) as f64).sqrt();
    let gain = if rms > 0.0 { 10f64.powf(recipe.level_dbfs / 20.0) / rms } else { 1.0 };
    images.iter_mut().flatten().flatten().for_each(|v| *v *= gain);
    noise.iter_mut().flatten().for_each(|v| *v *= gain);
    let mixture: Vec<Vec<f64>> = (0..recipe.room.mics.len())
        .map(|m| {
            (0..total)
                .map(|t| images.iter().map(|im| im[m][t]).sum::<f64>() + noise[m][t])
                .collect()
        })
        .collect();
    let placements: Vec<(usize, usize)> = recipe.sources.iter().zip(clean).map(|(s, c)| (s.start, c.len())).collect();
    Ok(Mixture {
        mixture: AudioBuffer::new(mixture, SAMPLE_RATE)?,
        images: images
            .into_iter()
            .map(|c| AudioBuffer::new(c, SAMPLE_RATE))
            .collect::<Result<_>>()?,
        noise: AudioBuffer::new(noise, SAMPLE_RATE)?,
        overlap_ratio: overlap_ratio(&placements, total),
    })
}

/// Loads the clean sources of a recipe and synthesizes it.
pub fn simulate(recipe: &MixtureRecipe) -> Result<Mixture> {
    synthesize_mixture(recipe, &clean_sources(recipe)?)
}

/// One line of `manifest.jsonl`. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(flatten)]
    pub recipe: MixtureRecipe,
    pub mixture_file: PathBuf,
    /// Reference-microphone image of each source.
    pub source_files: Vec<PathBuf>,
    /// Reference-microphone noise.
    pub noise_file: PathBuf,
    pub overlap_ratio: f64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Simulates every recipe in parallel and writes WAVs plus a manifest to `dir`.
pub fn write_dataset(dir: &Path, recipes: &[MixtureRecipe]) -> Result<Vec<ManifestRecord>> {
    std::fs::create_dir_all(dir)?;
    let records: Vec<ManifestRecord> = recipes
        .par_iter()
        .map(|r| {
            let m = simulate(r)?;
            let name = |suffix: &str| PathBuf::from(format!("{}_{suffix}.wav", r.id));
            let mixture = name("mix");
            write_wav(dir.join(&mixture), &m.mixture, WavEncoding::Float32)?;
            let mut sources = Vec::new();
            for (i, img) in m.images.iter().enumerate() {
                let p = name(&format!("s{i}"));
                write_wav(dir.join(&p), &img.select_channels(&[0])?, WavEncoding::Float32)?;
                sources.push(p);
            }
            let noise = name("noise");
            write_wav(dir.join(&noise), &m.noise.select_channels(&[0])?, WavEncoding::Float32)?;
            Ok(ManifestRecord {
                recipe: r.clone(),
                mixture_file: mixture,
                source_files: sources,
                noise_file: noise,
                overlap_ratio: m.overlap_ratio,
            })
        })
        .collect::<Result<_>>()?;
    let mut out = BufWriter::new(std::fs::File::create(dir.join(MANIFEST_FILE))?);
    for rec in &records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
