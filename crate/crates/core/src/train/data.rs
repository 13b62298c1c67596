use std::path::Path;

use rayon::prelude::*;

use crate::audio::{read_wav, AudioBuffer};
use crate::dsp::{frame_count, magnitudes, stft, Spectrogram};
use crate::error::{CssError, Result};
use crate::pipeline::pad_for_analysis;
use crate::sim::{read_manifest, simulate, MixtureRecipe, OverlapPattern};

use super::loss::MaskTargets;

/// One mixture with its reference-microphone ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub mixture: AudioBuffer<f64>,
    /// Reverberant image of each talker at the reference microphone.
    pub sources: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    pub overlap_ratio: f64,
    pub pattern: OverlapPattern,
}

impl TrainingExample {
    fn check(self) -> Result<Self> {
        let n = self.mixture.len();
        if self.sources.is_empty() || self.sources.len() > 2 {
            return Err(CssError::Contract(format!("{}: {} sources", self.id, self.sources.len())));
        }
        if self.sources.iter().any(|s| s.len() != n) || self.noise.len() != n {
            return Err(CssError::Contract(format!(
                "{}: reference signals do not match the {n}-sample mixture",
                self.id
            )));
        }
        Ok(self)
    }
}

/// Simulates recipes in parallel, keeping the first `channels` microphones.
pub fn examples_from_recipes(recipes: &[MixtureRecipe], channels: usize) -> Result<Vec<TrainingExample>> {
    let keep: Vec<usize> = (0..channels).collect();
    recipes
        .par_iter()
        .map(|r| {
            let m = simulate(r)?;
            TrainingExample {
                id: r.id.clone(),
                mixture: m.mixture.select_channels(&keep)?,
                sources: m.images.iter().map(|im| im.channel(0).to_vec()).collect(),
                noise: m.noise.channel(0).to_vec(),
                overlap_ratio: m.overlap_ratio,
                pattern: r.pattern,
            }
            .check()
        })
        .collect()
}

/// Reads a simulated dataset, keeping the first `channels` microphones.
pub fn load_examples(manifest: &Path, channels: usize) -> Result<Vec<TrainingExample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let keep: Vec<usize> = (0..channels).collect();
    read_manifest(manifest)?
        .par_iter()
        .map(|rec| {
            let mono = |p: &Path| -> Result<Vec<f64>> { Ok(read_wav(base.join(p))?.into_channels().swap_remove(0)) };
            TrainingExample {
                id: rec.recipe.id.clone(),
                mixture: read_wav(base.join(&rec.mixture_file))?.select_channels(&keep)?,
                sources: rec.source_files.iter().map(|p| mono(p)).collect::<Result<_>>()?,
                noise: mono(&rec.noise_file)?,
                overlap_ratio: rec.overlap_ratio,
                pattern: rec.recipe.pattern,
            }
            .check()
        })
        .collect()
}

/// An example padded for analysis and held at training precision.
pub(crate) struct PreparedExample {
    mixture: AudioBuffer<f32>,
    sources: [Vec<f32>; 2],
    noise: Vec<f32>,
    talkers: usize,
    pub frames: usize,
}

impl PreparedExample {
    pub fn new(ex: &TrainingExample, window_size: usize, hop: usize) -> Result<Self> {
        let (mixture, _) = pad_for_analysis(&ex.mixture.cast::<f32>(), hop);
        let pad = |x: &[f64]| -> Vec<f32> {
            let (p, _) = pad_for_analysis(&AudioBuffer::mono(x.iter().map(|&v| v as f32).collect()), hop);
            p.into_channels().swap_remove(0)
        };
        let silent = vec![0.0; ex.mixture.len()];
        let second = ex.sources.get(1).unwrap_or(&silent);
        Ok(Self {
            frames: frame_count(mixture.len(), window_size, hop),
            mixture,
            sources: [pad(&ex.sources[0]), pad(second)],
            noise: pad(&ex.noise),
            talkers: ex.sources.len(),
        })
    }

    /// Mixture spectrogram and magnitude targets for frames `start .. start + len`;
    /// frames outside the padded recording are zero.
    pub fn window(
        &self,
        start: isize,
        len: usize,
        window_size: usize,
        hop: usize,
        noisy_targets: bool,
    ) -> Result<(Spectrogram<f32>, MaskTargets<f32>)> {
        let lo = start.max(0) as usize;
        let hi = ((start + len as isize).max(0) as usize).min(self.frames);
        let spec_of = |chans: Vec<Vec<f32>>| -> Result<Spectrogram<f32>> {
            let full = if hi > lo {
                let a = lo * hop;
                let b = (hi - 1) * hop + window_size;
                let cut = chans.into_iter().map(|c| c[a..b].to_vec()).collect();
                let part = stft(&AudioBuffer::new(cut, crate::audio::SAMPLE_RATE)?, window_size, hop)?;
                Some(part)
            } else {
                None
            };
            let channels = full.as_ref().map_or(1, |s| s.channels());
            let mut out = Spectrogram::zeros(channels, len, window_size, hop);
            if let Some(part) = full {
                let off = (lo as isize - start) as usize;
                for c in 0..channels {
                    for t in 0..part.frames() {
                        for f in 0..part.bins() {
                            out.set(c, off + t, f, part.at(c, t, f));
                        }
                    }
                }
            }
            Ok(out)
        };
        let mixture = spec_of(self.mixture.channels().to_vec())?;
        let y = magnitudes(&mixture, 0);
        let bins = mixture.bins();
        let (sources, noise) = if noisy_targets {
            // Each talker takes an equal share of the noise.
            let k = self.talkers as f32;
            let share = |s: &[f32]| -> Vec<f32> { s.iter().zip(&self.noise).map(|(a, n)| a + n / k).collect() };
            let s0 = magnitudes(&spec_of(vec![share(&self.sources[0])])?, 0);
            let s1 = if self.talkers > 1 {
                magnitudes(&spec_of(vec![share(&self.sources[1])])?, 0)
            } else {
                vec![0.0; len * bins]
            };
            ([s0, s1], None)
        } else {
            let s0 = magnitudes(&spec_of(vec![self.sources[0].clone()])?, 0);
            let s1 = magnitudes(&spec_of(vec![self.sources[1].clone()])?, 0);
            let n = magnitudes(&spec_of(vec![self.noise.clone()])?, 0);
            ([s0, s1], Some(n))
        };
        Ok((
            mixture,
            MaskTargets {
                frames: len,
                bins,
                mixture: y,
                sources,
                noise,
            },
        ))
    }
}
