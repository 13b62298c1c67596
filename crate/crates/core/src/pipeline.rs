//! Chunk-wise continuous separation of a long recording.
//!
//! A sliding window of `history + current + future` frames advances by
//! `current` frames. Masks are estimated on the whole window and only the
//! current segment is kept. Speaker channels of consecutive chunks are
//! aligned by mask correlation over the frames the two windows share.

use num_complex::Complex;

use crate::audio::AudioBuffer;
use crate::dsp::{apply_masks, compute_features, istft, stft, MaskSet, Spectrogram, DEFAULT_HOP, DEFAULT_WINDOW};
use crate::error::{CssError, Result};
use crate::model::{forward_masks, AttentionCache, ConformerWeights};
use crate::mvdr::beamform;
use crate::Float;

/// History / current / future frame counts of the sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChunkGeometry {
    pub history: usize,
    pub current: usize,
    pub future: usize,
}

impl Default for ChunkGeometry {
    /// 1.2 s / 0.8 s / 0.4 s at a 16 ms hop.
    fn default() -> Self {
        Self {
            history: 75,
            current: 50,
            future: 25,
        }
    }
}

impl ChunkGeometry {
    pub fn window(&self) -> usize {
        self.history + self.current + self.future
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.current == 0 || self.future == 0 {
            return Err(CssError::Config(format!(
                "chunk sizes must be positive, got {}/{}/{}",
                self.history, self.current, self.future
            )));
        }
        Ok(())
    }
}

/// One window position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub index: usize,
    /// First window frame; negative while the history reaches before the start.
    pub window_start: isize,
    pub current_start: usize,
    /// Real frames in the current segment (shorter for the final chunk).
    pub current_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkPlan {
    pub geometry: ChunkGeometry,
    pub total_frames: usize,
    pub chunks: Vec<Chunk>,
}

impl ChunkPlan {
    /// Zero frames before the recording in the first window.
    pub fn leading_pad(&self) -> usize {
        self.geometry.history
    }

    /// Zero frames after the recording in the last window.
    pub fn trailing_pad(&self) -> usize {
        let last = self.chunks.last().expect("plans are never empty");
        (last.window_start + self.geometry.window() as isize - self.total_frames as isize).max(0) as usize
    }
}

pub fn plan_chunks(total_frames: usize, geometry: ChunkGeometry) -> Result<ChunkPlan> {
    geometry.validate()?;
    if total_frames == 0 {
        return Err(CssError::Contract("cannot plan chunks for zero frames".into()));
    }
    let n = total_frames.div_ceil(geometry.current);
    let chunks = (0..n)
        .map(|i| {
            let current_start = i * geometry.current;
            Chunk {
                index: i,
                window_start: current_start as isize - geometry.history as isize,
                current_start,
                current_len: geometry.current.min(total_frames - current_start),
            }
        })
        .collect();
    Ok(ChunkPlan {
        geometry,
        total_frames,
        chunks,
    })
}

/// Assignment of raw network speaker outputs to output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Permutation {
    #[default]
    Identity,
    Swap,
}

impl Permutation {
    /// Raw speaker index feeding output channel `output`.
    pub fn source(self, output: usize) -> usize {
        match (self, output) {
            (Permutation::Swap, 0) => 1,
            (Permutation::Swap, 1) => 0,
            _ => output,
        }
    }
}

fn inner<T: Float>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x * y).to_f64().unwrap_or(0.0))
        .sum()
}

/// Picks the speaker assignment of `cur` that best matches `prev` on the
/// shared frames, by summed elementwise products. Ties keep the identity.
/// Only two speakers are supported; other counts return the identity.
pub fn align_channels<T: Float>(prev: &[&[T]], cur: &[&[T]]) -> Permutation {
    if prev.len() != 2 || cur.len() != 2 {
        return Permutation::Identity;
    }
    let keep = inner(prev[0], cur[0]) + inner(prev[1], cur[1]);
    let swap = inner(prev[0], cur[1]) + inner(prev[1], cur[0]);
    if swap > keep {
        Permutation::Swap
    } else {
        Permutation::Identity
    }
}

/// Energy-based merge of two single-channel streams, block by block.
///
/// When one stream's block energy exceeds the other's by more than `ratio`
/// (linear; 10 means 10 dB), the weak stream's energy is folded into the
/// strong one bin by bin (`|s'|² = |s|² + |w|²`, phase of the strong bin)
/// and the weak block is zeroed. Returns the number of merged blocks.
pub fn merge_channels<T: Float>(streams: &mut [Spectrogram<T>], block_frames: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 1.0) {
        return Err(CssError::Config(format!("merge ratio must exceed 1, got {ratio}")));
    }
    if block_frames == 0 {
        return Err(CssError::Config("merge block must hold at least one frame".into()));
    }
    let [a, b] = streams else {
        return Err(CssError::Contract(format!(
            "merging needs exactly two streams, got {}",
            streams.len()
        )));
    };
    if a.channels() != 1 || b.channels() != 1 || a.frames() != b.frames() || a.bins() != b.bins() {
        return Err(CssError::Dimension("merged streams must be equal-sized single channels".into()));
    }
    let bins = a.bins();
    let frames = a.frames();
    let energy = |s: &[Complex<T>]| -> f64 {
        s.iter().map(|v| v.norm_sqr().to_f64().unwrap_or(0.0)).sum()
    };
    let mut merged = 0;
    for start in (0..frames).step_by(block_frames) {
        let range = start * bins..(start + block_frames).min(frames) * bins;
        let (ea, eb) = (energy(&a.channel(0)[range.clone()]), energy(&b.channel(0)[range.clone()]));
        let (hi, lo) = (ea.max(eb), ea.min(eb));
        let trigger = if lo == 0.0 { hi > 0.0 } else { hi / lo > ratio };
        if !trigger {
            continue;
        }
        merged += 1;
        let (strong, weak) = if ea >= eb { (&mut *a, &mut *b) } else { (&mut *b, &mut *a) };
        let weak = &mut weak.channel_mut(0)[range.clone()];
        for (s, w) in strong.channel_mut(0)[range].iter_mut().zip(weak.iter_mut()) {
            let (sr, si) = (s.re.to_f64().unwrap_or(0.0), s.im.to_f64().unwrap_or(0.0));
            let (wr, wi) = (w.re.to_f64().unwrap_or(0.0), w.im.to_f64().unwrap_or(0.0));
            let mag = (sr * sr + si * si + wr * wr + wi * wi).sqrt();
            let (pr, pi) = if sr != 0.0 || si != 0.0 {
                let n = sr.hypot(si);
                (sr / n, si / n)
            } else if mag > 0.0 {
                let n = wr.hypot(wi);
                (wr / n, wi / n)
            } else {
                (0.0, 0.0)
            };
            *s = Complex::new(T::lit(mag * pr), T::lit(mag * pi));
            *w = Complex::new(T::zero(), T::zero());
        }
    }
    Ok(merged)
}

/// Anything that turns a window spectrogram into masks
/// `[speakers + 1 × window frames × bins]` (noise mask last).
pub trait MaskEstimator<T> {
    fn estimate(&mut self, window: &Spectrogram<T>, chunk: &Chunk) -> Result<MaskSet<T>>;
}

/// Microphones a model's input features were built from.
pub fn model_channels(feature_dim: usize, bins: usize) -> Result<usize> {
    if bins == 0 || feature_dim % bins != 0 || (feature_dim / bins) % 2 == 0 {
        return Err(CssError::Dimension(format!(
            "feature dimension {feature_dim} does not fit {bins} bins"
        )));
    }
    Ok((feature_dim / bins - 1) / 2 + 1)
}

/// The Conformer model with its per-stream attention cache.
pub struct ConformerEstimator<'a, T> {
    weights: &'a ConformerWeights<T>,
    cache: AttentionCache<T>,
    channels: usize,
}

impl<'a, T: Float> ConformerEstimator<'a, T> {
    pub fn new(weights: &'a ConformerWeights<T>) -> Result<Self> {
        let cfg = weights.config();
        Ok(Self {
            weights,
            cache: AttentionCache::new(cfg),
            channels: model_channels(cfg.feature_dim, cfg.num_bins)?,
        })
    }
}

impl<T: Float> MaskEstimator<T> for ConformerEstimator<'_, T> {
    fn estimate(&mut self, window: &Spectrogram<T>, _chunk: &Chunk) -> Result<MaskSet<T>> {
        if window.channels() < self.channels {
            return Err(CssError::Dimension(format!(
                "model expects {} microphones, audio has {}",
                self.channels,
                window.channels()
            )));
        }
        let input = if window.channels() == self.channels {
            compute_features(window)
        } else {
            let cut = Spectrogram::new(
                window.values()[..self.channels * window.frames() * window.bins()].to_vec(),
                self.channels,
                window.frames(),
                window.window_size(),
                window.hop(),
            )?;
            compute_features(&cut)
        };
        forward_masks(self.weights, &input, Some(&mut self.cache))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeparationMode {
    /// Masks applied to the reference microphone.
    SingleChannel,
    /// Mask-driven MVDR per window.
    Multichannel,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MergeOptions {
    pub block_frames: usize,
    /// Linear energy ratio; 10 is 10 dB.
    pub ratio: f64,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self {
            block_frames: 50,
            ratio: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SeparationOptions {
    pub geometry: ChunkGeometry,
    pub mode: SeparationMode,
    pub merge: Option<MergeOptions>,
    pub window_size: usize,
    pub hop: usize,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        Self {
            geometry: ChunkGeometry::default(),
            mode: SeparationMode::SingleChannel,
            merge: None,
            window_size: DEFAULT_WINDOW,
            hop: DEFAULT_HOP,
        }
    }
}

/// Result of [`separate_stream`].
#[derive(Clone, Debug)]
pub struct Separation<T> {
    /// One mono waveform per speaker, each as long as the input.
    pub outputs: Vec<AudioBuffer<T>>,
    pub chunks: usize,
    /// Chunks whose channel assignment differed from the previous chunk's.
    pub permutation_changes: usize,
    pub merged_blocks: usize,
}

/// Pads audio by one hop in front and enough at the back that every input
/// sample lies under two analysis frames. Returns the padded audio and the
/// offset of the first input sample.
pub fn pad_for_analysis<T: Float>(audio: &AudioBuffer<T>, hop: usize) -> (AudioBuffer<T>, usize) {
    let blocks = (audio.len() + 2 * hop).div_ceil(hop).max(3);
    let total = blocks * hop;
    let channels = audio
        .channels()
        .iter()
        .map(|c| {
            let mut v = vec![T::zero(); total];
            v[hop..hop + c.len()].copy_from_slice(c);
            v
        })
        .collect();
    (
        AudioBuffer::new(channels, audio.sample_rate()).expect("same layout"),
        hop,
    )
}

/// STFT of the padded input; see [`pad_for_analysis`].
pub fn analysis_spectrogram<T: Float>(audio: &AudioBuffer<T>, window_size: usize, hop: usize) -> Result<(Spectrogram<T>, usize)> {
    let (padded, offset) = pad_for_analysis(audio, hop);
    Ok((stft(&padded, window_size, hop)?, offset))
}

/// Inverse of [`analysis_spectrogram`]: resynthesizes and crops to `len` samples.
pub fn synthesize<T: Float>(spec: &Spectrogram<T>, offset: usize, len: usize) -> Result<AudioBuffer<T>> {
    let full = istft(spec)?;
    let channels = full
        .into_channels()
        .into_iter()
        .map(|c| c[offset..offset + len].to_vec())
        .collect();
    AudioBuffer::new(channels, crate::audio::SAMPLE_RATE)
}

/// Separates a recording with the Conformer model.
pub fn separate_stream<T: Float>(
    audio: &AudioBuffer<T>,
    weights: &ConformerWeights<T>,
    options: &SeparationOptions,
) -> Result<Separation<T>> {
    if options.geometry.window() > weights.config().max_chunk_len {
        return Err(CssError::ChunkLength {
            len: options.geometry.window(),
            max: weights.config().max_chunk_len,
        });
    }
    let mut est = ConformerEstimator::new(weights)?;
    separate_with(audio, &mut est, options)
}

/// Separates a recording with any mask estimator.
pub fn separate_with<T: Float, E: MaskEstimator<T>>(
    audio: &AudioBuffer<T>,
    estimator: &mut E,
    options: &SeparationOptions,
) -> Result<Separation<T>> {
    let (spec, offset) = analysis_spectrogram(audio, options.window_size, options.hop)?;
    if options.mode == SeparationMode::Multichannel && spec.channels() < 2 {
        return Err(CssError::NotApplicable(
            "multichannel separation needs at least two microphones".into(),
        ));
    }
    let plan = plan_chunks(spec.frames(), options.geometry)?;
    let g = options.geometry;
    let n = g.window();
    let bins = spec.bins();
    let frames = spec.frames();

    let mut speakers = 0;
    let mut full_masks: Vec<Vec<T>> = Vec::new();
    let mut beamformed: Vec<Vec<Complex<T>>> = Vec::new();
    let mut prev: Option<(isize, Vec<Vec<T>>)> = None;
    let mut last_perm = Permutation::Identity;
    let mut changes = 0;

    for chunk in &plan.chunks {
        let window = spec.frame_window(chunk.window_start, n);
        let masks = estimator.estimate(&window, chunk)?;
        if masks.frames() != n || masks.bins() != bins || masks.num_masks() < 2 {
            return Err(CssError::Dimension(format!(
                "estimator returned {}×{}×{} masks for a {n}-frame window",
                masks.num_masks(),
                masks.frames(),
                masks.bins()
            )));
        }
        if speakers == 0 {
            speakers = masks.num_masks() - 1;
            full_masks = vec![vec![T::zero(); frames * bins]; masks.num_masks()];
            beamformed = vec![vec![Complex::new(T::zero(), T::zero()); frames * bins]; speakers];
        }

        let mut perm = Permutation::Identity;
        if let Some((prev_start, prev_masks)) = &prev {
            // Frames of this window's history that were inside the previous window.
            let lo = chunk.window_start.max(*prev_start).max(0);
            let hi = (chunk.window_start + g.history as isize).min(*prev_start + n as isize);
            if hi > lo && speakers == 2 {
                let cur_off = (lo - chunk.window_start) as usize * bins;
                let prev_off = (lo - prev_start) as usize * bins;
                let len = (hi - lo) as usize * bins;
                let p: Vec<&[T]> = prev_masks.iter().map(|m| &m[prev_off..prev_off + len]).collect();
                let c: Vec<&[T]> = (0..2).map(|s| &masks.mask(s)[cur_off..cur_off + len]).collect();
                perm = align_channels(&p, &c);
            }
            if perm != last_perm {
                changes += 1;
            }
        }
        last_perm = perm;

        let mut ordered = Vec::with_capacity(masks.num_masks() * n * bins);
        for s in 0..speakers {
            ordered.extend_from_slice(masks.mask(perm.source(s)));
        }
        ordered.extend_from_slice(masks.mask(speakers));
        let ordered = MaskSet::new(ordered, masks.num_masks(), n, bins)?;

        let keep = g.history * bins..(g.history + chunk.current_len) * bins;
        let dst = chunk.current_start * bins..(chunk.current_start + chunk.current_len) * bins;
        match options.mode {
            SeparationMode::SingleChannel => {
                for (m, full) in full_masks.iter_mut().enumerate() {
                    full[dst.clone()].copy_from_slice(&ordered.mask(m)[keep.clone()]);
                }
            }
            SeparationMode::Multichannel => {
                for (s, out) in beamformed.iter_mut().enumerate() {
                    let y = beamform(&window, &ordered, s)?;
                    out[dst.clone()].copy_from_slice(&y.values()[keep.clone()]);
                }
            }
        }
        prev = Some((
            chunk.window_start,
            (0..speakers).map(|s| ordered.mask(s).to_vec()).collect(),
        ));
    }

    let mut sources: Vec<Spectrogram<T>> = match options.mode {
        SeparationMode::SingleChannel => {
            let all = MaskSet::new(full_masks.concat(), speakers + 1, frames, bins)?;
            let mut s = apply_masks(&spec, &all)?;
            s.truncate(speakers);
            s
        }
        SeparationMode::Multichannel => beamformed
            .into_iter()
            .map(|v| Spectrogram::new(v, 1, frames, spec.window_size(), spec.hop()))
            .collect::<Result<_>>()?,
    };
    let merged_blocks = match options.merge {
        Some(m) if sources.len() == 2 => merge_channels(&mut sources, m.block_frames, m.ratio)?,
        _ => 0,
    };
    let outputs = sources
        .iter()
        .map(|s| synthesize(s, offset, audio.len()))
        .collect::<Result<_>>()?;
    Ok(Separation {
        outputs,
        chunks: plan.chunks.len(),
        permutation_changes: changes,
        merged_blocks,
    })
}
