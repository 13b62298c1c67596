//! STFT analysis/synthesis, network input features and mask application.
//!
//! Analysis and synthesis both use a periodic square-root Hann window with
//! 50% overlap, so the product of the two windows sums to one and
//! overlap-add reconstructs the interior of the signal exactly.

use std::f64::consts::PI;

use css_tensor::Tensor;
use num_complex::Complex;
use realfft::RealFftPlanner;

use crate::audio::AudioBuffer;
use crate::error::{CssError, Result};
use crate::Float;

pub const DEFAULT_WINDOW: usize = 512;
pub const DEFAULT_HOP: usize = 256;

/// Floor added to magnitudes before the logarithm.
pub const LOG_FLOOR: f64 = 1e-7;
/// Feature dimensions with variance below this are treated as constant.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Complex STFT values laid out `[channel × frame × bin]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<T> {
    values: Vec<Complex<T>>,
    channels: usize,
    frames: usize,
    window_size: usize,
    hop: usize,
}

impl<T: Float> Spectrogram<T> {
    pub fn new(
        values: Vec<Complex<T>>,
        channels: usize,
        frames: usize,
        window_size: usize,
        hop: usize,
    ) -> Result<Self> {
        let bins = window_size / 2 + 1;
        if values.len() != channels * frames * bins {
            return Err(CssError::Dimension(format!(
                "{} values do not fill {channels}×{frames}×{bins}",
                values.len()
            )));
        }
        Ok(Self {
            values,
            channels,
            frames,
            window_size,
            hop,
        })
    }

    pub fn zeros(channels: usize, frames: usize, window_size: usize, hop: usize) -> Self {
        let bins = window_size / 2 + 1;
        Self {
            values: vec![Complex::new(T::zero(), T::zero()); channels * frames * bins],
            channels,
            frames,
            window_size,
            hop,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn at(&self, channel: usize, frame: usize, bin: usize) -> Complex<T> {
        self.values[(channel * self.frames + frame) * self.bins() + bin]
    }

    pub fn set(&mut self, channel: usize, frame: usize, bin: usize, v: Complex<T>) {
        let bins = self.bins();
        self.values[(channel * self.frames + frame) * bins + bin] = v;
    }

    /// All frames of one channel, `[frame × bin]`.
    pub fn channel(&self, c: usize) -> &[Complex<T>] {
        let n = self.frames * self.bins();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [Complex<T>] {
        let n = self.frames * self.bins();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    /// Copies `len` frames starting at `start` (which may be negative or run
    /// past the end); frames outside the recording are zero.
    pub fn frame_window(&self, start: isize, len: usize) -> Self {
        let bins = self.bins();
        let mut out = Self::zeros(self.channels, len, self.window_size, self.hop);
        for c in 0..self.channels {
            for i in 0..len {
                let t = start + i as isize;
                if t < 0 || t as usize >= self.frames {
                    continue;
                }
                let src = (c * self.frames + t as usize) * bins;
                let dst = (c * len + i) * bins;
                out.values[dst..dst + bins].copy_from_slice(&self.values[src..src + bins]);
            }
        }
        out
    }

    /// A single-channel spectrogram holding channel `c`.
    pub fn select_channel(&self, c: usize) -> Self {
        Self {
            values: self.channel(c).to_vec(),
            channels: 1,
            frames: self.frames,
            window_size: self.window_size,
            hop: self.hop,
        }
    }

    pub fn energy(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.norm_sqr().to_f64().unwrap_or(0.0))
            .sum()
    }
}

/// Real masks `[mask × frame × bin]`, every entry in `[0, 1]`.
/// By convention the last mask is the noise mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<T> {
    values: Vec<T>,
    num_masks: usize,
    frames: usize,
    bins: usize,
}

impl<T: Float> MaskSet<T> {
    pub fn new(values: Vec<T>, num_masks: usize, frames: usize, bins: usize) -> Result<Self> {
        if values.len() != num_masks * frames * bins {
            return Err(CssError::Dimension(format!(
                "{} mask values do not fill {num_masks}×{frames}×{bins}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(CssError::Contract(format!("mask entry {bad} outside [0, 1]")));
        }
        Ok(Self {
            values,
            num_masks,
            frames,
            bins,
        })
    }

    pub fn filled(num_masks: usize, frames: usize, bins: usize, value: T) -> Result<Self> {
        Self::new(vec![value; num_masks * frames * bins], num_masks, frames, bins)
    }

    pub fn num_masks(&self) -> usize {
        self.num_masks
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Mask `m` as a `[frame × bin]` slice.
    pub fn mask(&self, m: usize) -> &[T] {
        let n = self.frames * self.bins;
        &self.values[m * n..(m + 1) * n]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Frames `[start, start + len)` of every mask.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(CssError::Dimension(format!(
                "frames {start}..{} out of {}",
                start + len,
                self.frames
            )));
        }
        let mut values = Vec::with_capacity(self.num_masks * len * self.bins);
        for m in 0..self.num_masks {
            let mask = self.mask(m);
            values.extend_from_slice(&mask[start * self.bins..(start + len) * self.bins]);
        }
        Ok(Self {
            values,
            num_masks: self.num_masks,
            frames: len,
            bins: self.bins,
        })
    }
}

/// Normalized network input `[frame × feature_dim]` plus the statistics
/// used to normalize it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor<T> {
    pub values: Tensor<T>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Float> FeatureTensor<T> {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Feature dimension for `channels` microphones: log-magnitude of the
/// reference channel plus a cos/sin IPD pair per additional channel.
pub fn feature_dim(bins: usize, channels: usize) -> usize {
    bins * (1 + 2 * channels.saturating_sub(1))
}

/// Periodic square-root Hann window.
pub fn sqrt_hann<T: Float>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::lit((0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).sqrt()))
        .collect()
}

fn check_geometry(window_size: usize, hop: usize) -> Result<()> {
    if !window_size.is_power_of_two() || window_size < 2 {
        return Err(CssError::Config(format!(
            "window size {window_size} must be a power of two"
        )));
    }
    if hop * 2 != window_size {
        return Err(CssError::Config(format!(
            "hop {hop} must be half the window size {window_size}"
        )));
    }
    Ok(())
}

/// Number of full analysis frames in `len` samples.
pub fn frame_count(len: usize, window_size: usize, hop: usize) -> usize {
    if len < window_size {
        0
    } else {
        (len - window_size) / hop + 1
    }
}

pub fn stft<T: Float>(audio: &AudioBuffer<T>, window_size: usize, hop: usize) -> Result<Spectrogram<T>> {
    check_geometry(window_size, hop)?;
    if audio.len() < window_size {
        return Err(CssError::Contract(format!(
            "audio of {} samples is shorter than one {window_size}-sample window",
            audio.len()
        )));
    }
    let frames = frame_count(audio.len(), window_size, hop);
    let bins = window_size / 2 + 1;
    let window = sqrt_hann::<T>(window_size);
    let mut planner = RealFftPlanner::<T>::new();
    let fft = planner.plan_fft_forward(window_size);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let mut values = Vec::with_capacity(audio.num_channels() * frames * bins);
    for ch in audio.channels() {
        for f in 0..frames {
            let seg = &ch[f * hop..f * hop + window_size];
            for ((dst, &x), &w) in input.iter_mut().zip(seg).zip(&window) {
                *dst = x * w;
            }
            fft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .map_err(|e| CssError::Contract(format!("fft: {e}")))?;
            values.extend_from_slice(&output);
        }
    }
    Spectrogram::new(values, audio.num_channels(), frames, window_size, hop)
}

/// Overlap-add inverse of [`stft`] for every channel of `spec`.
/// Output length is `(frames - 1) * hop + window_size`.
pub fn istft<T: Float>(spec: &Spectrogram<T>) -> Result<AudioBuffer<T>> {
    let n = spec.window_size();
    check_geometry(n, spec.hop())?;
    let bins = spec.bins();
    let frames = spec.frames();
    let len = if frames == 0 { 0 } else { (frames - 1) * spec.hop() + n };
    let window = sqrt_hann::<T>(n);
    let scale = T::one() / T::lit(n as f64);
    let mut planner = RealFftPlanner::<T>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut buf = ifft.make_input_vec();
    let mut out = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let mut channels = Vec::with_capacity(spec.channels());
    for c in 0..spec.channels() {
        let src = spec.channel(c);
        let mut signal = vec![T::zero(); len];
        for f in 0..frames {
            buf.copy_from_slice(&src[f * bins..(f + 1) * bins]);
            // A real signal has purely real DC and Nyquist bins.
            buf[0].im = T::zero();
            buf[bins - 1].im = T::zero();
            ifft.process_with_scratch(&mut buf, &mut out, &mut scratch)
                .map_err(|e| CssError::Contract(format!("inverse fft: {e}")))?;
            let dst = &mut signal[f * spec.hop()..f * spec.hop() + n];
            for ((d, &x), &w) in dst.iter_mut().zip(&out).zip(&window) {
                *d += x * w * scale;
            }
        }
        channels.push(signal);
    }
    AudioBuffer::new(channels, crate::audio::SAMPLE_RATE)
}

/// Resynthesizes one waveform per mask in `masks`, each mask applied to the
/// reference channel.
pub fn istft_sources<T: Float>(spec: &Spectrogram<T>, masks: &MaskSet<T>) -> Result<Vec<AudioBuffer<T>>> {
    apply_masks(spec, masks)?.iter().map(istft).collect()
}

/// Per-source spectrograms `M_s ⊙ Y¹` for every mask in `masks`.
pub fn apply_masks<T: Float>(spec: &Spectrogram<T>, masks: &MaskSet<T>) -> Result<Vec<Spectrogram<T>>> {
    if masks.frames() != spec.frames() || masks.bins() != spec.bins() {
        return Err(CssError::Dimension(format!(
            "masks are {}×{} but the spectrogram is {}×{}",
            masks.frames(),
            masks.bins(),
            spec.frames(),
            spec.bins()
        )));
    }
    if let Some(bad) = masks
        .values()
        .iter()
        .find(|&&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(CssError::Contract(format!("mask entry {bad} outside [0, 1]")));
    }
    let reference = spec.channel(0);
    (0..masks.num_masks())
        .map(|m| {
            let values = reference
                .iter()
                .zip(masks.mask(m))
                .map(|(&y, &g)| y * g)
                .collect();
            Spectrogram::new(values, 1, spec.frames(), spec.window_size(), spec.hop())
        })
        .collect()
}

/// Wrapped inter-channel phase difference `θ^c − θ^1`, `[frame × bin]`.
pub fn ipd<T: Float>(spec: &Spectrogram<T>, channel: usize) -> Result<Vec<T>> {
    if channel >= spec.channels() {
        return Err(CssError::Dimension(format!(
            "channel {channel} of a {}-channel spectrogram",
            spec.channels()
        )));
    }
    Ok(spec
        .channel(channel)
        .iter()
        .zip(spec.channel(0))
        .map(|(&yc, &y1)| {
            let d = yc.arg() - y1.arg();
            wrap_phase(d)
        })
        .collect())
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_phase<T: Float>(x: T) -> T {
    let two_pi = T::lit(2.0 * PI);
    let pi = T::lit(PI);
    let mut y = x % two_pi;
    if y > pi {
        y -= two_pi;
    } else if y <= -pi {
        y += two_pi;
    }
    y
}

/// Un-normalized features `[frame × feature_dim]`: `log(|Y¹| + 1e-7)`, then
/// `cos(IPD(c))` and `sin(IPD(c))` for `c = 2..C`.
pub fn raw_features<T: Float>(spec: &Spectrogram<T>) -> Tensor<T> {
    let bins = spec.bins();
    let frames = spec.frames();
    let dim = feature_dim(bins, spec.channels());
    let floor = T::lit(LOG_FLOOR);
    let mut data = vec![T::zero(); frames * dim];
    let reference = spec.channel(0);
    for t in 0..frames {
        let row = &mut data[t * dim..(t + 1) * dim];
        for f in 0..bins {
            row[f] = (reference[t * bins + f].norm() + floor).ln();
        }
        for c in 1..spec.channels() {
            let other = spec.channel(c);
            let base = bins * (1 + 2 * (c - 1));
            for f in 0..bins {
                let d = other[t * bins + f].arg() - reference[t * bins + f].arg();
                row[base + f] = d.cos();
                row[base + bins + f] = d.sin();
            }
        }
    }
    Tensor::new(vec![frames, dim], data).expect("feature layout")
}

/// Eq.-1-style input features normalized per dimension along time.
pub fn compute_features<T: Float>(spec: &Spectrogram<T>) -> FeatureTensor<T> {
    normalize_features(raw_features(spec))
}

/// Zero-mean, unit-variance normalization of each column over the rows.
/// Columns whose variance is below [`VARIANCE_FLOOR`] become all zeros.
pub fn normalize_features<T: Float>(raw: Tensor<T>) -> FeatureTensor<T> {
    let (frames, dim) = (raw.rows(), raw.cols());
    let mut mean = vec![0f64; dim];
    let mut var = vec![0f64; dim];
    let data = raw.data();
    for row in data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64().unwrap_or(0.0);
        }
    }
    let n = frames.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    for row in data.chunks(dim) {
        for j in 0..dim {
            let d = row[j].to_f64().unwrap_or(0.0) - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let mut out = vec![T::zero(); data.len()];
    for (t, row) in data.chunks(dim).enumerate() {
        for j in 0..dim {
            if var[j] >= VARIANCE_FLOOR {
                out[t * dim + j] = T::lit((row[j].to_f64().unwrap_or(0.0) - mean[j]) / std[j]);
            }
        }
    }
    FeatureTensor {
        values: Tensor::new(vec![frames, dim], out).expect("same layout"),
        mean: mean.into_iter().map(T::lit).collect(),
        std: std.into_iter().map(T::lit).collect(),
    }
}

/// Magnitudes of one channel, `[frame × bin]`.
pub fn magnitudes<T: Float>(spec: &Spectrogram<T>, channel: usize) -> Vec<T> {
    spec.channel(channel).iter().map(|v| v.norm()).collect()
}
