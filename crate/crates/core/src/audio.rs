//! Multichannel sample buffers and WAV I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{CssError, Result};
use crate::Float;

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Time-domain samples, one `Vec` per channel, all of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer<T> {
    channels: Vec<Vec<T>>,
    sample_rate: u32,
}

impl<T: Float> AudioBuffer<T> {
    pub fn new(channels: Vec<Vec<T>>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(CssError::SampleRate(sample_rate));
        }
        if channels.is_empty() {
            return Err(CssError::Contract("audio needs at least one channel".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(CssError::Contract("all channels must have equal length".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<T>) -> Self {
        Self {
            channels: vec![samples],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn silence(num_channels: usize, len: usize) -> Self {
        Self {
            channels: vec![vec![T::zero(); len]; num_channels.max(1)],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<T>> {
        self.channels
    }

    pub fn cast<U: Float>(&self) -> AudioBuffer<U> {
        AudioBuffer {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&x| U::lit(x.to_f64().unwrap_or(0.0))).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, which: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(which.len());
        for &c in which {
            let ch = self.channels.get(c).ok_or_else(|| {
                CssError::Dimension(format!(
                    "channel {c} requested from {}-channel audio",
                    self.num_channels()
                ))
            })?;
            out.push(ch.clone());
        }
        Self::new(out, self.sample_rate)
    }

    /// Root-mean-square level of one channel in dBFS (−inf for silence).
    pub fn rms_dbfs(&self, c: usize) -> f64 {
        let ch = &self.channels[c];
        if ch.is_empty() {
            return f64::NEG_INFINITY;
        }
        let power: f64 = ch
            .iter()
            .map(|x| {
                let v = x.to_f64().unwrap_or(0.0);
                v * v
            })
            .sum::<f64>()
            / ch.len() as f64;
        10.0 * power.log10()
    }
}

/// Sample encoding used when writing WAV files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavEncoding {
    Int16,
    Float32,
}

/// Reads a 16 kHz WAV with 16-bit integer or 32-bit float samples.
/// Integer samples are scaled to `[-1, 1)`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer<f64>> {
    let mut reader = WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(CssError::SampleRate(spec.sample_rate));
    }
    let n_ch = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(CssError::Contract(format!(
                "unsupported WAV sample format {fmt:?}/{bits}-bit; use 16-bit int or 32-bit float"
            )))
        }
    };
    let frames = interleaved.len() / n_ch.max(1);
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &v) in frame.iter().enumerate() {
            channels[c].push(v);
        }
    }
    AudioBuffer::new(channels, spec.sample_rate)
}

pub fn write_wav<T: Float>(
    path: impl AsRef<Path>,
    audio: &AudioBuffer<T>,
    encoding: WavEncoding,
) -> Result<()> {
    let spec = WavSpec {
        channels: audio.num_channels() as u16,
        sample_rate: audio.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Int16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Int16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    for i in 0..audio.len() {
        for c in 0..audio.num_channels() {
            let v = audio.channel(c)[i].to_f64().unwrap_or(0.0);
            match encoding {
                WavEncoding::Int16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                WavEncoding::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
