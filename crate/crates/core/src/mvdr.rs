//! Mask-driven MVDR beamforming (reference-channel formulation).
//!
//! For each bin, `w = (Φ_n⁻¹ Φ_s / tr(Φ_n⁻¹ Φ_s)) e_ref` and the output is
//! `wᴴ Y`. Covariances are accumulated in `f64` whatever the sample type.

use num_complex::Complex;

use crate::dsp::{MaskSet, Spectrogram};
use crate::error::{CssError, Result};
use crate::Float;

type C64 = Complex<f64>;

/// Diagonal loading factor δ: Φ_n + δ·tr(Φ_n)/C·I.
pub const DIAGONAL_LOADING: f64 = 1e-6;
/// Guard on the accumulated mask weight.
pub const MASK_WEIGHT_FLOOR: f64 = 1e-8;
/// Bins whose `|tr(Φ_n⁻¹ Φ_s)|` falls below this pass the reference channel through.
pub const DEGENERATE_TRACE: f64 = 1e-12;
pub const REFERENCE_CHANNEL: usize = 0;

/// One Hermitian `C×C` matrix per frequency bin.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialCovariance {
    channels: usize,
    bins: usize,
    matrices: Vec<C64>,
    weight: Vec<f64>,
}

impl SpatialCovariance {
    /// Wraps explicit matrices laid out `[bin × row × col]`.
    pub fn from_matrices(channels: usize, bins: usize, matrices: Vec<C64>) -> Result<Self> {
        if matrices.len() != channels * channels * bins {
            return Err(CssError::Dimension(format!(
                "{} entries do not fill {bins} matrices of {channels}×{channels}",
                matrices.len()
            )));
        }
        Ok(Self {
            channels,
            bins,
            matrices,
            weight: vec![1.0; bins],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn matrix(&self, bin: usize) -> &[C64] {
        let n = self.channels * self.channels;
        &self.matrices[bin * n..(bin + 1) * n]
    }

    pub fn at(&self, bin: usize, row: usize, col: usize) -> C64 {
        self.matrix(bin)[row * self.channels + col]
    }

    /// Accumulated mask weight `Σ_t m(t, f)` of a bin.
    pub fn weight(&self, bin: usize) -> f64 {
        self.weight[bin]
    }

    /// Largest `|Φ_ij − conj(Φ_ji)|` over all bins.
    pub fn max_asymmetry(&self) -> f64 {
        let c = self.channels;
        let mut worst: f64 = 0.0;
        for f in 0..self.bins {
            let m = self.matrix(f);
            for i in 0..c {
                for j in 0..c {
                    worst = worst.max((m[i * c + j] - m[j * c + i].conj()).norm());
                }
            }
        }
        worst
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            matrices: self.matrices.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }
}

/// `Φ(f) = Σ_t m(t,f) Y(t,f) Y(t,f)ᴴ / max(Σ_t m(t,f), ε)` for a
/// `[frame × bin]` mask.
pub fn estimate_covariance<T: Float>(spec: &Spectrogram<T>, mask: &[T]) -> Result<SpatialCovariance> {
    let (c, frames, bins) = (spec.channels(), spec.frames(), spec.bins());
    if mask.len() != frames * bins {
        return Err(CssError::Dimension(format!(
            "mask of {} entries does not match {frames}×{bins} spectrogram",
            mask.len()
        )));
    }
    let mut matrices = vec![C64::new(0.0, 0.0); bins * c * c];
    let mut weight = vec![0.0; bins];
    let mut y = vec![C64::new(0.0, 0.0); c];
    for t in 0..frames {
        for f in 0..bins {
            let m = mask[t * bins + f].to_f64().unwrap_or(0.0);
            if m == 0.0 {
                continue;
            }
            weight[f] += m;
            for (ch, slot) in y.iter_mut().enumerate() {
                let v = spec.at(ch, t, f);
                *slot = C64::new(v.re.to_f64().unwrap_or(0.0), v.im.to_f64().unwrap_or(0.0));
            }
            let dst = &mut matrices[f * c * c..(f + 1) * c * c];
            for i in 0..c {
                for j in i..c {
                    let v = y[i] * y[j].conj() * m;
                    dst[i * c + j] += v;
                    if i != j {
                        dst[j * c + i] += v.conj();
                    }
                }
            }
        }
    }
    for f in 0..bins {
        let norm = weight[f].max(MASK_WEIGHT_FLOOR);
        for v in &mut matrices[f * c * c..(f + 1) * c * c] {
            *v /= norm;
        }
    }
    Ok(SpatialCovariance {
        channels: c,
        bins,
        matrices,
        weight,
    })
}

/// Per-bin complex beamformer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamformerWeights {
    channels: usize,
    bins: usize,
    values: Vec<C64>,
    fallback_bins: usize,
}

impl BeamformerWeights {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin(&self, f: usize) -> &[C64] {
        &self.values[f * self.channels..(f + 1) * self.channels]
    }

    /// Bins that fell back to reference pass-through.
    pub fn fallback_bins(&self) -> usize {
        self.fallback_bins
    }
}

/// Solves `A X = B` for square `n×n` row-major `A` and `B` by Gaussian
/// elimination with partial pivoting. `None` if `A` is singular.
fn solve(mut a: Vec<C64>, mut b: Vec<C64>, n: usize) -> Option<Vec<C64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i * n + col]
                .norm()
                .partial_cmp(&a[j * n + col].norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        let p = a[pivot * n + col];
        if !(p.norm() > 0.0) || !p.is_finite() {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
                b.swap(col * n + k, pivot * n + k);
            }
        }
        for r in col + 1..n {
            let factor = a[r * n + col] / p;
            if factor == C64::new(0.0, 0.0) {
                continue;
            }
            for k in col..n {
                let v = a[col * n + k];
                a[r * n + k] -= factor * v;
            }
            for k in 0..n {
                let v = b[col * n + k];
                b[r * n + k] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let p = a[col * n + col];
        for k in 0..n {
            let mut acc = b[col * n + k];
            for j in col + 1..n {
                acc -= a[col * n + j] * b[j * n + k];
            }
            b[col * n + k] = acc / p;
        }
    }
    b.iter().all(|v| v.is_finite()).then_some(b)
}

/// MVDR weights with the default diagonal loading.
pub fn mvdr_weights(
    phi_s: &SpatialCovariance,
    phi_n: &SpatialCovariance,
    ref_channel: usize,
) -> Result<BeamformerWeights> {
    mvdr_weights_loaded(phi_s, phi_n, ref_channel, DIAGONAL_LOADING)
}

pub fn mvdr_weights_loaded(
    phi_s: &SpatialCovariance,
    phi_n: &SpatialCovariance,
    ref_channel: usize,
    delta: f64,
) -> Result<BeamformerWeights> {
    let (c, bins) = (phi_s.channels, phi_s.bins);
    if phi_n.channels != c || phi_n.bins != bins {
        return Err(CssError::Dimension(format!(
            "speech covariance {c}×{bins} vs noise covariance {}×{}",
            phi_n.channels, phi_n.bins
        )));
    }
    if ref_channel >= c {
        return Err(CssError::Dimension(format!(
            "reference channel {ref_channel} of {c}"
        )));
    }
    let mut values = Vec::with_capacity(bins * c);
    let mut fallback_bins = 0;
    for f in 0..bins {
        let mut n = phi_n.matrix(f).to_vec();
        let trace_n: f64 = (0..c).map(|i| n[i * c + i].re).sum();
        let load = delta * trace_n / c as f64;
        for i in 0..c {
            n[i * c + i] += load;
        }
        let w = solve(n, phi_s.matrix(f).to_vec(), c).and_then(|x| {
            let tr: C64 = (0..c).map(|i| x[i * c + i]).sum();
            (tr.norm() >= DEGENERATE_TRACE)
                .then(|| (0..c).map(|i| x[i * c + ref_channel] / tr).collect::<Vec<_>>())
        });
        match w {
            Some(w) => values.extend(w),
            None => {
                fallback_bins += 1;
                values.extend((0..c).map(|i| C64::new(f64::from(u8::from(i == ref_channel)), 0.0)));
            }
        }
    }
    Ok(BeamformerWeights {
        channels: c,
        bins,
        values,
        fallback_bins,
    })
}

/// Single-channel output `wᴴ Y(t, f)`.
pub fn apply_weights<T: Float>(spec: &Spectrogram<T>, w: &BeamformerWeights) -> Result<Spectrogram<T>> {
    let (c, frames, bins) = (spec.channels(), spec.frames(), spec.bins());
    if w.channels != c || w.bins != bins {
        return Err(CssError::Dimension(format!(
            "weights for {}×{} applied to a {c}-channel, {bins}-bin spectrogram",
            w.channels, w.bins
        )));
    }
    let mut out = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        for f in 0..bins {
            let wf = w.bin(f);
            let mut acc = C64::new(0.0, 0.0);
            for (ch, wc) in wf.iter().enumerate() {
                let y = spec.at(ch, t, f);
                acc += wc.conj() * C64::new(y.re.to_f64().unwrap_or(0.0), y.im.to_f64().unwrap_or(0.0));
            }
            out.push(Complex::new(T::lit(acc.re), T::lit(acc.im)));
        }
    }
    Spectrogram::new(out, 1, frames, spec.window_size(), spec.hop())
}

/// Beamforms towards speaker `target`. The noise covariance uses the noise
/// mask plus every competing speaker mask, clipped to `[0, 1]`.
pub fn beamform<T: Float>(spec: &Spectrogram<T>, masks: &MaskSet<T>, target: usize) -> Result<Spectrogram<T>> {
    beamform_with(spec, masks, target, DIAGONAL_LOADING)
}

pub fn beamform_with<T: Float>(
    spec: &Spectrogram<T>,
    masks: &MaskSet<T>,
    target: usize,
    delta: f64,
) -> Result<Spectrogram<T>> {
    if spec.channels() < 2 {
        return Err(CssError::NotApplicable(
            "MVDR needs at least two microphones; use the single-channel masking path".into(),
        ));
    }
    if masks.num_masks() < 2 {
        return Err(CssError::Contract("beamforming needs speaker masks and a noise mask".into()));
    }
    let speakers = masks.num_masks() - 1;
    if target >= speakers {
        return Err(CssError::Dimension(format!(
            "target {target} but only {speakers} speaker masks"
        )));
    }
    if masks.frames() != spec.frames() || masks.bins() != spec.bins() {
        return Err(CssError::Dimension(format!(
            "masks {}×{} vs spectrogram {}×{}",
            masks.frames(),
            masks.bins(),
            spec.frames(),
            spec.bins()
        )));
    }
    let mut noise = masks.mask(speakers).to_vec();
    for s in (0..speakers).filter(|&s| s != target) {
        for (n, &m) in noise.iter_mut().zip(masks.mask(s)) {
            *n += m;
        }
    }
    noise.iter_mut().for_each(|n| *n = n.min(T::one()).max(T::zero()));
    let phi_s = estimate_covariance(spec, masks.mask(target))?;
    let phi_n = estimate_covariance(spec, &noise)?;
    let w = mvdr_weights_loaded(&phi_s, &phi_n, REFERENCE_CHANNEL, delta)?;
    apply_weights(spec, &w)
}
