use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::audio::SAMPLE_RATE;
use crate::error::{CssError, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// Taps of the windowed-sinc fractional-delay filter.
pub const SINC_TAPS: usize = 32;
/// Radius of the default circular array, in metres.
pub const ARRAY_RADIUS: f64 = 0.0425;
pub const MAX_REFLECTION_ORDER: usize = 6;

/// A shoebox room with a microphone array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Length, width, height in metres.
    pub dims: [f64; 3],
    /// Energy absorption coefficient of every wall, in `[0, 1)`.
    pub absorption: f64,
    pub max_order: usize,
    pub mics: Vec<[f64; 3]>,
}

impl RoomSpec {
    pub fn check_inside(&self, p: [f64; 3], what: &str) -> Result<()> {
        if (0..3).all(|i| p[i] > 0.0 && p[i] < self.dims[i]) {
            Ok(())
        } else {
            Err(CssError::Geometry(format!(
                "{what} at {p:?} is not strictly inside the {:?} room",
                self.dims
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0)) {
            return Err(CssError::Geometry(format!("room dimensions {:?} must be positive", self.dims)));
        }
        if !(0.0..1.0).contains(&self.absorption) {
            return Err(CssError::Config(format!("absorption {} outside [0, 1)", self.absorption)));
        }
        if self.max_order > MAX_REFLECTION_ORDER {
            return Err(CssError::Config(format!(
                "reflection order {} above the supported {MAX_REFLECTION_ORDER}",
                self.max_order
            )));
        }
        for (i, &m) in self.mics.iter().enumerate() {
            self.check_inside(m, &format!("microphone {i}"))?;
        }
        Ok(())
    }
}

/// Centre microphone plus six on a horizontal circle.
pub fn circular_array(center: [f64; 3], radius: f64) -> Vec<[f64; 3]> {
    let mut mics = vec![center];
    for k in 0..6 {
        let a = k as f64 * PI / 3.0;
        mics.push([center[0] + radius * a.cos(), center[1] + radius * a.sin(), center[2]]);
    }
    mics
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Delay in samples for a path of `d` metres.
pub fn delay_samples(d: f64) -> f64 {
    d / SPEED_OF_SOUND * SAMPLE_RATE as f64
}

/// Adds `amp · δ(n − tau)` realized with a Hann-windowed sinc over taps
/// `floor(tau) − 15 ..= floor(tau) + 16`.
pub(crate) fn add_fractional_impulse(h: &mut [f64], tau: f64, amp: f64) {
    let half = (SINC_TAPS / 2) as isize;
    let base = tau.floor() as isize;
    for k in base - half + 1..=base + half {
        if k < 0 || k as usize >= h.len() {
            continue;
        }
        let x = k as f64 - tau;
        let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
        let w = 0.5 + 0.5 * (PI * x / half as f64).cos();
        h[k as usize] += amp * sinc * w;
    }
}

/// Image positions and reflection counts along one axis:
/// `2nL ± s` with `|2n − p|` reflections.
fn axis_images(s: f64, len: f64, max_order: usize) -> Vec<(f64, usize)> {
    let n_max = max_order as i64 / 2 + 1;
    let mut out = Vec::new();
    for n in -n_max..=n_max {
        for p in 0..2i64 {
            let refl = (2 * n - p).unsigned_abs() as usize;
            if refl <= max_order {
                let pos = 2.0 * n as f64 * len + if p == 0 { s } else { -s };
                out.push((pos, refl));
            }
        }
    }
    out
}

/// Arrival delays (samples) and amplitudes of every image source up to
/// the room's reflection order. Amplitude is `β^reflections / distance`
/// with `β = √(1 − absorption)`.
pub fn image_arrivals(room: &RoomSpec, src: [f64; 3], mic: [f64; 3]) -> Result<Vec<(f64, f64)>> {
    room.validate()?;
    room.check_inside(src, "source")?;
    room.check_inside(mic, "microphone")?;
    let beta = (1.0 - room.absorption).sqrt();
    let axes: Vec<Vec<(f64, usize)>> = (0..3)
        .map(|i| axis_images(src[i], room.dims[i], room.max_order))
        .collect();
    let mut out = Vec::new();
    for &(x, rx) in &axes[0] {
        for &(y, ry) in &axes[1] {
            if rx + ry > room.max_order {
                continue;
            }
            for &(z, rz) in &axes[2] {
                let order = rx + ry + rz;
                if order > room.max_order {
                    continue;
                }
                let d = distance([x, y, z], mic).max(1e-3);
                out.push((delay_samples(d), beta.powi(order as i32) / d));
            }
        }
    }
    Ok(out)
}

/// Image-method room impulse response from `src` to `mic` at 16 kHz.
/// Length is `floor(max delay) + 17`, enough for the last filter tap.
pub fn image_method_rir(room: &RoomSpec, src: [f64; 3], mic: [f64; 3]) -> Result<Vec<f64>> {
    let arrivals = image_arrivals(room, src, mic)?;
    let max_delay = arrivals.iter().map(|a| a.0).fold(0.0, f64::max);
    let mut h = vec![0.0; max_delay.floor() as usize + SINC_TAPS / 2 + 1];
    for (tau, amp) in arrivals {
        add_fractional_impulse(&mut h, tau, amp);
    }
    Ok(h)
}
