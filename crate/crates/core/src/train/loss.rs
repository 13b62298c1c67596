use css_tensor::{Tape, Tensor, Var};

use crate::dsp::MaskSet;
use crate::error::{CssError, Result};
use crate::pipeline::Permutation;
use crate::Float;

/// Magnitude targets for one `[T × F]` training window.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTargets<T> {
    pub frames: usize,
    pub bins: usize,
    /// Reference-microphone mixture magnitude.
    pub mixture: Vec<T>,
    /// One magnitude per speaker output, in speaker order.
    pub sources: [Vec<T>; 2],
    /// Target of the noise output; `None` leaves that output untrained.
    pub noise: Option<Vec<T>>,
}

impl<T: Float> MaskTargets<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames * self.bins;
        let check = |name: &str, v: &[T]| {
            if v.len() == n {
                Ok(())
            } else {
                Err(CssError::Shape {
                    name: name.into(),
                    expected: vec![self.frames, self.bins],
                    found: vec![v.len()],
                })
            }
        };
        check("mixture", &self.mixture)?;
        check("source 0", &self.sources[0])?;
        check("source 1", &self.sources[1])?;
        if let Some(noise) = &self.noise {
            check("noise", noise)?;
        }
        Ok(())
    }
}

/// Loss value plus the speaker assignment that achieved it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitLoss {
    pub value: f64,
    /// Mask `s` is scored against source `permutation.source(s)`.
    pub permutation: Permutation,
}

fn masked_error<T: Float>(mask: &[T], mix: &[T], target: &[T]) -> f64 {
    mask.iter()
        .zip(mix)
        .zip(target)
        .map(|((&m, &y), &x)| {
            let d = (m * y - x).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum()
}

/// Permutation-invariant mask-approximation loss:
/// `min_π Σ_s ‖M_s⊙|Y| − |X_π(s)|‖² / (T·F)` plus `‖M_n⊙|Y| − |N|‖² / (T·F)`
/// for the unpermuted noise output. Ties keep the identity.
pub fn pit_mask_loss<T: Float>(masks: &MaskSet<T>, targets: &MaskTargets<T>) -> Result<PitLoss> {
    targets.validate()?;
    if masks.frames() != targets.frames || masks.bins() != targets.bins {
        return Err(CssError::Shape {
            name: "masks".into(),
            expected: vec![targets.frames, targets.bins],
            found: vec![masks.frames(), masks.bins()],
        });
    }
    if masks.num_masks() < 2 || (targets.noise.is_some() && masks.num_masks() < 3) {
        return Err(CssError::Contract(format!(
            "{} masks cannot cover the requested targets",
            masks.num_masks()
        )));
    }
    let n = (targets.frames * targets.bins).max(1) as f64;
    let y = &targets.mixture;
    let mut best: Option<PitLoss> = None;
    for p in [Permutation::Identity, Permutation::Swap] {
        let e: f64 = (0..2)
            .map(|s| masked_error(masks.mask(s), y, &targets.sources[p.source(s)]))
            .sum();
        if best.is_none_or(|b| e / n < b.value) {
            best = Some(PitLoss { value: e / n, permutation: p });
        }
    }
    let mut best = best.expect("two candidates");
    if let Some(noise) = &targets.noise {
        best.value += masked_error(masks.mask(2), y, noise) / n;
    }
    Ok(best)
}

/// [`pit_mask_loss`] on a tape. `masks` are `[T × F]` variables; the
/// returned scalar is differentiable through the chosen assignment only.
pub fn pit_mask_loss_on_tape<T: Float>(
    tape: &mut Tape<T>,
    masks: &[Var],
    targets: &MaskTargets<T>,
) -> Result<(Var, PitLoss)> {
    targets.validate()?;
    let shape = [targets.frames, targets.bins];
    let need = if targets.noise.is_some() { 3 } else { 2 };
    if masks.len() < need {
        return Err(CssError::Contract(format!("{} masks cannot cover the requested targets", masks.len())));
    }
    for &m in masks.iter().take(need) {
        if tape.shape(m) != shape {
            return Err(CssError::Shape {
                name: "masks".into(),
                expected: shape.to_vec(),
                found: tape.shape(m).to_vec(),
            });
        }
    }
    let konst = |tape: &mut Tape<T>, v: &[T]| tape.constant(Tensor::new(shape.to_vec(), v.to_vec()).expect("validated"));
    let y = konst(tape, &targets.mixture);
    let x = [konst(tape, &targets.sources[0]), konst(tape, &targets.sources[1])];
    let err = |tape: &mut Tape<T>, mask: Var, target: Var| -> Result<Var> {
        let est = tape.mul(mask, y)?;
        let d = tape.sub(est, target)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.mean(sq))
    };
    let mut branches = Vec::with_capacity(2);
    for p in [Permutation::Identity, Permutation::Swap] {
        let a = err(tape, masks[0], x[p.source(0)])?;
        let b = err(tape, masks[1], x[p.source(1)])?;
        let total = tape.add(a, b)?;
        let value = tape.value(total).data()[0].to_f64().unwrap_or(f64::NAN);
        branches.push((total, value, p));
    }
    let (mut loss, mut value, permutation) = if branches[1].1 < branches[0].1 { branches[1] } else { branches[0] };
    if let Some(noise) = &targets.noise {
        let nv = konst(tape, noise);
        let term = err(tape, masks[2], nv)?;
        value += tape.value(term).data()[0].to_f64().unwrap_or(f64::NAN);
        loss = tape.add(loss, term)?;
    }
    Ok((loss, PitLoss { value, permutation }))
}
