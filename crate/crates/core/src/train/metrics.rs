use crate::error::{CssError, Result};
use crate::pipeline::Permutation;

/// Reported for a perfect estimate.
pub const SI_SNR_CAP_DB: f64 = 80.0;

/// Scale-invariant SNR in dB after removing each signal's mean, clamped
/// to `±SI_SNR_CAP_DB`.
pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(CssError::Contract(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
    let (me, mr) = (mean(estimate), mean(reference));
    let r: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let e: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr <= 0.0 {
        return Err(CssError::Contract("reference is zero after mean removal".into()));
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target: f64 = alpha * alpha * rr;
    let residual: f64 = e.iter().zip(&r).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    let db = if residual <= 0.0 {
        if target > 0.0 {
            SI_SNR_CAP_DB
        } else {
            -SI_SNR_CAP_DB
        }
    } else if target <= 0.0 {
        -SI_SNR_CAP_DB
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB))
}

/// Mean SI-SNR of two estimates under the better of the two assignments;
/// estimate `s` is scored against reference `permutation.source(s)`.
pub fn best_permutation_si_snr(estimates: [&[f64]; 2], references: [&[f64]; 2]) -> Result<(f64, Permutation)> {
    let mut best = (f64::NEG_INFINITY, Permutation::Identity);
    for p in [Permutation::Identity, Permutation::Swap] {
        let v = (si_snr(estimates[0], references[p.source(0)])? + si_snr(estimates[1], references[p.source(1)])?) / 2.0;
        if v > best.0 {
            best = (v, p);
        }
    }
    Ok(best)
}
