use serde::{Deserialize, Serialize};

use crate::audio::SAMPLE_RATE;
use crate::dsp::{compute_features, MaskSet};
use crate::error::{CssError, Result};
use crate::model::{forward_masks, ConformerWeights};
use crate::pipeline::{model_channels, separate_stream, SeparationOptions};
use crate::sim::OverlapPattern;

use super::data::{PreparedExample, TrainingExample};
use super::loss::pit_mask_loss;
use super::metrics::si_snr;
use super::TrainConfig;

/// Sequential mixtures with a gap shorter than this count as short-silence.
const SHORT_GAP_SECONDS: f64 = 0.5;

/// Overlap condition of a mixture: `0S`/`0L` for non-overlapped talkers
/// with short/long silence between them, then 10-point overlap bands.
pub fn overlap_bucket(pattern: &OverlapPattern, overlap_ratio: f64) -> &'static str {
    match pattern {
        OverlapPattern::Single => "single",
        OverlapPattern::Sequential { gap } if overlap_ratio == 0.0 => {
            if (*gap as f64) < SHORT_GAP_SECONDS * SAMPLE_RATE as f64 {
                "0S"
            } else {
                "0L"
            }
        }
        _ => match overlap_ratio {
            r if r <= 0.10 => "0-10",
            r if r <= 0.20 => "10-20",
            r if r <= 0.30 => "20-30",
            r if r <= 0.40 => "30-40",
            _ => "40+",
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub overlap_ratio: f64,
    pub bucket: String,
    /// Mean SI-SNR of the unprocessed mixture against each talker.
    pub mixture_si_snr: f64,
    /// Mean SI-SNR of the outputs under the best assignment.
    pub si_snr: f64,
    pub improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: String,
    pub count: usize,
    pub mean_si_snr: f64,
    pub mean_improvement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub median_improvement: f64,
    pub mean_improvement: f64,
    pub buckets: Vec<BucketSummary>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut imps: Vec<f64> = rows.iter().map(|r| r.improvement).collect();
        imps.sort_by(f64::total_cmp);
        let median = match imps.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => imps[n / 2],
            n => (imps[n / 2 - 1] + imps[n / 2]) / 2.0,
        };
        let mean = imps.iter().sum::<f64>() / imps.len().max(1) as f64;
        let order = ["single", "0S", "0L", "0-10", "10-20", "20-30", "30-40", "40+"];
        let buckets = order
            .iter()
            .filter_map(|&b| {
                let members: Vec<&EvalRow> = rows.iter().filter(|r| r.bucket == b).collect();
                (!members.is_empty()).then(|| BucketSummary {
                    bucket: b.to_string(),
                    count: members.len(),
                    mean_si_snr: members.iter().map(|r| r.si_snr).sum::<f64>() / members.len() as f64,
                    mean_improvement: members.iter().map(|r| r.improvement).sum::<f64>() / members.len() as f64,
                })
            })
            .collect();
        Self {
            rows,
            median_improvement: median,
            mean_improvement: mean,
            buckets,
        }
    }

    /// Plain-text table of the per-bucket summary.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>5} {:>10} {:>10}\n", "overlap", "n", "SI-SNR", "SI-SNRi");
        for b in &self.buckets {
            s.push_str(&format!(
                "{:<8} {:>5} {:>10.2} {:>10.2}\n",
                b.bucket, b.count, b.mean_si_snr, b.mean_improvement
            ));
        }
        s.push_str(&format!(
            "{:<8} {:>5} {:>10} {:>10.2}  (median {:.2})\n",
            "all",
            self.rows.len(),
            "",
            self.mean_improvement,
            self.median_improvement
        ));
        s
    }
}

/// Scores separated waveforms against an example's talkers. Each talker
/// is matched to a distinct output, maximizing the mean SI-SNR.
pub fn evaluate_outputs(example: &TrainingExample, outputs: &[Vec<f64>]) -> Result<EvalRow> {
    let refs = &example.sources;
    if outputs.len() < refs.len() {
        return Err(CssError::Contract(format!(
            "{}: {} outputs for {} talkers",
            example.id,
            outputs.len(),
            refs.len()
        )));
    }
    let mix = example.mixture.channel(0);
    let mixture_si_snr = refs.iter().map(|r| si_snr(mix, r)).sum::<Result<f64>>()? / refs.len() as f64;
    let mut best = f64::NEG_INFINITY;
    for (i, a) in outputs.iter().enumerate() {
        if refs.len() == 1 {
            best = best.max(si_snr(a, &refs[0])?);
            continue;
        }
        for (j, b) in outputs.iter().enumerate() {
            if i != j {
                best = best.max((si_snr(a, &refs[0])? + si_snr(b, &refs[1])?) / 2.0);
            }
        }
    }
    Ok(EvalRow {
        id: example.id.clone(),
        overlap_ratio: example.overlap_ratio,
        bucket: overlap_bucket(&example.pattern, example.overlap_ratio).to_string(),
        mixture_si_snr,
        si_snr: best,
        improvement: best - mixture_si_snr,
    })
}

/// Runs the streaming separator on every example and scores the outputs.
pub fn evaluate(weights: &ConformerWeights<f32>, examples: &[TrainingExample], options: &SeparationOptions) -> Result<EvalReport> {
    use rayon::prelude::*;
    let rows = examples
        .par_iter()
        .map(|ex| {
            let sep = separate_stream(&ex.mixture.cast::<f32>(), weights, options)?;
            let outs: Vec<Vec<f64>> = sep
                .outputs
                .iter()
                .map(|o| o.channel(0).iter().map(|&v| v as f64).collect())
                .collect();
            evaluate_outputs(ex, &outs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

/// Mean PIT mask loss over consecutive chunks tiling each example. With
/// `weights` absent every mask is the constant 0.5.
pub fn mask_loss(weights: Option<&ConformerWeights<f32>>, examples: &[TrainingExample], config: &TrainConfig) -> Result<f64> {
    use rayon::prelude::*;
    let channels = model_channels(config.model.feature_dim, config.model.num_bins)?;
    let n = config.chunk_frames;
    let per_example: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let prep = PreparedExample::new(ex, config.window_size, config.hop)?;
            let mut sum = 0.0;
            let mut count = 0;
            for start in (0..prep.frames).step_by(n) {
                let (window, targets) =
                    prep.window(start as isize, n, config.window_size, config.hop, config.noisy_targets)?;
                let masks = match weights {
                    Some(w) => {
                        let cut = crate::dsp::Spectrogram::new(
                            window.values()[..channels * window.frames() * window.bins()].to_vec(),
                            channels,
                            window.frames(),
                            window.window_size(),
                            window.hop(),
                        )?;
                        forward_masks(w, &compute_features(&cut), None)?
                    }
                    None => MaskSet::filled(config.model.num_output_masks, n, window.bins(), 0.5f32)?,
                };
                sum += pit_mask_loss(&masks, &targets)?.value;
                count += 1;
            }
            Ok((sum, count))
        })
        .collect::<Result<_>>()?;
    let (sum, count) = per_example.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(sum / count.max(1) as f64)
}
