//! Training and evaluation of the mask estimator.

mod data;
mod eval;
mod loss;
mod metrics;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use css_tensor::{BatchStats, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{examples_from_recipes, load_examples, TrainingExample};
pub use eval::{evaluate, evaluate_outputs, mask_loss, overlap_bucket, BucketSummary, EvalReport, EvalRow};
pub use loss::{pit_mask_loss, pit_mask_loss_on_tape, MaskTargets, PitLoss};
pub use metrics::{best_permutation_si_snr, si_snr, SI_SNR_CAP_DB};
pub use optim::{adamw_step, load_optimizer, save_optimizer, AdamWConfig, OptimizerState, Param, PEAK_LEARNING_RATE};
pub use schedule::{lr_at, Schedule};

use crate::dsp::{compute_features, DEFAULT_HOP, DEFAULT_WINDOW};
use crate::error::{CssError, Result};
use crate::model::{
    forward, init_weights, load_weights_for, save_weights, update_running_stats, BoundWeights, ConformerConfig,
    ConformerWeights, Mode, BATCHNORM_MOMENTUM,
};
use crate::pipeline::{model_channels, Permutation};
use data::PreparedExample;

/// Microphones used by the toy model: enough for inter-channel phase cues.
pub const TOY_MICS: usize = 2;

/// Peak rate for the tiny model; it needs a larger step than the full-size schedule.
pub const TOY_PEAK_LR: f64 = 1e-3;

/// Settings of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ConformerConfig,
    pub schedule: Schedule,
    pub peak_lr: f64,
    pub adamw: AdamWConfig,
    /// Chunks whose gradients are averaged per optimizer step.
    pub micro_batch: usize,
    /// Frames per training chunk.
    pub chunk_frames: usize,
    pub window_size: usize,
    pub hop: usize,
    /// Train speaker outputs on noisy single-talker targets and leave the
    /// noise output untrained.
    pub noisy_targets: bool,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    /// The small two-layer model used for desk-scale runs.
    pub fn toy(channels: usize) -> Self {
        let model = ConformerConfig::tiny(crate::dsp::feature_dim(crate::model::DEFAULT_NUM_BINS, channels));
        Self {
            chunk_frames: model.max_chunk_len,
            model,
            schedule: Schedule::TOY,
            peak_lr: TOY_PEAK_LR,
            adamw: AdamWConfig::default(),
            micro_batch: 4,
            window_size: DEFAULT_WINDOW,
            hop: DEFAULT_HOP,
            noisy_targets: false,
            checkpoint_every: 500,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.micro_batch == 0 || self.chunk_frames == 0 || self.checkpoint_every == 0 {
            return Err(CssError::Config("micro-batch, chunk length and checkpoint interval must be positive".into()));
        }
        if self.chunk_frames > self.model.max_chunk_len {
            return Err(CssError::ChunkLength {
                len: self.chunk_frames,
                max: self.model.max_chunk_len,
            });
        }
        if self.model.num_bins != self.window_size / 2 + 1 {
            return Err(CssError::Config(format!(
                "{} bins do not match a {}-sample window",
                self.model.num_bins, self.window_size
            )));
        }
        if self.model.num_output_masks < if self.noisy_targets { 2 } else { 3 } {
            return Err(CssError::Config("too few output masks for the training targets".into()));
        }
        model_channels(self.model.feature_dim, self.model.num_bins)?;
        Ok(())
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    /// Mean chunk loss of the step.
    pub loss: f64,
    /// Chunks whose best speaker assignment was the swapped one.
    pub permutation_flips: usize,
}

/// Where a run writes and what it resumes from.
#[derive(Clone, Debug, Default)]
pub struct TrainIo {
    pub checkpoint_dir: Option<PathBuf>,
    /// CSV loss log; appended to when resuming.
    pub log_path: Option<PathBuf>,
    /// Weights checkpoint to resume from; its optimizer sidecar must sit next to it.
    pub resume: Option<PathBuf>,
}

pub struct TrainRun {
    pub weights: ConformerWeights<f32>,
    pub optimizer: OptimizerState<f32>,
    /// Steps run by this call.
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Sidecar path holding the optimizer state of a weights checkpoint.
pub fn optimizer_path(weights: &Path) -> PathBuf {
    weights.with_extension("opt")
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step{step:06}.cssw"))
}

struct ChunkResult {
    loss: f64,
    permutation: Permutation,
    grads: Vec<(String, Tensor<f32>)>,
    stats: Vec<Option<BatchStats<f32>>>,
}

fn run_chunk(
    weights: &ConformerWeights<f32>,
    example: &PreparedExample,
    start: isize,
    config: &TrainConfig,
    channels: usize,
) -> Result<ChunkResult> {
    let (window, targets) = example.window(start, config.chunk_frames, config.window_size, config.hop, config.noisy_targets)?;
    let window = if window.channels() > channels {
        crate::dsp::Spectrogram::new(
            window.values()[..channels * window.frames() * window.bins()].to_vec(),
            channels,
            window.frames(),
            window.window_size(),
            window.hop(),
        )?
    } else {
        window
    };
    let features = compute_features(&window);
    let mut tape = Tape::new();
    let bound = BoundWeights::bind(&mut tape, weights, true);
    let x = tape.constant(features.values);
    let out = forward(&mut tape, weights, &bound, x, None, Mode::Train)?;
    let (loss, pit) = pit_mask_loss_on_tape(&mut tape, &out.masks, &targets)?;
    tape.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(name, v)| {
            let shape = weights.get(name).shape().to_vec();
            let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
            Ok((name.to_string(), g.reshape(&shape)?))
        })
        .collect::<Result<_>>()?;
    Ok(ChunkResult {
        loss: pit.value,
        permutation: pit.permutation,
        grads,
        stats: out.layers.into_iter().map(|l| l.batch_stats).collect(),
    })
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Trains with PIT on random chunks of `examples`. Chunk choice depends
/// only on the seed and step index, so resuming from a checkpoint replays
/// the uninterrupted run exactly.
pub fn train_toy(examples: &[TrainingExample], config: &TrainConfig, io: &TrainIo) -> Result<TrainRun> {
    config.validate()?;
    if examples.is_empty() {
        return Err(CssError::Contract("no training examples".into()));
    }
    let channels = model_channels(config.model.feature_dim, config.model.num_bins)?;
    if let Some(ex) = examples.iter().find(|e| e.mixture.num_channels() < channels) {
        return Err(CssError::Dimension(format!(
            "{} has {} microphones but the model needs {channels}",
            ex.id,
            ex.mixture.num_channels()
        )));
    }
    let prepared: Vec<PreparedExample> = examples
        .iter()
        .map(|e| PreparedExample::new(e, config.window_size, config.hop))
        .collect::<Result<_>>()?;

    let (mut weights, mut optimizer) = match &io.resume {
        Some(path) => {
            let w = load_weights_for::<f32>(path, &config.model)?;
            let (_, opt) = load_optimizer::<f32>(optimizer_path(path), config.adamw)?;
            (w, opt)
        }
        None => (init_weights::<f32>(&config.model, config.seed)?, OptimizerState::new(config.adamw)),
    };
    let first = optimizer.step + 1;
    let mut log_file = match &io.log_path {
        Some(p) => {
            let mut f = if io.resume.is_some() {
                OpenOptions::new().append(true).create(true).open(p)?
            } else {
                std::fs::File::create(p)?
            };
            if f.metadata()?.len() == 0 {
                writeln!(f, "step,lr,loss,permutation_flips")?;
            }
            Some(f)
        }
        None => None,
    };
    if let Some(dir) = &io.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let half = (config.chunk_frames / 2) as isize;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for step in first..=config.schedule.total_steps {
        let mut rng = step_rng(config.seed, step);
        let picks: Vec<(usize, isize)> = (0..config.micro_batch)
            .map(|_| {
                let e = rng.random_range(0..prepared.len());
                let last = (prepared[e].frames as isize - half).max(1 - half);
                (e, rng.random_range(-half as i64..=last as i64) as isize)
            })
            .collect();
        let results: Vec<ChunkResult> = picks
            .iter()
            .map(|&(e, start)| run_chunk(&weights, &prepared[e], start, config, channels))
            .collect::<Result<_>>()?;

        let scale = 1.0 / config.micro_batch as f32;
        let mut total: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for r in &results {
            for (name, g) in &r.grads {
                match total.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        total.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        total.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
        let lr = lr_at(step, &config.schedule, config.peak_lr);
        {
            let names: Vec<String> = total.keys().cloned().collect();
            let mut owned: Vec<(String, Tensor<f32>)> = names
                .iter()
                .map(|n| (n.clone(), weights.get(n).clone()))
                .collect();
            let mut params: Vec<Param<'_, f32>> = owned
                .iter_mut()
                .map(|(n, v)| Param {
                    name: n.as_str(),
                    value: v,
                    grad: &total[n.as_str()],
                })
                .collect();
            adamw_step(&mut params, &mut optimizer, lr)?;
            drop(params);
            for (n, v) in owned {
                *weights.get_mut(&n).expect("bound tensor exists") = v;
            }
        }
        for r in &results {
            update_running_stats(&mut weights, &r.stats, BATCHNORM_MOMENTUM);
        }

        let entry = StepLog {
            step,
            lr,
            loss: results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64,
            permutation_flips: results.iter().filter(|r| r.permutation == Permutation::Swap).count(),
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{},{:e},{:e},{}", entry.step, entry.lr, entry.loss, entry.permutation_flips)?;
        }
        if step % 100 == 0 {
            log::info!("step {step}: lr {lr:.3e} loss {:.5}", entry.loss);
        }
        log.push(entry);
        if let Some(dir) = &io.checkpoint_dir {
            if step % config.checkpoint_every == 0 || step == config.schedule.total_steps {
                let path = checkpoint_path(dir, step);
                save_weights(&weights, &path)?;
                save_optimizer(&optimizer, &config.model, optimizer_path(&path))?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainRun {
        weights,
        optimizer,
        log,
        checkpoints,
    })
}
