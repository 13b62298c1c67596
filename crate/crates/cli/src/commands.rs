use std::io::Write;
use std::path::{Path, PathBuf};

use css_core::audio::{read_wav, write_wav, WavEncoding};
use css_core::dsp::feature_dim;
use css_core::model::{count_parameters, decode_container, load_weights, save_weights, ConformerConfig, DEFAULT_NUM_BINS};
use css_core::pipeline::{model_channels, separate_stream, MergeOptions, SeparationMode, SeparationOptions};
use css_core::sim::{generate_recipes, write_dataset, MANIFEST_FILE};
use css_core::train::{
    evaluate_outputs, load_examples, optimizer_path, save_optimizer, train_toy, EvalReport, Schedule, TrainConfig, TrainIo,
};

use crate::config::{echo, Channels, EvaluateConfig, ModelSize, SeparateConfig, SimulateConfig, Switch, TrainSection};
use crate::{CliError, EvaluateArgs, SeparateArgs, SimulateArgs, TrainArgs};

fn manifest_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn merge_options(s: Switch) -> Option<MergeOptions> {
    match s {
        Switch::On => Some(MergeOptions::default()),
        Switch::Off => None,
    }
}

pub fn simulate(mut cfg: SimulateConfig, a: SimulateArgs) -> Result<(), CliError> {
    if let Some(v) = a.out {
        cfg.out = v;
    }
    if let Some(v) = a.count {
        cfg.count = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.mics {
        cfg.sim.num_mics = v;
    }
    if a.no_noise {
        cfg.sim.noise = false;
    }
    if a.two_speaker {
        cfg.sim.patterns.single = 0.0;
    }
    echo("simulate", &cfg)?;

    if cfg.count == 0 {
        log::warn!("count is 0; writing an empty manifest");
    }
    let recipes = generate_recipes(&cfg.sim, cfg.count, cfg.seed)?;
    let records = write_dataset(&cfg.out, &recipes)
        .map_err(|e| CliError::Data(format!("cannot write dataset to {}: {e}", cfg.out.display())))?;
    let mean = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.overlap_ratio).sum::<f64>() / records.len() as f64
    };
    println!("wrote {} mixtures to {}", records.len(), cfg.out.display());
    println!("mean overlap ratio: {:.4}", mean);
    Ok(())
}

fn model_config(size: ModelSize, mics: usize) -> ConformerConfig {
    let dim = feature_dim(DEFAULT_NUM_BINS, mics);
    match size {
        ModelSize::Tiny => ConformerConfig::tiny(dim),
        ModelSize::Base => ConformerConfig::base(dim),
        ModelSize::Large => ConformerConfig::large(dim),
    }
}

pub fn train(mut cfg: TrainSection, a: TrainArgs) -> Result<(), CliError> {
    macro_rules! over {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { cfg.$f = v; } )* };
    }
    over!(manifest, out, model, mics, steps, warmup, lr, seed, micro_batch, checkpoint_every);
    if a.checkpoint_dir.is_some() {
        cfg.checkpoint_dir = a.checkpoint_dir;
    }
    if a.log.is_some() {
        cfg.log = a.log;
    }
    if a.resume.is_some() {
        cfg.resume = a.resume;
    }
    if a.noisy_targets {
        cfg.noisy_targets = true;
    }
    echo("train", &cfg)?;
    if a.print_config {
        return Ok(());
    }
    if cfg.mics == 0 {
        return Err(CliError::Usage("--mics must be at least 1".into()));
    }

    let model = model_config(cfg.model, cfg.mics);
    let tc = TrainConfig {
        chunk_frames: model.max_chunk_len,
        model,
        schedule: Schedule {
            warmup_steps: cfg.warmup,
            total_steps: cfg.steps,
        },
        peak_lr: cfg.lr,
        micro_batch: cfg.micro_batch,
        checkpoint_every: cfg.checkpoint_every,
        noisy_targets: cfg.noisy_targets,
        seed: cfg.seed,
        ..TrainConfig::toy(cfg.mics)
    };
    tc.validate()?;
    let manifest = manifest_file(&cfg.manifest);
    let examples = load_examples(&manifest, cfg.mics)
        .map_err(|e| CliError::Data(format!("cannot load {}: {e}", manifest.display())))?;
    log::info!("training on {} mixtures for {} steps", examples.len(), cfg.steps);
    let run = train_toy(
        &examples,
        &tc,
        &TrainIo {
            checkpoint_dir: cfg.checkpoint_dir.clone(),
            log_path: cfg.log.clone(),
            resume: cfg.resume.clone(),
        },
    )?;
    save_weights(&run.weights, &cfg.out)?;
    save_optimizer(&run.optimizer, &tc.model, optimizer_path(&cfg.out))?;
    if let Some(last) = run.log.last() {
        println!("final step {} loss {:.6}", last.step, last.loss);
    }
    println!("saved weights to {}", cfg.out.display());
    Ok(())
}

pub fn separate(mut cfg: SeparateConfig, a: SeparateArgs) -> Result<(), CliError> {
    if let Some(v) = a.weights {
        cfg.weights = v;
    }
    if let Some(v) = a.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = a.channels {
        cfg.channels = v;
    }
    if let Some(v) = a.merge {
        cfg.merge = v;
    }
    if a.cache.is_some() {
        cfg.cache = a.cache;
    }
    echo("separate", &cfg)?;

    let audio = read_wav(&a.input)?;
    let mics = match cfg.channels {
        Channels::Auto => audio.num_channels(),
        Channels::One => 1,
        Channels::Seven => 7,
    };
    if audio.num_channels() < mics {
        return Err(CliError::Data(format!(
            "{} has {} channels; --channels needs {mics}",
            a.input.display(),
            audio.num_channels()
        )));
    }
    let audio = audio.select_channels(&(0..mics).collect::<Vec<_>>())?.cast::<f32>();
    let mut weights = load_weights::<f32>(&cfg.weights)?;
    if let Some(c) = cfg.cache {
        weights.set_cache_chunks(c);
    }
    let mode = if mics > 1 {
        log::info!("{mics} microphones: mask-driven MVDR beamforming path");
        SeparationMode::Multichannel
    } else {
        log::info!("single microphone: masking path");
        SeparationMode::SingleChannel
    };
    let options = SeparationOptions {
        mode,
        merge: merge_options(cfg.merge),
        ..SeparationOptions::default()
    };
    let sep = separate_stream(&audio, &weights, &options)?;
    log::info!(
        "{} chunks, {} permutation changes, {} merged blocks",
        sep.chunks,
        sep.permutation_changes,
        sep.merged_blocks
    );
    std::fs::create_dir_all(&cfg.out_dir)?;
    for (i, out) in sep.outputs.iter().enumerate() {
        let path = cfg.out_dir.join(format!("out{i}.wav"));
        write_wav(&path, out, WavEncoding::Float32)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn evaluate(mut cfg: EvaluateConfig, a: EvaluateArgs) -> Result<(), CliError> {
    if let Some(v) = a.manifest {
        cfg.manifest = v;
    }
    if a.weights.is_some() {
        cfg.weights = a.weights;
    }
    if a.json.is_some() {
        cfg.json = a.json;
    }
    if a.oracle {
        cfg.oracle = true;
    }
    if let Some(v) = a.merge {
        cfg.merge = v;
    }
    if cfg.json.as_deref() != Some(Path::new("-")) {
        echo("evaluate", &cfg)?;
    }

    let weights = match (&cfg.weights, cfg.oracle) {
        (_, true) => None,
        (Some(p), false) => Some(load_weights::<f32>(p)?),
        (None, false) => return Err(CliError::Usage("--weights is required unless --oracle is given".into())),
    };
    let channels = match &weights {
        Some(w) => model_channels(w.config().feature_dim, w.config().num_bins)?,
        None => 1,
    };
    let manifest = manifest_file(&cfg.manifest);
    let examples = load_examples(&manifest, channels)
        .map_err(|e| CliError::Data(format!("cannot load {}: {e}", manifest.display())))?;
    let report = match &weights {
        Some(w) => css_core::train::evaluate(
            w,
            &examples,
            &SeparationOptions {
                merge: merge_options(cfg.merge),
                ..SeparationOptions::default()
            },
        )?,
        None => EvalReport::from_rows(
            examples
                .iter()
                .map(|ex| evaluate_outputs(ex, &ex.sources))
                .collect::<css_core::Result<_>>()?,
        ),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    match cfg.json.as_deref() {
        Some(p) if p == Path::new("-") => println!("{json}"),
        Some(p) => {
            std::fs::write(p, json)?;
            print!("{}", report.table());
        }
        None => print!("{}", report.table()),
    }
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(path)?;
    let (config, tensors) = decode_container(&bytes)?;
    let body = toml::to_string(&config).map_err(|e| CliError::Internal(e.to_string()))?;
    let mut text = format!("[config]\n{body}\nparameters: {}\ntensors: {}\n", count_parameters(&config), tensors.len());
    for (name, t) in &tensors {
        let mut h = crc32fast::Hasher::new();
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
        text.push_str(&format!("{name:<40} {:>16} {:08x}\n", format!("{:?}", t.shape()), h.finalize()));
    }
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    match std::io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}
