//! Command-line interface for the separation pipeline: dataset generation,
//! training, duet inference, validation scoring, and figure rendering.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use boxsep::audio;
use boxsep::dataset::{self, DatasetError};
use boxsep::img;
use boxsep::metrics;
use boxsep::pipeline::{
    self, evaluate, load_checkpoint, separate_duet, train, PipelineError, RunConfig,
};
use boxsep::separator::MaskHead;

#[derive(Parser)]
#[command(
    name = "boxsep",
    about = "Unsupervised audio-visual sound source separation",
    version
)]
struct Cli {
    /// TOML run configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the mask head from the config.
    #[arg(long, global = true, value_enum)]
    head: Option<HeadArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum HeadArg {
    Sigmoid,
    Softmax,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic solo dataset (PNG + WAV + manifest.jsonl).
    GenData {
        /// Output directory for the dataset.
        #[arg(long)]
        out: PathBuf,
        /// Number of solo samples (defaults to the config's num_solos).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Trains a model on synthetic solos; writes checkpoints and a loss log.
    Train {
        /// Run directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already present in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Separates a two-source mixture given one image frame.
    Infer {
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image frame (PNG) showing the sounding objects.
        #[arg(long)]
        image: PathBuf,
        /// Mixture audio (WAV).
        #[arg(long)]
        audio: PathBuf,
        /// Output directory for estimates and the selection report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a checkpoint on synthetic validation pairs (mix-and-separate).
    Eval {
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of validation pairs to score.
        #[arg(long)]
        pairs: Option<usize>,
        /// Output directory for scores.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders spectrogram, mask, and box-overlay figures for one mixture.
    Plot {
        /// Checkpoint directory produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image frame (PNG) showing the sounding objects.
        #[arg(long)]
        image: PathBuf,
        /// Mixture audio (WAV).
        #[arg(long)]
        audio: PathBuf,
        /// Output directory for the rendered PNGs.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Anything that can stop a run, split by exit-code category.
enum CliError {
    Config(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Data(_) => ExitCode::from(3),
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_config_error() {
            CliError::Config(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::from(PipelineError::from(e))
    }
}

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::from_toml_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(head) = cli.head {
        cfg.head = match head {
            HeadArg::Sigmoid => MaskHead::Sigmoid,
            HeadArg::Softmax => MaskHead::Softmax,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn run_gen_data(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Result<(), CliError> {
    let count = count.unwrap_or(cfg.num_solos);
    ensure_dir(out)?;
    let records = dataset::write_solo_dataset(out, &cfg.dataset, count, cfg.seed)?;
    println!(
        "wrote {} solo samples to {} (manifest.jsonl, PNG, WAV)",
        records.len(),
        out.display()
    );
    Ok(())
}

fn run_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<(), CliError> {
    ensure_dir(out)?;
    let report = train(cfg, out, resume)?;
    let last = report.losses.last().map(|&(_, l)| l).unwrap_or(f32::NAN);
    println!(
        "trained steps {}..{} ({} head, seed {}); final loss {:.4}; checkpoint in {}",
        report.start_step,
        report.end_step,
        head_name(cfg.head),
        cfg.seed,
        last,
        out.display()
    );
    Ok(())
}

fn head_name(head: MaskHead) -> &'static str {
    match head {
        MaskHead::Sigmoid => "sigmoid",
        MaskHead::Softmax => "softmax",
    }
}

/// Loads a checkpoint and reconciles its stored config with CLI overrides.
fn load_run(
    cli: &Cli,
    checkpoint: &Path,
) -> Result<(RunConfig, boxsep::nn::ParamStore), CliError> {
    let (mut cfg, store, _, step) = load_checkpoint(checkpoint)?;
    // The stored config defines the model; only the seed may be overridden
    // (it steers evaluation pairing, not the architecture).
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.head.is_some() || cli.config.is_some() {
        return Err(CliError::Config(
            "--head/--config cannot override a checkpoint's architecture; \
             retrain with the desired settings instead"
                .into(),
        ));
    }
    log::info!("loaded checkpoint at step {step} from {}", checkpoint.display());
    Ok((cfg, store))
}

fn load_frame(cfg: &RunConfig, path: &Path) -> Result<ndarray::Array3<f32>, CliError> {
    let raw = img::load_rgb_png(path).map_err(data_err)?;
    let (h, w, _) = raw.dim();
    let size = cfg.dataset.image_size;
    if (h, w) == (size, size) {
        return Ok(raw);
    }
    log::warn!("resizing frame {}x{} to {}x{}", h, w, size, size);
    Ok(img::resize_rgb(&raw, size, size))
}

fn load_clip(cfg: &RunConfig, path: &Path) -> Result<audio::AudioClip, CliError> {
    let clip = audio::read_wav(path).map_err(data_err)?;
    let clip = if clip.sample_rate != cfg.dataset.sample_rate {
        log::warn!(
            "resampling {} Hz to {} Hz",
            clip.sample_rate,
            cfg.dataset.sample_rate
        );
        audio::resample_linear(&clip, cfg.dataset.sample_rate)
    } else {
        clip
    };
    let want = cfg.dataset.num_samples;
    if clip.len() < want {
        return Err(CliError::Data(format!(
            "clip too short: {} samples, need {want}",
            clip.len()
        )));
    }
    if clip.len() > want {
        log::warn!("truncating clip from {} to {want} samples", clip.len());
        let mut c = clip;
        c.samples.truncate(want);
        return Ok(c);
    }
    Ok(clip)
}

fn run_infer(
    cli: &Cli,
    checkpoint: &Path,
    image: &Path,
    audio_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let (cfg, store) = load_run(cli, checkpoint)?;
    let models = cfg.models();
    let stft = cfg.stft()?;
    let frame = load_frame(&cfg, image)?;
    let clip = load_clip(&cfg, audio_path)?;
    ensure_dir(out)?;

    let sep = separate_duet(&cfg, &models, &store, &stft, &frame, &clip)?;
    audio::write_wav_f32(&out.join("estimate_1.wav"), &sep.estimates[0]).map_err(data_err)?;
    audio::write_wav_f32(&out.join("estimate_2.wav"), &sep.estimates[1]).map_err(data_err)?;

    let report = serde_json::json!({
        "boxes": sep.boxes.iter().map(|b| {
            serde_json::json!({"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1})
        }).collect::<Vec<_>>(),
        "pair_indices": [sep.selection.indices.0, sep.selection.indices.1],
        "non_overlapping_pairs": sep.selection.no_set.len(),
        "scores": sep.scores,
    });
    std::fs::write(
        out.join("selection.json"),
        serde_json::to_string_pretty(&report).map_err(data_err)?,
    )
    .map_err(data_err)?;
    println!(
        "separated mixture into {} and {}; boxes ({},{})-({},{}) and ({},{})-({},{})",
        out.join("estimate_1.wav").display(),
        out.join("estimate_2.wav").display(),
        sep.boxes[0].x0,
        sep.boxes[0].y0,
        sep.boxes[0].x1,
        sep.boxes[0].y1,
        sep.boxes[1].x0,
        sep.boxes[1].y0,
        sep.boxes[1].x1,
        sep.boxes[1].y1,
    );
    Ok(())
}

fn run_eval(
    cli: &Cli,
    checkpoint: &Path,
    pairs: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let (cfg, store) = load_run(cli, checkpoint)?;
    let models = cfg.models();
    let stft = cfg.stft()?;
    let (_, val) = pipeline::solo_pool(&cfg);
    let num_pairs = pairs.unwrap_or(cfg.eval_pairs);
    ensure_dir(out)?;

    let report = evaluate(&cfg, &models, &store, &stft, &val, num_pairs)?;
    metrics::write_scores_csv(&out.join("scores.csv"), &report.rows).map_err(data_err)?;
    let summary = serde_json::json!({
        "pairs": num_pairs,
        "mean_sdr_db": report.mean_sdr,
        "mean_sir_db": report.mean_sir,
        "mean_sar_db": report.mean_sar,
        "oracle_mean_sdr_db": report.oracle_mean_sdr,
        "mixture_mean_sdr_db": report.mixture_mean_sdr,
        "localization_accuracy": report.localization_accuracy,
        "localization_solos": report.localization_count,
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(data_err)?,
    )
    .map_err(data_err)?;
    println!(
        "{} pairs: mean SDR {:+.2} dB (oracle {:+.2}, mixture {:+.2}); \
         SIR {:+.2} dB; SAR {:+.2} dB; localization {:.1}% of {} solos",
        num_pairs,
        report.mean_sdr,
        report.oracle_mean_sdr,
        report.mixture_mean_sdr,
        report.mean_sir,
        report.mean_sar,
        report.localization_accuracy * 100.0,
        report.localization_count,
    );
    Ok(())
}

fn run_plot(
    cli: &Cli,
    checkpoint: &Path,
    image: &Path,
    audio_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let (cfg, store) = load_run(cli, checkpoint)?;
    let models = cfg.models();
    let stft = cfg.stft()?;
    let frame = load_frame(&cfg, image)?;
    let clip = load_clip(&cfg, audio_path)?;
    ensure_dir(out)?;

    let sep = separate_duet(&cfg, &models, &store, &stft, &frame, &clip)?;

    img::save_gray_png(
        &out.join("mixture_spectrogram.png"),
        &pipeline::magnitude_image(&sep.mix_magnitude),
    )
    .map_err(data_err)?;
    for (idx, mask) in sep.stft_masks.iter().enumerate() {
        // Masks are already in [0,1]; flip the frequency axis so low
        // frequencies render at the bottom, matching the spectrogram.
        let flipped = ndarray::Array2::from_shape_fn(mask.dim(), |(i, j)| {
            mask[[mask.dim().0 - 1 - i, j]]
        });
        img::save_gray_png(&out.join(format!("mask_{}.png", idx + 1)), &flipped)
            .map_err(data_err)?;
        let est_spec = stft.forward(&sep.estimates[idx]);
        img::save_gray_png(
            &out.join(format!("estimate_{}_spectrogram.png", idx + 1)),
            &pipeline::magnitude_image(&est_spec.magnitude),
        )
        .map_err(data_err)?;
    }

    let mut overlay = frame.clone();
    pipeline::draw_box_outline(&mut overlay, &sep.boxes[0], [1.0, 0.2, 0.1]);
    pipeline::draw_box_outline(&mut overlay, &sep.boxes[1], [0.1, 0.4, 1.0]);
    img::save_rgb_png(&out.join("selected_boxes.png"), &overlay).map_err(data_err)?;

    println!(
        "rendered mixture_spectrogram.png, mask_1.png, mask_2.png, \
         estimate spectrograms, and selected_boxes.png in {}",
        out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { out, count } => {
            let cfg = load_config(cli)?;
            run_gen_data(&cfg, out, *count)
        }
        Command::Train { out, resume } => {
            let cfg = load_config(cli)?;
            run_train(&cfg, out, *resume)
        }
        Command::Infer {
            checkpoint,
            image,
            audio,
            out,
        } => run_infer(cli, checkpoint, image, audio, out),
        Command::Eval {
            checkpoint,
            pairs,
            out,
        } => run_eval(cli, checkpoint, *pairs, out),
        Command::Plot {
            checkpoint,
            image,
            audio,
            out,
        } => run_plot(cli, checkpoint, image, audio, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
