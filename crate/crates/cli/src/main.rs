//! Command-line front end. Every subcommand is a thin wrapper over the
//! pipeline library, so scripted runs and tests exercise the same code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use facetalk_core::audio::read_wav;
use facetalk_core::synth::generate_clip;
use facetalk_core::video::VideoTensor;
use facetalk_core::Result;
use facetalk_pipeline::config::PipelineConfig;
use facetalk_pipeline::dataset::{ingest_dataset, write_raw_clip, RawMeta};
use facetalk_pipeline::evaluate::{evaluate_set, EvalClip};
use facetalk_pipeline::infer::{generate, write_frames, InferRequest};
use facetalk_pipeline::train::{train_stage1, train_stage2, StageReport};

#[derive(Parser)]
#[command(name = "facetalk", version, about = "Talking-face generation pipeline")]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a family of synthetic raw clips for ingestion.
    SynthData {
        #[arg(long, default_value_t = 4)]
        clips: u64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Clip length in seconds; keep it a multiple of one frame.
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standardize raw clips into the training layout.
    Ingest {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long)]
        sample_rate: Option<u32>,
        #[arg(long)]
        min_duration: Option<f64>,
        #[arg(long)]
        max_duration: Option<f64>,
    },
    /// Train one stage on an ingested dataset.
    Train {
        /// 1 (reference + denoiser) or 2 (motion model + full conditioning).
        #[arg(long)]
        stage: u32,
        /// Ingested dataset root; defaults to the configured data_dir.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to the configured out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Checkpoint base to resume this stage from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stage-1 checkpoint base (stage 2 only); defaults to out/stage1.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Generate a clip from a reference image and driving audio.
    Infer {
        /// Stage-2 checkpoint base path (without .json/.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ref_image: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ddim_steps: Option<usize>,
        /// Directory for the generated PNG frames.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated frames against reference frames.
    Evaluate {
        /// Directory of generated PNG frames.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference PNG frames.
        #[arg(long)]
        gt: PathBuf,
        /// Driving audio for the sync metrics.
        #[arg(long)]
        audio: PathBuf,
        /// Where to write the JSON metric report.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "clip")]
        id: String,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn print_stage(report: &StageReport) {
    println!(
        "stage {} done: {} steps, total loss {:.6} -> {:.6}, checkpoint {}",
        report.stage,
        report.steps_run,
        report.first_total,
        report.last_total,
        report.checkpoint.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config)?;
    match cli.command {
        Command::SynthData { clips, seed, duration, out } => {
            for i in 0..clips {
                let clip =
                    generate_clip(seed, i, duration, cfg.dataset.height, cfg.dataset.width)?;
                write_raw_clip(
                    &out.join(&clip.id),
                    &clip.video,
                    &clip.audio,
                    &clip.caption,
                    &RawMeta::default(),
                )?;
                println!("wrote {}", clip.id);
            }
        }
        Command::Ingest { input, out, fps, sample_rate, min_duration, max_duration } => {
            if let Some(v) = fps {
                cfg.dataset.fps = v;
            }
            if let Some(v) = sample_rate {
                cfg.dataset.sample_rate = v;
            }
            if let Some(v) = min_duration {
                cfg.dataset.min_duration_s = v;
            }
            if let Some(v) = max_duration {
                cfg.dataset.max_duration_s = v;
            }
            let summary = ingest_dataset(&input, &out, &cfg.dataset)?;
            println!("accepted {} clips", summary.accepted.len());
            for r in &summary.rejected {
                println!("rejected {}: {}", r.id, r.reason);
            }
        }
        Command::Train { stage, data, out, resume, stage1 } => {
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.train.data_dir));
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.train.out_dir));
            let report = match stage {
                1 => train_stage1(&cfg, &data, &out, resume.as_deref())?,
                2 => {
                    let s1 = stage1.unwrap_or_else(|| out.join("stage1"));
                    train_stage2(&cfg, &data, &out, &s1, resume.as_deref())?
                }
                other => {
                    return Err(facetalk_core::Error::invalid(format!(
                        "unknown stage {other}; expected 1 or 2"
                    )))
                }
            };
            print_stage(&report);
        }
        Command::Infer { checkpoint, ref_image, audio, caption, seed, ddim_steps, out } => {
            let reference = VideoTensor::load_frame_png(&ref_image)?;
            let driving = read_wav(&audio)?;
            let result = generate(
                &cfg,
                &checkpoint,
                &InferRequest {
                    reference: &reference,
                    audio: &driving,
                    caption: &caption,
                    seed,
                    ddim_steps,
                },
            )?;
            write_frames(&result.video, &out)?;
            println!(
                "generated {} frames in {} windows (checkpoint step {}) -> {}",
                result.video.num_frames(),
                result.windows,
                result.checkpoint_step,
                out.display()
            );
        }
        Command::Evaluate { pred, gt, audio, report, id } => {
            let pred_v = VideoTensor::load_frames_dir(&pred)?;
            let gt_v = VideoTensor::load_frames_dir(&gt)?;
            let driving = read_wav(&audio)?;
            let metrics = evaluate_set(
                &cfg,
                &[EvalClip { id: &id, pred: &pred_v, gt: &gt_v, audio: &driving }],
            )?;
            write_report(&metrics, &report)?;
            for (name, entry) in &metrics.metrics {
                println!("{name}: {:.6} ({})", entry.value, entry.scorer);
            }
            println!("report -> {}", report.display());
        }
    }
    Ok(())
}

fn write_report(report: &facetalk_core::metrics::MetricReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, report.to_json()?)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
