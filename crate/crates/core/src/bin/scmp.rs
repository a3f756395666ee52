//! Command-line front end: training, compression, evaluation, segmentation,
//! sweeps, and plotting.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scmp::bitstream::{deserialize_bitstream_with, serialize_bitstream};
use scmp::codec::{CodecConfig, ImageTensor, SchedulePreset};
use scmp::data::{self, Layout, ResolutionPolicy};
use scmp::error::Error;
use scmp::metrics;
use scmp::quant::QuantMode;
use scmp::runner::{self, ms_ssim_scales_for, to_u8_image, SweepConfig};
use scmp::segmentation::{
    self, reconstruct_dataset, SegModel, SegTrainConfig, StrategyKind, TrainingStrategy,
};
use scmp::train::{generator_from_checkpoint, generator_to_checkpoint, TrainConfig};
use scmp::Result;

#[derive(Parser)]
#[command(name = "scmp", version, about = "Perception-aware learned image compression benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a compression model on a dataset of PNG images
    Train {
        /// Dataset directory (images/ + optional labels/)
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for checkpoints and the training log
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        feature_maps: usize,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-4)]
        learning_rate: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Channel schedule: "full" (full size) or "tiny" (desk scale)
        #[arg(long, default_value = "tiny")]
        schedule: String,
        /// Train without the quantizer in the loop (quantize at inference)
        #[arg(long)]
        no_quantization: bool,
        /// Quantizer mode when quantization is in the loop
        #[arg(long, default_value = "straight-through")]
        quant_mode: String,
        /// Resume from a training checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Load images at half resolution
        #[arg(long)]
        half_resolution: bool,
    },
    /// Compress a PNG image to a fixed-rate bitstream
    Compress {
        /// Generator checkpoint produced by `train`
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decompress a bitstream back to a PNG image
    Decompress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Evaluate a trained model: PSNR / SSIM / MS-SSIM and, with labels and
    /// a segmentation model, mIoU
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seg_model: Option<PathBuf>,
        #[arg(long)]
        half_resolution: bool,
    },
    /// Train a segmentation model under one of the four data strategies
    SegTrain {
        #[arg(long)]
        dataset: PathBuf,
        /// uncoded | reconstructions | mixed | finetune
        #[arg(long, default_value = "uncoded")]
        strategy: String,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        /// Compression model (required for strategies that use reconstructions)
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 19)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        base_channels: usize,
        #[arg(long, default_value_t = 2e-4)]
        learning_rate: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full rate sweep from a TOML configuration
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw the four rate-quality panels from a results CSV
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic shape dataset with exact label maps
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolution(half: bool) -> ResolutionPolicy {
    if half {
        ResolutionPolicy::Half
    } else {
        ResolutionPolicy::Native
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            dataset,
            out,
            feature_maps,
            levels,
            epochs,
            learning_rate,
            seed,
            schedule,
            no_quantization,
            quant_mode,
            resume,
            half_resolution,
        } => {
            let preset = match schedule.as_str() {
                "full" => SchedulePreset::Full,
                "tiny" => SchedulePreset::Tiny,
                other => {
                    return Err(Error::Config(format!(
                        "unknown schedule '{other}' (expected full or tiny)"
                    )))
                }
            };
            let manifest = data::ingest(&dataset, Layout::Flat, "train", resolution(half_resolution))?;
            let images = manifest.load_all_images()?;
            let mut codec = CodecConfig::new(feature_maps, levels, preset)?;
            codec.quant_mode = quant_mode.parse::<QuantMode>()?;
            let config = TrainConfig {
                epochs,
                learning_rate,
                seed,
                quantize_in_training: !no_quantization,
                ..Default::default()
            };
            let output = scmp::train::train(&images, codec, config, Some(&out), resume.as_deref())?;
            let mut state = output.state;
            let path = out.join("generator.sckp");
            generator_to_checkpoint(&mut state.generator).save(&path)?;
            let last = output.log.last().expect("at least one step");
            println!(
                "trained {} steps; final losses: gen {:.6}, disc {:.6}; model at {}",
                output.log.len(),
                last.l_gen_total,
                last.l_disc,
                path.display()
            );
            Ok(())
        }
        Command::Compress { model, input, output } => {
            let ckpt = scmp::checkpoint::Checkpoint::load(&model)?;
            let mut generator = generator_from_checkpoint(&ckpt)?;
            let img = ImageTensor::from_rgb8(&data::load_rgb(&input)?);
            let code = generator.compress(&img)?;
            let bytes = serialize_bitstream(&code, generator.config.levels)?;
            std::fs::write(&output, &bytes).map_err(|e| Error::io(&output, e))?;
            let (w, h) = (img.width(), img.height());
            println!(
                "{} -> {} ({} bytes, {:.6} bpp)",
                input.display(),
                output.display(),
                bytes.len(),
                8.0 * bytes.len() as f64 / (w * h) as f64
            );
            Ok(())
        }
        Command::Decompress { model, input, output } => {
            let ckpt = scmp::checkpoint::Checkpoint::load(&model)?;
            let mut generator = generator_from_checkpoint(&ckpt)?;
            let bytes = std::fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let (code, levels) = deserialize_bitstream_with(&bytes, generator.config.downsampling())?;
            if levels != generator.config.levels {
                return Err(Error::Format(format!(
                    "bitstream uses {levels} levels but the model has {}",
                    generator.config.levels
                )));
            }
            let img = generator.decompress(&code)?;
            img.to_rgb8()
                .save(&output)
                .map_err(|e| Error::Tool(format!("{}: {e}", output.display())))?;
            println!("{} -> {}", input.display(), output.display());
            Ok(())
        }
        Command::Evaluate {
            model,
            dataset,
            seg_model,
            half_resolution,
        } => {
            let ckpt = scmp::checkpoint::Checkpoint::load(&model)?;
            let mut generator = generator_from_checkpoint(&ckpt)?;
            let manifest = data::ingest(&dataset, Layout::Flat, "eval", resolution(half_resolution))?;
            let images = manifest.load_all_images()?;
            let recons = reconstruct_dataset(&mut generator, &images)?;
            let (mut psnr, mut ssim, mut msssim) = (0.0, 0.0, 0.0);
            for (x, xhat) in images.iter().zip(&recons) {
                let (a, b) = (to_u8_image(x), to_u8_image(xhat));
                let (_, h, w) = a.dim();
                psnr += metrics::psnr(&a, &b)?;
                ssim += metrics::ssim(&a, &b)?;
                msssim += metrics::ms_ssim(&a, &b, ms_ssim_scales_for(h, w))?;
            }
            let n = images.len() as f64;
            println!("bpp      {:.6}", generator.config.bitrate_bpp());
            println!("psnr_db  {:.4}", psnr / n);
            println!("ssim     {:.6}", ssim / n);
            println!("ms_ssim  {:.6}", msssim / n);
            if let Some(seg_path) = seg_model {
                let mut seg = SegModel::load(&seg_path)?;
                let labels: Vec<_> = (0..manifest.len())
                    .map(|i| manifest.load_label(i))
                    .collect::<Result<_>>()?;
                let miou = segmentation::evaluate(&mut seg, &recons, &labels)?;
                println!("miou     {miou:.6}");
            }
            Ok(())
        }
        Command::SegTrain {
            dataset,
            strategy,
            iterations,
            model,
            classes,
            base_channels,
            learning_rate,
            seed,
            out,
        } => {
            let kind = strategy.parse::<StrategyKind>()?;
            let manifest = data::ingest(&dataset, Layout::Flat, "seg-train", ResolutionPolicy::Native)?;
            let mut samples = Vec::new();
            for i in 0..manifest.len() {
                samples.push((manifest.load_image(i)?.data, manifest.load_label(i)?));
            }
            let recons = if kind == StrategyKind::Uncoded {
                None
            } else {
                let path = model.ok_or_else(|| {
                    Error::Config(format!("strategy '{kind}' needs --model"))
                })?;
                let ckpt = scmp::checkpoint::Checkpoint::load(&path)?;
                let mut generator = generator_from_checkpoint(&ckpt)?;
                let images: Vec<_> = samples.iter().map(|(i, _)| i.clone()).collect();
                Some(reconstruct_dataset(&mut generator, &images)?)
            };
            let config = SegTrainConfig {
                classes,
                base_channels,
                learning_rate,
                seed,
            };
            let strategy = TrainingStrategy::new(kind, iterations);
            let mut output =
                segmentation::train_segmentation(&samples, recons.as_deref(), &strategy, &config)?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
            }
            output.model.save(&out)?;
            println!(
                "trained {} steps ({kind}); final loss {:.6}; model at {}",
                output.steps,
                output.losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Sweep { config } => {
            let config = SweepConfig::from_toml(&config)?;
            let output = runner::run_sweep(&config)?;
            println!(
                "{} points -> {} ({} failures)",
                output.points.len(),
                output.csv_path.display(),
                output.failures.len()
            );
            let plots = runner::emit_plots(&output.points, &config.output_dir.join("plots"))?;
            for p in plots {
                println!("plot: {}", p.display());
            }
            Ok(())
        }
        Command::Plot { results, out } => {
            let points = runner::read_csv(&results)?;
            let plots = runner::emit_plots(&points, &out)?;
            for p in plots {
                println!("plot: {}", p.display());
            }
            Ok(())
        }
        Command::Synth {
            out,
            count,
            height,
            width,
            classes,
            seed,
        } => {
            let manifest = data::generate_synthetic(&out, count, height, width, classes, seed)?;
            println!(
                "{} image/label pairs under {}",
                manifest.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
