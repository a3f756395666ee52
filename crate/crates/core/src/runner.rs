//! Sweep orchestration: train/evaluate compression points over (F, L) grids
//! and baseline codecs, persist CSV + JSON, and draw the four-panel
//! rate-quality figure.
//!
//! Every point is cached under a hash of its full configuration, so an
//! interrupted sweep resumes without recomputing finished points and a rerun
//! over existing results reproduces the identical table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    search_quality_for_bpp, CodecAdapter, CodecRequest, PillowAdapter, StandardCodec,
};
use crate::codec::{unit_to_pixel, CodecConfig, Generator, SchedulePreset};
use crate::data::{self, DatasetManifest, Layout, ResolutionPolicy};
use crate::error::{Error, Result};
use crate::metrics::{self, ms_ssim_min_side, MS_SSIM_SCALES};
use crate::quant::QuantMode;
use crate::segmentation::{
    evaluate, reconstruct_dataset, train_segmentation, SegModel, SegSample, SegTrainConfig,
    StrategyKind, TrainingStrategy,
};
use crate::train::{train, TrainConfig};

/// One evaluated condition: a bitrate plus all four quality measures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatePoint {
    pub method: String,
    pub f: Option<usize>,
    pub l: Option<usize>,
    pub mode: String,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub miou: f64,
    pub seg_model: String,
    pub seed: u64,
    pub config_hash: String,
}

impl RatePoint {
    pub fn validate(&self) -> Result<()> {
        if self.bpp <= 0.0 {
            return Err(Error::Numeric {
                context: format!("rate point {}", self.method),
                message: format!("bitrate must be positive, got {}", self.bpp),
            });
        }
        for (name, v) in [
            ("ssim", self.ssim),
            ("ms_ssim", self.ms_ssim),
            ("miou", self.miou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric {
                    context: format!("rate point {}", self.method),
                    message: format!("{name} out of [0,1]: {v}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// "synthetic" or a path to an ingestable directory.
    pub source: String,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Images held out of training and used for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
}

fn default_count() -> usize {
    6
}
fn default_height() -> usize {
    64
}
fn default_width() -> usize {
    128
}
fn default_classes() -> usize {
    4
}
fn default_holdout() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepTrainSpec {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
}

fn default_epochs() -> usize {
    40
}
fn default_lr() -> f32 {
    2e-4
}

impl Default for SweepTrainSpec {
    fn default() -> Self {
        SweepTrainSpec {
            epochs: default_epochs(),
            learning_rate: default_lr(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegSpec {
    #[serde(default = "default_seg_iterations")]
    pub iterations: usize,
    #[serde(default = "default_seg_channels")]
    pub base_channels: usize,
    /// Adds standalone retrained-model mIoU markers for the first GAN point.
    #[serde(default)]
    pub retrained_marker: bool,
}

fn default_seg_iterations() -> usize {
    200
}
fn default_seg_channels() -> usize {
    8
}

impl Default for SegSpec {
    fn default() -> Self {
        SegSpec {
            iterations: default_seg_iterations(),
            base_channels: default_seg_channels(),
            retrained_marker: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    #[serde(default = "default_baseline_codecs")]
    pub codecs: Vec<String>,
    #[serde(default = "default_baseline_targets")]
    pub targets: Vec<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_baseline_codecs() -> Vec<String> {
    vec!["jpeg".into(), "webp".into()]
}
fn default_baseline_targets() -> Vec<f64> {
    vec![0.125, 0.25]
}
fn default_tolerance() -> f64 {
    0.10
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            codecs: default_baseline_codecs(),
            targets: default_baseline_targets(),
            tolerance: default_tolerance(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub output_dir: PathBuf,
    pub feature_maps: Vec<usize>,
    pub levels: Vec<usize>,
    /// "with-quantization" and/or "without-quantization".
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: SweepTrainSpec,
    #[serde(default)]
    pub segmentation: SegSpec,
    #[serde(default)]
    pub baselines: BaselineSpec,
}

fn default_modes() -> Vec<String> {
    vec!["with-quantization".into(), "without-quantization".into()]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

pub const MODE_WITH: &str = "with-quantization";
pub const MODE_WITHOUT: &str = "without-quantization";

impl SweepConfig {
    pub fn from_toml(path: &Path) -> Result<SweepConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: SweepConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_maps.is_empty() || self.levels.is_empty() {
            return Err(Error::Config("feature_maps and levels must be non-empty".into()));
        }
        for &l in &self.levels {
            if l < 2 || !l.is_power_of_two() {
                return Err(Error::Config(format!(
                    "level count must be a power of two >= 2, got {l}"
                )));
            }
        }
        for mode in &self.modes {
            if mode != MODE_WITH && mode != MODE_WITHOUT {
                return Err(Error::Config(format!(
                    "unknown mode '{mode}' (expected '{MODE_WITH}' or '{MODE_WITHOUT}')"
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        for name in &self.baselines.codecs {
            name.parse::<StandardCodec>()?;
        }
        if self.dataset.holdout == 0 || self.dataset.holdout >= self.dataset.count {
            return Err(Error::Config(format!(
                "holdout must be in 1..count, got {} of {}",
                self.dataset.holdout, self.dataset.count
            )));
        }
        Ok(())
    }
}

fn config_hash(value: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(value.to_string().as_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Convert a unit-domain (C, H, W) image to the 8-bit metric domain.
pub fn to_u8_image(img: &Array3<f32>) -> Array3<u8> {
    img.mapv(unit_to_pixel)
}

fn rgb_image_to_u8_array(img: &image::RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c]
    })
}

fn u8_array_to_rgb_image(img: &Array3<u8>) -> image::RgbImage {
    let (_, h, w) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            img[[0, y as usize, x as usize]],
            img[[1, y as usize, x as usize]],
            img[[2, y as usize, x as usize]],
        ])
    })
}

/// Largest scale count supported by the evaluation resolution, capped at
/// the standard five.
pub fn ms_ssim_scales_for(h: usize, w: usize) -> usize {
    let side = h.min(w);
    (1..=MS_SSIM_SCALES)
        .rev()
        .find(|&scales| ms_ssim_min_side(scales) <= side)
        .unwrap_or(1)
}

struct DistortionSummary {
    psnr_db: f64,
    ssim: f64,
    ms_ssim: f64,
}

fn summarize_distortion(
    originals: &[Array3<u8>],
    reconstructions: &[Array3<u8>],
) -> Result<DistortionSummary> {
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    let mut ms_acc = 0.0;
    for (x, xhat) in originals.iter().zip(reconstructions) {
        let (_, h, w) = x.dim();
        let scales = ms_ssim_scales_for(h, w);
        psnr_acc += metrics::psnr(x, xhat)?;
        ssim_acc += metrics::ssim(x, xhat)?;
        ms_acc += metrics::ms_ssim(x, xhat, scales)?;
    }
    let n = originals.len() as f64;
    Ok(DistortionSummary {
        psnr_db: psnr_acc / n,
        // clamp: SSIM can dip below 0 on pathological pairs, the rate table
        // is specified on [0,1]
        ssim: (ssim_acc / n).clamp(0.0, 1.0),
        ms_ssim: (ms_acc / n).clamp(0.0, 1.0),
    })
}

/// Everything the sweep shares between points.
struct SweepContext {
    train_images: Vec<Array3<f32>>,
    eval_images: Vec<Array3<f32>>,
    eval_labels: Vec<ndarray::Array2<u8>>,
    train_samples: Vec<SegSample>,
    eval_u8: Vec<Array3<u8>>,
    seg_uncoded: SegModel,
    classes: usize,
}

fn prepare_dataset(config: &SweepConfig) -> Result<DatasetManifest> {
    let spec = &config.dataset;
    if spec.source == "synthetic" {
        let dir = config.output_dir.join("dataset");
        data::generate_synthetic(
            &dir,
            spec.count,
            spec.height,
            spec.width,
            spec.classes,
            spec.seed,
        )
    } else {
        data::ingest(
            Path::new(&spec.source),
            Layout::Flat,
            "sweep",
            ResolutionPolicy::Native,
        )
    }
}

fn build_context(config: &SweepConfig) -> Result<SweepContext> {
    let manifest = prepare_dataset(config)?;
    let holdout = config.dataset.holdout.min(manifest.len().saturating_sub(1));
    let split = manifest.len() - holdout;
    let mut train_images = Vec::new();
    let mut train_samples = Vec::new();
    let mut eval_images = Vec::new();
    let mut eval_labels = Vec::new();
    for i in 0..manifest.len() {
        let img = manifest.load_image(i)?.data;
        let label = manifest.load_label(i)?;
        if i < split {
            train_samples.push((img.clone(), label));
            train_images.push(img);
        } else {
            eval_images.push(img);
            eval_labels.push(label);
        }
    }
    let eval_u8: Vec<_> = eval_images.iter().map(to_u8_image).collect();
    let seg_config = SegTrainConfig {
        classes: config.dataset.classes,
        base_channels: config.segmentation.base_channels,
        seed: config.seeds[0],
        ..Default::default()
    };
    let strategy = TrainingStrategy::new(StrategyKind::Uncoded, config.segmentation.iterations);
    let seg_uncoded = train_segmentation(&train_samples, None, &strategy, &seg_config)?.model;
    Ok(SweepContext {
        train_images,
        eval_images,
        eval_labels,
        train_samples,
        eval_u8,
        seg_uncoded,
        classes: config.dataset.classes,
    })
}

fn gan_point_spec(
    config: &SweepConfig,
    f: usize,
    l: usize,
    mode: &str,
    seed: u64,
) -> serde_json::Value {
    serde_json::json!({
        "method": "gan",
        "f": f,
        "l": l,
        "mode": mode,
        "seed": seed,
        "dataset": config.dataset,
        "train": config.train,
        "segmentation": {"iterations": config.segmentation.iterations,
                          "base_channels": config.segmentation.base_channels},
    })
}

fn baseline_point_spec(config: &SweepConfig, codec: &str, target: f64) -> serde_json::Value {
    serde_json::json!({
        "method": codec,
        "target_bpp": target,
        "tolerance": config.baselines.tolerance,
        "dataset": config.dataset,
        "segmentation": {"iterations": config.segmentation.iterations,
                          "base_channels": config.segmentation.base_channels},
    })
}

fn cached_point(dir: &Path, hash: &str) -> Option<RatePoint> {
    let path = dir.join(format!("{hash}.json"));
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn store_point(dir: &Path, point: &RatePoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{}.json", point.config_hash));
    let text = serde_json::to_string_pretty(point)
        .map_err(|e| Error::Format(format!("serializing rate point: {e}")))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Train one compression model and evaluate it on the held-out images.
/// Returns the point plus the trained generator (reused for retrained-
/// segmentation markers).
fn run_gan_point(
    config: &SweepConfig,
    ctx: &mut SweepContext,
    f: usize,
    l: usize,
    mode: &str,
    seed: u64,
    hash: String,
) -> Result<(RatePoint, Generator)> {
    let mut codec = CodecConfig::new(f, l, SchedulePreset::Tiny)?;
    codec.quant_mode = QuantMode::StraightThrough;
    let train_config = TrainConfig {
        epochs: config.train.epochs,
        learning_rate: config.train.learning_rate,
        seed,
        quantize_in_training: mode == MODE_WITH,
        discriminator: crate::gan::DiscriminatorSpec::tiny(),
        ..Default::default()
    };
    let output = train(&ctx.train_images, codec.clone(), train_config, None, None)?;
    let mut generator = output.state.generator;
    let recons = reconstruct_dataset(&mut generator, &ctx.eval_images)?;
    let recon_u8: Vec<_> = recons.iter().map(to_u8_image).collect();
    let distortion = summarize_distortion(&ctx.eval_u8, &recon_u8)?;
    let miou = evaluate(&mut ctx.seg_uncoded, &recons, &ctx.eval_labels)?;
    let point = RatePoint {
        method: "gan".into(),
        f: Some(f),
        l: Some(l),
        mode: mode.into(),
        bpp: codec.bitrate_bpp(),
        psnr_db: distortion.psnr_db,
        ssim: distortion.ssim,
        ms_ssim: distortion.ms_ssim,
        miou,
        seg_model: "uncoded".into(),
        seed,
        config_hash: hash,
    };
    point.validate()?;
    Ok((point, generator))
}

fn run_baseline_point(
    config: &SweepConfig,
    ctx: &mut SweepContext,
    adapter: &dyn CodecAdapter,
    codec: StandardCodec,
    target: f64,
    hash: String,
) -> Result<RatePoint> {
    let request = CodecRequest {
        codec,
        target_bpp: target,
        tolerance: config.baselines.tolerance,
        quality_bounds: (1, 100),
    };
    let mut bpp_acc = 0.0;
    let mut recon_u8 = Vec::new();
    let mut recon_unit = Vec::new();
    for img in &ctx.eval_u8 {
        let rgb = u8_array_to_rgb_image(img);
        let outcome = search_quality_for_bpp(adapter, &rgb, &request)?;
        bpp_acc += outcome.bpp;
        let arr = rgb_image_to_u8_array(&outcome.reconstruction);
        recon_unit.push(arr.mapv(crate::codec::pixel_to_unit));
        recon_u8.push(arr);
    }
    let distortion = summarize_distortion(&ctx.eval_u8, &recon_u8)?;
    let miou = evaluate(&mut ctx.seg_uncoded, &recon_unit, &ctx.eval_labels)?;
    let point = RatePoint {
        method: codec.name().into(),
        f: None,
        l: None,
        mode: "baseline".into(),
        bpp: bpp_acc / ctx.eval_u8.len() as f64,
        psnr_db: distortion.psnr_db,
        ssim: distortion.ssim,
        ms_ssim: distortion.ms_ssim,
        miou,
        seg_model: "uncoded".into(),
        seed: 0,
        config_hash: hash,
    };
    point.validate()?;
    Ok(point)
}

/// One failed sweep point, recorded without aborting the sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepFailure {
    pub description: String,
    pub error: String,
}

pub struct SweepOutput {
    pub points: Vec<RatePoint>,
    pub failures: Vec<SweepFailure>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

pub fn run_sweep(config: &SweepConfig) -> Result<SweepOutput> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    // keep the exact configuration next to the results it produced
    let config_copy = config.output_dir.join("sweep_config.toml");
    let toml_text = toml::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("serializing sweep config: {e}")))?;
    fs::write(&config_copy, toml_text).map_err(|e| Error::io(&config_copy, e))?;

    let points_dir = config.output_dir.join("points");
    let mut ctx = build_context(config)?;
    let mut points = Vec::new();
    let mut failures = Vec::new();
    let mut retrain_source: Option<(Generator, RatePoint)> = None;

    for &seed in &config.seeds {
        for &f in &config.feature_maps {
            for &l in &config.levels {
                for mode in &config.modes {
                    let spec = gan_point_spec(config, f, l, mode, seed);
                    let hash = config_hash(&spec);
                    if let Some(point) = cached_point(&points_dir, &hash) {
                        points.push(point);
                        continue;
                    }
                    match run_gan_point(config, &mut ctx, f, l, mode, seed, hash) {
                        Ok((point, generator)) => {
                            store_point(&points_dir, &point)?;
                            if retrain_source.is_none() && mode == MODE_WITH {
                                retrain_source = Some((generator, point.clone()));
                            }
                            points.push(point);
                        }
                        Err(e) => failures.push(SweepFailure {
                            description: format!("gan F={f} L={l} mode={mode} seed={seed}"),
                            error: e.to_string(),
                        }),
                    }
                }
            }
        }
    }

    let adapter = PillowAdapter::from_env();
    for codec_name in &config.baselines.codecs {
        let codec: StandardCodec = codec_name.parse()?;
        for &target in &config.baselines.targets {
            let spec = baseline_point_spec(config, codec_name, target);
            let hash = config_hash(&spec);
            if let Some(point) = cached_point(&points_dir, &hash) {
                points.push(point);
                continue;
            }
            match run_baseline_point(config, &mut ctx, &adapter, codec, target, hash) {
                Ok(point) => {
                    store_point(&points_dir, &point)?;
                    points.push(point);
                }
                Err(e) => failures.push(SweepFailure {
                    description: format!("{codec_name} target={target}"),
                    error: e.to_string(),
                }),
            }
        }
    }

    if config.segmentation.retrained_marker {
        let marker = retrain_source
            .as_mut()
            .ok_or_else(|| {
                Error::Config("retrained marker needs at least one with-quantization point".into())
            })
            .and_then(|(generator, source)| {
                retrained_point(config, &mut ctx, generator, source)
            });
        match marker {
            Ok(point) => {
                store_point(&points_dir, &point)?;
                points.push(point);
            }
            Err(e) => failures.push(SweepFailure {
                description: "gan-retrained marker".into(),
                error: e.to_string(),
            }),
        }
    }

    let csv_path = config.output_dir.join("results.csv");
    write_csv(&csv_path, &points)?;
    let json_path = config.output_dir.join("results.json");
    let json_text = serde_json::to_string_pretty(&points)
        .map_err(|e| Error::Format(format!("serializing results: {e}")))?;
    fs::write(&json_path, json_text).map_err(|e| Error::io(&json_path, e))?;
    if !failures.is_empty() {
        let fail_path = config.output_dir.join("failures.json");
        let text = serde_json::to_string_pretty(&failures)
            .map_err(|e| Error::Format(format!("serializing failures: {e}")))?;
        fs::write(&fail_path, text).map_err(|e| Error::io(&fail_path, e))?;
    }
    Ok(SweepOutput {
        points,
        failures,
        csv_path,
        json_path,
    })
}

/// Standalone mIoU marker: fine-tune the segmentation model on
/// reconstructions from one trained codec and evaluate it there.
fn retrained_point(
    config: &SweepConfig,
    ctx: &mut SweepContext,
    generator: &mut Generator,
    source: &RatePoint,
) -> Result<RatePoint> {
    let train_imgs: Vec<_> = ctx.train_samples.iter().map(|(i, _)| i.clone()).collect();
    let recons = reconstruct_dataset(generator, &train_imgs)?;
    let seg_config = SegTrainConfig {
        classes: ctx.classes,
        base_channels: config.segmentation.base_channels,
        seed: config.seeds[0],
        ..Default::default()
    };
    let strategy = TrainingStrategy::new(StrategyKind::Finetune, config.segmentation.iterations);
    let mut model =
        train_segmentation(&ctx.train_samples, Some(&recons), &strategy, &seg_config)?.model;
    let eval_recons = reconstruct_dataset(generator, &ctx.eval_images)?;
    let miou = evaluate(&mut model, &eval_recons, &ctx.eval_labels)?;
    let spec = serde_json::json!({"method": "gan-retrained", "source": source.config_hash});
    let mut point = source.clone();
    point.method = "gan-retrained".into();
    point.miou = miou;
    point.seg_model = "finetune".into();
    point.config_hash = config_hash(&spec);
    point.validate()?;
    Ok(point)
}

const CSV_HEADER: [&str; 12] = [
    "method",
    "F",
    "L",
    "mode",
    "bpp",
    "psnr_db",
    "ssim",
    "ms_ssim",
    "miou",
    "seg_model",
    "seed",
    "config_hash",
];

pub fn write_csv(path: &Path, points: &[RatePoint]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Tool(e.to_string()))?;
    writer
        .write_record(CSV_HEADER)
        .map_err(|e| Error::Tool(e.to_string()))?;
    for p in points {
        writer
            .write_record([
                p.method.clone(),
                p.f.map(|v| v.to_string()).unwrap_or_default(),
                p.l.map(|v| v.to_string()).unwrap_or_default(),
                p.mode.clone(),
                format!("{}", p.bpp),
                format!("{}", p.psnr_db),
                format!("{}", p.ssim),
                format!("{}", p.ms_ssim),
                format!("{}", p.miou),
                p.seg_model.clone(),
                p.seed.to_string(),
                p.config_hash.clone(),
            ])
            .map_err(|e| Error::Tool(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<RatePoint>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Tool(e.to_string()))?;
    let mut points = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Format(format!(
                "expected {} columns, got {}",
                CSV_HEADER.len(),
                record.len()
            )));
        }
        let parse_f64 = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|e| Error::Format(format!("column {}: {e}", CSV_HEADER[i])))
        };
        points.push(RatePoint {
            method: record[0].to_string(),
            f: record[1].parse().ok(),
            l: record[2].parse().ok(),
            mode: record[3].to_string(),
            bpp: parse_f64(4)?,
            psnr_db: parse_f64(5)?,
            ssim: parse_f64(6)?,
            ms_ssim: parse_f64(7)?,
            miou: parse_f64(8)?,
            seg_model: record[9].to_string(),
            seed: record[10]
                .parse()
                .map_err(|e| Error::Format(format!("column seed: {e}")))?,
            config_hash: record[11].to_string(),
        });
    }
    Ok(points)
}

/// Visual grouping of the table into plot series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SeriesStyle {
    Solid,
    Dashed,
    Dotted,
    Marker,
}

fn series_of(points: &[RatePoint]) -> Vec<(String, SeriesStyle, Vec<&RatePoint>)> {
    let mut groups: BTreeMap<String, (SeriesStyle, Vec<&RatePoint>)> = BTreeMap::new();
    for p in points {
        let (key, style) = if p.method == "gan-retrained" {
            (format!("{} (retrained seg.)", p.method), SeriesStyle::Marker)
        } else if p.method == "gan" {
            let f = p.f.unwrap_or(0);
            if p.mode == MODE_WITH {
                (format!("gan F={f} {MODE_WITH}"), SeriesStyle::Solid)
            } else {
                (format!("gan F={f} {MODE_WITHOUT}"), SeriesStyle::Dashed)
            }
        } else {
            (p.method.clone(), SeriesStyle::Dotted)
        };
        let entry = groups.entry(key).or_insert((style, Vec::new()));
        entry.1.push(p);
    }
    groups
        .into_iter()
        .map(|(name, (style, mut pts))| {
            pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
            (name, style, pts)
        })
        .collect()
}

const PANELS: [(&str, &str); 4] = [
    ("psnr", "PSNR [dB]"),
    ("ssim", "SSIM"),
    ("ms_ssim", "MS-SSIM"),
    ("miou", "mIoU"),
];

fn metric_of(point: &RatePoint, panel: &str) -> f64 {
    match panel {
        "psnr" => point.psnr_db,
        "ssim" => point.ssim,
        "ms_ssim" => point.ms_ssim,
        "miou" => point.miou,
        _ => unreachable!("unknown panel"),
    }
}

/// Draw the four rate-quality panels as SVG files
/// (`rate_<metric>.svg` under `dir`). Baselines are dotted, models trained
/// without quantization dashed, with quantization solid; retrained-
/// segmentation results appear as standalone markers.
pub fn emit_plots(points: &[RatePoint], dir: &Path) -> Result<Vec<PathBuf>> {
    use plotters::prelude::*;

    if points.is_empty() {
        return Err(Error::Config("cannot plot an empty table".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let series = series_of(points);
    let mut outputs = Vec::new();
    for (panel, label) in PANELS {
        let path = dir.join(format!("rate_{panel}.svg"));
        let finite: Vec<f64> = points
            .iter()
            .map(|p| metric_of(p, panel))
            .filter(|v| v.is_finite())
            .collect();
        let (mut y_min, mut y_max) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if !y_min.is_finite() || !y_max.is_finite() {
            y_min = 0.0;
            y_max = 1.0;
        }
        if y_max - y_min < 1e-9 {
            y_max = y_min + 1.0;
        }
        let pad = (y_max - y_min) * 0.1;
        let (x_min, x_max) = points.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
            (lo.min(p.bpp), hi.max(p.bpp))
        });
        let x_pad = ((x_max - x_min) * 0.1).max(x_max * 0.05);
        {
            let root = SVGBackend::new(&path, (640, 480)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| Error::Tool(e.to_string()))?;
            let mut chart = ChartBuilder::on(&root)
                .margin(12)
                .caption(label, ("sans-serif", 22))
                .x_label_area_size(40)
                .y_label_area_size(56)
                .build_cartesian_2d(
                    (x_min - x_pad).max(0.0)..(x_max + x_pad),
                    (y_min - pad)..(y_max + pad),
                )
                .map_err(|e| Error::Tool(e.to_string()))?;
            chart
                .configure_mesh()
                .x_desc("bit rate [bpp]")
                .y_desc(label)
                .draw()
                .map_err(|e| Error::Tool(e.to_string()))?;
            for (i, (name, style, pts)) in series.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                let coords: Vec<(f64, f64)> = pts
                    .iter()
                    .map(|p| (p.bpp, metric_of(p, panel)))
                    .filter(|(_, y)| y.is_finite())
                    .collect();
                if coords.is_empty() {
                    continue;
                }
                match style {
                    SeriesStyle::Solid => {
                        chart
                            .draw_series(LineSeries::new(coords.clone(), color.stroke_width(2)))
                            .map_err(|e| Error::Tool(e.to_string()))?
                            .label(name)
                            .legend(move |(x, y)| {
                                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
                            });
                    }
                    SeriesStyle::Dashed => {
                        chart
                            .draw_series(DashedLineSeries::new(
                                coords.clone(),
                                8,
                                5,
                                color.stroke_width(2),
                            ))
                            .map_err(|e| Error::Tool(e.to_string()))?
                            .label(name)
                            .legend(move |(x, y)| {
                                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(1))
                            });
                    }
                    SeriesStyle::Dotted => {
                        chart
                            .draw_series(DashedLineSeries::new(
                                coords.clone(),
                                2,
                                4,
                                color.stroke_width(2),
                            ))
                            .map_err(|e| Error::Tool(e.to_string()))?
                            .label(name)
                            .legend(move |(x, y)| {
                                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(1))
                            });
                    }
                    SeriesStyle::Marker => {
                        chart
                            .draw_series(coords.iter().map(|&(x, y)| {
                                TriangleMarker::new((x, y), 7, color.filled())
                            }))
                            .map_err(|e| Error::Tool(e.to_string()))?
                            .label(name)
                            .legend(move |(x, y)| TriangleMarker::new((x + 9, y), 7, color.filled()));
                    }
                }
                // point markers on every series for readability
                if *style != SeriesStyle::Marker {
                    chart
                        .draw_series(
                            coords
                                .iter()
                                .map(|&(x, y)| Circle::new((x, y), 3, color.filled())),
                        )
                        .map_err(|e| Error::Tool(e.to_string()))?;
                }
            }
            chart
                .configure_series_labels()
                .border_style(BLACK.mix(0.4))
                .background_style(WHITE.mix(0.9))
                .draw()
                .map_err(|e| Error::Tool(e.to_string()))?;
            root.present().map_err(|e| Error::Tool(e.to_string()))?;
        }
        outputs.push(path);
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_points() -> Vec<RatePoint> {
        let mut points = Vec::new();
        for (i, l) in [2usize, 4, 8].iter().enumerate() {
            points.push(RatePoint {
                method: "gan".into(),
                f: Some(8),
                l: Some(*l),
                mode: MODE_WITH.into(),
                bpp: 0.03125 * (i + 1) as f64,
                psnr_db: 20.0 + i as f64,
                ssim: 0.8 + 0.02 * i as f64,
                ms_ssim: 0.85 + 0.02 * i as f64,
                miou: 0.4 + 0.05 * i as f64,
                seg_model: "uncoded".into(),
                seed: 0,
                config_hash: format!("h{i}"),
            });
        }
        points.push(RatePoint {
            method: "jpeg".into(),
            f: None,
            l: None,
            mode: "baseline".into(),
            bpp: 0.21,
            psnr_db: 23.0,
            ssim: 0.82,
            ms_ssim: 0.87,
            miou: 0.42,
            seg_model: "uncoded".into(),
            seed: 0,
            config_hash: "hb".into(),
        });
        points.push(RatePoint {
            method: "gan-retrained".into(),
            f: Some(8),
            l: Some(4),
            mode: MODE_WITH.into(),
            bpp: 0.0625,
            psnr_db: 21.0,
            ssim: 0.82,
            ms_ssim: 0.87,
            miou: 0.55,
            seg_model: "finetune".into(),
            seed: 0,
            config_hash: "hr".into(),
        });
        points
    }

    #[test]
    fn csv_round_trip_preserves_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let points = sample_points();
        write_csv(&path, &points).unwrap();
        let loaded = read_csv(&path).unwrap();
        assert_eq!(points.len(), loaded.len());
        for (a, b) in points.iter().zip(&loaded) {
            assert_eq!(a.method, b.method);
            assert_eq!(a.f, b.f);
            assert_eq!(a.l, b.l);
            assert_eq!(a.bpp, b.bpp);
            assert_eq!(a.miou, b.miou);
            assert_eq!(a.config_hash, b.config_hash);
        }
    }

    #[test]
    fn plots_emit_four_deterministic_panels() {
        let dir = tempfile::tempdir().unwrap();
        let points = sample_points();
        let a_dir = dir.path().join("a");
        let b_dir = dir.path().join("b");
        let outputs = emit_plots(&points, &a_dir).unwrap();
        assert_eq!(outputs.len(), 4);
        emit_plots(&points, &b_dir).unwrap();
        for panel in ["psnr", "ssim", "ms_ssim", "miou"] {
            let name = format!("rate_{panel}.svg");
            let x = fs::read(a_dir.join(&name)).unwrap();
            let y = fs::read(b_dir.join(&name)).unwrap();
            assert!(!x.is_empty());
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn empty_table_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&[], dir.path()).is_err());
    }

    #[test]
    fn rate_point_validation() {
        let mut p = sample_points().pop().unwrap();
        p.validate().unwrap();
        p.miou = 1.5;
        assert!(p.validate().is_err());
        p.miou = 0.5;
        p.bpp = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn sweep_config_validation() {
        let base = SweepConfig {
            output_dir: "out".into(),
            feature_maps: vec![4],
            levels: vec![2, 4],
            modes: default_modes(),
            seeds: vec![0],
            dataset: DatasetSpec {
                source: "synthetic".into(),
                count: 4,
                height: 32,
                width: 32,
                classes: 3,
                seed: 0,
                holdout: 1,
            },
            train: SweepTrainSpec::default(),
            segmentation: SegSpec::default(),
            baselines: BaselineSpec::default(),
        };
        base.validate().unwrap();
        let mut bad = base.clone();
        bad.levels = vec![3];
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.modes = vec!["sometimes".into()];
        assert!(bad.validate().is_err());
        let mut bad = base;
        bad.dataset.holdout = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            output_dir = "results"
            feature_maps = [4, 8]
            levels = [2, 4, 8]
            seeds = [1, 2]

            [dataset]
            source = "synthetic"
            count = 6
            height = 64
            width = 128
            classes = 4
            holdout = 2

            [train]
            epochs = 10

            [baselines]
            codecs = ["jpeg", "webp"]
            targets = [0.125, 0.25]
        "#;
        let config: SweepConfig = toml::from_str(text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.feature_maps, vec![4, 8]);
        assert_eq!(config.modes.len(), 2); // defaulted
        assert_eq!(config.train.epochs, 10);
        assert_eq!(config.train.learning_rate, 2e-4); // defaulted
    }

    #[test]
    fn ms_ssim_scale_choice_tracks_resolution() {
        assert_eq!(ms_ssim_scales_for(64, 128), 3);
        assert_eq!(ms_ssim_scales_for(512, 1024), 5);
        assert_eq!(ms_ssim_scales_for(16, 16), 1);
    }
}
