//! Semantic-segmentation training and coded-versus-uncoded evaluation.
//!
//! A small fully-convolutional encoder-decoder (4 down / 4 up stages) stands
//! in for a full-scale segmentation backbone; the harness itself only needs
//! train/predict, so any drop-in with the same surface works. Training uses
//! per-pixel cross-entropy with ignore-label masking and random horizontal
//! flips; four data strategies control where samples come from.

use std::path::Path;

use ndarray::{s, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::{collect_params, restore_params, Checkpoint};
use crate::codec::Generator;
use crate::error::{Error, Result};
use crate::metrics::{confusion_accumulate, miou, ConfusionMatrix, IGNORE_LABEL};
use crate::nn::{
    check_finite, Adam, Conv2d, ConvTranspose2d, InstanceNorm2d, Layer, PadMode, Relu, Sequential,
    Tensor,
};

/// Where the training samples come from, mirroring the four retraining
/// strategies: originals only, codec reconstructions only, the union of both
/// in strict alternation, or originals first with a reconstruction
/// fine-tuning tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Uncoded,
    Reconstructions,
    Mixed,
    Finetune,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncoded" => Ok(StrategyKind::Uncoded),
            "reconstructions" => Ok(StrategyKind::Reconstructions),
            "mixed" => Ok(StrategyKind::Mixed),
            "finetune" => Ok(StrategyKind::Finetune),
            other => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected uncoded, reconstructions, mixed, finetune)"
            ))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyKind::Uncoded => "uncoded",
            StrategyKind::Reconstructions => "reconstructions",
            StrategyKind::Mixed => "mixed",
            StrategyKind::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingStrategy {
    pub kind: StrategyKind,
    /// Total optimizer steps; every strategy consumes exactly this budget.
    pub iterations: usize,
    /// (uncoded steps, reconstruction steps) for the finetune strategy.
    pub finetune_split: Option<(usize, usize)>,
}

impl TrainingStrategy {
    pub fn new(kind: StrategyKind, iterations: usize) -> Self {
        let finetune_split = (kind == StrategyKind::Finetune).then(|| {
            // 3:1 split, scaled proportionally from the 90k + 30k protocol
            let tail = iterations / 4;
            (iterations - tail, tail)
        });
        TrainingStrategy {
            kind,
            iterations,
            finetune_split,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iteration budget must be positive".into()));
        }
        match (self.kind, self.finetune_split) {
            (StrategyKind::Finetune, Some((a, b))) if a + b == self.iterations => Ok(()),
            (StrategyKind::Finetune, Some((a, b))) => Err(Error::Config(format!(
                "finetune split {a}+{b} does not sum to budget {}",
                self.iterations
            ))),
            (StrategyKind::Finetune, None) => {
                Err(Error::Config("finetune strategy needs a split".into()))
            }
            (_, None) => Ok(()),
            (_, Some(_)) => Err(Error::Config(
                "finetune split only applies to the finetune strategy".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegTrainConfig {
    pub classes: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub base_channels: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            classes: 19,
            learning_rate: 2e-4,
            seed: 0,
            base_channels: 16,
        }
    }
}

/// Fully-convolutional encoder-decoder predicting per-pixel class logits.
pub struct SegModel {
    pub classes: usize,
    pub base_channels: usize,
    net: Sequential,
}

const SEG_STAGES: usize = 4;

impl SegModel {
    pub fn new(classes: usize, base_channels: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = base_channels;
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        let mut in_c = 3;
        for i in 0..SEG_STAGES {
            let out_c = c << i.min(2);
            layers.push(Box::new(Conv2d::new(
                &format!("down{i}.conv"),
                rng,
                in_c,
                out_c,
                3,
                2,
                1,
                PadMode::Zero,
            )));
            layers.push(Box::new(InstanceNorm2d::new(&format!("down{i}.norm"), out_c)));
            layers.push(Box::new(Relu::new()));
            in_c = out_c;
        }
        for i in 0..SEG_STAGES {
            let out_c = if i + 1 == SEG_STAGES {
                c
            } else {
                c << (SEG_STAGES - 2 - i).min(2)
            };
            layers.push(Box::new(ConvTranspose2d::new(
                &format!("up{i}.conv"),
                rng,
                in_c,
                out_c,
                4,
                2,
                1,
            )));
            layers.push(Box::new(InstanceNorm2d::new(&format!("up{i}.norm"), out_c)));
            layers.push(Box::new(Relu::new()));
            in_c = out_c;
        }
        layers.push(Box::new(Conv2d::new(
            "head.conv",
            rng,
            in_c,
            classes,
            1,
            1,
            0,
            PadMode::Zero,
        )));
        Ok(SegModel {
            classes,
            base_channels,
            net: Sequential::new(layers),
        })
    }

    /// Input dims must be divisible by the total downsampling factor.
    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = 1usize << SEG_STAGES;
        if h % d != 0 || w % d != 0 {
            return Err(Error::Shape {
                expected: format!("dims divisible by {d}"),
                got: format!("{h}x{w}"),
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dim();
        self.check_dims(h, w)?;
        let logits = self.net.forward(x);
        check_finite(&logits, "segmentation logits")?;
        Ok(logits)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Tensor {
        self.net.backward(grad_logits)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        self.net.visit_params(f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.grad.fill(0.0));
    }

    pub fn to_checkpoint(&mut self) -> Checkpoint {
        Checkpoint {
            kind: "segmentation".into(),
            config: json!({
                "classes": self.classes,
                "base_channels": self.base_channels,
            }),
            step: 0,
            params: collect_params(|f| self.visit_params(f)),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<SegModel> {
        if ckpt.kind != "segmentation" {
            return Err(Error::Format(format!(
                "expected a segmentation checkpoint, got '{}'",
                ckpt.kind
            )));
        }
        let classes = ckpt.config["classes"].as_u64().ok_or_else(|| {
            Error::Format("segmentation checkpoint missing class count".into())
        })? as usize;
        let base = ckpt.config["base_channels"]
            .as_u64()
            .ok_or_else(|| Error::Format("segmentation checkpoint missing channels".into()))?
            as usize;
        let mut model = SegModel::new(classes, base, 0)?;
        restore_params(ckpt, |f| model.visit_params(f))?;
        Ok(model)
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<SegModel> {
        SegModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Per-pixel argmax class map at input resolution; deterministic.
pub fn predict(model: &mut SegModel, image: &ndarray::Array3<f32>) -> Result<Array2<u8>> {
    let (c, h, w) = image.dim();
    let mut batch = Array4::zeros((1, c, h, w));
    batch.slice_mut(s![0, .., .., ..]).assign(image);
    let logits = model.forward(&batch)?;
    let k = model.classes;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[[0, 0, y, x]];
        for cls in 1..k {
            let v = logits[[0, cls, y, x]];
            if v > best_v {
                best = cls;
                best_v = v;
            }
        }
        best as u8
    }))
}

/// Masked softmax cross-entropy. Returns the mean loss over scored pixels
/// and the logit gradient; all-ignored targets give zero loss and gradient.
pub fn cross_entropy_loss(logits: &Tensor, target: &Array2<u8>, classes: usize) -> Result<(f64, Tensor)> {
    let (n, k, h, w) = logits.dim();
    if n != 1 || k != classes || (h, w) != target.dim() {
        return Err(Error::Shape {
            expected: format!("(1, {classes}, {:?})", target.dim()),
            got: format!("{:?}", logits.dim()),
        });
    }
    let mut grad = Tensor::zeros(logits.raw_dim());
    let mut loss = 0.0f64;
    let mut scored = 0usize;
    for y in 0..h {
        for x in 0..w {
            let t = target[[y, x]];
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= classes {
                return Err(Error::Dataset(format!(
                    "label {t} out of range for {classes} classes"
                )));
            }
            scored += 1;
            let mut maxv = f32::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(logits[[0, c, y, x]]);
            }
            let mut denom = 0.0f64;
            for c in 0..k {
                denom += ((logits[[0, c, y, x]] - maxv) as f64).exp();
            }
            let logit_t = (logits[[0, t as usize, y, x]] - maxv) as f64;
            loss += denom.ln() - logit_t;
            for c in 0..k {
                let p = ((logits[[0, c, y, x]] - maxv) as f64).exp() / denom;
                let delta = if c == t as usize { 1.0 } else { 0.0 };
                grad[[0, c, y, x]] = (p - delta) as f32;
            }
        }
    }
    if scored == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / scored as f32;
    grad.mapv_inplace(|v| v * scale);
    Ok((loss / scored as f64, grad))
}

/// One labeled training sample in the unit pixel domain.
pub type SegSample = (ndarray::Array3<f32>, Array2<u8>);

fn flip_sample(img: &ndarray::Array3<f32>, lab: &Array2<u8>) -> SegSample {
    let (c, h, w) = img.dim();
    let fi = ndarray::Array3::from_shape_fn((c, h, w), |(cc, y, x)| img[[cc, y, w - 1 - x]]);
    let fl = Array2::from_shape_fn((h, w), |(y, x)| lab[[y, w - 1 - x]]);
    (fi, fl)
}

/// Reconstruct every dataset image through the codec (hard quantization).
pub fn reconstruct_dataset(
    generator: &mut Generator,
    images: &[ndarray::Array3<f32>],
) -> Result<Vec<ndarray::Array3<f32>>> {
    images
        .iter()
        .map(|img| {
            let (c, h, w) = img.dim();
            let mut batch = Array4::zeros((1, c, h, w));
            batch.slice_mut(s![0, .., .., ..]).assign(img);
            let out = generator.reconstruct(&batch)?;
            Ok(out.slice(s![0, .., .., ..]).to_owned())
        })
        .collect()
}

/// Which sample pool a given optimizer step draws from.
fn step_source(strategy: &TrainingStrategy, step: usize) -> StrategyKind {
    match strategy.kind {
        StrategyKind::Uncoded => StrategyKind::Uncoded,
        StrategyKind::Reconstructions => StrategyKind::Reconstructions,
        // strict alternation: even steps original, odd steps reconstruction
        StrategyKind::Mixed => {
            if step % 2 == 0 {
                StrategyKind::Uncoded
            } else {
                StrategyKind::Reconstructions
            }
        }
        StrategyKind::Finetune => {
            let (head, _) = strategy.finetune_split.expect("validated");
            if step < head {
                StrategyKind::Uncoded
            } else {
                StrategyKind::Reconstructions
            }
        }
    }
}

pub struct SegTrainOutput {
    pub model: SegModel,
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Train a segmentation model under one of the four data strategies.
/// `reconstructions` must be given when the strategy consumes codec output.
pub fn train_segmentation(
    originals: &[SegSample],
    reconstructions: Option<&[ndarray::Array3<f32>]>,
    strategy: &TrainingStrategy,
    config: &SegTrainConfig,
) -> Result<SegTrainOutput> {
    strategy.validate()?;
    if originals.is_empty() {
        return Err(Error::Dataset("no labeled training samples".into()));
    }
    let needs_recon = strategy.kind != StrategyKind::Uncoded;
    let recons = match (needs_recon, reconstructions) {
        (true, None) => {
            return Err(Error::Config(format!(
                "strategy '{}' needs codec reconstructions",
                strategy.kind
            )))
        }
        (true, Some(r)) => {
            if r.len() != originals.len() {
                return Err(Error::Dataset(format!(
                    "{} reconstructions for {} originals",
                    r.len(),
                    originals.len()
                )));
            }
            r
        }
        (false, r) => r.unwrap_or(&[]),
    };
    let mut model = SegModel::new(config.classes, config.base_channels, config.seed)?;
    let mut opt = Adam::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e67);
    let mut losses = Vec::with_capacity(strategy.iterations);
    let n = originals.len();
    for step in 0..strategy.iterations {
        let idx = rng.gen_range(0..n);
        let source = step_source(strategy, step);
        let (img, lab) = match source {
            StrategyKind::Reconstructions => (&recons[idx], &originals[idx].1),
            _ => (&originals[idx].0, &originals[idx].1),
        };
        let (img, lab) = if rng.gen_bool(0.5) {
            flip_sample(img, lab)
        } else {
            (img.clone(), lab.clone())
        };
        let (c, h, w) = img.dim();
        let mut batch = Array4::zeros((1, c, h, w));
        batch.slice_mut(s![0, .., .., ..]).assign(&img);
        let logits = model.forward(&batch)?;
        let (loss, grad) = cross_entropy_loss(&logits, &lab, config.classes)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                context: format!("segmentation step {step}"),
                message: "non-finite loss".into(),
            });
        }
        model.zero_grads();
        model.backward(&grad);
        let (m, o) = (&mut model, &mut opt);
        o.step_visit(|f| m.visit_params(f));
        losses.push(loss);
    }
    Ok(SegTrainOutput {
        steps: losses.len(),
        model,
        losses,
    })
}

/// mIoU of one model over a labeled set via a single global confusion matrix.
pub fn evaluate(
    model: &mut SegModel,
    images: &[ndarray::Array3<f32>],
    labels: &[Array2<u8>],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(model.classes);
    for (img, lab) in images.iter().zip(labels) {
        let pred = predict(model, img)?;
        confusion_accumulate(&pred, lab, &mut cm)?;
    }
    miou(&cm)
}

/// mIoU table: one row per model, one column per coded variant of the
/// evaluation images (each column shares the ground-truth labels).
pub fn evaluate_matrix(
    models: &mut [(&str, &mut SegModel)],
    codings: &[(&str, Vec<ndarray::Array3<f32>>)],
    labels: &[Array2<u8>],
) -> Result<Vec<(String, String, f64)>> {
    let mut table = Vec::new();
    for (model_name, model) in models.iter_mut() {
        for (coding_name, images) in codings {
            let value = evaluate(model, images, labels)?;
            table.push((model_name.to_string(), coding_name.to_string(), value));
        }
    }
    Ok(table)
}
