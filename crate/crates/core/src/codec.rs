//! The autoencoder generator: a six-block convolutional encoder, the
//! quantized bottleneck and a residual decoder with transposed-convolution
//! upsampling.

use ndarray::{Array3, Array4, ArrayD, s};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitstream::{downsampling_factor, LatentCode};
use crate::error::{Error, Result};
use crate::nn::{
    check_finite, Conv2d, ConvTranspose2d, InstanceNorm2d, Layer, PadMode, Relu, ResidualUnit,
    Tanh, Tensor,
};
use crate::quant::{dequantize, quantize_hard, quantize_training, QuantMode, QuantizerSpec};

pub const IMAGE_CHANNELS: usize = 3;

/// Map an 8-bit pixel into the gray-value set G = [-1, 1].
pub fn pixel_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`pixel_to_unit`], rounding and clamping to [0, 255].
pub fn unit_to_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// H×W×C raster with values in [-1, 1], stored channel-first.
#[derive(Clone, Debug)]
pub struct ImageTensor {
    /// Shape (C, H, W).
    pub data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::Config(
                "image values must lie in [-1, 1]".into(),
            ));
        }
        Ok(ImageTensor { data })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn(
            (IMAGE_CHANNELS, h as usize, w as usize),
            |(c, y, x)| pixel_to_unit(img.get_pixel(x as u32, y as u32)[c]),
        );
        ImageTensor { data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (_, h, w) = self.data.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([
                unit_to_pixel(self.data[[0, y as usize, x as usize]]),
                unit_to_pixel(self.data[[1, y as usize, x as usize]]),
                unit_to_pixel(self.data[[2, y as usize, x as usize]]),
            ])
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Batch of one, shape (1, C, H, W).
    pub fn to_batch(&self) -> Tensor {
        let (c, h, w) = self.data.dim();
        self.data
            .clone()
            .into_shape_with_order((1, c, h, w))
            .unwrap()
    }

    pub fn from_batch(batch: &Tensor, index: usize) -> Self {
        ImageTensor {
            data: batch.slice(s![index, .., .., ..]).to_owned(),
        }
    }
}

/// Channel schedule presets. `Full` is the full-resolution topology,
/// `Tiny` is the desk-scale default used by the tests and examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulePreset {
    Full,
    Tiny,
}

impl std::str::FromStr for SchedulePreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SchedulePreset::Full),
            "tiny" => Ok(SchedulePreset::Tiny),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

/// Hyperparameters that determine the network topology and the bitrate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Bottleneck feature maps F.
    pub feature_maps: usize,
    /// Quantizer reconstruction level count L.
    pub levels: usize,
    /// Per-layer stride of the downsampling blocks.
    pub stride: usize,
    /// Number of strided encoder blocks n.
    pub strided_layers: u32,
    /// Encoder channel counts, one per block; the last entry must equal F.
    pub encoder_channels: Vec<usize>,
    /// Residual unit count in the decoder.
    pub residual_units: usize,
    /// Decoder channel counts: entry conv followed by the four upsampling
    /// stages.
    pub decoder_channels: Vec<usize>,
    /// Quantizer behaviour during training.
    pub quant_mode: QuantMode,
}

impl CodecConfig {
    pub fn new(feature_maps: usize, levels: usize, preset: SchedulePreset) -> Result<Self> {
        let encoder_channels = match preset {
            SchedulePreset::Full => vec![64, 128, 256, 512, 512, feature_maps],
            SchedulePreset::Tiny => vec![16, 32, 64, 128, 128, feature_maps],
        };
        let decoder_channels = match preset {
            SchedulePreset::Full => vec![512, 256, 128, 64, 32],
            SchedulePreset::Tiny => vec![128, 64, 32, 16, 16],
        };
        let cfg = CodecConfig {
            feature_maps,
            levels,
            stride: 2,
            strided_layers: 4,
            encoder_channels,
            residual_units: 9,
            decoder_channels,
            quant_mode: QuantMode::StraightThrough,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_maps < 1 {
            return Err(Error::Config("F must be at least 1".into()));
        }
        if self.encoder_channels.len() != 6 {
            return Err(Error::Config(format!(
                "encoder channel schedule must have 6 entries, got {}",
                self.encoder_channels.len()
            )));
        }
        if *self.encoder_channels.last().unwrap() != self.feature_maps {
            return Err(Error::Config(
                "last encoder channel entry must equal F".into(),
            ));
        }
        if self.decoder_channels.len() != (self.strided_layers as usize) + 1 {
            return Err(Error::Config(format!(
                "decoder channel schedule must have {} entries, got {}",
                self.strided_layers + 1,
                self.decoder_channels.len()
            )));
        }
        if self.levels < 2 {
            return Err(Error::Config("L must be at least 2".into()));
        }
        Ok(())
    }

    /// Overall dimension reduction d = s^n.
    pub fn downsampling(&self) -> usize {
        downsampling_factor(self.stride, self.strided_layers)
    }

    pub fn quantizer(&self) -> Result<QuantizerSpec> {
        QuantizerSpec::uniform(self.levels, self.quant_mode)
    }

    pub fn bitrate_bpp(&self) -> f64 {
        crate::bitstream::bitrate_bpp(self.feature_maps, self.levels, self.downsampling())
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let d = self.downsampling();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Config(format!(
                "input dims {h}x{w} must be divisible by d={d}"
            )));
        }
        Ok(())
    }
}

/// Six conv-norm-relu blocks; blocks 2..=5 downsample by the stride.
pub struct EncoderNetwork {
    pub blocks: Vec<Box<dyn Layer>>,
}

pub fn build_encoder(config: &CodecConfig, rng: &mut ChaCha8Rng) -> Result<EncoderNetwork> {
    config.validate()?;
    let ch = &config.encoder_channels;
    let mut blocks: Vec<Box<dyn Layer>> = Vec::new();
    let mut in_c = IMAGE_CHANNELS;
    for (i, &out_c) in ch.iter().enumerate() {
        let (k, stride, pad) = if i == 0 {
            (7, 1, 3)
        } else if i < 5 {
            (3, config.stride, 1)
        } else {
            (3, 1, 1)
        };
        let name = format!("enc.block{}", i + 1);
        blocks.push(Box::new(Conv2d::new(
            &format!("{name}.conv"),
            rng,
            in_c,
            out_c,
            k,
            stride,
            pad,
            PadMode::Reflect,
        )));
        blocks.push(Box::new(InstanceNorm2d::new(&format!("{name}.norm"), out_c)));
        blocks.push(Box::new(Relu::new()));
        in_c = out_c;
    }
    Ok(EncoderNetwork { blocks })
}

/// Nine residual units followed by four transposed-convolution upsampling
/// stages and a squashing output layer.
pub struct DecoderNetwork {
    pub blocks: Vec<Box<dyn Layer>>,
}

pub fn build_decoder(config: &CodecConfig, rng: &mut ChaCha8Rng) -> Result<DecoderNetwork> {
    config.validate()?;
    let ch = &config.decoder_channels;
    let mut blocks: Vec<Box<dyn Layer>> = Vec::new();
    blocks.push(Box::new(Conv2d::new(
        "dec.entry.conv",
        rng,
        config.feature_maps,
        ch[0],
        3,
        1,
        1,
        PadMode::Reflect,
    )));
    blocks.push(Box::new(InstanceNorm2d::new("dec.entry.norm", ch[0])));
    blocks.push(Box::new(Relu::new()));
    for i in 0..config.residual_units {
        blocks.push(Box::new(ResidualUnit::new(
            &format!("dec.res{i}"),
            rng,
            ch[0],
        )));
    }
    for i in 0..config.strided_layers as usize {
        let (in_c, out_c) = (ch[i], ch[i + 1]);
        let name = format!("dec.up{i}");
        blocks.push(Box::new(ConvTranspose2d::new(
            &format!("{name}.conv"),
            rng,
            in_c,
            out_c,
            4,
            config.stride,
            1,
        )));
        blocks.push(Box::new(InstanceNorm2d::new(&format!("{name}.norm"), out_c)));
        blocks.push(Box::new(Relu::new()));
    }
    blocks.push(Box::new(Conv2d::new(
        "dec.out.conv",
        rng,
        ch[config.strided_layers as usize],
        IMAGE_CHANNELS,
        7,
        1,
        3,
        PadMode::Reflect,
    )));
    blocks.push(Box::new(Tanh::new()));
    Ok(DecoderNetwork { blocks })
}

fn forward_checked(blocks: &mut [Box<dyn Layer>], x: &Tensor, what: &str) -> Result<Tensor> {
    let mut y = x.clone();
    for (i, l) in blocks.iter_mut().enumerate() {
        y = l.forward(&y);
        check_finite(&y, &format!("{what} layer {i}"))?;
    }
    Ok(y)
}

fn backward_all(blocks: &mut [Box<dyn Layer>], grad: &Tensor) -> Tensor {
    let mut g = grad.clone();
    for l in blocks.iter_mut().rev() {
        g = l.backward(&g);
    }
    g
}

/// Encoder + quantizer + decoder. Immutable for inference once built;
/// the training loop owns it exclusively while weights change.
pub struct Generator {
    pub config: CodecConfig,
    pub encoder: EncoderNetwork,
    pub decoder: DecoderNetwork,
    pub quantizer: QuantizerSpec,
    quant_grad: Option<ArrayD<f32>>,
}

impl Generator {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = build_encoder(&config, &mut rng)?;
        let decoder = build_decoder(&config, &mut rng)?;
        let quantizer = config.quantizer()?;
        Ok(Generator {
            config,
            encoder,
            decoder,
            quantizer,
            quant_grad: None,
        })
    }

    /// Deterministic forward pass of the encoder, shape (N, F, H/d, W/d).
    pub fn encode(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dim();
        self.config.check_dims(h, w)?;
        forward_checked(&mut self.encoder.blocks, x, "encoder")
    }

    /// Decoder forward pass, shape (N, 3, H, W) with values in [-1, 1].
    pub fn decode(&mut self, latent: &Tensor) -> Result<Tensor> {
        forward_checked(&mut self.decoder.blocks, latent, "decoder")
    }

    /// Full training-mode pass: encode, quantize per the configured mode,
    /// decode. Caches the quantizer gradient factor for [`Self::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let latent = self.encode(x)?;
        let (q, grad) = quantize_training(&latent.clone().into_dyn(), &self.quantizer);
        self.quant_grad = Some(grad);
        let q4 = q.into_dimensionality::<ndarray::Ix4>().unwrap();
        self.decode(&q4)
    }

    /// Inference pass without quantization (the "without quantization in
    /// training" baseline trains through this path).
    pub fn forward_unquantized(&mut self, x: &Tensor) -> Result<Tensor> {
        let latent = self.encode(x)?;
        self.quant_grad = None;
        self.decode(&latent)
    }

    /// Backpropagate a gradient on the reconstruction through decoder,
    /// quantizer surrogate and encoder.
    pub fn backward(&mut self, grad_recon: &Tensor) -> Tensor {
        let g_latent = backward_all(&mut self.decoder.blocks, grad_recon);
        let g_latent = match self.quant_grad.take() {
            Some(factor) => {
                let f4 = factor.into_dimensionality::<ndarray::Ix4>().unwrap();
                &g_latent * &f4
            }
            None => g_latent,
        };
        backward_all(&mut self.encoder.blocks, &g_latent)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        for b in &mut self.encoder.blocks {
            b.visit_params(f);
        }
        for b in &mut self.decoder.blocks {
            b.visit_params(f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    /// Hard-quantized compression of one image to a latent code.
    pub fn compress(&mut self, image: &ImageTensor) -> Result<LatentCode> {
        let x = image.to_batch();
        let latent = self.encode(&x)?;
        let idx = quantize_hard(&latent.into_dyn(), &self.quantizer);
        // (1, F, gh, gw) -> (gh, gw, F)
        let f = self.config.feature_maps;
        let (gh, gw) = (
            image.height() / self.config.downsampling(),
            image.width() / self.config.downsampling(),
        );
        let mut indices = Array3::zeros((gh, gw, f));
        for fi in 0..f {
            for hi in 0..gh {
                for wi in 0..gw {
                    indices[[hi, wi, fi]] = idx[[0, fi, hi, wi]];
                }
            }
        }
        Ok(LatentCode {
            image_height: image.height(),
            image_width: image.width(),
            indices,
        })
    }

    /// Reconstruct an image from a latent code.
    pub fn decompress(&mut self, code: &LatentCode) -> Result<ImageTensor> {
        let (gh, gw, f) = code.indices.dim();
        if f != self.config.feature_maps {
            return Err(Error::Format(format!(
                "bitstream has F={f}, codec expects F={}",
                self.config.feature_maps
            )));
        }
        let deq = dequantize(&code.indices.clone().into_dyn(), &self.quantizer)?;
        let mut latent = Array4::zeros((1, f, gh, gw));
        for fi in 0..f {
            for hi in 0..gh {
                for wi in 0..gw {
                    latent[[0, fi, hi, wi]] = deq[[hi, wi, fi]];
                }
            }
        }
        let recon = self.decode(&latent)?;
        Ok(ImageTensor::from_batch(&recon, 0))
    }

    /// Reconstruct a batch the way inference does: encode, hard-quantize,
    /// dequantize, decode.
    pub fn reconstruct(&mut self, x: &Tensor) -> Result<Tensor> {
        let latent = self.encode(x)?;
        let idx = quantize_hard(&latent.into_dyn(), &self.quantizer);
        let deq = dequantize(&idx, &self.quantizer)?;
        let q4 = deq.into_dimensionality::<ndarray::Ix4>().unwrap();
        self.decode(&q4)
    }
}
