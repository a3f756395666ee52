//! Alternating GAN training: one generator update, then one discriminator
//! update per batch, with per-step loss logging and per-epoch checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, s};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{restore_params, Checkpoint};
use crate::codec::{CodecConfig, Generator};
use crate::error::{Error, Result};
use crate::gan::{
    build_discriminator, feature_matching_grad, feature_matching_loss, gan_loss_discriminator,
    gan_loss_discriminator_grads, gan_loss_generator, gan_loss_generator_grad,
    generator_total_loss, similarity_grad, similarity_loss, DiscriminatorNetwork,
    DiscriminatorSpec, LossWeights,
};
use crate::nn::{Adam, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// false: train without the quantizer in the loop (quantize only at
    /// inference); true: quantize per the codec's training mode.
    pub quantize_in_training: bool,
    pub weights: LossWeights,
    pub discriminator: DiscriminatorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 2e-4,
            batch_size: 1,
            seed: 0,
            quantize_in_training: true,
            weights: LossWeights::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_gan_g: f64,
    pub l_fm: f64,
    pub l_sim: f64,
    pub l_gen_total: f64,
    pub l_disc: f64,
}

pub struct TrainState {
    pub generator: Generator,
    pub discriminator: DiscriminatorNetwork,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub config: TrainConfig,
    pub step: u64,
}

impl TrainState {
    pub fn new(codec: CodecConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(codec, config.seed)?;
        let discriminator = build_discriminator(&config.discriminator, config.seed ^ 0x5eed)?;
        let mut opt_gen = Adam::new(config.learning_rate);
        let mut opt_disc = Adam::new(config.learning_rate);
        opt_gen.lr = config.learning_rate;
        opt_disc.lr = config.learning_rate;
        Ok(TrainState {
            generator,
            discriminator,
            opt_gen,
            opt_disc,
            config,
            step: 0,
        })
    }

    fn generator_forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if self.config.quantize_in_training {
            self.generator.forward_train(x)
        } else {
            self.generator.forward_unquantized(x)
        }
    }

    /// One generator update (gradients flow back through the discriminator
    /// without updating it) followed by one discriminator update on a fresh
    /// reconstruction.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<LossReport> {
        let w = self.config.weights;

        // ---- generator phase ----
        self.generator.zero_grads();
        self.discriminator.zero_grads();
        let xhat = self.generator_forward(batch)?;
        let out_real = self.discriminator.forward(batch)?;
        let out_fake = self.discriminator.forward(&xhat)?;

        let l_gan_g = gan_loss_generator(&out_fake.logits);
        let l_fm = feature_matching_loss(&out_real.features, &out_fake.features)?;
        let l_sim = similarity_loss(batch, &xhat)?;
        let l_gen_total = generator_total_loss(l_gan_g, l_fm, l_sim, &w)?;

        let mut glog = gan_loss_generator_grad(&out_fake.logits);
        for g in glog.iter_mut() {
            g.mapv_inplace(|v| v * w.w_gan as f32);
        }
        let mut tap_grads = feature_matching_grad(&out_real.features, &out_fake.features);
        for scale in tap_grads.iter_mut() {
            for g in scale.iter_mut() {
                g.mapv_inplace(|v| v * w.w_fm as f32);
            }
        }
        // the last discriminator forward cached the fake pass, so this
        // backward propagates to x̂
        let mut g_xhat = self.discriminator.backward(&glog, Some(&tap_grads));
        let mut g_sim = similarity_grad(batch, &xhat);
        g_sim.mapv_inplace(|v| v * w.w_sim as f32);
        g_xhat = &g_xhat + &g_sim;
        self.generator.backward(&g_xhat);
        let (gen, opt_gen) = (&mut self.generator, &mut self.opt_gen);
        opt_gen.step_visit(|f| gen.visit_params(f));

        // ---- discriminator phase ----
        self.discriminator.zero_grads();
        let xhat2 = self.generator_forward(batch)?;
        let out_fake2 = self.discriminator.forward(&xhat2)?;
        let out_real2_logits = {
            // need real logits for the loss value before the grads
            let out_real2 = self.discriminator.forward(batch)?;
            out_real2.logits
        };
        let l_disc = gan_loss_discriminator(&out_real2_logits, &out_fake2.logits)?;
        let (g_real, g_fake) = gan_loss_discriminator_grads(&out_real2_logits, &out_fake2.logits);
        // caches currently hold the real pass
        self.discriminator.backward(&g_real, None);
        let _ = self.discriminator.forward(&xhat2)?;
        self.discriminator.backward(&g_fake, None);
        let (disc, opt_disc) = (&mut self.discriminator, &mut self.opt_disc);
        opt_disc.step_visit(|f| disc.visit_params(f));

        self.step += 1;
        let report = LossReport {
            step: self.step,
            l_gan_g,
            l_fm,
            l_sim,
            l_gen_total,
            l_disc,
        };
        for (name, v) in [
            ("generator", report.l_gen_total),
            ("discriminator", report.l_disc),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    context: format!("training step {} {name} loss", self.step),
                    message: format!(
                        "diverged: gan={l_gan_g} fm={l_fm} sim={l_sim} disc={l_disc}"
                    ),
                });
            }
        }
        Ok(report)
    }

    /// Full state snapshot: weights plus Adam moments for both networks.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut params = Vec::new();
        {
            let collect = |prefix: &str,
                           out: &mut Vec<(String, ndarray::ArrayD<f32>)>,
                           p: &mut crate::nn::Param| {
                out.push((format!("{prefix}{}", p.name), p.value.clone()));
                out.push((format!("{prefix}{}#m", p.name), p.m.clone()));
                out.push((format!("{prefix}{}#v", p.name), p.v.clone()));
            };
            self.generator
                .visit_params(&mut |p| collect("gen/", &mut params, p));
            self.discriminator
                .visit_params(&mut |p| collect("disc/", &mut params, p));
        }
        let config = serde_json::json!({
            "codec": self.generator.config,
            "train": self.config,
            "opt_gen_steps": self.opt_gen.step_count(),
            "opt_disc_steps": self.opt_disc.step_count(),
        });
        Checkpoint {
            kind: "train-state".into(),
            config,
            step: self.step,
            params,
        }
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.kind != "train-state" {
            return Err(Error::Format(format!(
                "expected a train-state checkpoint, got kind `{}`",
                ckpt.kind
            )));
        }
        let mut result = Ok(());
        let assign = |p: &mut crate::nn::Param, prefix: &str, result: &mut Result<()>| {
            for (suffix, dst) in [("", 0usize), ("#m", 1), ("#v", 2)] {
                let key = format!("{prefix}{}{suffix}", p.name);
                match ckpt.params.iter().find(|(n, _)| n == &key) {
                    Some((_, v)) if v.shape() == p.value.shape() => match dst {
                        0 => p.value.assign(v),
                        1 => p.m.assign(v),
                        _ => p.v.assign(v),
                    },
                    _ => *result = Err(Error::Format(format!("checkpoint missing {key}"))),
                }
            }
        };
        self.generator
            .visit_params(&mut |p| assign(p, "gen/", &mut result));
        self.discriminator
            .visit_params(&mut |p| assign(p, "disc/", &mut result));
        result?;
        self.step = ckpt.step;
        self.opt_gen
            .set_step_count(ckpt.config["opt_gen_steps"].as_u64().unwrap_or(ckpt.step));
        self.opt_disc
            .set_step_count(ckpt.config["opt_disc_steps"].as_u64().unwrap_or(ckpt.step));
        Ok(())
    }

    /// Export just the generator for inference.
    pub fn generator_checkpoint(&mut self) -> Checkpoint {
        generator_to_checkpoint(&mut self.generator)
    }
}

pub fn generator_to_checkpoint(gen: &mut Generator) -> Checkpoint {
    let mut params = Vec::new();
    gen.visit_params(&mut |p| params.push((p.name.clone(), p.value.clone())));
    Checkpoint {
        kind: "generator".into(),
        config: serde_json::to_value(&gen.config).unwrap(),
        step: 0,
        params,
    }
}

pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<Generator> {
    if ckpt.kind != "generator" && ckpt.kind != "train-state" {
        return Err(Error::Format(format!(
            "expected a generator checkpoint, got kind `{}`",
            ckpt.kind
        )));
    }
    let (config, prefix) = if ckpt.kind == "generator" {
        (ckpt.config.clone(), "")
    } else {
        (ckpt.config["codec"].clone(), "gen/")
    };
    let config: CodecConfig = serde_json::from_value(config)
        .map_err(|e| Error::Format(format!("checkpoint codec config: {e}")))?;
    let mut gen = Generator::new(config, 0)?;
    if prefix.is_empty() {
        restore_params(ckpt, |f| gen.visit_params(f))?;
    } else {
        let mut result = Ok(());
        gen.visit_params(&mut |p| {
            let key = format!("{prefix}{}", p.name);
            match ckpt.params.iter().find(|(n, _)| n == &key) {
                Some((_, v)) if v.shape() == p.value.shape() => p.value.assign(v),
                _ => result = Err(Error::Format(format!("checkpoint missing {key}"))),
            }
        });
        result?;
    }
    Ok(gen)
}

/// Stack (C, H, W) images into a batch.
pub fn make_batch(images: &[ndarray::Array3<f32>]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let (c, h, w) = images[0].dim();
    let mut batch = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape {
                expected: format!("{:?}", (c, h, w)),
                got: format!("{:?}", img.dim()),
            });
        }
        batch.slice_mut(s![i, .., .., ..]).assign(img);
    }
    Ok(batch)
}

pub struct TrainOutput {
    pub state: TrainState,
    pub log: Vec<LossReport>,
}

/// Run `epochs * ceil(N / B)` steps over the dataset, shuffling with a
/// per-epoch seed, checkpointing each epoch when a directory is given.
pub fn train(
    dataset: &[ndarray::Array3<f32>],
    codec: CodecConfig,
    config: TrainConfig,
    checkpoint_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::Dataset("training dataset is empty".into()));
    }
    config.validate()?;
    let mut state = TrainState::new(codec, config.clone())?;
    let mut log = Vec::new();
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let mut start_epoch = 0usize;
    if let Some(path) = resume_from {
        let ckpt = Checkpoint::load(path)?;
        state.restore(&ckpt)?;
        start_epoch = (state.step as usize) / steps_per_epoch;
    }
    for epoch in start_epoch..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let batch = make_batch(&images)?;
            let report = state.train_step(&batch)?;
            log.push(report);
        }
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("epoch_{:04}.sckp", epoch + 1));
            state.checkpoint().save(&path)?;
            write_log_csv(&dir.join("train_log.csv"), &log)?;
        }
    }
    Ok(TrainOutput { state, log })
}

pub fn write_log_csv(path: &PathBuf, log: &[LossReport]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "step,L_gan_G,L_fm,L_sim,L_gen_total,L_disc").map_err(|e| Error::io(path, e))?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.step, r.l_gan_g, r.l_fm, r.l_sim, r.l_gen_total, r.l_disc
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SchedulePreset;
    use ndarray::Array3;

    /// Deliberately small topology so the tests stay fast.
    fn micro_codec(f: usize, l: usize) -> CodecConfig {
        let mut cfg = CodecConfig::new(f, l, SchedulePreset::Tiny).unwrap();
        cfg.encoder_channels = vec![4, 8, 8, 8, 8, f];
        cfg.decoder_channels = vec![8, 8, 8, 8, 4];
        cfg.residual_units = 2;
        cfg
    }

    fn micro_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 2,
            seed,
            discriminator: DiscriminatorSpec {
                scales: 2,
                base_channels: 4,
            },
            ..TrainConfig::default()
        }
    }

    fn toy_dataset(n: usize) -> Vec<Array3<f32>> {
        (0..n)
            .map(|i| {
                Array3::from_shape_fn((3, 32, 32), |(c, h, w)| {
                    let v = ((c * 13 + h * 7 + w * 3 + i * 29) % 17) as f32 / 8.5 - 1.0;
                    v.clamp(-1.0, 1.0)
                })
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_is_a_noop() {
        let mut cfg = micro_train_config(1);
        cfg.learning_rate = f32::MIN_POSITIVE; // effectively zero update
        let mut state = TrainState::new(micro_codec(2, 4), cfg).unwrap();
        let batch = make_batch(&toy_dataset(2)).unwrap();
        let r1 = state.train_step(&batch).unwrap();
        let r2 = state.train_step(&batch).unwrap();
        assert!((r1.l_gen_total - r2.l_gen_total).abs() < 1e-9);
        assert!((r1.l_disc - r2.l_disc).abs() < 1e-9);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let data = toy_dataset(4);
        let run = || {
            let out = train(
                &data,
                micro_codec(2, 2),
                micro_train_config(7),
                None,
                None,
            )
            .unwrap();
            out.log
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.l_gen_total.to_bits(), y.l_gen_total.to_bits());
            assert_eq!(x.l_disc.to_bits(), y.l_disc.to_bits());
        }
    }

    #[test]
    fn epoch_step_bookkeeping() {
        let data = toy_dataset(8);
        let out = train(
            &data,
            micro_codec(2, 2),
            micro_train_config(3),
            None,
            None,
        )
        .unwrap();
        // 1 epoch, 8 images, batch 2 -> 4 steps
        assert_eq!(out.log.len(), 4);
        assert_eq!(out.state.step, 4);
    }

    #[test]
    fn gradient_isolation_between_networks() {
        let mut state = TrainState::new(micro_codec(2, 2), micro_train_config(5)).unwrap();
        let batch = make_batch(&toy_dataset(2)).unwrap();

        // run one normal step to warm caches, then snapshot
        state.train_step(&batch).unwrap();
        let snap = |state: &mut TrainState| {
            let mut g = Vec::new();
            state.generator.visit_params(&mut |p| g.push(p.value.clone()));
            let mut d = Vec::new();
            state
                .discriminator
                .visit_params(&mut |p| d.push(p.value.clone()));
            (g, d)
        };
        let (g0, d0) = snap(&mut state);

        // generator-only phase: replicate the step but skip the disc update
        state.generator.zero_grads();
        state.discriminator.zero_grads();
        let xhat = state.generator.forward_train(&batch).unwrap();
        let out_fake = state.discriminator.forward(&xhat).unwrap();
        let glog = gan_loss_generator_grad(&out_fake.logits);
        let gx = state.discriminator.backward(&glog, None);
        state.generator.backward(&gx);
        let (gen, opt_gen) = (&mut state.generator, &mut state.opt_gen);
        opt_gen.step_visit(|f| gen.visit_params(f));

        let (g1, d1) = snap(&mut state);
        assert!(g0.iter().zip(&g1).any(|(a, b)| a != b), "generator moved");
        assert!(
            d0.iter().zip(&d1).all(|(a, b)| a == b),
            "discriminator unchanged by generator update"
        );
    }

    #[test]
    fn resume_reproduces_losses() {
        let data = toy_dataset(4);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_train_config(9);
        cfg.epochs = 2;
        let full = train(&data, micro_codec(2, 2), cfg.clone(), Some(dir.path()), None).unwrap();
        // resume from the end of epoch 1
        let resumed = train(
            &data,
            micro_codec(2, 2),
            cfg,
            None,
            Some(&dir.path().join("epoch_0001.sckp")),
        )
        .unwrap();
        let tail = &full.log[2..];
        assert_eq!(resumed.log.len(), tail.len());
        for (a, b) in tail.iter().zip(&resumed.log) {
            assert!((a.l_gen_total - b.l_gen_total).abs() < 1e-6);
            assert!((a.l_disc - b.l_disc).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let r = train(
            &[],
            micro_codec(2, 2),
            micro_train_config(1),
            None,
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let mut state = TrainState::new(micro_codec(2, 4), micro_train_config(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.sckp");
        state.generator_checkpoint().save(&path).unwrap();
        let ckpt = Checkpoint::load(&path).unwrap();
        let mut restored = generator_from_checkpoint(&ckpt).unwrap();
        let x = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, h, w)| {
            ((c + h + w) % 3) as f32 * 0.3 - 0.3
        });
        let a = state.generator.reconstruct(&x).unwrap();
        let b = restored.reconstruct(&x).unwrap();
        assert_eq!(a, b);
    }
}
