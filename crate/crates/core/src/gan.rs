//! Multi-scale PatchGAN discriminator and the training losses: least-squares
//! GAN terms, discriminator feature matching, and pixel-level similarity.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AvgPool2, Conv2d, InstanceNorm2d, Layer, LeakyRelu, PadMode, Tensor};

/// Topology of the multi-scale patch discriminator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// Number of image scales, each halving the previous resolution.
    pub scales: usize,
    /// Channel count of the first convolution of each scale stack.
    pub base_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            scales: 3,
            base_channels: 64,
        }
    }
}

impl DiscriminatorSpec {
    pub fn tiny() -> Self {
        DiscriminatorSpec {
            scales: 3,
            base_channels: 16,
        }
    }

    /// Feature maps tapped per scale for the feature-matching loss.
    pub const TAPS_PER_SCALE: usize = 4;

    /// Patch receptive field v at the finest scale, from the fixed
    /// (k4 s2) x3 + (k4 s1) x2 stack.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let mut jump = 1usize;
        for &(k, s) in &[(4usize, 2usize), (4, 2), (4, 2), (4, 1), (4, 1)] {
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Smallest input dimension the configured scale count supports.
    pub fn min_input_dim(&self) -> usize {
        8 << (self.scales - 1)
    }
}

/// One per-scale convolutional stack with taps on the post-activation maps.
struct ScaleStack {
    layers: Vec<Box<dyn Layer>>,
    /// Layer indices whose outputs are tapped (after each activation).
    tap_after: Vec<usize>,
}

impl ScaleStack {
    fn new(name: &str, rng: &mut ChaCha8Rng, base: usize) -> Self {
        let c = base;
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        let mut tap_after = Vec::new();
        // k4 s2, LReLU
        layers.push(Box::new(Conv2d::new(
            &format!("{name}.conv0"),
            rng,
            3,
            c,
            4,
            2,
            1,
            PadMode::Zero,
        )));
        layers.push(Box::new(LeakyRelu::new(0.2)));
        tap_after.push(layers.len() - 1);
        for (i, (in_c, out_c, stride, pad)) in [
            (c, 2 * c, 2usize, 1usize),
            (2 * c, 4 * c, 2, 1),
            (4 * c, 4 * c, 1, 2),
        ]
        .into_iter()
        .enumerate()
        {
            layers.push(Box::new(Conv2d::new(
                &format!("{name}.conv{}", i + 1),
                rng,
                in_c,
                out_c,
                4,
                stride,
                pad,
                PadMode::Zero,
            )));
            layers.push(Box::new(InstanceNorm2d::new(
                &format!("{name}.norm{}", i + 1),
                out_c,
            )));
            layers.push(Box::new(LeakyRelu::new(0.2)));
            tap_after.push(layers.len() - 1);
        }
        // logit layer, not tapped
        layers.push(Box::new(Conv2d::new(
            &format!("{name}.logit"),
            rng,
            4 * c,
            1,
            4,
            1,
            2,
            PadMode::Zero,
        )));
        ScaleStack { layers, tap_after }
    }

    fn forward(&mut self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let mut taps = Vec::with_capacity(self.tap_after.len());
        let mut y = x.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            y = l.forward(&y);
            if self.tap_after.contains(&i) {
                taps.push(y.clone());
            }
        }
        (y, taps)
    }

    fn backward(&mut self, grad_logits: &Tensor, tap_grads: Option<&[Tensor]>) -> Tensor {
        let mut g = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&g);
            // after stepping below layer i, inject the tap gradient that was
            // attached to the output of layer i-1
            if i > 0 {
                if let Some(tgs) = tap_grads {
                    if let Some(pos) = self.tap_after.iter().position(|&t| t == i - 1) {
                        g = &g + &tgs[pos];
                    }
                }
            }
        }
        g
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}

/// Per-scale patch logits and tapped feature maps for one input batch.
pub struct DiscOutput {
    /// One (N, 1, h, w) grid of patch logits per scale.
    pub logits: Vec<Tensor>,
    /// Tapped feature maps, `features[scale][tap]`.
    pub features: Vec<Vec<Tensor>>,
}

impl DiscOutput {
    pub fn total_patches(&self) -> usize {
        self.logits.iter().map(|l| l.len()).sum()
    }
}

pub struct DiscriminatorNetwork {
    pub spec: DiscriminatorSpec,
    stacks: Vec<ScaleStack>,
    pools: Vec<AvgPool2>,
}

pub fn build_discriminator(
    spec: &DiscriminatorSpec,
    seed: u64,
) -> Result<DiscriminatorNetwork> {
    if spec.scales < 1 {
        return Err(Error::Config("discriminator needs at least one scale".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stacks = (0..spec.scales)
        .map(|i| ScaleStack::new(&format!("disc.scale{i}"), &mut rng, spec.base_channels))
        .collect();
    let pools = (0..spec.scales.saturating_sub(1))
        .map(|_| AvgPool2::new())
        .collect();
    Ok(DiscriminatorNetwork {
        spec: spec.clone(),
        stacks,
        pools,
    })
}

impl DiscriminatorNetwork {
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, _, h, w) = x.dim();
        let min = self.spec.min_input_dim();
        if h < min || w < min {
            return Err(Error::Config(format!(
                "input {h}x{w} smaller than the discriminator receptive field \
                 (minimum {min}x{min} for {} scales)",
                self.spec.scales
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<DiscOutput> {
        self.check_input(x)?;
        let mut logits = Vec::new();
        let mut features = Vec::new();
        let mut cur = x.clone();
        for i in 0..self.stacks.len() {
            let (l, taps) = self.stacks[i].forward(&cur);
            logits.push(l);
            features.push(taps);
            if i + 1 < self.stacks.len() {
                cur = self.pools[i].forward(&cur);
            }
        }
        Ok(DiscOutput { logits, features })
    }

    /// Backward through all scales; `tap_grads[scale][tap]` may carry the
    /// feature-matching gradient. Returns the gradient w.r.t. the input.
    pub fn backward(
        &mut self,
        grad_logits: &[Tensor],
        tap_grads: Option<&[Vec<Tensor>]>,
    ) -> Tensor {
        let n = self.stacks.len();
        let mut grad_in: Option<Tensor> = None;
        for i in (0..n).rev() {
            let tg = tap_grads.map(|t| t[i].as_slice());
            let g = self.stacks[i].backward(&grad_logits[i], tg);
            grad_in = Some(match grad_in {
                None => g,
                // grad flowing from coarser scales passes back up the pool
                Some(coarser) => &g + &self.pools[i].backward(&coarser),
            });
        }
        grad_in.unwrap()
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut crate::nn::Param)) {
        for s in &mut self.stacks {
            s.visit_params(f);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }
}

fn check_same_shapes(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: format!("{} scales", a.len()),
            got: format!("{} scales", b.len()),
        });
    }
    for (x, y) in a.iter().zip(b) {
        if x.dim() != y.dim() {
            return Err(Error::Shape {
                expected: format!("{:?}", x.dim()),
                got: format!("{:?}", y.dim()),
            });
        }
    }
    Ok(())
}

/// LS-GAN discriminator loss: ½·mean((real−1)²) + ½·mean(fake²), the mean
/// running over every patch of every scale.
pub fn gan_loss_discriminator(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    check_same_shapes(real, fake)?;
    let n: usize = real.iter().map(|t| t.len()).sum();
    let mut acc = 0.0f64;
    for (r, f) in real.iter().zip(fake) {
        for &v in r.iter() {
            acc += 0.5 * (v as f64 - 1.0).powi(2);
        }
        for &v in f.iter() {
            acc += 0.5 * (v as f64).powi(2);
        }
    }
    Ok(acc / n as f64)
}

/// Gradients of [`gan_loss_discriminator`] w.r.t. the real and fake logits.
pub fn gan_loss_discriminator_grads(
    real: &[Tensor],
    fake: &[Tensor],
) -> (Vec<Tensor>, Vec<Tensor>) {
    let n: f32 = real.iter().map(|t| t.len()).sum::<usize>() as f32;
    let gr = real.iter().map(|r| r.mapv(|v| (v - 1.0) / n)).collect();
    let gf = fake.iter().map(|f| f.mapv(|v| v / n)).collect();
    (gr, gf)
}

/// LS-GAN generator loss: ½·mean((fake−1)²) over every patch of every scale.
pub fn gan_loss_generator(fake: &[Tensor]) -> f64 {
    let n: usize = fake.iter().map(|t| t.len()).sum();
    let mut acc = 0.0f64;
    for f in fake {
        for &v in f.iter() {
            acc += 0.5 * (v as f64 - 1.0).powi(2);
        }
    }
    acc / n as f64
}

pub fn gan_loss_generator_grad(fake: &[Tensor]) -> Vec<Tensor> {
    let n: f32 = fake.iter().map(|t| t.len()).sum::<usize>() as f32;
    fake.iter().map(|f| f.mapv(|v| (v - 1.0) / n)).collect()
}

/// Mean absolute difference per tapped feature map, averaged over all maps
/// of all scales.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut maps = 0usize;
    if real.len() != fake.len() {
        return Err(Error::Shape {
            expected: format!("{} scales", real.len()),
            got: format!("{} scales", fake.len()),
        });
    }
    for (rs, fs) in real.iter().zip(fake) {
        check_same_shapes(rs, fs)?;
        for (r, f) in rs.iter().zip(fs) {
            let mut acc = 0.0f64;
            for (&a, &b) in r.iter().zip(f.iter()) {
                acc += (a as f64 - b as f64).abs();
            }
            total += acc / r.len() as f64;
            maps += 1;
        }
    }
    if maps == 0 {
        return Err(Error::Shape {
            expected: "at least one feature map".into(),
            got: "none".into(),
        });
    }
    Ok(total / maps as f64)
}

/// Gradient of [`feature_matching_loss`] w.r.t. the fake features.
pub fn feature_matching_grad(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Vec<Vec<Tensor>> {
    let maps: usize = real.iter().map(|s| s.len()).sum();
    real.iter()
        .zip(fake)
        .map(|(rs, fs)| {
            rs.iter()
                .zip(fs)
                .map(|(r, f)| {
                    let scale = 1.0 / (maps as f32 * r.len() as f32);
                    let mut g = Array4::zeros(f.dim());
                    ndarray::Zip::from(&mut g).and(r).and(f).for_each(
                        |g, &rv, &fv| {
                            *g = if fv > rv {
                                scale
                            } else if fv < rv {
                                -scale
                            } else {
                                0.0
                            };
                        },
                    );
                    g
                })
                .collect()
        })
        .collect()
}

/// Pixel-level MSE between original and reconstruction. Generic over the
/// element type so full-precision inputs keep full precision.
pub fn similarity_loss_of<F: Copy + Into<f64>>(
    x: &Array4<F>,
    xhat: &Array4<F>,
) -> Result<f64> {
    if x.dim() != xhat.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", x.dim()),
            got: format!("{:?}", xhat.dim()),
        });
    }
    let mut acc = 0.0f64;
    for (&a, &b) in x.iter().zip(xhat.iter()) {
        acc += (a.into() - b.into()).powi(2);
    }
    Ok(acc / x.len() as f64)
}

/// Pixel-level MSE between original and reconstruction.
pub fn similarity_loss(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    similarity_loss_of(x, xhat)
}

/// Gradient of [`similarity_loss`] w.r.t. the reconstruction.
pub fn similarity_grad(x: &Tensor, xhat: &Tensor) -> Tensor {
    let n = x.len() as f32;
    let mut g = xhat - x;
    g.mapv_inplace(|v| 2.0 * v / n);
    g
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_gan: f64,
    pub w_fm: f64,
    pub w_sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // the unweighted sum: the three terms are simply added up
        LossWeights {
            w_gan: 1.0,
            w_fm: 1.0,
            w_sim: 1.0,
        }
    }
}

/// Weighted sum of the three generator loss terms.
pub fn generator_total_loss(
    l_gan: f64,
    l_fm: f64,
    l_sim: f64,
    weights: &LossWeights,
) -> Result<f64> {
    for (name, v) in [("gan", l_gan), ("fm", l_fm), ("sim", l_sim)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                context: format!("generator {name} loss"),
                message: format!("non-finite value {v}"),
            });
        }
    }
    Ok(weights.w_gan * l_gan + weights.w_fm * l_fm + weights.w_sim * l_sim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn const_logits(v: f32) -> Vec<Tensor> {
        vec![
            Array4::from_elem((1, 1, 4, 4), v),
            Array4::from_elem((1, 1, 2, 2), v),
        ]
    }

    #[test]
    fn disc_loss_values() {
        assert_eq!(
            gan_loss_discriminator(&const_logits(1.0), &const_logits(0.0)).unwrap(),
            0.0
        );
        assert!(
            (gan_loss_discriminator(&const_logits(0.0), &const_logits(1.0)).unwrap() - 1.0)
                .abs()
                < 1e-12
        );
        assert!(
            (gan_loss_discriminator(&const_logits(0.5), &const_logits(0.5)).unwrap() - 0.25)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn gen_loss_values() {
        assert_eq!(gan_loss_generator(&const_logits(1.0)), 0.0);
        assert!((gan_loss_generator(&const_logits(0.0)) - 0.5).abs() < 1e-12);
        assert!((gan_loss_generator(&const_logits(-1.0)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn disc_loss_shape_mismatch() {
        let a = vec![Array4::<f32>::zeros((1, 1, 4, 4))];
        let b = vec![Array4::<f32>::zeros((1, 1, 2, 2))];
        assert!(gan_loss_discriminator(&a, &b).is_err());
    }

    #[test]
    fn feature_matching_values_and_oracle() {
        let real = vec![vec![
            Array4::from_elem((1, 2, 3, 3), 0.25f32),
            Array4::from_elem((1, 1, 2, 2), -0.5f32),
        ]];
        let fake_same = real.clone();
        assert_eq!(feature_matching_loss(&real, &fake_same).unwrap(), 0.0);

        let fake_off: Vec<Vec<Tensor>> = real
            .iter()
            .map(|s| s.iter().map(|t| t.mapv(|v| v + 0.5)).collect())
            .collect();
        assert!((feature_matching_loss(&real, &fake_off).unwrap() - 0.5).abs() < 1e-7);

        // brute-force oracle on a random pair
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r: Vec<Vec<Tensor>> = vec![vec![Array4::from_shape_fn((2, 3, 4, 4), |_| {
            rng.gen_range(-1.0..1.0f32)
        })]];
        let f: Vec<Vec<Tensor>> = vec![vec![Array4::from_shape_fn((2, 3, 4, 4), |_| {
            rng.gen_range(-1.0..1.0f32)
        })]];
        let mut oracle = 0.0f64;
        for (a, b) in r[0][0].iter().zip(f[0][0].iter()) {
            oracle += (*a as f64 - *b as f64).abs();
        }
        oracle /= r[0][0].len() as f64;
        assert!((feature_matching_loss(&r, &f).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn similarity_values_and_oracle() {
        let x = Array4::from_elem((1, 3, 4, 4), 0.2f32);
        assert_eq!(similarity_loss(&x, &x).unwrap(), 0.0);
        let x64 = Array4::from_elem((1, 3, 4, 4), 0.2f64);
        let y64 = x64.mapv(|v| v + 0.1);
        assert!((similarity_loss_of(&x64, &y64).unwrap() - 0.01).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Array4::from_shape_fn((2, 3, 5, 7), |_| rng.gen_range(-1.0..1.0f32));
        let b = Array4::from_shape_fn((2, 3, 5, 7), |_| rng.gen_range(-1.0..1.0f32));
        let mut oracle = 0.0f64;
        for (&p, &q) in a.iter().zip(b.iter()) {
            oracle += (p as f64 - q as f64).powi(2);
        }
        oracle /= a.len() as f64;
        assert!((similarity_loss(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!(similarity_loss(&a, &Array4::zeros((1, 3, 5, 7))).is_err());
    }

    #[test]
    fn total_loss_sums() {
        let w = LossWeights::default();
        assert_eq!(generator_total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert!((generator_total_loss(0.5, 0.2, 0.01, &w).unwrap() - 0.71).abs() < 1e-12);
        let w2 = LossWeights {
            w_gan: 2.0,
            w_fm: 1.0,
            w_sim: 1.0,
        };
        assert!((generator_total_loss(0.5, 0.2, 0.01, &w2).unwrap() - 1.21).abs() < 1e-12);
        assert!(generator_total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn discriminator_shapes_and_determinism() {
        let spec = DiscriminatorSpec::tiny();
        let mut d = build_discriminator(&spec, 5).unwrap();
        let x = Array4::from_shape_fn((1, 3, 64, 128), |(_, c, h, w)| {
            (((c + h + w) % 5) as f32) / 5.0 - 0.4
        });
        let out = d.forward(&x).unwrap();
        assert_eq!(out.logits.len(), 3);
        assert_eq!(out.features.len(), 3);
        for taps in &out.features {
            assert_eq!(taps.len(), DiscriminatorSpec::TAPS_PER_SCALE);
        }
        // strictly decreasing logit grid dims across scales
        for i in 1..3 {
            assert!(out.logits[i].dim().2 < out.logits[i - 1].dim().2);
            assert!(out.logits[i].dim().3 < out.logits[i - 1].dim().3);
        }
        assert!(out.total_patches() > 0);
        let out2 = d.forward(&x).unwrap();
        for (a, b) in out.logits.iter().zip(&out2.logits) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn too_small_input_rejected() {
        let spec = DiscriminatorSpec::tiny();
        let mut d = build_discriminator(&spec, 6).unwrap();
        let x = Array4::zeros((1, 3, 16, 16));
        assert!(d.forward(&x).is_err());
    }

    #[test]
    fn discriminator_input_gradient_matches_finite_difference() {
        let spec = DiscriminatorSpec {
            scales: 2,
            base_channels: 4,
        };
        let mut d = build_discriminator(&spec, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Array4::from_shape_fn((1, 3, 32, 32), |_| rng.gen_range(-0.5..0.5f32));
        let out = d.forward(&x).unwrap();
        let loss = gan_loss_generator(&out.logits);
        let glog = gan_loss_generator_grad(&out.logits);
        let gx = d.backward(&glog, None);

        let eps = 1e-2f32;
        for probe in [(0usize, 5usize, 7usize), (1, 10, 3), (2, 20, 20)] {
            let (c, h, w) = probe;
            let mut xp = x.clone();
            xp[[0, c, h, w]] += eps;
            let lp = gan_loss_generator(&d.forward(&xp).unwrap().logits);
            let mut xm = x.clone();
            xm[[0, c, h, w]] -= eps;
            let lm = gan_loss_generator(&d.forward(&xm).unwrap().logits);
            let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
            let an = gx[[0, c, h, w]];
            assert!(
                (fd - an).abs() < 2e-2 * (1.0 + fd.abs().max(an.abs())),
                "fd={fd} analytic={an}"
            );
        }
        let _ = loss;
    }
}
