//! Distortion metrics (PSNR, SSIM, MS-SSIM) and confusion-matrix mIoU.
//!
//! All distortion metrics operate on 8-bit RGB images stored as `(C, H, W)`
//! arrays with dynamic range 255, averaged over channels. Everything here is
//! pure; confusion matrices merge by element-wise sum, so per-image
//! accumulation can run in parallel with a final merge.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Ground-truth label value that is excluded from segmentation scoring.
pub const IGNORE_LABEL: u8 = 255;

/// SSIM window is 11x11 Gaussian with sigma 1.5.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

/// Canonical per-scale exponent weights for 5-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Default number of MS-SSIM scales for full-size images.
pub const MS_SSIM_SCALES: usize = 5;

fn check_same_shape<T>(x: &Array3<T>, xhat: &Array3<T>) -> Result<()> {
    if x.dim() != xhat.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", x.dim()),
            got: format!("{:?}", xhat.dim()),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB: `10*log10(255^2 / MSE)` over all pixels
/// and channels. Identical inputs return `f64::INFINITY`.
pub fn psnr(x: &Array3<u8>, xhat: &Array3<u8>) -> Result<f64> {
    check_same_shape(x, xhat)?;
    let mut acc = 0.0f64;
    for (&a, &b) in x.iter().zip(xhat.iter()) {
        let d = a as f64 - b as f64;
        acc += d * d;
    }
    let mse = acc / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
}

fn gaussian_kernel_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Horizontal then vertical pass of the separable Gaussian, valid positions
/// only (output shrinks by window-1 in each dimension).
fn gaussian_filter_valid(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel_1d();
    let (h, w) = img.dim();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut horiz = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &kt) in k.iter().enumerate() {
                acc += kt * img[[y, x + t]];
            }
            horiz[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (t, &kt) in k.iter().enumerate() {
                acc += kt * horiz[[y + t, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Per-channel windowed statistics reduced to mean luminance-contrast
/// (`l`) and contrast-structure (`cs`) terms. `full` multiplies the two per
/// window (plain SSIM); otherwise the two maps are averaged separately.
fn ssim_channel_terms(a: &Array2<f64>, b: &Array2<f64>) -> (f64, f64, f64) {
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let mu_a = gaussian_filter_valid(a);
    let mu_b = gaussian_filter_valid(b);
    let aa = gaussian_filter_valid(&(a * a));
    let bb = gaussian_filter_valid(&(b * b));
    let ab = gaussian_filter_valid(&(a * b));
    let mut sum_l = 0.0;
    let mut sum_cs = 0.0;
    let mut sum_ssim = 0.0;
    let n = mu_a.len() as f64;
    for ((&ma, &mb), ((&saa, &sbb), &sab)) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
    {
        let var_a = saa - ma * ma;
        let var_b = sbb - mb * mb;
        let cov = sab - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let cs = (2.0 * cov + c2) / (var_a + var_b + c2);
        sum_l += l;
        sum_cs += cs;
        sum_ssim += l * cs;
    }
    (sum_l / n, sum_cs / n, sum_ssim / n)
}

fn channel_to_f64(img: &Array3<u8>, c: usize) -> Array2<f64> {
    let (_, h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| img[[c, y, x]] as f64)
}

fn check_window_fits(h: usize, w: usize) -> Result<()> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape {
            expected: format!("image at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            got: format!("{h}x{w}"),
        });
    }
    Ok(())
}

/// Mean structural similarity over sliding Gaussian windows, averaged over
/// channels.
pub fn ssim(x: &Array3<u8>, xhat: &Array3<u8>) -> Result<f64> {
    check_same_shape(x, xhat)?;
    let (ch, h, w) = x.dim();
    check_window_fits(h, w)?;
    let mut total = 0.0;
    for c in 0..ch {
        let a = channel_to_f64(x, c);
        let b = channel_to_f64(xhat, c);
        let (_, _, s) = ssim_channel_terms(&a, &b);
        total += s;
    }
    Ok(total / ch as f64)
}

/// 2x2 average-pool downsampling (the MS-SSIM low-pass + decimate step).
fn downsample2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (ho, wo) = (h / 2, w / 2);
    Array2::from_shape_fn((ho, wo), |(y, x)| {
        (img[[2 * y, 2 * x]]
            + img[[2 * y, 2 * x + 1]]
            + img[[2 * y + 1, 2 * x]]
            + img[[2 * y + 1, 2 * x + 1]])
            / 4.0
    })
}

/// Smallest image side that supports `scales` dyadic scales with the SSIM
/// window still fitting at the coarsest one.
pub fn ms_ssim_min_side(scales: usize) -> usize {
    SSIM_WINDOW << (scales - 1)
}

/// Multi-scale SSIM: contrast-structure terms at every scale, a full SSIM
/// term at the coarsest, combined with the canonical exponent weights
/// (renormalized when fewer than five scales are used, so a single scale
/// reduces to plain `ssim`).
pub fn ms_ssim(x: &Array3<u8>, xhat: &Array3<u8>, scales: usize) -> Result<f64> {
    check_same_shape(x, xhat)?;
    if scales == 0 || scales > MS_SSIM_SCALES {
        return Err(Error::Config(format!(
            "ms-ssim scales must be in 1..={MS_SSIM_SCALES}, got {scales}"
        )));
    }
    let (ch, h, w) = x.dim();
    let min_side = ms_ssim_min_side(scales);
    if h < min_side || w < min_side {
        return Err(Error::Shape {
            expected: format!("image at least {min_side}x{min_side} for {scales} scales"),
            got: format!("{h}x{w}"),
        });
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut total = 0.0;
    for c in 0..ch {
        let mut a = channel_to_f64(x, c);
        let mut b = channel_to_f64(xhat, c);
        let mut value = 1.0f64;
        for s in 0..scales {
            let weight = MS_SSIM_WEIGHTS[s] / wsum;
            let (_, cs, full) = ssim_channel_terms(&a, &b);
            let term = if s + 1 == scales { full } else { cs };
            // fractional exponents need a non-negative base; a single scale
            // has weight 1 and must reduce to plain ssim exactly
            value *= if scales == 1 {
                term
            } else {
                term.max(0.0).powf(weight)
            };
            if s + 1 < scales {
                a = downsample2(&a);
                b = downsample2(&b);
            }
        }
        total += value;
    }
    Ok(total / ch as f64)
}

/// K x K pixel counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: Array2::zeros((classes, classes)),
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[[gt, pred]]
    }

    /// Element-wise sum; associative and commutative, so parallel per-image
    /// matrices can be folded in any order.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes() != other.classes() {
            return Err(Error::Shape {
                expected: format!("{} classes", self.classes()),
                got: format!("{} classes", other.classes()),
            });
        }
        self.counts += &other.counts;
        Ok(())
    }
}

/// Scores one image pair into `cm`. Pixels whose ground truth carries
/// [`IGNORE_LABEL`] are skipped entirely.
pub fn confusion_accumulate(
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    cm: &mut ConfusionMatrix,
) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", gt.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    let k = cm.classes();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g == IGNORE_LABEL {
            continue;
        }
        if (g as usize) >= k {
            return Err(Error::Dataset(format!(
                "ground-truth class {g} out of range for {k} classes"
            )));
        }
        if (p as usize) >= k {
            return Err(Error::Dataset(format!(
                "predicted class {p} out of range for {k} classes"
            )));
        }
        cm.counts[[g as usize, p as usize]] += 1;
    }
    Ok(())
}

/// Mean intersection-over-union across classes with nonzero union. Classes
/// absent from both ground truth and predictions are excluded; if every
/// class is absent the result is undefined.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.classes();
    let mut sum = 0.0f64;
    let mut scored = 0usize;
    for c in 0..k {
        let tp = cm.counts[[c, c]];
        let row: u64 = (0..k).map(|j| cm.counts[[c, j]]).sum();
        let col: u64 = (0..k).map(|i| cm.counts[[i, c]]).sum();
        let union = row + col - tp;
        if union == 0 {
            continue;
        }
        sum += tp as f64 / union as f64;
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Dataset(
            "mIoU undefined: no class present in ground truth or predictions".into(),
        ));
    }
    Ok(sum / scored as f64)
}
