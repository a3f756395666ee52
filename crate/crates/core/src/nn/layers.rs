use ndarray::{Array2, Array4, ArrayD, Ix4, s};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::param::Param;

pub type Tensor = Array4<f32>;

/// Spatial padding applied before a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

pub trait Layer {
    fn forward(&mut self, x: &Tensor) -> Tensor;
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}

pub fn pad_spatial(x: &Tensor, pad: usize, mode: PadMode) -> Tensor {
    if pad == 0 {
        return x.clone();
    }
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., .., pad..pad + h, pad..pad + w])
        .assign(x);
    if mode == PadMode::Reflect {
        assert!(pad < h && pad < w, "reflection pad larger than input");
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        for i in 0..hp {
            for j in 0..wp {
                let si = reflect_index(i, pad, h);
                let sj = reflect_index(j, pad, w);
                if si + pad != i || sj + pad != j {
                    for ni in 0..n {
                        for ci in 0..c {
                            out[[ni, ci, i, j]] = x[[ni, ci, si, sj]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fold gradients of a padded tensor back onto the unpadded one.
pub fn unpad_spatial_grad(g: &Tensor, pad: usize, mode: PadMode) -> Tensor {
    if pad == 0 {
        return g.clone();
    }
    let (n, c, hp, wp) = g.dim();
    let (h, w) = (hp - 2 * pad, wp - 2 * pad);
    match mode {
        PadMode::Zero => g.slice(s![.., .., pad..pad + h, pad..pad + w]).to_owned(),
        PadMode::Reflect => {
            let mut out = Array4::zeros((n, c, h, w));
            for i in 0..hp {
                let si = reflect_index(i, pad, h);
                for j in 0..wp {
                    let sj = reflect_index(j, pad, w);
                    for ni in 0..n {
                        for ci in 0..c {
                            out[[ni, ci, si, sj]] += g[[ni, ci, i, j]];
                        }
                    }
                }
            }
            out
        }
    }
}

fn reflect_index(i: usize, pad: usize, len: usize) -> usize {
    // Mirror without repeating the border pixel, e.g. pad=2, len=4:
    // indices map 2,1,[0,1,2,3],2,1.
    let i = i as isize - pad as isize;
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r.clamp(0, len - 1) as usize
}

/// Unfold an (already padded) activation into a (C*k*k, N*Ho*Wo) matrix.
pub fn im2col(x: &Tensor, k: usize, stride: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut col = Array2::zeros((c * k * k, n * ho * wo));
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = ci * k * k + kh * k + kw;
                let mut dst = col.row_mut(row);
                let mut idx = 0;
                for ni in 0..n {
                    for oh in 0..ho {
                        let ih = oh * stride + kh;
                        for ow in 0..wo {
                            dst[idx] = x[[ni, ci, ih, ow * stride + kw]];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the inverse of `im2col` back into a padded-activation tensor.
pub fn col2im(col: &Array2<f32>, dims: (usize, usize, usize, usize), k: usize, stride: usize) -> Tensor {
    let (n, c, h, w) = dims;
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Array4::zeros((n, c, h, w));
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = ci * k * k + kh * k + kw;
                let src = col.row(row);
                let mut idx = 0;
                for ni in 0..n {
                    for oh in 0..ho {
                        let ih = oh * stride + kh;
                        for ow in 0..wo {
                            out[[ni, ci, ih, ow * stride + kw]] += src[idx];
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

fn mat_to_nchw(mat: &Array2<f32>, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    // mat is (c, n*h*w) with column index n-major.
    let mut out = Array4::zeros((n, c, h, w));
    for ci in 0..c {
        let row = mat.row(ci);
        let mut idx = 0;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    out[[ni, ci, hi, wi]] = row[idx];
                    idx += 1;
                }
            }
        }
    }
    out
}

fn nchw_to_mat(x: &Tensor) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let mut mat = Array2::zeros((c, n * h * w));
    for ci in 0..c {
        let mut row = mat.row_mut(ci);
        let mut idx = 0;
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    row[idx] = x[[ni, ci, hi, wi]];
                    idx += 1;
                }
            }
        }
    }
    mat
}

fn kaiming_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f32> {
    let bound = (1.0 / fan_in as f32).sqrt();
    ArrayD::from_shape_fn(shape.to_vec().as_slice(), |_| {
        rng.gen_range(-bound..bound)
    })
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    cache: Option<(Array2<f32>, (usize, usize, usize, usize))>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                kaiming_init(rng, &[out_c, in_c, k, k], fan_in),
            ),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(vec![out_c])),
            in_c,
            out_c,
            k,
            stride,
            pad,
            pad_mode,
            cache: None,
        }
    }

    fn weight_mat(&self) -> Array2<f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_c, self.in_c * self.k * self.k))
            .unwrap()
            .to_owned()
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let xp = pad_spatial(x, self.pad, self.pad_mode);
        let (n, _, hp, wp) = xp.dim();
        let ho = (hp - self.k) / self.stride + 1;
        let wo = (wp - self.k) / self.stride + 1;
        let col = im2col(&xp, self.k, self.stride);
        let mut y = self.weight_mat().dot(&col);
        for oc in 0..self.out_c {
            let b = self.bias.value[[oc]];
            y.row_mut(oc).mapv_inplace(|v| v + b);
        }
        self.cache = Some((col, xp.dim()));
        mat_to_nchw(&y, n, self.out_c, ho, wo)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (col, padded_dims) = self.cache.take().expect("forward before backward");
        let gy = nchw_to_mat(grad_out);
        // dot against a transposed view may come back column-major
        let gw = gy.dot(&col.t()).as_standard_layout().into_owned();
        self.weight.grad.scaled_add(
            1.0,
            &gw.into_shape_with_order(self.weight.value.raw_dim())
                .unwrap(),
        );
        for oc in 0..self.out_c {
            self.bias.grad[[oc]] += gy.row(oc).sum();
        }
        let gcol = self.weight_mat().t().dot(&gy);
        let gxp = col2im(&gcol, padded_dims, self.k, self.stride);
        unpad_spatial_grad(&gxp, self.pad, self.pad_mode)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Transposed convolution; with k=4, s=2, p=1 it doubles both spatial dims.
pub struct ConvTranspose2d {
    pub weight: Param, // (in_c, out_c, k, k)
    pub bias: Param,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Array2<f32>>,
    in_dims: (usize, usize, usize, usize),
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * k * k / (stride * stride);
        ConvTranspose2d {
            weight: Param::new(
                format!("{name}.weight"),
                kaiming_init(rng, &[in_c, out_c, k, k], fan_in.max(1)),
            ),
            bias: Param::new(format!("{name}.bias"), ArrayD::zeros(vec![out_c])),
            in_c,
            out_c,
            k,
            stride,
            pad,
            cache: None,
            in_dims: (0, 0, 0, 0),
        }
    }

    fn weight_mat(&self) -> Array2<f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_c, self.out_c * self.k * self.k))
            .unwrap()
            .to_owned()
    }

    pub fn out_spatial(&self, hi: usize, wi: usize) -> (usize, usize) {
        (
            (hi - 1) * self.stride + self.k - 2 * self.pad,
            (wi - 1) * self.stride + self.k - 2 * self.pad,
        )
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, _, hi, wi) = x.dim();
        let (ho, wo) = self.out_spatial(hi, wi);
        let (hop, wop) = (ho + 2 * self.pad, wo + 2 * self.pad);
        let xm = nchw_to_mat(x);
        let gcol = self.weight_mat().t().dot(&xm);
        let yp = col2im(&gcol, (n, self.out_c, hop, wop), self.k, self.stride);
        let mut y = yp
            .slice(s![.., .., self.pad..self.pad + ho, self.pad..self.pad + wo])
            .to_owned();
        for oc in 0..self.out_c {
            let b = self.bias.value[[oc]];
            y.slice_mut(s![.., oc, .., ..]).mapv_inplace(|v| v + b);
        }
        self.cache = Some(xm);
        self.in_dims = x.dim();
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let xm = self.cache.take().expect("forward before backward");
        let gp = pad_spatial(grad_out, self.pad, PadMode::Zero);
        let gcol = im2col(&gp, self.k, self.stride);
        // weight grad: (in_c, out_c*k*k) = x_mat . gcol^T
        // dot against a transposed view may come back column-major
        let gw = xm.dot(&gcol.t()).as_standard_layout().into_owned();
        self.weight.grad.scaled_add(
            1.0,
            &gw.into_shape_with_order(self.weight.value.raw_dim())
                .unwrap(),
        );
        for oc in 0..self.out_c {
            self.bias.grad[[oc]] += grad_out.slice(s![.., oc, .., ..]).sum();
        }
        let gx = self.weight_mat().dot(&gcol);
        let (n, c, h, w) = self.in_dims;
        let _ = c;
        mat_to_nchw(&gx, n, self.in_c, h, w)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

const INSTANCE_NORM_EPS: f32 = 1e-5;

/// Instance normalization: statistics per sample per channel, so the network
/// stays input-size-agnostic between training and inference resolutions.
pub struct InstanceNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub channels: usize,
    cache: Option<(Tensor, Array2<f32>)>, // (xhat, inv_std per (n, c))
}

impl InstanceNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        InstanceNorm2d {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::ones(vec![channels])),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(vec![channels])),
            channels,
            cache: None,
        }
    }
}

impl Layer for InstanceNorm2d {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        let m = (h * w) as f32;
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array2::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let xs = x.slice(s![ni, ci, .., ..]);
                let mu = xs.sum() / m;
                let var = xs.fold(0.0, |acc, &v| acc + (v - mu) * (v - mu)) / m;
                let istd = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                inv_std[[ni, ci]] = istd;
                let mut dst = xhat.slice_mut(s![ni, ci, .., ..]);
                dst.assign(&xs);
                dst.mapv_inplace(|v| (v - mu) * istd);
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let g = self.gamma.value[[ci]];
            let b = self.beta.value[[ci]];
            y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| g * v + b);
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("forward before backward");
        let (n, c, h, w) = grad_out.dim();
        let m = (h * w) as f32;
        let mut gx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let g = self.gamma.value[[ci]];
            let mut dgamma = 0.0;
            let mut dbeta = 0.0;
            for ni in 0..n {
                let gy = grad_out.slice(s![ni, ci, .., ..]);
                let xh = xhat.slice(s![ni, ci, .., ..]);
                dgamma += (&gy * &xh).sum();
                dbeta += gy.sum();
                let sum_gy = gy.sum();
                let sum_gy_xh = (&gy * &xh).sum();
                let istd = inv_std[[ni, ci]];
                let mut dst = gx.slice_mut(s![ni, ci, .., ..]);
                ndarray::Zip::from(&mut dst).and(&gy).and(&xh).for_each(
                    |d, &gyv, &xhv| {
                        *d = g * istd * (gyv - sum_gy / m - xhv * sum_gy_xh / m);
                    },
                );
            }
            self.gamma.grad[[ci]] += dgamma;
            self.beta.grad[[ci]] += dbeta;
        }
        gx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { cache: None }
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.mapv(|v| v.max(0.0));
        self.cache = Some(y.clone());
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let y = self.cache.take().expect("forward before backward");
        let mut g = grad_out.clone();
        ndarray::Zip::from(&mut g).and(&y).for_each(|g, &y| {
            if y <= 0.0 {
                *g = 0.0;
            }
        });
        g
    }
}

pub struct LeakyRelu {
    pub slope: f32,
    cache: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> Self {
        LeakyRelu { slope, cache: None }
    }
}

impl Layer for LeakyRelu {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.clone());
        x.mapv(|v| if v >= 0.0 { v } else { self.slope * v })
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let x = self.cache.take().expect("forward before backward");
        let mut g = grad_out.clone();
        ndarray::Zip::from(&mut g).and(&x).for_each(|g, &x| {
            if x < 0.0 {
                *g *= self.slope;
            }
        });
        g
    }
}

pub struct Tanh {
    cache: Option<Tensor>,
}

impl Tanh {
    pub fn new() -> Self {
        Tanh { cache: None }
    }
}

impl Layer for Tanh {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = x.mapv(f32::tanh);
        self.cache = Some(y.clone());
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let y = self.cache.take().expect("forward before backward");
        let mut g = grad_out.clone();
        ndarray::Zip::from(&mut g).and(&y).for_each(|g, &y| {
            *g *= 1.0 - y * y;
        });
        g
    }
}

/// 2x2 average pooling, stride 2. Used between discriminator scales.
pub struct AvgPool2 {
    in_dims: (usize, usize, usize, usize),
}

impl AvgPool2 {
    pub fn new() -> Self {
        AvgPool2 {
            in_dims: (0, 0, 0, 0),
        }
    }
}

impl Layer for AvgPool2 {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        self.in_dims = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let s = x[[ni, ci, 2 * oh, 2 * ow]]
                            + x[[ni, ci, 2 * oh, 2 * ow + 1]]
                            + x[[ni, ci, 2 * oh + 1, 2 * ow]]
                            + x[[ni, ci, 2 * oh + 1, 2 * ow + 1]];
                        y[[ni, ci, oh, ow]] = s * 0.25;
                    }
                }
            }
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let (n, c, h, w) = self.in_dims;
        let mut g = Array4::zeros((n, c, h, w));
        let (_, _, ho, wo) = grad_out.dim();
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let v = grad_out[[ni, ci, oh, ow]] * 0.25;
                        g[[ni, ci, 2 * oh, 2 * ow]] = v;
                        g[[ni, ci, 2 * oh, 2 * ow + 1]] = v;
                        g[[ni, ci, 2 * oh + 1, 2 * ow]] = v;
                        g[[ni, ci, 2 * oh + 1, 2 * ow + 1]] = v;
                    }
                }
            }
        }
        g
    }
}

/// conv-norm-relu-conv-norm plus identity shortcut.
pub struct ResidualUnit {
    conv1: Conv2d,
    norm1: InstanceNorm2d,
    relu: Relu,
    conv2: Conv2d,
    norm2: InstanceNorm2d,
}

impl ResidualUnit {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        ResidualUnit {
            conv1: Conv2d::new(
                &format!("{name}.conv1"),
                rng,
                channels,
                channels,
                3,
                1,
                1,
                PadMode::Reflect,
            ),
            norm1: InstanceNorm2d::new(&format!("{name}.norm1"), channels),
            relu: Relu::new(),
            conv2: Conv2d::new(
                &format!("{name}.conv2"),
                rng,
                channels,
                channels,
                3,
                1,
                1,
                PadMode::Reflect,
            ),
            norm2: InstanceNorm2d::new(&format!("{name}.norm2"), channels),
        }
    }
}

impl Layer for ResidualUnit {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut y = self.conv1.forward(x);
        y = self.norm1.forward(&y);
        y = self.relu.forward(&y);
        y = self.conv2.forward(&y);
        y = self.norm2.forward(&y);
        y + x
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = self.norm2.backward(grad_out);
        g = self.conv2.backward(&g);
        g = self.relu.backward(&g);
        g = self.norm1.backward(&g);
        g = self.conv1.backward(&g);
        g + grad_out
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.norm1.visit_params(f);
        self.conv2.visit_params(f);
        self.norm2.visit_params(f);
    }
}

/// Ordered stack of layers sharing the Layer interface.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for l in &mut self.layers {
            y = l.forward(&y);
        }
        y
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}

/// Check that a tensor is finite, reporting the offending stage on failure.
pub fn check_finite(x: &Tensor, context: &str) -> crate::error::Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::error::Error::Numeric {
            context: context.to_string(),
            message: "non-finite activation".to_string(),
        })
    }
}

pub fn tensor_from_dyn(x: &ArrayD<f32>) -> Tensor {
    x.view().into_dimensionality::<Ix4>().unwrap().to_owned()
}
