//! Scalar quantization of the bottleneck: hard nearest-level assignment, the
//! softmax-based smooth surrogate, and the straight-through training mode.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    Hard,
    Soft,
    StraightThrough,
}

impl std::str::FromStr for QuantMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(QuantMode::Hard),
            "soft" => Ok(QuantMode::Soft),
            "straight-through" | "ste" => Ok(QuantMode::StraightThrough),
            other => Err(Error::Config(format!("unknown quantizer mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QuantMode::Hard => "hard",
            QuantMode::Soft => "soft",
            QuantMode::StraightThrough => "straight-through",
        };
        f.write_str(s)
    }
}

/// The L reconstruction levels and the training-time quantizer behaviour.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub levels: Vec<f32>,
    pub mode: QuantMode,
}

impl QuantizerSpec {
    /// Uniformly spaced levels over [-1, 1], e.g. L=4 -> {-1, -1/3, 1/3, 1}.
    pub fn uniform(l: usize, mode: QuantMode) -> Result<Self> {
        if l < 2 {
            return Err(Error::Config(format!("need at least 2 levels, got {l}")));
        }
        let levels = (0..l)
            .map(|i| -1.0 + 2.0 * i as f32 / (l - 1) as f32)
            .collect();
        let spec = QuantizerSpec { levels, mode };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Config("quantizer needs at least 2 levels".into()));
        }
        for w in self.levels.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(
                    "quantizer levels must be strictly increasing".into(),
                ));
            }
        }
        if self.levels.iter().any(|&c| !(-1.0..=1.0).contains(&c)) {
            return Err(Error::Config("quantizer levels must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Bits per quantized element, ld(L). Fractional for non-power-of-two L.
    pub fn bits_per_element(&self) -> f64 {
        (self.levels.len() as f64).log2()
    }
}

/// Index of the nearest reconstruction level; exact midpoints take the
/// lower index.
pub fn quantize_hard_scalar(r: f32, levels: &[f32]) -> usize {
    let mut best = 0usize;
    let mut best_d = (levels[0] - r).abs();
    for (i, &c) in levels.iter().enumerate().skip(1) {
        let d = (c - r).abs();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Smooth surrogate: r̂ = cᵀ softmax(−|c − r|).
pub fn quantize_soft_scalar(r: f32, levels: &[f32]) -> f32 {
    let (value, _) = soft_value_and_grad(r, levels);
    value
}

/// Full-precision smooth surrogate.
pub fn quantize_soft(r: f64, levels: &[f64]) -> f64 {
    soft_value_and_grad_f64(r, levels).0
}

/// Value and d r̂ / d r of the smooth surrogate. At kinks (r equidistant from
/// two levels) the subgradient convention sign(0) = 0 is used.
pub fn soft_value_and_grad(r: f32, levels: &[f32]) -> (f32, f32) {
    let lv: Vec<f64> = levels.iter().map(|&c| c as f64).collect();
    let (v, g) = soft_value_and_grad_f64(r as f64, &lv);
    (v as f32, g as f32)
}

/// f64 core shared by the scalar and tensor paths.
pub fn soft_value_and_grad_f64(r: f64, levels: &[f64]) -> (f64, f64) {
    let l = levels.len();
    let mut a = vec![0.0f64; l]; // -|c_j - r|
    let mut da = vec![0.0f64; l]; // d a_j / d r = -sign(r - c_j)
    let rf = r;
    let mut amax = f64::NEG_INFINITY;
    for j in 0..l {
        let c = levels[j];
        a[j] = -(c - rf).abs();
        da[j] = -sign0(rf - c);
        amax = amax.max(a[j]);
    }
    let mut z = 0.0f64;
    let mut s = vec![0.0f64; l];
    for j in 0..l {
        s[j] = (a[j] - amax).exp();
        z += s[j];
    }
    for v in s.iter_mut() {
        *v /= z;
    }
    let sbar: f64 = (0..l).map(|j| s[j] * da[j]).sum();
    let mut value = 0.0f64;
    let mut grad = 0.0f64;
    for j in 0..l {
        let c = levels[j];
        value += c * s[j];
        grad += c * s[j] * (da[j] - sbar);
    }
    (value, grad)
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Element-wise hard quantization to level indices.
pub fn quantize_hard(latent: &ArrayD<f32>, spec: &QuantizerSpec) -> ArrayD<u16> {
    latent.mapv(|r| quantize_hard_scalar(r, &spec.levels) as u16)
}

/// Element-wise inverse lookup of reconstruction levels.
pub fn dequantize(indices: &ArrayD<u16>, spec: &QuantizerSpec) -> Result<ArrayD<f32>> {
    let l = spec.level_count() as u16;
    if let Some(&bad) = indices.iter().find(|&&i| i >= l) {
        return Err(Error::Format(format!(
            "quantizer index {bad} out of range for L={l}"
        )));
    }
    Ok(indices.mapv(|i| spec.levels[i as usize]))
}

/// Quantizer pass used inside the training loop. Returns the value fed to the
/// decoder and the element-wise gradient factor d(forward)/d(latent) used in
/// the backward pass.
pub fn quantize_training(latent: &ArrayD<f32>, spec: &QuantizerSpec) -> (ArrayD<f32>, ArrayD<f32>) {
    match spec.mode {
        QuantMode::Soft => {
            let mut value = ArrayD::zeros(latent.raw_dim());
            let mut grad = ArrayD::zeros(latent.raw_dim());
            ndarray::Zip::from(&mut value)
                .and(&mut grad)
                .and(latent)
                .for_each(|v, g, &r| {
                    let (val, gr) = soft_value_and_grad(r, &spec.levels);
                    *v = val;
                    *g = gr;
                });
            (value, grad)
        }
        QuantMode::StraightThrough => {
            let mut value = ArrayD::zeros(latent.raw_dim());
            let mut grad = ArrayD::zeros(latent.raw_dim());
            ndarray::Zip::from(&mut value)
                .and(&mut grad)
                .and(latent)
                .for_each(|v, g, &r| {
                    let idx = quantize_hard_scalar(r, &spec.levels);
                    let (_, gr) = soft_value_and_grad(r, &spec.levels);
                    *v = spec.levels[idx];
                    *g = gr;
                });
            (value, grad)
        }
        QuantMode::Hard => {
            let value = latent.mapv(|r| spec.levels[quantize_hard_scalar(r, &spec.levels)]);
            let grad = ArrayD::zeros(latent.raw_dim());
            (value, grad)
        }
    }
}
