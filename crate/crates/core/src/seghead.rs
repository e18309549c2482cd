//! Segmentation-side nonlinearities and their vector-Jacobian products.
//!
//! The latent field `p` is clamped to `[0, 1]`, soft-binned into two alpha
//! maps with temperature `tau`, then made disjoint by maxout. Bin 1 (high `p`)
//! is the front layer, bin 0 the back layer.

use crate::error::{check_dims, Error, Result};
use crate::imagery::{AlphaField, Mask};

/// Leaky doubly-rectified linear unit: identity on `[0, 1]`, slope `1/gamma` outside.
pub fn leaky_dorelu(x: f64, gamma: f64) -> f64 {
    if x > 1.0 {
        1.0 + (x - 1.0) / gamma
    } else if x < 0.0 {
        x / gamma
    } else {
        x
    }
}

pub fn leaky_dorelu_grad(x: f64, gamma: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        1.0
    } else {
        1.0 / gamma
    }
}

pub fn leaky_dorelu_field(x: &AlphaField, gamma: f64) -> AlphaField {
    x.map(|v| leaky_dorelu(v, gamma))
}

pub fn leaky_dorelu_vjp(x: &AlphaField, gamma: f64, grad_out: &AlphaField) -> Result<AlphaField> {
    check_dims(x.dims(), grad_out.dims())?;
    let mut g = grad_out.clone();
    for (gi, &xi) in g.data_mut().iter_mut().zip(x.data()) {
        *gi *= leaky_dorelu_grad(xi, gamma);
    }
    Ok(g)
}

pub fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Derivative of [`clamp01`]. The closed interval is used so a value sitting
/// exactly on a bound still receives gradient pointing back inside.
pub fn clamp01_grad(x: f64) -> f64 {
    if (0.0..=1.0).contains(&x) {
        1.0
    } else {
        0.0
    }
}

pub fn clamp01_field(x: &AlphaField) -> AlphaField {
    x.map(clamp01)
}

pub fn clamp01_vjp(x: &AlphaField, grad_out: &AlphaField) -> Result<AlphaField> {
    check_dims(x.dims(), grad_out.dims())?;
    let mut g = grad_out.clone();
    for (gi, &xi) in g.data_mut().iter_mut().zip(x.data()) {
        *gi *= clamp01_grad(xi);
    }
    Ok(g)
}

/// Two-bin softmax binning with slopes `(1, 2)` and cutoffs `(0, 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinningConfig {
    tau: f64,
}

impl BinningConfig {
    pub const SLOPES: [f64; 2] = [1.0, 2.0];
    pub const CUTOFFS: [f64; 2] = [0.0, 0.5];
    pub const DEFAULT_TAU: f64 = 0.1;

    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            tau: Self::DEFAULT_TAU,
        }
    }
}

/// Per-pixel `(back, front)` bin weights for a scalar `p`.
pub fn bin_pixel(p: f64, cfg: &BinningConfig) -> (f64, f64) {
    let [w0, w1] = BinningConfig::SLOPES;
    let [b0, b1] = BinningConfig::CUTOFFS;
    let l0 = (w0 * p - b0) / cfg.tau;
    let l1 = (w1 * p - b1) / cfg.tau;
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

/// Alpha maps of the two layers: `alpha1` is the front layer (bin 1),
/// `alpha0` the back layer (bin 0).
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaPair {
    pub alpha0: AlphaField,
    pub alpha1: AlphaField,
}

impl AlphaPair {
    pub fn new(alpha0: AlphaField, alpha1: AlphaField) -> Result<Self> {
        check_dims(alpha0.dims(), alpha1.dims())?;
        Ok(Self { alpha0, alpha1 })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.alpha0.dims()
    }
}

pub fn softmax_binning(p: &AlphaField, cfg: &BinningConfig) -> AlphaPair {
    let (w, h) = p.dims();
    let mut a0 = Vec::with_capacity(w * h);
    let mut a1 = Vec::with_capacity(w * h);
    for &v in p.data() {
        let (x0, x1) = bin_pixel(v, cfg);
        a0.push(x0);
        a1.push(x1);
    }
    AlphaPair {
        alpha0: AlphaField::new(w, h, a0).expect("dims checked"),
        alpha1: AlphaField::new(w, h, a1).expect("dims checked"),
    }
}

/// `d/dp` of the binning given cotangents on both outputs.
pub fn softmax_binning_vjp(
    p: &AlphaField,
    cfg: &BinningConfig,
    grad0: &AlphaField,
    grad1: &AlphaField,
) -> Result<AlphaField> {
    check_dims(p.dims(), grad0.dims())?;
    check_dims(p.dims(), grad1.dims())?;
    let [w0, w1] = BinningConfig::SLOPES;
    let mut out = p.clone();
    for (i, g) in out.data_mut().iter_mut().enumerate() {
        let (x0, x1) = bin_pixel(p.data()[i], cfg);
        // softmax Jacobian: d a1/dp = a0 a1 (w1 - w0) / tau = -d a0/dp
        let d = x0 * x1 * (w1 - w0) / cfg.tau;
        *g = (grad1.data()[i] - grad0.data()[i]) * d;
    }
    Ok(out)
}

/// Keeps the larger alpha per pixel and zeroes the other; ties keep `alpha0`.
pub fn maxout_disjoint(pair: &AlphaPair) -> AlphaPair {
    let mut out = pair.clone();
    let d0 = out.alpha0.data_mut();
    for (i, v0) in d0.iter_mut().enumerate() {
        if pair.alpha1.data()[i] > *v0 {
            *v0 = 0.0;
        }
    }
    let d1 = out.alpha1.data_mut();
    for (i, v1) in d1.iter_mut().enumerate() {
        if *v1 <= pair.alpha0.data()[i] {
            *v1 = 0.0;
        }
    }
    out
}

/// Routes each pixel's cotangent to the entry that won the maxout.
pub fn maxout_disjoint_vjp(
    pair: &AlphaPair,
    grad0: &AlphaField,
    grad1: &AlphaField,
) -> Result<(AlphaField, AlphaField)> {
    check_dims(pair.dims(), grad0.dims())?;
    check_dims(pair.dims(), grad1.dims())?;
    let mut g0 = grad0.clone();
    let mut g1 = grad1.clone();
    for i in 0..g0.data().len() {
        if pair.alpha1.data()[i] > pair.alpha0.data()[i] {
            g0.data_mut()[i] = 0.0;
        } else {
            g1.data_mut()[i] = 0.0;
        }
    }
    Ok((g0, g1))
}

/// Hard threshold `alpha > threshold`. Carries no gradient.
pub fn binarize(alpha: &AlphaField, threshold: f64) -> Mask {
    let (w, h) = alpha.dims();
    let data = alpha.data().iter().map(|&v| (v > threshold) as u8).collect();
    Mask::new(w, h, data).expect("dims checked")
}
