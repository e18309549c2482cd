//! Six-parameter affine motion in normalized coordinates.
//!
//! A layer's dense flow at pixel `(x, y)` is
//!
//! ```text
//! u = sx * (a1 + a2 * xn + a3 * yn)
//! v = sy * (a4 + a5 * xn + a6 * yn)
//! ```
//!
//! where `xn = 2x/(W-1) - 1`, `yn = 2y/(H-1) - 1` and `sx = (W-1)/2`,
//! `sy = (H-1)/2` turn normalized displacements back into pixels. Pixel
//! coordinates refer to pixel centers, with `(0, 0)` the top-left pixel.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::imagery::FlowField;

/// Affine coefficients `[a1, a2, a3, a4, a5, a6]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const ZERO: AffineParams = AffineParams([0.0; 6]);

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Pure translation given in pixels.
    pub fn from_pixel_translation(tx: f64, ty: f64, cmap: &CoordMap) -> Self {
        AffineParams([tx / cmap.scale_x(), 0.0, 0.0, ty / cmap.scale_y(), 0.0, 0.0])
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

impl Add for AffineParams {
    type Output = AffineParams;
    fn add(self, rhs: Self) -> Self {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o += r;
        }
        AffineParams(out)
    }
}

impl Sub for AffineParams {
    type Output = AffineParams;
    fn sub(self, rhs: Self) -> Self {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o -= r;
        }
        AffineParams(out)
    }
}

impl Mul<f64> for AffineParams {
    type Output = AffineParams;
    fn mul(self, k: f64) -> Self {
        AffineParams(self.0.map(|v| v * k))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    params: [f64; 6],
    coords: String,
}

impl Serialize for AffineParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsJson {
            params: self.0,
            coords: "normalized".to_string(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AffineParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = ParamsJson::deserialize(d)?;
        if raw.coords != "normalized" {
            return Err(serde::de::Error::custom(format!(
                "unsupported coordinate convention {:?}",
                raw.coords
            )));
        }
        Ok(AffineParams(raw.params))
    }
}

/// Maps pixel centers to `[-1, 1]^2` and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordMap {
    width: usize,
    height: usize,
}

// A one-pixel axis has no extent; it maps to 0 with unit scale.
fn axis(n: usize) -> (f64, f64) {
    if n > 1 {
        let half = (n as f64 - 1.0) / 2.0;
        (half, half)
    } else {
        (0.0, 1.0)
    }
}

impl CoordMap {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimensions { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn scale_x(&self) -> f64 {
        axis(self.width).1
    }

    pub fn scale_y(&self) -> f64 {
        axis(self.height).1
    }

    pub fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, sx) = axis(self.width);
        let (cy, sy) = axis(self.height);
        ((x - cx) / sx, (y - cy) / sy)
    }

    pub fn denormalize(&self, xn: f64, yn: f64) -> (f64, f64) {
        let (cx, sx) = axis(self.width);
        let (cy, sy) = axis(self.height);
        (xn * sx + cx, yn * sy + cy)
    }

    /// Same motion expressed in pixel coordinates: `u = m[0][0] + m[0][1] x + m[0][2] y`,
    /// `v = m[1][0] + m[1][1] x + m[1][2] y`.
    pub fn pixel_affine(&self, p: &AffineParams) -> [[f64; 3]; 2] {
        let (cx, sx) = axis(self.width);
        let (cy, sy) = axis(self.height);
        let [a1, a2, a3, a4, a5, a6] = p.0;
        let ux = a2;
        let uy = a3 * sx / sy;
        let vx = a5 * sy / sx;
        let vy = a6;
        [
            [sx * a1 - ux * cx - uy * cy, ux, uy],
            [sy * a4 - vx * cx - vy * cy, vx, vy],
        ]
    }
}

/// Dense per-pixel flow of one affine layer.
pub fn dense_flow(params: &AffineParams, cmap: &CoordMap) -> Result<FlowField> {
    if !params.is_finite() {
        return Err(Error::NonFinite("affine parameters"));
    }
    let (w, h) = cmap.dims();
    let (sx, sy) = (cmap.scale_x(), cmap.scale_y());
    let [a1, a2, a3, a4, a5, a6] = params.0;
    let mut flow = FlowField::zeros(w, h);
    let data = flow.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (xn, yn) = cmap.normalize(x as f64, y as f64);
            let i = (y * w + x) * 2;
            data[i] = sx * (a1 + a2 * xn + a3 * yn);
            data[i + 1] = sy * (a4 + a5 * xn + a6 * yn);
        }
    }
    Ok(flow)
}

/// Pulls a per-pixel flow cotangent back onto the six parameters.
pub fn flow_param_vjp(grad_flow: &FlowField, cmap: &CoordMap) -> Result<AffineParams> {
    check_dims(cmap.dims(), grad_flow.dims())?;
    if !grad_flow.is_finite() {
        return Err(Error::NonFinite("flow gradient"));
    }
    let (w, h) = cmap.dims();
    let (sx, sy) = (cmap.scale_x(), cmap.scale_y());
    let mut g = [0.0; 6];
    let data = grad_flow.data();
    for y in 0..h {
        for x in 0..w {
            let (xn, yn) = cmap.normalize(x as f64, y as f64);
            let i = (y * w + x) * 2;
            let (gu, gv) = (sx * data[i], sy * data[i + 1]);
            g[0] += gu;
            g[1] += gu * xn;
            g[2] += gu * yn;
            g[3] += gv;
            g[4] += gv * xn;
            g[5] += gv * yn;
        }
    }
    Ok(AffineParams(g))
}
