//! Summation splatting: forward warping with bilinear footprints.
//!
//! Each input pixel `j` moves to `(x_j + u_j, y_j + v_j)` and adds
//! `value_j * max(0, 1 - |dx|) * max(0, 1 - |dy|)` to each of the (at most
//! four) integer output pixels around the landing point. Corners that fall
//! outside the grid are dropped individually. Input pixels are visited in
//! row-major order and accumulated sequentially, so results are bit-for-bit
//! reproducible.

use crate::error::{check_dims, Error, Result};
use crate::imagery::FlowField;

/// Multi-channel real raster, row-major and channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatField {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl SplatField {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimensions { width, height });
        }
        if channels == 0 {
            return Err(Error::InvalidConfig("a field needs at least one channel".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Truncated {
                expected: width * height * channels,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("splat field"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub(crate) fn from_parts(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::from_parts(width, height, channels, vec![0.0; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &SplatField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// One bilinear corner: target index, weight, and the weight's derivatives
/// with respect to the landing coordinates.
struct Corner {
    index: usize,
    weight: f64,
    dweight_dx: f64,
    dweight_dy: f64,
}

/// Axis taps as `(offset, weight, slope)`. At an exact integer landing the
/// far tap has zero weight and is dropped; the near tap gets slope 0, the
/// subgradient chosen at the kink.
fn taps(frac: f64) -> ([(i64, f64, f64); 2], usize) {
    if frac == 0.0 {
        ([(0, 1.0, 0.0), (1, 0.0, 0.0)], 1)
    } else {
        ([(0, 1.0 - frac, -1.0), (1, frac, 1.0)], 2)
    }
}

fn for_each_corner(x: usize, y: usize, u: f64, v: f64, w: usize, h: usize, mut f: impl FnMut(Corner)) {
    let lx = x as f64 + u;
    let ly = y as f64 + v;
    let x0 = lx.floor();
    let y0 = ly.floor();
    let (tx, nx) = taps(lx - x0);
    let (ty, ny) = taps(ly - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    for &(oy, wy, sy) in &ty[..ny] {
        let cy = y0 + oy;
        if cy < 0 || cy >= h as i64 {
            continue;
        }
        for &(ox, wx, sx) in &tx[..nx] {
            let cx = x0 + ox;
            if cx < 0 || cx >= w as i64 {
                continue;
            }
            f(Corner {
                index: cy as usize * w + cx as usize,
                weight: wx * wy,
                dweight_dx: sx * wy,
                dweight_dy: wx * sy,
            });
        }
    }
}

fn check_inputs(values: &SplatField, flow: &FlowField) -> Result<()> {
    check_dims(values.dims(), flow.dims())?;
    if !flow.is_finite() {
        return Err(Error::NonFinite("flow"));
    }
    Ok(())
}

pub fn forward_splat(values: &SplatField, flow: &FlowField) -> Result<SplatField> {
    check_inputs(values, flow)?;
    let (w, h) = values.dims();
    let c = values.channels;
    let mut out = SplatField::zeros(w, h, c);
    let fd = flow.data();
    for y in 0..h {
        for x in 0..w {
            let j = y * w + x;
            let src = &values.data[j * c..(j + 1) * c];
            if src.iter().all(|&s| s == 0.0) {
                continue;
            }
            for_each_corner(x, y, fd[2 * j], fd[2 * j + 1], w, h, |k| {
                let dst = &mut out.data[k.index * c..(k.index + 1) * c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * k.weight;
                }
            });
        }
    }
    Ok(out)
}

/// Returns `(grad_values, grad_flow)` for the cotangent `grad_out`.
pub fn forward_splat_vjp(
    grad_out: &SplatField,
    values: &SplatField,
    flow: &FlowField,
) -> Result<(SplatField, FlowField)> {
    check_inputs(values, flow)?;
    check_dims(values.dims(), grad_out.dims())?;
    if grad_out.channels != values.channels {
        return Err(Error::InvalidConfig(format!(
            "cotangent has {} channels, values have {}",
            grad_out.channels, values.channels
        )));
    }
    let (w, h) = values.dims();
    let c = values.channels;
    let mut grad_values = SplatField::zeros(w, h, c);
    let mut grad_flow = FlowField::zeros(w, h);
    let fd = flow.data();
    for y in 0..h {
        for x in 0..w {
            let j = y * w + x;
            let src = &values.data[j * c..(j + 1) * c];
            let gv = &mut grad_values.data[j * c..(j + 1) * c];
            let (mut gu, mut gvv) = (0.0, 0.0);
            for_each_corner(x, y, fd[2 * j], fd[2 * j + 1], w, h, |k| {
                let g = &grad_out.data[k.index * c..(k.index + 1) * c];
                let mut s_dot_g = 0.0;
                for ch in 0..c {
                    gv[ch] += k.weight * g[ch];
                    s_dot_g += src[ch] * g[ch];
                }
                gu += k.dweight_dx * s_dot_g;
                gvv += k.dweight_dy * s_dot_g;
            });
            grad_flow.set(x, y, (gu, gvv));
        }
    }
    Ok((grad_values, grad_flow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_pixel_shift_splits_evenly() {
        let v = SplatField::new(3, 1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let mut f = FlowField::zeros(3, 1);
        f.set(0, 0, (0.5, 0.0));
        let out = forward_splat(&v, &f).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn integer_shift_right() {
        let data: Vec<f64> = (0..4 * 3 * 2).map(|i| i as f64 + 1.0).collect();
        let v = SplatField::new(4, 3, 2, data).unwrap();
        let out = forward_splat(&v, &FlowField::constant(4, 3, 1.0, 0.0)).unwrap();
        for y in 0..3 {
            for ch in 0..2 {
                assert_eq!(out.data()[(y * 4) * 2 + ch], 0.0);
                for x in 1..4 {
                    assert_eq!(out.data()[(y * 4 + x) * 2 + ch], v.data()[(y * 4 + x - 1) * 2 + ch]);
                }
            }
        }
    }

    #[test]
    fn overlapping_contributions_sum() {
        // pixel 0 lands at 1.75 (weight 0.25 on 1), pixel 1 lands at 1.25... use
        // pixel 2 landing at 1.25 (weight 0.75 on 1)
        let v = SplatField::new(4, 1, 1, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let mut f = FlowField::zeros(4, 1);
        f.set(0, 0, (1.75, 0.0));
        f.set(2, 0, (-0.75, 0.0));
        let out = forward_splat(&v, &f).unwrap();
        // brute force: sum over sources of value * hat(dx) * hat(dy)
        let hat = |d: f64| (1.0 - d.abs()).max(0.0);
        let mut expect = [0.0; 4];
        for (i, e) in expect.iter_mut().enumerate() {
            for j in 0..4 {
                let (u, vv) = f.get(j, 0);
                *e += v.data()[j] * hat(j as f64 + u - i as f64) * hat(vv);
            }
        }
        assert_eq!(out.data()[1], 1.0);
        assert_eq!(out.data(), &expect);
    }

    #[test]
    fn vjp_single_pixel_example() {
        let v = SplatField::new(3, 1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let mut f = FlowField::zeros(3, 1);
        f.set(0, 0, (0.5, 0.0));
        let g = SplatField::new(3, 1, 1, vec![0.0, 1.0, 0.0]).unwrap();
        let (gv, gf) = forward_splat_vjp(&g, &v, &f).unwrap();
        assert_eq!(gv.data()[0], 0.5);
        assert_eq!(gf.get(0, 0), (1.0, 0.0));
        let (gv, gf) = forward_splat_vjp(&SplatField::zeros(3, 1, 1), &v, &f).unwrap();
        assert!(gv.data().iter().chain(gf.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_shapes_and_nan_flow() {
        let v = SplatField::zeros(3, 2, 1);
        assert!(forward_splat(&v, &FlowField::zeros(2, 3)).is_err());
        let mut f = FlowField::zeros(3, 2);
        f.data_mut()[3] = f64::NAN;
        assert!(forward_splat(&v, &f).is_err());
    }

    fn field(w: usize, h: usize, c: usize, seed: u64) -> SplatField {
        let mut s = seed | 1;
        let data = (0..w * h * c)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 10_000) as f64 / 10_000.0
            })
            .collect();
        SplatField::new(w, h, c, data).unwrap()
    }

    proptest! {
        #[test]
        fn zero_flow_is_identity(seed in 1u64..u64::MAX, w in 1usize..9, h in 1usize..9, c in 1usize..4) {
            let v = field(w, h, c, seed);
            prop_assert_eq!(forward_splat(&v, &FlowField::zeros(w, h)).unwrap(), v);
        }

        #[test]
        fn mass_conserved_inside_grid(seed in 1u64..u64::MAX, u in -0.9f64..0.9, v in -0.9f64..0.9) {
            // interior pixels only, so every footprint stays on the grid
            let (w, h) = (8, 7);
            let mut vals = field(w, h, 3, seed);
            for y in 0..h {
                for x in 0..w {
                    if x < 1 || y < 1 || x > w - 2 || y > h - 2 {
                        for ch in 0..3 { vals.data_mut()[(y * w + x) * 3 + ch] = 0.0; }
                    }
                }
            }
            let out = forward_splat(&vals, &FlowField::constant(w, h, u, v)).unwrap();
            for ch in 0..3 {
                let a: f64 = vals.data().iter().skip(ch).step_by(3).sum();
                let b: f64 = out.data().iter().skip(ch).step_by(3).sum();
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }

        #[test]
        fn linear_in_values(s1 in 1u64..u64::MAX, s2 in 1u64..u64::MAX, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (w, h) = (6, 5);
            let v1 = field(w, h, 2, s1);
            let v2 = field(w, h, 2, s2);
            let flow_src = field(w, h, 2, s1 ^ s2);
            let flow = FlowField::new(w, h, flow_src.data().iter().map(|x| 4.0 * x - 2.0).collect()).unwrap();
            let mix = SplatField::new(w, h, 2, v1.data().iter().zip(v2.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = forward_splat(&mix, &flow).unwrap();
            let o1 = forward_splat(&v1, &flow).unwrap();
            let o2 = forward_splat(&v2, &flow).unwrap();
            for i in 0..lhs.data().len() {
                let rhs = a * o1.data()[i] + b * o2.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12);
            }
        }
    }
}
