//! Layered differentiable image synthesis.
//!
//! Frame 1 is split into a front layer (bin 1, motion `params1`) and a back
//! layer (bin 0, motion `params2`). Each layer is forward-splatted along its
//! alpha-scaled affine flow, and the front layer is composited over the back
//! one wherever its splatted alpha exceeds one half. Output pixels that no
//! layer reaches stay black and are excluded from the Charbonnier loss.
//!
//! Gradient contract: the binary masks (both the layer-intensity masks and
//! the warped-alpha selector) carry no gradient. Alpha learns only through
//! the flow support `w_i = alpha_i * W_i`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affine::{dense_flow, flow_param_vjp, AffineParams, CoordMap};
use crate::error::{check_dims, Error, Result};
use crate::imagery::{save_flow, save_image, save_mask, AlphaField, FlowField, Image, Mask};
use crate::seghead::{
    binarize, clamp01_field, clamp01_vjp, maxout_disjoint, maxout_disjoint_vjp, softmax_binning,
    softmax_binning_vjp, AlphaPair, BinningConfig,
};
use crate::splat::{forward_splat, forward_splat_vjp, SplatField};

pub const CHARBONNIER_EPS: f64 = 0.001;
pub const DEFAULT_EPSILON_D: f64 = 1e-6;
pub const BINARY_THRESHOLD: f64 = 0.5;

/// Optimization variables: front and back affine motions plus the pre-clamp
/// latent field `p`. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub params1: AffineParams,
    pub params2: AffineParams,
    pub p: AlphaField,
}

impl Latents {
    pub fn dims(&self) -> (usize, usize) {
        self.p.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.params1.is_finite()
            && self.params2.is_finite()
            && self.p.data().iter().all(|v| v.is_finite())
    }

    pub fn zeros_like(&self) -> Self {
        let (w, h) = self.dims();
        Self {
            params1: AffineParams::ZERO,
            params2: AffineParams::ZERO,
            p: AlphaField::filled(w, h, 0.0),
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct SynthesisTape {
    pub p: AlphaField,
    pub p_clamped: AlphaField,
    /// Bin weights before maxout.
    pub binned: AlphaPair,
    /// Disjoint alphas after maxout.
    pub alphas: AlphaPair,
    pub binary_front: Mask,
    pub binary_back: Mask,
    pub dense_front: FlowField,
    pub dense_back: FlowField,
    pub flow_front: FlowField,
    pub flow_back: FlowField,
    pub layer_front: SplatField,
    pub layer_back: SplatField,
    pub warped_front: SplatField,
    pub warped_back: SplatField,
    /// Splatted front alpha before clamping.
    pub warped_alpha: AlphaField,
    pub warped_alpha_binary: Mask,
    pub reconstruction: Image,
    pub disoccluded: Mask,
}

impl SynthesisTape {
    pub fn dims(&self) -> (usize, usize) {
        self.p.dims()
    }

    /// Writes every intermediate as PNG / `.flo` into `dir`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let gray = |f: &AlphaField| {
            let (w, h) = f.dims();
            let mut data = Vec::with_capacity(w * h * 3);
            for &v in f.data() {
                data.extend([v.clamp(0.0, 1.0); 3]);
            }
            Image::new(w, h, data).expect("finite")
        };
        save_image(&gray(&self.p_clamped), dir.join("p.png"))?;
        save_image(&gray(&self.alphas.alpha0), dir.join("alpha_back.png"))?;
        save_image(&gray(&self.alphas.alpha1), dir.join("alpha_front.png"))?;
        save_image(&gray(&self.warped_alpha), dir.join("warped_alpha.png"))?;
        save_mask(&self.binary_back, dir.join("binary_back.png"))?;
        save_mask(&self.binary_front, dir.join("binary_front.png"))?;
        save_mask(&self.warped_alpha_binary, dir.join("warped_alpha_binary.png"))?;
        save_mask(&self.disoccluded, dir.join("disoccluded.png"))?;
        save_flow(&self.dense_front, dir.join("dense_front.flo"))?;
        save_flow(&self.dense_back, dir.join("dense_back.flo"))?;
        save_flow(&self.flow_front, dir.join("flow_front.flo"))?;
        save_flow(&self.flow_back, dir.join("flow_back.flo"))?;
        for (name, f) in [
            ("layer_front.png", &self.layer_front),
            ("layer_back.png", &self.layer_back),
            ("warped_front.png", &self.warped_front),
            ("warped_back.png", &self.warped_back),
        ] {
            save_image(&Image::from_field(f.clone()), dir.join(name))?;
        }
        save_image(&self.reconstruction, dir.join("reconstruction.png"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub valid_pixel_count: usize,
    pub disoccluded_count: usize,
    /// Set when every pixel is dis-occluded; the loss is then 0.
    pub degenerate: bool,
}

fn scale_flow(flow: &FlowField, alpha: &AlphaField) -> FlowField {
    let mut out = flow.clone();
    for (uv, &a) in out.data_mut().chunks_exact_mut(2).zip(alpha.data()) {
        uv[0] *= a;
        uv[1] *= a;
    }
    out
}

fn mask_image(img: &Image, mask: &Mask) -> SplatField {
    let mut f = img.to_field();
    for (px, &m) in f.data_mut().chunks_exact_mut(3).zip(mask.data()) {
        if m == 0 {
            px.fill(0.0);
        }
    }
    f
}

pub fn synthesize(
    i1: &Image,
    lat: &Latents,
    cfg: &BinningConfig,
    cmap: &CoordMap,
    epsilon_d: f64,
) -> Result<SynthesisTape> {
    check_dims(cmap.dims(), i1.dims())?;
    check_dims(cmap.dims(), lat.dims())?;
    if !lat.is_finite() {
        return Err(Error::NonFinite("latents"));
    }
    let p_clamped = clamp01_field(&lat.p);
    let binned = softmax_binning(&p_clamped, cfg);
    let alphas = maxout_disjoint(&binned);

    let dense_front = dense_flow(&lat.params1, cmap)?;
    let dense_back = dense_flow(&lat.params2, cmap)?;
    let flow_front = scale_flow(&dense_front, &alphas.alpha1);
    let flow_back = scale_flow(&dense_back, &alphas.alpha0);

    let binary_front = binarize(&alphas.alpha1, BINARY_THRESHOLD);
    let binary_back = binarize(&alphas.alpha0, BINARY_THRESHOLD);
    let layer_front = mask_image(i1, &binary_front);
    let layer_back = mask_image(i1, &binary_back);

    let warped_front = forward_splat(&layer_front, &flow_front)?;
    let warped_back = forward_splat(&layer_back, &flow_back)?;
    let warped_alpha = AlphaField::from_field(forward_splat(&alphas.alpha1.to_field(), &flow_front)?);
    let warped_alpha_binary = binarize(&warped_alpha.map(|v| v.clamp(0.0, 1.0)), BINARY_THRESHOLD);

    let (w, h) = i1.dims();
    let mut recon = vec![0.0; w * h * 3];
    for (i, px) in recon.chunks_exact_mut(3).enumerate() {
        let src = if warped_alpha_binary.data()[i] != 0 {
            &warped_front.data()[i * 3..i * 3 + 3]
        } else {
            &warped_back.data()[i * 3..i * 3 + 3]
        };
        px.copy_from_slice(src);
    }
    let reconstruction = Image::new(w, h, recon)?;
    let disoccluded = disocclusion_mask(&reconstruction, epsilon_d);

    Ok(SynthesisTape {
        p: lat.p.clone(),
        p_clamped,
        binned,
        alphas,
        binary_front,
        binary_back,
        dense_front,
        dense_back,
        flow_front,
        flow_back,
        layer_front,
        layer_back,
        warped_front,
        warped_back,
        warped_alpha,
        warped_alpha_binary,
        reconstruction,
        disoccluded,
    })
}

/// Marks pixels whose three channels all have magnitude at most `epsilon`.
pub fn disocclusion_mask(recon: &Image, epsilon: f64) -> Mask {
    let (w, h) = recon.dims();
    let data = recon
        .data()
        .chunks_exact(3)
        .map(|px| px.iter().all(|v| v.abs() <= epsilon) as u8)
        .collect();
    Mask::new(w, h, data).expect("dims checked")
}

pub fn charbonnier(x: f64) -> f64 {
    (x * x + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt()
}

pub fn charbonnier_grad(x: f64) -> f64 {
    x / charbonnier(x)
}

/// Sum over valid pixels and all three channels of `rho(I2 - I2hat)`.
pub fn photometric_loss(i2: &Image, tape: &SynthesisTape) -> Result<LossReport> {
    check_dims(tape.dims(), i2.dims())?;
    let mut loss = 0.0;
    let mut valid = 0;
    let recon = tape.reconstruction.data();
    for (i, &d) in tape.disoccluded.data().iter().enumerate() {
        if d != 0 {
            continue;
        }
        valid += 1;
        for c in 0..3 {
            loss += charbonnier(i2.data()[i * 3 + c] - recon[i * 3 + c]);
        }
    }
    let total = tape.disoccluded.data().len();
    Ok(LossReport {
        loss,
        valid_pixel_count: valid,
        disoccluded_count: total - valid,
        degenerate: valid == 0,
    })
}

fn flow_dot(grad: &FlowField, flow: &FlowField) -> AlphaField {
    let (w, h) = grad.dims();
    let data = grad
        .data()
        .chunks_exact(2)
        .zip(flow.data().chunks_exact(2))
        .map(|(g, f)| g[0] * f[0] + g[1] * f[1])
        .collect();
    AlphaField::new(w, h, data).expect("dims checked")
}

/// Reverse-mode gradient of [`photometric_loss`] with respect to the latents.
pub fn backward(
    tape: &SynthesisTape,
    i2: &Image,
    cfg: &BinningConfig,
    cmap: &CoordMap,
) -> Result<Latents> {
    check_dims(tape.dims(), i2.dims())?;
    check_dims(tape.dims(), cmap.dims())?;
    let (w, h) = tape.dims();

    // d loss / d reconstruction, routed to whichever layer the selector picked
    let mut g_front = SplatField::zeros(w, h, 3);
    let mut g_back = SplatField::zeros(w, h, 3);
    let recon = tape.reconstruction.data();
    for i in 0..w * h {
        if tape.disoccluded.data()[i] != 0 {
            continue;
        }
        let dst = if tape.warped_alpha_binary.data()[i] != 0 {
            &mut g_front
        } else {
            &mut g_back
        };
        for c in 0..3 {
            let k = i * 3 + c;
            dst.data_mut()[k] = -charbonnier_grad(i2.data()[k] - recon[k]);
        }
    }

    let (_, g_flow_front) = forward_splat_vjp(&g_front, &tape.layer_front, &tape.flow_front)?;
    let (_, g_flow_back) = forward_splat_vjp(&g_back, &tape.layer_back, &tape.flow_back)?;

    // w_i = alpha_i * W_i
    let g_alpha1 = flow_dot(&g_flow_front, &tape.dense_front);
    let g_alpha0 = flow_dot(&g_flow_back, &tape.dense_back);
    let g_dense_front = scale_flow(&g_flow_front, &tape.alphas.alpha1);
    let g_dense_back = scale_flow(&g_flow_back, &tape.alphas.alpha0);

    let params1 = flow_param_vjp(&g_dense_front, cmap)?;
    let params2 = flow_param_vjp(&g_dense_back, cmap)?;

    let (g_bin0, g_bin1) = maxout_disjoint_vjp(&tape.binned, &g_alpha0, &g_alpha1)?;
    let g_pc = softmax_binning_vjp(&tape.p_clamped, cfg, &g_bin0, &g_bin1)?;
    let p = clamp01_vjp(&tape.p, &g_pc)?;

    Ok(Latents {
        params1,
        params2,
        p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize, seed: u64) -> Image {
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let t = (x as f64 * (0.7 + 0.1 * c as f64) + y as f64 * 1.3 + seed as f64).sin();
                    data.push(0.1 + 0.8 * (0.5 + 0.5 * t));
                }
            }
        }
        Image::new(w, h, data).unwrap()
    }

    fn identity_latents(w: usize, h: usize, p: f64) -> Latents {
        Latents {
            params1: AffineParams::ZERO,
            params2: AffineParams::ZERO,
            p: AlphaField::filled(w, h, p),
        }
    }

    #[test]
    fn identity_configurations_reproduce_frame() {
        let (w, h) = (9, 7);
        let img = textured(w, h, 3);
        let cmap = CoordMap::new(w, h).unwrap();
        for p in [1.0, 0.0] {
            let tape = synthesize(&img, &identity_latents(w, h, p), &BinningConfig::default(), &cmap, DEFAULT_EPSILON_D).unwrap();
            assert_eq!(tape.reconstruction, img);
            assert_eq!(tape.disoccluded.count(), 0);
        }
    }

    #[test]
    fn identity_gradient_is_zero() {
        let (w, h) = (9, 7);
        let img = textured(w, h, 1);
        let cmap = CoordMap::new(w, h).unwrap();
        let cfg = BinningConfig::default();
        let lat = identity_latents(w, h, 1.0);
        let tape = synthesize(&img, &lat, &cfg, &cmap, DEFAULT_EPSILON_D).unwrap();
        let rep = photometric_loss(&img, &tape).unwrap();
        assert!((rep.loss - 3.0 * (w * h) as f64 * 0.001).abs() < 1e-12);
        let g = backward(&tape, &img, &cfg, &cmap).unwrap();
        assert_eq!(g.params1, AffineParams::ZERO);
        assert_eq!(g.params2, AffineParams::ZERO);
        assert!(g.p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn charbonnier_values() {
        assert_eq!(charbonnier(0.0), 0.001);
        assert!((charbonnier(1.0) - 1.000001f64.sqrt()).abs() < 1e-15);
        assert!((charbonnier(1.0) - 1.0000005).abs() < 1e-9);
        for x in [0.3, -2.5, 1e-4, 17.0] {
            assert_eq!(charbonnier(-x), charbonnier(x));
        }
        assert_eq!(charbonnier_grad(0.0), 0.0);
    }

    #[test]
    fn loss_examples() {
        let (w, h) = (5, 4);
        let img = textured(w, h, 0);
        let cmap = CoordMap::new(w, h).unwrap();
        let tape = synthesize(&img, &identity_latents(w, h, 1.0), &BinningConfig::default(), &cmap, DEFAULT_EPSILON_D).unwrap();
        let mut i2 = img.clone();
        i2.data_mut()[7] -= 0.5;
        let rep = photometric_loss(&i2, &tape).unwrap();
        let expect = (3.0 * (w * h) as f64 - 1.0) * 0.001 + (0.25f64 + 1e-6).sqrt();
        assert!((rep.loss - expect).abs() < 1e-12);
        assert_eq!(rep.valid_pixel_count, w * h);

        let mut all_d = tape.clone();
        all_d.disoccluded = Mask::from_fn(w, h, |_, _| true);
        let rep = photometric_loss(&i2, &all_d).unwrap();
        assert_eq!(rep.loss, 0.0);
        assert_eq!(rep.disoccluded_count, w * h);
        assert!(rep.degenerate);
    }

    #[test]
    fn everything_out_of_frame_is_degenerate() {
        let (w, h) = (8, 6);
        let img = textured(w, h, 2);
        let cmap = CoordMap::new(w, h).unwrap();
        let far = AffineParams::from_pixel_translation(50.0, 0.0, &cmap);
        let lat = Latents {
            params1: far,
            params2: far,
            p: AlphaField::from_fn(w, h, |x, _| if x % 2 == 0 { 1.0 } else { 0.0 }),
        };
        let cfg = BinningConfig::new(0.01).unwrap();
        let tape = synthesize(&img, &lat, &cfg, &cmap, DEFAULT_EPSILON_D).unwrap();
        assert_eq!(tape.disoccluded.count(), w * h);
        let rep = photometric_loss(&img, &tape).unwrap();
        assert_eq!(rep.loss, 0.0);
        assert!(rep.degenerate);
    }

    #[test]
    fn disocclusion_tolerance() {
        let img = Image::new(2, 1, vec![0.0, 0.0, 0.0, 0.0, 1e-3, 0.0]).unwrap();
        assert_eq!(disocclusion_mask(&img, 1e-6).data(), &[1, 0]);
        assert_eq!(disocclusion_mask(&img, 1e-2).data(), &[1, 1]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let img = textured(4, 4, 0);
        let cmap = CoordMap::new(4, 4).unwrap();
        let lat = identity_latents(5, 4, 1.0);
        assert!(synthesize(&img, &lat, &BinningConfig::default(), &cmap, DEFAULT_EPSILON_D).is_err());
    }
}
