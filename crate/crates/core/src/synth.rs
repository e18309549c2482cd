//! Synthetic two-layer scenes with exact ground truth.
//!
//! A textured sprite moves on top of a textured background, each with its
//! own affine motion. Frame 2 is rendered by backward sampling: every output
//! pixel looks up its source through the inverse motion of the front layer
//! first, then of the background. The background texture is rendered on a
//! canvas larger than the frame, so frame 2 never contains undefined pixels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{dense_flow, AffineParams, CoordMap};
use crate::error::{Error, Result};
use crate::imagery::{load_image, save_flow, save_image, save_mask, FlowField, Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    /// Either of the above, chosen per scene.
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TextureSource {
    /// Band-limited noise (sum of random plane waves).
    Noise,
    Checker,
    Gradient,
    /// Any procedural kind, chosen per layer.
    Mixed,
    /// Random crops of a user image (must be larger than the padded frame).
    Image { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub shape: ShapeKind,
    /// Sprite extent as a fraction of each frame dimension.
    pub size_range: (f64, f64),
    /// Per-axis translation bound in pixels, for both layers.
    pub max_translation: f64,
    /// Isotropic scale range; `None` disables scaling.
    pub scale_range: Option<(f64, f64)>,
    pub texture: TextureSource,
    /// Restrict both motions to integer translations.
    pub integer_mode: bool,
    /// Minimum distance in pixels between the two flows at the sprite centroid.
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 64,
            shape: ShapeKind::Any,
            size_range: (0.15, 0.4),
            max_translation: 6.0,
            scale_range: None,
            texture: TextureSource::Noise,
            integer_mode: false,
            min_separation: 2.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::ZeroDimensions {
                width: self.width,
                height: self.height,
            });
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sprite size range must satisfy 0 < lo <= hi < 1, got {lo}..{hi}"
            )));
        }
        if !(self.max_translation >= 0.0 && self.max_translation.is_finite()) {
            return Err(Error::InvalidConfig("max_translation must be finite and >= 0".into()));
        }
        if let Some((a, b)) = self.scale_range {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return Err(Error::InvalidConfig(format!("bad scale range {a}..{b}")));
            }
        }
        if !(self.min_separation > 0.0) {
            return Err(Error::InvalidConfig("min_separation must be > 0".into()));
        }
        // the best achievable separation is two opposite extreme translations
        let reach = 2.0 * self.max_translation * std::f64::consts::SQRT_2;
        if reach < self.min_separation {
            return Err(Error::InvalidConfig(format!(
                "motion range {} px cannot reach separation {} px",
                self.max_translation, self.min_separation
            )));
        }
        let margin = self.motion_margin();
        let need_w = hi * self.width as f64 + 2.0 * margin;
        let need_h = hi * self.height as f64 + 2.0 * margin;
        if need_w >= self.width as f64 || need_h >= self.height as f64 {
            return Err(Error::InvalidConfig(
                "sprite and motion range do not fit inside the frame".into(),
            ));
        }
        Ok(())
    }

    fn max_scale_dev(&self) -> f64 {
        self.scale_range
            .map(|(a, b)| (1.0 - a).abs().max((b - 1.0).abs()))
            .unwrap_or(0.0)
    }

    fn motion_margin(&self) -> f64 {
        let half = 0.5 * self.size_range.1 * self.width.max(self.height) as f64;
        self.max_translation + self.max_scale_dev() * half + 1.0
    }
}

/// Concrete sprite geometry and motions for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub ellipse: bool,
    pub center: (f64, f64),
    pub half_size: (f64, f64),
    pub fg_params: AffineParams,
    pub bg_params: AffineParams,
    pub fg_texture_seed: u64,
    pub bg_texture_seed: u64,
}

impl SceneLayout {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center.0) / self.half_size.0;
        let dy = (y - self.center.1) / self.half_size.1;
        if self.ellipse {
            dx * dx + dy * dy <= 1.0
        } else {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub i1: Image,
    pub i2: Image,
    pub gt_mask1: Mask,
    pub gt_mask2: Mask,
    pub gt_flow_fg: FlowField,
    pub gt_flow_bg: FlowField,
    pub gt_params_fg: AffineParams,
    pub gt_params_bg: AffineParams,
    pub spec: SceneSpec,
    pub layout: SceneLayout,
}

/// RGB raster addressed in frame coordinates shifted by `margin`.
struct Canvas {
    width: usize,
    height: usize,
    margin: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn texel(&self, cx: i64, cy: i64) -> [f64; 3] {
        let cx = cx.clamp(0, self.width as i64 - 1) as usize;
        let cy = cy.clamp(0, self.height as i64 - 1) as usize;
        let i = (cy * self.width + cx) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear lookup at frame coordinates; integer positions copy exactly.
    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let cx = x + self.margin as f64;
        let cy = y + self.margin as f64;
        let (x0, y0) = (cx.floor(), cy.floor());
        let (fx, fy) = (cx - x0, cy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        if fx == 0.0 && fy == 0.0 {
            return self.texel(x0, y0);
        }
        let a = self.texel(x0, y0);
        let b = self.texel(x0 + 1, y0);
        let c = self.texel(x0, y0 + 1);
        let d = self.texel(x0 + 1, y0 + 1);
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] * (1.0 - fx) + b[k] * fx;
            let bot = c[k] * (1.0 - fx) + d[k] * fx;
            out[k] = top * (1.0 - fy) + bot * fy;
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Procedural {
    Noise,
    Checker,
    Gradient,
}

fn plane_waves(rng: &mut ChaCha8Rng, count: usize) -> Vec<[f64; 4]> {
    // wavelengths between 5 and 20 px
    (0..count)
        .map(|_| {
            let lambda: f64 = rng.random_range(5.0..20.0);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / lambda;
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.random_range(0.5..1.0);
            [k * theta.cos(), k * theta.sin(), phase, amp]
        })
        .collect()
}

fn procedural_canvas(kind: Procedural, width: usize, height: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; width * height * 3];
    match kind {
        Procedural::Noise => {
            let waves: Vec<Vec<[f64; 4]>> = (0..3).map(|_| plane_waves(&mut rng, 8)).collect();
            let base: Vec<f64> = (0..3).map(|_| rng.random_range(0.35..0.65)).collect();
            for c in 0..3 {
                let norm: f64 = waves[c].iter().map(|w| w[3]).sum();
                for y in 0..height {
                    for x in 0..width {
                        let s: f64 = waves[c]
                            .iter()
                            .map(|w| w[3] * (w[0] * x as f64 + w[1] * y as f64 + w[2]).cos())
                            .sum();
                        data[(y * width + x) * 3 + c] = (base[c] + 0.6 * s / norm).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Procedural::Checker => {
            let cell = rng.random_range(4..=10) as usize;
            let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let b: [f64; 3] = a.map(|v| (v + 0.5) % 1.0);
            for y in 0..height {
                for x in 0..width {
                    let px = if (x / cell + y / cell).is_multiple_of(2) { a } else { b };
                    data[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&px);
                }
            }
        }
        Procedural::Gradient => {
            let a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let b: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let span = (width as f64).hypot(height as f64);
            // a faint ripple keeps motion observable along the gradient's level sets
            let ripple = plane_waves(&mut rng, 3);
            for y in 0..height {
                for x in 0..width {
                    let t = ((x as f64 * dx + y as f64 * dy) / span + 0.5).clamp(0.0, 1.0);
                    let r: f64 = ripple
                        .iter()
                        .map(|w| (w[0] * x as f64 + w[1] * y as f64 + w[2]).cos())
                        .sum::<f64>()
                        / 3.0;
                    for c in 0..3 {
                        let v = a[c] * (1.0 - t) + b[c] * t + 0.15 * r;
                        data[(y * width + x) * 3 + c] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    data
}

fn build_canvas(spec: &SceneSpec, margin: usize, seed: u64, user: Option<&Image>) -> Result<Canvas> {
    let width = spec.width + 2 * margin;
    let height = spec.height + 2 * margin;
    let pick = |s: u64, mixed: bool| -> Procedural {
        if !mixed {
            return Procedural::Noise;
        }
        match ChaCha8Rng::seed_from_u64(s ^ 0x5eed).random_range(0..3) {
            0 => Procedural::Noise,
            1 => Procedural::Checker,
            _ => Procedural::Gradient,
        }
    };
    let data = match (&spec.texture, user) {
        (TextureSource::Image { path }, Some(img)) => {
            if img.width() < width || img.height() < height {
                return Err(Error::InvalidConfig(format!(
                    "texture image {} is {}x{}, need at least {width}x{height}",
                    path.display(),
                    img.width(),
                    img.height()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ox = rng.random_range(0..=img.width() - width);
            let oy = rng.random_range(0..=img.height() - height);
            let mut data = Vec::with_capacity(width * height * 3);
            for y in 0..height {
                for x in 0..width {
                    data.extend(img.pixel(ox + x, oy + y));
                }
            }
            data
        }
        (TextureSource::Image { .. }, None) => unreachable!("image loaded by caller"),
        (TextureSource::Noise, _) => procedural_canvas(Procedural::Noise, width, height, seed),
        (TextureSource::Checker, _) => procedural_canvas(Procedural::Checker, width, height, seed),
        (TextureSource::Gradient, _) => procedural_canvas(Procedural::Gradient, width, height, seed),
        (TextureSource::Mixed, _) => procedural_canvas(pick(seed, true), width, height, seed),
    };
    Ok(Canvas {
        width,
        height,
        margin,
        data,
    })
}

/// Inverse of `x -> x + u(x)` for a pixel-space affine flow.
fn inverse_map(m: &[[f64; 3]; 2]) -> Option<impl Fn(f64, f64) -> (f64, f64)> {
    // x' = (I + J) x + t
    let (a, b, c, d) = (1.0 + m[0][1], m[0][2], m[1][1], 1.0 + m[1][2]);
    let (tx, ty) = (m[0][0], m[1][0]);
    let det = a * d - b * c;
    if det.abs() < 1e-9 {
        return None;
    }
    let is_translation = b == 0.0 && c == 0.0 && a == 1.0 && d == 1.0;
    Some(move |xp: f64, yp: f64| {
        if is_translation {
            return (xp - tx, yp - ty);
        }
        let (rx, ry) = (xp - tx, yp - ty);
        ((d * rx - b * ry) / det, (-c * rx + a * ry) / det)
    })
}

/// Converts a pixel-space affine flow back into normalized parameters.
pub fn params_from_pixel_affine(m: &[[f64; 3]; 2], cmap: &CoordMap) -> AffineParams {
    let (sx, sy) = (cmap.scale_x(), cmap.scale_y());
    let (cx, cy) = cmap.denormalize(0.0, 0.0);
    let a2 = m[0][1];
    let a3 = m[0][2] * sy / sx;
    let a5 = m[1][1] * sx / sy;
    let a6 = m[1][2];
    let a1 = (m[0][0] + m[0][1] * cx + m[0][2] * cy) / sx;
    let a4 = (m[1][0] + m[1][1] * cx + m[1][2] * cy) / sy;
    AffineParams([a1, a2, a3, a4, a5, a6])
}

fn sample_motion(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    cmap: &CoordMap,
    pivot: (f64, f64),
) -> (AffineParams, [[f64; 3]; 2]) {
    let t = spec.max_translation;
    if spec.integer_mode {
        let r = t.floor() as i64;
        let tx = rng.random_range(-r..=r) as f64;
        let ty = rng.random_range(-r..=r) as f64;
        let m = [[tx, 0.0, 0.0], [ty, 0.0, 0.0]];
        return (AffineParams::from_pixel_translation(tx, ty, cmap), m);
    }
    let tx = rng.random_range(-t..=t);
    let ty = rng.random_range(-t..=t);
    let s = match spec.scale_range {
        Some((a, b)) if a < b => rng.random_range(a..=b),
        Some((a, _)) => a,
        None => 1.0,
    };
    // scale about the pivot, then translate
    let k = s - 1.0;
    let m = [[tx - k * pivot.0, k, 0.0], [ty - k * pivot.1, 0.0, k]];
    (params_from_pixel_affine(&m, cmap), m)
}

/// Draws geometry and motions for `spec` without rendering.
pub fn sample_layout(spec: &SceneSpec) -> Result<SceneLayout> {
    spec.validate()?;
    let cmap = CoordMap::new(spec.width, spec.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ellipse = match spec.shape {
        ShapeKind::Rectangle => false,
        ShapeKind::Ellipse => true,
        ShapeKind::Any => rng.random_bool(0.5),
    };
    let (lo, hi) = spec.size_range;
    let half_size = (
        0.5 * rng.random_range(lo..=hi) * spec.width as f64,
        0.5 * rng.random_range(lo..=hi) * spec.height as f64,
    );
    let margin = spec.motion_margin();
    let cx = rng.random_range(half_size.0 + margin..=spec.width as f64 - 1.0 - half_size.0 - margin);
    let cy = rng.random_range(half_size.1 + margin..=spec.height as f64 - 1.0 - half_size.1 - margin);
    let fg_texture_seed = rng.random();
    let bg_texture_seed = rng.random();
    let frame_center = cmap.denormalize(0.0, 0.0);
    for _ in 0..1000 {
        let (fg_params, mf) = sample_motion(&mut rng, spec, &cmap, (cx, cy));
        let (bg_params, mb) = sample_motion(&mut rng, spec, &cmap, frame_center);
        let at = |m: &[[f64; 3]; 2]| (m[0][0] + m[0][1] * cx + m[0][2] * cy, m[1][0] + m[1][1] * cx + m[1][2] * cy);
        let (fu, fv) = at(&mf);
        let (bu, bv) = at(&mb);
        if (fu - bu).hypot(fv - bv) >= spec.min_separation {
            return Ok(SceneLayout {
                ellipse,
                center: (cx, cy),
                half_size,
                fg_params,
                bg_params,
                fg_texture_seed,
                bg_texture_seed,
            });
        }
    }
    Err(Error::InvalidConfig(format!(
        "could not draw motions {} px apart",
        spec.min_separation
    )))
}

/// Renders both frames and the ground truth for a fixed layout.
pub fn render_scene(spec: &SceneSpec, layout: &SceneLayout) -> Result<Scene> {
    let (w, h) = (spec.width, spec.height);
    let cmap = CoordMap::new(w, h)?;
    let user = match &spec.texture {
        TextureSource::Image { path } => Some(load_image(path)?),
        _ => None,
    };
    let mf = cmap.pixel_affine(&layout.fg_params);
    let mb = cmap.pixel_affine(&layout.bg_params);
    let reach = |m: &[[f64; 3]; 2]| {
        let corners = [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)];
        corners
            .iter()
            .map(|&(x, y)| {
                let u = m[0][0] + m[0][1] * x + m[0][2] * y;
                let v = m[1][0] + m[1][1] * x + m[1][2] * y;
                u.abs().max(v.abs())
            })
            .fold(0.0, f64::max)
    };
    let margin = (reach(&mf).max(reach(&mb)).ceil() as usize) + 2;
    let fg = build_canvas(spec, margin, layout.fg_texture_seed, user.as_ref())?;
    let bg = build_canvas(spec, margin, layout.bg_texture_seed, user.as_ref())?;
    let inv_f = inverse_map(&mf).ok_or_else(|| Error::InvalidConfig("singular foreground motion".into()))?;
    let inv_b = inverse_map(&mb).ok_or_else(|| Error::InvalidConfig("singular background motion".into()))?;

    let gt_mask1 = Mask::from_fn(w, h, |x, y| layout.contains(x as f64, y as f64));
    let mut gt_mask2 = Mask::zeros(w, h);
    let mut i1 = Image::zeros(w, h);
    let mut i2 = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let px = if gt_mask1.get(x, y) {
                fg.sample(xf, yf)
            } else {
                bg.sample(xf, yf)
            };
            i1.set_pixel(x, y, px);

            let (sx, sy) = inv_f(xf, yf);
            let px = if layout.contains(sx, sy) {
                gt_mask2.set(x, y, true);
                fg.sample(sx, sy)
            } else {
                let (bx, by) = inv_b(xf, yf);
                bg.sample(bx, by)
            };
            i2.set_pixel(x, y, px);
        }
    }
    if gt_mask1.count() == 0 || gt_mask2.count() == 0 {
        return Err(Error::InvalidConfig("sprite has no visible pixels".into()));
    }
    if gt_mask1.count() == w * h {
        return Err(Error::InvalidConfig("sprite covers the whole frame".into()));
    }
    let gt_flow_fg = dense_flow(&layout.fg_params, &cmap)?.restricted(&gt_mask1)?;
    let gt_flow_bg = dense_flow(&layout.bg_params, &cmap)?.restricted(&gt_mask1.complement())?;
    Ok(Scene {
        i1,
        i2,
        gt_mask1,
        gt_mask2,
        gt_flow_fg,
        gt_flow_bg,
        gt_params_fg: layout.fg_params,
        gt_params_bg: layout.bg_params,
        spec: spec.clone(),
        layout: layout.clone(),
    })
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let layout = sample_layout(spec)?;
    render_scene(spec, &layout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub frame1: String,
    pub frame2: String,
    pub mask1: String,
    pub mask2: String,
    pub fg_flow: String,
    pub bg_flow: String,
    pub params: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub spec: SceneSpec,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParamsFile {
    pub seed: u64,
    pub fg: AffineParams,
    pub bg: AffineParams,
    pub layout: SceneLayout,
}

/// Seed of the `index`-th scene of a dataset (splitmix64 of base and index).
pub fn scene_seed(base: u64, index: usize) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_image(&scene.i1, dir.join("frame1.png"))?;
    save_image(&scene.i2, dir.join("frame2.png"))?;
    save_mask(&scene.gt_mask1, dir.join("mask1.png"))?;
    save_mask(&scene.gt_mask2, dir.join("mask2.png"))?;
    save_flow(&scene.gt_flow_fg, dir.join("fg.flo"))?;
    save_flow(&scene.gt_flow_bg, dir.join("bg.flo"))?;
    let params = SceneParamsFile {
        seed: scene.spec.seed,
        fg: scene.gt_params_fg,
        bg: scene.gt_params_bg,
        layout: scene.layout.clone(),
    };
    let path = dir.join("params.json");
    fs::write(&path, serde_json::to_string_pretty(&params)?).map_err(|e| Error::io(&path, e))
}

/// Writes `n` scenes under `out_dir` plus `manifest.json`. Scene `i` uses
/// `scene_seed(spec.seed, i)`.
pub fn generate_dataset(n: usize, spec: &SceneSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    if n == 0 {
        return Err(Error::EmptyInput("dataset needs at least one scene"));
    }
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scenes: Vec<ManifestEntry> = (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = scene_seed(spec.seed, i);
            let scene_spec = SceneSpec {
                seed,
                ..spec.clone()
            };
            let scene = generate_scene(&scene_spec)?;
            let id = scene_dir_name(i);
            write_scene(&scene, &out_dir.join(&id))?;
            Ok(ManifestEntry {
                frame1: format!("{id}/frame1.png"),
                frame2: format!("{id}/frame2.png"),
                mask1: format!("{id}/mask1.png"),
                mask2: format!("{id}/mask2.png"),
                fg_flow: format!("{id}/fg.flo"),
                bg_flow: format!("{id}/bg.flo"),
                params: format!("{id}/params.json"),
                id,
                seed,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        count: n,
        spec: spec.clone(),
        scenes,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}
