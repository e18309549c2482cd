use std::path::PathBuf;

use clap::Args;
use layerseg::imagery::{load_image, load_mask, save_image, Image, Mask};
use serde::Serialize;

use crate::outputs::{create_dir, write_config, MASK_PNG};
use crate::{CliError, CliResult};

const GAP: usize = 4;
const GT_COLOR: [f64; 3] = [0.1, 0.9, 0.2];
const PRED_COLOR: [f64; 3] = [0.95, 0.15, 0.1];

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Scene directory (frame1.png, mask1.png).
    #[arg(long)]
    scene: PathBuf,
    /// Fit output directory for the same scene (mask.png).
    #[arg(long)]
    fit: PathBuf,
    /// Output directory; receives render.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Settings<'a> {
    scene: &'a PathBuf,
    fit: &'a PathBuf,
}

fn on_boundary(m: &Mask, x: usize, y: usize) -> bool {
    if !m.get(x, y) {
        return false;
    }
    let (w, h) = m.dims();
    x == 0 || y == 0 || x + 1 == w || y + 1 == h || !m.get(x - 1, y) || !m.get(x + 1, y) || !m.get(x, y - 1) || !m.get(x, y + 1)
}

/// Frame 1 dimmed outside `mask`, with the mask outline drawn in `color`.
fn overlay(frame: &Image, mask: &Mask, color: [f64; 3]) -> Image {
    let (w, h) = frame.dims();
    let mut out = frame.clone();
    for y in 0..h {
        for x in 0..w {
            let px = frame.pixel(x, y);
            let shown = if on_boundary(mask, x, y) {
                color
            } else if mask.get(x, y) {
                px
            } else {
                px.map(|v| 0.4 * v)
            };
            out.set_pixel(x, y, shown);
        }
    }
    out
}

pub fn panels(frame: &Image, gt: &Mask, pred: &Mask) -> CliResult<Image> {
    let (w, h) = frame.dims();
    for m in [gt, pred] {
        if m.dims() != (w, h) {
            return Err(layerseg::Error::DimensionMismatch {
                expected: (w, h),
                found: m.dims(),
            }
            .into());
        }
    }
    let parts = [frame.clone(), overlay(frame, gt, GT_COLOR), overlay(frame, pred, PRED_COLOR)];
    let total = 3 * w + 2 * GAP;
    let mut out = Image::new(total, h, vec![1.0; total * h * 3])?;
    for (k, part) in parts.iter().enumerate() {
        let x0 = k * (w + GAP);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(x0 + x, y, part.pixel(x, y));
            }
        }
    }
    Ok(out)
}

pub fn run(args: RenderArgs) -> CliResult<u8> {
    let frame_path = args.scene.join("frame1.png");
    if !frame_path.exists() {
        return Err(CliError::io(format!("missing {}", frame_path.display())));
    }
    let frame = load_image(frame_path)?;
    let gt = load_mask(args.scene.join("mask1.png"))?;
    let pred = load_mask(args.fit.join(MASK_PNG))?;
    let img = panels(&frame, &gt, &pred)?;
    create_dir(&args.out)?;
    let path = args.out.join("render.png");
    save_image(&img, &path)?;
    write_config(
        &args.out,
        "render",
        &Settings {
            scene: &args.scene,
            fit: &args.fit,
        },
    )?;
    println!("wrote {}", path.display());
    Ok(0)
}
