use std::path::PathBuf;

use clap::{Args, ValueEnum};
use layerseg::synth::{generate_dataset, SceneSpec, ShapeKind, TextureSource};
use serde::Serialize;

use crate::outputs::write_config;
use crate::{read_json_config, with_jobs, CliResult};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Shape {
    Rectangle,
    Ellipse,
    Any,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Texture {
    Noise,
    Checker,
    Gradient,
    Mixed,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Frame size as HEIGHTxWIDTH.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Integer translations only.
    #[arg(long)]
    integer: bool,
    #[arg(long, value_enum)]
    shape: Option<Shape>,
    #[arg(long, value_enum, conflicts_with = "texture_image")]
    texture: Option<Texture>,
    /// Crop textures from this image instead of generating them.
    #[arg(long)]
    texture_image: Option<PathBuf>,
    /// Per-axis translation bound in pixels.
    #[arg(long)]
    max_translation: Option<f64>,
    /// Sprite extent range as fractions of the frame, LO,HI.
    #[arg(long, value_parser = parse_pair)]
    size_range: Option<(f64, f64)>,
    /// Isotropic scale range LO,HI (off by default).
    #[arg(long, value_parser = parse_pair)]
    scale_range: Option<(f64, f64)>,
    /// Minimum fg/bg flow distance at the sprite centre, in pixels.
    #[arg(long)]
    min_separation: Option<f64>,
    /// Scene spec JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let h = h.trim().parse().map_err(|e| format!("bad height {h:?}: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("bad width {w:?}: {e}"))?;
    Ok((h, w))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let a = a.trim().parse().map_err(|e| format!("bad number {a:?}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("bad number {b:?}: {e}"))?;
    Ok((a, b))
}

#[derive(Debug, Serialize)]
struct GenSettings<'a> {
    n: usize,
    out: &'a PathBuf,
    spec: &'a SceneSpec,
}

fn resolve_spec(args: &GenArgs) -> CliResult<SceneSpec> {
    let mut spec: SceneSpec = match &args.config {
        Some(path) => read_json_config(path)?,
        None => SceneSpec::default(),
    };
    if let Some((h, w)) = args.size {
        spec.height = h;
        spec.width = w;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if args.integer {
        spec.integer_mode = true;
    }
    if let Some(shape) = args.shape {
        spec.shape = match shape {
            Shape::Rectangle => ShapeKind::Rectangle,
            Shape::Ellipse => ShapeKind::Ellipse,
            Shape::Any => ShapeKind::Any,
        };
    }
    if let Some(t) = args.texture {
        spec.texture = match t {
            Texture::Noise => TextureSource::Noise,
            Texture::Checker => TextureSource::Checker,
            Texture::Gradient => TextureSource::Gradient,
            Texture::Mixed => TextureSource::Mixed,
        };
    }
    if let Some(path) = &args.texture_image {
        spec.texture = TextureSource::Image { path: path.clone() };
    }
    if let Some(t) = args.max_translation {
        spec.max_translation = t;
    }
    if let Some(r) = args.size_range {
        spec.size_range = r;
    }
    if args.scale_range.is_some() {
        spec.scale_range = args.scale_range;
    }
    if let Some(s) = args.min_separation {
        spec.min_separation = s;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn run(args: GenArgs) -> CliResult<u8> {
    let spec = resolve_spec(&args)?;
    let manifest = with_jobs(args.jobs, || generate_dataset(args.n, &spec, &args.out))??;
    write_config(
        &args.out,
        "gen",
        &GenSettings {
            n: args.n,
            out: &args.out,
            spec: &spec,
        },
    )?;
    println!(
        "generated {} scenes ({}x{}) in {}",
        manifest.count,
        spec.height,
        spec.width,
        args.out.display()
    );
    Ok(0)
}
