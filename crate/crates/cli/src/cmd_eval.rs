use std::path::{Path, PathBuf};

use clap::Args;
use layerseg::affine::CoordMap;
use layerseg::eval::{aggregate, epe, jaccard, jaccard_best_permutation, psnr, EvalRecord};
use layerseg::fit::FitSummary;
use layerseg::imagery::{load_flow, load_image, load_mask};
use layerseg::ldis::{synthesize, DEFAULT_EPSILON_D};
use layerseg::seghead::BinningConfig;
use layerseg::synth::{load_manifest, ManifestEntry};
use rayon::prelude::*;
use serde::Serialize;

use crate::outputs::{
    create_dir, read_json, write_config, write_json, LatentsFile, BACK_FLO, CONFIG_JSON, FIT_JSON, FRONT_FLO,
    LATENTS_JSON, MASK_PNG, REPORT_JSON,
};
use crate::{with_jobs, CliError, CliResult};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory of `fit --dataset`.
    #[arg(long)]
    fit: PathBuf,
    /// Report directory (default: FIT/eval).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Serialize)]
struct EvalSettings<'a> {
    dataset: &'a PathBuf,
    fit: &'a PathBuf,
}

fn require(path: PathBuf) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::io(format!("missing {}", path.display())))
    }
}

/// `epsilon_d` the fit ran with, from its echoed config.
fn fit_epsilon_d(fit_dir: &Path) -> f64 {
    let Ok(cfg) = read_json::<serde_json::Value>(&fit_dir.join(CONFIG_JSON)) else {
        return DEFAULT_EPSILON_D;
    };
    cfg.pointer("/settings/fit/epsilon_d")
        .and_then(|v| v.as_f64())
        .unwrap_or(DEFAULT_EPSILON_D)
}

fn evaluate_scene(dataset: &Path, fit_dir: &Path, scene: &ManifestEntry, epsilon_d: f64) -> CliResult<EvalRecord> {
    let pred_dir = fit_dir.join(&scene.id);
    let gt_mask = load_mask(require(dataset.join(&scene.mask1))?)?;
    let gt_fg = load_flow(require(dataset.join(&scene.fg_flow))?)?;
    let gt_bg = load_flow(require(dataset.join(&scene.bg_flow))?)?;
    let i1 = load_image(require(dataset.join(&scene.frame1))?)?;
    let i2 = load_image(require(dataset.join(&scene.frame2))?)?;
    let mask = load_mask(require(pred_dir.join(MASK_PNG))?)?;
    let front = load_flow(require(pred_dir.join(FRONT_FLO))?)?;
    let back = load_flow(require(pred_dir.join(BACK_FLO))?)?;
    let summary: FitSummary = read_json(&require(pred_dir.join(FIT_JSON))?)?;
    let latents: LatentsFile = read_json(&require(pred_dir.join(LATENTS_JSON))?)?;

    let (j, layer) = jaccard_best_permutation(&mask, &gt_mask)?;
    let (fg, bg) = if layer == 1 { (&front, &back) } else { (&back, &front) };
    let bg_region = gt_mask.complement();
    let epe_fg = epe(fg, &gt_fg, &gt_mask)?;
    let epe_bg = epe(bg, &gt_bg, &bg_region)?;

    let (w, h) = i1.dims();
    let tape = synthesize(
        &i1,
        &latents.to_latents()?,
        &BinningConfig::new(summary.tau_final)?,
        &CoordMap::new(w, h)?,
        epsilon_d,
    )?;
    let valid = tape.disoccluded.complement();
    let psnr_valid = if valid.count() == 0 {
        0.0
    } else {
        psnr(&i2, &tape.reconstruction, &valid)?
    };
    Ok(EvalRecord {
        scene: scene.id.clone(),
        jaccard: j,
        jaccard_layer1: jaccard(&mask, &gt_mask)?,
        chosen_layer: layer,
        epe_fg,
        epe_bg,
        psnr_valid,
        final_loss: summary.final_loss,
    })
}

pub fn run(args: EvalArgs) -> CliResult<u8> {
    let manifest = load_manifest(&args.dataset)?;
    if !args.fit.is_dir() {
        return Err(CliError::io(format!("missing fit directory {}", args.fit.display())));
    }
    let epsilon_d = fit_epsilon_d(&args.fit);
    let records = with_jobs(args.jobs, || {
        manifest
            .scenes
            .par_iter()
            .map(|s| evaluate_scene(&args.dataset, &args.fit, s, epsilon_d))
            .collect::<CliResult<Vec<_>>>()
    })??;
    let report = aggregate(records)?;
    let out = args.out.clone().unwrap_or_else(|| args.fit.join("eval"));
    create_dir(&out)?;
    write_config(
        &out,
        "eval",
        &EvalSettings {
            dataset: &args.dataset,
            fit: &args.fit,
        },
    )?;
    write_json(&out.join(REPORT_JSON), &report)?;
    print!("{}", report.table());
    Ok(0)
}
