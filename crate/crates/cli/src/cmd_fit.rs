use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use layerseg::affine::{dense_flow, CoordMap};
use layerseg::fit::{fit_pair, FitConfig, FitResult};
use layerseg::imagery::{load_image, save_flow, save_mask, Image};
use layerseg::ldis::synthesize;
use layerseg::seghead::BinningConfig;
use layerseg::synth::load_manifest;
use rayon::prelude::*;
use serde::Serialize;

use crate::outputs::{
    create_dir, write_config, write_json, LatentsFile, BACK_FLO, FIT_JSON, FRONT_FLO, LATENTS_JSON, MASK_PNG,
    TIMING_JSON,
};
use crate::{read_json_config, with_jobs, CliError, CliResult, EXIT_DEGENERATE};

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, requires = "frame2", conflicts_with = "dataset")]
    frame1: Option<PathBuf>,
    #[arg(long, requires = "frame1")]
    frame2: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    lr_params: Option<f64>,
    #[arg(long)]
    lr_alpha: Option<f64>,
    /// Constant temperature (sets both ends of the schedule).
    #[arg(long, conflicts_with_all = ["tau_start", "tau_end"])]
    tau: Option<f64>,
    #[arg(long)]
    tau_start: Option<f64>,
    #[arg(long)]
    tau_end: Option<f64>,
    #[arg(long)]
    epsilon_d: Option<f64>,
    /// Fit config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Write every pipeline intermediate of the final fit here.
    #[arg(long)]
    dump_tape: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct FitSettings<'a> {
    frame1: &'a Option<PathBuf>,
    frame2: &'a Option<PathBuf>,
    dataset: &'a Option<PathBuf>,
    fit: &'a FitConfig,
}

#[derive(Debug, Serialize)]
struct SceneTiming {
    scene: String,
    seconds: f64,
    restarts: usize,
}

fn resolve_config(args: &FitArgs) -> CliResult<FitConfig> {
    let mut cfg: FitConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => FitConfig::default(),
    };
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        )*};
    }
    take!(restarts, seed, max_iters, lr_params, lr_alpha, tau_start, tau_end, epsilon_d);
    if let Some(t) = args.tau {
        cfg.tau_start = t;
        cfg.tau_end = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_fit(dir: &Path, result: &FitResult, i1: &Image, cfg: &FitConfig, tape_dir: Option<&Path>) -> CliResult<()> {
    create_dir(dir)?;
    let (w, h) = i1.dims();
    let cmap = CoordMap::new(w, h)?;
    write_json(&dir.join(FIT_JSON), &result.summary())?;
    write_json(&dir.join(LATENTS_JSON), &LatentsFile::from_latents(&result.latents))?;
    save_mask(&result.front_mask(), dir.join(MASK_PNG))?;
    save_flow(&dense_flow(&result.latents.params1, &cmap)?, dir.join(FRONT_FLO))?;
    save_flow(&dense_flow(&result.latents.params2, &cmap)?, dir.join(BACK_FLO))?;
    if let Some(t) = tape_dir {
        let bcfg = BinningConfig::new(result.tau_final)?;
        synthesize(i1, &result.latents, &bcfg, &cmap, cfg.epsilon_d)?.dump(t)?;
    }
    Ok(())
}

struct Job {
    id: String,
    frame1: PathBuf,
    frame2: PathBuf,
    out: PathBuf,
    tape: Option<PathBuf>,
}

enum Outcome {
    Done(SceneTiming),
    Degenerate(String),
}

fn run_job(job: &Job, cfg: &FitConfig) -> CliResult<Outcome> {
    let i1 = load_image(&job.frame1)?;
    let i2 = load_image(&job.frame2)?;
    let start = Instant::now();
    let result = match fit_pair(&i1, &i2, cfg) {
        Ok(r) => r,
        Err(layerseg::Error::Degenerate(msg)) => {
            eprintln!("{}: degenerate ({msg})", job.id);
            return Ok(Outcome::Degenerate(job.id.clone()));
        }
        Err(e) => return Err(e.into()),
    };
    let seconds = start.elapsed().as_secs_f64();
    write_fit(&job.out, &result, &i1, cfg, job.tape.as_deref())?;
    eprintln!(
        "{}: loss {:.4} restart {} iterations {} ({seconds:.1} s)",
        job.id, result.final_loss, result.restart, result.iterations
    );
    Ok(Outcome::Done(SceneTiming {
        scene: job.id.clone(),
        seconds,
        restarts: cfg.restarts,
    }))
}

pub fn run(args: FitArgs) -> CliResult<u8> {
    let cfg = resolve_config(&args)?;
    let jobs: Vec<Job> = match (&args.frame1, &args.frame2, &args.dataset) {
        (Some(f1), Some(f2), None) => vec![Job {
            id: "pair".into(),
            frame1: f1.clone(),
            frame2: f2.clone(),
            out: args.out.clone(),
            tape: args.dump_tape.clone(),
        }],
        (None, None, Some(dir)) => {
            let manifest = load_manifest(dir)?;
            manifest
                .scenes
                .iter()
                .map(|s| Job {
                    id: s.id.clone(),
                    frame1: dir.join(&s.frame1),
                    frame2: dir.join(&s.frame2),
                    out: args.out.join(&s.id),
                    tape: args.dump_tape.as_ref().map(|t| t.join(&s.id)),
                })
                .collect()
        }
        _ => return Err(CliError::usage("give either --frame1 and --frame2, or --dataset")),
    };
    create_dir(&args.out)?;
    write_config(
        &args.out,
        "fit",
        &FitSettings {
            frame1: &args.frame1,
            frame2: &args.frame2,
            dataset: &args.dataset,
            fit: &cfg,
        },
    )?;
    let outcomes = with_jobs(args.jobs, || {
        jobs.par_iter().map(|j| run_job(j, &cfg)).collect::<Vec<_>>()
    })?;
    let mut timings = Vec::new();
    let mut degenerate = Vec::new();
    for o in outcomes {
        match o? {
            Outcome::Done(t) => timings.push(t),
            Outcome::Degenerate(id) => degenerate.push(id),
        }
    }
    write_json(&args.out.join(TIMING_JSON), &timings)?;
    if !degenerate.is_empty() {
        eprintln!("degenerate fits: {}", degenerate.join(", "));
        return Ok(EXIT_DEGENERATE);
    }
    println!("fitted {} pair(s) into {}", timings.len(), args.out.display());
    Ok(0)
}
