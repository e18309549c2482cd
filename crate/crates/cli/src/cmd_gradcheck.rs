use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use layerseg::oracle::{gradcheck_suite, splat_mutation_check, GradCheckReport, DEFAULT_TOLERANCE, DEFAULT_TRIALS};
use serde::Serialize;

use crate::outputs::{create_dir, write_config, write_json};
use crate::{CliResult, EXIT_CHECK};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Relative error tolerance.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write gradcheck.json and config.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Settings {
    tolerance: f64,
    trials: usize,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct Output {
    passed: bool,
    checks: Vec<GradCheckReport>,
    /// The splat flow check rerun against a sign-flipped vjp; must fail.
    mutation: GradCheckReport,
    mutation_detected: bool,
}

pub fn run(args: GradcheckArgs) -> CliResult<u8> {
    let start = Instant::now();
    let checks = gradcheck_suite(args.tolerance, args.trials, args.seed)?;
    let mutation = splat_mutation_check(args.trials, args.seed)?;
    for c in &checks {
        eprintln!(
            "{:<26} {} max rel error {:.3e} (worst seed {}, {} rejected)",
            c.op,
            if c.passed { "ok  " } else { "FAIL" },
            c.max_rel_error,
            c.worst_seed,
            c.rejected
        );
    }
    let mutation_detected = !mutation.passed;
    eprintln!(
        "sign-flipped splat vjp {} (max rel error {:.3e}); {:.1} s",
        if mutation_detected { "detected" } else { "NOT DETECTED" },
        mutation.max_rel_error,
        start.elapsed().as_secs_f64()
    );
    let output = Output {
        passed: checks.iter().all(|c| c.passed) && mutation_detected,
        checks,
        mutation,
        mutation_detected,
    };
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_config(
            dir,
            "gradcheck",
            &Settings {
                tolerance: args.tolerance,
                trials: args.trials,
                seed: args.seed,
            },
        )?;
        write_json(&dir.join("gradcheck.json"), &output)?;
    }
    println!("{}", serde_json::to_string_pretty(&output).expect("plain data"));
    Ok(if output.passed { 0 } else { EXIT_CHECK })
}
