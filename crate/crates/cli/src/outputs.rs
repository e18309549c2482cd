//! File layout shared by the subcommands.

use std::fs;
use std::path::Path;

use layerseg::affine::AffineParams;
use layerseg::imagery::AlphaField;
use layerseg::ldis::Latents;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const CONFIG_JSON: &str = "config.json";
pub const FIT_JSON: &str = "fit.json";
pub const LATENTS_JSON: &str = "latents.json";
pub const MASK_PNG: &str = "mask.png";
pub const FRONT_FLO: &str = "front.flo";
pub const BACK_FLO: &str = "back.flo";
pub const TIMING_JSON: &str = "timing.json";
pub const REPORT_JSON: &str = "report.json";

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::io)?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(format!("cannot parse {}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

/// Echo of the resolved settings of a run.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, T: Serialize> {
    pub command: &'a str,
    pub settings: &'a T,
}

pub fn write_config<T: Serialize>(dir: &Path, command: &str, settings: &T) -> CliResult<()> {
    write_json(&dir.join(CONFIG_JSON), &RunConfig { command, settings })
}

/// Full latent state of a fit, exact enough to re-synthesize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentsFile {
    pub width: usize,
    pub height: usize,
    pub params_front: AffineParams,
    pub params_back: AffineParams,
    pub p: Vec<f64>,
}

impl LatentsFile {
    pub fn from_latents(lat: &Latents) -> Self {
        let (width, height) = lat.dims();
        Self {
            width,
            height,
            params_front: lat.params1,
            params_back: lat.params2,
            p: lat.p.data().to_vec(),
        }
    }

    pub fn to_latents(&self) -> CliResult<Latents> {
        Ok(Latents {
            params1: self.params_front,
            params2: self.params_back,
            p: AlphaField::new(self.width, self.height, self.p.clone())?,
        })
    }
}
