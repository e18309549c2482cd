//! Segmentation and flow metrics, and report aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::imagery::{FlowField, Image, Mask};

pub const PSNR_CAP_DB: f64 = 99.0;

/// Intersection over union. Two empty masks score 1, exactly one empty scores 0.
pub fn jaccard(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims(gt.dims(), pred.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Scores `mask` and its complement against `gt`; layer 1 means `mask` itself won.
/// Ties go to layer 1.
pub fn jaccard_best_permutation(mask: &Mask, gt: &Mask) -> Result<(f64, u8)> {
    let direct = jaccard(mask, gt)?;
    let flipped = jaccard(&mask.complement(), gt)?;
    if flipped > direct {
        Ok((flipped, 2))
    } else {
        Ok((direct, 1))
    }
}

/// Mean endpoint error over `region`.
pub fn epe(pred: &FlowField, gt: &FlowField, region: &Mask) -> Result<f64> {
    check_dims(gt.dims(), pred.dims())?;
    check_dims(gt.dims(), region.dims())?;
    let n = region.count();
    if n == 0 {
        return Err(Error::EmptyRegion("epe region"));
    }
    let (w, h) = gt.dims();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            if region.get(x, y) {
                let (u, v) = pred.get(x, y);
                let (gu, gv) = gt.get(x, y);
                sum += (u - gu).hypot(v - gv);
            }
        }
    }
    Ok(sum / n as f64)
}

/// Peak-1 PSNR over the valid pixels, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &Image, test: &Image, valid: &Mask) -> Result<f64> {
    check_dims(reference.dims(), test.dims())?;
    check_dims(reference.dims(), valid.dims())?;
    let n = valid.count();
    if n == 0 {
        return Err(Error::EmptyRegion("psnr valid set"));
    }
    let mut se = 0.0;
    for (i, &on) in valid.data().iter().enumerate() {
        if on != 0 {
            for c in 0..3 {
                let d = reference.data()[i * 3 + c] - test.data()[i * 3 + c];
                se += d * d;
            }
        }
    }
    let mse = se / (3 * n) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene: String,
    /// Best over the two layer interpretations.
    pub jaccard: f64,
    /// Front layer taken as the object, no permutation.
    pub jaccard_layer1: f64,
    pub chosen_layer: u8,
    pub epe_fg: f64,
    pub epe_bg: f64,
    pub psnr_valid: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub j_mean: f64,
    pub j_median: f64,
    pub j_layer1_mean: f64,
    pub epe_fg_mean: f64,
    pub epe_bg_mean: f64,
    /// Foreground EPE over scenes with `jaccard >= 0.5`; `None` if there are none.
    pub epe_fg_mean_segmented: Option<f64>,
    pub psnr_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenes: Vec<EvalRecord>,
    pub summary: Summary,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn aggregate(records: Vec<EvalRecord>) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no evaluation records"));
    }
    let js: Vec<f64> = records.iter().map(|r| r.jaccard).collect();
    let segmented: Vec<f64> = records
        .iter()
        .filter(|r| r.jaccard >= 0.5)
        .map(|r| r.epe_fg)
        .collect();
    let summary = Summary {
        count: records.len(),
        j_mean: mean(js.iter().copied()),
        j_median: median(&js),
        j_layer1_mean: mean(records.iter().map(|r| r.jaccard_layer1)),
        epe_fg_mean: mean(records.iter().map(|r| r.epe_fg)),
        epe_bg_mean: mean(records.iter().map(|r| r.epe_bg)),
        epe_fg_mean_segmented: (!segmented.is_empty()).then(|| mean(segmented.iter().copied())),
        psnr_mean: mean(records.iter().map(|r| r.psnr_valid)),
    };
    Ok(Report {
        scenes: records,
        summary,
    })
}

impl Report {
    /// Fixed-width per-scene table followed by the summary.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>7} {:>7} {:>5} {:>8} {:>8} {:>8} {:>12}\n",
            "scene", "J", "J_l1", "layer", "epe_fg", "epe_bg", "psnr", "loss"
        );
        for r in &self.scenes {
            out += &format!(
                "{:<12} {:>7.4} {:>7.4} {:>5} {:>8.3} {:>8.3} {:>8.2} {:>12.4}\n",
                r.scene, r.jaccard, r.jaccard_layer1, r.chosen_layer, r.epe_fg, r.epe_bg, r.psnr_valid, r.final_loss
            );
        }
        let s = &self.summary;
        out += &format!(
            "scenes {}  J mean {:.4}  J median {:.4}  J layer1 mean {:.4}  EPE fg {:.3}  EPE bg {:.3}  PSNR {:.2}\n",
            s.count, s.j_mean, s.j_median, s.j_layer1_mean, s.epe_fg_mean, s.epe_bg_mean, s.psnr_mean
        );
        if let Some(e) = s.epe_fg_mean_segmented {
            out += &format!("EPE fg on segmented scenes (J >= 0.5) {e:.3}\n");
        }
        out
    }
}
