//! Per-pair optimization of the latents with Adam and multi-start.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::{AffineParams, CoordMap};
use crate::error::{check_dims, Error, Result};
use crate::imagery::{AlphaField, Image, Mask};
use crate::ldis::{backward, photometric_loss, synthesize, Latents, LossReport, SynthesisTape};
use crate::seghead::{binarize, maxout_disjoint, softmax_binning, clamp01_field, BinningConfig};

pub const MIN_FIT_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lr_params: f64,
    pub lr_alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
    /// Stop when the relative loss change over `convergence_window` iterations
    /// falls below this.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub epsilon_d: f64,
    /// Both learning rates decay geometrically to this fraction of their
    /// initial value at `max_iters`.
    pub lr_final_ratio: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr_params: 0.02,
            lr_alpha: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_iters: 2000,
            restarts: 5,
            tau_start: 0.5,
            tau_end: 0.05,
            seed: 0,
            convergence_tol: 1e-6,
            convergence_window: 50,
            epsilon_d: crate::ldis::DEFAULT_EPSILON_D,
            lr_final_ratio: 0.01,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_params", self.lr_params),
            ("lr_alpha", self.lr_alpha),
            ("adam_eps", self.adam_eps),
            ("tau_start", self.tau_start),
            ("tau_end", self.tau_end),
            ("lr_final_ratio", self.lr_final_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.epsilon_d >= 0.0) {
            return Err(Error::InvalidConfig("epsilon_d must be >= 0".into()));
        }
        Ok(())
    }

    /// Geometric temperature schedule from `tau_start` to `tau_end`.
    pub fn tau_at(&self, iter: usize) -> f64 {
        if self.max_iters <= 1 {
            return self.tau_end;
        }
        let t = iter.min(self.max_iters - 1) as f64 / (self.max_iters - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(t)
    }

    /// Learning-rate multiplier at `iter`, from 1 down to `lr_final_ratio`.
    pub fn lr_scale_at(&self, iter: usize) -> f64 {
        if self.max_iters <= 1 {
            return 1.0;
        }
        let t = iter.min(self.max_iters - 1) as f64 / (self.max_iters - 1) as f64;
        self.lr_final_ratio.powf(t)
    }
}

/// First and second moment estimates, laid out like [`Latents`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Latents,
    pub second: Latents,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &Latents) -> Self {
        Self {
            first: like.zeros_like(),
            second: like.zeros_like(),
            step: 0,
        }
    }
}

struct AdamCoef {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    corr1: f64,
    corr2: f64,
}

impl AdamCoef {
    fn update(&self, x: &mut f64, g: f64, m: &mut f64, v: &mut f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m / self.corr1;
        let v_hat = *v / self.corr2;
        *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

/// Bias-corrected Adam with separate rates for the affine parameters and the
/// latent field.
pub fn adam_step(
    lat: &Latents,
    grad: &Latents,
    state: &AdamState,
    cfg: &FitConfig,
) -> Result<(Latents, AdamState)> {
    check_dims(lat.dims(), grad.dims())?;
    check_dims(lat.dims(), state.first.dims())?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let mut next = lat.clone();
    let mut st = state.clone();
    st.step += 1;
    let t = st.step as i32;
    let coef = |lr| AdamCoef {
        lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        corr1: 1.0 - cfg.beta1.powi(t),
        corr2: 1.0 - cfg.beta2.powi(t),
    };
    let cp = coef(cfg.lr_params);
    for k in 0..6 {
        cp.update(
            &mut next.params1.0[k],
            grad.params1.0[k],
            &mut st.first.params1.0[k],
            &mut st.second.params1.0[k],
        );
        cp.update(
            &mut next.params2.0[k],
            grad.params2.0[k],
            &mut st.first.params2.0[k],
            &mut st.second.params2.0[k],
        );
    }
    let ca = coef(cfg.lr_alpha);
    let g = grad.p.data();
    let m = st.first.p.data_mut();
    let v = st.second.p.data_mut();
    for (i, x) in next.p.data_mut().iter_mut().enumerate() {
        ca.update(x, g[i], &mut m[i], &mut v[i]);
    }
    Ok((next, st))
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Random starting point: small affine motions and `p` near 0.5 with smooth
/// noise in `[-0.2, 0.2]`.
pub fn init_latents(width: usize, height: usize, restart: usize, seed: u64) -> Latents {
    let mut rng = restart_rng(seed, restart);
    let mut params = || {
        let mut a = [0.0; 6];
        for (k, v) in a.iter_mut().enumerate() {
            let r = if k == 0 || k == 3 { 0.1 } else { 0.05 };
            *v = rng.random_range(-r..=r);
        }
        AffineParams(a)
    };
    let params1 = params();
    let params2 = params();

    // coarse lattice of noise, bilinearly interpolated; convex weights keep
    // the range
    const CELL: usize = 8;
    let gw = width.div_ceil(CELL) + 1;
    let gh = height.div_ceil(CELL) + 1;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-0.2..=0.2)).collect();
    let p = AlphaField::from_fn(width, height, |x, y| {
        let gx = x as f64 / CELL as f64;
        let gy = y as f64 / CELL as f64;
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let at = |i: usize, j: usize| grid[j.min(gh - 1) * gw + i.min(gw - 1)];
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bot = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        0.5 + top * (1.0 - fy) + bot * fy
    });
    Latents {
        params1,
        params2,
        p,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub index: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub latents: Latents,
    /// Loss of `latents` evaluated at `tau_end`.
    pub final_loss: f64,
    pub final_report: LossReport,
    pub loss_curve: Vec<f64>,
    pub restart: usize,
    pub iterations: usize,
    pub degenerate: bool,
    pub restarts: Vec<RestartSummary>,
    pub tau_final: f64,
}

impl FitResult {
    /// Front-layer membership (bin 1) at the final temperature.
    pub fn front_mask(&self) -> Mask {
        let cfg = BinningConfig::new(self.tau_final).expect("validated");
        let pair = maxout_disjoint(&softmax_binning(&clamp01_field(&self.latents.p), &cfg));
        binarize(&pair.alpha1, crate::ldis::BINARY_THRESHOLD)
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            params_front: self.latents.params1,
            params_back: self.latents.params2,
            final_loss: self.final_loss,
            valid_pixel_count: self.final_report.valid_pixel_count,
            disoccluded_count: self.final_report.disoccluded_count,
            restart: self.restart,
            iterations: self.iterations,
            degenerate: self.degenerate,
            tau_final: self.tau_final,
            restarts: self.restarts.clone(),
            loss_curve: self.loss_curve.clone(),
        }
    }
}

/// Serializable view of a [`FitResult`] (the latent field itself is written
/// separately as a mask).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub params_front: AffineParams,
    pub params_back: AffineParams,
    pub final_loss: f64,
    pub valid_pixel_count: usize,
    pub disoccluded_count: usize,
    pub restart: usize,
    pub iterations: usize,
    pub degenerate: bool,
    pub tau_final: f64,
    pub restarts: Vec<RestartSummary>,
    pub loss_curve: Vec<f64>,
}

struct RestartRun {
    summary: RestartSummary,
    latents: Latents,
    report: LossReport,
    curve: Vec<f64>,
}

fn evaluate(
    i1: &Image,
    i2: &Image,
    lat: &Latents,
    tau: f64,
    cmap: &CoordMap,
    cfg: &FitConfig,
) -> Result<(SynthesisTape, LossReport)> {
    let bcfg = BinningConfig::new(tau)?;
    let tape = synthesize(i1, lat, &bcfg, cmap, cfg.epsilon_d)?;
    let rep = photometric_loss(i2, &tape)?;
    Ok((tape, rep))
}

fn run_restart(i1: &Image, i2: &Image, cfg: &FitConfig, cmap: &CoordMap, index: usize) -> Result<RestartRun> {
    let (w, h) = i1.dims();
    let init = init_latents(w, h, index, cfg.seed);
    let (_, init_rep) = evaluate(i1, i2, &init, cfg.tau_end, cmap, cfg)?;

    let mut lat = init.clone();
    let mut state = AdamState::new(&lat);
    let mut curve = Vec::with_capacity(cfg.max_iters);
    let mut degenerate = false;
    for k in 0..cfg.max_iters {
        let tau = cfg.tau_at(k);
        let bcfg = BinningConfig::new(tau)?;
        let tape = synthesize(i1, &lat, &bcfg, cmap, cfg.epsilon_d)?;
        let rep = photometric_loss(i2, &tape)?;
        if rep.degenerate || !rep.loss.is_finite() {
            degenerate = true;
            break;
        }
        curve.push(rep.loss);
        let grad = backward(&tape, i2, &bcfg, cmap)?;
        let scale = cfg.lr_scale_at(k);
        let step_cfg = FitConfig {
            lr_params: cfg.lr_params * scale,
            lr_alpha: cfg.lr_alpha * scale,
            ..cfg.clone()
        };
        match adam_step(&lat, &grad, &state, &step_cfg) {
            Ok((next, st)) => {
                lat = next;
                state = st;
            }
            Err(Error::NonFinite(_)) => {
                degenerate = true;
                break;
            }
            Err(e) => return Err(e),
        }
        // projected step: keep p where the clamp is the identity
        for v in lat.p.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        let n = curve.len();
        if n > cfg.convergence_window {
            let old = curve[n - 1 - cfg.convergence_window];
            if (old - curve[n - 1]).abs() <= cfg.convergence_tol * old.abs() {
                break;
            }
        }
    }
    let iterations = curve.len();

    let (_, mut report) = evaluate(i1, i2, &lat, cfg.tau_end, cmap, cfg)?;
    if report.degenerate {
        degenerate = true;
    }
    // best-so-far at the common temperature
    if !degenerate && report.loss > init_rep.loss && !init_rep.degenerate {
        lat = init;
        report = init_rep;
    }
    Ok(RestartRun {
        summary: RestartSummary {
            index,
            initial_loss: init_rep.loss,
            final_loss: report.loss,
            iterations,
            degenerate,
        },
        latents: lat,
        report,
        curve,
    })
}

/// Fits both layers to an image pair. Restarts run on the current rayon pool;
/// the winner is the lowest final loss, ties going to the lower index.
pub fn fit_pair(i1: &Image, i2: &Image, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_dims(i1.dims(), i2.dims())?;
    let (w, h) = i1.dims();
    if w < MIN_FIT_SIZE || h < MIN_FIT_SIZE {
        return Err(Error::InvalidConfig(format!(
            "images must be at least {MIN_FIT_SIZE}x{MIN_FIT_SIZE}, got {w}x{h}"
        )));
    }
    let cmap = CoordMap::new(w, h)?;
    let runs: Vec<RestartRun> = (0..cfg.restarts)
        .into_par_iter()
        .map(|k| run_restart(i1, i2, cfg, &cmap, k))
        .collect::<Result<_>>()?;

    let best = runs
        .iter()
        .filter(|r| !r.summary.degenerate)
        .min_by(|a, b| {
            a.summary
                .final_loss
                .total_cmp(&b.summary.final_loss)
                .then(a.summary.index.cmp(&b.summary.index))
        })
        .ok_or_else(|| Error::Degenerate(format!("all {} restarts degenerated", cfg.restarts)))?;

    Ok(FitResult {
        latents: best.latents.clone(),
        final_loss: best.summary.final_loss,
        final_report: best.report,
        loss_curve: best.curve.clone(),
        restart: best.summary.index,
        iterations: best.summary.iterations,
        degenerate: best.report.degenerate,
        restarts: runs.iter().map(|r| r.summary.clone()).collect(),
        tau_final: cfg.tau_end,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_latents(w: usize, h: usize) -> Latents {
        Latents {
            params1: AffineParams([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]),
            params2: AffineParams([-0.1; 6]),
            p: AlphaField::filled(w, h, 0.4),
        }
    }

    #[test]
    fn zero_gradient_leaves_latents() {
        let lat = small_latents(3, 2);
        let st = AdamState::new(&lat);
        let (next, st2) = adam_step(&lat, &lat.zeros_like(), &st, &FitConfig::default()).unwrap();
        assert_eq!(next, lat);
        assert_eq!(st2.step, 1);
    }

    #[test]
    fn first_step_is_sign_like() {
        let cfg = FitConfig::default();
        let lat = small_latents(2, 2);
        let mut g = lat.zeros_like();
        g.params1.0[0] = 3.0;
        g.params2.0[1] = -1e-3;
        g.p.data_mut()[0] = 0.25;
        let (next, _) = adam_step(&lat, &g, &AdamState::new(&lat), &cfg).unwrap();
        let expect = |lr: f64, g: f64| -lr * g / (g.abs() + cfg.adam_eps);
        assert!((next.params1.0[0] - lat.params1.0[0] - expect(cfg.lr_params, 3.0)).abs() < 1e-15);
        assert!((next.params2.0[1] - lat.params2.0[1] - expect(cfg.lr_params, -1e-3)).abs() < 1e-15);
        assert!((next.p.data()[0] - lat.p.data()[0] - expect(cfg.lr_alpha, 0.25)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = FitConfig::default();
        let mut lat = small_latents(1, 1);
        let mut g = lat.zeros_like();
        g.params1.0[2] = 0.7;
        let mut st = AdamState::new(&lat);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = lat.params1.0[2];
            let (n, s) = adam_step(&lat, &g, &st, &cfg).unwrap();
            last = n.params1.0[2] - before;
            lat = n;
            st = s;
        }
        assert!((last + cfg.lr_params).abs() < 1e-6 * cfg.lr_params);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let lat = small_latents(2, 2);
        let mut g = lat.zeros_like();
        g.p.data_mut()[3] = f64::NAN;
        assert!(matches!(
            adam_step(&lat, &g, &AdamState::new(&lat), &FitConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_latents(37, 21, 2, 9);
        assert_eq!(a, init_latents(37, 21, 2, 9));
        assert_ne!(a, init_latents(37, 21, 3, 9));
        assert_ne!(a, init_latents(37, 21, 2, 10));
        for s in 0..20 {
            let l = init_latents(40, 17, s, 1);
            assert!(l.p.data().iter().all(|v| (0.3..=0.7).contains(v)));
            for p in [l.params1, l.params2] {
                assert!(p.0[0].abs() <= 0.1 && p.0[3].abs() <= 0.1);
                for k in [1, 2, 4, 5] {
                    assert!(p.0[k].abs() <= 0.05);
                }
            }
        }
    }

    #[test]
    fn tau_schedule_endpoints() {
        let cfg = FitConfig::default();
        assert_eq!(cfg.tau_at(0), cfg.tau_start);
        assert!((cfg.tau_at(cfg.max_iters - 1) - cfg.tau_end).abs() < 1e-15);
        assert!(cfg.tau_at(10) > cfg.tau_at(11));
    }

    #[test]
    fn config_validation() {
        let mut cfg = FitConfig::default();
        cfg.restarts = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = FitConfig::default();
        cfg.lr_alpha = -1.0;
        assert!(cfg.validate().is_err());
        let json = r#"{"restarts": 2, "seed": 4}"#;
        let cfg: FitConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.restarts, 2);
        assert_eq!(cfg.lr_params, 0.02);
    }

    #[test]
    fn tiny_images_rejected() {
        let img = Image::zeros(8, 8);
        assert!(fit_pair(&img, &img, &FitConfig::default()).is_err());
    }
}
