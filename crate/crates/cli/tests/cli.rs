use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use layerseg::affine::{dense_flow, CoordMap};
use layerseg::fit::FitSummary;
use layerseg::imagery::{load_mask, save_flow, save_image, save_mask, Mask};
use layerseg::synth::{generate_scene, load_manifest, SceneParamsFile, SceneSpec};
use serde_json::{json, Value};

fn layerseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layerseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn gen(out: &Path, n: usize) -> Output {
    layerseg(&["gen", "--n", &n.to_string(), "--size", "40x64", "--seed", "13", "--integer", "--out", p(out)])
}

#[test]
fn gen_writes_scenes_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&gen(&a, 5)), 0);
    assert_eq!(code(&gen(&b, 5)), 0);
    let manifest = load_manifest(&a).unwrap();
    assert_eq!(manifest.count, 5);
    for s in &manifest.scenes {
        assert!(a.join(&s.id).is_dir());
        for f in ["frame1.png", "frame2.png", "mask1.png", "mask2.png", "fg.flo", "bg.flo", "params.json"] {
            assert_eq!(fs::read(a.join(&s.id).join(f)).unwrap(), fs::read(b.join(&s.id).join(f)).unwrap());
        }
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(read_json(&a.join("config.json"))["command"], "gen");
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&layerseg(&["gen", "--size", "0x0", "--out", p(&out)])), 2);
    assert_eq!(code(&layerseg(&["gen", "--jobs", "0", "--out", p(&out)])), 2);
    assert_eq!(code(&layerseg(&["fit", "--out", p(&out)])), 2);
    assert_eq!(code(&layerseg(&["fit", "--frame1", "a.png", "--out", p(&out)])), 2);
    assert_eq!(code(&layerseg(&["bogus"])), 2);
}

fn static_pair(dir: &Path) -> (String, String) {
    let img = generate_scene(&SceneSpec {
        width: 32,
        height: 32,
        seed: 3,
        ..SceneSpec::default()
    })
    .unwrap()
    .i1;
    let f1 = dir.join("f1.png");
    let f2 = dir.join("f2.png");
    save_image(&img, &f1).unwrap();
    save_image(&img, &f2).unwrap();
    (p(&f1).to_string(), p(&f2).to_string())
}

#[test]
fn fit_identity_pair_is_near_bound_and_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (f1, f2) = static_pair(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = layerseg(&["fit", "--frame1", &f1, "--frame2", &f2, "--restarts", "1", "--seed", "1", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    let summary: FitSummary = serde_json::from_value(read_json(&a.join("fit.json"))).unwrap();
    let bound = 1.05 * 0.001 * 3.0 * 32.0 * 32.0;
    assert!(summary.final_loss <= bound, "loss {}", summary.final_loss);
    assert_eq!(load_mask(a.join("mask.png")).unwrap().dims(), (32, 32));
    for f in ["fit.json", "latents.json", "mask.png", "front.flo", "back.flo", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("timing.json").exists());
}

#[test]
fn fit_missing_frame_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.png");
    let out = tmp.path().join("out");
    let o = layerseg(&["fit", "--frame1", p(&missing), "--frame2", p(&missing), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
}

/// Fit-output directory holding the ground truth itself.
fn write_gt_prediction(dataset: &Path, fit: &Path) {
    let manifest = load_manifest(dataset).unwrap();
    let cmap = CoordMap::new(manifest.spec.width, manifest.spec.height).unwrap();
    for s in &manifest.scenes {
        let dir = fit.join(&s.id);
        fs::create_dir_all(&dir).unwrap();
        let params: SceneParamsFile = serde_json::from_slice(&fs::read(dataset.join(&s.params)).unwrap()).unwrap();
        let mask: Mask = load_mask(dataset.join(&s.mask1)).unwrap();
        save_mask(&mask, dir.join("mask.png")).unwrap();
        save_flow(&dense_flow(&params.fg, &cmap).unwrap(), dir.join("front.flo")).unwrap();
        save_flow(&dense_flow(&params.bg, &cmap).unwrap(), dir.join("back.flo")).unwrap();
        let p: Vec<f64> = mask.data().iter().map(|&m| if m != 0 { 1.0 } else { 0.0 }).collect();
        let latents = json!({
            "width": manifest.spec.width,
            "height": manifest.spec.height,
            "params_front": params.fg,
            "params_back": params.bg,
            "p": p,
        });
        fs::write(dir.join("latents.json"), latents.to_string()).unwrap();
        let summary = FitSummary {
            params_front: params.fg,
            params_back: params.bg,
            final_loss: 0.0,
            valid_pixel_count: 0,
            disoccluded_count: 0,
            restart: 0,
            iterations: 0,
            degenerate: false,
            tau_final: 0.01,
            restarts: vec![],
            loss_curve: vec![],
        };
        fs::write(dir.join("fit.json"), serde_json::to_string(&summary).unwrap()).unwrap();
    }
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let fit = tmp.path().join("fit");
    assert_eq!(code(&gen(&data, 3)), 0);
    write_gt_prediction(&data, &fit);
    let o = layerseg(&["eval", "--dataset", p(&data), "--fit", p(&fit)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&fit.join("eval").join("report.json"));
    let summary = &report["summary"];
    assert_eq!(summary["j_mean"], 1.0);
    assert_eq!(summary["j_layer1_mean"], 1.0);
    assert!(summary["epe_fg_mean"].as_f64().unwrap() < 1e-5);
    for s in report["scenes"].as_array().unwrap() {
        assert_eq!(s["jaccard"], 1.0);
        assert_eq!(s["jaccard_layer1"], 1.0);
    }
    assert!(fit.join("eval").join("config.json").exists());
}

#[test]
fn eval_on_missing_outputs_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, 1)), 0);
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&layerseg(&["eval", "--dataset", p(&data), "--fit", p(&empty)])), 3);
    assert_eq!(code(&layerseg(&["eval", "--dataset", p(&empty), "--fit", p(&empty)])), 3);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = layerseg(&["gradcheck", "--out", p(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(out["passed"], true);
    assert_eq!(out["mutation_detected"], true);
    assert!(tmp.path().join("config.json").exists());
}

#[test]
fn render_writes_one_image_and_rejects_mismatched_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let fit = tmp.path().join("fit");
    assert_eq!(code(&gen(&data, 1)), 0);
    write_gt_prediction(&data, &fit);
    let scene = data.join("scene_0000");
    let pred = fit.join("scene_0000");
    let out = tmp.path().join("render");
    assert_eq!(code(&layerseg(&["render", "--scene", p(&scene), "--fit", p(&pred), "--out", p(&out)])), 0);
    let pngs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert_eq!(pngs.len(), 1);
    assert!(out.join("config.json").exists());

    save_mask(&Mask::zeros(10, 10), pred.join("mask.png")).unwrap();
    let bad = tmp.path().join("bad");
    assert_eq!(code(&layerseg(&["render", "--scene", p(&scene), "--fit", p(&pred), "--out", p(&bad)])), 2);
}
