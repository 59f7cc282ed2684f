//! End-to-end acceptance suite. It runs without the test harness, so its
//! output is never captured: one `criterion N: PASS|FAIL` line per
//! criterion, and a non-zero exit status if any criterion failed.
//!
//! Property criteria run in-process against the brute-force references in
//! the core crate's shared test module; pipeline criteria drive the
//! `gsdistill` binary with the bundled acceptance configuration.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{nearby_cameras, oracle_render, random_scene, separated_blobs, triple_loop_uplift};
use gsdistill::config::PipelineConfig;
use gsdistill::phis::PhisTransform;
use gsdistill::synth::SyntheticTeacher;
use gsdistill::uplift::{TeacherViews, UpliftSession};
use gsdistill::{Rasterizer, RenderConfig, TeacherFeatureMap, TeacherId};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use tempfile::TempDir;

const TAU_W: f64 = 0.05;

fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/acceptance.toml")
        .canonicalize()
        .unwrap()
}

struct Run {
    summary: Value,
    code: i32,
    elapsed: Duration,
}

/// Runs one CLI command against the acceptance config, writing into `out`.
fn run(out: &Path, args: &[&str]) -> Run {
    let start = Instant::now();
    let output = Command::new(env!("CARGO_BIN_EXE_gsdistill"))
        .arg("-c")
        .arg(config_path())
        .arg("-o")
        .arg(out)
        .args(args)
        .output()
        .expect("gsdistill should start");
    let elapsed = start.elapsed();
    let stdout = String::from_utf8_lossy(&output.stdout);
    let summary = stdout
        .lines()
        .last()
        .and_then(|l| serde_json::from_str(l).ok())
        .unwrap_or_else(|| {
            panic!(
                "gsdistill {args:?} printed no summary; stderr:\n{}",
                String::from_utf8_lossy(&output.stderr)
            )
        });
    Run {
        summary,
        code: output.status.code().unwrap_or(-1),
        elapsed,
    }
}

fn num(v: &Value) -> f64 {
    v.as_f64()
        .unwrap_or_else(|| panic!("expected a number, got {v}"))
}

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn rasterizer_oracle() -> Verdict {
    let cfg = PipelineConfig::load(&config_path(), &[]).unwrap().render;
    let rast = Rasterizer::new(cfg.clone());
    let start = Instant::now();
    let (mut color_gap, mut weight_gap, mut sum_gap) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scene, camera) = random_scene(&mut rng, 256, 64);
        let tiled = rast.render(&scene, &camera);
        let oracle = oracle_render(&scene, &camera, &cfg);
        let w = &tiled.weights;
        for p in 0..w.num_pixels() {
            for k in 0..3 {
                color_gap = color_gap.max((tiled.color.data[p * 3 + k] - oracle.color[p][k]).abs());
            }
            let mut dense = vec![0.0; w.num_gaussians];
            for (i, x) in w.pixel(p) {
                dense[i] += x;
            }
            for &(i, x) in &oracle.weights[p] {
                dense[i] -= x;
            }
            weight_gap = dense.iter().fold(weight_gap, |m, d| m.max(d.abs()));
            sum_gap = sum_gap.max((w.coverage(p) + w.residual_transmittance[p] - 1.0).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        color_gap <= 1e-6 && weight_gap <= 1e-6 && sum_gap <= 1e-6 && secs < 30.0,
        format!("max color gap {color_gap:.2e}, weight gap {weight_gap:.2e}, |sum w + T - 1| {sum_gap:.2e}, {secs:.1} s"),
    )
}

fn gradient_suite(out: &Path) -> Verdict {
    let r = run(out, &["gradcheck"]);
    let secs = r.elapsed.as_secs_f64();
    let checks = r.summary["checks"].as_array().cloned().unwrap_or_default();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| c["passed"] != Value::Bool(true))
        .map(|c| c["name"].to_string())
        .collect();
    let worst = checks
        .iter()
        .map(|c| num(&c["error"]))
        .fold(0.0f64, f64::max);
    verdict(
        r.code == 0
            && r.summary["passed"] == Value::Bool(true)
            && !checks.is_empty()
            && secs < 60.0,
        format!(
            "{} checks, worst error {worst:.2e}, failed {failed:?}, {secs:.1} s",
            checks.len()
        ),
    )
}

fn uplift_correctness() -> Verdict {
    let exact = RenderConfig {
        transmittance_min: 1e-12,
        ..RenderConfig::default()
    };
    let rast = Rasterizer::new(exact.clone());
    let mut gap = 0.0f64;
    let mut mask_agrees = true;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (scene, cam) = random_scene(&mut rng, 64, 32);
        let cameras = nearby_cameras(&mut rng, &cam, 1 + seed as usize % 4);
        let dim = 5;
        let maps: Vec<TeacherFeatureMap> = cameras
            .iter()
            .map(|c| TeacherFeatureMap {
                teacher: TeacherId::Dino,
                height: c.height(),
                width: c.width(),
                dim,
                data: (0..c.height() * c.width() * dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            })
            .collect();
        let views = TeacherViews {
            teacher: TeacherId::Dino,
            dim,
            maps: &maps,
            transform: None,
        };
        let got = UpliftSession::new(&rast, &scene, &cameras)
            .uplift(&views, TAU_W, Default::default())
            .unwrap();
        let (sums, totals) = triple_loop_uplift(&scene, &cameras, &maps, &exact);
        for i in 0..scene.len() {
            gap = gap.max((got.total_weight[i] - totals[i]).abs());
            mask_agrees &= got.mask[i] == (totals[i] >= TAU_W);
            let expected = if totals[i] >= TAU_W {
                &sums[i] / totals[i]
            } else {
                DVector::zeros(dim)
            };
            for k in 0..dim {
                gap = gap.max((got.features[(i, k)] - expected[k]).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (scene, cameras) = separated_blobs(&mut rng);
    let teacher = SyntheticTeacher::new(TeacherId::Lang, 16, 0.0, 0);
    let maps: Vec<_> = cameras
        .iter()
        .enumerate()
        .map(|(v, c)| teacher.render(&rast, &scene, c, v as u64).unwrap())
        .collect();
    let views = TeacherViews {
        teacher: TeacherId::Lang,
        dim: 16,
        maps: &maps,
        transform: None,
    };
    let got = UpliftSession::new(&rast, &scene, &cameras)
        .uplift(&views, TAU_W, Default::default())
        .unwrap();
    let labels = scene.semantic_labels.as_ref().unwrap();
    let protos = teacher.prototypes(scene.num_classes());
    let worst = got
        .masked_indices()
        .into_iter()
        .map(|i| {
            let (f, p) = (got.features.row(i), protos.row(labels[i] as usize));
            f.dot(&p) / (f.norm() * p.norm())
        })
        .fold(1.0f64, f64::min);
    let covered = got.masked_count() == scene.len();
    verdict(
        gap <= 1e-6 && mask_agrees && covered && worst >= 0.999,
        format!(
            "oracle gap {gap:.2e}, masks agree {mask_agrees}, retained {}/{}, worst prototype cosine {worst:.6}",
            got.masked_count(),
            scene.len()
        ),
    )
}

fn phis_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut mean_dev, mut spread, mut ortho, mut round_trip) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for trial in 0..20 {
        let d = [2, 3, 8, 16, 33][trial % 5];
        let m = 400 + 50 * d;
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let stretch = DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| {
            rng.random_range(-3.0f64..3.0).exp()
        }));
        let shift = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
        let x = DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal))
            * a.transpose()
            * stretch
            + DMatrix::from_fn(m, d, |_, k| shift[k]);
        let t = PhisTransform::fit(&x).unwrap();
        let y = t.apply_rows(&x).unwrap();
        let var: Vec<f64> = y
            .column_iter()
            .map(|c| {
                let mu = c.sum() / m as f64;
                c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64
            })
            .collect();
        let mean = var.iter().sum::<f64>() / var.len() as f64;
        mean_dev = mean_dev.max((mean - 1.0).abs());
        spread = var.iter().fold(spread, |s, v| s.max((v - mean).abs()));
        let r = &t.rotation;
        ortho = ortho.max((r.transpose() * r - DMatrix::identity(r.ncols(), r.ncols())).amax());
        round_trip = round_trip.max((t.invert_rows(&y).unwrap() - &x).amax());
    }
    verdict(
        mean_dev <= 1e-4 && spread <= 1e-4 && ortho <= 1e-6 && round_trip <= 1e-6,
        format!(
            "|mean variance - 1| {mean_dev:.2e}, variance spread {spread:.2e}, orthogonality {ortho:.2e}, round trip {round_trip:.2e}"
        ),
    )
}

fn pretraining(out: &Path) -> Verdict {
    let train = run(out, &["pretrain"]);
    let eval = run(out, &["eval-zeroshot"]);
    let ratio = num(&train.summary["loss_ratio"]);
    let miou = num(&eval.summary["miou"]);
    let secs = (train.elapsed + eval.elapsed).as_secs_f64();
    verdict(
        train.code == 0
            && eval.code == 0
            && num(&train.summary["steps"]) >= 200.0
            && ratio <= 0.1
            && miou >= 0.95
            && secs < 300.0,
        format!(
            "{} steps, final/initial loss {ratio:.4}, zero-shot mIoU {miou:.4}, {secs:.1} s",
            train.summary["steps"]
        ),
    )
}

fn staged_teacher(root: &Path) -> Verdict {
    let schedule = |pe_start| {
        format!("pretrain.schedule=[{{teacher=\"lang\"}},{{teacher=\"dino\"}},{{teacher=\"pe\",start_epoch={pe_start}}}]")
    };
    let cfg = PipelineConfig::load(&config_path(), &[]).unwrap();
    let half = cfg.pretrain.optim.epochs / 2;
    let mut deltas = Vec::new();
    for seed in 0..5u64 {
        let mut miou = [0.0; 2];
        for (slot, start) in [half, 0].into_iter().enumerate() {
            let out = root.join(format!("seed{seed}_pe{start}"));
            let seeds = [
                format!("seed={seed}"),
                format!("model.init_seed={seed}"),
                format!("pretrain.seed={seed}"),
            ];
            let mut args = vec!["pretrain".to_string()];
            for s in seeds.iter().chain([schedule(start)].iter()) {
                args.push("--set".into());
                args.push(s.clone());
            }
            let args: Vec<&str> = args.iter().map(String::as_str).collect();
            assert_eq!(run(&out, &args).code, 0, "pretraining seed {seed} failed");
            let mut eval = vec!["eval-zeroshot"];
            eval.extend_from_slice(&args[1..]);
            miou[slot] = num(&run(&out, &eval).summary["miou"]);
        }
        deltas.push(miou[0] - miou[1]);
    }
    let wins = deltas.iter().filter(|&&d| d >= 0.0).count();
    let listed: Vec<String> = deltas.iter().map(|d| format!("{d:+.5}")).collect();
    verdict(
        wins >= 3,
        format!(
            "PE from epoch {half} minus from epoch 0, per seed: [{}]; {wins}/5 seeds not worse",
            listed.join(", ")
        ),
    )
}

/// Trailing moving average over full windows.
fn smoothed(xs: &[f64], window: usize) -> Vec<f64> {
    xs.windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

fn adaptation(out: &Path) -> Verdict {
    let model = out.join("model.chmd");
    let r = run(out, &["adapt", "--model", model.to_str().unwrap()]);
    let report: Value =
        serde_json::from_slice(&std::fs::read(out.join("adapt_report.json")).unwrap()).unwrap();
    let losses: Vec<f64> = report["step_losses"]
        .as_array()
        .unwrap()
        .iter()
        .map(num)
        .collect();
    let curve = smoothed(&losses, 20);
    let upticks = curve.windows(2).filter(|w| w[1] > w[0]).count();
    let ratio = num(&r.summary["loss_ratio"]);
    let cosine = num(&r.summary["cosine_after"]["lang"]);
    let secs = r.elapsed.as_secs_f64();
    verdict(
        r.code == 0 && losses.len() == 300 && upticks == 0 && ratio <= 0.2 && cosine >= 0.9 && secs < 300.0,
        format!(
            "{} steps, final/initial loss {ratio:.4}, smoothed upticks {upticks}, lang cosine {:.4} -> {cosine:.4}, {secs:.1} s",
            losses.len(),
            num(&r.summary["cosine_before"]["lang"])
        ),
    )
}

fn augmentation(root: &Path) -> Verdict {
    let views = ["--set", "cameras.views=4"];
    let mut equivalent = vec![
        "augment-preview",
        "--set",
        "augment_preview.rendering_equivalent=true",
    ];
    equivalent.extend_from_slice(&["--set", "augment_preview.epsilon=0.1"]);
    equivalent.extend_from_slice(&views);
    let mut immature = vec![
        "augment-preview",
        "--set",
        "augment_preview.immature_manifold=true",
    ];
    immature.extend_from_slice(&["--set", "augment_preview.gamma=0.5"]);
    immature.extend_from_slice(&views);

    let a = run(&root.join("equivalent"), &equivalent);
    let psnr: Vec<f64> = a.summary["views"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["psnr_db"].as_f64().unwrap_or(f64::INFINITY))
        .collect();
    let b = run(&root.join("immature"), &immature);
    let energies: Vec<(f64, f64)> = b.summary["views"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| {
            (
                num(&v["laplacian_energy_base"]),
                num(&v["laplacian_energy_augmented"]),
            )
        })
        .collect();
    let min_psnr = psnr.iter().copied().fold(f64::INFINITY, f64::min);
    let reduced = energies
        .iter()
        .filter(|(before, after)| after < before)
        .count();
    verdict(
        a.code == 0 && b.code == 0 && psnr.len() == 4 && min_psnr >= 30.0 && energies.len() == 4 && reduced == 4,
        format!("min PSNR {min_psnr:.1} dB over {} views, high-frequency energy reduced on {reduced}/{} views", psnr.len(), energies.len()),
    )
}

fn view_planner(root: &Path) -> Verdict {
    let (first, second) = (root.join("plan1"), root.join("plan2"));
    let a = run(&first, &["plan-views"]);
    let b = run(&second, &["plan-views"]);
    let identical = std::fs::read(first.join("plan.txt")).unwrap()
        == std::fs::read(second.join("plan.txt")).unwrap();
    let coverage = num(&a.summary["coverage"]);
    let overlap = num(&a.summary["min_pair_overlap"]);
    let cfg = PipelineConfig::load(&config_path(), &[]).unwrap();
    verdict(
        a.code == 0 && b.code == 0 && coverage == 1.0 && overlap >= cfg.viewplan.min_overlap && identical,
        format!(
            "{} views, {} pairs, coverage {coverage}, min pair overlap {overlap:.4} (minimum {}), bitwise identical {identical}",
            a.summary["views"], a.summary["pairs"], cfg.viewplan.min_overlap
        ),
    )
}

fn precomputed_bytes(out: &Path, overrides: &[&str]) -> (bool, f64, f64) {
    let with = |cmd: &'static str| [&[cmd][..], overrides].concat();
    assert_eq!(run(out, &with("synth")).code, 0);
    let u = run(out, &with("uplift"));
    let s = &u.summary;
    let dims = num(&s["teacher_dims"]);
    let expected = num(&s["views"]) * num(&s["map_height"]) * num(&s["map_width"]) * dims * 4.0;
    (u.code == 0, num(&s["precomputed_feature_bytes"]), expected)
}

fn resource_accounting(out: &Path, root: &Path) -> Verdict {
    let cfg = PipelineConfig::load(&config_path(), &[]).unwrap();
    let half = format!("cameras.views={}", cfg.cameras.views / 2);
    let (ok_full, bytes, expected) = precomputed_bytes(out, &[]);
    let (ok_half, half_bytes, _) = precomputed_bytes(&root.join("fewer_views"), &["--set", &half]);
    let report = run(out, &["report"]);
    let rows = report.summary["rows"]
        .as_array()
        .cloned()
        .unwrap_or_default();
    let stage = |name: &str| rows.iter().find(|r| r["stage"] == name).cloned();
    let (uplift, adapt) = (stage("uplift"), stage("adapt"));
    let adapt_zero = adapt
        .as_ref()
        .is_some_and(|r| num(&r["precomputed_feature_bytes"]) == 0.0);
    let adapt_timed = adapt
        .as_ref()
        .is_some_and(|r| num(&r["seconds_per_view"]) > 0.0);
    verdict(
        ok_full && ok_half && report.code == 0 && bytes == expected && half_bytes == bytes / 2.0 && uplift.is_some() && adapt_zero && adapt_timed,
        format!(
            "uplift {bytes} bytes (views x H x W x sum d x 4 = {expected}), {half_bytes} with half the views; adapt {} bytes, {:.2e} s/view",
            adapt.as_ref().map_or(Value::Null, |r| r["precomputed_feature_bytes"].clone()),
            adapt.as_ref().map_or(f64::NAN, |r| num(&r["seconds_per_view"])),
        ),
    )
}

fn retrieval(root: &Path) -> Verdict {
    let out = root.join("pc_variant");
    let variant = ["--set", "model.encoder.input_mode=pc_variant"];
    let mut pretrain = vec!["pretrain"];
    pretrain.extend_from_slice(&variant);
    assert_eq!(run(&out, &pretrain).code, 0);
    let mut args = vec!["retrieval"];
    args.extend_from_slice(&variant);
    let r = run(&out, &args);
    let scenes = r.summary["scenes"].as_array().cloned().unwrap_or_default();
    let clean = scenes
        .iter()
        .map(|s| num(&s["r1_clean"]))
        .fold(1.0f64, f64::min);
    let noisy = scenes.iter().map(|s| num(&s["r1"])).fold(1.0f64, f64::min);
    verdict(
        r.code == 0 && !scenes.is_empty() && clean == 1.0 && noisy >= 0.8,
        format!(
            "{} scenes, worst R@1 {clean:.3} at sigma 0, {noisy:.3} at 0.02 x extent",
            scenes.len()
        ),
    )
}

fn main() {
    let root = TempDir::new().unwrap();
    let main = root.path().join("main");

    let mut results = Vec::new();
    let mut record = |n: usize, v: Verdict| {
        println!(
            "criterion {n}: {} - {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, v.passed));
    };
    record(1, rasterizer_oracle());
    record(2, gradient_suite(&main));
    record(3, uplift_correctness());
    record(4, phis_properties());
    record(5, pretraining(&main));
    record(6, staged_teacher(root.path()));
    record(7, adaptation(&main));
    record(8, augmentation(root.path()));
    record(9, view_planner(root.path()));
    record(10, resource_accounting(&main, root.path()));
    record(11, retrieval(root.path()));

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    drop(root);
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
