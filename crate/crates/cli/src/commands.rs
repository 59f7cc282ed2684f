//! One method per subcommand. Each returns a JSON summary; artifacts go
//! under the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use gsdistill::config::PipelineConfig;
use gsdistill::distill::model::DistillModel;
use gsdistill::distill::nn::Parameters;
use gsdistill::distill::pretrain::{evaluate_matching, pretrain};
use gsdistill::eval::{
    instance_retrieval, linear_probe, mean_row_cosine, pca_colors, render_colors,
    zero_shot_segment, ConfusionMatrix, Metrics,
};
use gsdistill::gradcheck::{run_timed, GradcheckConfig};
use gsdistill::image::RgbImage;
use gsdistill::phis::column_variances;
use gsdistill::pipeline::{
    adaptation_setup, feature_bytes, fit_standardizers, heldout_seed, lang_prototypes, load_scene,
    load_training_views, orbit, prepare_training, reference_targets, regression_baseline,
    render_teacher_maps, scene_id, seed_for_path, uplift_views, UpliftReport,
};
use gsdistill::ply::save_ply;
use gsdistill::synth::mix_seed;
use gsdistill::viewplan::{coverage, plan_views};
use gsdistill::{Error, GaussianScene, Rasterizer, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::GlobalArgs;

#[derive(Debug, Clone, Args)]
pub struct SceneArg {
    /// Scene file (`.toml` layout or `.ply`); defaults per command.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelSceneArgs {
    /// Model checkpoint; defaults to the pretrained model in the output directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scene to evaluate; defaults to every training scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Scene to adapt to; defaults to the held-out scene.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Also probe a randomly initialized encoder for comparison.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Noise standard deviation; defaults to the configured fraction of the scene diagonal.
    #[arg(long)]
    pub sigma: Option<f64>,
}

pub struct Outcome {
    pub summary: Value,
    /// False when a checked property failed (exit code 5).
    pub passed: bool,
}

impl Outcome {
    fn ok(summary: Value) -> Result<Self> {
        Ok(Self {
            summary,
            passed: true,
        })
    }
}

/// Adaptation resource log, as written by `adapt` and read by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptLog {
    pub scene: String,
    pub views: usize,
    pub steps: usize,
    pub precomputed_feature_bytes: u64,
    pub raster_seconds_per_view: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of rendering the standardized reference uplift instead of predictions.
    pub regression_baseline: f64,
    /// Mean per-Gaussian cosine to the reference uplift, per teacher, in raw teacher space.
    pub cosine_before: BTreeMap<String, f64>,
    pub cosine_after: BTreeMap<String, f64>,
    pub step_losses: Vec<f64>,
    pub seconds: f64,
}

pub struct Context {
    cfg: PipelineConfig,
    rasterizer: Rasterizer,
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn metrics_json(m: &Metrics) -> Value {
    json!({
        "miou": m.miou,
        "macc": m.macc,
        "f_miou": m.f_miou,
        "f_macc": m.f_macc,
        "overall_accuracy": m.overall_accuracy,
    })
}

impl Context {
    pub fn new(args: &GlobalArgs) -> Result<Self> {
        let mut cfg = PipelineConfig::load(&args.config, &args.overrides)?;
        if let Some(o) = &args.out {
            cfg.output_dir = o.clone();
        }
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            rasterizer: Rasterizer::new(cfg.render.clone()),
            cfg,
            out,
        })
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn model_path(&self, arg: &Option<PathBuf>) -> PathBuf {
        arg.clone().unwrap_or_else(|| self.out.join("model.chmd"))
    }

    fn load_model(&self, arg: &Option<PathBuf>) -> Result<DistillModel> {
        DistillModel::load(&self.model_path(arg))
    }

    fn scene(&self, path: &Path) -> Result<GaussianScene> {
        load_scene(path, seed_for_path(&self.cfg, path))
    }

    fn required(
        &self,
        arg: &Option<PathBuf>,
        fallback: &Option<PathBuf>,
        key: &str,
    ) -> Result<PathBuf> {
        arg.clone()
            .or_else(|| fallback.clone())
            .ok_or_else(|| Error::Config(format!("no scene given and `{key}` is not configured")))
    }

    /// Scenes to evaluate: the explicit one, or every training scene.
    fn eval_scenes(&self, arg: &Option<PathBuf>) -> Result<Vec<(String, GaussianScene)>> {
        let paths = match arg {
            Some(p) => vec![p.clone()],
            None => self.cfg.scenes.train.clone(),
        };
        if paths.is_empty() {
            return Err(Error::Config("no scenes to evaluate".into()));
        }
        paths
            .iter()
            .enumerate()
            .map(|(i, p)| Ok((scene_id(p, i), self.scene(p)?)))
            .collect()
    }

    pub fn synth(&self) -> Result<Outcome> {
        let scenes_dir = self.dir("scenes")?;
        let mut entries = Vec::new();
        let mut total_bytes = 0;
        let mut listed: Vec<(PathBuf, bool)> = self
            .cfg
            .scenes
            .train
            .iter()
            .map(|p| (p.clone(), true))
            .collect();
        listed.extend(self.cfg.scenes.heldout.iter().map(|p| (p.clone(), true)));
        listed.extend(self.cfg.scenes.rooms.iter().map(|p| (p.clone(), false)));
        for (i, (path, with_maps)) in listed.iter().enumerate() {
            let id = scene_id(path, i);
            let scene = self.scene(path)?;
            save_ply(&scene, &scenes_dir.join(format!("{id}.ply")))?;
            let mut maps_written = 0;
            if *with_maps {
                let cameras = orbit(&scene, &self.cfg.cameras);
                let maps = render_teacher_maps(
                    &self.rasterizer,
                    &scene,
                    &cameras,
                    &self.cfg.teachers,
                    self.cfg.cameras.teacher_downsample,
                    self.cfg.seed,
                    seed_for_path(&self.cfg, path),
                )?;
                let dir = self.dir(&format!("maps/{id}"))?;
                for (t, views) in &maps {
                    for (v, m) in views.iter().enumerate() {
                        m.save(&dir.join(format!("{}_{v:03}.chfm", t.name())))?;
                        maps_written += 1;
                    }
                }
                total_bytes += feature_bytes(&maps);
            }
            entries.push(json!({"id": id, "gaussians": scene.len(), "classes": scene.num_classes(), "maps": maps_written}));
        }
        Outcome::ok(json!({"command": "synth", "scenes": entries, "feature_bytes": total_bytes}))
    }

    pub fn uplift(&self) -> Result<Outcome> {
        let start = Instant::now();
        let views = load_training_views(&self.rasterizer, &self.cfg)?;
        let phis = if self.cfg.uplift.standardize {
            fit_standardizers(&views, &self.cfg)?
        } else {
            BTreeMap::new()
        };
        let (scenes, mut report) = uplift_views(&views, &phis, &self.cfg)?;
        let maps_dir = self.dir("maps")?;
        let targets_dir = self.dir("targets")?;
        let mut written = 0u64;
        for v in &views {
            let dir = maps_dir.join(&v.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (t, maps) in &v.maps {
                for (i, m) in maps.iter().enumerate() {
                    let p = dir.join(format!("{}_{i:03}.chfm", t.name()));
                    m.save(&p)?;
                    written += fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
                }
            }
        }
        let mut masked = BTreeMap::new();
        for s in &scenes {
            for (t, tg) in &s.targets {
                tg.save(&targets_dir.join(format!("{}.{}.chuf", s.id, t.name())))?;
                *masked.entry(t.name()).or_insert(0usize) += tg.masked_count();
            }
        }
        let phis_dir = self.dir("phis")?;
        for (t, x) in &phis {
            x.save(&phis_dir.join(format!("{}.chps", t.name())))?;
        }
        report.seconds = start.elapsed().as_secs_f64();
        write_json(&self.out.join("uplift_report.json"), &report)?;
        Outcome::ok(json!({
            "command": "uplift",
            "scenes": report.scenes,
            "views": report.views,
            "map_height": report.map_height,
            "map_width": report.map_width,
            "teacher_dims": report.teacher_dims,
            "precomputed_feature_bytes": report.precomputed_feature_bytes,
            "bytes_on_disk": written,
            "masked_gaussians": masked,
            "seconds": report.seconds,
        }))
    }

    pub fn fit_phis(&self) -> Result<Outcome> {
        let views = load_training_views(&self.rasterizer, &self.cfg)?;
        let phis = fit_standardizers(&views, &self.cfg)?;
        let dir = self.dir("phis")?;
        let mut teachers = Vec::new();
        for (t, x) in &phis {
            x.save(&dir.join(format!("{}.chps", t.name())))?;
            let pop: Vec<DMatrix<f64>> = views
                .iter()
                .map(|v| {
                    v.session.population(
                        &v.maps[t],
                        self.cfg.uplift.phis_min_coverage,
                        self.cfg.uplift.phis_max_rows,
                    )
                })
                .collect::<Result<_>>()?;
            let rows: usize = pop.iter().map(|p| p.nrows()).sum();
            let mut all = DMatrix::zeros(rows, x.input_dim);
            let mut r = 0;
            for p in &pop {
                all.rows_mut(r, p.nrows()).copy_from(p);
                r += p.nrows();
            }
            let var = column_variances(&x.apply_rows(&all)?);
            let mean = var.iter().sum::<f64>() / var.len() as f64;
            let spread = var.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            teachers.push(json!({
                "teacher": t.name(),
                "input_dim": x.input_dim,
                "output_dim": x.output_dim(),
                "samples": rows,
                "mean_variance": mean,
                "max_variance_deviation": spread,
            }));
        }
        Outcome::ok(json!({"command": "fit-phis", "teachers": teachers}))
    }

    pub fn plan_views(&self, a: &SceneArg) -> Result<Outcome> {
        let path = self.required(&a.scene, &self.cfg.scenes.rooms, "scenes.rooms")?;
        let scene = self.scene(&path)?;
        let (plan, visible) = plan_views(
            &self.rasterizer,
            &scene,
            self.cfg.cameras.intrinsics(),
            &self.cfg.viewplan,
        )?;
        plan.save(&self.out.join("plan.txt"))?;
        let min_overlap = plan
            .pairs
            .iter()
            .map(|p| p.overlap)
            .fold(f64::INFINITY, f64::min);
        Outcome::ok(json!({
            "command": "plan-views",
            "scene": scene_id(&path, 0),
            "gaussians": scene.len(),
            "views": plan.views.len(),
            "pairs": plan.pairs.len(),
            "coverage": coverage(scene.len(), &visible),
            "min_pair_overlap": if plan.pairs.is_empty() { Value::Null } else { json!(min_overlap) },
        }))
    }

    pub fn augment_preview(&self, a: &SceneArg) -> Result<Outcome> {
        let path = self.required(
            &a.scene,
            &self.cfg.scenes.train.first().cloned(),
            "scenes.train",
        )?;
        let scene = self.scene(&path)?;
        let augmented = self
            .cfg
            .augment_preview
            .apply(&scene, mix_seed(self.cfg.seed, 0xa0))?;
        let dir = self.dir("augment")?;
        let mut views = Vec::new();
        for (v, cam) in orbit(&scene, &self.cfg.cameras).iter().enumerate() {
            let before = self.rasterizer.render(&scene, cam).color;
            let after = self.rasterizer.render(&augmented, cam).color;
            before.save_ppm(&dir.join(format!("view{v:03}_base.ppm")))?;
            after.save_ppm(&dir.join(format!("view{v:03}_augmented.ppm")))?;
            let psnr = before.psnr(&after);
            views.push(json!({
                "view": v,
                "psnr_db": if psnr.is_finite() { json!(psnr) } else { json!("inf") },
                "laplacian_energy_base": before.laplacian_energy(),
                "laplacian_energy_augmented": after.laplacian_energy(),
            }));
        }
        Outcome::ok(
            json!({"command": "augment-preview", "identity": self.cfg.augment_preview.is_identity(), "views": views}),
        )
    }

    pub fn pretrain(&self) -> Result<Outcome> {
        let start = Instant::now();
        let data = prepare_training(&self.rasterizer, &self.cfg)?;
        let mut model = DistillModel::new(self.cfg.model_config())?;
        model.phis = data.phis.clone();
        let history = pretrain(&mut model, &data.scenes, &self.cfg.pretrain)?;
        model.save(&self.out.join("model.chmd"))?;
        history.save_csv(&self.out.join("loss_history.csv"))?;
        let matching = evaluate_matching(&model, &data.scenes, &self.cfg.pretrain.losses)?;
        let initial = history.steps.first().copied().unwrap_or(f64::NAN);
        let last = history.epoch_totals().last().copied().unwrap_or(f64::NAN);
        Outcome::ok(json!({
            "command": "pretrain",
            "scenes": data.scenes.len(),
            "parameters": model.num_parameters(),
            "steps": history.steps.len(),
            "initial_loss": initial,
            "final_epoch_loss": last,
            "loss_ratio": last / initial,
            "final_matching": matching.iter().map(|(t, v)| (t.name(), *v)).collect::<BTreeMap<_, _>>(),
            "seconds": start.elapsed().as_secs_f64(),
        }))
    }

    pub fn adapt(&self, a: &AdaptArgs) -> Result<Outcome> {
        let start = Instant::now();
        let path = self.required(&a.scene, &self.cfg.scenes.heldout, "scenes.heldout")?;
        let scene = self.scene(&path)?;
        let mut model = self.load_model(&a.model)?;
        let setup = adaptation_setup(
            &self.rasterizer,
            &model,
            &scene,
            &self.cfg,
            heldout_seed(&self.cfg),
        )?;
        let baseline = regression_baseline(&self.rasterizer, &model, &scene, &setup, &self.cfg)?;
        let reference = reference_targets(
            &self.rasterizer,
            &scene,
            &setup.cameras,
            &setup.maps,
            self.cfg.uplift.tau_w,
        )?;
        let agreement = |m: &DistillModel| -> Result<BTreeMap<String, f64>> {
            setup
                .adaptation
                .teachers
                .iter()
                .map(|t| {
                    let r = &reference[t];
                    Ok((
                        t.name().to_string(),
                        mean_row_cosine(&m.predict_raw(&scene, *t)?, &r.features, &r.mask)?,
                    ))
                })
                .collect()
        };
        let cosine_before = agreement(&model)?;
        let steps = setup.adaptation.steps_for(&self.cfg.adapt);
        let report = setup.adaptation.run(&mut model, &self.cfg.adapt, steps)?;
        let cosine_after = agreement(&model)?;
        model.save(&self.out.join("adapted.chmd"))?;
        let log = AdaptLog {
            scene: scene_id(&path, 0),
            views: report.views,
            steps: report.steps,
            precomputed_feature_bytes: report.precomputed_feature_bytes,
            raster_seconds_per_view: report.raster_seconds_per_view,
            initial_loss: report.initial_loss,
            final_loss: report.final_loss,
            regression_baseline: baseline,
            cosine_before,
            cosine_after,
            step_losses: report.step_losses.clone(),
            seconds: start.elapsed().as_secs_f64(),
        };
        write_json(&self.out.join("adapt_report.json"), &log)?;
        Outcome::ok(json!({
            "command": "adapt",
            "scene": log.scene,
            "views": log.views,
            "groups": report.groups,
            "steps": log.steps,
            "initial_loss": log.initial_loss,
            "final_loss": log.final_loss,
            "loss_ratio": log.final_loss / log.initial_loss,
            "regression_baseline": log.regression_baseline,
            "cosine_before": log.cosine_before,
            "cosine_after": log.cosine_after,
            "precomputed_feature_bytes": log.precomputed_feature_bytes,
            "raster_seconds_per_view": log.raster_seconds_per_view,
            "seconds": log.seconds,
        }))
    }

    pub fn eval_zeroshot(&self, a: &ModelSceneArgs) -> Result<Outcome> {
        let model = self.load_model(&a.model)?;
        let scenes = self.eval_scenes(&a.scene)?;
        let classes = scenes
            .iter()
            .map(|(_, s)| s.num_classes())
            .max()
            .unwrap_or(0);
        let protos = lang_prototypes(&self.cfg, classes)?;
        let bg = &self.cfg.eval.background_classes;
        let mut pooled = ConfusionMatrix {
            counts: DMatrix::zeros(classes, classes),
        };
        let mut per_scene = Vec::new();
        for (id, s) in &scenes {
            let seg = zero_shot_segment(&model, s, &protos, bg, None)?;
            let truth = s.semantic_labels.as_deref().unwrap_or_default();
            pooled.counts += ConfusionMatrix::new(truth, &seg.predictions, classes, None)?.counts;
            per_scene
                .push(json!({"scene": id, "miou": seg.metrics.miou, "f_miou": seg.metrics.f_miou}));
        }
        let m = pooled.metrics(bg);
        fs::write(self.out.join("zeroshot_metrics.csv"), m.to_csv())
            .map_err(|e| Error::io(self.out.join("zeroshot_metrics.csv"), e))?;
        eprint!("{m}");
        let mut summary = metrics_json(&m);
        summary["command"] = json!("eval-zeroshot");
        summary["scenes"] = json!(per_scene);
        Outcome::ok(summary)
    }

    pub fn probe_linear(&self, a: &ProbeArgs) -> Result<Outcome> {
        let model = self.load_model(&a.model)?;
        let train = self.eval_scenes(&None)?;
        let test = match &self.cfg.scenes.heldout {
            Some(p) => vec![(scene_id(p, 0), self.scene(p)?)],
            None => train.clone(),
        };
        let classes = train
            .iter()
            .chain(&test)
            .map(|(_, s)| s.num_classes())
            .max()
            .unwrap_or(0);
        let bg = &self.cfg.eval.background_classes;
        let run = |m: &DistillModel| -> Result<Metrics> {
            let z: Vec<DMatrix<f64>> = train
                .iter()
                .map(|(_, s)| m.encode(s))
                .collect::<Result<_>>()?;
            let labels: Vec<&[u32]> = train
                .iter()
                .map(|(_, s)| s.semantic_labels.as_deref().unwrap_or_default())
                .collect();
            let probe = linear_probe(
                &z.iter().collect::<Vec<_>>(),
                &labels,
                classes,
                &self.cfg.eval.probe,
            )?;
            let mut cm = ConfusionMatrix {
                counts: DMatrix::zeros(classes, classes),
            };
            for (_, s) in &test {
                let pred = probe.predict(&m.encode(s)?);
                cm.counts += ConfusionMatrix::new(
                    s.semantic_labels.as_deref().unwrap_or_default(),
                    &pred,
                    classes,
                    None,
                )?
                .counts;
            }
            Ok(cm.metrics(bg))
        };
        let trained = run(&model)?;
        let mut summary = json!({"command": "probe-linear", "probe": metrics_json(&trained)});
        if a.baseline {
            let random = DistillModel::new(model.config.clone())?;
            let base = run(&random)?;
            summary["random_encoder"] = metrics_json(&base);
            summary["miou_gain"] = json!(trained.miou - base.miou);
        }
        Outcome::ok(summary)
    }

    pub fn pca(&self, a: &ModelSceneArgs) -> Result<Outcome> {
        let model = self.load_model(&a.model)?;
        let (id, scene) = self.eval_scenes(&a.scene)?.swap_remove(0);
        let z = model.encode(&scene)?;
        let (colors, rank) = pca_colors(&z)?;
        if rank < 3 {
            eprintln!("warning: encoder features have rank {rank} < 3; missing channels are gray");
        }
        let cams = orbit(&scene, &self.cfg.cameras);
        let cam = cams.get(self.cfg.eval.pca_view).ok_or_else(|| {
            Error::Config(format!(
                "eval.pca_view {} exceeds {} views",
                self.cfg.eval.pca_view,
                cams.len()
            ))
        })?;
        let image: RgbImage = render_colors(&self.rasterizer, &scene, cam, &colors)?;
        let path = self.out.join(format!("pca_{id}.ppm"));
        image.save_ppm(&path)?;
        Outcome::ok(
            json!({"command": "pca", "scene": id, "rank": rank, "image": path.display().to_string()}),
        )
    }

    pub fn retrieval(&self, a: &RetrievalArgs) -> Result<Outcome> {
        let model = self.load_model(&a.model)?;
        let mut results = Vec::new();
        for (id, scene) in self.eval_scenes(&a.scene)? {
            let sigma = a
                .sigma
                .unwrap_or(self.cfg.eval.retrieval_noise_fraction * scene.bounds.extent());
            let clean = instance_retrieval(&model, &scene, 0.0, self.cfg.seed)?;
            let noisy = instance_retrieval(&model, &scene, sigma, self.cfg.seed)?;
            results.push(json!({
                "scene": id,
                "instances": noisy.instances,
                "sigma": sigma,
                "r1_clean": clean.recall_at_1,
                "r1": noisy.recall_at_1,
                "same_class_at_incorrect": noisy.same_class_at_incorrect,
            }));
        }
        Outcome::ok(
            json!({"command": "retrieval", "input_mode": model.config.encoder.input_mode, "scenes": results}),
        )
    }

    pub fn gradcheck(&self) -> Result<Outcome> {
        let cfg = GradcheckConfig {
            seed: self.cfg.seed,
            ..GradcheckConfig::default()
        };
        let (outcomes, seconds) = run_timed(&cfg)?;
        for o in &outcomes {
            eprintln!(
                "{:<24} error {:.3e} (tol {:.0e}) {}",
                o.name,
                o.error,
                o.tolerance,
                if o.passed { "ok" } else { "FAILED" }
            );
        }
        let passed = outcomes.iter().all(|o| o.passed);
        Ok(Outcome {
            summary: json!({"command": "gradcheck", "passed": passed, "seconds": seconds, "checks": outcomes}),
            passed,
        })
    }

    pub fn render(&self, a: &SceneArg) -> Result<Outcome> {
        let path = self.required(
            &a.scene,
            &self.cfg.scenes.train.first().cloned(),
            "scenes.train",
        )?;
        let scene = self.scene(&path)?;
        let id = scene_id(&path, 0);
        let dir = self.dir(&format!("render/{id}"))?;
        let mut views = Vec::new();
        for (v, cam) in orbit(&scene, &self.cfg.cameras).iter().enumerate() {
            let start = Instant::now();
            let out = self.rasterizer.render(&scene, cam);
            let seconds = start.elapsed().as_secs_f64();
            out.color.save_ppm(&dir.join(format!("view{v:03}.ppm")))?;
            let w = &out.weights;
            let n = w.num_pixels().max(1) as f64;
            let mean_cov = (0..w.num_pixels()).map(|p| w.coverage(p)).sum::<f64>() / n;
            views.push(json!({
                "view": v,
                "visible": out.visible.len(),
                "weight_entries": w.num_entries(),
                "entries_per_pixel": w.num_entries() as f64 / n,
                "mean_coverage": mean_cov,
                "seconds": seconds,
            }));
        }
        Outcome::ok(
            json!({"command": "render", "scene": id, "gaussians": scene.len(), "views": views}),
        )
    }

    pub fn report(&self) -> Result<Outcome> {
        let uplift: UpliftReport = read_json(&self.out.join("uplift_report.json"))?;
        let adapt: AdaptLog = read_json(&self.out.join("adapt_report.json"))?;
        let uplift_per_view = uplift.seconds / uplift.views.max(1) as f64;
        let csv = format!(
            "stage,views,precomputed_feature_bytes,seconds_per_view\nuplift,{},{},{}\nadapt,{},{},{}\n",
            uplift.views,
            uplift.precomputed_feature_bytes,
            uplift_per_view,
            adapt.views,
            adapt.precomputed_feature_bytes,
            adapt.raster_seconds_per_view
        );
        let path = self.out.join("resources.csv");
        fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        eprintln!(
            "{:<8} {:>6} {:>14} {:>12}",
            "stage", "views", "feature bytes", "s / view"
        );
        eprintln!(
            "{:<8} {:>6} {:>14} {:>12.5}",
            "uplift", uplift.views, uplift.precomputed_feature_bytes, uplift_per_view
        );
        eprintln!(
            "{:<8} {:>6} {:>14} {:>12.5}",
            "adapt", adapt.views, adapt.precomputed_feature_bytes, adapt.raster_seconds_per_view
        );
        Outcome::ok(json!({
            "command": "report",
            "rows": [
                {"stage": "uplift", "views": uplift.views, "precomputed_feature_bytes": uplift.precomputed_feature_bytes, "seconds_per_view": uplift_per_view},
                {"stage": "adapt", "views": adapt.views, "precomputed_feature_bytes": adapt.precomputed_feature_bytes, "seconds_per_view": adapt.raster_seconds_per_view},
            ],
        }))
    }
}
