//! Glue between the configuration tree and the algorithm modules: scene
//! loading, teacher rendering, standardizer fitting, uplifting and view
//! grouping, shared by the command-line front end and the test suites.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{CameraConfig, PipelineConfig, TeacherSpec};
use crate::distill::adapt::Adaptation;
use crate::distill::model::DistillModel;
use crate::distill::pretrain::TrainScene;
use crate::error::{Error, Result};
use crate::phis::PhisTransform;
use crate::ply::load_ply;
use crate::raster::Rasterizer;
use crate::scene::{Camera, GaussianScene, TeacherFeatureMap, TeacherId};
use crate::synth::{mix_seed, orbit_cameras, synth_scene, SceneLayout};
use crate::uplift::{uplift_all, TeacherViews, UpliftSession, UpliftedTargets};
use crate::viewplan::{pair_views, PlannedView, ViewPlan};

/// Per-teacher feature maps, one per view.
pub type TeacherMaps = BTreeMap<TeacherId, Vec<TeacherFeatureMap>>;

/// Loads a `.ply` scene or synthesizes one from a `.toml` layout.
pub fn load_scene(path: &Path, seed: u64) -> Result<GaussianScene> {
    let scene = match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => load_ply(path)?,
        _ => synth_scene(&SceneLayout::load(path)?, seed)?,
    };
    scene.validate()?;
    Ok(scene)
}

/// Seed of the `index`-th training scene of a config.
pub fn scene_seed(cfg: &PipelineConfig, index: usize) -> u64 {
    mix_seed(cfg.seed, 0x5ce0 + index as u64)
}

/// Seed of the held-out scene.
pub fn heldout_seed(cfg: &PipelineConfig) -> u64 {
    mix_seed(cfg.seed, 0x4e1d)
}

/// Seed for a scene path: its training index when listed, the held-out
/// or planning seed for those entries, the global seed otherwise.
pub fn seed_for_path(cfg: &PipelineConfig, path: &Path) -> u64 {
    if let Some(i) = cfg.scenes.train.iter().position(|p| p == path) {
        scene_seed(cfg, i)
    } else if cfg.scenes.heldout.as_deref() == Some(path) {
        heldout_seed(cfg)
    } else if cfg.scenes.rooms.as_deref() == Some(path) {
        mix_seed(cfg.seed, 0x2007)
    } else {
        cfg.seed
    }
}

/// Prototype rows of the language teacher for `classes` classes.
pub fn lang_prototypes(cfg: &PipelineConfig, classes: usize) -> Result<DMatrix<f64>> {
    Ok(cfg
        .teacher(TeacherId::Lang)?
        .synthetic(cfg.seed)
        .prototypes(classes))
}

/// Orbit cameras around the scene bounds.
pub fn orbit(scene: &GaussianScene, cams: &CameraConfig) -> Vec<Camera> {
    let c = scene.bounds.center();
    let d = scene.bounds.extent().max(1e-6);
    orbit_cameras(
        cams.intrinsics(),
        c,
        cams.radius_factor * d,
        c.z + cams.height_factor * d,
        cams.views,
    )
}

/// Renders every synthetic teacher from every camera at the teachers'
/// resolution. Prototypes depend only on `teacher_seed`, so they agree
/// across scenes; `view_seed` decorrelates per-view noise.
pub fn render_teacher_maps(
    rasterizer: &Rasterizer,
    scene: &GaussianScene,
    cameras: &[Camera],
    teachers: &[TeacherSpec],
    downsample: u32,
    teacher_seed: u64,
    view_seed: u64,
) -> Result<TeacherMaps> {
    let mut out = TeacherMaps::new();
    for spec in teachers {
        let teacher = spec.synthetic(teacher_seed);
        let maps = cameras
            .iter()
            .enumerate()
            .map(|(v, c)| {
                let cam = c.with_intrinsics(c.intrinsics.downsampled(downsample));
                teacher.render(rasterizer, scene, &cam, mix_seed(view_seed, v as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(spec.id, maps);
    }
    Ok(out)
}

/// Bytes needed to store `maps` as 32-bit floats.
pub fn feature_bytes(maps: &TeacherMaps) -> u64 {
    maps.values()
        .flatten()
        .map(|m| (m.height * m.width * m.dim * 4) as u64)
        .sum()
}

/// Storage and timing of the uplift stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpliftReport {
    pub scenes: usize,
    pub views: usize,
    pub map_height: usize,
    pub map_width: usize,
    pub teacher_dims: usize,
    /// Teacher feature maps that have to be precomputed and kept on disk.
    pub precomputed_feature_bytes: u64,
    pub seconds: f64,
}

/// Standardized uplift targets for every training scene.
pub struct PreparedData {
    pub scenes: Vec<TrainScene>,
    pub phis: BTreeMap<TeacherId, PhisTransform>,
    pub report: UpliftReport,
}

/// A training scene with its cameras, teacher maps and recorded weights.
pub struct SceneViews {
    pub id: String,
    pub scene: GaussianScene,
    pub cameras: Vec<Camera>,
    pub maps: TeacherMaps,
    pub session: UpliftSession,
}

/// Loads every training scene, renders its teachers and records its weights.
pub fn load_training_views(
    rasterizer: &Rasterizer,
    cfg: &PipelineConfig,
) -> Result<Vec<SceneViews>> {
    if cfg.scenes.train.is_empty() {
        return Err(Error::Config("scenes.train lists no scenes".into()));
    }
    cfg.scenes
        .train
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let scene = load_scene(path, scene_seed(cfg, i))?;
            let cameras = orbit(&scene, &cfg.cameras);
            let maps = render_teacher_maps(
                rasterizer,
                &scene,
                &cameras,
                &cfg.teachers,
                cfg.cameras.teacher_downsample,
                cfg.seed,
                scene_seed(cfg, i),
            )?;
            let session = UpliftSession::new(rasterizer, &scene, &cameras);
            Ok(SceneViews {
                id: scene_id(path, i),
                scene,
                cameras,
                maps,
                session,
            })
        })
        .collect()
}

/// File stem of a scene path, or a positional fallback.
pub fn scene_id(path: &Path, index: usize) -> String {
    path.file_stem().map_or_else(
        || format!("scene{index}"),
        |s| s.to_string_lossy().into_owned(),
    )
}

/// One standardizer per teacher, fit on well-covered pixels pooled over all scenes.
pub fn fit_standardizers(
    views: &[SceneViews],
    cfg: &PipelineConfig,
) -> Result<BTreeMap<TeacherId, PhisTransform>> {
    let per_scene = (cfg.uplift.phis_max_rows / views.len().max(1)).max(1);
    let mut out = BTreeMap::new();
    for t in &cfg.teachers {
        let pops: Vec<DMatrix<f64>> = views
            .iter()
            .map(|v| {
                v.session
                    .population(&v.maps[&t.id], cfg.uplift.phis_min_coverage, per_scene)
            })
            .collect::<Result<_>>()?;
        let rows: usize = pops.iter().map(|p| p.nrows()).sum();
        let mut all = DMatrix::zeros(rows, t.dim);
        let mut r = 0;
        for p in &pops {
            all.rows_mut(r, p.nrows()).copy_from(p);
            r += p.nrows();
        }
        out.insert(t.id, PhisTransform::fit(&all)?);
    }
    Ok(out)
}

/// Uplifts every scene's teachers through the given standardizers.
pub fn uplift_views(
    views: &[SceneViews],
    phis: &BTreeMap<TeacherId, PhisTransform>,
    cfg: &PipelineConfig,
) -> Result<(Vec<TrainScene>, UpliftReport)> {
    let mut scenes = Vec::with_capacity(views.len());
    let mut report = UpliftReport {
        scenes: views.len(),
        teacher_dims: cfg.teachers.iter().map(|t| t.dim).sum(),
        ..UpliftReport::default()
    };
    for v in views {
        let uplifted = cfg
            .teachers
            .iter()
            .map(|t| {
                let tv = TeacherViews {
                    teacher: t.id,
                    dim: t.dim,
                    maps: &v.maps[&t.id],
                    transform: phis.get(&t.id),
                };
                v.session.uplift(&tv, cfg.uplift.tau_w, cfg.uplift.order)
            })
            .collect::<Result<Vec<_>>>()?;
        report.views += v.cameras.len();
        report.precomputed_feature_bytes += feature_bytes(&v.maps);
        if let Some(m) = v.maps.values().next().and_then(|m| m.first()) {
            report.map_height = m.height;
            report.map_width = m.width;
        }
        scenes.push(TrainScene {
            id: v.id.clone(),
            scene: v.scene.clone(),
            targets: uplifted.into_iter().map(|u| (u.teacher, u)).collect(),
        });
    }
    Ok((scenes, report))
}

/// Loads scenes, renders teachers, fits one standardizer per teacher over
/// all training views and uplifts standardized targets.
pub fn prepare_training(rasterizer: &Rasterizer, cfg: &PipelineConfig) -> Result<PreparedData> {
    let start = Instant::now();
    let views = load_training_views(rasterizer, cfg)?;
    let phis = if cfg.uplift.standardize {
        fit_standardizers(&views, cfg)?
    } else {
        BTreeMap::new()
    };
    let (scenes, mut report) = uplift_views(&views, &phis, cfg)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(PreparedData {
        scenes,
        phis,
        report,
    })
}

/// Uplifts raw (unstandardized) teacher maps of `scene` as an independent
/// reference, without any standardizer.
pub fn reference_targets(
    rasterizer: &Rasterizer,
    scene: &GaussianScene,
    cameras: &[Camera],
    maps: &TeacherMaps,
    tau_w: f64,
) -> Result<BTreeMap<TeacherId, UpliftedTargets>> {
    let tv: Vec<TeacherViews<'_>> = maps
        .iter()
        .map(|(t, m)| TeacherViews {
            teacher: *t,
            dim: m.first().map_or(0, |x| x.dim),
            maps: m,
            transform: None,
        })
        .collect();
    Ok(
        uplift_all(rasterizer, scene, cameras, &tv, tau_w, Default::default())?
            .into_iter()
            .map(|u| (u.teacher, u))
            .collect(),
    )
}

/// A view plan over given cameras: pairs by visible-set overlap.
pub fn plan_for_cameras(
    rasterizer: &Rasterizer,
    scene: &GaussianScene,
    cameras: &[Camera],
    min_visible_weight: f64,
    min_overlap: f64,
    max_pairs_per_view: usize,
) -> Result<ViewPlan> {
    let intrinsics = cameras
        .first()
        .ok_or_else(|| Error::Config("no cameras to plan over".into()))?
        .intrinsics;
    let visible: Vec<Vec<usize>> = cameras
        .iter()
        .map(|c| {
            rasterizer
                .render(scene, c)
                .weights
                .visible(min_visible_weight)
        })
        .collect();
    let views = cameras
        .iter()
        .map(|c| {
            let (yaw, pitch) = c.yaw_pitch();
            PlannedView {
                position: c.position(),
                yaw_deg: yaw.to_degrees(),
                pitch_deg: pitch.to_degrees(),
            }
        })
        .collect();
    Ok(ViewPlan {
        intrinsics,
        views,
        pairs: pair_views(&visible, min_overlap, max_pairs_per_view),
    })
}

/// Teacher maps regrouped per view.
pub fn maps_per_view(maps: &TeacherMaps) -> Vec<BTreeMap<TeacherId, TeacherFeatureMap>> {
    let views = maps.values().map(Vec::len).max().unwrap_or(0);
    (0..views)
        .map(|v| {
            maps.iter()
                .filter_map(|(t, m)| m.get(v).map(|x| (*t, x.clone())))
                .collect()
        })
        .collect()
}

/// Everything needed to adapt a model to one scene: orbit cameras, teacher
/// maps produced on the fly and overlap-based view groups.
pub struct AdaptationSetup {
    pub cameras: Vec<Camera>,
    pub maps: TeacherMaps,
    pub plan: ViewPlan,
    pub adaptation: Adaptation,
}

pub fn adaptation_setup(
    rasterizer: &Rasterizer,
    model: &DistillModel,
    scene: &GaussianScene,
    cfg: &PipelineConfig,
    view_seed: u64,
) -> Result<AdaptationSetup> {
    let cameras = orbit(scene, &cfg.cameras);
    let maps = render_teacher_maps(
        rasterizer,
        scene,
        &cameras,
        &cfg.teachers,
        cfg.cameras.teacher_downsample,
        cfg.seed,
        view_seed,
    )?;
    let plan = plan_for_cameras(
        rasterizer,
        scene,
        &cameras,
        cfg.viewplan.min_visible_weight,
        cfg.viewplan.min_overlap,
        cfg.viewplan.max_pairs_per_view,
    )?;
    let groups = plan.groups(cfg.adapt.group_size);
    let adaptation = Adaptation::new(
        rasterizer,
        model,
        scene,
        &cameras,
        &maps_per_view(&maps),
        &groups,
        &cfg.adapt,
    )?;
    Ok(AdaptationSetup {
        cameras,
        maps,
        plan,
        adaptation,
    })
}

/// Per-Gaussian reference targets for an adaptation setup, mapped into the
/// model's standardized teacher space; rows without coverage stay zero.
pub fn standardized_reference(
    rasterizer: &Rasterizer,
    model: &DistillModel,
    scene: &GaussianScene,
    setup: &AdaptationSetup,
    tau_w: f64,
) -> Result<BTreeMap<TeacherId, UpliftedTargets>> {
    let mut refs = reference_targets(rasterizer, scene, &setup.cameras, &setup.maps, tau_w)?;
    for (t, r) in refs.iter_mut() {
        if let Some(x) = model.phis.get(t) {
            let mut f = x.apply_rows(&r.features)?;
            for (i, &m) in r.mask.iter().enumerate() {
                if !m {
                    f.row_mut(i).fill(0.0);
                }
            }
            r.features = f;
        }
    }
    Ok(refs)
}

/// Image loss obtained by rendering the standardized reference targets
/// instead of model predictions: the floor a perfect per-Gaussian fit reaches.
pub fn regression_baseline(
    rasterizer: &Rasterizer,
    model: &DistillModel,
    scene: &GaussianScene,
    setup: &AdaptationSetup,
    cfg: &PipelineConfig,
) -> Result<f64> {
    let refs = standardized_reference(rasterizer, model, scene, setup, cfg.uplift.tau_w)?;
    let teachers = &setup.adaptation.teachers;
    let features = refs
        .into_iter()
        .filter(|(t, _)| teachers.contains(t))
        .map(|(t, r)| (t, r.features))
        .collect();
    setup
        .adaptation
        .evaluate_features(&features, &cfg.adapt.losses)
}
