//! Render-and-distill adaptation: per-Gaussian predictions are rendered into
//! feature images with the compositing weights and matched against teacher
//! feature maps on well-covered pixels; gradients flow back through the
//! adjoint of feature rendering.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::encoder::EncoderInput;
use super::loss::{loss_match, LossWeights};
use super::model::{DistillModel, ModelGrad};
use super::nn::Parameters;
use super::optim::{clip_norm, cosine_lr, Adam, OptimConfig};
use crate::error::{Error, Result};
use crate::raster::{
    backproject_feature_grad, composite, CompositeWeights, FeatureImage, Rasterizer,
};
use crate::scene::{Camera, GaussianScene, TeacherFeatureMap, TeacherId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub optim: OptimConfig,
    pub losses: LossWeights,
    /// Pixels whose accumulated alpha reaches this are supervised.
    pub omega_threshold: f64,
    /// Views per training group: an anchor plus its best-overlapping partners.
    pub group_size: usize,
    /// Feature maps are rendered at image resolution divided by this.
    pub feature_downsample: u32,
    pub freeze_heads: bool,
    /// Overrides the step count implied by `optim.epochs`.
    pub steps: Option<usize>,
    /// Teachers to adapt; empty means every head of the model.
    pub teachers: Vec<TeacherId>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            losses: LossWeights::default(),
            omega_threshold: 0.5,
            group_size: 4,
            feature_downsample: 4,
            freeze_heads: false,
            steps: None,
            teachers: Vec::new(),
        }
    }
}

/// One supervised view at feature resolution.
#[derive(Debug, Clone)]
pub struct AdaptView {
    pub camera: Camera,
    pub weights: CompositeWeights,
    /// Standardized teacher maps at the weights' resolution.
    pub targets: BTreeMap<TeacherId, TeacherFeatureMap>,
    pub omega: Vec<bool>,
    pub raster_seconds: f64,
}

impl AdaptView {
    /// Renders `camera` at feature resolution and prepares the teacher targets.
    pub fn prepare(
        rasterizer: &Rasterizer,
        scene: &GaussianScene,
        camera: &Camera,
        maps: &BTreeMap<TeacherId, TeacherFeatureMap>,
        model: &DistillModel,
        omega_threshold: f64,
    ) -> Result<Self> {
        let start = Instant::now();
        let weights = rasterizer.render(scene, camera).weights;
        let raster_seconds = start.elapsed().as_secs_f64();
        let mut targets = BTreeMap::new();
        for (t, map) in maps {
            if map.teacher != *t {
                return Err(Error::Config(format!(
                    "map for {t} carries teacher {}",
                    map.teacher
                )));
            }
            let map = map.resized(weights.height, weights.width);
            let map = match model.phis.get(t) {
                Some(x) => x.apply_map(&map)?,
                None => map,
            };
            targets.insert(*t, map);
        }
        let omega = (0..weights.num_pixels())
            .map(|p| weights.coverage(p) >= omega_threshold)
            .collect();
        Ok(Self {
            camera: *camera,
            weights,
            targets,
            omega,
            raster_seconds,
        })
    }

    pub fn omega_count(&self) -> usize {
        self.omega.iter().filter(|&&o| o).count()
    }
}

/// A view group ready for training: the cropped scene and view weights
/// remapped onto the crop.
#[derive(Debug, Clone)]
pub struct AdaptGroup {
    pub views: Vec<usize>,
    /// Crop indices into the full scene, sorted.
    pub crop: Vec<usize>,
    pub input: EncoderInput,
    pub weights: Vec<CompositeWeights>,
}

impl AdaptGroup {
    pub fn new(
        model: &DistillModel,
        scene: &GaussianScene,
        views: &[AdaptView],
        members: &[usize],
    ) -> Result<Self> {
        let mut seen = vec![false; scene.len()];
        for &v in members {
            for i in views[v].weights.visible(0.0) {
                seen[i] = true;
            }
        }
        let crop: Vec<usize> = seen
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect();
        let mut map = vec![None; scene.len()];
        for (j, &i) in crop.iter().enumerate() {
            map[i] = Some(j);
        }
        let input = model.input(&scene.subset(&crop))?;
        let weights = members
            .iter()
            .map(|&v| views[v].weights.remapped(&map, crop.len()))
            .collect();
        Ok(Self {
            views: members.to_vec(),
            crop,
            input,
            weights,
        })
    }
}

/// Image-space matching loss over the union of `omega` pixels of several
/// views, given per-Gaussian features for each teacher. Returns the loss of
/// each teacher and, per teacher, `dL/dfeatures`.
pub fn image_loss(
    weights: &[&CompositeWeights],
    views: &[&AdaptView],
    features: &BTreeMap<TeacherId, DMatrix<f64>>,
    losses: &LossWeights,
) -> Result<(BTreeMap<TeacherId, f64>, BTreeMap<TeacherId, DMatrix<f64>>)> {
    let mut values = BTreeMap::new();
    let mut grads = BTreeMap::new();
    for (t, f) in features {
        let dim = f.ncols();
        let mut rows: Vec<(usize, usize)> = Vec::new();
        let mut images = Vec::with_capacity(views.len());
        for (v, (w, view)) in weights.iter().zip(views).enumerate() {
            let target = view
                .targets
                .get(t)
                .ok_or_else(|| Error::Config(format!("view has no {t} teacher map")))?;
            if target.dim != dim {
                return Err(Error::shape(format!("{t} maps of dim {dim}"), target.dim));
            }
            images.push(composite(w, f)?);
            rows.extend(
                (0..w.num_pixels())
                    .filter(|&p| view.omega[p])
                    .map(|p| (v, p)),
            );
        }
        let pred = DMatrix::from_fn(rows.len(), dim, |r, k| {
            images[rows[r].0].pixel(rows[r].1)[k]
        });
        let target = DMatrix::from_fn(rows.len(), dim, |r, k| {
            views[rows[r].0].targets[t].data[rows[r].1 * dim + k]
        });
        let out = loss_match(&pred, &target, &vec![true; rows.len()], losses);
        let mut dfeat = DMatrix::zeros(f.nrows(), dim);
        for (v, w) in weights.iter().enumerate() {
            let mut g = FeatureImage::zeros(w.width, w.height, dim);
            for (r, &(rv, p)) in rows.iter().enumerate() {
                if rv == v {
                    for k in 0..dim {
                        g.pixel_mut(p)[k] = out.grad[(r, k)];
                    }
                }
            }
            dfeat += backproject_feature_grad(w, &g)?;
        }
        values.insert(*t, out.value);
        grads.insert(*t, dfeat);
    }
    Ok((values, grads))
}

/// Total image loss of the model on one group, and its parameter gradient.
pub fn group_loss(
    model: &DistillModel,
    group: &AdaptGroup,
    views: &[AdaptView],
    teachers: &[TeacherId],
    losses: &LossWeights,
) -> Result<(f64, ModelGrad)> {
    let fwd = model.forward(&group.input, teachers)?;
    let w: Vec<&CompositeWeights> = group.weights.iter().collect();
    let v: Vec<&AdaptView> = group.views.iter().map(|&i| &views[i]).collect();
    let (values, dpred) = image_loss(&w, &v, &fwd.predictions, losses)?;
    let grad = model.backward(&group.input, &fwd, &dpred);
    Ok((values.values().sum(), grad))
}

/// Resource and progress summary of an adaptation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub steps: usize,
    pub views: usize,
    pub groups: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of every step before its update.
    pub step_losses: Vec<f64>,
    pub raster_seconds_per_view: f64,
    /// Teacher features are produced online; nothing is precomputed on disk.
    pub precomputed_feature_bytes: u64,
}

/// Prepared adaptation problem for one scene.
pub struct Adaptation {
    pub views: Vec<AdaptView>,
    pub groups: Vec<AdaptGroup>,
    pub teachers: Vec<TeacherId>,
}

impl Adaptation {
    /// `maps[v]` holds the raw teacher maps of view `v`, at any resolution.
    /// `groups` lists view indices per group (see `ViewPlan::groups`).
    pub fn new(
        rasterizer: &Rasterizer,
        model: &DistillModel,
        scene: &GaussianScene,
        cameras: &[Camera],
        maps: &[BTreeMap<TeacherId, TeacherFeatureMap>],
        groups: &[Vec<usize>],
        cfg: &AdaptConfig,
    ) -> Result<Self> {
        if cameras.len() != maps.len() {
            return Err(Error::Config(format!(
                "{} cameras but {} teacher map sets",
                cameras.len(),
                maps.len()
            )));
        }
        if groups.is_empty() {
            return Err(Error::Config(
                "adaptation needs a non-empty view plan".into(),
            ));
        }
        let teachers = if cfg.teachers.is_empty() {
            model.teachers()
        } else {
            cfg.teachers.clone()
        };
        let views: Vec<AdaptView> = cameras
            .iter()
            .zip(maps)
            .map(|(c, m)| {
                let cam = c.with_intrinsics(c.intrinsics.downsampled(cfg.feature_downsample));
                let m: BTreeMap<_, _> = m
                    .iter()
                    .filter(|(t, _)| teachers.contains(t))
                    .map(|(t, x)| (*t, x.clone()))
                    .collect();
                AdaptView::prepare(rasterizer, scene, &cam, &m, model, cfg.omega_threshold)
            })
            .collect::<Result<_>>()?;
        if views.iter().all(|v| v.omega_count() == 0) {
            return Err(Error::Precondition(format!(
                "no pixel reaches accumulated alpha {} in any view",
                cfg.omega_threshold
            )));
        }
        let groups = groups
            .iter()
            .filter(|g| g.iter().any(|&v| views[v].omega_count() > 0))
            .map(|g| AdaptGroup::new(model, scene, &views, g))
            .collect::<Result<_>>()?;
        Ok(Self {
            views,
            groups,
            teachers,
        })
    }

    /// Mean group loss of the current model.
    pub fn evaluate(&self, model: &DistillModel, losses: &LossWeights) -> Result<f64> {
        let mut total = 0.0;
        for g in &self.groups {
            let fwd = model.forward(&g.input, &self.teachers)?;
            let w: Vec<&CompositeWeights> = g.weights.iter().collect();
            let v: Vec<&AdaptView> = g.views.iter().map(|&i| &self.views[i]).collect();
            total += image_loss(&w, &v, &fwd.predictions, losses)?
                .0
                .values()
                .sum::<f64>();
        }
        Ok(total / self.groups.len().max(1) as f64)
    }

    /// Loss of rendering fixed per-Gaussian features (rows in full-scene order).
    pub fn evaluate_features(
        &self,
        features: &BTreeMap<TeacherId, DMatrix<f64>>,
        losses: &LossWeights,
    ) -> Result<f64> {
        let mut total = 0.0;
        for g in &self.groups {
            let w: Vec<&CompositeWeights> =
                g.views.iter().map(|&i| &self.views[i].weights).collect();
            let v: Vec<&AdaptView> = g.views.iter().map(|&i| &self.views[i]).collect();
            total += image_loss(&w, &v, features, losses)?
                .0
                .values()
                .sum::<f64>();
        }
        Ok(total / self.groups.len().max(1) as f64)
    }

    /// Runs `steps` optimizer steps, cycling through the groups in order.
    pub fn run(
        &self,
        model: &mut DistillModel,
        cfg: &AdaptConfig,
        steps: usize,
    ) -> Result<AdaptReport> {
        let initial_loss = self.evaluate(model, &cfg.losses)?;
        let mut adam = Adam::new(&cfg.optim, model.num_parameters());
        let mut step_losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let g = &self.groups[step % self.groups.len()];
            let (loss, mut grad) = group_loss(model, g, &self.views, &self.teachers, &cfg.losses)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite adaptation loss at step {step}"
                )));
            }
            step_losses.push(loss);
            if cfg.freeze_heads {
                for h in grad.heads.values_mut() {
                    *h = h.zeros_like();
                }
            }
            let mut flat = grad.to_flat();
            if let Some(c) = cfg.optim.grad_clip {
                clip_norm(&mut flat, c);
            }
            let mut params = model.to_flat();
            adam.step(&mut params, &flat, cosine_lr(&cfg.optim, step, steps));
            model.set_flat(&params);
        }
        let final_loss = self.evaluate(model, &cfg.losses)?;
        let n = self.views.len().max(1) as f64;
        Ok(AdaptReport {
            steps,
            views: self.views.len(),
            groups: self.groups.len(),
            initial_loss,
            final_loss,
            step_losses,
            raster_seconds_per_view: self.views.iter().map(|v| v.raster_seconds).sum::<f64>() / n,
            precomputed_feature_bytes: 0,
        })
    }

    /// The configured step count, or the one implied by the epoch count.
    pub fn steps_for(&self, cfg: &AdaptConfig) -> usize {
        cfg.steps.unwrap_or(cfg.optim.epochs * self.groups.len())
    }
}
