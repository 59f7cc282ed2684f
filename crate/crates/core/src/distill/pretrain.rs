//! Uplift-supervised multi-teacher pretraining.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::EncoderInput;
use super::loss::{info_nce, loss_match, ContrastiveKind, LossWeights};
use super::model::{DistillModel, ModelGrad};
use super::nn::Parameters;
use super::optim::{clip_norm, cosine_lr, Adam, OptimConfig};
use super::schedule::{loss_total, TeacherLoss, TeacherSchedule};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::scene::{GaussianScene, TeacherId};
use crate::synth::{mix_seed, rng_for};
use crate::uplift::UpliftedTargets;

/// One pretraining scene with its standardized per-teacher targets.
#[derive(Debug, Clone)]
pub struct TrainScene {
    pub id: String,
    pub scene: GaussianScene,
    pub targets: BTreeMap<TeacherId, UpliftedTargets>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub losses: LossWeights,
    pub schedule: TeacherSchedule,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Shuffle scene order every epoch (seeded).
    pub shuffle: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                lr: 3e-3,
                epochs: 100,
                ..OptimConfig::default()
            },
            losses: LossWeights::default(),
            schedule: TeacherSchedule::all_from_start(),
            augment: AugmentConfig::default(),
            seed: 0,
            shuffle: false,
        }
    }
}

/// One row of the loss history: a teacher's epoch means, or the epoch total
/// when `teacher` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub teacher: Option<TeacherId>,
    pub matching: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
    /// Total loss of every optimizer step, before that step's update.
    pub steps: Vec<f64>,
}

impl LossHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,teacher,match,contrastive,total\n");
        for r in &self.records {
            let name = r.teacher.map_or("total", |t| t.name());
            let _ = writeln!(
                s,
                "{},{name},{},{},{}",
                r.epoch, r.matching, r.contrastive, r.total
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn teacher_epochs(&self, teacher: TeacherId) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.teacher == Some(teacher))
            .map(|r| r.epoch)
            .collect()
    }

    pub fn epoch_totals(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.teacher.is_none())
            .map(|r| r.total)
            .collect()
    }
}

/// Loss of one scene under the given active teachers, with parameter gradients.
pub struct SceneLoss {
    pub total: f64,
    pub per_teacher: BTreeMap<TeacherId, TeacherLoss>,
    pub grad: ModelGrad,
}

fn contrastive_labels(scene: &GaussianScene, kind: ContrastiveKind) -> Option<&[u32]> {
    match kind {
        ContrastiveKind::None => None,
        ContrastiveKind::Semantic => scene.semantic_labels.as_deref(),
        ContrastiveKind::Instance => scene.instance_labels.as_deref(),
    }
}

/// The staged objective at one epoch.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub schedule: &'a TeacherSchedule,
    pub weights: &'a LossWeights,
    pub epoch: usize,
    /// Seeds the contrastive half-splits.
    pub seed: u64,
}

/// Evaluates the objective on one scene.
pub fn scene_loss(
    model: &DistillModel,
    input: &EncoderInput,
    scene: &GaussianScene,
    targets: &BTreeMap<TeacherId, UpliftedTargets>,
    objective: &Objective<'_>,
) -> Result<SceneLoss> {
    let Objective {
        schedule,
        weights,
        epoch,
        seed,
    } = *objective;
    let active: Vec<TeacherId> = schedule
        .active(epoch)
        .into_iter()
        .filter(|t| targets.contains_key(t))
        .collect();
    let fwd = model.forward(input, &active)?;
    let mut per_teacher = BTreeMap::new();
    let mut dpred = BTreeMap::new();
    for &t in &active {
        let entry = schedule.entry(t).expect("active teachers are scheduled");
        let target = &targets[&t];
        let pred = &fwd.predictions[&t];
        if target.features.shape() != pred.shape() {
            return Err(Error::shape(
                format!("{t} targets {}x{}", pred.nrows(), pred.ncols()),
                format!("{}x{}", target.features.nrows(), target.features.ncols()),
            ));
        }
        let m = loss_match(pred, &target.features, &target.mask, weights);
        let mut grad = m.grad * entry.weight;
        let mut con = 0.0;
        if entry.contrastive_weight > 0.0 {
            if let Some(labels) = contrastive_labels(scene, entry.contrastive_kind()) {
                let c = info_nce(
                    pred,
                    labels,
                    &target.mask,
                    weights.temperature,
                    mix_seed(seed, t.as_u8() as u64),
                );
                con = c.value;
                grad += c.grad * (entry.weight * entry.contrastive_weight);
            }
        }
        per_teacher.insert(
            t,
            TeacherLoss {
                matching: m.value,
                contrastive: con,
            },
        );
        dpred.insert(t, grad);
    }
    let total = loss_total(epoch, &per_teacher, schedule);
    let grad = model.backward(input, &fwd, &dpred);
    Ok(SceneLoss {
        total,
        per_teacher,
        grad,
    })
}

fn check_finite(v: f64, epoch: usize, scene: &str, teacher: Option<TeacherId>) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let who = teacher.map_or("total".to_string(), |t| t.to_string());
    Err(Error::Numerical(format!(
        "non-finite loss at epoch {epoch}, scene '{scene}', teacher {who}"
    )))
}

/// Trains `model` on `data`; returns the per-epoch, per-teacher loss history.
pub fn pretrain(
    model: &mut DistillModel,
    data: &[TrainScene],
    cfg: &PretrainConfig,
) -> Result<LossHistory> {
    cfg.schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Config("pretraining needs at least one scene".into()));
    }
    for s in data {
        for (t, tg) in &s.targets {
            if tg.len() != s.scene.len() {
                return Err(Error::shape(
                    format!("{} {t} targets for '{}'", s.scene.len(), s.id),
                    tg.len(),
                ));
            }
        }
    }
    let batch = cfg.optim.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(batch);
    let total_steps = cfg.optim.epochs * steps_per_epoch;
    let mut adam = Adam::new(&cfg.optim, model.num_parameters());
    let mut history = LossHistory::default();
    let static_inputs: Option<Vec<EncoderInput>> = if cfg.augment.is_identity() {
        Some(
            data.iter()
                .map(|s| model.input(&s.scene))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let mut step = 0;
    for epoch in 0..cfg.optim.epochs {
        let epoch_seed = mix_seed(cfg.seed, epoch as u64);
        let augmented: Vec<EncoderInput>;
        let inputs: &[EncoderInput] = match &static_inputs {
            Some(v) => v,
            None => {
                augmented = data
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let aug = cfg
                            .augment
                            .apply(&s.scene, mix_seed(epoch_seed, i as u64))?;
                        model.input(&aug)
                    })
                    .collect::<Result<_>>()?;
                &augmented
            }
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut rng_for(epoch_seed, 0x5f));
        }

        let mut sums: BTreeMap<TeacherId, TeacherLoss> = BTreeMap::new();
        let mut total_sum = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<SceneLoss> = chunk
                .par_iter()
                .map(|&i| {
                    let objective = Objective {
                        schedule: &cfg.schedule,
                        weights: &cfg.losses,
                        epoch,
                        seed: mix_seed(epoch_seed, i as u64),
                    };
                    scene_loss(
                        model,
                        &inputs[i],
                        &data[i].scene,
                        &data[i].targets,
                        &objective,
                    )
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; model.num_parameters()];
            let mut step_total = 0.0;
            for (&i, r) in chunk.iter().zip(&results) {
                for (t, l) in &r.per_teacher {
                    check_finite(l.matching + l.contrastive, epoch, &data[i].id, Some(*t))?;
                    let e = sums.entry(*t).or_default();
                    e.matching += l.matching;
                    e.contrastive += l.contrastive;
                }
                check_finite(r.total, epoch, &data[i].id, None)?;
                step_total += r.total;
                for (g, v) in grad.iter_mut().zip(r.grad.to_flat()) {
                    *g += v;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if let Some(c) = cfg.optim.grad_clip {
                clip_norm(&mut grad, c);
            }
            total_sum += step_total;
            history.steps.push(step_total * inv);
            let mut params = model.to_flat();
            adam.step(&mut params, &grad, cosine_lr(&cfg.optim, step, total_steps));
            model.set_flat(&params);
            step += 1;
        }

        let n = data.len() as f64;
        for (t, l) in &sums {
            let e = cfg.schedule.entry(*t).expect("scheduled");
            let (m, c) = (l.matching / n, l.contrastive / n);
            history.records.push(LossRecord {
                epoch,
                teacher: Some(*t),
                matching: m,
                contrastive: c,
                total: e.weight * (m + e.contrastive_weight * c),
            });
        }
        history.records.push(LossRecord {
            epoch,
            teacher: None,
            matching: sums.values().map(|l| l.matching).sum::<f64>() / n,
            contrastive: sums.values().map(|l| l.contrastive).sum::<f64>() / n,
            total: total_sum / n,
        });
    }
    Ok(history)
}

/// Mean matching loss of `model` on `data` for every teacher with targets,
/// without contrastive terms.
pub fn evaluate_matching(
    model: &DistillModel,
    data: &[TrainScene],
    weights: &LossWeights,
) -> Result<BTreeMap<TeacherId, f64>> {
    let mut out: BTreeMap<TeacherId, f64> = BTreeMap::new();
    for s in data {
        let z = model.encode(&s.scene)?;
        for (t, tg) in &s.targets {
            let p: DMatrix<f64> = model.head(*t)?.project(&z);
            *out.entry(*t).or_default() +=
                loss_match(&p, &tg.features, &tg.mask, weights).value / data.len() as f64;
        }
    }
    Ok(out)
}
