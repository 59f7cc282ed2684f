//! Finite-difference verification of every hand-written backward pass, plus
//! the inner-product identity between feature compositing and its adjoint.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::adapt::{group_loss, AdaptConfig, AdaptGroup, AdaptView};
use crate::distill::encoder::{Encoder, EncoderConfig, EncoderInput, InputMode};
use crate::distill::head::ProjectorHead;
use crate::distill::loss::{info_nce, loss_match, LossWeights};
use crate::distill::model::{DistillModel, ModelConfig, TeacherDim};
use crate::distill::nn::Parameters;
use crate::error::Result;
use crate::raster::{backproject_feature_grad, composite, FeatureImage, Rasterizer, RenderConfig};
use crate::scene::{Camera, Gaussian, GaussianScene, Intrinsics, TeacherFeatureMap, TeacherId};
use crate::synth::{mix_seed, rng_for, SyntheticTeacher};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub gradient_tolerance: f64,
    pub adjoint_tolerance: f64,
    /// Random instances per check.
    pub trials: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            gradient_tolerance: 1e-5,
            adjoint_tolerance: 1e-6,
            trials: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst error over all trials (relative gradient error, or relative
    /// inner-product mismatch for the adjoint check).
    pub error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// `||a - b|| / max(||a||, ||b||, tiny)`: errors are measured relative to the
/// gradient as a whole, so near-zero coordinates do not dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, classes: u32) -> GaussianScene {
    let gaussians = (0..n)
        .map(|_| {
            let mut g = Gaussian::isotropic(
                Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ),
                0.08 + 0.08 * rng.random::<f64>(),
                0.5 + 0.45 * rng.random::<f64>(),
                Vector3::new(rng.random(), rng.random(), rng.random()),
            );
            g.scale.x *= 1.0 + rng.random::<f64>();
            g
        })
        .collect();
    let semantic = (0..n).map(|i| i as u32 % classes).collect();
    let instance = (0..n).map(|i| i as u32 % (2 * classes)).collect();
    GaussianScene::new(gaussians).with_labels(Some(semantic), Some(instance))
}

fn small_encoder_config(mode: InputMode) -> EncoderConfig {
    EncoderConfig {
        input_mode: mode,
        hidden_widths: vec![8, 8, 8],
        out_dim: 8,
        neighborhood_k: 4,
        estimate_normals: true,
    }
}

struct Suite {
    cfg: GradcheckConfig,
    outcomes: Vec<CheckOutcome>,
}

impl Suite {
    fn record(&mut self, name: &str, errors: Vec<(f64, usize)>, tolerance: f64) {
        let error = errors.iter().map(|e| e.0).fold(0.0, f64::max);
        let coordinates = errors.iter().map(|e| e.1).sum();
        self.outcomes.push(CheckOutcome {
            name: name.to_string(),
            error,
            tolerance,
            coordinates,
            passed: error.is_finite() && error < tolerance,
        });
    }

    fn gradient(
        &mut self,
        name: &str,
        mut trial: impl FnMut(&mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)>,
    ) -> Result<()> {
        let mut errors = Vec::new();
        for t in 0..self.cfg.trials {
            let mut rng = rng_for(mix_seed(self.cfg.seed, t as u64), name.len() as u64);
            let (a, n) = trial(&mut rng)?;
            // A vanishing gradient would pass vacuously.
            let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = if norm > 1e-8 {
                relative_error(&a, &n)
            } else {
                f64::INFINITY
            };
            errors.push((err, a.len()));
        }
        self.record(name, errors, self.cfg.gradient_tolerance);
        Ok(())
    }
}

fn matrix_check(
    pred: &DMatrix<f64>,
    step: f64,
    analytic: &DMatrix<f64>,
    f: impl Fn(&DMatrix<f64>) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = pred.shape();
    let numeric = numeric_gradient(pred.as_slice(), step, |x| {
        f(&DMatrix::from_column_slice(r, c, x))
    });
    (analytic.as_slice().to_vec(), numeric)
}

fn params_check<P: Parameters + Clone>(
    model: &P,
    step: f64,
    analytic: Vec<f64>,
    f: impl Fn(&P) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut probe = model.clone();
    let numeric = numeric_gradient(&model.to_flat(), step, |x| {
        probe.set_flat(x);
        f(&probe)
    });
    (analytic, numeric)
}

/// Runs the whole suite. Instances stay within N <= 32 rows and d <= 16.
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut s = Suite {
        cfg: *cfg,
        outcomes: Vec::new(),
    };
    let h = cfg.step;
    let rasterizer = Rasterizer::new(RenderConfig::default());
    let intr = Intrinsics::from_fov(16, 16, 60.0);
    let camera = Camera::look_at(intr, Vector3::new(0.0, -2.2, 0.4), Vector3::zeros());

    // Compositing is linear, so <composite(F), G> = <F, adjoint(G)> exactly.
    let mut errors = Vec::new();
    for t in 0..cfg.trials {
        let mut rng = rng_for(mix_seed(cfg.seed, t as u64), 1);
        let scene = random_scene(&mut rng, 32, 3);
        let weights = rasterizer.render(&scene, &camera).weights;
        let f = random_matrix(&mut rng, 32, 16);
        let mut g = FeatureImage::zeros(weights.width, weights.height, 16);
        g.data
            .iter_mut()
            .for_each(|v| *v = rng.random::<f64>() * 2.0 - 1.0);
        let lhs: f64 = composite(&weights, &f)?
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| a * b)
            .sum();
        let rhs = f.dot(&backproject_feature_grad(&weights, &g)?);
        errors.push((
            (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0),
            f.len(),
        ));
    }
    s.record("feature_render_adjoint", errors, cfg.adjoint_tolerance);

    s.gradient("loss_match", |rng| {
        let pred = random_matrix(rng, 32, 16);
        let target = random_matrix(rng, 32, 16) * 1.5;
        let mask: Vec<bool> = (0..32).map(|i| i % 5 != 0).collect();
        let w = LossWeights {
            smooth_l1_beta: 0.5,
            ..LossWeights::default()
        };
        let out = loss_match(&pred, &target, &mask, &w);
        Ok(matrix_check(&pred, h, &out.grad, |p| {
            loss_match(p, &target, &mask, &w).value
        }))
    })?;

    for (name, groups) in [("info_nce_semantic", 4u32), ("info_nce_instance", 8u32)] {
        s.gradient(name, |rng| {
            let pred = random_matrix(rng, 32, 16);
            let labels: Vec<u32> = (0..32).map(|i| i as u32 % groups).collect();
            let mask: Vec<bool> = (0..32).map(|i| i % 7 != 3).collect();
            let seed = rng.random();
            let out = info_nce(&pred, &labels, &mask, 0.1, seed);
            Ok(matrix_check(&pred, h, &out.grad, |p| {
                info_nce(p, &labels, &mask, 0.1, seed).value
            }))
        })?;
    }

    for (name, mode) in [
        ("encoder_gs_full", InputMode::GsFull),
        ("encoder_pc_variant", InputMode::PcVariant),
    ] {
        s.gradient(name, |rng| {
            let ecfg = small_encoder_config(mode);
            let mut scene = random_scene(rng, 32, 3);
            if mode == InputMode::PcVariant {
                scene.gaussians.iter_mut().for_each(|g| g.normal = None);
            }
            let input = EncoderInput::build(&scene, &ecfg)?;
            let enc = Encoder::init(&ecfg, rng);
            let r = random_matrix(rng, 32, ecfg.out_dim);
            let (_, cache) = enc.forward(&input);
            let grad = enc.backward(&input, &cache, &r).to_flat();
            Ok(params_check(&enc, h, grad, |e| e.encode(&input).dot(&r)))
        })?;
    }

    s.gradient("projector_head", |rng| {
        let head = ProjectorHead::init(8, 12, 16, rng);
        let z = random_matrix(rng, 32, 8);
        let r = random_matrix(rng, 32, 16);
        let (_, cache) = head.forward(&z);
        let (g, dz) = head.backward(&cache, &r);
        let (mut a, mut n) = params_check(&head, h, g.to_flat(), |hd| hd.project(&z).dot(&r));
        let (a2, n2) = matrix_check(&z, h, &dz, |zz| head.project(zz).dot(&r));
        a.extend(a2);
        n.extend(n2);
        Ok((a, n))
    })?;

    s.gradient("adaptation_path", |rng| {
        let scene = random_scene(rng, 32, 3);
        let config = ModelConfig {
            encoder: small_encoder_config(InputMode::GsFull),
            head_hidden: 8,
            teachers: vec![
                TeacherDim {
                    teacher: TeacherId::Lang,
                    dim: 8,
                },
                TeacherDim {
                    teacher: TeacherId::Pe,
                    dim: 4,
                },
            ],
            init_seed: rng.random(),
        };
        let model = DistillModel::new(config)?;
        let cameras = [
            camera,
            Camera::look_at(intr, Vector3::new(1.6, -1.6, 0.6), Vector3::zeros()),
        ];
        let views: Vec<AdaptView> = cameras
            .iter()
            .enumerate()
            .map(|(v, c)| {
                let maps: BTreeMap<TeacherId, TeacherFeatureMap> =
                    [(TeacherId::Lang, 8), (TeacherId::Pe, 4)]
                        .into_iter()
                        .map(|(t, d)| {
                            Ok((
                                t,
                                SyntheticTeacher::new(t, d, 0.05, 9).render(
                                    &rasterizer,
                                    &scene,
                                    c,
                                    v as u64,
                                )?,
                            ))
                        })
                        .collect::<Result<_>>()?;
                AdaptView::prepare(&rasterizer, &scene, c, &maps, &model, 0.2)
            })
            .collect::<Result<_>>()?;
        let group = AdaptGroup::new(&model, &scene, &views, &[0, 1])?;
        let teachers = model.teachers();
        let losses = AdaptConfig::default().losses;
        let (_, grad) = group_loss(&model, &group, &views, &teachers, &losses)?;
        Ok(params_check(&model, h, grad.to_flat(), |m| {
            group_loss(m, &group, &views, &teachers, &losses).map_or(f64::NAN, |r| r.0)
        }))
    })?;

    Ok(s.outcomes)
}

/// Runs the suite and reports elapsed seconds alongside the outcomes.
pub fn run_timed(cfg: &GradcheckConfig) -> Result<(Vec<CheckOutcome>, f64)> {
    let start = Instant::now();
    let out = run_suite(cfg)?;
    Ok((out, start.elapsed().as_secs_f64()))
}
