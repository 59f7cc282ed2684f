//! Train-time scene augmentations that respect how splats render.
//!
//! `rendering_equivalent` moves mostly-transparent splats along their own
//! principal axes so the rendered images barely change; `immature_manifold`
//! inflates a subset of covariances to mimic an earlier, blurrier stage of
//! scene optimization; `rigid_transform` is the exactly-equivariant baseline.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianScene};
use crate::synth::{normal_sample, rng_for};

const STREAM_EQUIVALENT: u64 = 0xa1;
const STREAM_IMMATURE: u64 = 0xa2;
const STREAM_JITTER: u64 = 0xa3;

/// Augmentation settings applied per scene per epoch during pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rendering_equivalent: bool,
    pub epsilon: f64,
    pub immature_manifold: bool,
    pub gamma: f64,
    pub rho: f64,
    /// Divide the opacity of inflated splats by `1 + gamma * mean(u)`.
    pub temper_opacity: bool,
    /// Isotropic point-cloud style center jitter (comparison baseline only).
    pub point_jitter: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rendering_equivalent: false,
            epsilon: 0.05,
            immature_manifold: false,
            gamma: 0.3,
            rho: 0.3,
            temper_opacity: true,
            point_jitter: None,
        }
    }
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        !self.rendering_equivalent && !self.immature_manifold && self.point_jitter.is_none()
    }

    /// Applies every enabled augmentation in a fixed order.
    pub fn apply(&self, scene: &GaussianScene, seed: u64) -> Result<GaussianScene> {
        let mut out = scene.clone();
        if self.rendering_equivalent {
            out = rendering_equivalent(&out, self.epsilon, seed)?;
        }
        if self.immature_manifold {
            out = immature_manifold(&out, self.gamma, self.rho, self.temper_opacity, seed)?;
        }
        if let Some(sigma) = self.point_jitter {
            out = point_jitter(&out, sigma, seed)?;
        }
        Ok(out)
    }
}

/// Perturbs each center by `R diag(s) eta`, `eta ~ N(0, (eps (1 - opacity))^2 I)`.
pub fn rendering_equivalent(
    scene: &GaussianScene,
    epsilon: f64,
    seed: u64,
) -> Result<GaussianScene> {
    if !(0.0..=0.5).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 0.5]")));
    }
    let mut out = scene.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_for(seed, STREAM_EQUIVALENT);
    for g in &mut out.gaussians {
        let eta = Vector3::new(
            normal_sample(&mut rng),
            normal_sample(&mut rng),
            normal_sample(&mut rng),
        );
        let sigma = epsilon * (1.0 - g.opacity);
        if sigma > 0.0 {
            g.center += g.rotation * g.scale.component_mul(&eta) * sigma;
        }
    }
    out.recompute_bounds();
    Ok(out)
}

/// Inflates the scales of a seeded `rho` fraction of splats by `1 + gamma u`, `u ~ U(0, 1]` per axis.
pub fn immature_manifold(
    scene: &GaussianScene,
    gamma: f64,
    rho: f64,
    temper_opacity: bool,
    seed: u64,
) -> Result<GaussianScene> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("gamma {gamma} must be positive")));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho {rho} outside (0, 1]")));
    }
    let mut rng = rng_for(seed, STREAM_IMMATURE);
    let mut order: Vec<usize> = (0..scene.len()).collect();
    order.shuffle(&mut rng);
    let count = (rho * scene.len() as f64).round() as usize;
    let mut chosen = order[..count.min(scene.len())].to_vec();
    chosen.sort_unstable();

    let mut out = scene.clone();
    for i in chosen {
        let g = &mut out.gaussians[i];
        let mut u = [0.0; 3];
        for v in &mut u {
            // redraw the measure-zero u = 0 so inflation is strict
            *v = loop {
                let x: f64 = rng.random();
                if x > 0.0 {
                    break x;
                }
            };
        }
        for (k, v) in u.iter().enumerate() {
            g.scale[k] *= 1.0 + gamma * v;
        }
        if temper_opacity {
            let mean_u = u.iter().sum::<f64>() / 3.0;
            g.opacity = (g.opacity / (1.0 + gamma * mean_u)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Rotation by `yaw` radians about +z followed by a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub yaw: f64,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            yaw: 0.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.yaw)
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation
    }

    /// The camera that sees the transformed scene exactly as `camera` saw the original.
    pub fn apply_camera(&self, camera: &Camera) -> Camera {
        let r: Matrix3<f64> = self.rotation().to_rotation_matrix().into_inner();
        let rotation = camera.rotation * r.transpose();
        let translation = camera.translation - rotation * self.translation;
        Camera::new(camera.intrinsics, rotation, translation)
    }
}

pub fn rigid_transform(scene: &GaussianScene, t: &RigidTransform) -> GaussianScene {
    let q = t.rotation();
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        g.center = q * g.center + t.translation;
        g.rotation = q * g.rotation;
        g.normal = g.normal.map(|n| q * n);
    }
    out.recompute_bounds();
    out
}

/// Isotropic Gaussian center jitter, the generic point-cloud augmentation.
pub fn point_jitter(scene: &GaussianScene, sigma: f64, seed: u64) -> Result<GaussianScene> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "jitter sigma {sigma} must be non-negative"
        )));
    }
    let mut rng = rng_for(seed, STREAM_JITTER);
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        for k in 0..3 {
            g.center[k] += sigma * normal_sample(&mut rng);
        }
    }
    out.recompute_bounds();
    Ok(out)
}
