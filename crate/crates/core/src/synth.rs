//! Seeded synthetic scenes and prototype teachers.
//!
//! A layout lists labeled primitives (boxes, spheres, axis-aligned quads);
//! each is covered with flat surface-aligned Gaussians. A synthetic teacher
//! renders one prototype vector per label through the scene's compositing
//! weights, standing in for a 2D foundation model.

use std::path::Path;

use nalgebra::{DMatrix, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rasterizer;
use crate::scene::{Camera, Gaussian, GaussianScene, Intrinsics, TeacherFeatureMap, TeacherId};

/// SplitMix64 finalizer, used to derive independent RNG streams from a seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Box,
    Sphere,
    Quad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

fn default_opacity() -> [f64; 2] {
    [0.6, 1.0]
}

fn default_axis() -> Axis {
    Axis::Z
}

/// One labeled primitive. `size` is the full box extent, the sphere radius
/// in its first component, or the quad extent (the normal-axis component is ignored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub count: usize,
    pub class: u32,
    pub instance: u32,
    pub color: [f64; 3],
    #[serde(default = "default_opacity")]
    pub opacity: [f64; 2],
    /// Boxes only: skip the bottom face.
    #[serde(default)]
    pub open_bottom: bool,
    /// Quads only: the face normal axis.
    #[serde(default = "default_axis")]
    pub normal: Axis,
}

fn default_jitter() -> f64 {
    0.03
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneLayout {
    #[serde(default = "default_jitter")]
    pub color_jitter: f64,
    #[serde(rename = "primitive", default)]
    pub primitives: Vec<Primitive>,
}

impl SceneLayout {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad scene layout: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// A face: origin corner, two edge vectors, outward normal.
struct Face {
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    normal: Vector3<f64>,
}

impl Face {
    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }
}

fn box_faces(center: Vector3<f64>, size: Vector3<f64>, open_bottom: bool) -> Vec<Face> {
    let h = size * 0.5;
    let mut faces = Vec::new();
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for sign in [-1.0, 1.0] {
            if open_bottom && axis == 2 && sign < 0.0 {
                continue;
            }
            let mut normal = Vector3::zeros();
            normal[axis] = sign;
            let mut origin = center - h;
            origin[axis] = center[axis] + sign * h[axis];
            let mut u = Vector3::zeros();
            u[a] = size[a];
            let mut v = Vector3::zeros();
            v[b] = size[b];
            faces.push(Face {
                origin,
                u,
                v,
                normal,
            });
        }
    }
    faces
}

fn orientation(normal: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vector3::z(), normal).unwrap_or_else(|| {
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
    })
}

/// Samples `(position, normal)` pairs on the primitive surface and returns the mean spacing.
fn sample_surface(p: &Primitive, rng: &mut ChaCha8Rng) -> (Vec<(Vector3<f64>, Vector3<f64>)>, f64) {
    let center = Vector3::from(p.center);
    let size = Vector3::from(p.size);
    let mut out = Vec::with_capacity(p.count);
    let area = match p.kind {
        PrimitiveKind::Sphere => {
            let r = size.x;
            for _ in 0..p.count {
                let d = loop {
                    let d = Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    );
                    if d.norm() > 1e-9 {
                        break d.normalize();
                    }
                };
                out.push((center + d * r, d));
            }
            4.0 * std::f64::consts::PI * r * r
        }
        PrimitiveKind::Box | PrimitiveKind::Quad => {
            let faces = if p.kind == PrimitiveKind::Box {
                box_faces(center, size, p.open_bottom)
            } else {
                let n = p.normal.index();
                let (a, b) = ((n + 1) % 3, (n + 2) % 3);
                let mut u = Vector3::zeros();
                u[a] = size[a];
                let mut v = Vector3::zeros();
                v[b] = size[b];
                let mut normal = Vector3::zeros();
                normal[n] = 1.0;
                vec![Face {
                    origin: center - u * 0.5 - v * 0.5,
                    u,
                    v,
                    normal,
                }]
            };
            let areas: Vec<f64> = faces.iter().map(Face::area).collect();
            let total: f64 = areas.iter().sum();
            for _ in 0..p.count {
                let mut pick = rng.random::<f64>() * total;
                let mut f = faces.len() - 1;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        f = k;
                        break;
                    }
                    pick -= a;
                }
                let face = &faces[f];
                let (s, t): (f64, f64) = (rng.random(), rng.random());
                out.push((face.origin + face.u * s + face.v * t, face.normal));
            }
            total
        }
    };
    let spacing = (area / p.count.max(1) as f64).sqrt();
    (out, spacing)
}

/// Builds a labeled scene from a layout. Identical `(layout, seed)` give identical scenes.
pub fn synth_scene(layout: &SceneLayout, seed: u64) -> Result<GaussianScene> {
    if layout.primitives.is_empty() {
        return Err(Error::Config("scene layout has no primitives".into()));
    }
    let mut gaussians = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    for (k, p) in layout.primitives.iter().enumerate() {
        if p.count == 0 || p.size.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "primitive {k} has no Gaussians or a bad size"
            )));
        }
        let mut rng = rng_for(seed, k as u64);
        let (samples, spacing) = sample_surface(p, &mut rng);
        let tangent = 0.5 * spacing;
        let thickness = 0.1 * spacing;
        for (pos, normal) in samples {
            let jitter =
                |rng: &mut ChaCha8Rng| layout.color_jitter * rng.sample::<f64, _>(StandardNormal);
            let color = Vector3::new(
                (p.color[0] + jitter(&mut rng)).clamp(0.0, 1.0),
                (p.color[1] + jitter(&mut rng)).clamp(0.0, 1.0),
                (p.color[2] + jitter(&mut rng)).clamp(0.0, 1.0),
            );
            let opacity = p.opacity[0] + (p.opacity[1] - p.opacity[0]) * rng.random::<f64>();
            gaussians.push(Gaussian {
                center: pos,
                scale: Vector3::new(tangent, tangent, thickness),
                rotation: orientation(&normal),
                opacity: opacity.clamp(0.0, 1.0),
                color,
                normal: Some(normal),
            });
            semantic.push(p.class);
            instance.push(p.instance);
        }
    }
    Ok(GaussianScene::new(gaussians).with_labels(Some(semantic), Some(instance)))
}

/// Which label drives a synthetic teacher's prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Semantic,
    Instance,
}

impl LabelSource {
    pub fn default_for(teacher: TeacherId) -> Self {
        match teacher {
            TeacherId::Pe => LabelSource::Instance,
            _ => LabelSource::Semantic,
        }
    }

    pub fn labels<'a>(&self, scene: &'a GaussianScene) -> Option<&'a [u32]> {
        match self {
            LabelSource::Semantic => scene.semantic_labels.as_deref(),
            LabelSource::Instance => scene.instance_labels.as_deref(),
        }
    }
}

/// Unit prototype vectors for labels `0..count`. Label `c` depends only on
/// `(seed, teacher, c, dim)`; labels below `dim` are Gram-Schmidt
/// orthonormalized in label order, so they are mutually orthogonal whenever
/// `dim >= count`.
pub fn prototypes(seed: u64, teacher: TeacherId, count: usize, dim: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(count, dim);
    for c in 0..count {
        let stream = mix_seed(mix_seed(teacher.as_u8() as u64 + 1, c as u64), dim as u64);
        let mut rng = rng_for(seed, stream);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if c < dim {
            for prev in 0..c {
                let dot: f64 = (0..dim).map(|k| v[k] * out[(prev, k)]).sum();
                for k in 0..dim {
                    v[k] -= dot * out[(prev, k)];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..dim {
            out[(c, k)] = v[k] / norm;
        }
    }
    out
}

/// A prototype teacher: renders `proto(label(i))` through the compositing weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTeacher {
    pub id: TeacherId,
    pub dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub labels: LabelSource,
}

impl SyntheticTeacher {
    pub fn new(id: TeacherId, dim: usize, noise_sigma: f64, seed: u64) -> Self {
        Self {
            id,
            dim,
            noise_sigma,
            seed,
            labels: LabelSource::default_for(id),
        }
    }

    pub fn prototypes(&self, count: usize) -> DMatrix<f64> {
        prototypes(self.seed, self.id, count, self.dim)
    }

    /// Feature map seen from `camera`; `view_seed` decorrelates the noise across views.
    pub fn render(
        &self,
        rasterizer: &Rasterizer,
        scene: &GaussianScene,
        camera: &Camera,
        view_seed: u64,
    ) -> Result<TeacherFeatureMap> {
        let labels = self.labels.labels(scene).ok_or_else(|| {
            Error::Precondition(format!(
                "synthetic {} teacher needs {:?} labels",
                self.id, self.labels
            ))
        })?;
        let count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        let protos = self.prototypes(count);
        let per_gaussian = DMatrix::from_fn(scene.len(), self.dim, |i, k| {
            protos[(labels[i] as usize, k)]
        });
        let (image, weights) = rasterizer.render_features(scene, camera, &per_gaussian)?;
        let mut map = TeacherFeatureMap {
            teacher: self.id,
            height: image.height,
            width: image.width,
            dim: self.dim,
            data: image.data,
        };
        let mut rng = rng_for(
            mix_seed(self.seed, self.id.as_u8() as u64),
            mix_seed(view_seed, 0x7e),
        );
        for p in 0..weights.num_pixels() {
            let px = &mut map.data[p * self.dim..(p + 1) * self.dim];
            if weights.coverage(p) < 1e-4 {
                px.iter_mut().for_each(|v| *v = 0.0);
            } else if self.noise_sigma > 0.0 {
                for v in px.iter_mut() {
                    *v += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(map)
    }
}

/// `count` cameras on a horizontal circle around `target`, all looking at it.
pub fn orbit_cameras(
    intrinsics: Intrinsics,
    target: Vector3<f64>,
    radius: f64,
    height: f64,
    count: usize,
) -> Vec<Camera> {
    (0..count)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
            let eye = Vector3::new(
                target.x + radius * a.cos(),
                target.y + radius * a.sin(),
                height,
            );
            Camera::look_at(intrinsics, eye, target)
        })
        .collect()
}

/// Uniform random standard-normal draw, shared by the augmentation code.
pub(crate) fn normal_sample(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ply::{read_ply, write_ply};

    fn two_boxes() -> SceneLayout {
        SceneLayout::from_toml(
            r#"
            [[primitive]]
            kind = "box"
            center = [0.0, 0.0, 0.5]
            size = [1.0, 1.0, 1.0]
            count = 100
            class = 0
            instance = 0
            color = [0.8, 0.2, 0.2]

            [[primitive]]
            kind = "box"
            center = [3.0, 0.0, 0.5]
            size = [1.0, 1.0, 1.0]
            count = 100
            class = 1
            instance = 1
            color = [0.2, 0.2, 0.8]
            "#,
        )
        .unwrap()
    }

    #[test]
    fn counts_and_labels() {
        let s = synth_scene(&two_boxes(), 7).unwrap();
        assert_eq!(s.len(), 200);
        assert_eq!(s.num_classes(), 2);
        let inst = s.instance_labels.as_ref().unwrap();
        assert_eq!(inst.iter().filter(|&&i| i == 1).count(), 100);
        s.validate().unwrap();
        assert!(s.gaussians.iter().all(|g| s.bounds.contains(&g.center)));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = synth_scene(&two_boxes(), 7).unwrap();
        let b = synth_scene(&two_boxes(), 7).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_ply(&a, &mut ba).unwrap();
        write_ply(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = synth_scene(&two_boxes(), 8).unwrap();
        assert_ne!(a.gaussians[0].center, c.gaussians[0].center);
        assert_eq!(read_ply(ba.as_slice()).unwrap().len(), 200);
    }

    #[test]
    fn empty_layout_is_rejected() {
        let layout = SceneLayout {
            color_jitter: 0.0,
            primitives: vec![],
        };
        assert!(matches!(synth_scene(&layout, 1), Err(Error::Config(_))));
    }

    #[test]
    fn prototypes_are_orthonormal_and_prefix_stable() {
        let p = prototypes(3, TeacherId::Lang, 5, 16);
        let gram = &p * p.transpose();
        assert!((gram - DMatrix::identity(5, 5)).abs().max() < 1e-12);
        let q = prototypes(3, TeacherId::Lang, 3, 16);
        assert_eq!(q, p.rows(0, 3).into_owned());
        assert_ne!(prototypes(3, TeacherId::Dino, 3, 16), q);
        // more labels than dimensions: still unit length
        let r = prototypes(3, TeacherId::Pe, 12, 8);
        for c in 0..12 {
            assert!((r.row(c).norm() - 1.0).abs() < 1e-12);
        }
    }
}
