//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use gsdistill::{Camera, Gaussian, GaussianScene, Intrinsics, RenderConfig, TeacherFeatureMap};
use nalgebra::{DVector, Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;

/// A random scene in front of a random camera: up to `max_n` Gaussians,
/// anisotropic and arbitrarily rotated, in a `size` x `size` image.
pub fn random_scene(rng: &mut impl Rng, max_n: usize, size: u32) -> (GaussianScene, Camera) {
    let f = rng.random_range(0.6..1.4) * size as f64;
    let k = Intrinsics {
        width: size,
        height: size,
        fx: f,
        fy: f * rng.random_range(0.9..1.1),
        cx: size as f64 * rng.random_range(0.4..0.6),
        cy: size as f64 * rng.random_range(0.4..0.6),
    };
    let eye = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let target = Vector3::new(
        5.0,
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    let camera = Camera::look_at(k, eye, target);
    let n = rng.random_range(1..=max_n);
    let gaussians = (0..n)
        .map(|_| {
            // sample in camera space, slightly beyond the image bounds
            let z: f64 = rng.random_range(0.2..8.0);
            let x = rng.random_range(-0.7..0.7) * z * size as f64 / f;
            let y = rng.random_range(-0.7..0.7) * z * size as f64 / f;
            let world = camera.rotation.transpose() * (Vector3::new(x, y, z) - camera.translation);
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            Gaussian {
                center: world,
                scale: Vector3::from_fn(|_, _| (rng.random_range(-4.5f64..-1.0)).exp()),
                rotation: UnitQuaternion::from_quaternion(q),
                opacity: rng.random_range(0.0..1.0),
                color: Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)),
                normal: None,
            }
        })
        .collect();
    (GaussianScene::new(gaussians), camera)
}

/// Rotation matrix of a unit quaternion (w, x, y, z), written out by hand.
pub fn quat_matrix(q: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

pub struct OracleSplat {
    pub index: usize,
    pub depth: f64,
    pub mean: (f64, f64),
    pub inv_cov: Matrix2<f64>,
    pub opacity: f64,
}

/// Projection following the render contract: near-plane and expanded-frustum
/// culling of centers, EWA covariance with isotropic dilation.
pub fn oracle_project(
    scene: &GaussianScene,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Vec<OracleSplat> {
    let k = &camera.intrinsics;
    let mut out = Vec::new();
    for (index, g) in scene.gaussians.iter().enumerate() {
        if g.opacity < cfg.alpha_min {
            continue;
        }
        let t = camera.rotation * g.center + camera.translation;
        if t.z <= cfg.near {
            continue;
        }
        let half_w = (k.cx).max(k.width as f64 - k.cx) / k.fx;
        let half_h = (k.cy).max(k.height as f64 - k.cy) / k.fy;
        if (t.x / t.z).abs() > cfg.frustum_margin * half_w
            || (t.y / t.z).abs() > cfg.frustum_margin * half_h
        {
            continue;
        }
        let r = quat_matrix(&g.rotation);
        let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
        let sigma = camera.rotation * (r * s2 * r.transpose()) * camera.rotation.transpose();
        // rows of the perspective Jacobian
        let j0 = Vector3::new(k.fx / t.z, 0.0, -k.fx * t.x / (t.z * t.z));
        let j1 = Vector3::new(0.0, k.fy / t.z, -k.fy * t.y / (t.z * t.z));
        let a = j0.dot(&(sigma * j0)) + cfg.dilation;
        let b = j0.dot(&(sigma * j1));
        let c = j1.dot(&(sigma * j1)) + cfg.dilation;
        let det = a * c - b * b;
        if det <= 0.0 {
            continue;
        }
        out.push(OracleSplat {
            index,
            depth: t.z,
            mean: (k.fx * t.x / t.z + k.cx, k.fy * t.y / t.z + k.cy),
            inv_cov: Matrix2::new(c, -b, -b, a) / det,
            opacity: g.opacity,
        });
    }
    out.sort_by(|p, q| {
        p.depth
            .partial_cmp(&q.depth)
            .unwrap()
            .then(p.index.cmp(&q.index))
    });
    out
}

pub struct OracleImage {
    pub color: Vec<[f64; 3]>,
    pub weights: Vec<Vec<(usize, f64)>>,
    pub residual: Vec<f64>,
}

/// Every splat at every pixel, in depth order, without tiling or bounding
/// radii; only stops once transmittance is negligible.
pub fn oracle_render(scene: &GaussianScene, camera: &Camera, cfg: &RenderConfig) -> OracleImage {
    let splats = oracle_project(scene, camera, cfg);
    let (w, h) = (camera.width(), camera.height());
    let mut img = OracleImage {
        color: vec![[0.0; 3]; w * h],
        weights: vec![Vec::new(); w * h],
        residual: vec![1.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut t = 1.0;
            for s in &splats {
                let d = nalgebra::Vector2::new(x as f64 - s.mean.0, y as f64 - s.mean.1);
                let q = d.dot(&(s.inv_cov * d));
                let alpha = (s.opacity * (-0.5 * q).exp()).min(cfg.alpha_clamp);
                if alpha < cfg.alpha_min {
                    continue;
                }
                let wt = t * alpha;
                let c = scene.gaussians[s.index].color;
                for k in 0..3 {
                    img.color[p][k] += wt * c[k];
                }
                img.weights[p].push((s.index, wt));
                t *= 1.0 - alpha;
                if t < 1e-12 {
                    break;
                }
            }
            img.residual[p] = t;
        }
    }
    img
}

/// Cameras around the first camera's viewing target, all seeing the scene.
pub fn nearby_cameras(rng: &mut impl Rng, base: &Camera, count: usize) -> Vec<Camera> {
    let target = base.position() + 3.0 * base.forward();
    (0..count)
        .map(|v| {
            if v == 0 {
                return *base;
            }
            let jitter = Vector3::from_fn(|_, _| rng.random_range(-0.6..0.6));
            Camera::look_at(base.intrinsics, base.position() + jitter, target)
        })
        .collect()
}

/// Four single-class blobs side by side, seen by cameras that keep them
/// apart on screen: no pixel composites more than one class.
pub fn separated_blobs(rng: &mut impl Rng) -> (GaussianScene, Vec<Camera>) {
    let mut gaussians = Vec::new();
    let mut labels = Vec::new();
    for class in 0..4u32 {
        let center = Vector3::new(class as f64 * 1.5 - 2.25, 0.0, 0.0);
        for _ in 0..40 {
            let offset = Vector3::from_fn(|_, _| rng.random_range(-0.25..0.25));
            gaussians.push(Gaussian::isotropic(
                center + offset,
                rng.random_range(0.03..0.08),
                rng.random_range(0.3..0.95),
                Vector3::repeat(0.5),
            ));
            labels.push(class);
        }
    }
    let scene = GaussianScene::new(gaussians).with_labels(Some(labels.clone()), Some(labels));
    let k = Intrinsics::from_fov(64, 48, 70.0);
    let cameras = (0..6)
        .map(|v| {
            let eye = Vector3::new(v as f64 * 0.3 - 0.75, -6.0, 0.2 * (v % 3) as f64 - 0.2);
            Camera::look_at(k, eye, Vector3::new(eye.x, 0.0, 0.0))
        })
        .collect();
    (scene, cameras)
}

/// Weighted feature sums and total weights per Gaussian, accumulated view
/// by view, pixel by pixel, splat by splat from the brute-force renders.
pub fn triple_loop_uplift(
    scene: &GaussianScene,
    cameras: &[Camera],
    maps: &[TeacherFeatureMap],
    cfg: &RenderConfig,
) -> (Vec<DVector<f64>>, Vec<f64>) {
    let dim = maps[0].dim;
    let mut num = vec![DVector::<f64>::zeros(dim); scene.len()];
    let mut den = vec![0.0; scene.len()];
    for (v, cam) in cameras.iter().enumerate() {
        let r = oracle_render(scene, cam, cfg);
        for (p, list) in r.weights.iter().enumerate() {
            for &(i, w) in list {
                den[i] += w;
                let pixel = &maps[v].data[p * dim..(p + 1) * dim];
                for (acc, x) in num[i].iter_mut().zip(pixel) {
                    *acc += w * x;
                }
            }
        }
    }
    (num, den)
}
