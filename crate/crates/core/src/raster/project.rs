use nalgebra::{Matrix2, Matrix2x3, Vector2};

use super::RenderConfig;
use crate::scene::{Camera, GaussianScene};

/// A Gaussian projected into screen space.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatProjection {
    pub gaussian_index: usize,
    pub mean2d: Vector2<f64>,
    /// Screen-space covariance in pixels², dilation included.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    pub opacity: f64,
    /// Pixel radius beyond which the splat's alpha is below the contribution cutoff.
    pub radius: f64,
}

impl SplatProjection {
    /// Raw (unclamped) Gaussian falloff times opacity at pixel coordinates `(x, y)`.
    #[inline]
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mean2d.x;
        let dy = y - self.mean2d.y;
        let c = &self.conic;
        let power = -0.5 * (c[(0, 0)] * dx * dx + 2.0 * c[(0, 1)] * dx * dy + c[(1, 1)] * dy * dy);
        if power > 0.0 {
            return 0.0;
        }
        self.opacity * power.exp()
    }
}

/// EWA projection of every Gaussian that can contribute to the image,
/// sorted front to back (depth, then Gaussian index).
pub fn project(scene: &GaussianScene, camera: &Camera, cfg: &RenderConfig) -> Vec<SplatProjection> {
    let k = &camera.intrinsics;
    let (w, h) = (k.width as f64, k.height as f64);
    let w_rot = camera.rotation;
    let mut out: Vec<SplatProjection> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(index, g)| {
            if g.opacity < cfg.alpha_min {
                return None;
            }
            let t = camera.to_camera(&g.center);
            if t.z <= cfg.near {
                return None;
            }
            let (tx, ty) = (t.x / t.z, t.y / t.z);
            // expanded frustum: keeps the linearization away from grazing angles
            let lim_x = cfg.frustum_margin * k.cx.max(w - k.cx) / k.fx;
            let lim_y = cfg.frustum_margin * k.cy.max(h - k.cy) / k.fy;
            if tx.abs() > lim_x || ty.abs() > lim_y {
                return None;
            }
            let mean2d = Vector2::new(k.fx * tx + k.cx, k.fy * ty + k.cy);
            let j = Matrix2x3::new(
                k.fx / t.z,
                0.0,
                -k.fx * t.x / (t.z * t.z),
                0.0,
                k.fy / t.z,
                -k.fy * t.y / (t.z * t.z),
            );
            let cov_cam = w_rot * g.covariance() * w_rot.transpose();
            let mut cov2d = j * cov_cam * j.transpose();
            cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
            cov2d[(1, 0)] = cov2d[(0, 1)];
            cov2d[(0, 0)] += cfg.dilation;
            cov2d[(1, 1)] += cfg.dilation;
            let det = cov2d.determinant();
            if det.is_nan() || det <= 0.0 {
                return None;
            }
            let conic =
                Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
            let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = (2.0 * (g.opacity / cfg.alpha_min).ln() * lambda_max)
                .max(0.0)
                .sqrt()
                * (1.0 + 1e-9)
                + 1e-9;
            if mean2d.x + radius < 0.0
                || mean2d.y + radius < 0.0
                || mean2d.x - radius > w - 1.0
                || mean2d.y - radius > h - 1.0
            {
                return None;
            }
            Some(SplatProjection {
                gaussian_index: index,
                mean2d,
                cov2d,
                conic,
                depth: t.z,
                opacity: g.opacity,
                radius,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
    out
}
