//! Screen-space projection and front-to-back alpha compositing.
//!
//! Every render records its compositing weights `w_i = T_i * alpha_i` per
//! pixel. The same records drive color rendering, feature rendering, feature
//! uplifting and the adjoint used to backpropagate image-space gradients.

mod project;

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::scene::{Camera, GaussianScene};

pub use project::{project, SplatProjection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub alpha_clamp: f64,
    /// Contributions with alpha below this are skipped.
    pub alpha_min: f64,
    /// Traversal stops once transmittance falls below this.
    pub transmittance_min: f64,
    pub near: f64,
    /// Isotropic screen-space covariance dilation in pixels².
    pub dilation: f64,
    /// Frustum expansion factor applied to the half-FOV tangents.
    pub frustum_margin: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_clamp: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            near: 0.01,
            dilation: 0.3,
            frustum_margin: 1.3,
        }
    }
}

/// Per-pixel depth-ordered `(gaussian index, weight)` lists in CSR layout,
/// plus the residual transmittance of every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeWeights {
    pub width: usize,
    pub height: usize,
    /// Number of Gaussians in the rendered scene.
    pub num_gaussians: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
    pub residual_transmittance: Vec<f64>,
}

impl CompositeWeights {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn num_entries(&self) -> usize {
        self.indices.len()
    }

    /// Depth-ordered contributions at pixel `p` (row-major index).
    pub fn pixel(&self, p: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[p]..self.offsets[p + 1];
        self.indices[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(&i, &w)| (i as usize, w))
    }

    /// Total compositing weight (accumulated alpha) at pixel `p`.
    pub fn coverage(&self, p: usize) -> f64 {
        self.weights[self.offsets[p]..self.offsets[p + 1]]
            .iter()
            .sum()
    }

    /// Sorted indices of every Gaussian with a recorded weight of at least `min_weight`.
    pub fn visible(&self, min_weight: f64) -> Vec<usize> {
        let mut seen = vec![false; self.num_gaussians];
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            if w >= min_weight {
                seen[i as usize] = true;
            }
        }
        seen.iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    /// Assembles weights from per-pixel lists given in row-major pixel order.
    pub fn from_pixel_lists(
        width: usize,
        height: usize,
        num_gaussians: usize,
        lists: &[Vec<(usize, f64)>],
        residual_transmittance: Vec<f64>,
    ) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for l in lists {
            for &(i, w) in l {
                indices.push(i as u32);
                weights.push(w);
            }
            offsets.push(indices.len());
        }
        Self {
            width,
            height,
            num_gaussians,
            offsets,
            indices,
            weights,
            residual_transmittance,
        }
    }

    /// Remaps Gaussian indices through `map` (old index -> new index), for
    /// reusing weights of a full-scene render on a subset. Entries whose
    /// Gaussian is not in the subset are dropped.
    pub fn remapped(&self, map: &[Option<usize>], num_gaussians: usize) -> Self {
        let lists: Vec<Vec<(usize, f64)>> = (0..self.num_pixels())
            .map(|p| {
                self.pixel(p)
                    .filter_map(|(i, w)| map[i].map(|j| (j, w)))
                    .collect()
            })
            .collect();
        Self::from_pixel_lists(
            self.width,
            self.height,
            num_gaussians,
            &lists,
            self.residual_transmittance.clone(),
        )
    }
}

/// A dense H x W x D image, row-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.dim..(p + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub weights: CompositeWeights,
    /// Sorted indices of Gaussians with any recorded weight.
    pub visible: Vec<usize>,
}

/// Tile-based rasterizer. Counts render passes so callers can verify that
/// weight records are reused rather than recomputed.
#[derive(Debug, Default)]
pub struct Rasterizer {
    pub config: RenderConfig,
    passes: AtomicUsize,
}

struct TilePixel {
    pixel: usize,
    start: usize,
    len: usize,
    transmittance: f64,
    color: [f64; 3],
}

impl Rasterizer {
    pub fn new(config: RenderConfig) -> Self {
        Self {
            config,
            passes: AtomicUsize::new(0),
        }
    }

    pub fn render_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn project(&self, scene: &GaussianScene, camera: &Camera) -> Vec<SplatProjection> {
        project(scene, camera, &self.config)
    }

    /// Composites colors front to back and records the weights.
    pub fn render(&self, scene: &GaussianScene, camera: &Camera) -> RenderOutput {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let cfg = &self.config;
        let (width, height) = (camera.width(), camera.height());
        let splats = self.project(scene, camera);
        let ts = cfg.tile_size.max(1);
        let (tiles_x, tiles_y) = (width.div_ceil(ts), height.div_ceil(ts));

        // Bin splats into tiles; iterating the globally sorted list keeps each
        // tile list in depth order.
        let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
        for (s, sp) in splats.iter().enumerate() {
            let x0 = (sp.mean2d.x - sp.radius).ceil().max(0.0) as usize;
            let y0 = (sp.mean2d.y - sp.radius).ceil().max(0.0) as usize;
            let x1 = ((sp.mean2d.x + sp.radius).floor().min(width as f64 - 1.0)).max(-1.0);
            let y1 = ((sp.mean2d.y + sp.radius).floor().min(height as f64 - 1.0)).max(-1.0);
            if x1 < 0.0 || y1 < 0.0 || x0 > x1 as usize || y0 > y1 as usize {
                continue;
            }
            let (x1, y1) = (x1 as usize, y1 as usize);
            for ty in y0 / ts..=y1 / ts {
                for tx in x0 / ts..=x1 / ts {
                    bins[ty * tiles_x + tx].push(s as u32);
                }
            }
        }

        let colors: Vec<[f64; 3]> = scene.gaussians.iter().map(|g| g.color.into()).collect();
        let tiles: Vec<(Vec<TilePixel>, Vec<(u32, f64)>)> = (0..tiles_x * tiles_y)
            .into_par_iter()
            .map(|t| {
                let (tx, ty) = (t % tiles_x, t / tiles_x);
                let mut pixels = Vec::with_capacity(ts * ts);
                let mut entries = Vec::new();
                for py in ty * ts..((ty + 1) * ts).min(height) {
                    for px in tx * ts..((tx + 1) * ts).min(width) {
                        let start = entries.len();
                        let mut transmittance = 1.0;
                        let mut color = [0.0; 3];
                        for &s in &bins[t] {
                            let sp = &splats[s as usize];
                            let alpha = sp.alpha_at(px as f64, py as f64).min(cfg.alpha_clamp);
                            if alpha < cfg.alpha_min {
                                continue;
                            }
                            let w = alpha * transmittance;
                            let c = &colors[sp.gaussian_index];
                            for k in 0..3 {
                                color[k] += w * c[k];
                            }
                            entries.push((sp.gaussian_index as u32, w));
                            transmittance *= 1.0 - alpha;
                            if transmittance < cfg.transmittance_min {
                                break;
                            }
                        }
                        pixels.push(TilePixel {
                            pixel: py * width + px,
                            start,
                            len: entries.len() - start,
                            transmittance,
                            color,
                        });
                    }
                }
                (pixels, entries)
            })
            .collect();

        // Tiles own disjoint pixel sets, so assembly order cannot race.
        let mut counts = vec![0usize; width * height];
        let mut residual = vec![1.0; width * height];
        let mut color = RgbImage::new(width, height);
        for (pixels, _) in &tiles {
            for tp in pixels {
                counts[tp.pixel] = tp.len;
                residual[tp.pixel] = tp.transmittance;
                color.data[tp.pixel * 3..tp.pixel * 3 + 3].copy_from_slice(&tp.color);
            }
        }
        let mut offsets = Vec::with_capacity(width * height + 1);
        offsets.push(0);
        for c in &counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        let total = *offsets.last().unwrap();
        let mut indices = vec![0u32; total];
        let mut weights = vec![0.0; total];
        for (pixels, entries) in &tiles {
            for tp in pixels {
                let dst = offsets[tp.pixel];
                for (k, &(i, w)) in entries[tp.start..tp.start + tp.len].iter().enumerate() {
                    indices[dst + k] = i;
                    weights[dst + k] = w;
                }
            }
        }
        let weights = CompositeWeights {
            width,
            height,
            num_gaussians: scene.len(),
            offsets,
            indices,
            weights,
            residual_transmittance: residual,
        };
        let visible = weights.visible(0.0);
        RenderOutput {
            color,
            weights,
            visible,
        }
    }

    /// Renders per-Gaussian features (rows in scene order) with the same
    /// weights as [`Rasterizer::render`].
    pub fn render_features(
        &self,
        scene: &GaussianScene,
        camera: &Camera,
        features: &DMatrix<f64>,
    ) -> Result<(FeatureImage, CompositeWeights)> {
        if features.nrows() != scene.len() {
            return Err(Error::shape(
                format!("{} feature rows", scene.len()),
                features.nrows(),
            ));
        }
        let out = self.render(scene, camera);
        let image = composite(&out.weights, features)?;
        Ok((image, out.weights))
    }
}

/// Applies recorded weights to per-Gaussian features: `F(u) = sum_i w_i(u) F_i`.
pub fn composite(weights: &CompositeWeights, features: &DMatrix<f64>) -> Result<FeatureImage> {
    if features.nrows() != weights.num_gaussians {
        return Err(Error::shape(
            format!("{} feature rows", weights.num_gaussians),
            features.nrows(),
        ));
    }
    let dim = features.ncols();
    let n = features.nrows();
    let cols = features.as_slice();
    let mut image = FeatureImage::zeros(weights.width, weights.height, dim);
    image
        .data
        .par_chunks_mut(dim.max(1))
        .enumerate()
        .for_each(|(p, out)| {
            if dim == 0 {
                return;
            }
            for (i, w) in weights.pixel(p) {
                for (k, o) in out.iter_mut().enumerate() {
                    *o += w * cols[k * n + i];
                }
            }
        });
    Ok(image)
}

/// Adjoint of [`composite`]: scatters image-space gradients back onto Gaussians
/// (`W^T g`), accumulating in pixel-major order.
pub fn backproject_feature_grad(
    weights: &CompositeWeights,
    image_grad: &FeatureImage,
) -> Result<DMatrix<f64>> {
    if image_grad.width != weights.width || image_grad.height != weights.height {
        return Err(Error::shape(
            format!("{}x{} gradient image", weights.width, weights.height),
            format!("{}x{}", image_grad.width, image_grad.height),
        ));
    }
    let dim = image_grad.dim;
    let mut out = DMatrix::zeros(weights.num_gaussians, dim);
    for p in 0..weights.num_pixels() {
        let g = image_grad.pixel(p);
        for (i, w) in weights.pixel(p) {
            for k in 0..dim {
                out[(i, k)] += w * g[k];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Gaussian, Intrinsics};
    use nalgebra::{Matrix3, Vector3};

    fn camera(size: u32) -> Camera {
        let k = Intrinsics {
            width: size,
            height: size,
            fx: 100.0,
            fy: 100.0,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
        };
        Camera::new(k, Matrix3::identity(), Vector3::zeros())
    }

    #[test]
    fn single_opaque_splat_at_center() {
        let c = Vector3::new(0.2, 0.4, 0.6);
        let scene = GaussianScene::new(vec![Gaussian::isotropic(
            Vector3::new(0.0, 0.0, 2.0),
            0.05,
            1.0,
            c,
        )]);
        let r = Rasterizer::default().render(&scene, &camera(32));
        let p = 16 * 32 + 16;
        let list: Vec<_> = r.weights.pixel(p).collect();
        assert_eq!(list, vec![(0, 0.99)]);
        for k in 0..3 {
            assert!((r.color.data[p * 3 + k] - 0.99 * c[k]).abs() < 1e-15);
        }
        assert!((r.weights.residual_transmittance[p] - 0.01).abs() < 1e-15);
        assert_eq!(r.visible, vec![0]);
    }

    #[test]
    fn two_splats_on_one_ray() {
        // huge sigma makes the falloff at the center pixel exactly 1
        let mk = |z: f64, a: f64| {
            Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 0.2 * z, a, Vector3::repeat(1.0))
        };
        let scene = GaussianScene::new(vec![mk(3.0, 0.8), mk(2.0, 0.6)]);
        let r = Rasterizer::default().render(&scene, &camera(32));
        let p = 16 * 32 + 16;
        let list: Vec<_> = r.weights.pixel(p).collect();
        assert_eq!(list[0].0, 1);
        assert_eq!(list[1].0, 0);
        assert!((list[0].1 - 0.6).abs() < 1e-12);
        assert!((list[1].1 - 0.32).abs() < 1e-12);
        assert!((r.weights.residual_transmittance[p] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn backprojection_of_single_entry() {
        let weights =
            CompositeWeights::from_pixel_lists(2, 1, 3, &[vec![(1, 0.5)], vec![]], vec![0.5, 1.0]);
        let mut g = FeatureImage::zeros(2, 1, 2);
        g.data = vec![2.0, -4.0, 7.0, 7.0];
        let out = backproject_feature_grad(&weights, &g).unwrap();
        assert_eq!(
            out.row(1).iter().copied().collect::<Vec<_>>(),
            vec![1.0, -2.0]
        );
        assert_eq!(out.row(0).sum() + out.row(2).sum(), 0.0);
        let zero = backproject_feature_grad(&weights, &FeatureImage::zeros(2, 1, 2)).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_row_mismatch_is_a_shape_error() {
        let scene = GaussianScene::new(vec![Gaussian::isotropic(
            Vector3::new(0.0, 0.0, 2.0),
            0.05,
            1.0,
            Vector3::zeros(),
        )]);
        let f = DMatrix::zeros(2, 4);
        assert!(matches!(
            Rasterizer::default().render_features(&scene, &camera(8), &f),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pass_counter_increments() {
        let r = Rasterizer::default();
        let scene = GaussianScene::new(vec![]);
        r.render(&scene, &camera(8));
        r.render(&scene, &camera(8));
        assert_eq!(r.render_passes(), 2);
    }
}
