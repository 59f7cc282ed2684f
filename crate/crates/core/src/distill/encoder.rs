//! Reference per-Gaussian encoder: an MLP stem followed by blocks that mix
//! each Gaussian's hidden state with the mean over its k nearest neighbours.

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{gelu_backward, gelu_forward, Linear, Parameters};
use crate::error::{Error, Result};
use crate::scene::GaussianScene;

/// Which Gaussian attributes the encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// center, color, opacity, quaternion (w, x, y, z), log-scale: 14 values.
    GsFull,
    /// center, color, normal: 9 values.
    PcVariant,
}

impl InputMode {
    pub fn input_dim(self) -> usize {
        match self {
            InputMode::GsFull => 14,
            InputMode::PcVariant => 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_mode: InputMode,
    /// Stem width followed by one width per pooling block.
    pub hidden_widths: Vec<usize>,
    pub out_dim: usize,
    pub neighborhood_k: usize,
    /// Estimate normals from local PCA when a scene carries none (point-cloud variant).
    pub estimate_normals: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_mode: InputMode::GsFull,
            hidden_widths: vec![64, 64, 64],
            out_dim: 64,
            neighborhood_k: 16,
            estimate_normals: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::Config(
                "encoder hidden_widths must be non-empty and positive".into(),
            ));
        }
        if self.out_dim < 8 {
            return Err(Error::Config(format!(
                "encoder out_dim {} is below 8",
                self.out_dim
            )));
        }
        if self.neighborhood_k == 0 {
            return Err(Error::Config("neighborhood_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// The `k` nearest centers of every point (itself included), ordered by
/// distance with ties broken by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub k: usize,
    /// N x k, row-major.
    pub indices: Vec<usize>,
}

impl Neighborhood {
    pub fn build(points: &[Vector3<f64>], k: usize) -> Self {
        let n = points.len();
        let k = k.min(n);
        if n == 0 || k == 0 {
            return Self {
                k,
                indices: Vec::new(),
            };
        }
        let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let mut indices = Vec::with_capacity(n * k);
        if n <= 256 {
            for p in points {
                let mut c: Vec<(f64, usize)> = points
                    .iter()
                    .enumerate()
                    .map(|(j, q)| ((q - p).norm_squared(), j))
                    .collect();
                c.select_nth_unstable_by(k - 1, key);
                c.truncate(k);
                c.sort_by(key);
                indices.extend(c.iter().map(|x| x.1));
            }
            return Self { k, indices };
        }
        let grid = Grid::new(points, k);
        for p in points {
            indices.extend(grid.nearest(points, p, k));
        }
        Self { k, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Row `i` of the result is the mean of rows `of(i)` of `h`.
    pub fn pool(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let inv = 1.0 / self.k as f64;
        let mut out = DMatrix::zeros(h.nrows(), h.ncols());
        for c in 0..h.ncols() {
            let src = h.column(c);
            let mut dst = out.column_mut(c);
            for i in 0..h.nrows() {
                dst[i] = self.of(i).iter().map(|&j| src[j]).sum::<f64>() * inv;
            }
        }
        out
    }

    /// Adjoint of [`Neighborhood::pool`].
    pub fn pool_adjoint(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let inv = 1.0 / self.k as f64;
        let mut out = DMatrix::zeros(g.nrows(), g.ncols());
        for c in 0..g.ncols() {
            let src = g.column(c);
            let mut dst = out.column_mut(c);
            for i in 0..g.nrows() {
                let v = src[i] * inv;
                for &j in self.of(i) {
                    dst[j] += v;
                }
            }
        }
        out
    }
}

/// Uniform hash grid for exact k-nearest-neighbour queries.
struct Grid {
    cell: f64,
    origin: Vector3<f64>,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn new(points: &[Vector3<f64>], k: usize) -> Self {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max().max(1e-9);
        // sized for points spread over surfaces: about k points per cell
        let cell = extent * (k as f64 / points.len() as f64).sqrt();
        let mut grid = Self {
            cell,
            origin: lo,
            cells: HashMap::new(),
        };
        for (i, p) in points.iter().enumerate() {
            grid.cells.entry(grid.key(p)).or_default().push(i);
        }
        grid
    }

    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        let c = (p - self.origin) / self.cell;
        [c.x.floor() as i64, c.y.floor() as i64, c.z.floor() as i64]
    }

    fn nearest(&self, points: &[Vector3<f64>], p: &Vector3<f64>, k: usize) -> Vec<usize> {
        let center = self.key(p);
        let mut found: Vec<(f64, usize)> = Vec::new();
        let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let mut r = 0i64;
        loop {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(list) =
                            self.cells
                                .get(&[center[0] + dx, center[1] + dy, center[2] + dz])
                        {
                            found.extend(list.iter().map(|&j| ((points[j] - p).norm_squared(), j)));
                        }
                    }
                }
            }
            if found.len() >= k {
                found.select_nth_unstable_by(k - 1, key);
                let kth = found[k - 1].0;
                // every point outside the searched rings is farther than r cells
                let reach = r as f64 * self.cell;
                if kth < reach * reach || found.len() == points.len() {
                    found.truncate(k);
                    found.sort_by(key);
                    return found.into_iter().map(|x| x.1).collect();
                }
            }
            r += 1;
        }
    }
}

/// Unit normals from the smallest-eigenvalue direction of each neighbourhood's
/// covariance, signed so their largest-magnitude component is positive.
pub fn estimate_normals(points: &[Vector3<f64>], neighbors: &Neighborhood) -> Vec<Vector3<f64>> {
    (0..points.len())
        .map(|i| {
            let nb = neighbors.of(i);
            if nb.len() < 3 {
                return Vector3::z();
            }
            let mean = nb.iter().map(|&j| points[j]).sum::<Vector3<f64>>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for &j in nb {
                let d = points[j] - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let m = eig.eigenvalues.imin();
            let n: Vector3<f64> = eig.eigenvectors.column(m).into_owned();
            let big = n.iamax();
            if n[big] < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect()
}

/// Per-Gaussian input rows plus the neighbourhood graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub features: DMatrix<f64>,
    pub neighbors: Neighborhood,
}

impl EncoderInput {
    pub fn build(scene: &GaussianScene, config: &EncoderConfig) -> Result<Self> {
        let centers: Vec<Vector3<f64>> = scene.gaussians.iter().map(|g| g.center).collect();
        let neighbors = Neighborhood::build(&centers, config.neighborhood_k);
        let d = config.input_mode.input_dim();
        let mut features = DMatrix::zeros(scene.len(), d);
        match config.input_mode {
            InputMode::GsFull => {
                for (i, g) in scene.gaussians.iter().enumerate() {
                    let q = g.rotation.quaternion();
                    let row = [
                        g.center.x,
                        g.center.y,
                        g.center.z,
                        g.color.x,
                        g.color.y,
                        g.color.z,
                        g.opacity,
                        q.w,
                        q.i,
                        q.j,
                        q.k,
                        g.scale.x.ln(),
                        g.scale.y.ln(),
                        g.scale.z.ln(),
                    ];
                    features.row_mut(i).copy_from_slice(&row);
                }
            }
            InputMode::PcVariant => {
                let have_all = scene.gaussians.iter().all(|g| g.normal.is_some());
                let normals: Vec<Vector3<f64>> = if have_all {
                    scene
                        .gaussians
                        .iter()
                        .map(|g| g.normal.unwrap_or_else(Vector3::z))
                        .collect()
                } else if config.estimate_normals {
                    estimate_normals(&centers, &neighbors)
                } else {
                    return Err(Error::Precondition(
                        "point-cloud input needs normals and normal estimation is disabled".into(),
                    ));
                };
                for (i, g) in scene.gaussians.iter().enumerate() {
                    let n = normals[i];
                    let row = [
                        g.center.x, g.center.y, g.center.z, g.color.x, g.color.y, g.color.z, n.x,
                        n.y, n.z,
                    ];
                    features.row_mut(i).copy_from_slice(&row);
                }
            }
        }
        Ok(Self {
            features,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stem: Linear,
    pub blocks: Vec<Linear>,
    pub out: Linear,
}

/// Intermediate values of a forward pass.
pub struct EncoderCache {
    /// Pre-activations of the stem and every block.
    pre: Vec<DMatrix<f64>>,
    /// Inputs of every linear layer, in order: stem, blocks, output.
    inputs: Vec<DMatrix<f64>>,
}

impl Encoder {
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let w = &config.hidden_widths;
        let stem = Linear::init(config.input_mode.input_dim(), w[0], rng);
        let blocks = w
            .windows(2)
            .map(|p| Linear::init(2 * p[0], p[1], rng))
            .collect();
        let out = Linear::init(*w.last().unwrap_or(&1), config.out_dim, rng);
        Self { stem, blocks, out }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stem: self.stem.zeros_like(),
            blocks: self.blocks.iter().map(Linear::zeros_like).collect(),
            out: self.out.zeros_like(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out.outputs()
    }

    pub fn forward(&self, input: &EncoderInput) -> (DMatrix<f64>, EncoderCache) {
        let mut pre = Vec::with_capacity(self.blocks.len() + 1);
        let mut inputs = Vec::with_capacity(self.blocks.len() + 2);
        let a = self.stem.forward(&input.features);
        let mut h = gelu_forward(&a);
        inputs.push(input.features.clone());
        pre.push(a);
        for block in &self.blocks {
            let pooled = input.neighbors.pool(&h);
            let cat = concat_columns(&h, &pooled);
            let a = block.forward(&cat);
            h = gelu_forward(&a);
            inputs.push(cat);
            pre.push(a);
        }
        let z = self.out.forward(&h);
        inputs.push(h);
        (z, EncoderCache { pre, inputs })
    }

    pub fn encode(&self, input: &EncoderInput) -> DMatrix<f64> {
        self.forward(input).0
    }

    /// Parameter gradients given `dL/dZ`.
    pub fn backward(
        &self,
        input: &EncoderInput,
        cache: &EncoderCache,
        dz: &DMatrix<f64>,
    ) -> Encoder {
        let nb = self.blocks.len();
        let (g_out, mut dh) = self.out.backward(&cache.inputs[nb + 1], dz);
        let mut g_blocks = vec![None; nb];
        for b in (0..nb).rev() {
            let da = gelu_backward(&cache.pre[b + 1], &dh);
            let (g, dcat) = self.blocks[b].backward(&cache.inputs[b + 1], &da);
            g_blocks[b] = Some(g);
            let w = dcat.ncols() / 2;
            dh = dcat.columns(0, w)
                + input
                    .neighbors
                    .pool_adjoint(&dcat.columns(w, w).into_owned());
        }
        let da = gelu_backward(&cache.pre[0], &dh);
        let (g_stem, _) = self.stem.backward(&cache.inputs[0], &da);
        Encoder {
            stem: g_stem,
            blocks: g_blocks
                .into_iter()
                .map(|g| g.expect("every block visited"))
                .collect(),
            out: g_out,
        }
    }
}

impl Parameters for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        self.stem.visit(&format!("{prefix}stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}block{i}"), f);
        }
        self.out.visit(&format!("{prefix}out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        self.stem.visit_mut(&format!("{prefix}stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}block{i}"), f);
        }
        self.out.visit_mut(&format!("{prefix}out"), f);
    }
}

fn concat_columns(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}
