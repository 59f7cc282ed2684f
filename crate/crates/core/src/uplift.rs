//! Normalized 2D-to-3D feature uplifting.
//!
//! Each Gaussian's target is the compositing-weight-normalized average of
//! every pixel feature it contributes to, over all views:
//! `f_i = sum w_i(p,u) F(p,u) / sum w_i(p,u)`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::phis::PhisTransform;
use crate::raster::{CompositeWeights, Rasterizer};
use crate::scene::{read_exact, read_u32, Camera, GaussianScene, TeacherFeatureMap, TeacherId};

const CHUF_MAGIC: &[u8; 4] = b"CHUF";

/// Kahan-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Running numerator/denominator sums for one teacher.
#[derive(Debug, Clone)]
pub struct UpliftSums {
    pub teacher: TeacherId,
    pub dim: usize,
    /// N x dim, row-major.
    pub numerator: Vec<Kahan>,
    pub denominator: Vec<Kahan>,
}

impl UpliftSums {
    pub fn new(teacher: TeacherId, num_gaussians: usize, dim: usize) -> Self {
        Self {
            teacher,
            dim,
            numerator: vec![Kahan::default(); num_gaussians * dim],
            denominator: vec![Kahan::default(); num_gaussians],
        }
    }

    pub fn numerator_row(&self, i: usize) -> Vec<f64> {
        self.numerator[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(Kahan::value)
            .collect()
    }

    /// Adds one view's contributions. `map` must already be at the weights' resolution.
    pub fn add_view(&mut self, weights: &CompositeWeights, map: &TeacherFeatureMap) -> Result<()> {
        let partial = view_partial(weights, map, self.dim)?;
        self.merge(&partial);
        Ok(())
    }

    fn merge(&mut self, (num, den): &(Vec<f64>, Vec<f64>)) {
        for (acc, v) in self.numerator.iter_mut().zip(num) {
            acc.add(*v);
        }
        for (acc, v) in self.denominator.iter_mut().zip(den) {
            acc.add(*v);
        }
    }
}

fn view_partial(
    weights: &CompositeWeights,
    map: &TeacherFeatureMap,
    dim: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if map.dim != dim {
        return Err(Error::Config(format!(
            "{} feature dim {} does not match {dim}",
            map.teacher, map.dim
        )));
    }
    if map.width != weights.width || map.height != weights.height {
        return Err(Error::shape(
            format!("{}x{} feature map", weights.width, weights.height),
            format!("{}x{}", map.width, map.height),
        ));
    }
    let n = weights.num_gaussians;
    let mut num = vec![0.0; n * dim];
    let mut den = vec![0.0; n];
    for p in 0..weights.num_pixels() {
        let f = &map.data[p * dim..(p + 1) * dim];
        for (i, w) in weights.pixel(p) {
            den[i] += w;
            let row = &mut num[i * dim..(i + 1) * dim];
            for k in 0..dim {
                row[k] += w * f[k];
            }
        }
    }
    Ok((num, den))
}

/// Per-Gaussian uplifted targets for one teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct UpliftedTargets {
    pub teacher: TeacherId,
    /// N x dim; rows outside the mask are zero.
    pub features: DMatrix<f64>,
    pub total_weight: Vec<f64>,
    pub mask: Vec<bool>,
}

impl UpliftedTargets {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    /// Restricts the targets to `indices` (e.g. a cropped scene).
    pub fn subset(&self, indices: &[usize]) -> UpliftedTargets {
        UpliftedTargets {
            teacher: self.teacher,
            features: self.features.select_rows(indices),
            total_weight: indices.iter().map(|&i| self.total_weight[i]).collect(),
            mask: indices.iter().map(|&i| self.mask[i]).collect(),
        }
    }

    /// Standardizes the retained rows in place (for the uplift-then-standardize order).
    pub fn standardized(&self, t: &PhisTransform) -> Result<UpliftedTargets> {
        let mut features = t.apply_rows(&self.features)?;
        for (i, &m) in self.mask.iter().enumerate() {
            if !m {
                features.row_mut(i).fill(0.0);
            }
        }
        Ok(UpliftedTargets {
            features,
            ..self.clone()
        })
    }

    pub fn write_chuf(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHUF_MAGIC)?;
        for v in [1u32, self.len() as u32, self.dim() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.teacher.as_u8()])?;
        let mut buf = Vec::with_capacity(self.len() * (self.dim() + 1) * 4 + self.len());
        for i in 0..self.len() {
            for k in 0..self.dim() {
                buf.extend_from_slice(&(self.features[(i, k)] as f32).to_le_bytes());
            }
        }
        for &t in &self.total_weight {
            buf.extend_from_slice(&(t as f32).to_le_bytes());
        }
        buf.extend(self.mask.iter().map(|&m| m as u8));
        w.write_all(&buf)
    }

    pub fn read_chuf(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHUF_MAGIC {
            return Err(Error::Format("bad CHUF magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported CHUF version {version}")));
        }
        let n = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut t = [0u8; 1];
        read_exact(r, &mut t)?;
        let teacher = TeacherId::from_u8(t[0])?;
        let mut body = vec![0u8; n * dim * 4 + n * 4 + n];
        read_exact(r, &mut body)?;
        let f =
            |o: usize| f32::from_le_bytes([body[o], body[o + 1], body[o + 2], body[o + 3]]) as f64;
        let features = DMatrix::from_fn(n, dim, |i, k| f((i * dim + k) * 4));
        let base = n * dim * 4;
        let total_weight = (0..n).map(|i| f(base + i * 4)).collect();
        let mask = body[base + n * 4..].iter().map(|&b| b != 0).collect();
        Ok(Self {
            teacher,
            features,
            total_weight,
            mask,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_chuf(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_chuf(&mut f)
    }
}

/// Divides the sums; Gaussians with total weight below `tau_w` are masked out.
pub fn finalize(sums: &UpliftSums, tau_w: f64) -> UpliftedTargets {
    let n = sums.denominator.len();
    let mut features = DMatrix::zeros(n, sums.dim);
    let mut mask = vec![false; n];
    let total_weight: Vec<f64> = sums.denominator.iter().map(Kahan::value).collect();
    for i in 0..n {
        let den = total_weight[i];
        if den < tau_w || den <= 0.0 {
            continue;
        }
        let row: Vec<f64> = sums.numerator_row(i).iter().map(|v| v / den).collect();
        if row.iter().all(|v| v.is_finite()) {
            for (k, v) in row.into_iter().enumerate() {
                features[(i, k)] = v;
            }
            mask[i] = true;
        }
    }
    UpliftedTargets {
        teacher: sums.teacher,
        features,
        total_weight,
        mask,
    }
}

/// Rendered compositing weights for a fixed set of views, reused by every teacher.
pub struct UpliftSession {
    pub weights: Vec<CompositeWeights>,
    num_gaussians: usize,
}

impl UpliftSession {
    /// Renders each camera exactly once.
    pub fn new(rasterizer: &Rasterizer, scene: &GaussianScene, cameras: &[Camera]) -> Self {
        let weights = cameras
            .iter()
            .map(|c| rasterizer.render(scene, c).weights)
            .collect();
        Self {
            weights,
            num_gaussians: scene.len(),
        }
    }

    pub fn num_views(&self) -> usize {
        self.weights.len()
    }

    pub fn num_gaussians(&self) -> usize {
        self.num_gaussians
    }

    fn check_maps(&self, maps: &[TeacherFeatureMap]) -> Result<(TeacherId, usize)> {
        if maps.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} feature maps for {} views",
                maps.len(),
                self.weights.len()
            )));
        }
        let first = maps
            .first()
            .ok_or_else(|| Error::Config("no feature maps".into()))?;
        for m in maps {
            if m.teacher != first.teacher {
                return Err(Error::Config(format!(
                    "teacher mismatch across views: {} vs {}",
                    first.teacher, m.teacher
                )));
            }
            if m.dim != first.dim {
                return Err(Error::Config(format!(
                    "{} feature dim differs across views: {} vs {}",
                    m.teacher, first.dim, m.dim
                )));
            }
        }
        Ok((first.teacher, first.dim))
    }

    fn prepared(
        &self,
        view: usize,
        map: &TeacherFeatureMap,
        transform: Option<&PhisTransform>,
    ) -> Result<TeacherFeatureMap> {
        let w = &self.weights[view];
        let map = map.resized(w.height, w.width);
        match transform {
            Some(t) => t.apply_map(&map),
            None => Ok(map),
        }
    }

    /// Pixel features (upsampled to render resolution) of every pixel whose
    /// accumulated alpha is at least `min_coverage`, for fitting a standardizer.
    /// At most `max_rows` rows are kept, sampled with a fixed stride.
    pub fn population(
        &self,
        maps: &[TeacherFeatureMap],
        min_coverage: f64,
        max_rows: usize,
    ) -> Result<DMatrix<f64>> {
        let (_, dim) = self.check_maps(maps)?;
        let mut rows: Vec<f64> = Vec::new();
        for (v, map) in maps.iter().enumerate() {
            let m = self.prepared(v, map, None)?;
            let w = &self.weights[v];
            for p in 0..w.num_pixels() {
                if w.coverage(p) >= min_coverage {
                    rows.extend_from_slice(&m.data[p * dim..(p + 1) * dim]);
                }
            }
        }
        let count = rows.len() / dim.max(1);
        let stride = count.div_ceil(max_rows.max(1)).max(1);
        let kept: Vec<usize> = (0..count).step_by(stride).collect();
        Ok(DMatrix::from_fn(kept.len(), dim, |r, k| {
            rows[kept[r] * dim + k]
        }))
    }

    /// Accumulates one teacher over all views. Views are processed in
    /// parallel and merged in view order, so the result does not depend on
    /// the thread count.
    pub fn accumulate(
        &self,
        maps: &[TeacherFeatureMap],
        transform: Option<&PhisTransform>,
    ) -> Result<UpliftSums> {
        let (teacher, in_dim) = self.check_maps(maps)?;
        let dim = transform.map_or(in_dim, |t| t.output_dim());
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..maps.len())
            .into_par_iter()
            .map(|v| {
                let m = self.prepared(v, &maps[v], transform)?;
                view_partial(&self.weights[v], &m, dim)
            })
            .collect::<Result<_>>()?;
        let mut sums = UpliftSums::new(teacher, self.num_gaussians, dim);
        for p in &partials {
            sums.merge(p);
        }
        Ok(sums)
    }

    /// Uplifts one teacher over the session's views.
    pub fn uplift(
        &self,
        teacher: &TeacherViews<'_>,
        tau_w: f64,
        order: StandardizeOrder,
    ) -> Result<UpliftedTargets> {
        if self.weights.is_empty() {
            let dim = teacher.transform.map_or(teacher.dim, |x| x.output_dim());
            let n = self.num_gaussians();
            return Ok(finalize(&UpliftSums::new(teacher.teacher, n, dim), tau_w));
        }
        match order {
            StandardizeOrder::BeforeUplift => Ok(finalize(
                &self.accumulate(teacher.maps, teacher.transform)?,
                tau_w,
            )),
            StandardizeOrder::AfterUplift => {
                let raw = finalize(&self.accumulate(teacher.maps, None)?, tau_w);
                match teacher.transform {
                    Some(x) => raw.standardized(x),
                    None => Ok(raw),
                }
            }
        }
    }
}

/// Which order standardization and uplifting are composed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeOrder {
    #[default]
    BeforeUplift,
    AfterUplift,
}

/// One teacher's feature maps over all views, with an optional standardizer.
pub struct TeacherViews<'a> {
    pub teacher: TeacherId,
    pub dim: usize,
    pub maps: &'a [TeacherFeatureMap],
    pub transform: Option<&'a PhisTransform>,
}

/// Uplifts every teacher over the same views, rendering each view once.
pub fn uplift_all(
    rasterizer: &Rasterizer,
    scene: &GaussianScene,
    cameras: &[Camera],
    teachers: &[TeacherViews<'_>],
    tau_w: f64,
    order: StandardizeOrder,
) -> Result<Vec<UpliftedTargets>> {
    let session = UpliftSession::new(rasterizer, scene, cameras);
    teachers
        .iter()
        .map(|t| session.uplift(t, tau_w, order))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: &[f64], width: usize, dim: usize) -> TeacherFeatureMap {
        TeacherFeatureMap {
            teacher: TeacherId::Lang,
            height: 1,
            width,
            dim,
            data: values.to_vec(),
        }
    }

    #[test]
    fn single_pixel_accumulation() {
        let w = CompositeWeights::from_pixel_lists(1, 1, 1, &[vec![(0, 0.7)]], vec![0.3]);
        let mut sums = UpliftSums::new(TeacherId::Lang, 1, 2);
        sums.add_view(&w, &map(&[1.0, -2.0], 1, 2)).unwrap();
        let num = sums.numerator_row(0);
        assert!((num[0] - 0.7).abs() < 1e-15 && (num[1] + 1.4).abs() < 1e-15);
        assert!((sums.denominator[0].value() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn two_views_add() {
        let w = CompositeWeights::from_pixel_lists(1, 1, 1, &[vec![(0, 0.5)]], vec![0.5]);
        let mut sums = UpliftSums::new(TeacherId::Lang, 1, 1);
        sums.add_view(&w, &map(&[2.0], 1, 1)).unwrap();
        sums.add_view(&w, &map(&[4.0], 1, 1)).unwrap();
        assert!((sums.numerator_row(0)[0] - 3.0).abs() < 1e-15);
        assert!((sums.denominator[0].value() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_average_and_masking() {
        let w = CompositeWeights::from_pixel_lists(
            2,
            1,
            2,
            &[vec![(0, 0.6)], vec![(0, 0.2)]],
            vec![0.4, 0.8],
        );
        let mut sums = UpliftSums::new(TeacherId::Lang, 2, 1);
        sums.add_view(&w, &map(&[1.0, 5.0], 2, 1)).unwrap();
        let t = finalize(&sums, 0.05);
        assert!((t.features[(0, 0)] - (0.75 * 1.0 + 0.25 * 5.0)).abs() < 1e-12);
        assert_eq!(t.mask, vec![true, false]);
        assert_eq!(t.features[(1, 0)], 0.0);
    }

    #[test]
    fn chuf_round_trip() {
        let t = UpliftedTargets {
            teacher: TeacherId::Pe,
            features: DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]),
            total_weight: vec![1.5, 0.0],
            mask: vec![true, false],
        };
        let mut buf = Vec::new();
        t.write_chuf(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 12 + 1 + 24 + 8 + 2);
        assert_eq!(UpliftedTargets::read_chuf(&mut buf.as_slice()).unwrap(), t);
    }
}
