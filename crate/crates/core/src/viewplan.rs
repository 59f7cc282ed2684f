//! Camera placement for adaptation: navigable-space sampling with farthest
//! point sampling, horizontal candidate directions, visibility culling with
//! crop boxes, and overlap-ranked view pairing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rasterizer;
use crate::scene::{Camera, GaussianScene, Intrinsics};
use crate::synth::{mix_seed, rng_for};

/// Planner settings. Distances are in world units, angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewPlanConfig {
    pub positions: usize,
    pub eye_height: f64,
    pub voxel: f64,
    pub clearance: f64,
    pub d_min: f64,
    pub cone_deg: f64,
    /// Draw a seeded pitch in `[-pitch_jitter_deg, pitch_jitter_deg]` per view instead of 0.
    pub pitch_jitter_deg: Option<f64>,
    pub min_overlap: f64,
    pub max_pairs_per_view: usize,
    pub min_visible_weight: f64,
    pub seed: u64,
}

impl Default for ViewPlanConfig {
    fn default() -> Self {
        Self {
            positions: 8,
            eye_height: 1.5,
            voxel: 0.25,
            clearance: 0.3,
            d_min: 0.5,
            cone_deg: 10.0,
            pitch_jitter_deg: None,
            min_overlap: 0.1,
            max_pairs_per_view: 3,
            min_visible_weight: 1e-6,
            seed: 0,
        }
    }
}

/// Centers of navigable voxels, in deterministic (column-major x, then y) order.
///
/// Each occupied x/y column contributes the voxel `eye_height` above its lowest
/// occupied voxel, provided no Gaussian center lies within `clearance` of it.
pub fn navigable_voxels(
    scene: &GaussianScene,
    eye_height: f64,
    voxel: f64,
    clearance: f64,
) -> Result<Vec<Vector3<f64>>> {
    if scene.is_empty() {
        return Err(Error::Planning("scene is empty".into()));
    }
    if voxel.is_nan() || voxel <= 0.0 {
        return Err(Error::Config(format!(
            "voxel size {voxel} must be positive"
        )));
    }
    let lo = scene.bounds.min;
    let cell = |v: f64, o: f64| ((v - o) / voxel).floor() as i64;
    let mut floor: BTreeMap<(i64, i64), i64> = BTreeMap::new();
    for g in &scene.gaussians {
        let key = (cell(g.center.x, lo.x), cell(g.center.y, lo.y));
        let z = cell(g.center.z, lo.z);
        floor
            .entry(key)
            .and_modify(|f| *f = (*f).min(z))
            .or_insert(z);
    }
    let lift = (eye_height / voxel).round() as i64;
    let r2 = clearance * clearance;
    let out = floor
        .iter()
        .map(|(&(ix, iy), &iz)| {
            Vector3::new(
                lo.x + (ix as f64 + 0.5) * voxel,
                lo.y + (iy as f64 + 0.5) * voxel,
                lo.z + ((iz + lift) as f64 + 0.5) * voxel,
            )
        })
        .filter(|c| {
            scene
                .gaussians
                .iter()
                .all(|g| (g.center - c).norm_squared() >= r2)
        })
        .collect();
    Ok(out)
}

/// Farthest point sampling starting from the point nearest the centroid.
/// Ties are broken by the lower index.
pub fn farthest_point_sampling(points: &[Vector3<f64>], k: usize) -> Vec<usize> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let argmax = |score: &dyn Fn(usize) -> f64| {
        (0..points.len()).fold(0, |best, i| if score(i) > score(best) { i } else { best })
    };
    let start = argmax(&|i| -(points[i] - centroid).norm_squared());
    let mut chosen = vec![start];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| (p - points[start]).norm_squared())
        .collect();
    while chosen.len() < k.min(points.len()) {
        let next = argmax(&|i| dist[i]);
        if dist[next] <= 0.0 {
            break;
        }
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    chosen
}

/// Up to `k` camera positions spread over the navigable space.
pub fn sample_positions(
    scene: &GaussianScene,
    k: usize,
    eye_height: f64,
    voxel: f64,
    clearance: f64,
) -> Result<Vec<Vector3<f64>>> {
    if k == 0 {
        return Err(Error::Config("position count must be at least 1".into()));
    }
    let nav = navigable_voxels(scene, eye_height, voxel, clearance)?;
    if nav.is_empty() {
        return Err(Error::Planning("no navigable voxels".into()));
    }
    Ok(farthest_point_sampling(&nav, k)
        .into_iter()
        .map(|i| nav[i])
        .collect())
}

/// Distance to the nearest Gaussian center within `cone_deg` of `direction`.
pub fn nearest_in_cone(
    scene: &GaussianScene,
    position: &Vector3<f64>,
    direction: &Vector3<f64>,
    cone_deg: f64,
) -> Option<f64> {
    let cos_cone = cone_deg.to_radians().cos();
    let dir = direction.normalize();
    scene
        .gaussians
        .iter()
        .filter_map(|g| {
            let v = g.center - position;
            let d = v.norm();
            (d > 0.0 && v.dot(&dir) >= cos_cone * d).then_some(d)
        })
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
}

/// A horizontal viewing direction at one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedView {
    pub position: Vector3<f64>,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

impl PlannedView {
    pub fn camera(&self, intrinsics: Intrinsics) -> Camera {
        Camera::from_yaw_pitch(
            intrinsics,
            self.position,
            self.yaw_deg.to_radians(),
            self.pitch_deg.to_radians(),
        )
    }
}

/// The eight 45-degree yaw directions at `position`, minus those blocked by
/// scene content closer than `d_min` inside the cone.
pub fn candidate_views(
    position: &Vector3<f64>,
    scene: &GaussianScene,
    d_min: f64,
    cone_deg: f64,
) -> Vec<PlannedView> {
    (0..8)
        .map(|i| i as f64 * 45.0)
        .filter(|yaw: &f64| {
            let dir = Vector3::new(yaw.to_radians().cos(), yaw.to_radians().sin(), 0.0);
            nearest_in_cone(scene, position, &dir, cone_deg).is_none_or(|d| d >= d_min)
        })
        .map(|yaw_deg| PlannedView {
            position: *position,
            yaw_deg,
            pitch_deg: 0.0,
        })
        .collect()
}

/// A camera with its visible Gaussians and their screen-space bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewCandidate {
    pub camera: Camera,
    /// Sorted indices of Gaussians with a recorded weight of at least the threshold.
    pub visible: Vec<usize>,
    /// `[xmin, ymin, xmax, ymax]` over projected means of visible splats.
    pub bbox2d: Option<[f64; 4]>,
}

pub fn cull_and_crop(
    rasterizer: &Rasterizer,
    camera: &Camera,
    scene: &GaussianScene,
    min_weight: f64,
) -> ViewCandidate {
    let out = rasterizer.render(scene, camera);
    let visible = out.weights.visible(min_weight);
    let k = &camera.intrinsics;
    let bbox2d = visible.iter().fold(None, |bb: Option<[f64; 4]>, &i| {
        let c = camera.to_camera(&scene.gaussians[i].center);
        let (x, y) = (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
        Some(match bb {
            None => [x, y, x, y],
            Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
        })
    });
    ViewCandidate {
        camera: *camera,
        visible,
        bbox2d,
    }
}

/// Jaccard index of two sorted index sets (1 for two empty sets).
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewPair {
    pub a: usize,
    pub b: usize,
    pub overlap: f64,
}

/// For each view, its best-overlapping partners (descending overlap, ties by
/// index) with overlap at least `min_overlap`, at most `max_pairs_per_view`
/// each; pairs are deduplicated with `a < b` and returned sorted.
pub fn pair_views(
    visible: &[Vec<usize>],
    min_overlap: f64,
    max_pairs_per_view: usize,
) -> Vec<ViewPair> {
    let n = visible.len();
    let mut overlap = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let o = jaccard(&visible[a], &visible[b]);
            overlap[a][b] = o;
            overlap[b][a] = o;
        }
    }
    let mut pairs = std::collections::BTreeSet::new();
    for a in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        others.sort_by(|&x, &y| overlap[a][y].total_cmp(&overlap[a][x]).then(x.cmp(&y)));
        for b in others
            .into_iter()
            .filter(|&b| overlap[a][b] >= min_overlap)
            .take(max_pairs_per_view)
        {
            pairs.insert((a.min(b), a.max(b)));
        }
    }
    pairs
        .into_iter()
        .map(|(a, b)| ViewPair {
            a,
            b,
            overlap: overlap[a][b],
        })
        .collect()
}

/// A complete plan: shared intrinsics, the kept views and their pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPlan {
    pub intrinsics: Intrinsics,
    pub views: Vec<PlannedView>,
    pub pairs: Vec<ViewPair>,
}

impl ViewPlan {
    pub fn cameras(&self) -> Vec<Camera> {
        self.views
            .iter()
            .map(|v| v.camera(self.intrinsics))
            .collect()
    }

    /// Groups of up to `size` views: each paired view followed by its
    /// highest-overlap partners. Views without partners are skipped.
    pub fn groups(&self, size: usize) -> Vec<Vec<usize>> {
        let mut groups = Vec::new();
        for anchor in 0..self.views.len() {
            let mut partners: Vec<(usize, f64)> = self
                .pairs
                .iter()
                .filter_map(|p| {
                    if p.a == anchor {
                        Some((p.b, p.overlap))
                    } else if p.b == anchor {
                        Some((p.a, p.overlap))
                    } else {
                        None
                    }
                })
                .collect();
            if partners.is_empty() {
                continue;
            }
            partners.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            let mut g = vec![anchor];
            g.extend(partners.iter().take(size.saturating_sub(1)).map(|p| p.0));
            groups.push(g);
        }
        groups
    }

    /// Line-oriented text form.
    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = String::from(
            "# view plan: camera <idx> <x> <y> <z> <yaw_deg> <pitch_deg> <intrinsics id>\n",
        );
        let _ = writeln!(
            s,
            "intrinsics 0 {} {} {} {} {} {}",
            k.width, k.height, k.fx, k.fy, k.cx, k.cy
        );
        for (i, v) in self.views.iter().enumerate() {
            let p = v.position;
            let _ = writeln!(
                s,
                "camera {i} {} {} {} {} {} 0",
                p.x, p.y, p.z, v.yaw_deg, v.pitch_deg
            );
        }
        s.push_str("pairs\n");
        for p in &self.pairs {
            let _ = writeln!(s, "pair {} {} {}", p.a, p.b, p.overlap);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut intrinsics = None;
        let mut views = Vec::new();
        let mut pairs = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line == "pairs" {
                continue;
            }
            let bad = |m: &str| Error::Format(format!("plan line {}: {m}", ln + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                fields
                    .get(i)
                    .ok_or_else(|| bad("missing field"))?
                    .parse::<f64>()
                    .map_err(|_| bad("bad number"))
            };
            match fields[0] {
                "intrinsics" if fields.len() == 8 => {
                    if num(1)? != 0.0 {
                        return Err(bad("only intrinsics id 0 is supported"));
                    }
                    intrinsics = Some(Intrinsics {
                        width: num(2)? as u32,
                        height: num(3)? as u32,
                        fx: num(4)?,
                        fy: num(5)?,
                        cx: num(6)?,
                        cy: num(7)?,
                    });
                }
                "camera" if fields.len() == 8 => {
                    if num(1)? as usize != views.len() {
                        return Err(bad("camera indices must be consecutive from 0"));
                    }
                    views.push(PlannedView {
                        position: Vector3::new(num(2)?, num(3)?, num(4)?),
                        yaw_deg: num(5)?,
                        pitch_deg: num(6)?,
                    });
                }
                "pair" if fields.len() == 4 => pairs.push(ViewPair {
                    a: num(1)? as usize,
                    b: num(2)? as usize,
                    overlap: num(3)?,
                }),
                _ => return Err(bad("unrecognized record")),
            }
        }
        let intrinsics =
            intrinsics.ok_or_else(|| Error::Format("plan has no intrinsics record".into()))?;
        if pairs
            .iter()
            .any(|p| p.a >= views.len() || p.b >= views.len())
        {
            return Err(Error::Format("pair references a missing camera".into()));
        }
        Ok(Self {
            intrinsics,
            views,
            pairs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Runs the full planner: positions, candidate directions, culling, pairing.
/// Views that see nothing are dropped. Returns the plan and per-view visible sets.
pub fn plan_views(
    rasterizer: &Rasterizer,
    scene: &GaussianScene,
    intrinsics: Intrinsics,
    cfg: &ViewPlanConfig,
) -> Result<(ViewPlan, Vec<Vec<usize>>)> {
    let positions = sample_positions(
        scene,
        cfg.positions,
        cfg.eye_height,
        cfg.voxel,
        cfg.clearance,
    )?;
    let per_position: Vec<Vec<(PlannedView, Vec<usize>)>> = positions
        .par_iter()
        .enumerate()
        .map(|(pi, pos)| {
            candidate_views(pos, scene, cfg.d_min, cfg.cone_deg)
                .into_iter()
                .enumerate()
                .map(|(vi, mut v)| {
                    if let Some(j) = cfg.pitch_jitter_deg {
                        let mut rng = rng_for(mix_seed(cfg.seed, pi as u64), vi as u64);
                        v.pitch_deg = rand::Rng::random_range(&mut rng, -j..=j);
                    }
                    let c = cull_and_crop(
                        rasterizer,
                        &v.camera(intrinsics),
                        scene,
                        cfg.min_visible_weight,
                    );
                    (v, c.visible)
                })
                .filter(|(_, vis)| !vis.is_empty())
                .collect()
        })
        .collect();
    let (views, visible): (Vec<_>, Vec<_>) = per_position.into_iter().flatten().unzip();
    let pairs = pair_views(&visible, cfg.min_overlap, cfg.max_pairs_per_view);
    Ok((
        ViewPlan {
            intrinsics,
            views,
            pairs,
        },
        visible,
    ))
}

/// Fraction of Gaussians seen by at least one view.
pub fn coverage(num_gaussians: usize, visible: &[Vec<usize>]) -> f64 {
    let mut seen = vec![false; num_gaussians];
    for v in visible {
        for &i in v {
            seen[i] = true;
        }
    }
    if num_gaussians == 0 {
        1.0
    } else {
        seen.iter().filter(|&&s| s).count() as f64 / num_gaussians as f64
    }
}
