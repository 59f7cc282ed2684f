//! Scene, camera and teacher-feature data model.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One anisotropic 3D Gaussian: center, per-axis scale, orientation,
/// base opacity and RGB color, plus an optional surface normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub normal: Option<Vector3<f64>>,
}

impl Gaussian {
    pub fn isotropic(center: Vector3<f64>, sigma: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Self {
            center,
            scale: Vector3::repeat(sigma),
            rotation: UnitQuaternion::identity(),
            opacity,
            color,
            normal: None,
        }
    }

    /// World-space covariance `R diag(s)^2 R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |message: &str| Error::Data {
            index,
            message: message.to_string(),
        };
        let q = self.rotation.quaternion();
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(bad("quaternion is not unit length"));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(bad("non-finite center"));
        }
        if !self.scale.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(bad("scale components must be positive"));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(bad("opacity outside [0, 1]"));
        }
        if !self.color.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(bad("color outside [0, 1]"));
        }
        Ok(())
    }
}

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        let mut any = false;
        for p in points {
            any = true;
            min = min.inf(p);
            max = max.sup(p);
        }
        if any {
            Self { min, max }
        } else {
            Self {
                min: Vector3::zeros(),
                max: Vector3::zeros(),
            }
        }
    }

    pub fn extent(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// An ordered set of Gaussians with optional per-Gaussian labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub semantic_labels: Option<Vec<u32>>,
    pub instance_labels: Option<Vec<u32>>,
    pub bounds: Aabb,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        let bounds = Aabb::from_points(gaussians.iter().map(|g| &g.center));
        Self {
            gaussians,
            semantic_labels: None,
            instance_labels: None,
            bounds,
        }
    }

    pub fn with_labels(mut self, semantic: Option<Vec<u32>>, instance: Option<Vec<u32>>) -> Self {
        self.semantic_labels = semantic;
        self.instance_labels = instance;
        self
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn recompute_bounds(&mut self) {
        self.bounds = Aabb::from_points(self.gaussians.iter().map(|g| &g.center));
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate(i)?;
        }
        for (name, labels) in [
            ("semantic", &self.semantic_labels),
            ("instance", &self.instance_labels),
        ] {
            if let Some(l) = labels {
                if l.len() != self.len() {
                    return Err(Error::shape(
                        format!("{} {name} labels", self.len()),
                        l.len(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of semantic classes (max label + 1), zero without labels.
    pub fn num_classes(&self) -> usize {
        self.semantic_labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    /// The scene restricted to `indices`, in the given order, labels included.
    pub fn subset(&self, indices: &[usize]) -> GaussianScene {
        let gaussians = indices.iter().map(|&i| self.gaussians[i].clone()).collect();
        let pick =
            |l: &Option<Vec<u32>>| l.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        GaussianScene::new(gaussians)
            .with_labels(pick(&self.semantic_labels), pick(&self.instance_labels))
    }
}

/// Pinhole intrinsics in pixels. Pixel `(x, y)` is sampled at coordinates `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Intrinsics with the given horizontal field of view (degrees) and a centered principal point.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self {
            width,
            height,
            fx,
            fy: fx,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
        }
    }

    /// Resolution divided by `factor`, focal lengths and principal point scaled to match.
    pub fn downsampled(&self, factor: u32) -> Self {
        let f = factor.max(1);
        let width = (self.width / f).max(1);
        let height = (self.height / f).max(1);
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            width,
            height,
            fx: self.fx * sx,
            fy: self.fy * sy,
            // keep pixel-center alignment: continuous coordinate x maps to (x + 0.5) * s - 0.5
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
        }
    }
}

/// A pinhole camera. `rotation`/`translation` map world points into camera
/// space (x right, y down, z forward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            intrinsics,
            rotation,
            translation,
        }
    }

    /// Camera at `position` looking along yaw (about +z, from +x) and pitch (up positive), zero roll.
    pub fn from_yaw_pitch(
        intrinsics: Intrinsics,
        position: Vector3<f64>,
        yaw: f64,
        pitch: f64,
    ) -> Self {
        let forward = Vector3::new(
            yaw.cos() * pitch.cos(),
            yaw.sin() * pitch.cos(),
            pitch.sin(),
        );
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        Self::new(intrinsics, rotation, translation)
    }

    /// Camera at `eye` looking at `target` with +z up.
    pub fn look_at(intrinsics: Intrinsics, eye: Vector3<f64>, target: Vector3<f64>) -> Self {
        let d = target - eye;
        let yaw = d.y.atan2(d.x);
        let pitch = d.z.atan2((d.x * d.x + d.y * d.y).sqrt());
        Self::from_yaw_pitch(intrinsics, eye, yaw, pitch)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// (yaw, pitch) in radians of the viewing direction.
    pub fn yaw_pitch(&self) -> (f64, f64) {
        let f = self.forward();
        (f.y.atan2(f.x), f.z.atan2((f.x * f.x + f.y * f.y).sqrt()))
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Self {
        Self {
            intrinsics,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::Precondition("focal lengths must be positive".into()));
        }
        if !(k.cx >= 0.0 && k.cx < k.width as f64 && k.cy >= 0.0 && k.cy < k.height as f64) {
            return Err(Error::Precondition(
                "principal point outside the image".into(),
            ));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if err > 1e-6 {
            return Err(Error::Precondition(format!(
                "camera rotation not orthonormal (error {err:e})"
            )));
        }
        Ok(())
    }
}

/// The three teacher roles: language-aligned, generalist and object-aware.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherId {
    Lang,
    Dino,
    Pe,
}

impl TeacherId {
    pub const ALL: [TeacherId; 3] = [TeacherId::Lang, TeacherId::Dino, TeacherId::Pe];

    pub fn as_u8(self) -> u8 {
        match self {
            TeacherId::Lang => 0,
            TeacherId::Dino => 1,
            TeacherId::Pe => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(TeacherId::Lang),
            1 => Ok(TeacherId::Dino),
            2 => Ok(TeacherId::Pe),
            _ => Err(Error::Format(format!("unknown teacher id {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TeacherId::Lang => "lang",
            TeacherId::Dino => "dino",
            TeacherId::Pe => "pe",
        }
    }
}

impl fmt::Display for TeacherId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TeacherId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lang" => Ok(TeacherId::Lang),
            "dino" => Ok(TeacherId::Dino),
            "pe" => Ok(TeacherId::Pe),
            _ => Err(Error::Config(format!("unknown teacher '{s}'"))),
        }
    }
}

/// A per-pixel teacher feature image, row-major with channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatureMap {
    pub teacher: TeacherId,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

const CHFM_MAGIC: &[u8; 4] = b"CHFM";

impl TeacherFeatureMap {
    pub fn zeros(teacher: TeacherId, height: usize, width: usize, dim: usize) -> Self {
        Self {
            teacher,
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.height * self.width * self.dim;
        if self.data.len() != expected {
            return Err(Error::shape(expected, self.data.len()));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                index: i,
                message: "non-finite feature value".into(),
            });
        }
        Ok(())
    }

    /// Bilinear resampling to `height x width` (half-pixel-center convention).
    pub fn resized(&self, height: usize, width: usize) -> TeacherFeatureMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = TeacherFeatureMap::zeros(self.teacher, height, width, self.dim);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let sample = |pos: f64, n: usize| {
            let p = pos.clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        };
        for y in 0..height {
            let (y0, y1, ty) = sample((y as f64 + 0.5) * sy - 0.5, self.height);
            for x in 0..width {
                let (x0, x1, tx) = sample((x as f64 + 0.5) * sx - 0.5, self.width);
                let (a, b, c, d) = (
                    self.pixel(x0, y0),
                    self.pixel(x1, y0),
                    self.pixel(x0, y1),
                    self.pixel(x1, y1),
                );
                let dst = out.pixel_mut(x, y);
                for k in 0..self.dim {
                    let top = a[k] * (1.0 - tx) + b[k] * tx;
                    let bottom = c[k] * (1.0 - tx) + d[k] * tx;
                    dst[k] = top * (1.0 - ty) + bottom * ty;
                }
            }
        }
        out
    }

    pub fn write_chfm(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHFM_MAGIC)?;
        for v in [1u32, self.height as u32, self.width as u32, self.dim as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_chfm(r: &mut impl Read, teacher: TeacherId) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHFM_MAGIC {
            return Err(Error::Format("bad CHFM magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported CHFM version {version}")));
        }
        let height = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let n = height * width * dim;
        let mut bytes = vec![0u8; n * 4];
        read_exact(r, &mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let map = Self {
            teacher,
            height,
            width,
            dim,
            data,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_chfm(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, teacher: TeacherId) -> Result<Self> {
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_chfm(&mut f, teacher)
    }
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated input: {e}")))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaw_pitch_camera_is_orthonormal_and_faces_forward() {
        let k = Intrinsics::from_fov(64, 48, 90.0);
        let cam = Camera::from_yaw_pitch(k, Vector3::new(1.0, 2.0, 1.5), 0.7, 0.2);
        cam.validate().unwrap();
        assert!((cam.position() - Vector3::new(1.0, 2.0, 1.5)).norm() < 1e-12);
        let (yaw, pitch) = cam.yaw_pitch();
        assert!((yaw - 0.7).abs() < 1e-12 && (pitch - 0.2).abs() < 1e-12);
        // a point straight ahead lands on the optical axis
        let p = cam.position() + cam.forward() * 3.0;
        let c = cam.to_camera(&p);
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && (c.z - 3.0).abs() < 1e-12);
        // +z world is "up", i.e. negative camera y
        let up = cam.to_camera(&(p + Vector3::z())) - c;
        assert!(up.y < 0.0);
    }

    #[test]
    fn chfm_round_trip_and_bad_magic() {
        let mut m = TeacherFeatureMap::zeros(TeacherId::Dino, 2, 3, 4);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = i as f64 * 0.25 - 1.0;
        }
        let mut buf = Vec::new();
        m.write_chfm(&mut buf).unwrap();
        assert_eq!(buf.len(), 20 + 2 * 3 * 4 * 4);
        assert_eq!(&buf[..4], b"CHFM");
        let back = TeacherFeatureMap::read_chfm(&mut buf.as_slice(), TeacherId::Dino).unwrap();
        assert_eq!(back, m);
        buf[0] = b'X';
        assert!(matches!(
            TeacherFeatureMap::read_chfm(&mut buf.as_slice(), TeacherId::Dino),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bilinear_resize_of_constant_and_ramp() {
        let mut m = TeacherFeatureMap::zeros(TeacherId::Lang, 2, 2, 1);
        m.data = vec![0.0, 1.0, 0.0, 1.0];
        let up = m.resized(4, 4);
        // half-pixel convention: columns map to -0.25, 0.25, 0.75, 1.25 in source space
        let row: Vec<f64> = (0..4).map(|x| up.pixel(x, 0)[0]).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
        assert_eq!(m.resized(2, 2), m);
    }

    #[test]
    fn downsampled_intrinsics_preserve_pixel_centers() {
        let k = Intrinsics {
            width: 640,
            height: 480,
            fx: 500.0,
            fy: 500.0,
            cx: 319.5,
            cy: 239.5,
        };
        let d = k.downsampled(4);
        assert_eq!((d.width, d.height), (160, 120));
        assert!((d.cx - 79.5).abs() < 1e-12 && (d.fx - 125.0).abs() < 1e-12);
    }
}
