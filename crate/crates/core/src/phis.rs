//! PHI-S teacher standardization: PCA rotation, Hadamard mixing and a single
//! isotropic scale, so that every output channel carries the same variance
//! and the average channel variance is one.
//!
//! Inputs of dimension `d` are zero-padded to `d' = d.next_power_of_two()`
//! so a Sylvester Hadamard matrix exists for any `d`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scene::{read_exact, read_u32, TeacherFeatureMap};

const CHPS_MAGIC: &[u8; 4] = b"CHPS";
const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PhisTransform {
    pub mean: DVector<f64>,
    /// `d' x d'` orthogonal matrix, `H_{d'} * blockdiag(U, I)^T / sqrt(d')`.
    pub rotation: DMatrix<f64>,
    pub scale: f64,
    pub input_dim: usize,
}

/// Sylvester Hadamard matrix of order `n` (a power of two), entries +-1.
pub fn hadamard(n: usize) -> DMatrix<f64> {
    assert!(n.is_power_of_two(), "Hadamard order must be a power of two");
    DMatrix::from_fn(n, n, |i, j| {
        if (i & j).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    })
}

impl PhisTransform {
    pub fn output_dim(&self) -> usize {
        self.rotation.nrows()
    }

    /// Fits the transform on `samples` (one sample per row).
    pub fn fit(samples: &DMatrix<f64>) -> Result<Self> {
        let (m, d) = samples.shape();
        if d == 0 {
            return Err(Error::Precondition(
                "cannot standardize zero-dimensional features".into(),
            ));
        }
        if m <= d {
            return Err(Error::InsufficientSamples { needed: d, got: m });
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                index: i % m,
                message: "non-finite sample".into(),
            });
        }
        let mean = samples.row_mean().transpose();
        let mut centered = samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / m as f64;
        let cov = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov);
        let max_abs = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = eig.eigenvalues.min();
        if min < -1e-9 * max_abs.max(1e-300) && min < -1e-12 {
            return Err(Error::Numerical(format!(
                "covariance is not positive semi-definite (eigenvalue {min:e})"
            )));
        }
        // descending eigenvalue order
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let dp = d.next_power_of_two();
        let mut basis_t = DMatrix::<f64>::identity(dp, dp);
        let mut total = 0.0;
        for (row, &k) in order.iter().enumerate() {
            let mut v = eig.eigenvectors.column(k).into_owned();
            // deterministic sign: largest-magnitude component positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            for c in 0..d {
                basis_t[(row, c)] = v[c];
            }
            total += eig.eigenvalues[k].max(EIGEN_FLOOR);
        }
        let rotation = hadamard(dp) * basis_t / (dp as f64).sqrt();
        let scale = 1.0 / (total / dp as f64).sqrt();
        Ok(Self {
            mean,
            rotation,
            scale,
            input_dim: d,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::shape(self.input_dim, x.len()));
        }
        let mut padded = DVector::zeros(self.output_dim());
        for k in 0..self.input_dim {
            padded[k] = x[k] - self.mean[k];
        }
        Ok(&self.rotation * padded * self.scale)
    }

    pub fn invert(&self, y: &[f64]) -> Result<DVector<f64>> {
        if y.len() != self.output_dim() {
            return Err(Error::shape(self.output_dim(), y.len()));
        }
        let back = self.rotation.tr_mul(&DVector::from_column_slice(y)) / self.scale;
        Ok(DVector::from_fn(self.input_dim, |k, _| {
            self.mean[k] + back[k]
        }))
    }

    /// Applies the transform to every row.
    pub fn apply_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(self.input_dim, x.ncols()));
        }
        let mut padded = DMatrix::zeros(x.nrows(), self.output_dim());
        for i in 0..x.nrows() {
            for k in 0..self.input_dim {
                padded[(i, k)] = x[(i, k)] - self.mean[k];
            }
        }
        Ok(padded * self.rotation.transpose() * self.scale)
    }

    /// Inverse transform of every row.
    pub fn invert_rows(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.ncols() != self.output_dim() {
            return Err(Error::shape(self.output_dim(), y.ncols()));
        }
        let back = y * &self.rotation / self.scale;
        Ok(DMatrix::from_fn(y.nrows(), self.input_dim, |i, k| {
            back[(i, k)] + self.mean[k]
        }))
    }

    /// Standardizes every pixel of a feature map.
    pub fn apply_map(&self, map: &TeacherFeatureMap) -> Result<TeacherFeatureMap> {
        let rows = DMatrix::from_row_slice(map.height * map.width, map.dim, &map.data);
        let out = self.apply_rows(&rows)?;
        let mut data = Vec::with_capacity(out.len());
        for i in 0..out.nrows() {
            data.extend(out.row(i).iter());
        }
        Ok(TeacherFeatureMap {
            teacher: map.teacher,
            height: map.height,
            width: map.width,
            dim: self.output_dim(),
            data,
        })
    }

    pub fn write_chps(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHPS_MAGIC)?;
        w.write_all(&(self.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.output_dim() as u32).to_le_bytes())?;
        w.write_all(&self.scale.to_le_bytes())?;
        for v in self.mean.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for i in 0..self.output_dim() {
            for j in 0..self.output_dim() {
                w.write_all(&self.rotation[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_chps(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHPS_MAGIC {
            return Err(Error::Format("bad CHPS magic".into()));
        }
        let d = read_u32(r)? as usize;
        let dp = read_u32(r)? as usize;
        if dp < d || !dp.is_power_of_two() {
            return Err(Error::Format(format!("bad CHPS dimensions {d} -> {dp}")));
        }
        let mut f = || -> Result<f64> {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let scale = f()?;
        let mean = DVector::from_iterator(d, (0..d).map(|_| f()).collect::<Result<Vec<_>>>()?);
        let rot: Vec<f64> = (0..dp * dp).map(|_| f()).collect::<Result<_>>()?;
        Ok(Self {
            mean,
            rotation: DMatrix::from_row_slice(dp, dp, &rot),
            scale,
            input_dim: d,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_chps(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_chps(&mut f)
    }
}

/// Population variance of every column.
pub fn column_variances(x: &DMatrix<f64>) -> Vec<f64> {
    let m = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let mu = c.mean();
            c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{normal_sample, rng_for};

    fn gaussian_samples(m: usize, stds: &[f64], seed: u64) -> DMatrix<f64> {
        let mut rng = rng_for(seed, 0);
        DMatrix::from_fn(m, stds.len(), |_, k| stds[k] * normal_sample(&mut rng))
    }

    #[test]
    fn hadamard_is_orthogonal_up_to_scale() {
        let h = hadamard(8);
        assert_eq!(&h * h.transpose(), DMatrix::identity(8, 8) * 8.0);
    }

    #[test]
    fn isotropic_data_stays_unit_variance() {
        let x = gaussian_samples(20000, &[1.0; 8], 1);
        let t = PhisTransform::fit(&x).unwrap();
        assert_eq!(t.output_dim(), 8);
        for v in column_variances(&t.apply_rows(&x).unwrap()) {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn two_dim_principal_variances_four_and_one() {
        // exact population with covariance diag(4, 1) rotated by 30 degrees
        let (c, s) = (30f64.to_radians().cos(), 30f64.to_radians().sin());
        let pts = [(2.0, 1.0), (-2.0, 1.0), (2.0, -1.0), (-2.0, -1.0)];
        let x = DMatrix::from_fn(4, 2, |i, k| {
            let (a, b) = pts[i];
            if k == 0 {
                c * a - s * b
            } else {
                s * a + c * b
            }
        });
        let t = PhisTransform::fit(&x).unwrap();
        assert!((t.scale - 1.0 / 2.5f64.sqrt()).abs() < 1e-12);
        let unscaled = t.apply_rows(&x).unwrap() / t.scale;
        for v in column_variances(&unscaled) {
            assert!((v - 2.5).abs() < 1e-12, "{v}");
        }
        for v in column_variances(&t.apply_rows(&x).unwrap()) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn three_dims_pad_to_four() {
        let x = gaussian_samples(500, &[3.0, 1.0, 0.2], 2);
        let t = PhisTransform::fit(&x).unwrap();
        assert_eq!(t.output_dim(), 4);
        let y = t.apply_rows(&x).unwrap();
        let vars = column_variances(&y);
        for v in &vars {
            assert!((v - 1.0).abs() < 1e-3, "{vars:?}");
        }
        // energy scales by scale^2
        let row = x.row(3).transpose();
        let centered = &row - &t.mean;
        let out = t.apply(row.as_slice()).unwrap();
        assert!((out.norm_squared() - centered.norm_squared() * t.scale * t.scale).abs() < 1e-9);
    }

    #[test]
    fn apply_invert_properties() {
        let x = gaussian_samples(300, &[2.0, 1.0, 0.5, 0.1, 1.5], 3);
        let t = PhisTransform::fit(&x).unwrap();
        assert!(t.apply(t.mean.as_slice()).unwrap().norm() < 1e-12);
        assert!((t.invert(&[0.0; 8]).unwrap() - &t.mean).norm() < 1e-12);
        let a = x.row(0).transpose();
        let b = x.row(1).transpose();
        let ya = t.apply(a.as_slice()).unwrap();
        let yb = t.apply(b.as_slice()).unwrap();
        assert!(((ya.clone() - yb).norm() - t.scale * (a.clone() - b).norm()).abs() < 1e-10);
        assert!((t.invert(ya.as_slice()).unwrap() - a).norm() < 1e-10);
    }

    #[test]
    fn basis_vectors_map_to_pca_directions() {
        let x = gaussian_samples(2000, &[3.0, 1.0, 0.5], 4);
        let t = PhisTransform::fit(&x).unwrap();
        let h = hadamard(4) / 2.0;
        // y = scale * H e_0 / sqrt(d') inverts to mean + first principal axis
        let y: Vec<f64> = h.column(0).iter().map(|v| v * t.scale).collect();
        let dir = t.invert(&y).unwrap() - &t.mean;
        assert!((dir.norm() - 1.0).abs() < 1e-9);
        // the first principal axis of this population is close to +-x
        assert!(dir[0].abs() > 0.99);
        // a padded-channel direction carries no input-space component
        let y: Vec<f64> = h.column(3).iter().map(|v| v * t.scale).collect();
        assert!((t.invert(&y).unwrap() - &t.mean).norm() < 1e-9);
        // and images of apply have no padded component
        let img = t.apply(x.row(5).transpose().as_slice()).unwrap();
        let back = t.rotation.tr_mul(&img);
        assert!(back[3].abs() < 1e-9);
    }

    #[test]
    fn too_few_samples_and_shape_errors() {
        let x = gaussian_samples(4, &[1.0; 4], 5);
        assert!(matches!(
            PhisTransform::fit(&x),
            Err(Error::InsufficientSamples { .. })
        ));
        let t = PhisTransform::fit(&gaussian_samples(10, &[1.0; 4], 5)).unwrap();
        assert!(matches!(t.apply(&[0.0; 3]), Err(Error::Shape { .. })));
        assert!(matches!(t.invert(&[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn rank_deficient_population_is_tolerated() {
        let mut x = gaussian_samples(100, &[1.0, 1.0, 1.0], 6);
        for i in 0..100 {
            x[(i, 2)] = x[(i, 0)] + x[(i, 1)];
        }
        let t = PhisTransform::fit(&x).unwrap();
        let vars = column_variances(&t.apply_rows(&x).unwrap());
        let mean: f64 = vars.iter().sum::<f64>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn chps_round_trip() {
        let t = PhisTransform::fit(&gaussian_samples(50, &[1.0, 2.0, 3.0], 7)).unwrap();
        let mut buf = Vec::new();
        t.write_chps(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 8 + 3 * 8 + 16 * 8);
        assert_eq!(PhisTransform::read_chps(&mut buf.as_slice()).unwrap(), t);
    }
}
