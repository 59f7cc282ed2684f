//! Standardizer properties on random correlated populations, checked with
//! covariance arithmetic written out in the test.

use gsdistill::phis::PhisTransform;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const DIMS: [usize; 5] = [2, 3, 8, 16, 33];

/// `m` samples of `A z + b` with anisotropic, correlated `A`.
fn population(rng: &mut impl Rng, m: usize, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let spread = DVector::from_fn(d, |_, _| rng.random_range(-3.0f64..3.0).exp());
    let b = DVector::from_fn(d, |_, _| rng.random_range(-5.0..5.0));
    DMatrix::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal))
        * a.transpose()
        * DMatrix::from_diagonal(&spread)
        + DMatrix::from_fn(m, d, |_, k| b[k])
}

fn channel_variances(y: &DMatrix<f64>) -> Vec<f64> {
    let m = y.nrows() as f64;
    y.column_iter()
        .map(|c| {
            let mean = c.sum() / m;
            c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m
        })
        .collect()
}

#[test]
fn twenty_random_populations() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..20 {
        let d = DIMS[trial % DIMS.len()];
        let x = population(&mut rng, 400 + 50 * d, d);
        let t = PhisTransform::fit(&x).unwrap();
        let y = t.apply_rows(&x).unwrap();

        let var = channel_variances(&y);
        let mean = var.iter().sum::<f64>() / var.len() as f64;
        let spread = var.iter().fold(0.0f64, |s, v| s.max((v - mean).abs()));
        assert!(
            (mean - 1.0).abs() <= 1e-4,
            "trial {trial} d={d}: mean variance {mean}"
        );
        assert!(
            spread <= 1e-4,
            "trial {trial} d={d}: variances differ by {spread}"
        );

        let r = &t.rotation;
        let gram = r.transpose() * r;
        let ortho = (gram - DMatrix::identity(r.ncols(), r.ncols())).amax();
        assert!(
            ortho <= 1e-6,
            "trial {trial} d={d}: orthogonality error {ortho}"
        );

        let back = t.invert_rows(&y).unwrap();
        let round_trip = (&back - &x).amax();
        assert!(
            round_trip <= 1e-6,
            "trial {trial} d={d}: round trip error {round_trip}"
        );
    }
}

#[test]
fn rotation_preserves_cross_channel_geometry() {
    // inner products of centered samples only change by the isotropic scale
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = population(&mut rng, 300, 6);
    let t = PhisTransform::fit(&x).unwrap();
    let y = t.apply_rows(&x).unwrap();
    let centered = &x - DMatrix::from_fn(x.nrows(), x.ncols(), |_, k| t.mean[k]);
    let gx = &centered * centered.transpose() * t.scale * t.scale;
    let gy = &y * y.transpose();
    assert!((gx - &gy).amax() <= 1e-8 * gy.amax());
}
