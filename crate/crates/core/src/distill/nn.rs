//! Dense layers with hand-written backward passes.

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Anything holding trainable tensors. Tensors are visited in a fixed order,
/// which defines the flat parameter layout used by the optimizer and the
/// checkpoint format. Slices are column-major.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64]));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut o = 0;
        self.visit_mut("", &mut |_, _, s| {
            s.copy_from_slice(&flat[o..o + s.len()]);
            o += s.len();
        });
        assert_eq!(o, flat.len(), "flat parameter length mismatch");
    }

    /// Names and shapes in visit order.
    fn layout(&self, prefix: &str) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, shape, _| out.push((n, shape)));
        out
    }
}

/// `y = x W + b` on row-major batches: `x` is N x in, `W` is in x out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: DMatrix<f64>,
    pub bias: RowDVector<f64>,
}

impl Linear {
    /// Uniform `[-1/sqrt(in), 1/sqrt(in)]` initialization for weights and biases.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(inputs, outputs, |_, _| rng.random_range(-bound..bound)),
            bias: RowDVector::from_fn(outputs, |_, _| rng.random_range(-bound..bound)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: RowDVector::zeros(self.bias.ncols()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weight;
        for mut row in y.row_iter_mut() {
            row += &self.bias;
        }
        y
    }

    /// Returns the parameter gradient and `dL/dx`.
    pub fn backward(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>) -> (Linear, DMatrix<f64>) {
        let grad = Linear {
            weight: x.transpose() * dy,
            bias: dy.row_sum(),
        };
        (grad, dy * self.weight.transpose())
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        f(
            format!("{prefix}.weight"),
            self.weight.shape(),
            self.weight.as_slice(),
        );
        f(
            format!("{prefix}.bias"),
            self.bias.shape(),
            self.bias.as_slice(),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        let shape = self.weight.shape();
        f(
            format!("{prefix}.weight"),
            shape,
            self.weight.as_mut_slice(),
        );
        let shape = self.bias.shape();
        f(format!("{prefix}.bias"), shape, self.bias.as_mut_slice());
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn gelu_forward(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(gelu)
}

/// `dL/dx` given the pre-activation `x` and `dL/dy`.
pub fn gelu_backward(x: &DMatrix<f64>, dy: &DMatrix<f64>) -> DMatrix<f64> {
    x.zip_map(dy, |x, d| gelu_grad(x) * d)
}

/// Per-row layer normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: RowDVector<f64>,
    pub shift: RowDVector<f64>,
}

/// Normalized rows and per-row inverse standard deviations, kept for backward.
pub struct LayerNormCache {
    pub normalized: DMatrix<f64>,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: RowDVector::from_element(width, 1.0),
            shift: RowDVector::zeros(width),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gain: RowDVector::zeros(self.gain.ncols()),
            shift: RowDVector::zeros(self.shift.ncols()),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.row_iter_mut() {
            let mean = row.sum() / d;
            row.add_scalar_mut(-mean);
            let var = row.norm_squared() / d;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= s;
            inv_std.push(s);
        }
        let mut y = normalized.clone();
        for mut row in y.row_iter_mut() {
            row.component_mul_assign(&self.gain);
            row += &self.shift;
        }
        (
            y,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &DMatrix<f64>) -> (LayerNorm, DMatrix<f64>) {
        let d = dy.ncols() as f64;
        let grad = LayerNorm {
            gain: dy.component_mul(&cache.normalized).row_sum(),
            shift: dy.row_sum(),
        };
        let mut dx = dy.clone();
        for (r, mut row) in dx.row_iter_mut().enumerate() {
            row.component_mul_assign(&self.gain);
            let xhat = cache.normalized.row(r);
            let mean_g = row.sum() / d;
            let mean_gx = row.dot(&xhat) / d;
            for k in 0..row.ncols() {
                row[k] = cache.inv_std[r] * (row[k] - mean_g - xhat[k] * mean_gx);
            }
        }
        (grad, dx)
    }
}

impl Parameters for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        f(
            format!("{prefix}.gain"),
            self.gain.shape(),
            self.gain.as_slice(),
        );
        f(
            format!("{prefix}.shift"),
            self.shift.shape(),
            self.shift.as_slice(),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        let shape = self.gain.shape();
        f(format!("{prefix}.gain"), shape, self.gain.as_mut_slice());
        let shape = self.shift.shape();
        f(format!("{prefix}.shift"), shape, self.shift.as_mut_slice());
    }
}
