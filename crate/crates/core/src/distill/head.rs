//! Per-teacher projector: Linear -> LayerNorm -> GELU -> Linear.

use nalgebra::DMatrix;
use rand::Rng;

use super::nn::{gelu_backward, gelu_forward, LayerNorm, LayerNormCache, Linear, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorHead {
    pub first: Linear,
    pub norm: LayerNorm,
    pub second: Linear,
}

pub struct HeadCache {
    input: DMatrix<f64>,
    norm: LayerNormCache,
    /// LayerNorm output, the GELU pre-activation.
    pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
}

impl ProjectorHead {
    pub fn init(d_z: usize, d_h: usize, d_t: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::init(d_z, d_h, rng),
            norm: LayerNorm::new(d_h),
            second: Linear::init(d_h, d_t, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            first: self.first.zeros_like(),
            norm: self.norm.zeros_like(),
            second: self.second.zeros_like(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.second.outputs()
    }

    pub fn forward(&self, z: &DMatrix<f64>) -> (DMatrix<f64>, HeadCache) {
        let a = self.first.forward(z);
        let (pre, norm) = self.norm.forward(&a);
        let hidden = gelu_forward(&pre);
        let y = self.second.forward(&hidden);
        (
            y,
            HeadCache {
                input: z.clone(),
                norm,
                pre,
                hidden,
            },
        )
    }

    pub fn project(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(z).0
    }

    /// Parameter gradients and `dL/dZ`.
    pub fn backward(&self, cache: &HeadCache, dy: &DMatrix<f64>) -> (ProjectorHead, DMatrix<f64>) {
        let (g_second, dh) = self.second.backward(&cache.hidden, dy);
        let dpre = gelu_backward(&cache.pre, &dh);
        let (g_norm, da) = self.norm.backward(&cache.norm, &dpre);
        let (g_first, dz) = self.first.backward(&cache.input, &da);
        (
            ProjectorHead {
                first: g_first,
                norm: g_norm,
                second: g_second,
            },
            dz,
        )
    }
}

impl Parameters for ProjectorHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        self.first.visit(&format!("{prefix}first"), f);
        self.norm.visit(&format!("{prefix}norm"), f);
        self.second.visit(&format!("{prefix}second"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        self.first.visit_mut(&format!("{prefix}first"), f);
        self.norm.visit_mut(&format!("{prefix}norm"), f);
        self.second.visit_mut(&format!("{prefix}second"), f);
    }
}
