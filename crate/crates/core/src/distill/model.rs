//! The shared encoder plus per-teacher projector heads, and its checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::{Encoder, EncoderCache, EncoderConfig, EncoderInput};
use super::head::{HeadCache, ProjectorHead};
use super::nn::Parameters;
use crate::error::{Error, Result};
use crate::phis::PhisTransform;
use crate::scene::{read_exact, read_u32, GaussianScene, TeacherId};

const CHMD_MAGIC: &[u8; 4] = b"CHMD";

/// A teacher and its (standardized) feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherDim {
    pub teacher: TeacherId,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub teachers: Vec<TeacherDim>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: 64,
            teachers: vec![
                TeacherDim {
                    teacher: TeacherId::Lang,
                    dim: 16,
                },
                TeacherDim {
                    teacher: TeacherId::Dino,
                    dim: 32,
                },
                TeacherDim {
                    teacher: TeacherId::Pe,
                    dim: 8,
                },
            ],
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub heads: BTreeMap<TeacherId, ProjectorHead>,
    /// Standardizers mapping raw teacher features into head output space.
    pub phis: BTreeMap<TeacherId, PhisTransform>,
}

/// Gradient of every trainable tensor, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub encoder: Encoder,
    pub heads: BTreeMap<TeacherId, ProjectorHead>,
}

/// Everything a backward pass needs from a forward pass.
pub struct ModelForward {
    pub z: DMatrix<f64>,
    encoder: EncoderCache,
    heads: BTreeMap<TeacherId, HeadCache>,
    pub predictions: BTreeMap<TeacherId, DMatrix<f64>>,
}

impl DistillModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.encoder.validate()?;
        if config.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let encoder = Encoder::init(&config.encoder, &mut rng);
        let mut heads = BTreeMap::new();
        for t in &config.teachers {
            if t.dim == 0 {
                return Err(Error::Config(format!(
                    "teacher {} has dimension 0",
                    t.teacher
                )));
            }
            let head =
                ProjectorHead::init(config.encoder.out_dim, config.head_hidden, t.dim, &mut rng);
            if heads.insert(t.teacher, head).is_some() {
                return Err(Error::Config(format!("teacher {} listed twice", t.teacher)));
            }
        }
        Ok(Self {
            config,
            encoder,
            heads,
            phis: BTreeMap::new(),
        })
    }

    pub fn teachers(&self) -> Vec<TeacherId> {
        self.heads.keys().copied().collect()
    }

    pub fn head(&self, teacher: TeacherId) -> Result<&ProjectorHead> {
        self.heads
            .get(&teacher)
            .ok_or_else(|| Error::Config(format!("model has no {teacher} head")))
    }

    pub fn input(&self, scene: &GaussianScene) -> Result<EncoderInput> {
        EncoderInput::build(scene, &self.config.encoder)
    }

    pub fn encode(&self, scene: &GaussianScene) -> Result<DMatrix<f64>> {
        Ok(self.encoder.encode(&self.input(scene)?))
    }

    /// Head predictions for `teacher`, in standardized teacher space.
    pub fn predict(&self, scene: &GaussianScene, teacher: TeacherId) -> Result<DMatrix<f64>> {
        let z = self.encode(scene)?;
        Ok(self.head(teacher)?.project(&z))
    }

    /// Head predictions mapped back into raw teacher space when a standardizer is attached.
    pub fn predict_raw(&self, scene: &GaussianScene, teacher: TeacherId) -> Result<DMatrix<f64>> {
        let p = self.predict(scene, teacher)?;
        match self.phis.get(&teacher) {
            Some(t) => t.invert_rows(&p),
            None => Ok(p),
        }
    }

    pub fn forward(&self, input: &EncoderInput, teachers: &[TeacherId]) -> Result<ModelForward> {
        let (z, encoder) = self.encoder.forward(input);
        let mut heads = BTreeMap::new();
        let mut predictions = BTreeMap::new();
        for &t in teachers {
            let (p, cache) = self.head(t)?.forward(&z);
            heads.insert(t, cache);
            predictions.insert(t, p);
        }
        Ok(ModelForward {
            z,
            encoder,
            heads,
            predictions,
        })
    }

    /// Backpropagates prediction gradients of the teachers evaluated in `fwd`.
    pub fn backward(
        &self,
        input: &EncoderInput,
        fwd: &ModelForward,
        dpred: &BTreeMap<TeacherId, DMatrix<f64>>,
    ) -> ModelGrad {
        let mut grad = self.zero_grad();
        let mut dz = DMatrix::zeros(fwd.z.nrows(), fwd.z.ncols());
        for (t, d) in dpred {
            let (Some(cache), Some(head)) = (fwd.heads.get(t), self.heads.get(t)) else {
                continue;
            };
            let (g, dzt) = head.backward(cache, d);
            dz += dzt;
            grad.heads.insert(*t, g);
        }
        grad.encoder = self.encoder.backward(input, &fwd.encoder, &dz);
        grad
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            encoder: self.encoder.zeros_like(),
            heads: self
                .heads
                .iter()
                .map(|(t, h)| (*t, h.zeros_like()))
                .collect(),
        }
    }

    pub fn write_chmd(&self, w: &mut impl Write) -> Result<()> {
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHMD_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&Sha256::digest(&json));
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        let mut records: Vec<(String, DMatrix<f64>)> = Vec::new();
        self.visit("", &mut |name, (r, c), s| {
            records.push((name, DMatrix::from_column_slice(r, c, s)));
        });
        for (t, p) in &self.phis {
            records.push((
                format!("phis.{t}.mean"),
                DMatrix::from_column_slice(p.mean.len(), 1, p.mean.as_slice()),
            ));
            records.push((format!("phis.{t}.rotation"), p.rotation.clone()));
            records.push((
                format!("phis.{t}.scale"),
                DMatrix::from_element(1, 1, p.scale),
            ));
        }
        buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, m) in &records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    buf.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
                }
            }
        }
        w.write_all(&buf).map_err(|e| Error::io("<checkpoint>", e))
    }

    pub fn read_chmd(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHMD_MAGIC {
            return Err(Error::Format("bad CHMD magic".into()));
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported CHMD version {version}")));
        }
        let mut digest = [0u8; 32];
        read_exact(r, &mut digest)?;
        let mut json = vec![0u8; read_u32(r)? as usize];
        read_exact(r, &mut json)?;
        if Sha256::digest(&json).as_slice() != digest {
            return Err(Error::Format("checkpoint config digest mismatch".into()));
        }
        let config: ModelConfig = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = DistillModel::new(config)?;

        let count = read_u32(r)? as usize;
        let mut records: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
        for _ in 0..count {
            let mut name = vec![0u8; read_u32(r)? as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-UTF-8 record name".into()))?;
            let rows = read_u32(r)? as usize;
            let cols = read_u32(r)? as usize;
            let mut bytes = vec![0u8; rows * cols * 4];
            read_exact(r, &mut bytes)?;
            let m = DMatrix::from_fn(rows, cols, |i, j| {
                let o = (i * cols + j) * 4;
                f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64
            });
            records.insert(name, m);
        }

        let mut missing = None;
        model.visit_mut("", &mut |name, shape, s| match records.remove(&name) {
            Some(m) if m.shape() == shape => s.copy_from_slice(m.as_slice()),
            _ => {
                missing.get_or_insert(name);
            }
        });
        if let Some(name) = missing {
            return Err(Error::Format(format!(
                "checkpoint record '{name}' missing or misshapen"
            )));
        }
        for t in TeacherId::ALL {
            let (Some(mean), Some(rotation), Some(scale)) = (
                records.remove(&format!("phis.{t}.mean")),
                records.remove(&format!("phis.{t}.rotation")),
                records.remove(&format!("phis.{t}.scale")),
            ) else {
                continue;
            };
            model.phis.insert(
                t,
                PhisTransform {
                    input_dim: mean.nrows(),
                    mean: DVector::from_column_slice(mean.as_slice()),
                    rotation,
                    scale: scale[(0, 0)],
                },
            );
        }
        if let Some(extra) = records.keys().next() {
            return Err(Error::Format(format!(
                "unexpected checkpoint record '{extra}'"
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_chmd(&mut f)?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f =
            std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        Self::read_chmd(&mut f)
    }
}

fn visit_heads(
    heads: &BTreeMap<TeacherId, ProjectorHead>,
    prefix: &str,
    f: &mut dyn FnMut(String, (usize, usize), &[f64]),
) {
    for (t, h) in heads {
        h.visit(&format!("{prefix}head.{t}."), f);
    }
}

fn visit_heads_mut(
    heads: &mut BTreeMap<TeacherId, ProjectorHead>,
    prefix: &str,
    f: &mut dyn FnMut(String, (usize, usize), &mut [f64]),
) {
    for (t, h) in heads.iter_mut() {
        h.visit_mut(&format!("{prefix}head.{t}."), f);
    }
}

impl Parameters for DistillModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        visit_heads(&self.heads, prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        self.encoder.visit_mut(&format!("{prefix}encoder."), f);
        visit_heads_mut(&mut self.heads, prefix, f);
    }
}

impl Parameters for ModelGrad {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &[f64])) {
        self.encoder.visit(&format!("{prefix}encoder."), f);
        visit_heads(&self.heads, prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, (usize, usize), &mut [f64])) {
        self.encoder.visit_mut(&format!("{prefix}encoder."), f);
        visit_heads_mut(&mut self.heads, prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                hidden_widths: vec![8, 8],
                out_dim: 8,
                neighborhood_k: 3,
                ..EncoderConfig::default()
            },
            head_hidden: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn grad_layout_matches_model() {
        let m = DistillModel::new(small()).unwrap();
        assert_eq!(m.layout(""), m.zero_grad().layout(""));
        assert_eq!(m.to_flat().len(), m.num_parameters());
    }

    #[test]
    fn checkpoint_round_trip_within_f32() {
        let mut m = DistillModel::new(small()).unwrap();
        let x = DMatrix::from_fn(20, 3, |i, j| {
            ((i * 7 + j * 3) % 11) as f64 - 5.0 + 0.1 * j as f64
        });
        m.phis
            .insert(TeacherId::Lang, PhisTransform::fit(&x).unwrap());
        let mut buf = Vec::new();
        m.write_chmd(&mut buf).unwrap();
        let back = DistillModel::read_chmd(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config, m.config);
        let (a, b) = (m.to_flat(), back.to_flat());
        assert!(a
            .iter()
            .zip(&b)
            .all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1.0)));
        assert!(back.phis.contains_key(&TeacherId::Lang));
        buf[10] ^= 1;
        assert!(DistillModel::read_chmd(&mut buf.as_slice()).is_err());
    }
}
