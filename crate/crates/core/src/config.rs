//! The pipeline configuration tree: one TOML file covering scenes, cameras,
//! teachers, losses, schedule, optimizer and thresholds, with dotted-path
//! overrides. Every field has a default, so an empty file is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::distill::adapt::AdaptConfig;
use crate::distill::model::{ModelConfig, TeacherDim};
use crate::distill::pretrain::PretrainConfig;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::raster::RenderConfig;
use crate::scene::{Intrinsics, TeacherId};
use crate::synth::{LabelSource, SyntheticTeacher};
use crate::uplift::StandardizeOrder;
use crate::viewplan::ViewPlanConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Directory for generated artifacts, relative to the config file.
    pub output_dir: PathBuf,
    pub render: RenderConfig,
    pub scenes: ScenesConfig,
    pub cameras: CameraConfig,
    #[serde(rename = "teacher")]
    pub teachers: Vec<TeacherSpec>,
    pub uplift: UpliftConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub viewplan: ViewPlanConfig,
    pub augment_preview: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            render: RenderConfig::default(),
            scenes: ScenesConfig::default(),
            cameras: CameraConfig::default(),
            teachers: vec![
                TeacherSpec::new(TeacherId::Lang, 16),
                TeacherSpec::new(TeacherId::Dino, 32),
                TeacherSpec::new(TeacherId::Pe, 8),
            ],
            uplift: UpliftConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            viewplan: ViewPlanConfig::default(),
            augment_preview: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Scene sources: `.toml` synthetic layouts or `.ply` files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    pub train: Vec<PathBuf>,
    /// Scene used for adaptation and held-out evaluation.
    pub heldout: Option<PathBuf>,
    /// Multi-room scene used for view planning.
    pub rooms: Option<PathBuf>,
}

/// Orbit cameras used for uplifting and teacher rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    pub views: usize,
    /// Orbit radius as a multiple of the scene's bounding-box diagonal.
    pub radius_factor: f64,
    /// Eye height above the bounds center, as a multiple of the diagonal.
    pub height_factor: f64,
    /// Teacher maps are produced at image resolution divided by this.
    pub teacher_downsample: u32,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            hfov_deg: 70.0,
            views: 12,
            radius_factor: 0.9,
            height_factor: 0.45,
            teacher_downsample: 1,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub id: TeacherId,
    pub dim: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Labels that drive the synthetic prototypes; defaults per teacher.
    #[serde(default)]
    pub labels: Option<LabelSource>,
}

impl TeacherSpec {
    pub fn new(id: TeacherId, dim: usize) -> Self {
        Self {
            id,
            dim,
            noise_sigma: 0.0,
            labels: None,
        }
    }

    pub fn synthetic(&self, seed: u64) -> SyntheticTeacher {
        let mut t = SyntheticTeacher::new(self.id, self.dim, self.noise_sigma, seed);
        if let Some(l) = self.labels {
            t.labels = l;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpliftConfig {
    /// Gaussians with less total weight than this are masked out.
    pub tau_w: f64,
    pub order: StandardizeOrder,
    pub standardize: bool,
    /// Pixels used to fit the standardizer need at least this accumulated alpha.
    pub phis_min_coverage: f64,
    pub phis_max_rows: usize,
}

impl Default for UpliftConfig {
    fn default() -> Self {
        Self {
            tau_w: 0.05,
            order: StandardizeOrder::BeforeUplift,
            standardize: true,
            phis_min_coverage: 0.5,
            phis_max_rows: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Classes excluded from the foreground metrics.
    pub background_classes: Vec<u32>,
    /// Retrieval noise as a fraction of the scene's bounding-box diagonal.
    pub retrieval_noise_fraction: f64,
    pub probe: ProbeConfig,
    /// Orbit view rendered by the PCA visualization.
    pub pca_view: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            background_classes: vec![0],
            retrieval_noise_fraction: 0.02,
            probe: ProbeConfig::default(),
            pca_view: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_value(parse_toml(text)?)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, applies `key=value` overrides and resolves relative
    /// paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value = parse_toml(&text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.scenes.train.iter_mut().for_each(fix);
        self.scenes.heldout.iter_mut().for_each(fix);
        self.scenes.rooms.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::Config("at least one teacher is required".into()));
        }
        for (i, t) in self.teachers.iter().enumerate() {
            if t.dim == 0 {
                return Err(Error::Config(format!("teacher {} has dimension 0", t.id)));
            }
            if self.teachers[..i].iter().any(|u| u.id == t.id) {
                return Err(Error::Config(format!("teacher {} listed twice", t.id)));
            }
        }
        if self.cameras.width == 0
            || self.cameras.height == 0
            || self.cameras.teacher_downsample == 0
        {
            return Err(Error::Config(
                "camera resolution and downsample factor must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.adapt.omega_threshold) {
            return Err(Error::Config(
                "adapt.omega_threshold must lie in [0, 1]".into(),
            ));
        }
        self.model.encoder.validate()?;
        self.pretrain.schedule.validate()
    }

    /// Model configuration whose heads match the teacher list; standardized
    /// teachers are padded to the next power of two.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.teachers = self
            .teachers
            .iter()
            .map(|t| TeacherDim {
                teacher: t.id,
                dim: if self.uplift.standardize {
                    t.dim.next_power_of_two()
                } else {
                    t.dim
                },
            })
            .collect();
        m
    }

    pub fn teacher(&self, id: TeacherId) -> Result<&TeacherSpec> {
        self.teachers
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Config(format!("no {id} teacher configured")))
    }
}

fn parse_toml(text: &str) -> Result<toml::Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    Ok(toml::Value::Table(table))
}

/// Sets the dotted `key` of `root` to `value`, parsed as a TOML value when
/// possible and as a bare string otherwise. Intermediate tables are created.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let value = parse_scalar(raw.trim());
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}' descends into a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}' descends into a non-table")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.pretrain.losses.temperature, 0.1);
        assert_eq!(cfg.adapt.optim.lr, 2e-4);
        assert_eq!(cfg.adapt.omega_threshold, 0.5);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut v = parse_toml("[pretrain.optim]\nlr = 0.1\n").unwrap();
        apply_override(&mut v, "pretrain.optim.lr=0.5").unwrap();
        apply_override(&mut v, "adapt.steps = 7").unwrap();
        apply_override(&mut v, "uplift.order=after_uplift").unwrap();
        apply_override(&mut v, "eval.background_classes=[0, 3]").unwrap();
        let cfg = PipelineConfig::from_value(v).unwrap();
        assert_eq!(cfg.pretrain.optim.lr, 0.5);
        assert_eq!(cfg.adapt.steps, Some(7));
        assert_eq!(cfg.uplift.order, StandardizeOrder::AfterUplift);
        assert_eq!(cfg.eval.background_classes, vec![0, 3]);
        let mut v = parse_toml("").unwrap();
        assert!(apply_override(&mut v, "no_equals").is_err());
        apply_override(&mut v, "not_a_field=1").unwrap();
        assert!(PipelineConfig::from_value(v).is_err());
    }

    #[test]
    fn model_heads_follow_teachers() {
        let mut cfg = PipelineConfig::default();
        cfg.teachers[1].dim = 33;
        let m = cfg.model_config();
        assert_eq!(m.teachers[1].dim, 64);
        cfg.uplift.standardize = false;
        assert_eq!(cfg.model_config().teachers[1].dim, 33);
    }
}
