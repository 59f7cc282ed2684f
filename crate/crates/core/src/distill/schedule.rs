//! Staged teacher schedule and the combined objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::ContrastiveKind;
use crate::error::{Error, Result};
use crate::scene::TeacherId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherEntry {
    pub teacher: TeacherId,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default = "default_eta")]
    pub contrastive_weight: f64,
    #[serde(default)]
    pub start_epoch: usize,
    /// Overrides the teacher's default contrastive pooling.
    #[serde(default)]
    pub contrastive: Option<ContrastiveKind>,
}

fn one() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    0.02
}

impl ContrastiveKind {
    /// Class pooling for the language teacher, instance pooling for the
    /// object-aware teacher, none for the generalist.
    pub fn default_for(teacher: TeacherId) -> Self {
        match teacher {
            TeacherId::Lang => ContrastiveKind::Semantic,
            TeacherId::Dino => ContrastiveKind::None,
            TeacherId::Pe => ContrastiveKind::Instance,
        }
    }
}

impl TeacherEntry {
    pub fn new(teacher: TeacherId) -> Self {
        Self {
            teacher,
            weight: 1.0,
            contrastive_weight: 0.02,
            start_epoch: 0,
            contrastive: None,
        }
    }

    pub fn starting_at(mut self, epoch: usize) -> Self {
        self.start_epoch = epoch;
        self
    }

    pub fn contrastive_kind(&self) -> ContrastiveKind {
        self.contrastive
            .unwrap_or_else(|| ContrastiveKind::default_for(self.teacher))
    }
}

/// Per-teacher weights and start epochs; `active(e)` never shrinks as `e` grows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TeacherSchedule {
    pub entries: Vec<TeacherEntry>,
}

impl TeacherSchedule {
    pub fn new(entries: Vec<TeacherEntry>) -> Result<Self> {
        let s = Self { entries };
        s.validate()?;
        Ok(s)
    }

    /// All three teachers from epoch 0 with default weights.
    pub fn all_from_start() -> Self {
        Self {
            entries: [TeacherId::Lang, TeacherId::Dino, TeacherId::Pe]
                .into_iter()
                .map(TeacherEntry::new)
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.teacher) {
                return Err(Error::Config(format!(
                    "teacher {} scheduled twice",
                    e.teacher
                )));
            }
            if !(e.weight >= 0.0 && e.contrastive_weight >= 0.0) {
                return Err(Error::Config(format!(
                    "teacher {} has a negative weight",
                    e.teacher
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, teacher: TeacherId) -> Option<&TeacherEntry> {
        self.entries.iter().find(|e| e.teacher == teacher)
    }

    pub fn active(&self, epoch: usize) -> Vec<TeacherId> {
        self.entries
            .iter()
            .filter(|e| e.start_epoch <= epoch)
            .map(|e| e.teacher)
            .collect()
    }
}

/// Matching and contrastive loss values of one teacher.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TeacherLoss {
    pub matching: f64,
    pub contrastive: f64,
}

/// `sum over active t of weight_t (match_t + eta_t con_t)`.
pub fn loss_total(
    epoch: usize,
    losses: &BTreeMap<TeacherId, TeacherLoss>,
    schedule: &TeacherSchedule,
) -> f64 {
    schedule
        .entries
        .iter()
        .filter(|e| e.start_epoch <= epoch)
        .filter_map(|e| {
            losses
                .get(&e.teacher)
                .map(|l| e.weight * (l.matching + e.contrastive_weight * l.contrastive))
        })
        .sum()
}
