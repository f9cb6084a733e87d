//! Experiment configuration: one TOML document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::ArmKind;
use crate::anchors::{EmaConfig, DEFAULT_ANCHORS};
use crate::error::{Error, Result};
use crate::eval::FROC_IOU;
use crate::geometry::{BinningConfig, Spacing, LARGE_LESION_CC, MIN_LESION_CC};
use crate::selection::{UnfilledSlots, DEFAULT_NMS_IOU, DEFAULT_TAU, DEFAULT_TOP_P};
use crate::simulation::{CohortPreset, CohortSpec, DetectorParams, SimContext, DEFAULT_FIELD};

/// What feeds the mean-lesions-per-subject EMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MuCounts {
    /// Size of each subject's cleaned candidate set.
    #[default]
    Candidates,
    /// Number of pseudo labels kept for each subject.
    Selected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub tau: f64,
    pub nms_iou: f64,
    pub top_p: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub unfilled_slots: UnfilledSlots,
    pub mu_counts: MuCounts,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            nms_iou: DEFAULT_NMS_IOU,
            top_p: DEFAULT_TOP_P,
            lambda_start: 0.1,
            lambda_end: 0.8,
            unfilled_slots: UnfilledSlots::default(),
            mu_counts: MuCounts::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub k: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { k: DEFAULT_ANCHORS }
    }
}

/// Volume bins: explicit `edges`, or `bins` geometric bins between
/// `min_cc` and `max_cc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningSection {
    pub edges: Option<Vec<f64>>,
    pub bins: usize,
    pub min_cc: f64,
    pub max_cc: f64,
}

impl Default for BinningSection {
    fn default() -> Self {
        Self {
            edges: None,
            bins: 10,
            min_cc: MIN_LESION_CC,
            max_cc: LARGE_LESION_CC,
        }
    }
}

impl BinningSection {
    pub fn build(&self) -> Result<BinningConfig<f64>> {
        match &self.edges {
            Some(e) => BinningConfig::new(e.clone()),
            None => BinningConfig::geometric(self.min_cc, self.max_cc, self.bins),
        }
    }
}

/// A cohort either loaded from a cohort file or generated from a preset,
/// optionally overriding preset fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub preset: Option<CohortPreset>,
    #[serde(default)]
    pub n_subjects: Option<usize>,
    #[serde(default)]
    pub lesions_mean: Option<f64>,
    #[serde(default)]
    pub lesions_variance: Option<f64>,
    #[serde(default)]
    pub size_hist: Option<Vec<f64>>,
}

impl CohortSource {
    pub fn preset(preset: CohortPreset, n_subjects: usize) -> Self {
        Self {
            path: None,
            preset: Some(preset),
            n_subjects: Some(n_subjects),
            lesions_mean: None,
            lesions_variance: None,
            size_hist: None,
        }
    }

    /// Generation spec; `None` when the cohort comes from a file.
    pub fn spec(&self, seed: u64) -> Result<Option<CohortSpec>> {
        if self.path.is_some() {
            return Ok(None);
        }
        let preset = self
            .preset
            .ok_or_else(|| Error::Config("cohort needs either `path` or `preset`".into()))?;
        let mut spec = CohortSpec::preset(preset, self.n_subjects.unwrap_or(100), seed);
        if let Some(m) = self.lesions_mean {
            spec.lesions_mean = m;
        }
        if let Some(v) = self.lesions_variance {
            spec.lesions_variance = v;
        }
        if let Some(h) = &self.size_hist {
            spec.size_hist = h.clone();
        }
        Ok(Some(spec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortsConfig {
    pub spacing: [f64; 3],
    pub field: [f64; 3],
    pub source: CohortSource,
    pub target: CohortSource,
    /// Target split fractions: adaptation, validation, test.
    pub split: [f64; 3],
}

impl Default for CohortsConfig {
    fn default() -> Self {
        Self {
            spacing: [4.0, 4.0, 5.0],
            field: DEFAULT_FIELD,
            source: CohortSource::preset(CohortPreset::FdgLike, 150),
            target: CohortSource::preset(CohortPreset::PsmaLike, 250),
            split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Rate of the per-round supervised source epoch.
    pub source_rate: f64,
    /// Rate of the per-round pseudo-labelled target epoch.
    pub target_rate: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            source_rate: 0.05,
            target_rate: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ious: Vec<f64>,
    pub froc_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ious: vec![0.1, 0.25, 0.5],
            froc_iou: FROC_IOU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub arms: Vec<ArmKind>,
    pub selection: SelectionConfig,
    pub ema: EmaConfig,
    pub anchors: AnchorConfig,
    pub binning: BinningSection,
    pub cohorts: CohortsConfig,
    pub training: TrainingConfig,
    pub detector: DetectorParams,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 200,
            arms: ArmKind::TABLE.to_vec(),
            selection: SelectionConfig::default(),
            ema: EmaConfig::default(),
            anchors: AnchorConfig::default(),
            binning: BinningSection::default(),
            cohorts: CohortsConfig::default(),
            training: TrainingConfig::default(),
            detector: DetectorParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn context(&self) -> Result<SimContext> {
        let [dx, dy, dz] = self.cohorts.spacing;
        Ok(SimContext {
            spacing: Spacing::new(dx, dy, dz)?,
            binning: self.binning.build()?,
            field: self.cohorts.field,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.arms.is_empty() {
            return bad("arms must name at least one arm".into());
        }
        let s = &self.selection;
        if !(s.lambda_start > 0.0 && s.lambda_start <= s.lambda_end && s.lambda_end <= 1.0) {
            return bad(format!(
                "need 0 < lambda_start <= lambda_end <= 1, got {} and {}",
                s.lambda_start, s.lambda_end
            ));
        }
        if !(0.0..=1.0).contains(&s.tau) {
            return bad(format!("tau must lie in [0, 1], got {}", s.tau));
        }
        if !(0.0..=1.0).contains(&s.nms_iou) {
            return bad(format!("nms_iou must lie in [0, 1], got {}", s.nms_iou));
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return bad(format!("top_p must lie in (0, 1], got {}", s.top_p));
        }
        self.ema.validate()?;
        if self.anchors.k == 0 {
            return bad("anchors.k must be >= 1".into());
        }
        let ctx = self.context()?;
        let split = self.cohorts.split;
        if split.iter().any(|&f| !(f > 0.0)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must be positive and sum to 1, got {split:?}"));
        }
        for (name, c) in [("source", &self.cohorts.source), ("target", &self.cohorts.target)] {
            if let Some(spec) = c.spec(self.seed)? {
                spec.validate(&ctx)
                    .map_err(|e| Error::Config(format!("cohorts.{name}: {e}")))?;
            }
        }
        let t = &self.training;
        for (name, v) in [("source_rate", t.source_rate), ("target_rate", t.target_rate)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("training.{name} must lie in (0, 1], got {v}"));
            }
        }
        if self.eval.ious.is_empty() || self.eval.ious.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return bad("eval.ious must be a nonempty list in (0, 1]".into());
        }
        Ok(())
    }
}
