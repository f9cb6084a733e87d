//! Synthetic cross-domain cohorts and the parametric detector that stands in
//! for a trained network.
//!
//! No voxel images exist here. The detector consumes ground-truth geometry,
//! its per-bin recall and the current anchor set, and emits noisy scored
//! boxes plus false positives.

mod cohort;
mod detector;

pub use cohort::{generate_cohort, CohortPreset, CohortSpec, Domain, Subject};
pub use detector::{
    ground_truth_labels, infer, source_pretrain, train_update, ConfidenceModel, DetectorParams, DomainSkill,
    SimDetector,
};

use serde::{Deserialize, Serialize};

use crate::geometry::{BinningConfig, Spacing};

/// Voxel grid shared by every subject of a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimContext {
    pub spacing: Spacing<f64>,
    pub binning: BinningConfig<f64>,
    /// Volume extent in voxels.
    pub field: [f64; 3],
}

impl Default for SimContext {
    fn default() -> Self {
        Self {
            spacing: Spacing::pet_default(),
            binning: BinningConfig::default(),
            field: DEFAULT_FIELD,
        }
    }
}

/// Whole-body field of view at 4 x 4 x 5 mm.
pub const DEFAULT_FIELD: [f64; 3] = [128.0, 128.0, 200.0];

/// Upper volume (cc) used when drawing sizes from the open-ended last bin.
pub const MAX_LESION_CC: f64 = 600.0;
/// Lower volume (cc) for false positives drawn from the first bin.
pub const MIN_FP_CC: f64 = 0.02;
