use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use super::{SimContext, MAX_LESION_CC};
use crate::error::{Error, Result};
use crate::geometry::{iou, Box3, MIN_LESION_CC};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "src",
            Domain::Target => "tgt",
        }
    }
}

/// One scan: its id, domain and lesion boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub domain: Domain,
    pub gt_boxes: Vec<Box3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortPreset {
    /// Fewer lesions per subject, mass shifted toward large volumes.
    FdgLike,
    /// More lesions per subject, dominated by small volumes.
    PsmaLike,
}

// Ten-bin size distributions over the default geometric edges
// (0.08 .. 150 cc). Bin 0 lies below the minimum lesion volume.
const FDG_HIST: [f64; 10] = [0.0, 0.057, 0.106, 0.158, 0.19, 0.184, 0.143, 0.09, 0.046, 0.026];
const PSMA_HIST: [f64; 10] = [0.0, 0.132, 0.215, 0.25, 0.207, 0.123, 0.052, 0.016, 0.004, 0.001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub domain: Domain,
    pub n_subjects: usize,
    /// Mean lesions per subject.
    pub lesions_mean: f64,
    /// Variance of the per-subject lesion count. Values above the mean give a
    /// gamma-Poisson (overdispersed) count; otherwise the count is Poisson.
    pub lesions_variance: f64,
    /// Probability of each volume bin; sums to one.
    pub size_hist: Vec<f64>,
    /// Largest per-axis log aspect deviation of lesion shapes.
    #[serde(default = "default_aspect")]
    pub max_log_aspect: f64,
    pub seed: u64,
}

fn default_aspect() -> f64 {
    0.35
}

impl CohortSpec {
    pub fn preset(preset: CohortPreset, n_subjects: usize, seed: u64) -> Self {
        let (domain, mean, hist) = match preset {
            CohortPreset::FdgLike => (Domain::Source, 5.0, FDG_HIST),
            CohortPreset::PsmaLike => (Domain::Target, 9.0, PSMA_HIST),
        };
        Self {
            domain,
            n_subjects,
            lesions_mean: mean,
            lesions_variance: 2.0 * mean,
            size_hist: hist.to_vec(),
            max_log_aspect: default_aspect(),
            seed,
        }
    }

    pub fn validate(&self, ctx: &SimContext) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lesions_mean >= 0.0) || !self.lesions_mean.is_finite() {
            return bad(format!("lesions_mean must be >= 0, got {}", self.lesions_mean));
        }
        if !(self.lesions_variance >= 0.0) {
            return bad(format!("lesions_variance must be >= 0, got {}", self.lesions_variance));
        }
        if self.size_hist.len() != ctx.binning.bins() {
            return bad(format!(
                "size_hist has {} bins, binning has {}",
                self.size_hist.len(),
                ctx.binning.bins()
            ));
        }
        if self.size_hist.iter().any(|&p| !(p >= 0.0)) {
            return bad("size_hist entries must be nonnegative".into());
        }
        let total: f64 = self.size_hist.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return bad(format!("size_hist must sum to 1, sums to {total}"));
        }
        for (b, &p) in self.size_hist.iter().enumerate() {
            if p > 0.0 {
                let (_, hi) = ctx.binning.range(b);
                if hi.is_some_and(|hi| hi <= MIN_LESION_CC) {
                    return bad(format!(
                        "size_hist bin {b} lies entirely below the {MIN_LESION_CC} cc minimum lesion volume"
                    ));
                }
            }
        }
        if !(self.max_log_aspect >= 0.0) {
            return bad("max_log_aspect must be >= 0".into());
        }
        Ok(())
    }
}

/// Draws a box extent with volume `cc` and bounded aspect ratios.
pub(crate) fn draw_shape(rng: &mut ChaCha8Rng, cc: f64, ctx: &SimContext, max_log_aspect: f64) -> [f64; 3] {
    let voxels = cc * 1000.0 / ctx.spacing.voxel_mm3();
    let mut logs = [0.0; 3];
    if max_log_aspect > 0.0 {
        for l in &mut logs {
            *l = rng.gen_range(-max_log_aspect..=max_log_aspect);
        }
    }
    let mean = logs.iter().sum::<f64>() / 3.0;
    let edge = voxels.cbrt();
    logs.map(|l| edge * (l - mean).exp())
}

/// Log-uniform volume inside bin `b`, clipped to `[floor_cc, MAX_LESION_CC]`.
pub(crate) fn draw_volume(rng: &mut ChaCha8Rng, b: usize, ctx: &SimContext, floor_cc: f64) -> f64 {
    let (lo, hi) = ctx.binning.range(b);
    let lo = lo.max(floor_cc);
    let hi = hi.unwrap_or(MAX_LESION_CC).max(lo * 1.0001);
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

pub(crate) fn draw_bin(rng: &mut ChaCha8Rng, hist: &[f64]) -> usize {
    let total: f64 = hist.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (b, &p) in hist.iter().enumerate() {
        x -= p;
        if x < 0.0 {
            return b;
        }
    }
    hist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub(crate) fn place(rng: &mut ChaCha8Rng, size: [f64; 3], field: [f64; 3]) -> Box3<f64> {
    let min = std::array::from_fn(|ax| {
        let room = (field[ax] - size[ax]).max(0.0);
        rng.gen::<f64>() * room
    });
    Box3::new(min, size).expect("drawn shapes are positive")
}

fn draw_count(rng: &mut ChaCha8Rng, mean: f64, variance: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let rate = if variance > mean {
        let shape = mean * mean / (variance - mean);
        let scale = (variance - mean) / mean;
        Gamma::new(shape, scale).expect("valid gamma").sample(rng)
    } else {
        mean
    };
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("valid poisson").sample(rng) as usize
}

const PLACEMENT_TRIES: usize = 1000;
/// Ground-truth boxes of a subject never overlap beyond this IoU.
pub const GT_OVERLAP_CAP: f64 = 0.1;

/// Draws a cohort: per subject a lesion count, then per lesion a volume bin,
/// a volume inside it, a shape and a placement that keeps GT overlap at or
/// below [`GT_OVERLAP_CAP`].
pub fn generate_cohort(spec: &CohortSpec, ctx: &SimContext) -> Result<Vec<Subject>> {
    spec.validate(ctx)?;
    (0..spec.n_subjects)
        .map(|i| {
            let id = format!("{}-{:04}", spec.domain.tag(), i);
            let mut rng = rng::stream(spec.seed, &[rng::hash_str("cohort"), rng::hash_str(&id)]);
            let n = draw_count(&mut rng, spec.lesions_mean, spec.lesions_variance);
            let mut boxes: Vec<Box3<f64>> = Vec::with_capacity(n);
            for lesion in 0..n {
                let b = draw_bin(&mut rng, &spec.size_hist);
                let cc = draw_volume(&mut rng, b, ctx, MIN_LESION_CC);
                let shape = draw_shape(&mut rng, cc, ctx, spec.max_log_aspect);
                let placed = (0..PLACEMENT_TRIES)
                    .map(|_| place(&mut rng, shape, ctx.field))
                    .find(|cand| boxes.iter().all(|o| iou(cand, o) <= GT_OVERLAP_CAP));
                match placed {
                    Some(bx) => boxes.push(bx),
                    None => {
                        return Err(Error::Placement {
                            subject: id,
                            lesion,
                            tries: PLACEMENT_TRIES,
                        })
                    }
                }
            }
            Ok(Subject {
                id,
                domain: spec.domain,
                gt_boxes: boxes,
            })
        })
        .collect()
}
