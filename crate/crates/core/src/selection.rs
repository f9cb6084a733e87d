//! Pseudo-label selection from raw target detections.

use serde::{Deserialize, Serialize};

use crate::eval::{detection_order, nms3d, Detection};
use crate::geometry::{bin_of, BinningConfig, Spacing};
use crate::priors::{allocate_quota, Quota};
use crate::scalar::{floor_count, Scalar};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.25;
pub const DEFAULT_TOP_P: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    PriorGuided,
    TopP,
    FixedThreshold,
}

/// What happens to bin slots that a subject cannot fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UnfilledSlots {
    /// Unused slots stay empty.
    Drop,
    /// Unused slots are re-apportioned over bins in proportion to their
    /// remaining candidate counts, then filled by confidence within each bin.
    #[default]
    Redistribute,
}

/// Cleaned detections of one target subject. Carries no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct SubjectDetections<T> {
    pub id: String,
    pub detections: Vec<Detection<T>>,
}

/// Pseudo labels of every target subject for one round. All labels are
/// lesion class 1; the detector confidence is kept for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct PseudoLabelSet<T> {
    pub round: usize,
    pub mode: SelectionMode,
    pub subjects: Vec<SubjectDetections<T>>,
}

impl<T: Scalar> PseudoLabelSet<T> {
    pub fn total(&self) -> usize {
        self.subjects.iter().map(|s| s.detections.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn counts(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.detections.len()).collect()
    }

    pub fn bin_counts(&self, spacing: &Spacing<T>, binning: &BinningConfig<T>) -> Vec<usize> {
        let mut counts = vec![0; binning.bins()];
        for d in self.subjects.iter().flat_map(|s| &s.detections) {
            counts[bin_of(&d.bbox, spacing, binning)] += 1;
        }
        counts
    }
}

/// Drops detections scoring below `tau`, then applies NMS.
pub fn candidate_set<T: Scalar>(raw: &[Detection<T>], tau: T, nms_iou: T) -> Vec<Detection<T>> {
    let kept: Vec<Detection<T>> = raw.iter().filter(|d| d.confidence >= tau).copied().collect();
    nms3d(&kept, nms_iou)
}

fn bucket_by_bin<T: Scalar>(
    cands: &[Detection<T>],
    spacing: &Spacing<T>,
    binning: &BinningConfig<T>,
) -> Vec<Vec<Detection<T>>> {
    let mut bins = vec![Vec::new(); binning.bins()];
    for d in cands {
        bins[bin_of(&d.bbox, spacing, binning)].push(*d);
    }
    for b in &mut bins {
        b.sort_by(detection_order);
    }
    bins
}

/// Keeps the top `quota.counts[b]` candidates of each volume bin.
pub fn select_subject<T: Scalar>(
    cands: &[Detection<T>],
    quota: &Quota,
    spacing: &Spacing<T>,
    binning: &BinningConfig<T>,
    unfilled: UnfilledSlots,
) -> Vec<Detection<T>> {
    let bins = bucket_by_bin(cands, spacing, binning);
    let mut taken: Vec<usize> = bins
        .iter()
        .zip(&quota.counts)
        .map(|(b, &n)| n.min(b.len()))
        .collect();

    if unfilled == UnfilledSlots::Redistribute {
        let used: usize = taken.iter().sum();
        let spare: Vec<usize> = bins.iter().zip(&taken).map(|(b, &t)| b.len() - t).collect();
        let spare_total: usize = spare.iter().sum();
        let leftover = quota.total.saturating_sub(used).min(spare_total);
        if leftover > 0 {
            let weights: Vec<T> = spare.iter().map(|&s| T::from_count(s)).collect();
            let extra = allocate_quota(&weights, leftover);
            for ((t, e), s) in taken.iter_mut().zip(&extra.counts).zip(&spare) {
                *t += (*e).min(*s);
            }
        }
    }

    let mut out: Vec<Detection<T>> = bins
        .into_iter()
        .zip(taken)
        .flat_map(|(b, n)| b.into_iter().take(n))
        .collect();
    out.sort_by(detection_order);
    out
}

/// Bin-wise quota selection applied to every subject with the same quota.
pub fn select_prior_guided<T: Scalar>(
    candidates: &[SubjectDetections<T>],
    quota: &Quota,
    spacing: &Spacing<T>,
    binning: &BinningConfig<T>,
    unfilled: UnfilledSlots,
    round: usize,
) -> PseudoLabelSet<T> {
    PseudoLabelSet {
        round,
        mode: SelectionMode::PriorGuided,
        subjects: candidates
            .iter()
            .map(|c| SubjectDetections {
                id: c.id.clone(),
                detections: select_subject(&c.detections, quota, spacing, binning, unfilled),
            })
            .collect(),
    }
}

/// Keeps `ceil(p * n)` highest-confidence candidates per subject.
pub fn select_top_p<T: Scalar>(
    candidates: &[SubjectDetections<T>],
    p: T,
    round: usize,
) -> PseudoLabelSet<T> {
    PseudoLabelSet {
        round,
        mode: SelectionMode::TopP,
        subjects: candidates
            .iter()
            .map(|c| {
                let n = c.detections.len();
                let keep = ceil_count(p * T::from_count(n)).min(n);
                let mut d = c.detections.clone();
                d.sort_by(detection_order);
                d.truncate(keep);
                SubjectDetections {
                    id: c.id.clone(),
                    detections: d,
                }
            })
            .collect(),
    }
}

/// Every candidate that passed the confidence threshold.
pub fn select_fixed_threshold<T: Scalar>(
    candidates: &[SubjectDetections<T>],
    round: usize,
) -> PseudoLabelSet<T> {
    PseudoLabelSet {
        round,
        mode: SelectionMode::FixedThreshold,
        subjects: candidates.to_vec(),
    }
}

fn ceil_count<T: Scalar>(x: T) -> usize {
    let f = floor_count(x);
    if T::from_count(f) < x {
        f + 1
    } else {
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3;

    fn det(x: f64, size: f64, c: f64) -> Detection<f64> {
        Detection::new(Box3::new([x, 0.0, 0.0], [size; 3]).unwrap(), c).unwrap()
    }

    fn one_bin() -> (Spacing<f64>, BinningConfig<f64>) {
        (Spacing::pet_default(), BinningConfig::new(vec![1e9]).unwrap())
    }

    #[test]
    fn candidate_filtering() {
        assert!(candidate_set(&[det(0.0, 1.0, 0.2), det(5.0, 1.0, 0.49)], 0.5, 0.25).is_empty());
        assert_eq!(candidate_set(&[det(0.0, 1.0, 0.9)], 0.5, 0.25), vec![det(0.0, 1.0, 0.9)]);
        let out = candidate_set(
            &[det(0.0, 2.0, 0.6), det(0.0, 2.0, 0.9), det(20.0, 2.0, 0.4)],
            0.5,
            0.25,
        );
        assert_eq!(out, vec![det(0.0, 2.0, 0.9)]);
    }

    #[test]
    fn prior_guided_single_bin() {
        let (s, b) = one_bin();
        let c = [det(0.0, 1.0, 0.6), det(10.0, 1.0, 0.9), det(20.0, 1.0, 0.8)];
        let q = Quota {
            counts: vec![2, 0],
            total: 2,
        };
        let out = select_subject(&c, &q, &s, &b, UnfilledSlots::Drop);
        assert_eq!(out, vec![det(10.0, 1.0, 0.9), det(20.0, 1.0, 0.8)]);
        assert!(select_subject(&c, &Quota::zeros(2), &s, &b, UnfilledSlots::Drop).is_empty());
        assert!(select_subject(&c, &Quota::zeros(2), &s, &b, UnfilledSlots::Redistribute).is_empty());
    }

    #[test]
    fn underfilled_bin_keeps_everything() {
        let (s, b) = one_bin();
        let q = Quota {
            counts: vec![3, 0],
            total: 3,
        };
        let c = [det(0.0, 1.0, 0.7)];
        assert_eq!(select_subject(&c, &q, &s, &b, UnfilledSlots::Drop), c.to_vec());
    }

    #[test]
    fn redistribution_fills_from_spare_bins() {
        let s = Spacing::pet_default();
        // 1-voxel boxes land in bin 0, 8-voxel boxes in bin 1
        let b = BinningConfig::new(vec![0.5]).unwrap();
        let small = [det(0.0, 1.0, 0.9), det(10.0, 1.0, 0.8), det(20.0, 1.0, 0.7)];
        let q = Quota {
            counts: vec![1, 2],
            total: 3,
        };
        let dropped = select_subject(&small, &q, &s, &b, UnfilledSlots::Drop);
        assert_eq!(dropped.len(), 1);
        let filled = select_subject(&small, &q, &s, &b, UnfilledSlots::Redistribute);
        assert_eq!(filled, small.to_vec());
    }

    #[test]
    fn top_p_rules() {
        let cands = vec![SubjectDetections {
            id: "a".into(),
            detections: vec![det(0.0, 1.0, 0.6), det(10.0, 1.0, 0.9), det(20.0, 1.0, 0.8), det(30.0, 1.0, 0.7)],
        }];
        assert_eq!(select_top_p(&cands, 1.0, 0).total(), 4);
        let half = select_top_p(&cands, 0.5, 0);
        assert_eq!(half.subjects[0].detections, vec![det(10.0, 1.0, 0.9), det(20.0, 1.0, 0.8)]);
        let single = vec![SubjectDetections {
            id: "b".into(),
            detections: vec![det(0.0, 1.0, 0.6)],
        }];
        assert_eq!(select_top_p(&single, 0.5, 0).total(), 1);
    }
}
