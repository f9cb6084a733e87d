//! NMS, one-to-one greedy matching, average precision and FROC.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Box3};
use crate::scalar::Scalar;

/// A scored box as produced by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Detection<T> {
    #[serde(rename = "box")]
    pub bbox: Box3<T>,
    pub confidence: T,
}

impl<T: Scalar> Detection<T> {
    pub fn new(bbox: Box3<T>, confidence: T) -> Result<Self> {
        if !(confidence >= T::zero() && confidence <= T::one()) {
            return Err(Error::InvalidConfidence(confidence.to_real()));
        }
        Ok(Self { bbox, confidence })
    }
}

/// Deterministic processing order: confidence descending, then larger volume,
/// then lexicographically smaller box coordinates.
pub fn detection_order<T: Scalar>(a: &Detection<T>, b: &Detection<T>) -> Ordering {
    cmp_desc(a.confidence, b.confidence)
        .then_with(|| cmp_desc(a.bbox.voxel_volume(), b.bbox.voxel_volume()))
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array().iter())
                .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
}

fn cmp_desc<T: Scalar>(a: T, b: T) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

pub fn sorted_by_confidence<T: Scalar>(dets: &[Detection<T>]) -> Vec<Detection<T>> {
    let mut out = dets.to_vec();
    out.sort_by(detection_order);
    out
}

/// Greedy 3D non-maximum suppression. A detection survives iff its IoU with
/// every already kept detection is at most `iou_threshold`.
pub fn nms3d<T: Scalar>(dets: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    let mut kept: Vec<Detection<T>> = Vec::with_capacity(dets.len());
    for d in sorted_by_confidence(dets) {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// TP flag per detection, aligned with the input order.
    pub is_tp: Vec<bool>,
    /// Index of the ground truth each detection claimed.
    pub matched_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.is_tp.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.is_tp.len() - self.true_positives()
    }

    pub fn false_negatives(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }
}

/// One-to-one greedy matching. Detections are visited by descending
/// confidence; each claims the unmatched ground truth with the highest IoU
/// when that IoU reaches `iou_min`, otherwise it is a false positive.
pub fn match_greedy<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[Box3<T>],
    iou_min: T,
) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| detection_order(&dets[i], &dets[j]));

    let mut is_tp = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in order {
        let mut best: Option<(usize, T)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let o = iou(&dets[i].bbox, gt);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, o)) = best {
            if o >= iou_min {
                is_tp[i] = true;
                matched_gt[i] = Some(g);
                gt_matched[g] = true;
            }
        }
    }
    MatchResult {
        is_tp,
        matched_gt,
        gt_matched,
    }
}

/// Detections and ground truth of one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct EvalCase<T> {
    pub detections: Vec<Detection<T>>,
    pub ground_truth: Vec<Box3<T>>,
}

/// Cumulative counts after admitting every detection with confidence at or
/// above `cutoff`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint<T> {
    pub cutoff: T,
    pub tp: usize,
    pub fp: usize,
}

/// Labels every detection once per case and sweeps the pooled confidences
/// from high to low. Because matching visits detections by confidence, the
/// label of a detection never depends on lower-scored ones, so a single
/// labelling is valid at every cutoff.
pub fn confidence_sweep<T: Scalar>(cases: &[EvalCase<T>], iou_min: T) -> Vec<SweepPoint<T>> {
    let mut scored: Vec<(T, bool)> = cases
        .iter()
        .flat_map(|c| {
            let m = match_greedy(&c.detections, &c.ground_truth, iou_min);
            c.detections
                .iter()
                .zip(m.is_tp)
                .map(|(d, tp)| (d.confidence, tp))
                .collect::<Vec<_>>()
        })
        .collect();
    scored.sort_by(|a, b| cmp_desc(a.0, b.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let cutoff = scored[i].0;
        while i < scored.len() && scored[i].0 == cutoff {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(SweepPoint { cutoff, tp, fp });
    }
    points
}

fn total_gt<T>(cases: &[EvalCase<T>]) -> usize {
    cases.iter().map(|c| c.ground_truth.len()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint<T> {
    pub cutoff: T,
    pub recall: T,
    pub precision: T,
}

pub fn pr_curve<T: Scalar>(cases: &[EvalCase<T>], iou_min: T) -> Result<Vec<PrPoint<T>>> {
    let n_gt = total_gt(cases);
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let n_gt = T::from_count(n_gt);
    Ok(confidence_sweep(cases, iou_min)
        .into_iter()
        .map(|p| PrPoint {
            cutoff: p.cutoff,
            recall: T::from_count(p.tp) / n_gt,
            precision: T::from_count(p.tp) / T::from_count(p.tp + p.fp),
        })
        .collect())
}

/// Area under the precision-recall curve using the monotone precision
/// envelope over all operating points:
/// `sum_k (R_k - R_{k-1}) * max_{j >= k} P_j`.
pub fn average_precision<T: Scalar>(cases: &[EvalCase<T>], iou_min: T) -> Result<T> {
    let pts = pr_curve(cases, iou_min)?;
    Ok(envelope_area(&pts))
}

pub(crate) fn envelope_area<T: Scalar>(pts: &[PrPoint<T>]) -> T {
    let mut envelope = vec![T::zero(); pts.len()];
    let mut running = T::zero();
    for (k, p) in pts.iter().enumerate().rev() {
        running = running.max_of(p.precision);
        envelope[k] = running;
    }
    let mut prev_recall = T::zero();
    let mut ap = T::zero();
    for (p, env) in pts.iter().zip(envelope) {
        ap = ap + (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint<T> {
    pub cutoff: T,
    pub fp_per_scan: T,
    pub sensitivity: T,
}

/// Lesion-level sensitivity against mean false positives per scan, one point
/// per distinct confidence cutoff from high to low.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve<T> {
    pub points: Vec<FrocPoint<T>>,
}

pub const FROC_IOU: f64 = 0.1;

pub fn froc<T: Scalar>(cases: &[EvalCase<T>], iou_min: T) -> Result<FrocCurve<T>> {
    if cases.is_empty() {
        return Err(Error::NoSubjects);
    }
    let n_gt = total_gt(cases);
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let (n_gt, n_scans) = (T::from_count(n_gt), T::from_count(cases.len()));
    let points = confidence_sweep(cases, iou_min)
        .into_iter()
        .map(|p| FrocPoint {
            cutoff: p.cutoff,
            fp_per_scan: T::from_count(p.fp) / n_scans,
            sensitivity: T::from_count(p.tp) / n_gt,
        })
        .collect();
    Ok(FrocCurve { points })
}

impl<T: Scalar> FrocCurve<T> {
    /// Best sensitivity reachable with at most `fp_per_scan` false positives
    /// per scan; 0 when no operating point fits the budget.
    pub fn sensitivity_at(&self, fp_per_scan: T) -> T {
        self.points
            .iter()
            .filter(|p| p.fp_per_scan <= fp_per_scan)
            .fold(T::zero(), |acc, p| acc.max_of(p.sensitivity))
    }

    pub fn max_fp_per_scan(&self) -> T {
        self.points
            .iter()
            .fold(T::zero(), |acc, p| acc.max_of(p.fp_per_scan))
    }
}

pub fn sensitivity_at<T: Scalar>(curve: &FrocCurve<T>, fp_per_scan: T) -> T {
    curve.sensitivity_at(fp_per_scan)
}

/// FP/scan budgets reported alongside every FROC curve.
pub const FROC_BUDGETS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_rational::Rational64;

    fn bx(x: f64, size: f64) -> Box3<f64> {
        Box3::new([x, 0.0, 0.0], [size; 3]).unwrap()
    }

    fn det(x: f64, size: f64, c: f64) -> Detection<f64> {
        Detection::new(bx(x, size), c).unwrap()
    }

    #[test]
    fn confidence_range_enforced() {
        assert!(Detection::new(bx(0.0, 1.0), 1.2).is_err());
        assert!(Detection::new(bx(0.0, 1.0), -0.1).is_err());
        assert!(Detection::new(bx(0.0, 1.0), f64::NAN).is_err());
    }

    #[test]
    fn nms_duplicates_and_disjoint() {
        let out = nms3d(&[det(0.0, 2.0, 0.8), det(0.0, 2.0, 0.9)], 0.25);
        assert_eq!(out, vec![det(0.0, 2.0, 0.9)]);
        let out = nms3d(&[det(0.0, 1.0, 0.8), det(5.0, 1.0, 0.9)], 0.25);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].confidence, 0.9);
        assert!(nms3d::<f64>(&[], 0.25).is_empty());
    }

    #[test]
    fn nms_chain_keeps_ends() {
        // A-B and B-C overlap by 0.5 of their length (IoU 1/3), A and C are disjoint.
        let a = det(0.0, 2.0, 0.9);
        let b = det(1.0, 2.0, 0.8);
        let c = det(2.0, 2.0, 0.7);
        assert!(iou(&a.bbox, &b.bbox) > 0.25);
        assert_eq!(iou(&a.bbox, &c.bbox), 0.0);
        assert_eq!(nms3d(&[c, b, a], 0.25), vec![a, c]);
    }

    #[test]
    fn matching_cases() {
        let gt = [bx(0.0, 2.0)];
        let m = match_greedy(&[det(0.0, 2.0, 0.9)], &gt, 0.5);
        assert_eq!((m.true_positives(), m.false_positives(), m.false_negatives()), (1, 0, 0));

        let m = match_greedy(&[det(0.0, 2.0, 0.7), det(0.0, 2.0, 0.9)], &gt, 0.5);
        assert_eq!((m.true_positives(), m.false_positives()), (1, 1));
        assert_eq!(m.is_tp, vec![false, true]);

        // 2x2x2 at the origin against 2x2x2 shifted by 4/3 along x: IoU 0.2.
        let shifted = det(4.0 / 3.0, 2.0, 0.9);
        assert_relative_eq!(iou(&shifted.bbox, &gt[0]), 0.2, epsilon = 1e-12);
        let m = match_greedy(&[shifted], &gt, 0.25);
        assert_eq!((m.true_positives(), m.false_positives(), m.false_negatives()), (0, 1, 1));
    }

    fn fixture() -> Vec<EvalCase<f64>> {
        // conf .9 TP on subject 1, .8 FP on subject 2, .7 TP on subject 2
        vec![
            EvalCase {
                detections: vec![det(0.0, 2.0, 0.9)],
                ground_truth: vec![bx(0.0, 2.0)],
            },
            EvalCase {
                detections: vec![det(50.0, 2.0, 0.8), det(10.0, 2.0, 0.7)],
                ground_truth: vec![bx(10.0, 2.0)],
            },
        ]
    }

    #[test]
    fn worked_ap_fixture() {
        let ap = average_precision(&fixture(), 0.5).unwrap();
        assert_relative_eq!(ap, 0.5 + (2.0 / 3.0) * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn ap_edge_cases() {
        let mut cases = fixture();
        cases[1].detections.remove(0);
        assert_eq!(average_precision(&cases, 0.5).unwrap(), 1.0);
        for c in &mut cases {
            c.detections.clear();
        }
        assert_eq!(average_precision(&cases, 0.5).unwrap(), 0.0);
        for c in &mut cases {
            c.ground_truth.clear();
        }
        assert!(matches!(average_precision(&cases, 0.5), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn froc_fixture() {
        let curve = froc(&fixture(), FROC_IOU).unwrap();
        let pts: Vec<(f64, f64)> = curve
            .points
            .iter()
            .map(|p| (p.fp_per_scan, p.sensitivity))
            .collect();
        assert_eq!(pts, vec![(0.0, 0.5), (0.5, 0.5), (0.5, 1.0)]);
        assert_eq!(curve.sensitivity_at(0.5), 1.0);
        assert_eq!(curve.sensitivity_at(100.0), 1.0);
        assert_eq!(curve.sensitivity_at(0.0), 0.5);
        assert!(matches!(froc::<f64>(&[], 0.1), Err(Error::NoSubjects)));
    }

    #[test]
    fn froc_degenerate_detectors() {
        let mut cases = fixture();
        cases[1].detections.remove(0);
        let curve = froc(&cases, FROC_IOU).unwrap();
        assert!(curve.points.iter().all(|p| p.fp_per_scan == 0.0));
        assert_eq!(curve.points.last().unwrap().sensitivity, 1.0);

        let fps_only = vec![EvalCase {
            detections: vec![det(40.0, 1.0, 0.9), det(60.0, 1.0, 0.3)],
            ground_truth: vec![bx(0.0, 1.0)],
        }];
        let curve = froc(&fps_only, FROC_IOU).unwrap();
        assert!(curve.points.iter().all(|p| p.sensitivity == 0.0));
        assert_eq!(curve.sensitivity_at(0.0), 0.0);
    }

    #[test]
    fn rational_ap_is_exact() {
        let r = |n: i64| Rational64::from_integer(n);
        let b = |x: i64| Box3::new([r(x), r(0), r(0)], [r(2); 3]).unwrap();
        let d = |x: i64, c: (i64, i64)| Detection::new(b(x), Rational64::new(c.0, c.1)).unwrap();
        let cases = vec![
            EvalCase {
                detections: vec![d(0, (9, 10))],
                ground_truth: vec![b(0)],
            },
            EvalCase {
                detections: vec![d(50, (8, 10)), d(10, (7, 10))],
                ground_truth: vec![b(10)],
            },
        ];
        assert_eq!(
            average_precision(&cases, Rational64::new(1, 2)).unwrap(),
            Rational64::new(5, 6)
        );
    }

    #[test]
    fn tied_confidences_share_a_cutoff() {
        let cases = vec![EvalCase {
            detections: vec![det(0.0, 2.0, 0.5), det(30.0, 2.0, 0.5)],
            ground_truth: vec![bx(0.0, 2.0)],
        }];
        let pts = pr_curve(&cases, 0.5).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].precision, 0.5);
        assert_eq!(average_precision(&cases, 0.5).unwrap(), 0.5);
    }
}
