use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::cohort::{draw_bin, draw_shape, draw_volume, place};
use super::{Domain, SimContext, Subject, MIN_FP_CC};
use crate::anchors::{anchor_coverage, AnchorSet};
use crate::error::Result;
use crate::eval::{match_greedy, Detection, FROC_IOU};
use crate::geometry::{bin_of, histogram, Box3};
use crate::rng;
use crate::selection::{PseudoLabelSet, SelectionMode, SubjectDetections};

/// Clamped normal confidence around
/// `mean + size_slope * (z - 0.5) + familiarity_slope * (f - 0.5)`.
///
/// `z` runs from 0 for the smallest volume bin to 1 for the largest. `f` in
/// `[0, 1]` is the detector's belief in the box's size bin relative to its
/// most believed bin, so a detector trained on one size composition is
/// overconfident on sizes common there, hits or not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceModel {
    pub mean: f64,
    pub size_slope: f64,
    pub familiarity_slope: f64,
    pub sd: f64,
}

impl ConfidenceModel {
    fn draw(&self, rng: &mut ChaCha8Rng, size_pos: f64, familiarity: f64) -> f64 {
        let mu = self.mean + self.size_slope * (size_pos - 0.5) + self.familiarity_slope * (familiarity - 0.5);
        let x = if self.sd > 0.0 {
            Normal::new(mu, self.sd).expect("finite sd").sample(rng)
        } else {
            mu
        };
        x.clamp(0.0, 1.0)
    }
}

/// Fixed behaviour of the simulated detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// Share of detection probability that does not depend on anchor fit.
    pub coverage_mix: f64,
    /// Fractional localization noise at zero anchor coverage.
    pub jitter: f64,
    pub tp_confidence: ConfidenceModel,
    pub fp_confidence: ConfidenceModel,
    /// False positives per scan never drop below this.
    pub fp_rate_floor: f64,
    /// Recall before any training.
    pub initial_recall: f64,
    /// False positives per scan before any training.
    pub initial_fp_rate: f64,
    /// Target recall as a fraction of source recall after pretraining.
    pub target_transfer: f64,
    /// Target false-positive rate as a multiple of the source rate.
    pub target_fp_factor: f64,
    /// Share of each training gain that lifts every bin alike, as opposed to
    /// only the bins the labels came from.
    pub shared_gain: f64,
    pub pretrain_rate: f64,
    pub pretrain_max_iters: usize,
}

impl DetectorParams {
    /// How much of the base recall survives at anchor coverage `cov`.
    pub fn fit(&self, cov: f64) -> f64 {
        self.coverage_mix + (1.0 - self.coverage_mix) * cov
    }
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            coverage_mix: 0.75,
            jitter: 0.15,
            tp_confidence: ConfidenceModel {
                mean: 0.75,
                size_slope: 0.4,
                familiarity_slope: 0.1,
                sd: 0.07,
            },
            fp_confidence: ConfidenceModel {
                mean: 0.35,
                size_slope: 0.0,
                familiarity_slope: 0.2,
                sd: 0.12,
            },
            fp_rate_floor: 0.5,
            initial_recall: 0.1,
            initial_fp_rate: 4.0,
            target_transfer: 0.4,
            target_fp_factor: 2.0,
            pretrain_rate: 0.2,
            pretrain_max_iters: 60,
            shared_gain: 0.5,
        }
    }
}

/// Learned state of the detector on one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSkill {
    /// Base recall per volume bin.
    pub recall: Vec<f64>,
    /// Expected false positives per scan.
    pub fp_rate: f64,
    /// Size distribution the detector believes lesions follow; false
    /// positives are drawn from it.
    pub belief: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDetector {
    pub params: DetectorParams,
    pub source: DomainSkill,
    pub target: DomainSkill,
}

impl SimDetector {
    pub fn new(params: DetectorParams, bins: usize) -> Self {
        let skill = DomainSkill {
            recall: vec![params.initial_recall.clamp(0.0, 1.0); bins],
            fp_rate: params.initial_fp_rate.max(0.0),
            belief: vec![1.0 / bins as f64; bins],
        };
        Self {
            params,
            source: skill.clone(),
            target: skill,
        }
    }

    pub fn skill(&self, domain: Domain) -> &DomainSkill {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    fn skill_mut(&mut self, domain: Domain) -> &mut DomainSkill {
        match domain {
            Domain::Source => &mut self.source,
            Domain::Target => &mut self.target,
        }
    }
}

fn jittered(rng: &mut ChaCha8Rng, gt: &Box3<f64>, sigma: f64) -> Box3<f64> {
    if sigma <= 0.0 {
        return *gt;
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    let size = gt.shape();
    let center = gt.center();
    let new_size: [f64; 3] = std::array::from_fn(|ax| size[ax] * n.sample(rng).exp());
    let new_center: [f64; 3] = std::array::from_fn(|ax| center[ax] + size[ax] * n.sample(rng));
    Box3::from_center_size(new_center, new_size).expect("jittered size stays positive")
}

/// Runs the simulated detector on one subject.
///
/// Each lesion in bin `b` is found with probability
/// `recall_b * (c + (1 - c) * coverage)`, where coverage is the best anchor
/// fit of the lesion shape; the emitted box is jittered by
/// `jitter * (1 - coverage)`. False positives arrive as a Poisson stream with
/// sizes drawn from the detector's belief histogram.
pub fn infer(
    detector: &SimDetector,
    subject: &Subject,
    anchors: &AnchorSet<f64>,
    ctx: &SimContext,
    seed: u64,
) -> Vec<Detection<f64>> {
    let p = &detector.params;
    let skill = detector.skill(subject.domain);
    let peak = skill.belief.iter().cloned().fold(0.0, f64::max);
    let familiarity = |b: usize| if peak > 0.0 { skill.belief[b] / peak } else { 0.5 };
    let bins = ctx.binning.bins();
    let size_pos = |b: usize| if bins > 1 { b as f64 / (bins - 1) as f64 } else { 0.5 };
    let mut rng = rng::stream(seed, &[rng::hash_str("infer"), rng::hash_str(&subject.id)]);
    let mut out = Vec::new();

    for gt in &subject.gt_boxes {
        let b = bin_of(gt, &ctx.spacing, &ctx.binning);
        let cov = anchor_coverage(&gt.shape(), anchors);
        let prob = skill.recall[b] * p.fit(cov);
        // draw every variate regardless of outcome so streams stay aligned
        let hit = rng.gen::<f64>() < prob;
        let bx = jittered(&mut rng, gt, p.jitter * (1.0 - cov));
        let conf = p.tp_confidence.draw(&mut rng, size_pos(b), familiarity(b));
        if hit {
            out.push(Detection { bbox: bx, confidence: conf });
        }
    }

    if skill.fp_rate > 0.0 {
        let n = Poisson::new(skill.fp_rate).expect("positive rate").sample(&mut rng) as usize;
        for _ in 0..n {
            let b = draw_bin(&mut rng, &skill.belief);
            let cc = draw_volume(&mut rng, b, ctx, MIN_FP_CC);
            let shape = draw_shape(&mut rng, cc, ctx, 0.35);
            let bx = place(&mut rng, shape, ctx.field);
            let conf = p.fp_confidence.draw(&mut rng, size_pos(b), familiarity(b));
            out.push(Detection { bbox: bx, confidence: conf });
        }
    }
    out
}

/// One simulated epoch of supervised training on `labels`.
///
/// Labels are matched to ground truth at IoU 0.1. Per bin `b`, with `q_b`
/// the precision of labels in that bin, `k_b` the fraction of that bin's
/// lesions that received a correct label and `a_b` their mean anchor fit
/// (see [`DetectorParams::fit`]):
///
/// `recall_b += rate * g_b * (1 - recall_b)`, with
/// `g_b = (1 - s) * q_b * k_b * a_b + s * q * k * a`
///
/// where the unsubscripted terms pool every bin and `s` is
/// [`DetectorParams::shared_gain`].
///
/// The belief histogram moves toward the label histogram by `rate`, and the
/// false-positive rate shrinks by `rate * overall precision`.
pub fn train_update(
    detector: &SimDetector,
    domain: Domain,
    labels: &PseudoLabelSet<f64>,
    subjects: &[Subject],
    anchors: &AnchorSet<f64>,
    ctx: &SimContext,
    rate: f64,
) -> SimDetector {
    let mut next = detector.clone();
    if labels.is_empty() {
        return next;
    }
    let bins = ctx.binning.bins();
    let by_id: HashMap<&str, &Subject> = subjects.iter().map(|s| (s.id.as_str(), s)).collect();

    let mut selected = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut lesions = vec![0usize; bins];
    let mut labelled = vec![0usize; bins];
    let mut coverage = vec![0.0f64; bins];
    for s in &labels.subjects {
        let Some(subject) = by_id.get(s.id.as_str()) else {
            continue;
        };
        let m = match_greedy(&s.detections, &subject.gt_boxes, FROC_IOU);
        for (d, &tp) in s.detections.iter().zip(&m.is_tp) {
            let b = bin_of(&d.bbox, &ctx.spacing, &ctx.binning);
            selected[b] += 1;
            correct[b] += tp as usize;
        }
        for (gt, &hit) in subject.gt_boxes.iter().zip(&m.gt_matched) {
            let b = bin_of(gt, &ctx.spacing, &ctx.binning);
            lesions[b] += 1;
            labelled[b] += hit as usize;
            coverage[b] += next.params.fit(anchor_coverage(&gt.shape(), anchors));
        }
    }

    let label_hist = histogram(
        labels.subjects.iter().flat_map(|s| s.detections.iter().map(|d| &d.bbox)),
        &ctx.spacing,
        &ctx.binning,
    );
    let floor = next.params.fp_rate_floor;
    let shared = next.params.shared_gain;
    let efficacy = |sel: usize, cor: usize, les: usize, lab: usize, cov: f64| {
        if sel == 0 || les == 0 {
            0.0
        } else {
            (cor as f64 / sel as f64) * (lab as f64 / les as f64) * (cov / les as f64)
        }
    };
    let overall = efficacy(
        selected.iter().sum(),
        correct.iter().sum(),
        lesions.iter().sum(),
        labelled.iter().sum(),
        coverage.iter().sum(),
    );
    let skill = next.skill_mut(domain);
    for b in 0..bins {
        let own = efficacy(selected[b], correct[b], lesions[b], labelled[b], coverage[b]);
        let gain = (1.0 - shared) * own + shared * overall;
        let r = &mut skill.recall[b];
        *r = (*r + rate * gain * (1.0 - *r)).clamp(0.0, 1.0);
    }
    if let Some(h) = label_hist {
        for (bel, obs) in skill.belief.iter_mut().zip(h) {
            *bel = (1.0 - rate) * *bel + rate * obs;
        }
        let norm: f64 = skill.belief.iter().sum();
        skill.belief.iter_mut().for_each(|v| *v /= norm);
    }
    let total: usize = selected.iter().sum();
    let precision = correct.iter().sum::<usize>() as f64 / total as f64;
    if skill.fp_rate > floor {
        skill.fp_rate = (skill.fp_rate * (1.0 - rate * precision)).max(floor);
    }
    next
}

/// Ground truth of a labelled cohort packaged as a label set.
pub fn ground_truth_labels(subjects: &[Subject]) -> PseudoLabelSet<f64> {
    PseudoLabelSet {
        round: 0,
        mode: SelectionMode::FixedThreshold,
        subjects: subjects
            .iter()
            .map(|s| SubjectDetections {
                id: s.id.clone(),
                detections: s
                    .gt_boxes
                    .iter()
                    .map(|b| Detection {
                        bbox: *b,
                        confidence: 1.0,
                    })
                    .collect(),
            })
            .collect(),
    }
}

const PLATEAU_TOL: f64 = 1e-4;

/// Supervised training on the labelled source cohort until recall stops
/// moving (or the iteration cap), after which the detector's size belief is
/// the source histogram. The target skill starts as a degraded copy of the
/// source skill.
pub fn source_pretrain(
    detector: &SimDetector,
    source: &[Subject],
    anchors: &AnchorSet<f64>,
    ctx: &SimContext,
) -> Result<SimDetector> {
    let labels = ground_truth_labels(source);
    let mut det = detector.clone();
    for _ in 0..det.params.pretrain_max_iters {
        let next = train_update(&det, Domain::Source, &labels, source, anchors, ctx, det.params.pretrain_rate);
        let moved = next
            .source
            .recall
            .iter()
            .zip(&det.source.recall)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        det = next;
        if moved < PLATEAU_TOL {
            break;
        }
    }
    if let Some(h) = histogram(source.iter().flat_map(|s| &s.gt_boxes), &ctx.spacing, &ctx.binning) {
        det.source.belief = h;
    }
    let p = &det.params;
    det.target = DomainSkill {
        recall: det.source.recall.iter().map(|r| r * p.target_transfer).collect(),
        fp_rate: det.source.fp_rate * p.target_fp_factor,
        belief: det.source.belief.clone(),
    };
    Ok(det)
}
