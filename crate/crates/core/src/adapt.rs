//! The alternating self-training driver.
//!
//! Every round runs one supervised source epoch and then, unless the arm is
//! source-only, a full target pass: inference, candidate cleaning, budget and
//! quota from the previous round's priors, pseudo-label selection, prior and
//! anchor updates, and one epoch on the pseudo labels.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{ema_update_anchors, kmeans_shapes, AnchorSet};
use crate::config::{CohortSource, ExperimentConfig, MuCounts};
use crate::error::{Error, Result};
use crate::eval::{average_precision, froc, nms3d, pr_curve, EvalCase, FrocCurve, PrPoint, FROC_BUDGETS};
use crate::geometry::{bin_of, histogram, total_variation, Box3};
use crate::priors::{allocate_quota, budget, update_hist, update_mu, PriorState};
use crate::rng;
use crate::selection::{
    candidate_set, select_fixed_threshold, select_prior_guided, select_top_p, PseudoLabelSet,
    SelectionMode, SubjectDetections,
};
use crate::simulation::{
    generate_cohort, ground_truth_labels, infer, source_pretrain, train_update, Domain, SimContext, SimDetector, Subject,
};


/// One configuration of the adaptation procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    SourceOnly,
    TopP,
    TopPAnchor,
    PriorGuided,
    PriorGuidedAnchor,
    FixedThreshold,
    FixedThresholdAnchor,
}

impl ArmKind {
    /// The four arms run by default.
    pub const TABLE: [ArmKind; 4] = [
        ArmKind::SourceOnly,
        ArmKind::TopP,
        ArmKind::TopPAnchor,
        ArmKind::PriorGuidedAnchor,
    ];

    pub fn selection(self) -> Option<SelectionMode> {
        match self {
            ArmKind::SourceOnly => None,
            ArmKind::TopP | ArmKind::TopPAnchor => Some(SelectionMode::TopP),
            ArmKind::PriorGuided | ArmKind::PriorGuidedAnchor => Some(SelectionMode::PriorGuided),
            ArmKind::FixedThreshold | ArmKind::FixedThresholdAnchor => {
                Some(SelectionMode::FixedThreshold)
            }
        }
    }

    pub fn adapts_anchors(self) -> bool {
        matches!(
            self,
            ArmKind::TopPAnchor | ArmKind::PriorGuidedAnchor | ArmKind::FixedThresholdAnchor
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ArmKind::SourceOnly => "source_only",
            ArmKind::TopP => "top_p",
            ArmKind::TopPAnchor => "top_p_anchor",
            ArmKind::PriorGuided => "prior_guided",
            ArmKind::PriorGuidedAnchor => "prior_guided_anchor",
            ArmKind::FixedThreshold => "fixed_threshold",
            ArmKind::FixedThresholdAnchor => "fixed_threshold_anchor",
        }
    }
}

/// Linear selection-factor ramp from `lambda_start` at round 1 to
/// `lambda_end` at round `rounds`.
pub fn lambda_at(round: usize, cfg: &ExperimentConfig) -> Result<f64> {
    let rounds = cfg.rounds;
    if round == 0 || round > rounds {
        return Err(Error::RoundOutOfRange { round, rounds });
    }
    let (a, b) = (cfg.selection.lambda_start, cfg.selection.lambda_end);
    if rounds == 1 {
        return Ok(a);
    }
    if round == rounds {
        return Ok(b);
    }
    Ok(a + (b - a) * (round - 1) as f64 / (rounds - 1) as f64)
}

/// Everything that evolves across rounds for one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub detector: SimDetector,
    pub priors: PriorState<f64>,
    pub anchors: AnchorSet<f64>,
    /// Last completed round.
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    /// `(iou, ap)` pairs.
    pub ap: Vec<(f64, f64)>,
    /// Sensitivity at 1 false positive per scan.
    pub sensitivity_at_1fp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub arm: ArmKind,
    pub round: usize,
    pub lambda: f64,
    pub budget: usize,
    pub quota: Vec<usize>,
    pub mu: f64,
    pub hist: Vec<f64>,
    pub anchors: Vec<[f64; 3]>,
    pub candidates: usize,
    pub candidate_bins: Vec<usize>,
    pub selected: usize,
    pub selected_bins: Vec<usize>,
    /// Fraction of pseudo labels that match a lesion; monitoring only.
    pub label_precision: Option<f64>,
    pub val: EvalSnapshot,
}

impl RoundRecord {
    pub fn selected_hist(&self) -> Option<Vec<f64>> {
        let total: usize = self.selected_bins.iter().sum();
        (total > 0).then(|| {
            self.selected_bins
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect()
        })
    }
}

/// Cohorts and the shared starting point of every arm.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub ctx: SimContext,
    pub source: Vec<Subject>,
    pub target_train: Vec<Subject>,
    pub target_val: Vec<Subject>,
    pub target_test: Vec<Subject>,
    pub initial: ArmState,
    source_labels: PseudoLabelSet<f64>,
}

/// Deterministic adaptation / validation / test split of a target cohort.
pub fn split_target(subjects: &[Subject], fractions: [f64; 3], seed: u64) -> [Vec<Subject>; 3] {
    let mut idx: Vec<usize> = (0..subjects.len()).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::hash_str("split")]));
    let n = subjects.len();
    let n_train = ((n as f64) * fractions[0]).round() as usize;
    let n_val = (((n as f64) * fractions[1]).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let pick = |r: &[usize]| {
        let mut v: Vec<Subject> = r.iter().map(|&i| subjects[i].clone()).collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        v
    };
    [
        pick(&idx[..n_train]),
        pick(&idx[n_train..n_train + n_val]),
        pick(&idx[n_train + n_val..]),
    ]
}

impl Prepared {
    /// Generates (or accepts) cohorts, fits the source anchors and priors and
    /// pretrains the detector.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let ctx = cfg.context()?;
        let source = load_or_generate(&cfg.cohorts.source, rng::derive_seed(cfg.seed, &[1]), &ctx)?;
        let target = load_or_generate(&cfg.cohorts.target, rng::derive_seed(cfg.seed, &[2]), &ctx)?;
        Self::from_cohorts(cfg, ctx, source, target)
    }

    pub fn from_cohorts(
        cfg: &ExperimentConfig,
        ctx: SimContext,
        source: Vec<Subject>,
        target: Vec<Subject>,
    ) -> Result<Self> {
        let [target_train, target_val, target_test] =
            split_target(&target, cfg.cohorts.split, cfg.seed);
        if target_train.is_empty() || target_test.is_empty() {
            return Err(Error::Config("target cohort too small to split".into()));
        }
        let source_boxes: Vec<Box3<f64>> = source.iter().flat_map(|s| s.gt_boxes.iter().copied()).collect();
        let shapes = kmeans_shapes(&source_boxes, cfg.anchors.k, rng::derive_seed(cfg.seed, &[3]))?;
        let anchors = AnchorSet::new(shapes)?;
        let priors = PriorState::from_labelled(
            source.iter().map(|s| s.gt_boxes.as_slice()),
            &ctx.spacing,
            &ctx.binning,
        )?;
        let fresh = SimDetector::new(cfg.detector.clone(), ctx.binning.bins());
        let detector = source_pretrain(&fresh, &source, &anchors, &ctx)?;
        let source_labels = ground_truth_labels(&source);
        Ok(Self {
            cfg: cfg.clone(),
            ctx,
            source,
            target_train,
            target_val,
            target_test,
            initial: ArmState {
                detector,
                priors,
                anchors,
                round: 0,
            },
            source_labels,
        })
    }

    /// Target-train ground-truth histogram; evaluation only.
    pub fn target_train_hist(&self) -> Vec<f64> {
        histogram(
            self.target_train.iter().flat_map(|s| &s.gt_boxes),
            &self.ctx.spacing,
            &self.ctx.binning,
        )
        .unwrap_or_else(|| vec![0.0; self.ctx.binning.bins()])
    }

    fn detect(&self, state: &ArmState, subjects: &[Subject], seed: u64) -> Vec<EvalCase<f64>> {
        detect_cases(state, subjects, &self.ctx, self.cfg.selection.nms_iou, seed)
    }

    fn snapshot(&self, state: &ArmState, round: usize) -> Result<EvalSnapshot> {
        if self.target_val.is_empty() {
            return Ok(EvalSnapshot {
                ap: Vec::new(),
                sensitivity_at_1fp: 0.0,
            });
        }
        let seed = rng::derive_seed(self.cfg.seed, &[rng::hash_str("val"), round as u64]);
        let cases = self.detect(state, &self.target_val, seed);
        summarize(&cases, &self.cfg)
    }

    /// One round of the alternating procedure for `arm`, starting from a state
    /// that completed `round - 1`.
    pub fn run_round(&self, state: &ArmState, arm: ArmKind, round: usize) -> Result<(ArmState, RoundRecord, Option<PseudoLabelSet<f64>>)> {
        let cfg = &self.cfg;
        let ctx = &self.ctx;
        // causality: round r may only consume priors and anchors stamped r - 1 or earlier
        if round == 0 || state.round + 1 != round || state.priors.round + 1 != round || state.anchors.round >= round {
            return Err(Error::Config(format!(
                "round {round} needs state from round {}, got state {} (priors {}, anchors {})",
                round.saturating_sub(1),
                state.round,
                state.priors.round,
                state.anchors.round
            )));
        }
        let lambda = lambda_at(round, cfg)?;

        // Step 1: supervised source epoch.
        let mut detector = train_update(
            &state.detector,
            Domain::Source,
            &self.source_labels,
            &self.source,
            &state.anchors,
            ctx,
            cfg.training.source_rate,
        );
        let mut priors = state.priors.clone();
        let mut anchors = state.anchors.clone();
        let bins = ctx.binning.bins();
        let mut n_budget = 0;
        let mut quota_counts = vec![0; bins];
        let mut n_candidates = 0;
        let mut candidate_bins = vec![0; bins];
        let mut labels: Option<PseudoLabelSet<f64>> = None;

        // Step 2: target pass.
        if let Some(mode) = arm.selection() {
            let infer_seed = rng::derive_seed(cfg.seed, &[rng::hash_str("adapt"), round as u64]);
            let candidates: Vec<SubjectDetections<f64>> = self
                .target_train
                .par_iter()
                .map(|s| SubjectDetections {
                    id: s.id.clone(),
                    detections: candidate_set(
                        &infer(&detector, s, &anchors, ctx, infer_seed),
                        cfg.selection.tau,
                        cfg.selection.nms_iou,
                    ),
                })
                .collect();
            n_candidates = candidates.iter().map(|c| c.detections.len()).sum();
            for d in candidates.iter().flat_map(|c| &c.detections) {
                candidate_bins[bin_of(&d.bbox, &ctx.spacing, &ctx.binning)] += 1;
            }

            n_budget = budget(priors.mu, lambda);
            let quota = allocate_quota(&priors.hist, n_budget);
            quota_counts = quota.counts.clone();
            let selected = match mode {
                SelectionMode::PriorGuided => select_prior_guided(
                    &candidates,
                    &quota,
                    &ctx.spacing,
                    &ctx.binning,
                    cfg.selection.unfilled_slots,
                    round,
                ),
                SelectionMode::TopP => select_top_p(&candidates, cfg.selection.top_p, round),
                SelectionMode::FixedThreshold => select_fixed_threshold(&candidates, round),
            };

            let counts: Vec<usize> = match cfg.selection.mu_counts {
                MuCounts::Candidates => candidates.iter().map(|c| c.detections.len()).collect(),
                MuCounts::Selected => selected.counts(),
            };
            priors.mu = update_mu(priors.mu, &counts, cfg.ema.alpha_mu)?;
            let observed = histogram(
                selected.subjects.iter().flat_map(|s| s.detections.iter().map(|d| &d.bbox)),
                &ctx.spacing,
                &ctx.binning,
            );
            priors.hist = update_hist(&priors.hist, observed.as_deref(), cfg.ema.alpha_h);

            if arm.adapts_anchors() && selected.total() >= anchors.k() {
                let boxes: Vec<Box3<f64>> = selected
                    .subjects
                    .iter()
                    .flat_map(|s| s.detections.iter().map(|d| d.bbox))
                    .collect();
                let seed = rng::derive_seed(cfg.seed, &[rng::hash_str("kmeans"), round as u64]);
                let centroids = kmeans_shapes(&boxes, anchors.k(), seed)?;
                anchors = ema_update_anchors(&anchors, &centroids, cfg.ema.beta)?;
                anchors.round = round;
            }

            detector = train_update(
                &detector,
                Domain::Target,
                &selected,
                &self.target_train,
                &anchors,
                ctx,
                cfg.training.target_rate,
            );
            labels = Some(selected);
        }
        priors.round = round;

        let next = ArmState {
            detector,
            priors,
            anchors,
            round,
        };
        let label_precision = labels.as_ref().and_then(|l| label_precision(l, &self.target_train));
        let selected_bins = labels
            .as_ref()
            .map(|l| l.bin_counts(&ctx.spacing, &ctx.binning))
            .unwrap_or_else(|| vec![0; bins]);
        let record = RoundRecord {
            arm,
            round,
            lambda,
            budget: n_budget,
            quota: quota_counts,
            mu: next.priors.mu,
            hist: next.priors.hist.clone(),
            anchors: next.anchors.shapes.clone(),
            candidates: n_candidates,
            candidate_bins,
            selected: labels.as_ref().map_or(0, |l| l.total()),
            selected_bins,
            label_precision,
            val: self.snapshot(&next, round)?,
        };
        Ok((next, record, labels))
    }

    /// Runs `arm` from `start` through the last round, handing every round's
    /// state, record and pseudo labels to `on_round`; a `Break` stops early
    /// and returns the state reached.
    pub fn run_arm<F>(&self, arm: ArmKind, start: ArmState, mut on_round: F) -> Result<ArmState>
    where
        F: FnMut(&ArmState, &RoundRecord, Option<&PseudoLabelSet<f64>>) -> Result<ControlFlow<()>>,
    {
        let mut state = start;
        for round in state.round + 1..=self.cfg.rounds {
            let (next, record, labels) = self.run_round(&state, arm, round)?;
            state = next;
            if on_round(&state, &record, labels.as_ref())?.is_break() {
                break;
            }
        }
        Ok(state)
    }

    /// Held-out evaluation with the final anchors. Uses the same inference
    /// seed for every arm.
    pub fn evaluate_test(&self, arm: ArmKind, state: &ArmState) -> Result<TestReport> {
        let cases = self.detect(state, &self.target_test, test_seed(&self.cfg));
        let snapshot = summarize(&cases, &self.cfg)?;
        let curve = froc(&cases, self.cfg.eval.froc_iou)?;
        let pr = pr_curve(&cases, self.cfg.eval.ious[0])?;
        let sensitivity = FROC_BUDGETS
            .iter()
            .map(|&b| (b, curve.sensitivity_at(b)))
            .collect();
        let anchor_fit = mean_coverage(&self.target_test, &state.anchors);
        Ok(TestReport {
            arm,
            ap: snapshot.ap,
            sensitivity,
            froc: curve,
            pr,
            anchor_fit,
            detections: cases
                .into_iter()
                .zip(&self.target_test)
                .map(|(c, s)| SubjectDetections {
                    id: s.id.clone(),
                    detections: c.detections,
                })
                .collect(),
        })
    }
}

fn load_or_generate(src: &CohortSource, seed: u64, ctx: &SimContext) -> Result<Vec<Subject>> {
    match (&src.path, src.spec(seed)?) {
        (_, Some(spec)) => generate_cohort(&spec, ctx),
        (Some(path), None) => {
            let file = crate::io::read_cohort(path)?;
            if file.spacing != ctx.spacing {
                return Err(Error::Config(format!(
                    "{}: spacing {:?} differs from configured {:?}",
                    path.display(),
                    file.spacing.mm(),
                    ctx.spacing.mm()
                )));
            }
            Ok(file.subjects)
        }
        (None, None) => Err(Error::Config("cohort needs either `path` or `preset`".into())),
    }
}

/// Mean anchor coverage over every lesion shape of a cohort.
/// Post-NMS inference of `state` on every subject, paired with its ground
/// truth.
pub fn detect_cases(
    state: &ArmState,
    subjects: &[Subject],
    ctx: &SimContext,
    nms_iou: f64,
    seed: u64,
) -> Vec<EvalCase<f64>> {
    subjects
        .par_iter()
        .map(|s| EvalCase {
            detections: nms3d(&infer(&state.detector, s, &state.anchors, ctx, seed), nms_iou),
            ground_truth: s.gt_boxes.clone(),
        })
        .collect()
}

/// Inference seed of the held-out evaluation.
pub fn test_seed(cfg: &ExperimentConfig) -> u64 {
    rng::derive_seed(cfg.seed, &[rng::hash_str("test")])
}

pub fn mean_coverage(subjects: &[Subject], anchors: &AnchorSet<f64>) -> f64 {
    let covs: Vec<f64> = subjects
        .iter()
        .flat_map(|s| &s.gt_boxes)
        .map(|b| crate::anchors::anchor_coverage(&b.shape(), anchors))
        .collect();
    if covs.is_empty() {
        0.0
    } else {
        covs.iter().sum::<f64>() / covs.len() as f64
    }
}

fn label_precision(labels: &PseudoLabelSet<f64>, subjects: &[Subject]) -> Option<f64> {
    let total = labels.total();
    if total == 0 {
        return None;
    }
    let tp: usize = labels
        .subjects
        .iter()
        .zip(subjects)
        .map(|(l, s)| {
            debug_assert_eq!(l.id, s.id);
            crate::eval::match_greedy(&l.detections, &s.gt_boxes, crate::eval::FROC_IOU).true_positives()
        })
        .sum();
    Some(tp as f64 / total as f64)
}

fn summarize(cases: &[EvalCase<f64>], cfg: &ExperimentConfig) -> Result<EvalSnapshot> {
    let ap = cfg
        .eval
        .ious
        .iter()
        .map(|&t| average_precision(cases, t).map(|v| (t, v)))
        .collect::<Result<Vec<_>>>()?;
    let sens = froc(cases, cfg.eval.froc_iou)?.sensitivity_at(1.0);
    Ok(EvalSnapshot {
        ap,
        sensitivity_at_1fp: sens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub arm: ArmKind,
    pub ap: Vec<(f64, f64)>,
    /// `(fp_per_scan budget, sensitivity)` pairs.
    pub sensitivity: Vec<(f64, f64)>,
    pub froc: FrocCurve<f64>,
    pub pr: Vec<PrPoint<f64>>,
    /// Mean anchor coverage of the test lesions under the final anchors.
    pub anchor_fit: f64,
    pub detections: Vec<SubjectDetections<f64>>,
}

impl TestReport {
    pub fn ap_at(&self, iou: f64) -> Option<f64> {
        self.ap.iter().find(|(t, _)| *t == iou).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: ArmKind,
    pub state: ArmState,
    pub records: Vec<RoundRecord>,
    pub test: TestReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub prepared: Prepared,
    pub arms: Vec<ArmResult>,
}

impl ExperimentResult {
    pub fn arm(&self, kind: ArmKind) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == kind)
    }

    /// Total-variation distance between an arm's final size prior and the
    /// target-train ground-truth histogram.
    pub fn prior_tv(&self, kind: ArmKind) -> Option<f64> {
        let truth = self.prepared.target_train_hist();
        self.arm(kind)
            .and_then(|a| a.records.last())
            .map(|r| total_variation(&r.hist, &truth))
    }
}

/// Runs every configured arm end to end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let prepared = Prepared::new(cfg)?;
    let arms = cfg
        .arms
        .iter()
        .map(|&arm| {
            let mut records = Vec::with_capacity(cfg.rounds);
            let state = prepared.run_arm(arm, prepared.initial.clone(), |_, r, _| {
                records.push(r.clone());
                Ok(ControlFlow::Continue(()))
            })?;
            let test = prepared.evaluate_test(arm, &state)?;
            Ok(ArmResult {
                arm,
                state,
                records,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult { prepared, arms })
}
