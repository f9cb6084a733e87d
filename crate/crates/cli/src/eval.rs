use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use labelshift::adapt::{detect_cases, test_seed};
use labelshift::eval::{average_precision, froc, EvalCase, FROC_BUDGETS, FROC_IOU};
use labelshift::io::{pair_by_id, read_cohort, read_detections, write_curve, Checkpoint};
use labelshift::selection::SubjectDetections;
use labelshift::Error;

use crate::{CliError, CliResult, Global};

#[derive(Args)]
pub struct EvalArgs {
    /// Cohort file with ground truth.
    #[arg(long)]
    cohort: PathBuf,
    /// Detections file to score.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    detections: Option<PathBuf>,
    /// Checkpoint whose detector is run on the cohort instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// IoU thresholds for AP.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5")]
    iou: Vec<f64>,
    /// IoU threshold of the FROC matching.
    #[arg(long, default_value_t = FROC_IOU)]
    froc_iou: f64,
}

#[derive(Serialize)]
struct Report {
    subjects: usize,
    lesions: usize,
    detections: usize,
    ap: Vec<(f64, f64)>,
    froc_iou: f64,
    sensitivity: Vec<(f64, f64)>,
    froc: Vec<(f64, f64)>,
}

pub fn run(global: &Global, args: &EvalArgs) -> CliResult<()> {
    for &t in args.iou.iter().chain([&args.froc_iou]) {
        if !(t > 0.0 && t <= 1.0) {
            return Err(CliError::Usage(format!("IoU thresholds must lie in (0, 1], got {t}")));
        }
    }
    let cohort = read_cohort(&args.cohort)?;
    let detections: Vec<SubjectDetections<f64>> = match (&args.detections, &args.checkpoint) {
        (Some(p), _) => read_detections(p)?,
        (None, Some(p)) => {
            let ckpt = Checkpoint::load(p)?;
            let mut cfg = global.experiment_config()?;
            if global.seed.is_none() {
                cfg.seed = ckpt.seed;
            }
            let digest = cfg.digest();
            if digest != ckpt.config_digest {
                return Err(Error::ResumeMismatch {
                    expected: digest,
                    found: ckpt.config_digest,
                }
                .into());
            }
            let ctx = cfg.context()?;
            if ctx.spacing != cohort.spacing {
                return Err(CliError::Usage(format!(
                    "{}: spacing {:?} differs from the configured {:?}",
                    args.cohort.display(),
                    cohort.spacing.mm(),
                    ctx.spacing.mm()
                )));
            }
            detect_cases(&ckpt.state, &cohort.subjects, &ctx, cfg.selection.nms_iou, test_seed(&cfg))
                .into_iter()
                .zip(&cohort.subjects)
                .map(|(c, s)| SubjectDetections {
                    id: s.id.clone(),
                    detections: c.detections,
                })
                .collect()
        }
        (None, None) => unreachable!("clap requires one input"),
    };

    let (pairs, orphans) = pair_by_id(&detections, &cohort.subjects);
    if !orphans.is_empty() {
        return Err(Error::SubjectMismatch(orphans).into());
    }
    let cases: Vec<EvalCase<f64>> = pairs
        .into_iter()
        .map(|(detections, ground_truth)| EvalCase {
            detections,
            ground_truth,
        })
        .collect();
    let lesions = cases.iter().map(|c| c.ground_truth.len()).sum();
    if lesions == 0 {
        return Err(Error::NoGroundTruth.into());
    }

    let ap = args
        .iou
        .iter()
        .map(|&t| Ok((t, average_precision(&cases, t)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let curve = froc(&cases, args.froc_iou)?;
    let report = Report {
        subjects: cases.len(),
        lesions,
        detections: cases.iter().map(|c| c.detections.len()).sum(),
        ap,
        froc_iou: args.froc_iou,
        sensitivity: FROC_BUDGETS.iter().map(|&b| (b, curve.sensitivity_at(b))).collect(),
        froc: curve.points.iter().map(|p| (p.fp_per_scan, p.sensitivity)).collect(),
    };

    println!(
        "{} subjects, {} lesions, {} detections",
        report.subjects, report.lesions, report.detections
    );
    for (t, v) in &report.ap {
        println!("AP@{t}: {v:.4}");
    }
    println!("FROC (IoU {}):", report.froc_iou);
    for (b, s) in &report.sensitivity {
        println!("  sensitivity at {b} FP/scan: {s:.4}");
    }
    println!("  {} operating points", report.froc.len());

    if let Some(dir) = &global.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n",
        )?;
        write_curve(&dir.join("froc.dat"), "fp_per_scan", "sensitivity", &report.froc)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}
