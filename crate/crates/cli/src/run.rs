use std::ops::ControlFlow;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use labelshift::adapt::{ArmKind, Prepared};
use labelshift::io::{
    read_round_log, write_cohort, write_curve, write_detections, write_pseudo_labels, Checkpoint, CohortFile,
    FinalRecord, LogEntry, Manifest, RoundLog,
};
use labelshift::Error;

use crate::{CliError, CliResult, Global};

#[derive(Args)]
pub struct RunArgs {
    /// Continue an interrupted run in `--out` from its checkpoints.
    #[arg(long)]
    resume: bool,
    /// Stop once an arm completes this round, leaving a resumable run.
    #[arg(long, value_name = "ROUND")]
    stop_after: Option<usize>,
}

const LOG: &str = "rounds.jsonl";
const MANIFEST: &str = "manifest.json";
const PROGRESS_EVERY: usize = 25;

#[derive(Serialize)]
struct Metrics<'a> {
    config_digest: &'a str,
    seed: u64,
    arms: Vec<FinalRecord>,
}

struct ArmFiles {
    checkpoint: PathBuf,
    pseudo_labels: PathBuf,
    detections: PathBuf,
    froc: PathBuf,
    pr: PathBuf,
}

impl ArmFiles {
    fn new(arm: ArmKind) -> Self {
        let n = arm.name();
        Self {
            checkpoint: PathBuf::from(format!("checkpoints/{n}.json")),
            pseudo_labels: PathBuf::from(format!("pseudo_labels/{n}.jsonl")),
            detections: PathBuf::from(format!("detections/{n}.jsonl")),
            froc: PathBuf::from(format!("curves/froc__{n}.dat")),
            pr: PathBuf::from(format!("curves/pr__{n}.dat")),
        }
    }
}

pub fn run(global: &Global, args: &RunArgs) -> CliResult<()> {
    let cfg = global.experiment_config()?;
    let dir = global.out_required()?.clone();
    let digest = cfg.digest();
    let log_path = dir.join(LOG);

    if log_path.exists() && !args.resume {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pass --resume or choose another directory",
            dir.display()
        )));
    }
    let mut finished = Vec::new();
    if args.resume && log_path.exists() {
        let (header, entries) = read_round_log(&log_path)?;
        let found: String = header.get("config_digest", &log_path)?;
        if found != digest {
            return Err(Error::ResumeMismatch { expected: digest, found }.into());
        }
        finished.extend(entries.iter().filter_map(|e| match e {
            LogEntry::Final(f) => Some(f.arm),
            LogEntry::Round(_) => None,
        }));
    }
    // a manifest marks a finished run, so it goes before anything else changes
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path)?;
    }
    for sub in ["cohorts", "checkpoints", "pseudo_labels", "detections", "curves"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }

    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let prep = Prepared::new(&cfg)?;
    let target: Vec<_> = [&prep.target_train, &prep.target_val, &prep.target_test]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    let cohorts = [
        ("source", prep.source.clone()),
        ("target", target),
        ("target_test", prep.target_test.clone()),
    ];
    for (name, subjects) in cohorts {
        let file = CohortFile {
            spacing: prep.ctx.spacing,
            field: prep.ctx.field,
            subjects,
        };
        write_cohort(&dir.join(format!("cohorts/{name}.jsonl")), &file)?;
    }

    let mut log = if log_path.exists() {
        None
    } else {
        Some(RoundLog::create(&log_path, &digest)?)
    };
    for &arm in &cfg.arms {
        if finished.contains(&arm) {
            eprintln!("{}: already finished", arm.name());
            continue;
        }
        let files = ArmFiles::new(arm);
        let ckpt_path = dir.join(&files.checkpoint);
        let start = if args.resume && ckpt_path.exists() {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            if ckpt.config_digest != digest {
                return Err(Error::ResumeMismatch {
                    expected: digest,
                    found: ckpt.config_digest,
                }
                .into());
            }
            if ckpt.arm != arm {
                return Err(CliError::Runtime(format!(
                    "{} holds a checkpoint of arm {}",
                    ckpt_path.display(),
                    ckpt.arm.name()
                )));
            }
            eprintln!("{}: resuming after round {}", arm.name(), ckpt.state.round);
            ckpt.state
        } else {
            prep.initial.clone()
        };
        if args.resume {
            drop(log.take());
            log = Some(RoundLog::resume(&log_path, &digest, arm, start.round)?);
        }
        let writer = log.as_mut().expect("log open");

        let mut stopped = false;
        let state = prep.run_arm(arm, start, |state, record, labels| {
            writer.append(&LogEntry::Round(record.clone()))?;
            if let Some(l) = labels {
                write_pseudo_labels(&dir.join(&files.pseudo_labels), l)?;
            }
            Checkpoint::new(&digest, cfg.seed, arm, state.clone()).save(&ckpt_path)?;
            if record.round % PROGRESS_EVERY == 0 || record.round == cfg.rounds {
                eprintln!("{}: round {}/{}", arm.name(), record.round, cfg.rounds);
            }
            if args.stop_after == Some(record.round) {
                stopped = true;
                return Ok(ControlFlow::Break(()));
            }
            Ok(ControlFlow::Continue(()))
        })?;
        if stopped {
            return Err(CliError::Runtime(format!(
                "stopped after round {} of {}; rerun with --resume to continue",
                state.round,
                arm.name()
            )));
        }
        // a checkpoint is always on disk, even when no round ran
        Checkpoint::new(&digest, cfg.seed, arm, state.clone()).save(&ckpt_path)?;

        let report = prep.evaluate_test(arm, &state)?;
        let fin = FinalRecord::from(&report);
        write_detections(&dir.join(&files.detections), &report.detections)?;
        write_curve(&dir.join(&files.froc), "fp_per_scan", "sensitivity", &fin.froc)?;
        write_curve(&dir.join(&files.pr), "recall", "precision", &fin.pr)?;
        writer.append(&LogEntry::Final(fin))?;
    }
    drop(log);

    let (_, entries) = read_round_log(&log_path)?;
    let finals: Vec<FinalRecord> = entries
        .into_iter()
        .filter_map(|e| match e {
            LogEntry::Final(f) => Some(f),
            LogEntry::Round(_) => None,
        })
        .collect();
    let metrics = Metrics {
        config_digest: &digest,
        seed: cfg.seed,
        arms: finals.clone(),
    };
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics).map_err(Error::from)? + "\n",
    )?;

    let mut files: Vec<PathBuf> = [
        "config.toml",
        "cohorts/source.jsonl",
        "cohorts/target.jsonl",
        "cohorts/target_test.jsonl",
        LOG,
        "metrics.json",
    ]
        .iter()
        .map(PathBuf::from)
        .collect();
    for &arm in &cfg.arms {
        let f = ArmFiles::new(arm);
        for p in [f.checkpoint, f.pseudo_labels, f.detections, f.froc, f.pr] {
            if dir.join(&p).exists() {
                files.push(p);
            }
        }
    }
    Manifest::build(&dir, &digest, cfg.seed, &cfg.arms, &files)?.save(&manifest_path)?;

    print_summary(&finals);
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn print_summary(finals: &[FinalRecord]) {
    let Some(first) = finals.first() else { return };
    let mut head = format!("{:<22}", "arm");
    for (iou, _) in &first.ap {
        head += &format!("  {:>8}", format!("AP@{iou}"));
    }
    println!("{head}  {:>8}  {:>10}", "sens@1", "anchor fit");
    for f in finals {
        let mut line = format!("{:<22}", f.arm.name());
        for (_, ap) in &f.ap {
            line += &format!("  {ap:>8.4}");
        }
        let s1 = f.sensitivity.iter().find(|(b, _)| *b == 1.0).map_or(f64::NAN, |p| p.1);
        println!("{line}  {s1:>8.4}  {:>10.4}", f.anchor_fit);
    }
}

