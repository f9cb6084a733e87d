use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use labelshift::eval::Detection;
use labelshift::io::{read_cohort, read_round_log, write_cohort, write_detections, CohortFile, LogEntry, Manifest};
use labelshift::selection::SubjectDetections;
use labelshift::simulation::{Domain, Subject};
use labelshift::{Box3, Spacing};

const SMALL: &str = r#"
rounds = 4

[cohorts.source]
preset = "fdg_like"
n_subjects = 30

[cohorts.target]
preset = "psma_like"
n_subjects = 40
"#;

fn labelshift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelshift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn run_small(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", s(cfg), "--out", s(out)];
    args.extend_from_slice(extra);
    labelshift(&args)
}

#[test]
fn generate_preset_prints_histogram_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let o = labelshift(&["generate", "--preset", "psma-like", "--subjects", "50", "--seed", "7", "--out", s(p)]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        let stdout = text(&o.stdout);
        assert!(stdout.contains("50 subjects"), "{stdout}");
        assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 10);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_cohort(&a).unwrap().subjects.len(), 50);
}

#[test]
fn malformed_spec_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    let out = dir.path().join("c.jsonl");
    std::fs::write(&spec, "preset = \"psma_like\"\nlesion_mean = 3\n").unwrap();
    let o = labelshift(&["generate", s(&spec), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("lesion_mean"));
    assert!(!out.exists());

    std::fs::write(&spec, "preset = \"psma_like\"\nsize_hist = [1.0, 0.0]\n").unwrap();
    let o = labelshift(&["generate", s(&spec), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("size_hist"));
    assert!(!out.exists());
}

#[test]
fn run_writes_manifest_of_existing_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let o = run_small(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let m = Manifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(m.arms.len(), 4);
    for f in &m.files {
        let bytes = std::fs::read(out.join(&f.path)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    let names: Vec<String> = m.files.iter().map(|f| f.path.display().to_string()).collect();
    for want in ["rounds.jsonl", "checkpoints/top_p.json", "pseudo_labels/prior_guided_anchor.jsonl", "curves/froc__source_only.dat"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
    // source_only never selects pseudo labels
    assert!(!out.join("pseudo_labels/source_only.jsonl").exists());
    let (_, entries) = read_round_log(&out.join("rounds.jsonl")).unwrap();
    assert_eq!(entries.len(), 4 * 4 + 4);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "rounds = 3\n[selection]\ntaux = 0.5\n").unwrap();
    let out = dir.path().join("run");
    let o = run_small(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("taux"), "{}", text(&o.stderr));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn interrupted_run_resumes_to_identical_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let whole = dir.path().join("whole");
    let parts = dir.path().join("parts");
    assert!(run_small(&cfg, &whole, &[]).status.success());

    let o = run_small(&cfg, &parts, &["--stop-after", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!parts.join("manifest.json").exists());
    // refuses to clobber without --resume
    assert_eq!(run_small(&cfg, &parts, &[]).status.code(), Some(2));
    let o = run_small(&cfg, &parts, &["--resume"]);
    assert!(o.status.success(), "{}", text(&o.stderr));

    for f in ["rounds.jsonl", "metrics.json", "manifest.json", "checkpoints/prior_guided_anchor.json"] {
        assert_eq!(
            std::fs::read(whole.join(f)).unwrap(),
            std::fs::read(parts.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn resume_with_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run_small(&cfg, &out, &["--stop-after", "1"]).status.code(), Some(1));
    let o = run_small(&cfg, &out, &["--resume", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("config"), "{}", text(&o.stderr));
}

fn cube(x: f64) -> Box3<f64> {
    Box3::new([x, 0.0, 0.0], [2.0, 2.0, 2.0]).unwrap()
}

fn two_lesion_cohort(dir: &Path) -> PathBuf {
    let p = dir.join("cohort.jsonl");
    let subject = |id: &str, x: f64| Subject {
        id: id.into(),
        domain: Domain::Target,
        gt_boxes: vec![cube(x)],
    };
    write_cohort(
        &p,
        &CohortFile {
            spacing: Spacing::new(4.0, 4.0, 5.0).unwrap(),
            field: [128.0, 128.0, 200.0],
            subjects: vec![subject("a", 0.0), subject("b", 10.0)],
        },
    )
    .unwrap();
    p
}

fn detections(dir: &Path, dets: &[(&str, f64, f64)]) -> PathBuf {
    let p = dir.join("dets.jsonl");
    let mut by_id: Vec<SubjectDetections<f64>> = Vec::new();
    for &(id, x, c) in dets {
        let d = Detection::new(cube(x), c).unwrap();
        match by_id.iter_mut().find(|s| s.id == id) {
            Some(s) => s.detections.push(d),
            None => by_id.push(SubjectDetections {
                id: id.into(),
                detections: vec![d],
            }),
        }
    }
    write_detections(&p, &by_id).unwrap();
    p
}

fn ap_lines(stdout: &str) -> Vec<String> {
    stdout.lines().filter(|l| l.starts_with("AP@")).map(String::from).collect()
}

#[test]
fn eval_perfect_empty_and_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = two_lesion_cohort(dir.path());

    let perfect = detections(dir.path(), &[("a", 0.0, 1.0), ("b", 10.0, 1.0)]);
    let o = labelshift(&["eval", "--cohort", s(&cohort), "--detections", s(&perfect)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(ap_lines(&text(&o.stdout)), ["AP@0.1: 1.0000", "AP@0.25: 1.0000", "AP@0.5: 1.0000"]);

    let empty = dir.path().join("empty.jsonl");
    let none: Vec<SubjectDetections<f64>> = ["a", "b"]
        .iter()
        .map(|id| SubjectDetections {
            id: id.to_string(),
            detections: vec![],
        })
        .collect();
    write_detections(&empty, &none).unwrap();
    let o = labelshift(&["eval", "--cohort", s(&cohort), "--detections", s(&empty)]);
    let stdout = text(&o.stdout);
    assert_eq!(ap_lines(&stdout), ["AP@0.1: 0.0000", "AP@0.25: 0.0000", "AP@0.5: 0.0000"]);
    assert_eq!(stdout.matches("FP/scan: 0.0000").count(), 7);

    let fixture = detections(dir.path(), &[("a", 0.0, 0.9), ("b", 50.0, 0.8), ("b", 10.0, 0.7)]);
    let out = dir.path().join("metrics");
    let o = labelshift(&["eval", "--cohort", s(&cohort), "--detections", s(&fixture), "--iou", "0.5", "--out", s(&out)]);
    assert_eq!(ap_lines(&text(&o.stdout)), ["AP@0.5: 0.8333"]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert!((m["ap"][0][1].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12);
}

#[test]
fn eval_lists_orphans() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = two_lesion_cohort(dir.path());
    let dets = detections(dir.path(), &[("a", 0.0, 1.0), ("ghost", 0.0, 1.0)]);
    let o = labelshift(&["eval", "--cohort", s(&cohort), "--detections", s(&dets)]);
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    assert!(err.contains("\"b\"") && err.contains("\"ghost\""), "{err}");
}

#[test]
fn eval_from_checkpoint_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    assert!(run_small(&cfg, &out, &[]).status.success());
    let cohort = out.join("cohorts/target.jsonl");
    let ckpt = out.join("checkpoints/top_p.json");
    let o = labelshift(&["eval", "--config", s(&cfg), "--cohort", s(&cohort), "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(ap_lines(&text(&o.stdout)).len(), 3);
    // without the run's config the checkpoint does not belong
    let o = labelshift(&["eval", "--cohort", s(&cohort), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_metrics_recompute_from_emitted_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(run_small(&cfg, &run, &[]).status.success());
    let run_metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    for (i, arm) in ["source_only", "top_p", "top_p_anchor", "prior_guided_anchor"].iter().enumerate() {
        let out = dir.path().join(format!("eval_{arm}"));
        let o = labelshift(&[
            "eval",
            "--cohort",
            s(&run.join("cohorts/target_test.jsonl")),
            "--detections",
            s(&run.join(format!("detections/{arm}.jsonl"))),
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
        let recorded = &run_metrics["arms"][i];
        assert_eq!(recorded["arm"], *arm);
        assert_eq!(m["ap"], recorded["ap"]);
        assert_eq!(m["sensitivity"], recorded["sensitivity"]);
        assert_eq!(m["froc"], recorded["froc"]);
    }
}

fn svgs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn report_plots_every_arm_and_replots_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(run_small(&cfg, &run, &[]).status.success());
    let rep = dir.path().join("report");
    let o = labelshift(&["report", s(&run.join("rounds.jsonl")), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let first = svgs(&rep);
    let froc = String::from_utf8(first.iter().find(|(n, _)| n == "froc.svg").unwrap().1.clone()).unwrap();
    assert_eq!(froc.matches("<polyline").count(), 4);
    for name in ["pr.svg", "mu.svg", "prior_prior_guided_anchor.svg", "ap_round_iou0.10.svg"] {
        assert!(first.iter().any(|(n, _)| n == name), "{name} missing");
    }

    let again = dir.path().join("replot");
    let o = labelshift(&["report", "--data", s(&rep.join("data")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(svgs(&again), first);
}

#[test]
fn report_single_round_and_empty_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    assert!(run_small(&cfg, &run, &[]).status.success());
    let log = run.join("rounds.jsonl");
    let text_log = std::fs::read_to_string(&log).unwrap();
    let mut lines = text_log.lines();
    let header = lines.next().unwrap().to_string();

    // keep round 1 of every arm
    let one = dir.path().join("one.jsonl");
    let kept: Vec<&str> = lines
        .filter(|l| matches!(serde_json::from_str::<LogEntry>(l), Ok(LogEntry::Round(r)) if r.round == 1))
        .collect();
    assert_eq!(kept.len(), 4);
    std::fs::write(&one, format!("{header}\n{}\n", kept.join("\n"))).unwrap();
    let rep = dir.path().join("rep");
    let o = labelshift(&["report", s(&one), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let mu = std::fs::read_to_string(rep.join("mu.svg")).unwrap();
    assert_eq!(mu.matches("<polyline").count(), 4);
    assert_eq!(mu.matches("<circle").count(), 4);

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, format!("{header}\n")).unwrap();
    let o = labelshift(&["report", s(&empty), "--out", s(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("no entries"));
}
