//! On-disk formats. Every file starts with a header naming its format and a
//! `major.minor` version; readers reject unknown majors.
//!
//! JSONL files hold one header object on the first line and one record per
//! following line. Boxes are written as `[x, y, z, w, h, d]` in voxels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{ArmKind, ArmState, RoundRecord, TestReport};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{Box3, Spacing};
use crate::selection::{PseudoLabelSet, SelectionMode, SubjectDetections};
use crate::simulation::{Domain, Subject};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_VERSION: &str = "1.0";

pub const COHORT_FORMAT: &str = "labelshift-cohort";
pub const DETECTIONS_FORMAT: &str = "labelshift-detections";
pub const PSEUDO_LABELS_FORMAT: &str = "labelshift-pseudo-labels";
pub const ROUND_LOG_FORMAT: &str = "labelshift-round-log";
pub const CHECKPOINT_FORMAT: &str = "labelshift-checkpoint";
pub const MANIFEST_FORMAT: &str = "labelshift-manifest";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: String,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Header {
    pub fn new(format: &str) -> Self {
        Self {
            format: format.to_string(),
            version: FORMAT_VERSION.to_string(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra.insert(
            key.to_string(),
            serde_json::to_value(value).expect("header field serializes"),
        );
        self
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str, path: &Path) -> Result<T> {
        let v = self
            .extra
            .get(key)
            .ok_or_else(|| format_err(path, format!("header lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| format_err(path, format!("header `{key}`: {e}")))
    }

    fn check(&self, format: &str, path: &Path) -> Result<()> {
        if self.format != format {
            return Err(format_err(
                path,
                format!("expected a {format} file, found {}", self.format),
            ));
        }
        check_version(format, &self.version)
    }
}

pub fn check_version(kind: &str, version: &str) -> Result<()> {
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(Error::Version {
            kind: kind.to_string(),
            found: version.to_string(),
            supported: FORMAT_MAJOR,
        });
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_jsonl<R: Serialize>(path: &Path, header: &Header, records: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<R: DeserializeOwned>(path: &Path, format: &str) -> Result<(Header, Vec<R>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            Some((n, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| format_err(path, format!("line {}: bad header: {e}", n + 1)))?;
            }
            None => return Err(format_err(path, "empty file")),
        }
    };
    header.check(format, path)?;
    let mut out = Vec::new();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok((header, out))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CohortRecord {
    id: String,
    domain: Domain,
    boxes: Vec<Box3<f64>>,
}

/// A cohort as stored on disk: subjects plus the voxel grid they live on.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortFile {
    pub spacing: Spacing<f64>,
    pub field: [f64; 3],
    pub subjects: Vec<Subject>,
}

pub fn write_cohort(path: &Path, cohort: &CohortFile) -> Result<()> {
    let header = Header::new(COHORT_FORMAT)
        .with("spacing", cohort.spacing)
        .with("field", cohort.field);
    write_jsonl(
        path,
        &header,
        cohort.subjects.iter().map(|s| CohortRecord {
            id: s.id.clone(),
            domain: s.domain,
            boxes: s.gt_boxes.clone(),
        }),
    )
}

pub fn read_cohort(path: &Path) -> Result<CohortFile> {
    let (header, records) = read_jsonl::<CohortRecord>(path, COHORT_FORMAT)?;
    Ok(CohortFile {
        spacing: header.get("spacing", path)?,
        field: header.get("field", path)?,
        subjects: records
            .into_iter()
            .map(|r| Subject {
                id: r.id,
                domain: r.domain,
                gt_boxes: r.boxes,
            })
            .collect(),
    })
}

pub fn write_detections(path: &Path, subjects: &[SubjectDetections<f64>]) -> Result<()> {
    write_jsonl(path, &Header::new(DETECTIONS_FORMAT), subjects)
}

pub fn read_detections(path: &Path) -> Result<Vec<SubjectDetections<f64>>> {
    Ok(read_jsonl(path, DETECTIONS_FORMAT)?.1)
}

pub fn write_pseudo_labels(path: &Path, labels: &PseudoLabelSet<f64>) -> Result<()> {
    let header = Header::new(PSEUDO_LABELS_FORMAT)
        .with("round", labels.round)
        .with("mode", labels.mode);
    write_jsonl(path, &header, &labels.subjects)
}

pub fn read_pseudo_labels(path: &Path) -> Result<PseudoLabelSet<f64>> {
    let (header, subjects) = read_jsonl::<SubjectDetections<f64>>(path, PSEUDO_LABELS_FORMAT)?;
    Ok(PseudoLabelSet {
        round: header.get("round", path)?,
        mode: header.get::<SelectionMode>("mode", path)?,
        subjects,
    })
}

/// Test-set results of one arm without the raw detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub arm: ArmKind,
    pub ap: Vec<(f64, f64)>,
    pub sensitivity: Vec<(f64, f64)>,
    pub froc: Vec<(f64, f64)>,
    pub pr: Vec<(f64, f64)>,
    pub anchor_fit: f64,
}

impl From<&TestReport> for FinalRecord {
    fn from(t: &TestReport) -> Self {
        Self {
            arm: t.arm,
            ap: t.ap.clone(),
            sensitivity: t.sensitivity.clone(),
            froc: t.froc.points.iter().map(|p| (p.fp_per_scan, p.sensitivity)).collect(),
            pr: t.pr.iter().map(|p| (p.recall, p.precision)).collect(),
            anchor_fit: t.anchor_fit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Round(RoundRecord),
    Final(FinalRecord),
}

/// Append-only round log. Opening an existing log for append checks its
/// header first.
pub struct RoundLog {
    writer: BufWriter<File>,
}

impl RoundLog {
    pub fn create(path: &Path, config_digest: &str) -> Result<Self> {
        let mut writer = create(path)?;
        let header = Header::new(ROUND_LOG_FORMAT).with("config_digest", config_digest);
        serde_json::to_writer(&mut writer, &header)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(Self { writer })
    }

    /// Reopens a log, dropping any entries of `arm` past `keep_through`, so a
    /// resumed run does not duplicate rounds.
    pub fn resume(path: &Path, config_digest: &str, arm: ArmKind, keep_through: usize) -> Result<Self> {
        let (header, entries) = read_round_log(path)?;
        let found: String = header.get("config_digest", path)?;
        if found != config_digest {
            return Err(Error::ResumeMismatch {
                expected: config_digest.to_string(),
                found,
            });
        }
        let kept: Vec<LogEntry> = entries
            .into_iter()
            .filter(|e| match e {
                LogEntry::Round(r) => r.arm != arm || r.round <= keep_through,
                LogEntry::Final(f) => f.arm != arm,
            })
            .collect();
        write_jsonl(path, &header, &kept)?;
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            writer: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<()> {
        serde_json::to_writer(&mut self.writer, entry)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_round_log(path: &Path) -> Result<(Header, Vec<LogEntry>)> {
    read_jsonl(path, ROUND_LOG_FORMAT)
}

/// Everything needed to continue an arm after round `state.round`.
///
/// Every random stream is derived from the experiment seed plus the round
/// and purpose, so the round number doubles as the stream cursor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
    pub arm: ArmKind,
    pub rng_cursor: u64,
    pub state: ArmState,
}

impl Checkpoint {
    pub fn new(config_digest: &str, seed: u64, arm: ArmKind, state: ArmState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: FORMAT_VERSION.to_string(),
            config_digest: config_digest.to_string(),
            seed,
            arm,
            rng_cursor: state.round as u64,
            state,
        }
    }

    /// Writes through a temporary file so an interrupted write never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut w = create(&tmp)?;
            serde_json::to_writer_pretty(&mut w, self)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
        let format = value.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        if format != CHECKPOINT_FORMAT {
            return Err(format_err(path, format!("expected a {CHECKPOINT_FORMAT} file")));
        }
        check_version(
            CHECKPOINT_FORMAT,
            value.get("version").and_then(|v| v.as_str()).unwrap_or_default(),
        )?;
        serde_json::from_value(value).map_err(|e| format_err(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// Written last: its presence means the run finished.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub tool_version: String,
    pub config_digest: String,
    pub seed: u64,
    pub arms: Vec<ArmKind>,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    /// Hashes `files`, given relative to `root`.
    pub fn build(root: &Path, config_digest: &str, seed: u64, arms: &[ArmKind], files: &[PathBuf]) -> Result<Self> {
        let files = files
            .iter()
            .map(|rel| {
                let bytes = std::fs::read(root.join(rel))?;
                Ok(ManifestEntry {
                    path: rel.clone(),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format: MANIFEST_FORMAT.to_string(),
            version: FORMAT_VERSION.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: config_digest.to_string(),
            seed,
            arms: arms.to_vec(),
            files,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| format_err(path, e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(format_err(path, format!("expected a {MANIFEST_FORMAT} file")));
        }
        check_version(MANIFEST_FORMAT, &m.version)?;
        Ok(m)
    }
}

/// Two whitespace-separated columns under `# <x> <y>`.
pub fn write_curve(path: &Path, x_name: &str, y_name: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# {x_name} {y_name}")?;
    for (x, y) in points {
        writeln!(w, "{x} {y}")?;
    }
    w.flush()?;
    Ok(())
}

/// x and y column names.
pub type CurveNames = (String, String);

/// Returns the column names and the points.
pub fn read_curve(path: &Path) -> Result<(CurveNames, Vec<(f64, f64)>)> {
    let text = std::fs::read_to_string(path)?;
    let mut names = None;
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if names.is_none() {
                let mut it = rest.split_whitespace();
                if let (Some(x), Some(y)) = (it.next(), it.next()) {
                    names = Some((x.to_string(), y.to_string()));
                }
            }
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(x)), Some(Ok(y)), None) => points.push((x, y)),
            _ => return Err(format_err(path, format!("line {}: expected two numbers", n + 1))),
        }
    }
    let names = names.unwrap_or_else(|| ("x".into(), "y".into()));
    Ok((names, points))
}

/// Detections and ground truth of one subject.
pub type ScoredPair = (Vec<Detection<f64>>, Vec<Box3<f64>>);

/// Pairs detections with cohort subjects by id. Ids present on only one side
/// are returned as orphans rather than silently dropped.
pub fn pair_by_id(
    detections: &[SubjectDetections<f64>],
    subjects: &[Subject],
) -> (Vec<ScoredPair>, Vec<String>) {
    use std::collections::BTreeMap;
    let mut dets: BTreeMap<&str, &SubjectDetections<f64>> =
        detections.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut pairs = Vec::new();
    let mut orphans = Vec::new();
    for s in subjects {
        match dets.remove(s.id.as_str()) {
            Some(d) => pairs.push((d.detections.clone(), s.gt_boxes.clone())),
            None => orphans.push(s.id.clone()),
        }
    }
    orphans.extend(dets.keys().map(|k| k.to_string()));
    orphans.sort();
    (pairs, orphans)
}
