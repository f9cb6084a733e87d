use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;

use labelshift::io::{read_curve, read_round_log, write_curve, LogEntry};

use crate::svg::{render, Plot, Series};
use crate::{CliError, CliResult, Global};

#[derive(Args)]
pub struct ReportArgs {
    /// Round log to plot.
    #[arg(required_unless_present = "data")]
    log: Option<PathBuf>,
    /// Re-plot the data files in this directory instead of reading a log.
    #[arg(long, conflicts_with = "log")]
    data: Option<PathBuf>,
}

type DataFiles = BTreeMap<String, (&'static str, &'static str, Vec<(f64, f64)>)>;

/// Data files are named `<plot>__<series>.dat`.
const SEP: &str = "__";

pub fn run(global: &Global, args: &ReportArgs) -> CliResult<()> {
    let out = global.out_required()?;
    std::fs::create_dir_all(out)?;
    let data = match (&args.log, &args.data) {
        (Some(log), _) => {
            let data = out.join("data");
            std::fs::create_dir_all(&data)?;
            write_data(log, &data)?;
            data
        }
        (None, Some(d)) => d.clone(),
        (None, None) => unreachable!("clap requires one input"),
    };
    let n = plot_dir(&data, out)?;
    println!("wrote {n} plots to {}", out.display());
    Ok(())
}

fn write_data(log: &Path, dir: &Path) -> CliResult<()> {
    let (_, entries) = read_round_log(log)?;
    if entries.is_empty() {
        return Err(CliError::Runtime(format!("{}: log has no entries", log.display())));
    }
    let mut series: DataFiles = BTreeMap::new();
    let push = |series: &mut DataFiles, plot: String, name: &str, axes: (&'static str, &'static str), p| {
        series
            .entry(format!("{plot}{SEP}{name}"))
            .or_insert_with(|| (axes.0, axes.1, Vec::new()))
            .2
            .push(p);
    };
    for e in &entries {
        match e {
            LogEntry::Round(r) => {
                let arm = r.arm.name();
                let x = r.round as f64;
                for (b, &h) in r.hist.iter().enumerate() {
                    push(&mut series, format!("prior_{arm}"), &format!("bin{b:02}"), ("round", "h"), (x, h));
                }
                push(&mut series, "mu".into(), arm, ("round", "mu"), (x, r.mu));
                for &(iou, ap) in &r.val.ap {
                    push(&mut series, format!("ap_round_iou{iou:.2}"), arm, ("round", "ap"), (x, ap));
                }
            }
            LogEntry::Final(f) => {
                let arm = f.arm.name();
                series.insert(format!("froc{SEP}{arm}"), ("fp_per_scan", "sensitivity", f.froc.clone()));
                series.insert(format!("pr{SEP}{arm}"), ("recall", "precision", f.pr.clone()));
            }
        }
    }
    for (file, (x, y, points)) in &series {
        write_curve(&dir.join(format!("{file}.dat")), x, y, points)?;
    }
    Ok(())
}

fn title(plot: &str) -> String {
    if let Some(arm) = plot.strip_prefix("prior_") {
        format!("size prior h by round, {arm}")
    } else if let Some(iou) = plot.strip_prefix("ap_round_iou") {
        format!("validation AP@{iou} by round")
    } else {
        match plot {
            "mu" => "lesions per subject estimate mu".into(),
            "froc" => "FROC, test split".into(),
            "pr" => "precision-recall, test split".into(),
            other => other.into(),
        }
    }
}

/// Renders every plot found in `data` into `out`; returns the plot count.
fn plot_dir(data: &Path, out: &Path) -> CliResult<usize> {
    let mut groups: BTreeMap<String, Vec<(String, PathBuf)>> = BTreeMap::new();
    for entry in std::fs::read_dir(data)? {
        let path = entry?.path();
        let Some(stem) = path.extension().filter(|e| *e == "dat").and(path.file_stem()) else {
            continue;
        };
        let stem = stem.to_string_lossy();
        if let Some((plot, name)) = stem.split_once(SEP) {
            groups.entry(plot.to_string()).or_default().push((name.to_string(), path.clone()));
        }
    }
    if groups.is_empty() {
        return Err(CliError::Runtime(format!("{}: no data files", data.display())));
    }
    for (plot, mut members) in groups.iter().map(|(k, v)| (k, v.clone())) {
        members.sort();
        let mut labels = None;
        let mut series = Vec::new();
        for (name, path) in members {
            let (axes, points) = read_curve(&path)?;
            labels.get_or_insert(axes);
            series.push(Series { name, points });
        }
        let (x_label, y_label) = labels.expect("at least one member");
        let svg = render(&Plot {
            title: title(plot),
            x_label,
            y_label,
            series,
        });
        std::fs::write(out.join(format!("{plot}.svg")), svg)?;
    }
    Ok(groups.len())
}
