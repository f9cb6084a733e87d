use std::path::PathBuf;

use clap::Args;
use serde::Deserialize;

use labelshift::config::BinningSection;
use labelshift::geometry::bin_of;
use labelshift::io::{write_cohort, CohortFile};
use labelshift::simulation::{generate_cohort, CohortPreset, CohortSpec, Domain, SimContext, DEFAULT_FIELD};
use labelshift::Spacing;

use crate::{CliError, CliResult, Global};

#[derive(Args)]
pub struct GenerateArgs {
    /// Cohort spec (TOML). Without one, `--preset` is used.
    spec: Option<PathBuf>,
    /// Preset to generate when no spec file is given.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Subject count; overrides the spec.
    #[arg(long)]
    subjects: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PresetArg {
    FdgLike,
    PsmaLike,
}

impl From<PresetArg> for CohortPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::FdgLike => CohortPreset::FdgLike,
            PresetArg::PsmaLike => CohortPreset::PsmaLike,
        }
    }
}

/// Cohort spec file. Unset fields fall back to the preset.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    preset: CohortPreset,
    domain: Option<Domain>,
    n_subjects: Option<usize>,
    lesions_mean: Option<f64>,
    lesions_variance: Option<f64>,
    size_hist: Option<Vec<f64>>,
    max_log_aspect: Option<f64>,
    #[serde(default = "default_spacing")]
    spacing: [f64; 3],
    #[serde(default = "default_field")]
    field: [f64; 3],
    #[serde(default)]
    binning: BinningSection,
}

fn default_spacing() -> [f64; 3] {
    [4.0, 4.0, 5.0]
}

fn default_field() -> [f64; 3] {
    DEFAULT_FIELD
}

impl SpecFile {
    fn from_preset(preset: CohortPreset) -> Self {
        Self {
            preset,
            domain: None,
            n_subjects: None,
            lesions_mean: None,
            lesions_variance: None,
            size_hist: None,
            max_log_aspect: None,
            spacing: default_spacing(),
            field: default_field(),
            binning: BinningSection::default(),
        }
    }

    fn resolve(self, seed: u64, subjects: Option<usize>) -> CliResult<(CohortSpec, SimContext)> {
        let [dx, dy, dz] = self.spacing;
        let ctx = SimContext {
            spacing: Spacing::new(dx, dy, dz)?,
            binning: self.binning.build()?,
            field: self.field,
        };
        let n = subjects.or(self.n_subjects).unwrap_or(100);
        let mut spec = CohortSpec::preset(self.preset, n, seed);
        if let Some(d) = self.domain {
            spec.domain = d;
        }
        if let Some(m) = self.lesions_mean {
            spec.lesions_mean = m;
        }
        if let Some(v) = self.lesions_variance {
            spec.lesions_variance = v;
        }
        if let Some(h) = self.size_hist {
            spec.size_hist = h;
        }
        if let Some(a) = self.max_log_aspect {
            spec.max_log_aspect = a;
        }
        spec.validate(&ctx)?;
        Ok((spec, ctx))
    }
}

pub fn run(global: &Global, args: &GenerateArgs) -> CliResult<()> {
    let out = global.out_required()?;
    let file = match (&args.spec, args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            toml::from_str::<SpecFile>(&text)
                .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?
        }
        (None, Some(p)) => SpecFile::from_preset(p.into()),
        (None, None) => return Err(CliError::Usage("give a spec file or --preset".into())),
    };
    let (spec, ctx) = file.resolve(global.seed.unwrap_or(0), args.subjects)?;
    let subjects = generate_cohort(&spec, &ctx)?;

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_cohort(
        out,
        &CohortFile {
            spacing: ctx.spacing,
            field: ctx.field,
            subjects: subjects.clone(),
        },
    )?;

    let mut counts = vec![0usize; ctx.binning.bins()];
    for b in subjects.iter().flat_map(|s| &s.gt_boxes) {
        counts[bin_of(b, &ctx.spacing, &ctx.binning)] += 1;
    }
    let lesions: usize = counts.iter().sum();
    println!(
        "wrote {}: {} subjects, {} lesions ({:.2} per subject)",
        out.display(),
        subjects.len(),
        lesions,
        lesions as f64 / subjects.len().max(1) as f64
    );
    println!("{:>3}  {:>18}  {:>7}  {:>8}", "bin", "volume cc", "lesions", "fraction");
    let edges = ctx.binning.edges();
    for (b, &c) in counts.iter().enumerate() {
        let lo = if b == 0 { 0.0 } else { edges[b - 1] };
        let range = match edges.get(b) {
            Some(hi) => format!("[{lo:.3}, {hi:.3})"),
            None => format!("[{lo:.3}, inf)"),
        };
        let frac = if lesions > 0 { c as f64 / lesions as f64 } else { 0.0 };
        println!("{b:>3}  {range:>18}  {c:>7}  {frac:>8.3}");
    }
    Ok(())
}
