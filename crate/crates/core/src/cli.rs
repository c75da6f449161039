// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line pipeline: `synth`, `estimate`, `fit`, `apply`, `fold`, `verify`.
//!
//! Exit status is 0 on success, 1 for numerical or validation failures
//! (including a verification report with a failing check) and 2 for usage
//! errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{Matrix, RankPolicy};
use crate::moments::{CrossMomentSummary, MomentEstimate, MomentSummary};
use crate::synth::{self, Layout};
use crate::transforms::{self, FitOptions, Mode};
use crate::verify::{self, ConstraintTarget, Thresholds, VerificationReport};

pub const RANK_TOL_ENV: &str = "STEERKIT_RANK_TOL";

#[derive(Debug, Parser)]
#[command(name = "steerkit", version, about = "Closed-form concept erasure, switching and steering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic world with planted linear concepts.
    Synth(SynthArgs),
    /// Estimate mean, covariance and cross-covariance from activations.
    Estimate(EstimateArgs),
    /// Fit an affine transform from a moments file.
    Fit(FitArgs),
    /// Apply a transform to every row of an activation file.
    Apply(ApplyArgs),
    /// Fold a transform into the linear layer that precedes it.
    Fold(FoldArgs),
    /// Check a transform's constraint on a labeled sample.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub dim: usize,
    /// Number of planted concepts (label columns).
    #[arg(long, default_value_t = 1)]
    pub concepts: usize,
    #[arg(long, value_enum, default_value_t = LayoutArg::Independent)]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Also write the exact population moments of the world.
    #[arg(long)]
    pub population: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Independent,
    Exclusive,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Labeled activations (`ACTV` binary, or CSV when the name ends in `.csv`).
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Extra label columns appended after `--labels`, e.g. MidSteer targets.
    #[arg(long)]
    pub target_labels: Option<PathBuf>,
    /// Unlabeled sample for the mean and covariance; defaults to the labeled one.
    #[arg(long)]
    pub background: Option<PathBuf>,
    /// Rows of the labeled sample used for the cross-covariance.
    #[arg(long, default_value_t = 1000)]
    pub cross_samples: usize,
    /// Rows of the background sample used for the mean and covariance.
    #[arg(long, default_value_t = 50_000)]
    pub cov_samples: usize,
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FitMode {
    Erase,
    Switch,
    Midsteer,
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    /// Relative singular-value cutoff; defaults to max(rows, cols) · ε.
    #[arg(long, env = RANK_TOL_ENV)]
    pub rank_tol: Option<f64>,
    /// Absolute singular-value cutoff applied on top of the relative one.
    #[arg(long, default_value_t = 0.0)]
    pub rank_floor: f64,
}

impl RankArgs {
    fn policy(&self) -> Result<RankPolicy> {
        let policy = RankPolicy {
            relative: self.rank_tol,
            absolute_floor: self.rank_floor,
            ..RankPolicy::default()
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub moments: PathBuf,
    #[arg(long, value_enum)]
    pub mode: FitMode,
    /// Steering strength; defaults to 1 for erase and midsteer, 2 for switch.
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    /// Project the cross-covariance onto the image of the covariance instead
    /// of failing with `RangeViolation`.
    #[arg(long)]
    pub project: bool,
    #[command(flatten)]
    pub rank: RankArgs,
    /// Omit the creation timestamp so identical inputs give identical files.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long)]
    pub layer: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Zero,
    Negated,
    Mapto,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub transform: PathBuf,
    /// Original (untransformed) activations.
    #[arg(long)]
    pub activations: PathBuf,
    /// Source labels; for `mapto` without `--target-labels`, the first half of
    /// the columns are sources and the second half targets.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub target_labels: Option<PathBuf>,
    /// Defaults from the transform's mode.
    #[arg(long, value_enum)]
    pub target: Option<TargetArg>,
    /// Rows used for verification; defaults to all.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    pub constraint_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub guardedness_tol: f64,
    /// Print a CSV header and row instead of the text report.
    #[arg(long)]
    pub csv: bool,
}

/// Parse `argv`, run the command and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli.command, &mut stdout.lock()) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            1
        }
    }
}

/// Run a parsed command, writing reports to `out`. Returns whether every
/// check passed.
pub fn execute(command: &Command, out: &mut dyn Write) -> Result<bool> {
    match command {
        Command::Synth(a) => synth_cmd(a, out),
        Command::Estimate(a) => estimate_cmd(a, out),
        Command::Fit(a) => fit_cmd(a, out),
        Command::Apply(a) => apply_cmd(a, out),
        Command::Fold(a) => fold_cmd(a, out),
        Command::Verify(a) => verify_cmd(a, out),
    }
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|source| Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn read_activations_any(path: &Path) -> Result<Matrix> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        io::read_activations_csv(path)
    } else {
        io::read_activations(path)
    }
}

fn synth_cmd(a: &SynthArgs, out: &mut dyn Write) -> Result<bool> {
    let layout = match a.layout {
        LayoutArg::Independent => Layout::Independent,
        LayoutArg::Exclusive => Layout::Exclusive,
    };
    let spec = synth::random_world(a.dim, a.concepts, layout, a.n, a.seed);
    let world = synth::generate(&spec)?;
    io::write_activations(&world.activations, &a.activations)?;
    io::write_labels(&world.labels, &a.labels)?;
    if let Some(path) = &a.population {
        let population = MomentEstimate {
            mean: world.population.mean.clone(),
            cov_xx: world.population.cov_xx.clone(),
            cov_xz: world.population.cov_xz.clone(),
            samples: 0,
            cross_samples: 0,
        };
        io::write_moments(&population, path)?;
    }
    emit(
        out,
        format!(
            "wrote {} x {} activations and {} label columns (partitions: {})",
            a.n, a.dim, a.concepts, world.partitions
        ),
    )?;
    Ok(true)
}

fn row_batches(m: &Matrix, rows: usize, batch: usize) -> impl Iterator<Item = (usize, Matrix)> + '_ {
    let batch = batch.max(1);
    (0..rows)
        .step_by(batch)
        .map(move |start| (start, m.rows(start, batch.min(rows - start)).into_owned()))
}

fn estimate_cmd(a: &EstimateArgs, out: &mut dyn Write) -> Result<bool> {
    let labeled = read_activations_any(&a.activations)?;
    let mut labels = io::read_labels(&a.labels)?;
    if let Some(path) = &a.target_labels {
        labels = labels.hstack(&io::read_labels(path)?)?;
    }
    if labels.samples() != labeled.nrows() {
        return Err(Error::dims(format!(
            "{} activation rows but {} label rows",
            labeled.nrows(),
            labels.samples()
        )));
    }

    let cross_rows = a.cross_samples.min(labeled.nrows());
    let mut cross = CrossMomentSummary::new(labeled.ncols(), labels.label_dim());
    for (start, batch) in row_batches(&labeled, cross_rows, a.batch_size) {
        let z = labels.slice_rows(start, batch.nrows());
        cross.update_batch(&batch, &z)?;
    }
    let cov_xz = cross.cross_covariance()?;

    let background = match &a.background {
        Some(path) => read_activations_any(path)?,
        None => labeled.rows(0, cross_rows).into_owned(),
    };
    if background.ncols() != labeled.ncols() {
        return Err(Error::dims(format!(
            "background has {} columns, labeled sample has {}",
            background.ncols(),
            labeled.ncols()
        )));
    }
    let cov_rows = if a.background.is_some() {
        a.cov_samples.min(background.nrows())
    } else {
        background.nrows()
    };
    let mut summary = MomentSummary::new(background.ncols());
    for (_, batch) in row_batches(&background, cov_rows, a.batch_size) {
        summary.update_batch(&batch)?;
    }
    let (mean, cov_xx) = summary.finalize()?;

    let estimate = MomentEstimate {
        mean,
        cov_xx,
        cov_xz,
        samples: cov_rows,
        cross_samples: cross_rows,
    };
    io::write_moments(&estimate, &a.out)?;
    emit(
        out,
        format!(
            "estimated moments: dim {}, {} label columns, {} covariance rows, {} labeled rows",
            estimate.dim(),
            estimate.label_dim(),
            cov_rows,
            cross_rows
        ),
    )?;
    Ok(true)
}

fn fit_cmd(a: &FitArgs, out: &mut dyn Write) -> Result<bool> {
    let m = io::read_moments(&a.moments)?;
    let opts = FitOptions {
        beta: a.beta,
        policy: a.rank.policy()?,
        project_onto_range: a.project,
    };
    let t = match a.mode {
        FitMode::Erase => transforms::fit_leace_erase(&m.mean, &m.cov_xx, &m.cov_xz, &opts)?,
        FitMode::Switch => transforms::fit_leace_switch(&m.mean, &m.cov_xx, &m.cov_xz, &opts)?,
        FitMode::Midsteer => {
            let (source, target) = m.split_source_target()?;
            transforms::fit_midsteer(&m.mean, &m.cov_xx, &source, &target, &opts)?
        }
    };
    let mut t = t
        .with_note("tool", concat!("steerkit ", env!("CARGO_PKG_VERSION")))
        .with_note("covariance_samples", m.samples)
        .with_note("cross_samples", m.cross_samples);
    if !a.deterministic {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        t = t.with_note("created_unix", secs);
    }
    io::write_transform(&t, &a.out)?;
    emit(
        out,
        format!(
            "fitted {} (beta {}) on dim {}: concept rank {}",
            t.mode,
            t.beta,
            t.dim(),
            t.provenance.get("concept_rank").map(String::as_str).unwrap_or("?")
        ),
    )?;
    Ok(true)
}

fn apply_cmd(a: &ApplyArgs, out: &mut dyn Write) -> Result<bool> {
    let t = io::read_transform(&a.transform)?;
    let x = read_activations_any(&a.activations)?;
    let y = t.apply(&x)?;
    io::write_activations(&y, &a.out)?;
    emit(out, format!("applied {} to {} rows", t.mode, y.nrows()))?;
    Ok(true)
}

fn fold_cmd(a: &FoldArgs, out: &mut dyn Write) -> Result<bool> {
    let t = io::read_transform(&a.transform)?;
    let layer = io::read_layer(&a.layer)?;
    let folded = transforms::fold_into_layer(&t, &layer)?;
    io::write_layer(&folded, &a.out)?;
    emit(
        out,
        format!(
            "folded {} into a {} x {} layer",
            t.mode,
            folded.output_dim(),
            folded.input_dim()
        ),
    )?;
    Ok(true)
}

fn default_target(mode: Mode) -> TargetArg {
    match mode {
        Mode::LeaceErase | Mode::VanillaErase => TargetArg::Zero,
        Mode::LeaceSwitch | Mode::VanillaSwitch => TargetArg::Negated,
        Mode::MidSteer | Mode::VanillaAdd => TargetArg::Mapto,
    }
}

fn verify_cmd(a: &VerifyArgs, out: &mut dyn Write) -> Result<bool> {
    let t = io::read_transform(&a.transform)?;
    let mut x = read_activations_any(&a.activations)?;
    let mut labels = io::read_labels(&a.labels)?;
    let mut target_labels = match &a.target_labels {
        Some(path) => Some(io::read_labels(path)?),
        None => None,
    };
    if labels.samples() != x.nrows() {
        return Err(Error::dims(format!(
            "{} activation rows but {} label rows",
            x.nrows(),
            labels.samples()
        )));
    }
    if let Some(n) = a.samples {
        let n = n.min(x.nrows());
        x = x.rows(0, n).into_owned();
        labels = labels.head(n);
        target_labels = target_labels.map(|z| z.head(n));
    }

    let target = a.target.unwrap_or_else(|| default_target(t.mode));
    if target == TargetArg::Mapto && target_labels.is_none() {
        let k = labels.label_dim();
        if k == 0 || !k.is_multiple_of(2) {
            return Err(Error::InvalidSpec(format!(
                "mapto needs target labels or an even number of label columns, got {k}"
            )));
        }
        let source: Vec<usize> = (0..k / 2).collect();
        let goal: Vec<usize> = (k / 2..k).collect();
        target_labels = Some(labels.select_columns(&goal)?);
        labels = labels.select_columns(&source)?;
    }
    let constraint = match target {
        TargetArg::Zero => ConstraintTarget::Zero,
        TargetArg::Negated => ConstraintTarget::Negated,
        TargetArg::Mapto => ConstraintTarget::MapTo(target_labels.as_ref().expect("set above")),
    };
    let thresholds = Thresholds {
        constraint: a.constraint_tol,
        guardedness_ratio: a.guardedness_tol,
    };
    let report = verify::verify_transform(&t, &x, &labels, constraint, &thresholds)?;
    if a.csv {
        emit(out, VerificationReport::CSV_HEADER)?;
        emit(out, report.csv_row())?;
    } else {
        emit(out, &report)?;
    }
    Ok(report.passed())
}
