//! The `traceinv` command-line front-end.
//!
//! Exit codes: 0 success, 1 runtime failure (divergence, failed verification,
//! write errors), 2 usage or input error, 3 reconstruction did not converge.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::model::{train, Dataset, Params, TrainConfig};
use crate::solver::{
    match_solutions, reconstruct, verify_reconstruction, BoxBounds, ReconstructionResult,
    SolverConfig,
};
use crate::system::{feasibility, FeasibilityReport, NetworkShape, ReconstructionProblem};
use crate::trace::{parse_trace, render_trace, Document, FloatFormat, ParamTrace};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

pub const DATASET_MAGIC: &str = "traceinv-dataset";
pub const REPORT_MAGIC: &str = "traceinv-report";

#[derive(Debug, Parser)]
#[command(
    name = "traceinv",
    version,
    about = "Train a tanh neuron, then recover its training data from the parameter trace"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a dataset and write the per-epoch parameter trace.
    Train(TrainArgs),
    /// Print the four reference training tables (3 decimals).
    Tables,
    /// Recover the dataset from a trace file.
    Reconstruct(ReconstructArgs),
    /// Retrain on a recovered dataset and compare with the observed trace.
    Verify(VerifyArgs),
    /// Count equations and unknowns for a fully connected network.
    Feasibility(FeasibilityArgs),
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["x", "data"])))]
pub struct TrainArgs {
    /// Comma-separated inputs.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        requires = "y"
    )]
    pub x: Vec<f64>,
    /// Comma-separated labels.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        requires = "x"
    )]
    pub y: Vec<f64>,
    /// Dataset file (`traceinv-dataset` or `traceinv-report`).
    #[arg(long, conflicts_with_all = ["x", "y"])]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub w0: f64,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub b0: f64,
    /// Sample w0 and b0 uniformly from [0, 1) with this seed instead.
    #[arg(long, conflicts_with_all = ["w0", "b0"])]
    pub init_seed: Option<u64>,
    /// Round parameters to this many significant digits (default: exact).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=17))]
    pub precision: Option<u8>,
    /// Include per-epoch predictions and loss.
    #[arg(long)]
    pub debug: bool,
    /// Output file (default: stdout).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    pub trace: PathBuf,
    /// Write the machine-readable report here.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Reference dataset to match the recovered pairs against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub max_iterations: usize,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub step_tolerance: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub damping: f64,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    pub starts: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// First starting point as x0,..,xn-1,y0,..,yn-1.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub start: Option<Vec<f64>>,
    /// Box bounds as x_lo,x_hi,y_lo,y_hi.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, num_args = 1)]
    pub bounds: Option<Vec<f64>>,
    /// Allow traces with fewer than n+1 epochs (least squares).
    #[arg(long)]
    pub underdetermined: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub trace: PathBuf,
    /// Recovered dataset or reconstruction report.
    pub recovered: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct FeasibilityArgs {
    /// Nodes per layer.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub width: u64,
    /// Layers, including input and output.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub layers: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub instances: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<u8, Failure>;

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run_from<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, stdout, stderr),
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            if e.use_stderr() {
                EXIT_USAGE
            } else {
                let _ = write!(stdout, "{}", e.render());
                EXIT_OK
            }
        }
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8 {
    let result = match cli.command {
        Command::Train(args) => cmd_train(&args, stdout),
        Command::Tables => cmd_tables(stdout),
        Command::Reconstruct(args) => cmd_reconstruct(&args, stdout),
        Command::Verify(args) => cmd_verify(&args, stdout),
        Command::Feasibility(args) => cmd_feasibility(&args, stdout),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

fn read_input(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

fn write_output(
    path: Option<&Path>,
    text: &str,
    stdout: &mut dyn Write,
) -> std::result::Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text)
            .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", p.display()))),
        None => stdout.write_all(text.as_bytes()).map_err(Failure::runtime),
    }
}

fn load_trace_file(path: &Path) -> std::result::Result<ParamTrace, Failure> {
    parse_trace(&read_input(path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn load_dataset_file(path: &Path) -> std::result::Result<Dataset, Failure> {
    parse_dataset(&read_input(path)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

pub fn cmd_train(args: &TrainArgs, stdout: &mut dyn Write) -> CmdResult {
    let data = match &args.data {
        Some(path) => load_dataset_file(path)?,
        None => Dataset::new(args.x.clone(), args.y.clone()).map_err(Failure::usage)?,
    };
    let init = match args.init_seed {
        Some(seed) => Params::sample(&mut ChaCha8Rng::seed_from_u64(seed)),
        None => Params::new(args.w0, args.b0).map_err(Failure::usage)?,
    };
    let cfg = TrainConfig::new(args.eta, args.epochs as usize, init).map_err(Failure::usage)?;
    let format = match args.precision {
        Some(d) => FloatFormat::significant(d).map_err(Failure::usage)?,
        None => FloatFormat::Shortest,
    };

    let trace = train(&data, &cfg).map_err(Failure::runtime)?;
    let trace = if args.debug {
        trace
    } else {
        trace.without_debug()
    };
    write_output(args.out.as_deref(), &render_trace(&trace, format), stdout)?;
    Ok(EXIT_OK)
}

/// One reference table: rendered 3-decimal cells per row, five epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TableView {
    pub caption: String,
    pub w: Vec<String>,
    pub b: Vec<String>,
    pub yhat: Vec<String>,
    pub loss: Vec<String>,
}

const TABLE_XS: [f64; 4] = [0.6, 0.2, 0.1, 0.9];
const TABLE_YS: [f64; 4] = [0.5, 0.4, 0.3, 0.6];

/// Trains on the first `n` reference pairs (η = 0.1, w = b = 0.5, 5 epochs).
pub fn reference_trace(n: usize) -> crate::Result<ParamTrace> {
    let data = Dataset::new(TABLE_XS[..n].to_vec(), TABLE_YS[..n].to_vec())?;
    let cfg = TrainConfig::new(0.1, 5, Params { w: 0.5, b: 0.5 })?;
    train(&data, &cfg)
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

fn tuple(values: &[String]) -> String {
    format!("({})", values.join(", "))
}

pub fn reference_tables() -> crate::Result<Vec<TableView>> {
    (1..=4)
        .map(|n| {
            let trace = reference_trace(n)?;
            let debug = trace.debug().expect("training records debug values");
            let yhat = debug
                .iter()
                .map(|rec| {
                    let cells: Vec<String> = rec.yhat.iter().map(|&v| fmt3(v)).collect();
                    if n == 1 {
                        cells[0].clone()
                    } else {
                        tuple(&cells)
                    }
                })
                .collect();
            let inputs: Vec<String> = TABLE_XS[..n].iter().map(|v| v.to_string()).collect();
            let labels: Vec<String> = TABLE_YS[..n].iter().map(|v| v.to_string()).collect();
            Ok(TableView {
                caption: format!(
                    "Table {n}: x = {} and y = {}",
                    tuple(&inputs),
                    tuple(&labels)
                ),
                w: trace.entries().iter().map(|p| fmt3(p.w)).collect(),
                b: trace.entries().iter().map(|p| fmt3(p.b)).collect(),
                yhat,
                loss: debug.iter().map(|rec| fmt3(rec.loss)).collect(),
            })
        })
        .collect()
}

pub fn render_tables(tables: &[TableView]) -> String {
    let mut out = String::new();
    for t in tables {
        let _ = writeln!(out, "{}", t.caption);
        let _ = writeln!(
            out,
            "| epoch | {} |",
            (0..t.w.len())
                .map(|j| j.to_string())
                .collect::<Vec<_>>()
                .join(" | ")
        );
        for (name, row) in [
            ("w", &t.w),
            ("b", &t.b),
            ("y_hat", &t.yhat),
            ("loss", &t.loss),
        ] {
            let _ = writeln!(out, "| {name} | {} |", row.join(" | "));
        }
        out.push('\n');
    }
    out
}

pub fn cmd_tables(stdout: &mut dyn Write) -> CmdResult {
    let tables = reference_tables().map_err(Failure::runtime)?;
    stdout
        .write_all(render_tables(&tables).as_bytes())
        .map_err(Failure::runtime)?;
    Ok(EXIT_OK)
}

pub fn cmd_reconstruct(args: &ReconstructArgs, stdout: &mut dyn Write) -> CmdResult {
    let box_bounds = match args.bounds.as_deref() {
        None => None,
        Some([xl, xh, yl, yh]) => Some(BoxBounds {
            x: (*xl, *xh),
            y: (*yl, *yh),
        }),
        Some(other) => {
            return Err(Failure::usage(format!(
                "--bounds takes 4 values, got {}",
                other.len()
            )))
        }
    };
    let cfg = SolverConfig {
        max_iterations: args.max_iterations,
        residual_tolerance: args.tolerance,
        step_tolerance: args.step_tolerance,
        damping_init: args.damping,
        multistart_count: args.starts as usize,
        seed: args.seed,
        box_bounds,
        first_start: args.start.clone(),
        allow_underdetermined: args.underdetermined,
    };
    cfg.validate().map_err(Failure::usage)?;

    let trace = load_trace_file(&args.trace)?;
    let truth = args.truth.as_deref().map(load_dataset_file).transpose()?;
    let problem = ReconstructionProblem::new(trace).map_err(Failure::usage)?;
    let result = reconstruct(&problem, &cfg).map_err(|e| match e {
        Error::InsufficientTrace { .. } | Error::InvalidArgument(_) => Failure::usage(e),
        other => Failure::runtime(other),
    })?;
    let matched = truth
        .map(|t| match_solutions(&result.recovered, &t))
        .transpose()
        .map_err(Failure::usage)?;

    let mut text = String::new();
    let _ = writeln!(text, "converged: {}", result.converged);
    let _ = writeln!(text, "residual_norm: {:e}", result.residual_norm);
    let _ = writeln!(text, "iterations: {}", result.iterations);
    let _ = writeln!(text, "starts_tried: {}", result.starts_tried);
    let _ = writeln!(text, "x = ({})", join(result.recovered.xs()));
    let _ = writeln!(text, "y = ({})", join(result.recovered.ys()));
    if let Some(m) = &matched {
        let _ = writeln!(
            text,
            "match: max_abs_error {:e}, pairing {:?}",
            m.max_abs_error, m.pairing
        );
    }
    stdout
        .write_all(text.as_bytes())
        .map_err(Failure::runtime)?;

    if let Some(path) = &args.out {
        let extra = matched.map(|m| m.max_abs_error);
        write_output(Some(path), &render_report(&result, extra), stdout)?;
    }
    Ok(if result.converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn cmd_verify(args: &VerifyArgs, stdout: &mut dyn Write) -> CmdResult {
    if args.threshold.is_nan() || args.threshold <= 0.0 {
        return Err(Failure::usage("--threshold must be positive"));
    }
    let trace = load_trace_file(&args.trace)?;
    let dataset = load_dataset_file(&args.recovered)?;
    if dataset.len() != trace.n() {
        return Err(Failure::usage(format!(
            "trace has n = {} but the recovered dataset has {} pairs",
            trace.n(),
            dataset.len()
        )));
    }
    let report =
        verify_reconstruction(&trace, &dataset, args.threshold).map_err(Failure::runtime)?;

    let mut text = String::from("epoch |dw| |db|\n");
    for (j, (dw, db)) in report.deviations.iter().enumerate() {
        let _ = writeln!(text, "{j} {dw:e} {db:e}");
    }
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    let _ = writeln!(
        text,
        "max deviation {:e} (threshold {:e}): {verdict}",
        report.max_deviation, report.threshold
    );
    stdout
        .write_all(text.as_bytes())
        .map_err(Failure::runtime)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILURE })
}

pub fn render_feasibility(shape: &NetworkShape, report: &FeasibilityReport) -> String {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "shape: width {}, layers {}, instances {}, epochs {}",
        shape.width, shape.layers, shape.instances, shape.epochs
    );
    let _ = writeln!(text, "nodes: {}", shape.nodes());
    let _ = writeln!(text, "connections: {}", shape.connections());
    let _ = writeln!(text, "unknowns: {}", report.unknowns);
    let _ = writeln!(text, "equations: {}", report.equations);
    let _ = writeln!(
        text,
        "feasible: {} ({})",
        report.feasible,
        FeasibilityReport::LABEL
    );
    let _ = writeln!(text, "min_epochs: {}", report.min_epochs);
    let _ = writeln!(text, "rough bound I/width: {}", report.rough_epoch_bound);
    text
}

pub fn cmd_feasibility(args: &FeasibilityArgs, stdout: &mut dyn Write) -> CmdResult {
    let shape = NetworkShape::new(args.width, args.layers, args.instances, args.epochs)
        .map_err(Failure::usage)?;
    let text = render_feasibility(&shape, &feasibility(shape));
    stdout
        .write_all(text.as_bytes())
        .map_err(Failure::runtime)?;
    Ok(EXIT_OK)
}

pub fn render_dataset(data: &Dataset) -> String {
    let mut doc = Document::new(DATASET_MAGIC);
    doc.key("n", data.len().to_string());
    doc.section("pairs", pair_rows(data));
    doc.render()
}

fn pair_rows(data: &Dataset) -> Vec<String> {
    data.pairs()
        .enumerate()
        .map(|(i, (x, y))| format!("{i} {x} {y}"))
        .collect()
}

pub fn render_report(result: &ReconstructionResult, match_error: Option<f64>) -> String {
    let mut doc = Document::new(REPORT_MAGIC);
    doc.key("converged", result.converged.to_string());
    doc.key("residual_norm", result.residual_norm.to_string());
    doc.key("iterations", result.iterations.to_string());
    doc.key("starts_tried", result.starts_tried.to_string());
    if let Some(e) = match_error {
        doc.key("match_max_abs_error", e.to_string());
    }
    doc.key("n", result.recovered.len().to_string());
    doc.section("pairs", pair_rows(&result.recovered));
    doc.render()
}

/// Reads the `[pairs]` section of a dataset or report file.
pub fn parse_dataset(text: &str) -> crate::Result<Dataset> {
    let doc = Document::parse(text)?;
    if doc.magic() != REPORT_MAGIC {
        doc.expect_magic(DATASET_MAGIC)?;
    }
    let n: usize = doc.required("n")?;
    let rows = doc
        .rows("pairs")
        .ok_or_else(|| Error::Validation("missing [pairs] section".into()))?;
    let mut pairs = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let fields = row.numbers(3)?;
        if fields[0] != i as f64 {
            return Err(Error::Validation(format!(
                "line {}: pair indices must be contiguous from 0, expected {i}",
                row.line
            )));
        }
        pairs.push((fields[1], fields[2]));
    }
    if pairs.len() != n {
        return Err(Error::Validation(format!(
            "header declares n = {n} but [pairs] has {} rows",
            pairs.len()
        )));
    }
    Dataset::from_pairs(&pairs).map_err(|e| Error::Validation(e.to_string()))
}
