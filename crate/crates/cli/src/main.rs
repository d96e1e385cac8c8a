//! `moelab` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moelab::em::{self, FitConfig};
use moelab::experiments::{self, Aggregate, PlotStyle, SweepConfig, SweepResult};
use moelab::partition::eta_sweep;
use moelab::polysys::{self, IndexConvention, PolyCandidate, PolySystemInstance, RbarPolicy};
use moelab::voronoi::{self, Gauge, LossOptions, Metric, YGrid};
use moelab::{Dataset, Error, MixingMeasure, Result, UniformBox};

#[derive(Parser)]
#[command(name = "moelab", version, about = "Top-K sparse softmax gated mixtures of experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a true mixing measure.
    Gen(GenArgs),
    /// Fit a mixing measure to a dataset by EM.
    Fit(FitArgs),
    /// Voronoi loss between a fitted and a true measure.
    Loss(LossArgs),
    /// Monte-Carlo expected Hellinger distance between two measures.
    Hellinger(HellingerArgs),
    /// Partition match rate under perturbed gating slopes.
    PartitionCheck(PartitionArgs),
    /// Residuals of the over-specification polynomial system, or a search for a nontrivial solution.
    Polysys(PolysysArgs),
    /// Replicated sample-size sweep.
    Sweep(SweepArgs),
    /// Log-log plot of an existing sweep CSV.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long = "K")]
    top_k: usize,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// `lo:hi` per input coordinate, comma separated. Defaults to the unit box.
    #[arg(long)]
    inputs: Option<String>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Fitted measure document.
    #[arg(long)]
    out: PathBuf,
    /// JSON fit summary.
    #[arg(long)]
    summary: PathBuf,
}

#[derive(Args)]
struct LossArgs {
    /// d1, d2 or d3.
    #[arg(long)]
    metric: String,
    #[arg(long = "K")]
    top_k: usize,
    #[arg(long)]
    fit: PathBuf,
    #[arg(long = "true")]
    truth: PathBuf,
    /// exact or conjecture (d2 only).
    #[arg(long, default_value = "exact")]
    rbar: String,
    /// raw, anchored or optimal.
    #[arg(long, default_value = "raw")]
    gauge: String,
    #[arg(long)]
    expert_only: bool,
}

#[derive(Args)]
struct HellingerArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long = "Ka")]
    top_k_a: usize,
    #[arg(long)]
    b: PathBuf,
    #[arg(long = "Kb")]
    top_k_b: usize,
    #[arg(long, default_value_t = 1000)]
    n_mc: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    inputs: Option<String>,
    /// Quadrature nodes in y per input.
    #[arg(long, default_value_t = 2001)]
    grid_points: usize,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long = "K")]
    top_k: usize,
    #[arg(long, default_value_t = 100_000)]
    n_mc: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6])]
    etas: Vec<f64>,
    #[arg(long)]
    inputs: Option<String>,
}

#[derive(Args)]
struct PolysysArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    r: u32,
    /// Residual table of the two-component candidate with this scale (needs m = 2).
    #[arg(long, conflicts_with = "search", required_unless_present = "search")]
    witness: Option<f64>,
    /// Multistart search for a nontrivial solution; prints a JSON report.
    #[arg(long)]
    search: bool,
    #[arg(long, default_value_t = 200)]
    restarts: usize,
    #[arg(long, required_if_eq("search", "true"))]
    seed: Option<u64>,
    /// heat or plain.
    #[arg(long, default_value = "heat")]
    convention: String,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Worker threads; overrides the config's parallelism.
    #[arg(long)]
    jobs: Option<usize>,
    /// Full-scale grid instead of the desk-scale one.
    #[arg(long)]
    full: bool,
    /// Overrides the config's base_seed.
    #[arg(long)]
    seed: u64,
    /// Regress every row instead of per-n means.
    #[arg(long)]
    per_row: bool,
    /// Omit the regression line from the plot.
    #[arg(long)]
    no_line: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_line: bool,
    #[arg(long, default_value = "")]
    title: String,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_measure(path: &Path) -> Result<MixingMeasure> {
    MixingMeasure::from_text(&read(path)?)
}

/// Reads a measure and enforces the ground-truth assumptions.
fn read_truth(path: &Path) -> Result<MixingMeasure> {
    let g = read_measure(path)?;
    MixingMeasure::new_true(g.family(), g.into_components())
}

fn input_box(spec: Option<&str>, dim: usize) -> Result<UniformBox> {
    match spec {
        Some(s) => s.parse(),
        None => Ok(UniformBox::unit(dim)),
    }
}

fn gen(a: GenArgs) -> Result<u8> {
    let truth = read_truth(&a.truth)?;
    let inputs = input_box(a.inputs.as_deref(), truth.dim())?;
    let data = truth.sample_dataset(a.top_k, a.n, &inputs, a.seed)?;
    write(&a.out, &data.to_tsv())?;
    println!("wrote {} rows to {}", data.len(), a.out.display());
    Ok(0)
}

fn fit(a: FitArgs) -> Result<u8> {
    let data = Dataset::from_tsv(&read(&a.data)?)?;
    let mut cfg = FitConfig::from_text(&read(&a.config)?)?;
    cfg.seed = a.seed;
    let res = em::fit(&data, &cfg)?;
    write(&a.out, &res.measure.to_text())?;
    write(&a.summary, &res.summary_json())?;
    println!(
        "iterations={} converged={} final_loglik={}",
        res.iterations,
        res.converged,
        res.final_loglik()
    );
    Ok(0)
}

fn loss(a: LossArgs) -> Result<u8> {
    let fit = read_measure(&a.fit)?;
    let truth = read_truth(&a.truth)?;
    let metric = match a.metric.as_str() {
        "d1" => Metric::D1,
        "d2" => Metric::D2(a.rbar.parse::<RbarPolicy>()?),
        "d3" => Metric::D3,
        m => return Err(Error::InvalidArgument(format!("unknown metric `{m}` (d1|d2|d3)"))),
    };
    let gauge: Gauge = a.gauge.parse()?;
    let opts = if a.expert_only {
        LossOptions::expert_only()
    } else {
        LossOptions::default()
    };
    let eval = |g: &MixingMeasure| voronoi::voronoi_loss(g, &truth, a.top_k, metric, &opts);
    let report = voronoi::gauged_loss(&fit, &truth, gauge, eval)?.report;
    println!("{}", report.to_json());
    Ok(0)
}

fn hellinger(a: HellingerArgs) -> Result<u8> {
    let ga = read_measure(&a.a)?;
    let gb = read_measure(&a.b)?;
    let inputs = input_box(a.inputs.as_deref(), ga.dim())?;
    let est = voronoi::expected_hellinger(
        &ga,
        a.top_k_a,
        &gb,
        a.top_k_b,
        &inputs,
        a.n_mc,
        &YGrid::Auto { points: a.grid_points },
        a.seed,
    )?;
    println!("{}", serde_json::json!({ "mean": est.mean, "stderr": est.stderr }));
    Ok(0)
}

fn partition_check(a: PartitionArgs) -> Result<u8> {
    let truth = read_truth(&a.truth)?;
    let inputs = input_box(a.inputs.as_deref(), truth.dim())?;
    let rows = eta_sweep(&truth, a.top_k, &a.etas, &inputs, a.n_mc, a.seed)?;
    println!("eta\tmatch_rate");
    for r in rows {
        println!("{:e}\t{}", r.eta, r.match_rate);
    }
    Ok(0)
}

fn polysys_cmd(a: PolysysArgs) -> Result<u8> {
    let inst = PolySystemInstance::new(a.m, a.d, a.r)?;
    let conv: IndexConvention = a.convention.parse()?;
    if let Some(c) = a.witness {
        if a.m != 2 {
            return Err(Error::InvalidArgument("the witness candidate has m = 2".into()));
        }
        let z = PolyCandidate::two_component_witness(c, a.d);
        print!("{}", polysys::residual_tsv(&polysys::residual_table(&inst, &z, conv)?));
        return Ok(0);
    }
    let seed = a
        .seed
        .ok_or_else(|| Error::InvalidArgument("--search needs --seed".into()))?;
    let report = polysys::search_nontrivial(&inst, a.restarts, seed, conv)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?
    );
    Ok(0)
}

fn plot_result(result: &SweepResult, path: &Path, title: &str, line: bool) -> Result<()> {
    let style = PlotStyle {
        title: title.to_string(),
        y_label: result.label.clone(),
        regression_line: line,
        ..PlotStyle::default()
    };
    experiments::emit_svg_loglog(result, path, &style)
}

fn sweep(a: SweepArgs) -> Result<u8> {
    let mut cfg = SweepConfig::from_text(&read(&a.config)?)?;
    if a.full {
        cfg = cfg.full_scale()?;
    }
    cfg.base_seed = a.seed;
    if let Some(j) = a.jobs {
        cfg.parallelism = j;
    }
    let result = experiments::run_sweep(&cfg)?;
    experiments::emit_csv(&result, &a.out)?;
    let aggregate = if a.per_row {
        Aggregate::PerRow
    } else {
        Aggregate::MeanPerN
    };
    match experiments::fit_slope(&result.rows, aggregate) {
        Ok(s) => println!(
            "{} slope {:.4} (stderr {:.4}, {} points)",
            result.label, s.slope, s.stderr, s.points
        ),
        Err(e) => println!("{}: no slope: {e}", result.label),
    }
    if let Some(p) = &a.plot {
        plot_result(&result, p, &format!("{} vs n", result.label), !a.no_line)?;
    }
    let failures = result.failures();
    if failures > 0 {
        eprintln!("{failures} of {} fits failed", result.rows.len());
        return Ok(2);
    }
    Ok(0)
}

fn plot(a: PlotArgs) -> Result<u8> {
    let rows = experiments::read_csv(&a.csv)?;
    let result = SweepResult::from_rows("loss", rows);
    plot_result(&result, &a.out, &a.title, !a.no_line)?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Fit(a) => fit(a),
        Command::Loss(a) => loss(a),
        Command::Hellinger(a) => hellinger(a),
        Command::PartitionCheck(a) => partition_check(a),
        Command::Polysys(a) => polysys_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Plot(a) => plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
