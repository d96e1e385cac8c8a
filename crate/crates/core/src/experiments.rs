//! Replicated sample-size sweeps, log-log slope fits, CSV and SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::em::{fit, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::model::{check_top_k, fmt_f64, MixingMeasure, UniformBox};
use crate::partition::positive_mass_subsets;
use crate::polysys::RbarPolicy;
use crate::rng::derive_seed;
use crate::voronoi::{expected_hellinger, gauged_loss, voronoi_loss, Gauge, LossOptions, Metric, YGrid};

pub const CSV_HEADER: &str = "n,replicate,seed,loss,loglik,iterations,converged,wallclock_ms";

/// Monte-Carlo size for detecting measure-zero truth regions.
const REGION_MC: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossKind {
    D1,
    D2(RbarPolicy),
    D3,
    Hellinger,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::D1 => "d1",
            LossKind::D2(RbarPolicy::ExactTable) => "d2",
            LossKind::D2(RbarPolicy::Conjecture) => "d2-conjecture",
            LossKind::D3 => "d3",
            LossKind::Hellinger => "hellinger",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d1" => Ok(LossKind::D1),
            "d2" => Ok(LossKind::D2(RbarPolicy::ExactTable)),
            "d2-conjecture" => Ok(LossKind::D2(RbarPolicy::Conjecture)),
            "d3" => Ok(LossKind::D3),
            "hellinger" => Ok(LossKind::Hellinger),
            _ => Err(Error::invalid(format!(
                "unknown loss `{s}` (d1|d2|d2-conjecture|d3|hellinger)"
            ))),
        }
    }
}

/// A loss together with how it is evaluated on a fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Gating normalization applied before Voronoi losses.
    pub gauge: Gauge,
    /// Restrict the outer maximum to truth regions of positive mass.
    pub positive_mass: bool,
    /// Drop the gating-slope and weight-aggregation terms.
    pub expert_only: bool,
    /// Inputs drawn for the expected Hellinger distance.
    pub hellinger_mc: usize,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        LossSpec {
            kind,
            gauge: Gauge::Optimal,
            positive_mass: true,
            expert_only: false,
            hellinger_mc: 1000,
        }
    }

    pub fn label(&self) -> String {
        let mut s = self.kind.name().to_string();
        if self.expert_only {
            s.push_str("-expert");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub truth: MixingMeasure,
    pub data_k: usize,
    /// Template for every fit; `init.truth` is replaced by `truth` and `seed`
    /// by the per-row seed.
    pub fit: FitConfig,
    pub loss: LossSpec,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    pub base_seed: u64,
    pub parallelism: usize,
    pub inputs: UniformBox,
    /// Write measured fit times; off keeps CSV output byte-reproducible.
    pub record_wallclock: bool,
}

impl SweepConfig {
    pub const DEFAULT_SIZES: (usize, usize, usize) = (100, 10_000, 12);
    pub const DEFAULT_REPLICATES: usize = 20;
    pub const FULL_SIZES: (usize, usize, usize) = (100, 100_000, 200);
    pub const FULL_REPLICATES: usize = 40;

    /// Desk-scale defaults for a truth, data sparsity and fit shape.
    pub fn new(truth: MixingMeasure, data_k: usize, k: usize, fit_k: usize, loss: LossKind) -> Result<Self> {
        let (lo, hi, count) = Self::DEFAULT_SIZES;
        let inputs = UniformBox::unit(truth.dim());
        let cfg = SweepConfig {
            fit: FitConfig::new(truth.clone(), k, fit_k, 0)?,
            truth,
            data_k,
            loss: LossSpec::new(loss),
            sample_sizes: log_spaced_sizes(lo, hi, count)?,
            replicates: Self::DEFAULT_REPLICATES,
            base_seed: 0,
            parallelism: 1,
            inputs,
            record_wallclock: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Switches to the full grid: 200 sizes in `[1e2, 1e5]`, 40 replicates.
    pub fn full_scale(mut self) -> Result<Self> {
        let (lo, hi, count) = Self::FULL_SIZES;
        self.sample_sizes = log_spaced_sizes(lo, hi, count)?;
        self.replicates = Self::FULL_REPLICATES;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_sizes.is_empty() || self.sample_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sample_sizes must be nonempty and strictly increasing"));
        }
        if self.sample_sizes[0] == 0 {
            return Err(Error::invalid("sample sizes must be >= 1"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be >= 1"));
        }
        if self.parallelism == 0 {
            return Err(Error::invalid("parallelism must be >= 1"));
        }
        check_top_k(self.data_k, self.truth.order())?;
        let violated = self.truth.violated_assumptions();
        if !violated.is_empty() {
            return Err(Error::Assumptions(violated));
        }
        if self.inputs.dim() != self.truth.dim() {
            return Err(Error::invalid("input box dimension differs from the truth's"));
        }
        if self.loss.kind == LossKind::Hellinger && self.loss.hellinger_mc == 0 {
            return Err(Error::invalid("hellinger_mc must be >= 1"));
        }
        let mut fit = self.fit.clone();
        fit.init.truth = self.truth.clone();
        fit.validate()
    }

    /// Key=value document; the truth follows a `[truth]` line.
    pub fn to_text(&self) -> String {
        let f = &self.fit;
        let sizes: Vec<String> = self.sample_sizes.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "data_K = {}", self.data_k);
        let _ = writeln!(s, "k = {}", f.k);
        let _ = writeln!(s, "fit_K = {}", f.top_k);
        s.push_str(&f.common_kv_text());
        let _ = writeln!(s, "loss = {}", self.loss.kind.name());
        let gauge = match self.loss.gauge {
            Gauge::Raw => "raw",
            Gauge::Anchored => "anchored",
            Gauge::Optimal => "optimal",
        };
        let _ = writeln!(s, "gauge = {gauge}");
        let _ = writeln!(s, "positive_mass = {}", self.loss.positive_mass);
        let _ = writeln!(s, "expert_only = {}", self.loss.expert_only);
        let _ = writeln!(s, "hellinger_mc = {}", self.loss.hellinger_mc);
        let _ = writeln!(s, "sample_sizes = {}", sizes.join(","));
        let _ = writeln!(s, "replicates = {}", self.replicates);
        let _ = writeln!(s, "base_seed = {}", self.base_seed);
        let _ = writeln!(s, "parallelism = {}", self.parallelism);
        let _ = writeln!(s, "record_wallclock = {}", self.record_wallclock);
        let _ = writeln!(s, "inputs = {}", self.inputs);
        s.push_str("\n[truth]\n");
        s.push_str(&self.truth.to_text());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let truth = doc.require_truth()?;
        let data_k: usize = doc
            .take("data_K")?
            .ok_or_else(|| Error::invalid("missing key `data_K`"))?;
        let k = doc.take("k")?.unwrap_or(truth.order());
        let fit_k = doc.take("fit_K")?.unwrap_or(data_k);
        let loss = doc.take("loss")?.unwrap_or(LossKind::D1);
        let mut cfg = SweepConfig::new(truth, data_k, k, fit_k, loss)?;
        cfg.fit.apply_kv(&mut doc)?;
        doc.set("gauge", &mut cfg.loss.gauge)?;
        doc.set("positive_mass", &mut cfg.loss.positive_mass)?;
        doc.set("expert_only", &mut cfg.loss.expert_only)?;
        doc.set("hellinger_mc", &mut cfg.loss.hellinger_mc)?;
        doc.set("replicates", &mut cfg.replicates)?;
        doc.set("base_seed", &mut cfg.base_seed)?;
        doc.set("parallelism", &mut cfg.parallelism)?;
        doc.set("record_wallclock", &mut cfg.record_wallclock)?;
        if let Some((line, v)) = doc.take_raw("sample_sizes") {
            cfg.sample_sizes = parse_sizes(&v).map_err(|e| match e {
                Error::InvalidArgument(m) => Error::parse(line, m),
                other => other,
            })?;
        }
        if let Some((line, v)) = doc.take_raw("inputs") {
            cfg.inputs = v.parse().map_err(|e: Error| Error::parse(line, e.to_string()))?;
        }
        doc.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| format!("invalid list entry `{}`", s.trim()))
        })
        .collect()
}

/// `a,b,c` or `logspace:lo:hi:count`.
fn parse_sizes(v: &str) -> Result<Vec<usize>> {
    if let Some(rest) = v.strip_prefix("logspace:") {
        let parts: Vec<&str> = rest.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::invalid("logspace takes lo:hi:count"));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad number `{s}`")))
        };
        return log_spaced_sizes(num(parts[0])?, num(parts[1])?, num(parts[2])?);
    }
    parse_list(v).map_err(Error::invalid)
}

/// Up to `count` integers spaced evenly in `log n` over `[lo, hi]`, rounded and
/// deduplicated.
pub fn log_spaced_sizes(lo: usize, hi: usize, count: usize) -> Result<Vec<usize>> {
    if lo == 0 || hi < lo || count == 0 {
        return Err(Error::invalid(format!(
            "need 1 <= lo <= hi and count >= 1 (got {lo}, {hi}, {count})"
        )));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub replicate: usize,
    pub seed: u64,
    pub loss: f64,
    pub loglik: f64,
    pub iterations: usize,
    /// `None` marks a failed fit or loss evaluation.
    pub converged: Option<bool>,
    pub wallclock_ms: f64,
}

impl SweepRow {
    pub fn failed(&self) -> bool {
        self.converged.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub label: String,
    pub rows: Vec<SweepRow>,
    pub slope: Option<SlopeFit>,
}

impl SweepResult {
    pub fn from_rows(label: impl Into<String>, rows: Vec<SweepRow>) -> Self {
        let slope = fit_slope(&rows, Aggregate::MeanPerN).ok();
        SweepResult {
            label: label.into(),
            rows,
            slope,
        }
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failed()).count()
    }

    /// Per-n mean and sample standard deviation of the successful rows.
    pub fn summary(&self) -> Vec<SizeSummary> {
        summarize(&self.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<SizeSummary> {
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.failed() && r.loss.is_finite()) {
        by_n.entry(r.n).or_default().push(r.loss);
    }
    by_n.into_iter()
        .map(|(n, v)| {
            let m = v.len() as f64;
            let mean = v.iter().sum::<f64>() / m;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            SizeSummary {
                n,
                mean,
                std,
                count: v.len(),
            }
        })
        .collect()
}

/// Reference to the sweep's loss for one fitted measure.
struct Evaluator<'a> {
    cfg: &'a SweepConfig,
    subsets: Option<Vec<Vec<usize>>>,
}

impl<'a> Evaluator<'a> {
    fn new(cfg: &'a SweepConfig, spec: &LossSpec) -> Result<Self> {
        let subsets = if spec.positive_mass && spec.kind != LossKind::Hellinger {
            Some(positive_mass_subsets(
                &cfg.truth,
                cfg.data_k,
                &cfg.inputs,
                REGION_MC,
                derive_seed(cfg.base_seed, &[u64::MAX]),
            )?)
        } else {
            None
        };
        Ok(Evaluator { cfg, subsets })
    }

    fn eval(&self, spec: &LossSpec, g: &MixingMeasure, seed: u64) -> Result<f64> {
        let cfg = self.cfg;
        let metric = match spec.kind {
            LossKind::Hellinger => {
                return Ok(expected_hellinger(
                    g,
                    cfg.fit.top_k,
                    &cfg.truth,
                    cfg.data_k,
                    &cfg.inputs,
                    spec.hellinger_mc,
                    &YGrid::default(),
                    seed,
                )?
                .mean)
            }
            LossKind::D1 => Metric::D1,
            LossKind::D2(p) => Metric::D2(p),
            LossKind::D3 => Metric::D3,
        };
        let mut opts = if spec.expert_only {
            LossOptions::expert_only()
        } else {
            LossOptions::default()
        };
        if let Some(s) = &self.subsets {
            opts = opts.with_subsets(s.clone());
        }
        let loss = |m: &MixingMeasure| voronoi_loss(m, &cfg.truth, cfg.data_k, metric, &opts);
        Ok(gauged_loss(g, &cfg.truth, spec.gauge, loss)?.report.value)
    }
}

fn row_seed(base: u64, n: usize, replicate: usize) -> u64 {
    derive_seed(base, &[n as u64, replicate as u64])
}

/// One fit per `(n, replicate)`, evaluated under every loss in `losses`.
/// Returns one result per loss, rows ordered by `(n, replicate)`.
pub fn run_sweep_losses(cfg: &SweepConfig, losses: &[LossSpec]) -> Result<Vec<SweepResult>> {
    cfg.validate()?;
    if losses.is_empty() {
        return Err(Error::invalid("at least one loss is required"));
    }
    let evaluators = losses
        .iter()
        .map(|l| Evaluator::new(cfg, l))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = cfg
        .sample_sizes
        .iter()
        .flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    let per_job: Vec<Vec<SweepRow>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(n, rep)| {
                let seed = row_seed(cfg.base_seed, n, rep);
                let outcome = run_one(cfg, n, seed);
                losses
                    .iter()
                    .zip(&evaluators)
                    .map(|(spec, ev)| {
                        let fitted = outcome.as_ref().ok().and_then(|res| {
                            ev.eval(spec, &res.measure, derive_seed(seed, &[2]))
                                .ok()
                                .map(|loss| (res, loss))
                        });
                        match fitted {
                            Some((res, loss)) => SweepRow {
                                n,
                                replicate: rep,
                                seed,
                                loss,
                                loglik: res.final_loglik(),
                                iterations: res.iterations,
                                converged: Some(res.converged),
                                wallclock_ms: if cfg.record_wallclock {
                                    res.wallclock.as_secs_f64() * 1e3
                                } else {
                                    0.0
                                },
                            },
                            None => SweepRow {
                                n,
                                replicate: rep,
                                seed,
                                loss: f64::NAN,
                                loglik: f64::NAN,
                                iterations: 0,
                                converged: None,
                                wallclock_ms: 0.0,
                            },
                        }
                    })
                    .collect()
            })
            .collect()
    });
    Ok(losses
        .iter()
        .enumerate()
        .map(|(li, spec)| SweepResult::from_rows(spec.label(), per_job.iter().map(|rows| rows[li].clone()).collect()))
        .collect())
}

pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    Ok(run_sweep_losses(cfg, std::slice::from_ref(&cfg.loss))?.remove(0))
}

fn run_one(cfg: &SweepConfig, n: usize, seed: u64) -> Result<FitResult> {
    let data = cfg
        .truth
        .sample_dataset(cfg.data_k, n, &cfg.inputs, derive_seed(seed, &[0]))?;
    let mut fc = cfg.fit.clone();
    fc.init.truth = cfg.truth.clone();
    fc.seed = derive_seed(seed, &[1]);
    fit(&data, &fc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Aggregate {
    /// Regress the log of the per-n mean loss.
    #[default]
    MeanPerN,
    /// Regress every row's log loss.
    PerRow,
}

/// Least squares of `log loss` on `log n`. Failed rows and nonpositive values
/// are dropped; fewer than three remaining points is an error.
pub fn fit_slope(rows: &[SweepRow], aggregate: Aggregate) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = match aggregate {
        Aggregate::MeanPerN => summarize(rows).into_iter().map(|s| (s.n as f64, s.mean)).collect(),
        Aggregate::PerRow => rows
            .iter()
            .filter(|r| !r.failed())
            .map(|r| (r.n as f64, r.loss))
            .collect(),
    };
    let pts: Vec<(f64, f64)> = pts
        .into_iter()
        .filter(|&(_, v)| v > 0.0 && v.is_finite())
        .map(|(n, v)| (n.ln(), v.ln()))
        .collect();
    let distinct = {
        let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        xs.dedup();
        xs.len()
    };
    if distinct < 2 {
        return Err(Error::InsufficientData(format!(
            "slope needs positive losses at two or more sample sizes, got {distinct}"
        )));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let stderr = if pts.len() > 2 {
        (rss / (m - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(SlopeFit {
        slope,
        stderr,
        intercept,
        points: pts.len(),
    })
}

pub fn csv_string(result: &SweepResult) -> String {
    let mut s = String::with_capacity(64 * (result.rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in &result.rows {
        let conv = match r.converged {
            Some(true) => "true",
            Some(false) => "false",
            None => "failed",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.n,
            r.replicate,
            r.seed,
            fmt_f64(r.loss),
            fmt_f64(r.loglik),
            r.iterations,
            conv,
            fmt_f64(r.wallclock_ms)
        );
    }
    s
}

pub fn emit_csv(result: &SweepResult, path: &Path) -> Result<()> {
    std::fs::write(path, csv_string(result)).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CSV_HEADER => {}
        _ => return Err(Error::parse(1, format!("expected header `{CSV_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::parse(line_no, format!("expected 8 fields, got {}", f.len())));
        }
        let bad = |what: &str| Error::parse(line_no, format!("invalid {what}"));
        rows.push(SweepRow {
            n: f[0].parse().map_err(|_| bad("n"))?,
            replicate: f[1].parse().map_err(|_| bad("replicate"))?,
            seed: f[2].parse().map_err(|_| bad("seed"))?,
            loss: f[3].parse().map_err(|_| bad("loss"))?,
            loglik: f[4].parse().map_err(|_| bad("loglik"))?,
            iterations: f[5].parse().map_err(|_| bad("iterations"))?,
            converged: match f[6] {
                "true" => Some(true),
                "false" => Some(false),
                "failed" => None,
                _ => return Err(bad("converged")),
            },
            wallclock_ms: f[7].parse().map_err(|_| bad("wallclock_ms"))?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotStyle {
    pub title: String,
    pub y_label: String,
    pub regression_line: bool,
    pub width: f64,
    pub height: f64,
}

impl Default for PlotStyle {
    fn default() -> Self {
        PlotStyle {
            title: String::new(),
            y_label: "loss".into(),
            regression_line: true,
            width: 640.0,
            height: 480.0,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Log-log SVG of per-n means with +-2 std error bars and, when requested,
/// the dashed least-squares line labelled with its slope.
pub fn svg_loglog(result: &SweepResult, style: &PlotStyle) -> Result<String> {
    let summary: Vec<SizeSummary> = result.summary().into_iter().filter(|s| s.mean > 0.0).collect();
    if summary.is_empty() {
        return Err(Error::InsufficientData("no positive mean losses to plot".into()));
    }
    let line = if style.regression_line {
        Some(fit_slope(&result.rows, Aggregate::MeanPerN)?)
    } else {
        None
    };
    let floor = summary.iter().map(|s| s.mean).fold(f64::INFINITY, f64::min) * 0.1;
    let bars: Vec<(f64, f64, f64)> = summary
        .iter()
        .map(|s| ((s.mean - 2.0 * s.std).max(floor), s.mean, s.mean + 2.0 * s.std))
        .collect();
    let lx = |n: f64| n.log10();
    let (mut x0, mut x1) = (lx(summary[0].n as f64), lx(summary[summary.len() - 1].n as f64));
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let y0 = bars.iter().map(|b| b.0.log10()).fold(f64::INFINITY, f64::min).floor();
    let mut y1 = bars
        .iter()
        .map(|b| b.2.log10())
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil();
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (w, h) = (style.width, style.height);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let px = |v: f64| ml + (v - x0) / (x1 - x0) * (w - ml - mr);
    let py = |v: f64| mt + (y1 - v) / (y1 - y0) * (h - mt - mb);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(&style.title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        h - mb,
        w - mr,
        h - mb,
        h - mb
    );
    for e in (x0.ceil() as i32)..=(x1.floor() as i32) {
        let x = px(e as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">1e{e}</text>"#,
            h - mb,
            h - mb + 5.0,
            h - mb + 18.0
        );
    }
    for e in (y0 as i32)..=(y1 as i32) {
        let y = py(e as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{ml}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">1e{e}</text>"#,
            ml - 5.0,
            ml - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">log n</text>"#,
        (ml + w - mr) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (mt + h - mb) / 2.0,
        escape(&style.y_label)
    );
    for (sm, &(lo, mean, hi)) in summary.iter().zip(&bars) {
        let x = px(lx(sm.n as f64));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#1f77b4"/><circle cx="{x:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##,
            py(lo.log10()),
            py(hi.log10()),
            py(mean.log10())
        );
    }
    if let Some(fit) = line {
        let ln10 = std::f64::consts::LN_10;
        let yat = |xl: f64| (fit.intercept + fit.slope * xl * ln10) / ln10;
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-dasharray="6,4"/>"##,
            px(x0),
            py(yat(x0)),
            px(x1),
            py(yat(x1))
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" text-anchor="end" fill="#d62728">slope = {:.3} ± {:.3}</text>"##,
            w - mr - 5.0,
            mt + 15.0,
            fit.slope,
            fit.stderr
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_svg_loglog(result: &SweepResult, path: &Path, style: &PlotStyle) -> Result<()> {
    let svg = svg_loglog(result, style)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Ready-made sweeps for the benchmark truth.
pub mod presets {
    use super::*;

    /// Dense gate, exact order.
    pub fn exact_dense() -> SweepConfig {
        SweepConfig::new(MixingMeasure::benchmark_truth(), 2, 2, 2, LossKind::D1).expect("valid preset")
    }

    /// Top-1 gate, exact order, expert-parameter terms only.
    pub fn exact_top1() -> SweepConfig {
        let mut c = SweepConfig::new(MixingMeasure::benchmark_truth(), 1, 2, 1, LossKind::D1).expect("valid preset");
        c.loss.expert_only = true;
        c.loss.gauge = Gauge::Raw;
        c
    }

    /// Three fitted experts, top-2 gate, over top-1 data. The extra expert
    /// starts in the cell of the true expert the data select.
    pub fn over_specified() -> SweepConfig {
        let mut c = SweepConfig::new(
            MixingMeasure::benchmark_truth(),
            1,
            3,
            2,
            LossKind::D2(RbarPolicy::ExactTable),
        )
        .expect("valid preset");
        c.fit.init = c.fit.init.clone().with_plan(vec![0, 1, 0]);
        c.sample_sizes = log_spaced_sizes(1_000, 10_000, 8).expect("valid sizes");
        c
    }

    /// As [`over_specified`] with a top-1 fitted gate.
    pub fn obstruction() -> SweepConfig {
        let mut c =
            SweepConfig::new(MixingMeasure::benchmark_truth(), 1, 3, 1, LossKind::Hellinger).expect("valid preset");
        c.fit.init = c.fit.init.clone().with_plan(vec![0, 1, 0]);
        c.sample_sizes = vec![1_000, 10_000];
        c.replicates = 10;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_from(f: impl Fn(usize) -> f64, sizes: &[usize], reps: usize) -> Vec<SweepRow> {
        sizes
            .iter()
            .flat_map(|&n| {
                let f = &f;
                (0..reps).map(move |r| SweepRow {
                    n,
                    replicate: r,
                    seed: r as u64,
                    loss: f(n),
                    loglik: -1.0,
                    iterations: 3,
                    converged: Some(true),
                    wallclock_ms: 0.0,
                })
            })
            .collect()
    }

    #[test]
    fn slope_examples() {
        let sizes = [100, 300, 1000, 3000, 10_000];
        let s = fit_slope(&rows_from(|n| (n as f64).powf(-0.5), &sizes, 2), Aggregate::MeanPerN).unwrap();
        assert!((s.slope + 0.5).abs() <= 1e-12);
        let s = fit_slope(&rows_from(|n| 3.0 / n as f64, &sizes, 1), Aggregate::PerRow).unwrap();
        assert!((s.slope + 1.0).abs() <= 1e-12);
        assert!((s.intercept - 3f64.ln()).abs() <= 1e-10);
        let err = fit_slope(&rows_from(|_| 1.0, &[100], 3), Aggregate::MeanPerN).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
        let two = fit_slope(&rows_from(|n| 1.0 / n as f64, &[100, 200], 3), Aggregate::MeanPerN).unwrap();
        assert!((two.slope + 1.0).abs() <= 1e-12 && two.stderr.is_nan());
        let err = fit_slope(
            &rows_from(|n| if n > 200 { 0.0 } else { 1.0 }, &sizes, 1),
            Aggregate::MeanPerN,
        );
        assert!(err.is_err());
    }

    #[test]
    fn log_spacing() {
        let s = log_spaced_sizes(100, 10_000, 12).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!((s[0], s[11]), (100, 10_000));
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(log_spaced_sizes(100, 10_000, 3).unwrap(), vec![100, 1000, 10_000]);
    }

    #[test]
    fn csv_roundtrip_and_layout() {
        let empty = SweepResult::from_rows("d1", vec![]);
        assert_eq!(csv_string(&empty), format!("{CSV_HEADER}\n"));

        let mut rows = rows_from(|n| 1.0 / (n as f64).sqrt() + 1e-17, &[100, 200], 2);
        rows[1].converged = None;
        rows[1].loss = f64::NAN;
        rows[2].wallclock_ms = 12.345678901234567;
        let res = SweepResult::from_rows("d1", rows.clone());
        let text = csv_string(&res);
        assert_eq!(text.lines().count(), 5);
        assert!(!text.contains('\r'));
        let back = parse_csv(&text).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.n, b.n);
            assert_eq!(a.converged, b.converged);
            assert!(a.loss.to_bits() == b.loss.to_bits() || (a.loss.is_nan() && b.loss.is_nan()));
            assert_eq!(a.wallclock_ms.to_bits(), b.wallclock_ms.to_bits());
        }
        assert!(parse_csv("n,loss\n").is_err());
    }

    #[test]
    fn svg_examples() {
        let sizes = [100, 1000, 10_000];
        let res = SweepResult::from_rows("d1", rows_from(|n| 2.0 / (n as f64).sqrt(), &sizes, 3));
        let svg = svg_loglog(&res, &PlotStyle::default()).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("stroke-dasharray") && svg.contains("slope = -0.500"));
        assert!(!svg.contains("href"));

        let one = SweepResult::from_rows("d1", rows_from(|_| 0.5, &[100], 3));
        assert!(svg_loglog(&one, &PlotStyle::default()).is_err());
        let style = PlotStyle {
            regression_line: false,
            ..PlotStyle::default()
        };
        let svg = svg_loglog(&one, &style).unwrap();
        assert!(!svg.contains("stroke-dasharray"));
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = presets::obstruction();
        cfg.base_seed = 99;
        let back = SweepConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let cfg = presets::exact_top1();
        assert_eq!(SweepConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        let truth = MixingMeasure::benchmark_truth().to_text();
        let e = SweepConfig::from_text(&format!("data_K = 1\nbogus = 3\n[truth]\n{truth}")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e:?}");
        let e = SweepConfig::from_text("data_K = 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
        let e = SweepConfig::from_text(&format!("data_K = 1\nsample_sizes = 100,50\n[truth]\n{truth}")).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
        let cfg = SweepConfig::from_text(&format!(
            "data_K = 2\nsample_sizes = logspace:100:1000:3\n[truth]\n{truth}"
        ))
        .unwrap();
        assert_eq!(cfg.sample_sizes, vec![100, 316, 1000]);
    }

    #[test]
    fn zero_iteration_sweep_from_truth_has_zero_loss() {
        let mut cfg = presets::exact_dense();
        cfg.sample_sizes = vec![100];
        cfg.replicates = 1;
        cfg.fit.max_iters = 0;
        cfg.fit.init.noise_std = 0.0;
        cfg.loss.gauge = Gauge::Raw;
        let res = run_sweep(&cfg).unwrap();
        assert_eq!(res.rows.len(), 1);
        assert_eq!(res.rows[0].loss, 0.0);
        assert_eq!(res.rows[0].iterations, 0);
    }

    #[test]
    fn rows_and_seeds_are_a_function_of_the_config() {
        let mut cfg = presets::exact_dense();
        cfg.sample_sizes = vec![50, 80];
        cfg.replicates = 2;
        cfg.fit.max_iters = 5;
        let a = run_sweep(&cfg).unwrap();
        assert_eq!(a.rows.len(), 4);
        let keys: Vec<(usize, usize)> = a.rows.iter().map(|r| (r.n, r.replicate)).collect();
        assert_eq!(keys, vec![(50, 0), (50, 1), (80, 0), (80, 1)]);
        cfg.sample_sizes = vec![50, 80, 120];
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(a.rows[..], b.rows[..4]);
    }
}
