//! Voronoi cells, Voronoi losses between mixing measures, and Hellinger distances
//! between conditional densities.
//!
//! Fitted components are assigned to the nearest true component in
//! `theta = (beta1, a, b, sigma)`. Every loss is a maximum over the `K`-subsets
//! of true components of per-cell terms
//!
//! ```text
//! sum_{i in C_j} exp(beta0_i) (|dbeta1|^e1 + |da|^e2 + |db|^e3 + |dsigma|^e4)
//!   + | sum_{i in C_j} exp(beta0_i) - exp(beta0*_j) |
//! ```
//!
//! where the exponents depend on the loss and the cell size: D1 uses 1
//! everywhere, D2 uses `rbar(|C|)` (and half of it for `a` and `sigma`) on cells
//! with more than one member, D3 uses 2 there.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{check_top_k, log_sum_exp, MixingMeasure, UniformBox};
use crate::partition::k_subsets;
use crate::polysys::{rbar, RbarPolicy};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VoronoiAssignment {
    /// `cells[j]` holds the fitted indices nearest to true component `j`, ascending.
    pub cells: Vec<Vec<usize>>,
}

impl VoronoiAssignment {
    pub fn cell_sizes(&self) -> Vec<usize> {
        self.cells.iter().map(Vec::len).collect()
    }

    /// True component whose cell holds fitted component `i`.
    pub fn owner(&self, i: usize) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(&i))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Nearest-center assignment of fitted components to true components; ties go
/// to the smaller true index. Cells may be empty.
pub fn assign_voronoi(fit: &MixingMeasure, truth: &MixingMeasure) -> Result<VoronoiAssignment> {
    if fit.dim() != truth.dim() {
        return Err(Error::invalid(format!(
            "fitted measure has dimension {} but the truth has {}",
            fit.dim(),
            truth.dim()
        )));
    }
    let centers: Vec<Vec<f64>> = truth.components().iter().map(|c| c.theta()).collect();
    let mut cells = vec![Vec::new(); truth.order()];
    for (i, c) in fit.components().iter().enumerate() {
        cells[nearest(&c.theta(), &centers)].push(i);
    }
    Ok(VoronoiAssignment { cells })
}

/// Exponents applied to the parameter differences of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Exponents {
    pub beta1: f64,
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

impl Exponents {
    pub const LINEAR: Exponents = Exponents {
        beta1: 1.0,
        a: 1.0,
        b: 1.0,
        sigma: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Metric {
    D1,
    D2(RbarPolicy),
    D3,
}

impl Metric {
    pub fn exponents(&self, cell_size: usize) -> Result<Exponents> {
        if cell_size <= 1 {
            return Ok(Exponents::LINEAR);
        }
        Ok(match *self {
            Metric::D1 => Exponents::LINEAR,
            Metric::D2(policy) => {
                let r = rbar(cell_size, policy)?.value as f64;
                Exponents {
                    beta1: r,
                    a: r / 2.0,
                    b: r,
                    sigma: r / 2.0,
                }
            }
            Metric::D3 => Exponents {
                beta1: 2.0,
                a: 2.0,
                b: 2.0,
                sigma: 2.0,
            },
        })
    }

    pub fn name(&self) -> String {
        match self {
            Metric::D1 => "d1".into(),
            Metric::D2(RbarPolicy::ExactTable) => "d2".into(),
            Metric::D2(RbarPolicy::Conjecture) => "d2-conjecture".into(),
            Metric::D3 => "d3".into(),
        }
    }
}

/// Which terms enter the loss and which subsets the outer maximum ranges over.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossOptions {
    /// Restrict the outer maximum to these `K`-subsets (e.g. the positive-mass
    /// regions of the truth). `None` means all subsets.
    pub subsets: Option<Vec<Vec<usize>>>,
    pub gating_slope_terms: bool,
    pub weight_terms: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            subsets: None,
            gating_slope_terms: true,
            weight_terms: true,
        }
    }
}

impl LossOptions {
    /// Only the expert-parameter differences `(a, b, sigma)`, each still weighted by `exp(beta0)`.
    pub fn expert_only() -> Self {
        LossOptions {
            subsets: None,
            gating_slope_terms: false,
            weight_terms: false,
        }
    }

    pub fn with_subsets(mut self, subsets: Vec<Vec<usize>>) -> Self {
        self.subsets = Some(subsets);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellTerm {
    pub true_index: usize,
    pub cell: Vec<usize>,
    pub parameter_term: f64,
    pub weight_term: f64,
}

impl CellTerm {
    pub fn total(&self) -> f64 {
        self.parameter_term + self.weight_term
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub value: f64,
    pub argmax_subset: Vec<usize>,
    pub per_cell_terms: Vec<CellTerm>,
}

impl LossReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-cell terms for every true component, before the subset maximum.
pub fn cell_terms<F>(
    fit: &MixingMeasure,
    truth: &MixingMeasure,
    assignment: &VoronoiAssignment,
    exponents: F,
    opts: &LossOptions,
) -> Result<Vec<CellTerm>>
where
    F: Fn(usize) -> Result<Exponents>,
{
    let norm = |u: &[f64], v: &[f64]| sq_dist(u, v).sqrt();
    truth
        .components()
        .iter()
        .zip(&assignment.cells)
        .enumerate()
        .map(|(j, (t, cell))| {
            let e = exponents(cell.len())?;
            let mut parameter_term = 0.0;
            let mut mass = 0.0;
            for &i in cell {
                let c = fit.component(i);
                let w = c.gate.beta0.exp();
                mass += w;
                let mut s = norm(&c.expert.a, &t.expert.a).powf(e.a)
                    + (c.expert.b - t.expert.b).abs().powf(e.b)
                    + (c.expert.sigma - t.expert.sigma).abs().powf(e.sigma);
                if opts.gating_slope_terms {
                    s += norm(&c.gate.beta1, &t.gate.beta1).powf(e.beta1);
                }
                parameter_term += w * s;
            }
            let weight_term = if opts.weight_terms {
                (mass - t.gate.beta0.exp()).abs()
            } else {
                0.0
            };
            Ok(CellTerm {
                true_index: j,
                cell: cell.clone(),
                parameter_term,
                weight_term,
            })
        })
        .collect()
}

/// Value of the loss restricted to one fixed `K`-subset of true components.
pub fn subset_value(terms: &[CellTerm], subset: &[usize]) -> f64 {
    subset.iter().map(|&j| terms[j].total()).sum()
}

/// Generic Voronoi loss with exponents supplied per cell size.
pub fn voronoi_loss_with<F>(
    fit: &MixingMeasure,
    truth: &MixingMeasure,
    top_k: usize,
    exponents: F,
    opts: &LossOptions,
) -> Result<LossReport>
where
    F: Fn(usize) -> Result<Exponents>,
{
    check_top_k(top_k, truth.order())?;
    let assignment = assign_voronoi(fit, truth)?;
    let terms = cell_terms(fit, truth, &assignment, exponents, opts)?;
    let subsets = match &opts.subsets {
        Some(s) => {
            if s.is_empty() {
                return Err(Error::invalid("subset restriction is empty"));
            }
            for sub in s {
                if sub.len() != top_k || sub.iter().any(|&j| j >= truth.order()) {
                    return Err(Error::invalid(format!("subset {sub:?} is not a K-subset of the truth")));
                }
            }
            s.clone()
        }
        None => k_subsets(truth.order(), top_k)?,
    };
    let mut best: Option<(f64, &Vec<usize>)> = None;
    for sub in &subsets {
        let v = subset_value(&terms, sub);
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, sub));
        }
    }
    let (_, sub) = best.expect("at least one subset");
    let per_cell_terms: Vec<CellTerm> = sub.iter().map(|&j| terms[j].clone()).collect();
    Ok(LossReport {
        value: per_cell_terms.iter().map(CellTerm::total).sum(),
        argmax_subset: sub.clone(),
        per_cell_terms,
    })
}

pub fn voronoi_loss(
    fit: &MixingMeasure,
    truth: &MixingMeasure,
    top_k: usize,
    metric: Metric,
    opts: &LossOptions,
) -> Result<LossReport> {
    voronoi_loss_with(fit, truth, top_k, |m| metric.exponents(m), opts)
}

pub fn loss_d1(fit: &MixingMeasure, truth: &MixingMeasure, top_k: usize) -> Result<LossReport> {
    voronoi_loss(fit, truth, top_k, Metric::D1, &LossOptions::default())
}

/// D2 with `rbar_fn` giving `rbar(|C|)` for cells of size > 1.
pub fn loss_d2<F>(fit: &MixingMeasure, truth: &MixingMeasure, top_k: usize, rbar_fn: F) -> Result<LossReport>
where
    F: Fn(usize) -> Result<u32>,
{
    voronoi_loss_with(
        fit,
        truth,
        top_k,
        |m| {
            if m <= 1 {
                return Ok(Exponents::LINEAR);
            }
            let r = rbar_fn(m)? as f64;
            Ok(Exponents {
                beta1: r,
                a: r / 2.0,
                b: r,
                sigma: r / 2.0,
            })
        },
        &LossOptions::default(),
    )
}

pub fn loss_d3(fit: &MixingMeasure, truth: &MixingMeasure, top_k: usize) -> Result<LossReport> {
    voronoi_loss(fit, truth, top_k, Metric::D3, &LossOptions::default())
}

/// How the gating parameters of a fitted measure are normalized before a loss
/// is computed. Shifting every `beta0` by one constant and every `beta1` by
/// one vector leaves the conditional density unchanged, so raw fitted values
/// carry an arbitrary offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Gauge {
    /// Use fitted values as they are.
    Raw,
    /// Shift so the fitted cell of the truth's last component carries that
    /// component's `beta0` (as total mass) and `beta1` (as weighted mean).
    Anchored,
    /// Minimize the loss over all shifts, starting from the anchored one.
    Optimal,
}

impl std::str::FromStr for Gauge {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Gauge::Raw),
            "anchored" => Ok(Gauge::Anchored),
            "optimal" => Ok(Gauge::Optimal),
            _ => Err(Error::invalid(format!("unknown gauge `{s}` (raw|anchored|optimal)"))),
        }
    }
}

/// Gating shift `(c, v)` aligning `fit` with the truth's last component. Cells
/// here use expert parameters only, which the shift does not touch.
pub fn anchor_shift(fit: &MixingMeasure, truth: &MixingMeasure) -> (f64, Vec<f64>) {
    let d = fit.dim();
    let centers: Vec<Vec<f64>> = truth
        .components()
        .iter()
        .map(|c| expert_theta(&c.expert.a, c.expert.b, c.expert.sigma))
        .collect();
    let last = truth.order() - 1;
    let cell: Vec<usize> = (0..fit.order())
        .filter(|&i| {
            let e = &fit.component(i).expert;
            nearest(&expert_theta(&e.a, e.b, e.sigma), &centers) == last
        })
        .collect();
    if cell.is_empty() {
        return (0.0, vec![0.0; d]);
    }
    let b0: Vec<f64> = cell.iter().map(|&i| fit.component(i).gate.beta0).collect();
    let lse = log_sum_exp(&b0);
    let target = truth.component(last);
    let mut mean = vec![0.0; d];
    for (&i, &b) in cell.iter().zip(&b0) {
        let w = (b - lse).exp();
        for (m, v) in mean.iter_mut().zip(&fit.component(i).gate.beta1) {
            *m += w * v;
        }
    }
    let v = target.gate.beta1.iter().zip(&mean).map(|(t, m)| t - m).collect();
    (target.gate.beta0 - lse, v)
}

fn expert_theta(a: &[f64], b: f64, sigma: f64) -> Vec<f64> {
    let mut t = a.to_vec();
    t.push(b);
    t.push(sigma);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaugedLoss {
    pub report: LossReport,
    pub shift_beta0: f64,
    pub shift_beta1: Vec<f64>,
}

/// Evaluates `loss` on `fit` normalized according to `gauge`.
pub fn gauged_loss<F>(fit: &MixingMeasure, truth: &MixingMeasure, gauge: Gauge, loss: F) -> Result<GaugedLoss>
where
    F: Fn(&MixingMeasure) -> Result<LossReport>,
{
    let d = fit.dim();
    let raw = || -> Result<GaugedLoss> {
        Ok(GaugedLoss {
            report: loss(fit)?,
            shift_beta0: 0.0,
            shift_beta1: vec![0.0; d],
        })
    };
    match gauge {
        Gauge::Raw => raw(),
        Gauge::Anchored => {
            let (c, v) = anchor_shift(fit, truth);
            Ok(GaugedLoss {
                report: loss(&fit.shift_gating(c, &v))?,
                shift_beta0: c,
                shift_beta1: v,
            })
        }
        Gauge::Optimal => {
            let (c, v) = anchor_shift(fit, truth);
            let mut start = vec![c];
            start.extend_from_slice(&v);
            let eval = |p: &[f64]| -> Result<f64> { Ok(loss(&fit.shift_gating(p[0], &p[1..]))?.value) };
            let best = nelder_mead(&eval, &start, 0.25, 400)?;
            let mut candidates = vec![best, start, vec![0.0; d + 1]];
            candidates.dedup();
            let mut winner: Option<(f64, Vec<f64>)> = None;
            for p in candidates {
                let v = eval(&p)?;
                if winner.as_ref().is_none_or(|(w, _)| v < *w) {
                    winner = Some((v, p));
                }
            }
            let (_, p) = winner.expect("nonempty");
            Ok(GaugedLoss {
                report: loss(&fit.shift_gating(p[0], &p[1..]))?,
                shift_beta0: p[0],
                shift_beta1: p[1..].to_vec(),
            })
        }
    }
}

/// Derivative-free minimizer for the low-dimensional gauge search.
fn nelder_mead<F>(f: &F, start: &[f64], step: f64, max_iter: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = start.len();
    let mut simplex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n + 1);
    simplex.push((f(start)?, start.to_vec()));
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push((f(&p)?, p));
    }
    let by_value = |a: &(f64, Vec<f64>), b: &(f64, Vec<f64>)| a.0.total_cmp(&b.0);
    for _ in 0..max_iter {
        simplex.sort_by(by_value);
        let (lo, hi) = (simplex[0].0, simplex[n].0);
        if hi - lo <= 1e-15 * lo.abs().max(1e-300) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|d| simplex[..n].iter().map(|(_, p)| p[d]).sum::<f64>() / n as f64)
            .collect();
        let towards = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[n].1)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let reflected = towards(-1.0);
        let fr = f(&reflected)?;
        if fr < simplex[0].0 {
            let expanded = towards(-2.0);
            let fe = f(&expanded)?;
            simplex[n] = if fe < fr { (fe, expanded) } else { (fr, reflected) };
        } else if fr < simplex[n - 1].0 {
            simplex[n] = (fr, reflected);
        } else {
            let contracted = if fr < simplex[n].0 { towards(-0.5) } else { towards(0.5) };
            let fc = f(&contracted)?;
            if fc < simplex[n].0.min(fr) {
                simplex[n] = (fc, contracted);
            } else {
                let best = simplex[0].1.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = best.iter().zip(&entry.1).map(|(b, q)| b + 0.5 * (q - b)).collect();
                    *entry = (f(&p)?, p);
                }
            }
        }
    }
    simplex.sort_by(by_value);
    Ok(simplex.swap_remove(0).1)
}

/// Response grid for Hellinger quadrature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum YGrid {
    /// `points` nodes spanning `[min mean - 8 max sigma, max mean + 8 max sigma]`
    /// over the components of both measures at the given input.
    Auto {
        points: usize,
    },
    Fixed(Vec<f64>),
}

impl Default for YGrid {
    fn default() -> Self {
        YGrid::Auto { points: 2001 }
    }
}

impl YGrid {
    pub fn resolve(&self, a: &MixingMeasure, b: &MixingMeasure, x: &[f64]) -> Vec<f64> {
        match self {
            YGrid::Fixed(v) => v.clone(),
            YGrid::Auto { points } => {
                let (mut lo, mut hi, mut smax) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
                for c in a.components().iter().chain(b.components()) {
                    let m = c.expert.mean(x);
                    lo = lo.min(m);
                    hi = hi.max(m);
                    smax = smax.max(c.expert.sigma);
                }
                let (lo, hi) = (lo - 8.0 * smax, hi + 8.0 * smax);
                let n = (*points).max(2);
                (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
            }
        }
    }
}

/// Hellinger distance `h` between `g_a(. | x)` and `g_b(. | x)` by the trapezoid
/// rule on `y_grid`, clipped to `[0, 1]`.
pub fn hellinger_pointwise(
    a: &MixingMeasure,
    top_k_a: usize,
    b: &MixingMeasure,
    top_k_b: usize,
    x: &[f64],
    y_grid: &[f64],
) -> Result<f64> {
    if y_grid.len() < 2 {
        return Err(Error::invalid("y grid needs at least two points"));
    }
    if y_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("y grid must be strictly increasing"));
    }
    let fa = a.conditional_density_grid(top_k_a, x, y_grid)?;
    let fb = b.conditional_density_grid(top_k_b, x, y_grid)?;
    let sq: Vec<f64> = fa
        .iter()
        .zip(&fb)
        .map(|(p, q)| {
            let d = p.sqrt() - q.sqrt();
            d * d
        })
        .collect();
    let integral: f64 = y_grid
        .windows(2)
        .zip(sq.windows(2))
        .map(|(y, s)| 0.5 * (y[1] - y[0]) * (s[0] + s[1]))
        .sum();
    Ok((0.5 * integral).sqrt().clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte-Carlo estimate of `E_X[h(g_a(.|X), g_b(.|X))]` with `X ~ sampler`.
#[allow(clippy::too_many_arguments)]
pub fn expected_hellinger(
    a: &MixingMeasure,
    top_k_a: usize,
    b: &MixingMeasure,
    top_k_b: usize,
    sampler: &UniformBox,
    n_mc: usize,
    y_grid: &YGrid,
    seed: u64,
) -> Result<McEstimate> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be >= 1"));
    }
    if sampler.dim() != a.dim() || a.dim() != b.dim() {
        return Err(Error::invalid("dimension mismatch between measures and sampler"));
    }
    let mut rng = rng_from_seed(seed);
    let xs: Vec<Vec<f64>> = (0..n_mc).map(|_| sampler.sample(&mut rng)).collect();
    let hs = xs
        .par_iter()
        .map(|x| hellinger_pointwise(a, top_k_a, b, top_k_b, x, &y_grid.resolve(a, b, x)))
        .collect::<Result<Vec<f64>>>()?;
    let n = n_mc as f64;
    let mean = hs.iter().sum::<f64>() / n;
    let stderr = if n_mc > 1 {
        (hs.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, stderr })
}
