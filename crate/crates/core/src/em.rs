//! Maximum-likelihood fitting by EM.
//!
//! Each iteration runs an E-step (responsibilities under the current top-K
//! gate), closed-form or iterative expert updates, and a few rounds of
//! block-coordinate gradient ascent on the gating parameters with backtracking.
//! Every update is accepted only if it does not lower its part of the EM
//! surrogate, so the observed log-likelihood never decreases.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::model::{
    check_top_k, dot, softmax_selected, topk_into, Component, Dataset, ExpertParams, Family, MixingMeasure,
};
use crate::rng::{derive_seed, rng_from_seed};

/// Columns whose responsibility mass is below this are left untouched.
const MIN_COLUMN_MASS: f64 = 1e-12;
const LAPLACE_IRLS_ITERS: usize = 10;
const STUDENT_ECM_ITERS: usize = 50;
const MAX_HALVINGS: usize = 40;

/// How a fit is initialized from a reference measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitSpec {
    pub truth: MixingMeasure,
    /// `cell_plan[i]` is the true component fitted component `i` starts from.
    /// `None` draws a plan from the fit seed.
    pub cell_plan: Option<Vec<usize>>,
    pub noise_std: f64,
}

impl InitSpec {
    pub fn new(truth: MixingMeasure, noise_std: f64) -> Result<Self> {
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(Error::invalid(format!(
                "noise_std must be finite and >= 0, got {noise_std}"
            )));
        }
        Ok(InitSpec {
            truth,
            cell_plan: None,
            noise_std,
        })
    }

    pub fn with_plan(mut self, plan: Vec<usize>) -> Self {
        self.cell_plan = Some(plan);
        self
    }

    fn validate_plan(&self, plan: &[usize]) -> Result<()> {
        let ks = self.truth.order();
        let mut seen = vec![false; ks];
        for &j in plan {
            if j >= ks {
                return Err(Error::invalid(format!(
                    "cell plan refers to true component {j} of {ks}"
                )));
            }
            seen[j] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid(
                "cell plan leaves a true component without fitted components",
            ));
        }
        Ok(())
    }
}

/// Random owner list for `k` fitted components over `k_star` cells: the first
/// `k_star` components cover the cells in order, the rest land uniformly.
pub fn random_cell_plan(k: usize, k_star: usize, seed: u64) -> Result<Vec<usize>> {
    if k_star == 0 || k < k_star {
        return Err(Error::invalid(format!("need k >= k* >= 1, got k={k}, k*={k_star}")));
    }
    let mut rng = rng_from_seed(seed);
    let mut plan: Vec<usize> = (0..k_star).collect();
    plan.extend((k_star..k).map(|_| rng.gen_range(0..k_star)));
    Ok(plan)
}

/// Initial fitted measure of order `k`: each component copies its cell's true
/// parameters and adds independent `N(0, noise_std^2)` jitter; `sigma` is
/// jittered multiplicatively.
pub fn init_measure(spec: &InitSpec, k: usize, seed: u64) -> Result<MixingMeasure> {
    let plan = match &spec.cell_plan {
        Some(p) => {
            if p.len() != k {
                return Err(Error::invalid(format!(
                    "cell plan has {} entries, expected k={k}",
                    p.len()
                )));
            }
            p.clone()
        }
        None => random_cell_plan(k, spec.truth.order(), derive_seed(seed, &[0]))?,
    };
    spec.validate_plan(&plan)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut jitter = |v: f64| v + normal.sample(&mut rng);
    let comps = plan
        .iter()
        .map(|&j| {
            let t = spec.truth.component(j);
            let beta0 = jitter(t.gate.beta0);
            let beta1 = t.gate.beta1.iter().map(|&v| jitter(v)).collect();
            let a = t.expert.a.iter().map(|&v| jitter(v)).collect();
            let b = jitter(t.expert.b);
            let sigma = (jitter(t.expert.sigma.ln())).exp();
            Component::new(beta0, beta1, a, b, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    MixingMeasure::new(spec.truth.family(), comps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitConfig {
    pub k: usize,
    pub top_k: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub gating_lr: f64,
    pub gating_steps: usize,
    pub sigma_floor: f64,
    pub init: InitSpec,
    pub seed: u64,
}

impl FitConfig {
    pub const DEFAULT_TOL: f64 = 1e-6;
    pub const DEFAULT_MAX_ITERS: usize = 2000;
    pub const DEFAULT_GATING_LR: f64 = 0.1;
    pub const DEFAULT_GATING_STEPS: usize = 5;
    pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;
    pub const DEFAULT_NOISE_STD: f64 = 0.05;

    /// Defaults around a reference measure; `k` and `top_k` still need choosing.
    pub fn new(truth: MixingMeasure, k: usize, top_k: usize, seed: u64) -> Result<Self> {
        let cfg = FitConfig {
            k,
            top_k,
            tol: Self::DEFAULT_TOL,
            max_iters: Self::DEFAULT_MAX_ITERS,
            gating_lr: Self::DEFAULT_GATING_LR,
            gating_steps: Self::DEFAULT_GATING_STEPS,
            sigma_floor: Self::DEFAULT_SIGMA_FLOOR,
            init: InitSpec::new(truth, Self::DEFAULT_NOISE_STD)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_top_k(self.top_k, self.k)?;
        if self.k < self.init.truth.order() {
            return Err(Error::invalid("fitted order k must be at least the reference order"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be > 0"));
        }
        if !(self.gating_lr > 0.0) || !self.gating_lr.is_finite() {
            return Err(Error::invalid("gating_lr must be finite and > 0"));
        }
        if self.gating_steps == 0 {
            return Err(Error::invalid("gating_steps must be >= 1"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::invalid("sigma_floor must be > 0"));
        }
        Ok(())
    }
}

impl FitConfig {
    /// Keys shared by fit and sweep documents.
    pub(crate) fn common_kv_text(&self) -> String {
        let mut s = format!(
            "tol = {}\nmax_iters = {}\ngating_lr = {}\ngating_steps = {}\nsigma_floor = {}\nnoise_std = {}\n",
            self.tol, self.max_iters, self.gating_lr, self.gating_steps, self.sigma_floor, self.init.noise_std
        );
        if let Some(plan) = &self.init.cell_plan {
            let p: Vec<String> = plan.iter().map(usize::to_string).collect();
            s.push_str(&format!("cell_plan = {}\n", p.join(",")));
        }
        s
    }

    pub(crate) fn apply_kv(&mut self, doc: &mut KvDoc) -> Result<()> {
        doc.set("tol", &mut self.tol)?;
        doc.set("max_iters", &mut self.max_iters)?;
        doc.set("gating_lr", &mut self.gating_lr)?;
        doc.set("gating_steps", &mut self.gating_steps)?;
        doc.set("sigma_floor", &mut self.sigma_floor)?;
        if let Some(noise) = doc.take::<f64>("noise_std")? {
            let plan = self.init.cell_plan.take();
            self.init = InitSpec::new(self.init.truth.clone(), noise)?;
            self.init.cell_plan = plan;
        }
        if let Some(plan) = doc.take_list::<usize>("cell_plan")? {
            self.init.cell_plan = Some(plan);
        }
        Ok(())
    }

    /// Key=value document: `K` (required), optional `k`, `seed` and the tuning
    /// keys, then the reference measure after a `[truth]` line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let truth = doc.require_truth()?;
        let top_k: usize = doc.take("K")?.ok_or_else(|| Error::invalid("missing key `K`"))?;
        let k = doc.take("k")?.unwrap_or(truth.order());
        let seed = doc.take("seed")?.unwrap_or(0);
        let mut cfg = FitConfig::new(truth, k, top_k, seed)?;
        cfg.apply_kv(&mut doc)?;
        doc.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "k = {}\nK = {}\nseed = {}\n{}\n[truth]\n{}",
            self.k,
            self.top_k,
            self.seed,
            self.common_kv_text(),
            self.init.truth.to_text()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub measure: MixingMeasure,
    /// Mean log-likelihood at the initial measure and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wallclock: Duration,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds the initial value")
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "family": self.measure.family().name(),
            "k": self.measure.order(),
            "iterations": self.iterations,
            "converged": self.converged,
            "final_loglik": self.final_loglik(),
            "loglik_trace": self.loglik_trace,
            "wallclock_ms": self.wallclock.as_secs_f64() * 1e3,
            "measure": self.measure.components(),
        }))
        .expect("summary serializes")
    }
}

/// Row-major `n x k` responsibilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub k: usize,
    pub values: Vec<f64>,
}

impl Responsibilities {
    pub fn n(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.k..(j + 1) * self.k]
    }

    pub fn column_sum(&self, i: usize) -> f64 {
        self.values.iter().skip(i).step_by(self.k).sum()
    }
}

fn check_data(data: &Dataset, g: &MixingMeasure) -> Result<()> {
    if data.dim() != g.dim() {
        return Err(Error::invalid(format!(
            "data dimension {} differs from the measure's {}",
            data.dim(),
            g.dim()
        )));
    }
    Ok(())
}

/// Responsibilities and mean log-likelihood under `g` with top-`top_k` gating.
pub fn e_step(data: &Dataset, g: &MixingMeasure, top_k: usize) -> Result<(Responsibilities, f64)> {
    check_data(data, g)?;
    check_top_k(top_k, g.order())?;
    let k = g.order();
    let mut values = vec![0.0; data.len() * k];
    let mut sel = Vec::with_capacity(top_k);
    let mut w = vec![0.0; k];
    let mut terms = vec![0.0; k];
    let mut total = 0.0;
    for (j, row) in values.chunks_exact_mut(k).enumerate() {
        let x = data.x(j);
        let y = data.y()[j];
        let logits = g.gate_logits(x);
        topk_into(&logits, top_k, &mut sel);
        softmax_selected(g.components(), &logits, &sel, &mut w);
        let mut max = f64::NEG_INFINITY;
        for &i in &sel {
            terms[i] = w[i].ln() + g.expert_log_density(i, x, y);
            max = max.max(terms[i]);
        }
        if !max.is_finite() {
            return Err(Error::DegenerateData {
                index: j,
                reason: "every selected expert assigns zero likelihood".into(),
            });
        }
        let mut s = 0.0;
        for &i in &sel {
            row[i] = (terms[i] - max).exp();
            s += row[i];
        }
        for &i in &sel {
            row[i] /= s;
        }
        total += max + s.ln();
    }
    Ok((Responsibilities { k, values }, total / data.len() as f64))
}

/// Mean log-likelihood of `g` on `data`.
pub fn mean_loglik(data: &Dataset, g: &MixingMeasure, top_k: usize) -> Result<f64> {
    Ok(e_step(data, g, top_k)?.1)
}

/// `sum_j r_j log f(y_j | x_j; params)`.
pub fn weighted_expert_loglik(family: Family, params: &ExpertParams, data: &Dataset, weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > 0.0)
        .map(|(j, &r)| r * family.log_density(params, data.x(j), data.y()[j]))
        .sum()
}

/// Weighted least squares `y ~ a . x + b`. The slope block is solved on
/// weighted-centered inputs; a singular block gets a ridge of
/// `1e-8 * trace / d`, and a zero block gives `a = 0`.
fn wls(data: &Dataset, weights: &[f64]) -> (Vec<f64>, f64) {
    let d = data.dim();
    let total: f64 = weights.iter().sum();
    let mut xbar = vec![0.0; d];
    let mut ybar = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        for (m, v) in xbar.iter_mut().zip(data.x(j)) {
            *m += w * v;
        }
        ybar += w * data.y()[j];
    }
    xbar.iter_mut().for_each(|m| *m /= total);
    ybar /= total;
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    let mut c = vec![0.0; d];
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for ((ci, v), m) in c.iter_mut().zip(data.x(j)).zip(&xbar) {
            *ci = v - m;
        }
        let dy = data.y()[j] - ybar;
        for p in 0..d {
            xty[p] += w * c[p] * dy;
            for q in 0..d {
                xtx[(p, q)] += w * c[p] * c[q];
            }
        }
    }
    let trace = xtx.trace();
    let a = if trace <= 0.0 {
        vec![0.0; d]
    } else {
        let scale = xtx.amax();
        let solved = xtx
            .clone()
            .cholesky()
            .filter(|ch| ch.l().diagonal().iter().all(|&v| v * v > 1e-13 * scale))
            .map(|ch| ch.solve(&xty));
        let sol = solved.unwrap_or_else(|| {
            let ridge = xtx + DMatrix::identity(d, d) * (1e-8 * trace / d as f64);
            ridge.lu().solve(&xty).unwrap_or_else(|| DVector::zeros(d))
        });
        sol.iter().copied().collect()
    };
    let b = ybar - dot(&a, &xbar);
    (a, b)
}

fn residuals(data: &Dataset, a: &[f64], b: f64) -> Vec<f64> {
    (0..data.len()).map(|j| data.y()[j] - dot(a, data.x(j)) - b).collect()
}

fn weighted_scale(weights: &[f64], res: &[f64], total: f64, power: i32) -> f64 {
    let s: f64 = weights
        .iter()
        .zip(res)
        .map(|(w, r)| w * r.abs().powi(power))
        .sum::<f64>()
        / total;
    if power == 2 {
        s.sqrt()
    } else {
        s
    }
}

/// Candidate expert update for one column of responsibilities.
fn update_expert(
    family: Family,
    current: &ExpertParams,
    data: &Dataset,
    weights: &[f64],
    sigma_floor: f64,
) -> ExpertParams {
    let total: f64 = weights.iter().sum();
    match family {
        Family::Gaussian => {
            let (a, b) = wls(data, weights);
            let res = residuals(data, &a, b);
            let sigma = weighted_scale(weights, &res, total, 2).max(sigma_floor);
            ExpertParams { a, b, sigma }
        }
        Family::Laplace => {
            let (mut a, mut b) = (current.a.clone(), current.b);
            let mut irls = vec![0.0; weights.len()];
            for _ in 0..LAPLACE_IRLS_ITERS {
                let res = residuals(data, &a, b);
                let mad = weighted_scale(weights, &res, total, 1);
                let eps = 1e-8 * mad.max(1e-300);
                for ((o, &w), r) in irls.iter_mut().zip(weights).zip(&res) {
                    *o = w / r.abs().max(eps);
                }
                (a, b) = wls(data, &irls);
            }
            let res = residuals(data, &a, b);
            let sigma = weighted_scale(weights, &res, total, 1).max(sigma_floor);
            ExpertParams { a, b, sigma }
        }
        Family::StudentT { dof } => {
            let (mut a, mut b, mut sigma) = (current.a.clone(), current.b, current.sigma);
            let mut uw = vec![0.0; weights.len()];
            for _ in 0..STUDENT_ECM_ITERS {
                let res = residuals(data, &a, b);
                for ((o, &w), r) in uw.iter_mut().zip(weights).zip(&res) {
                    let z = r / sigma;
                    *o = w * (dof + 1.0) / (dof + z * z);
                }
                (a, b) = wls(data, &uw);
                let res = residuals(data, &a, b);
                let s2: f64 = uw.iter().zip(&res).map(|(u, r)| u * r * r).sum::<f64>() / total;
                let next = s2.sqrt().max(sigma_floor);
                let done = (next - sigma).abs() <= 1e-12 * sigma;
                sigma = next;
                if done {
                    break;
                }
            }
            ExpertParams { a, b, sigma }
        }
    }
}

/// Expert M-step. A component keeps its parameters when its column mass is
/// below `1e-12` or when the candidate would lower its weighted log-likelihood.
pub fn m_step_experts(
    data: &Dataset,
    resp: &Responsibilities,
    g: &MixingMeasure,
    sigma_floor: f64,
) -> Result<Vec<ExpertParams>> {
    check_data(data, g)?;
    if resp.k != g.order() || resp.n() != data.len() {
        return Err(Error::invalid("responsibility shape does not match data and measure"));
    }
    let family = g.family();
    Ok((0..g.order())
        .map(|i| {
            let current = &g.component(i).expert;
            let weights: Vec<f64> = (0..data.len()).map(|j| resp.row(j)[i]).collect();
            if weights.iter().sum::<f64>() < MIN_COLUMN_MASS {
                return current.clone();
            }
            let cand = update_expert(family, current, data, &weights, sigma_floor);
            let valid = cand.sigma.is_finite() && cand.b.is_finite() && cand.a.iter().all(|v| v.is_finite());
            if valid
                && weighted_expert_loglik(family, &cand, data, &weights)
                    >= weighted_expert_loglik(family, current, data, &weights)
            {
                cand
            } else {
                current.clone()
            }
        })
        .collect())
}

/// Gating part of the EM surrogate,
/// `(1/n) sum_j sum_i r_ji log w_i(x_j)`, with the selection recomputed from
/// `g`. It is `-inf` when an expert carrying responsibility is not selected.
pub fn gating_surrogate(data: &Dataset, resp: &Responsibilities, g: &MixingMeasure, top_k: usize) -> f64 {
    let k = g.order();
    let mut sel = Vec::with_capacity(top_k);
    let mut w = vec![0.0; k];
    let mut total = 0.0;
    for j in 0..data.len() {
        let logits = g.gate_logits(data.x(j));
        topk_into(&logits, top_k, &mut sel);
        softmax_selected(g.components(), &logits, &sel, &mut w);
        for (i, &r) in resp.row(j).iter().enumerate() {
            if r > 0.0 {
                if w[i] == 0.0 {
                    return f64::NEG_INFINITY;
                }
                total += r * w[i].ln();
            }
        }
    }
    total / data.len() as f64
}

/// Gradient of [`gating_surrogate`] in `(beta0_i, beta1_i)` with the top-K
/// selection at every `x_j` held at its value under `g`:
/// `mean_j (r_ji - w_ji sum_{l in S_j} r_jl) * (1, x_j)`.
pub fn gating_gradient(
    data: &Dataset,
    resp: &Responsibilities,
    g: &MixingMeasure,
    top_k: usize,
    i: usize,
) -> (f64, Vec<f64>) {
    let k = g.order();
    let d = data.dim();
    let mut sel = Vec::with_capacity(top_k);
    let mut w = vec![0.0; k];
    let mut g0 = 0.0;
    let mut g1 = vec![0.0; d];
    for j in 0..data.len() {
        let x = data.x(j);
        let logits = g.gate_logits(x);
        topk_into(&logits, top_k, &mut sel);
        if !sel.contains(&i) {
            continue;
        }
        softmax_selected(g.components(), &logits, &sel, &mut w);
        let row = resp.row(j);
        let mass: f64 = sel.iter().map(|&l| row[l]).sum();
        let t = row[i] - w[i] * mass;
        g0 += t;
        for (acc, v) in g1.iter_mut().zip(x) {
            *acc += t * v;
        }
    }
    let n = data.len() as f64;
    (g0 / n, g1.into_iter().map(|v| v / n).collect())
}

/// Gating surrogate with the selection frozen at `frozen` (one list per sample).
/// This is the smooth function [`gating_gradient`] differentiates.
pub fn gating_surrogate_fixed_selection(
    data: &Dataset,
    resp: &Responsibilities,
    g: &MixingMeasure,
    frozen: &[Vec<usize>],
) -> f64 {
    let mut w = vec![0.0; g.order()];
    let mut total = 0.0;
    for (j, sel) in frozen.iter().enumerate() {
        let logits = g.gate_logits(data.x(j));
        softmax_selected(g.components(), &logits, sel, &mut w);
        for &i in sel {
            let r = resp.row(j)[i];
            if r > 0.0 {
                total += r * w[i].ln();
            }
        }
    }
    total / data.len() as f64
}

/// Current top-K selection at every sample.
pub fn selections(data: &Dataset, g: &MixingMeasure, top_k: usize) -> Vec<Vec<usize>> {
    (0..data.len())
        .map(|j| {
            let mut sel = Vec::with_capacity(top_k);
            topk_into(&g.gate_logits(data.x(j)), top_k, &mut sel);
            sel
        })
        .collect()
}

/// Gating M-step: `steps` sweeps of block-coordinate gradient ascent over the
/// components. Each block step starts at `lr` and halves it until the
/// surrogate (with recomputed selection) does not decrease; after
/// 40 halvings the block is left as it is.
pub fn m_step_gating(
    data: &Dataset,
    resp: &Responsibilities,
    g: &MixingMeasure,
    top_k: usize,
    lr: f64,
    steps: usize,
) -> Result<MixingMeasure> {
    check_data(data, g)?;
    check_top_k(top_k, g.order())?;
    if !(lr > 0.0) {
        return Err(Error::invalid("lr must be > 0"));
    }
    let family = g.family();
    let mut comps = g.components().to_vec();
    let mut current = g.clone();
    let mut q = gating_surrogate(data, resp, &current, top_k);
    for _ in 0..steps {
        for i in 0..comps.len() {
            let (g0, g1) = gating_gradient(data, resp, &current, top_k, i);
            if g0 == 0.0 && g1.iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut step = lr;
            for _ in 0..MAX_HALVINGS {
                let mut trial = comps.clone();
                trial[i].gate.beta0 += step * g0;
                for (b, v) in trial[i].gate.beta1.iter_mut().zip(&g1) {
                    *b += step * v;
                }
                let cand = MixingMeasure::new(family, trial.clone())?;
                let qc = gating_surrogate(data, resp, &cand, top_k);
                if qc >= q {
                    comps = trial;
                    current = cand;
                    q = qc;
                    break;
                }
                step *= 0.5;
            }
        }
    }
    Ok(current)
}

/// Runs EM from `init` until the mean log-likelihood changes by less than
/// `cfg.tol` or `cfg.max_iters` iterations have run.
pub fn fit_from(data: &Dataset, cfg: &FitConfig, init: MixingMeasure) -> Result<FitResult> {
    cfg.validate()?;
    check_data(data, &init)?;
    if init.order() != cfg.k {
        return Err(Error::invalid(format!(
            "initial measure has order {}, expected {}",
            init.order(),
            cfg.k
        )));
    }
    let start = Instant::now();
    let mut g = init;
    let (mut resp, mut ll) = e_step(data, &g, cfg.top_k)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let experts = m_step_experts(data, &resp, &g, cfg.sigma_floor)?;
        let comps = g
            .components()
            .iter()
            .zip(experts)
            .map(|(c, expert)| Component {
                gate: c.gate.clone(),
                expert,
            })
            .collect();
        g = MixingMeasure::new(g.family(), comps)?;
        g = m_step_gating(data, &resp, &g, cfg.top_k, cfg.gating_lr, cfg.gating_steps)?;
        let (r, next) = e_step(data, &g, cfg.top_k)?;
        resp = r;
        trace.push(next);
        let delta = next - ll;
        ll = next;
        if delta.abs() < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        measure: g,
        loglik_trace: trace,
        iterations,
        converged,
        wallclock: start.elapsed(),
    })
}

/// Initializes from `cfg.init` and runs EM.
pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let init = init_measure(&cfg.init, cfg.k, cfg.seed)?;
    fit_from(data, cfg, init)
}

/// Shuffled copy of `0..k`; used by tests and tools that need random labelings.
pub fn random_permutation(k: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    p.shuffle(&mut rng_from_seed(seed));
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UniformBox;

    fn line_data(xs: &[f64], ys: &[f64]) -> Dataset {
        Dataset::from_flat(1, xs.to_vec(), ys.to_vec(), vec![(-10.0, 10.0)]).unwrap()
    }

    fn single(family: Family, a: f64, b: f64, sigma: f64) -> MixingMeasure {
        MixingMeasure::new(family, vec![Component::new(0.0, vec![0.0], vec![a], b, sigma).unwrap()]).unwrap()
    }

    fn ones(n: usize) -> Responsibilities {
        Responsibilities {
            k: 1,
            values: vec![1.0; n],
        }
    }

    #[test]
    fn init_examples() {
        let t = MixingMeasure::benchmark_truth();
        let exact = init_measure(&InitSpec::new(t.clone(), 0.0).unwrap(), 2, 3).unwrap();
        assert_eq!(exact, t);

        let spec = InitSpec::new(t.clone(), 0.05).unwrap();
        let g = init_measure(&spec, 3, 9).unwrap();
        assert_eq!(g, init_measure(&spec, 3, 9).unwrap());
        assert_ne!(g, init_measure(&spec, 3, 10).unwrap());
        let plan = random_cell_plan(3, 2, derive_seed(9, &[0])).unwrap();
        let mut sizes = [0, 0];
        plan.iter().for_each(|&j| sizes[j] += 1);
        sizes.sort();
        assert_eq!(sizes, [1, 2]);

        let bad = InitSpec::new(t, 0.0).unwrap().with_plan(vec![0, 0, 0]);
        assert!(init_measure(&bad, 3, 1).is_err());
    }

    #[test]
    fn e_step_examples() {
        let data = line_data(&[0.1, 0.5, 0.9], &[1.0, -2.0, 3.0]);
        let (r, _) = e_step(&data, &single(Family::Gaussian, 1.0, 0.0, 1.0), 1).unwrap();
        assert!(r.values.iter().all(|&v| v == 1.0));

        let t = MixingMeasure::benchmark_truth();
        let (r, _) = e_step(&data, &t, 1).unwrap();
        for j in 0..3 {
            assert_eq!(r.row(j), &[1.0, 0.0]);
        }

        let twin = Component::new(0.0, vec![0.0], vec![1.0], 0.0, 1.0).unwrap();
        let g = MixingMeasure::new(Family::Gaussian, vec![twin.clone(), twin]).unwrap();
        let (r, _) = e_step(&data, &g, 2).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn e_step_reports_degenerate_rows() {
        let data = line_data(&[0.1, 0.5], &[0.0, 1e200]);
        let err = e_step(&data, &single(Family::Gaussian, 0.0, 0.0, 1e-3), 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateData { index: 1, .. }), "{err:?}");
    }

    #[test]
    fn expert_m_step_examples() {
        let xs = [0.0, 0.25, 0.5, 0.75, 1.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let data = line_data(&xs, &ys);
        let g = single(Family::Gaussian, 0.0, 0.0, 1.0);
        let e = &m_step_experts(&data, &ones(5), &g, 1e-3).unwrap()[0];
        assert!((e.a[0] - 2.0).abs() < 1e-12 && (e.b - 1.0).abs() < 1e-12);
        assert_eq!(e.sigma, 1e-3);

        let data = line_data(&[0.0, 1.0], &[0.0, 1.0]);
        let e = &m_step_experts(&data, &ones(2), &g, 1e-3).unwrap()[0];
        assert!((e.a[0] - 1.0).abs() < 1e-12 && e.b.abs() < 1e-12);

        let data = line_data(&[0.4, 0.4, 0.4], &[1.0, 2.0, 6.0]);
        let e = &m_step_experts(&data, &ones(3), &g, 1e-3).unwrap()[0];
        assert_eq!(e.a[0], 0.0);
        assert!((e.b - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_mass_columns_are_left_unchanged() {
        let data = line_data(&[0.1, 0.9], &[1.0, 2.0]);
        let t = MixingMeasure::benchmark_truth();
        let resp = Responsibilities {
            k: 2,
            values: vec![1.0, 0.0, 1.0, 0.0],
        };
        let e = m_step_experts(&data, &resp, &t, 1e-3).unwrap();
        assert_eq!(e[1], t.component(1).expert);
    }

    fn mixed_data(family: Family, n: usize, seed: u64) -> Dataset {
        let t = MixingMeasure::benchmark_truth().with_family(family);
        t.sample_dataset(2, n, &UniformBox::unit(1), seed).unwrap()
    }

    #[test]
    fn expert_update_is_a_local_maximum() {
        for family in [Family::Gaussian, Family::StudentT { dof: 5.0 }] {
            let data = mixed_data(family, 400, 3);
            let g = MixingMeasure::benchmark_truth().with_family(family);
            let (resp, _) = e_step(&data, &g, 2).unwrap();
            let experts = m_step_experts(&data, &resp, &g, 1e-3).unwrap();
            for (i, e) in experts.iter().enumerate() {
                let w: Vec<f64> = (0..data.len()).map(|j| resp.row(j)[i]).collect();
                let base = weighted_expert_loglik(family, e, &data, &w);
                for coord in 0..3 {
                    for h in [1e-4, -1e-4] {
                        let mut p = e.clone();
                        match coord {
                            0 => p.a[0] += h,
                            1 => p.b += h,
                            _ => p.sigma += h,
                        }
                        let v = weighted_expert_loglik(family, &p, &data, &w);
                        assert!(
                            v <= base + 1e-9 * base.abs().max(1.0),
                            "{family:?} comp {i} coord {coord}: {v} > {base}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn laplace_update_does_not_lower_the_surrogate() {
        let data = mixed_data(Family::Laplace, 400, 5);
        let g = MixingMeasure::benchmark_truth().with_family(Family::Laplace);
        let (resp, _) = e_step(&data, &g, 2).unwrap();
        let experts = m_step_experts(&data, &resp, &g, 1e-3).unwrap();
        for (i, e) in experts.iter().enumerate() {
            let w: Vec<f64> = (0..data.len()).map(|j| resp.row(j)[i]).collect();
            assert!(
                weighted_expert_loglik(Family::Laplace, e, &data, &w)
                    >= weighted_expert_loglik(Family::Laplace, &g.component(i).expert, &data, &w)
            );
        }
    }

    #[test]
    fn dense_gate_gradient_identity() {
        let data = mixed_data(Family::Gaussian, 200, 8);
        let g = MixingMeasure::benchmark_truth();
        let (resp, _) = e_step(&data, &g, 2).unwrap();
        for i in 0..2 {
            let (g0, _) = gating_gradient(&data, &resp, &g, 2, i);
            let direct: f64 = (0..data.len())
                .map(|j| resp.row(j)[i] - g.gate_weights(data.x(j), 2).unwrap().weights[i])
                .sum::<f64>()
                / data.len() as f64;
            assert!((g0 - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn top_one_gating_does_not_move() {
        let data = mixed_data(Family::Gaussian, 200, 8);
        let g = MixingMeasure::benchmark_truth();
        let (resp, _) = e_step(&data, &g, 1).unwrap();
        for i in 0..2 {
            let (g0, g1) = gating_gradient(&data, &resp, &g, 1, i);
            assert_eq!(g0, 0.0);
            assert_eq!(g1, vec![0.0]);
        }
        assert_eq!(m_step_gating(&data, &resp, &g, 1, 0.1, 5).unwrap(), g);
    }

    #[test]
    fn stationary_gate_does_not_move() {
        let data = line_data(&[0.2, 0.6], &[0.0, 0.0]);
        let twin = Component::new(0.0, vec![0.0], vec![0.0], 0.0, 1.0).unwrap();
        let g = MixingMeasure::new(Family::Gaussian, vec![twin.clone(), twin]).unwrap();
        let resp = Responsibilities {
            k: 2,
            values: vec![0.5; 4],
        };
        assert_eq!(m_step_gating(&data, &resp, &g, 2, 0.1, 5).unwrap(), g);
    }

    #[test]
    fn single_expert_recovery_and_fixed_point() {
        let t = single(Family::Gaussian, -2.0, 1.0, 0.5);
        let data = Dataset::from_flat(
            1,
            (0..10_000).map(|j| j as f64 / 9_999.0).collect(),
            vec![0.0; 10_000],
            vec![(0.0, 1.0)],
        )
        .unwrap();
        // Responses drawn from the expert with a fixed stream.
        let mut rng = rng_from_seed(41);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let ys: Vec<f64> = data.xs().map(|x| -2.0 * x[0] + 1.0 + normal.sample(&mut rng)).collect();
        let data = Dataset::from_flat(1, data.x_flat().to_vec(), ys, vec![(0.0, 1.0)]).unwrap();

        let cfg = FitConfig::new(t.clone(), 1, 1, 2).unwrap();
        let res = fit(&data, &cfg).unwrap();
        let e = &res.measure.component(0).expert;
        let n = 10_000.0f64;
        // OLS standard errors for x on an even grid over [0, 1].
        let se_a = 0.5 * (12.0 / n).sqrt();
        let se_b = 0.5 * (4.0 / n).sqrt();
        let se_s = 0.5 / (2.0 * n).sqrt();
        assert!((e.a[0] + 2.0).abs() < 3.0 * se_a, "{e:?}");
        assert!((e.b - 1.0).abs() < 3.0 * se_b, "{e:?}");
        assert!((e.sigma - 0.5).abs() < 3.0 * se_s, "{e:?}");

        let again = fit_from(&data, &cfg, res.measure.clone()).unwrap();
        assert!(again.converged && again.iterations <= 3);
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = FitConfig::new(MixingMeasure::benchmark_truth(), 3, 2, 17).unwrap();
        cfg.init = cfg.init.clone().with_plan(vec![0, 1, 0]);
        cfg.gating_lr = 0.25;
        assert_eq!(FitConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(FitConfig::from_text("k = 2\n").is_err());
        let t = MixingMeasure::benchmark_truth().to_text();
        let e = FitConfig::from_text(&format!("K = 1\nlr = 3\n[truth]\n{t}")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e:?}");
    }

    #[test]
    fn zero_iterations_returns_init() {
        let t = MixingMeasure::benchmark_truth();
        let data = mixed_data(Family::Gaussian, 100, 1);
        let mut cfg = FitConfig::new(t.clone(), 2, 2, 1).unwrap();
        cfg.max_iters = 0;
        cfg.init.noise_std = 0.0;
        let r = fit(&data, &cfg).unwrap();
        assert_eq!(r.measure, t);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.loglik_trace.len(), 1);
    }
}
