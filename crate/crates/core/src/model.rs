//! Top-K sparse softmax gated mixtures of experts.
//!
//! A [`MixingMeasure`] is an ordered list of components, each carrying gating
//! parameters `(beta0, beta1)` and expert parameters `(a, b, sigma)`. For an
//! input `x` the gate ranks the logits `beta1 . x` (the bias does not take part
//! in the ranking), keeps the `K` largest, and softmaxes `beta1 . x + beta0` over
//! the survivors. Experts are location-scale densities with location
//! `a . x + b` and scale `sigma`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Assumption, Error, Result};
use crate::rng::{rng_from_seed, Rng};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub a: Vec<f64>,
    pub b: f64,
    pub sigma: f64,
}

impl ExpertParams {
    pub fn new(a: Vec<f64>, b: f64, sigma: f64) -> Result<Self> {
        let p = ExpertParams { a, b, sigma };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!(
                "sigma must be finite and > 0, got {}",
                self.sigma
            )));
        }
        if !self.b.is_finite() || self.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("expert parameters must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn mean(&self, x: &[f64]) -> f64 {
        dot(&self.a, x) + self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub beta0: f64,
    pub beta1: Vec<f64>,
}

impl GateParams {
    pub fn new(beta0: f64, beta1: Vec<f64>) -> Result<Self> {
        if !beta0.is_finite() || beta1.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gating parameters must be finite"));
        }
        Ok(GateParams { beta0, beta1 })
    }

    /// Ranking logit `beta1 . x`.
    #[inline]
    pub fn logit(&self, x: &[f64]) -> f64 {
        dot(&self.beta1, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub gate: GateParams,
    pub expert: ExpertParams,
}

impl Component {
    pub fn new(beta0: f64, beta1: Vec<f64>, a: Vec<f64>, b: f64, sigma: f64) -> Result<Self> {
        Ok(Component {
            gate: GateParams::new(beta0, beta1)?,
            expert: ExpertParams::new(a, b, sigma)?,
        })
    }

    /// Concatenated `(beta1, a, b, sigma)`, the vector Voronoi cells are built on.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(2 * self.gate.beta1.len() + 2);
        t.extend_from_slice(&self.gate.beta1);
        t.extend_from_slice(&self.expert.a);
        t.push(self.expert.b);
        t.push(self.expert.sigma);
        t
    }
}

/// Expert density family. `sigma` is the scale of the location-scale family,
/// which for the Gaussian is its standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    Laplace,
    StudentT { dof: f64 },
}

impl Family {
    pub const DEFAULT_STUDENT_DOF: f64 = 5.0;

    pub fn student_t(dof: f64) -> Result<Self> {
        if !(dof > 2.0) || !dof.is_finite() {
            return Err(Error::invalid(format!(
                "Student-t dof must be finite and > 2, got {dof}"
            )));
        }
        Ok(Family::StudentT { dof })
    }

    /// Log-density of the standardized residual `z = (y - mean) / sigma`,
    /// including the `-ln sigma` Jacobian.
    #[inline]
    pub fn log_density_standardized(&self, z: f64, sigma: f64) -> f64 {
        match *self {
            Family::Gaussian => -LN_SQRT_2PI - sigma.ln() - 0.5 * z * z,
            Family::Laplace => -(2.0 * sigma).ln() - z.abs(),
            Family::StudentT { dof } => {
                ln_gamma(0.5 * (dof + 1.0))
                    - ln_gamma(0.5 * dof)
                    - 0.5 * (dof * PI).ln()
                    - sigma.ln()
                    - 0.5 * (dof + 1.0) * (z * z / dof).ln_1p()
            }
        }
    }

    #[inline]
    pub fn log_density(&self, params: &ExpertParams, x: &[f64], y: f64) -> f64 {
        let z = (y - params.mean(x)) / params.sigma;
        self.log_density_standardized(z, params.sigma)
    }

    pub fn density(&self, params: &ExpertParams, x: &[f64], y: f64) -> f64 {
        self.log_density(params, x, y).exp()
    }

    /// Draw a standardized variate (location 0, scale 1).
    pub fn sample_standard(&self, rng: &mut Rng) -> f64 {
        match *self {
            Family::Gaussian => StandardNormal.sample(rng),
            Family::Laplace => {
                let u: f64 = rng.gen::<f64>() - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            Family::StudentT { dof } => StudentT::new(dof).expect("dof validated at construction").sample(rng),
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Family::Gaussian => "gaussian".into(),
            Family::Laplace => "laplace".into(),
            Family::StudentT { dof } => format!("student-t:{}", fmt_f64(dof)),
        }
    }

    /// True for families whose first two derivatives are linearly independent
    /// across distinct parameters (no heat-equation interaction).
    pub fn is_strongly_identifiable(&self) -> bool {
        !matches!(self, Family::Gaussian)
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "laplace" => Ok(Family::Laplace),
            "student-t" | "t" => Family::student_t(Family::DEFAULT_STUDENT_DOF),
            _ => match s.strip_prefix("student-t:") {
                Some(dof) => Family::student_t(
                    dof.parse()
                        .map_err(|_| Error::invalid(format!("bad Student-t dof `{dof}`")))?,
                ),
                None => Err(Error::invalid(format!("unknown family `{s}`"))),
            },
        }
    }
}

/// Sparse gate output: the selected experts and a length-`k` weight vector that
/// is zero outside the selection.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Indices of the `top_k` largest logits, returned in ascending index order.
/// Ties go to the smaller index.
pub fn topk_select(logits: &[f64], top_k: usize) -> Result<Vec<usize>> {
    check_top_k(top_k, logits.len())?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    let mut out = Vec::with_capacity(top_k);
    topk_into(logits, top_k, &mut out);
    Ok(out)
}

pub(crate) fn check_top_k(top_k: usize, k: usize) -> Result<()> {
    if top_k == 0 || top_k > k {
        return Err(Error::invalid(format!("K must satisfy 1 <= K <= {k}, got {top_k}")));
    }
    Ok(())
}

/// Unchecked selection into a reusable buffer. `out` ends sorted ascending.
pub(crate) fn topk_into(logits: &[f64], top_k: usize, out: &mut Vec<usize>) {
    out.clear();
    let k = logits.len();
    if top_k == k {
        out.extend(0..k);
        return;
    }
    // i outranks j iff logit_i > logit_j, or equal and i < j.
    for i in 0..k {
        let li = logits[i];
        let beaten_by = (0..k).filter(|&j| logits[j] > li || (logits[j] == li && j < i)).count();
        if beaten_by < top_k {
            out.push(i);
        }
    }
}

/// Samples inputs uniformly on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub bounds: Vec<(f64, f64)>,
}

impl UniformBox {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::invalid("input box needs at least one dimension"));
        }
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Assumptions(vec![Assumption::BoundedSpace]));
            }
        }
        Ok(UniformBox { bounds })
    }

    /// `[0, 1]^d`.
    pub fn unit(d: usize) -> Self {
        UniformBox {
            bounds: vec![(0.0, 1.0); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        for (v, &(lo, hi)) in out.iter_mut().zip(&self.bounds) {
            *v = lo + (hi - lo) * rng.gen::<f64>();
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.sample_into(rng, &mut x);
        x
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.bounds).all(|(&v, &(lo, hi))| lo <= v && v <= hi)
    }
}

/// A finite mixing measure: the parameter object both the truth and every fit live in.
/// Parses `lo:hi` bounds separated by commas, one pair per input coordinate.
impl FromStr for UniformBox {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bounds = s
            .split(',')
            .map(|b| {
                let (lo, hi) = b
                    .split_once(':')
                    .ok_or_else(|| Error::invalid(format!("input bounds are lo:hi, got `{b}`")))?;
                let parse = |t: &str| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid(format!("bad bound `{}`", t.trim())))
                };
                Ok((parse(lo)?, parse(hi)?))
            })
            .collect::<Result<Vec<_>>>()?;
        UniformBox::new(bounds)
    }
}

impl fmt::Display for UniformBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.bounds.iter().map(|(lo, hi)| format!("{lo}:{hi}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingMeasure {
    family: Family,
    dim: usize,
    components: Vec<Component>,
}

impl MixingMeasure {
    /// Builds a measure after checking shapes and parameter validity. No
    /// identifiability assumptions are imposed; see [`MixingMeasure::new_true`].
    pub fn new(family: Family, components: Vec<Component>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::invalid("a mixing measure needs at least one component"));
        };
        if let Family::StudentT { dof } = family {
            Family::student_t(dof)?;
        }
        let dim = first.gate.beta1.len();
        if dim == 0 {
            return Err(Error::invalid("input dimension must be >= 1"));
        }
        for (i, c) in components.iter().enumerate() {
            if c.gate.beta1.len() != dim || c.expert.a.len() != dim {
                return Err(Error::invalid(format!("component {i} has inconsistent dimension")));
            }
            c.expert.validate()?;
            GateParams::new(c.gate.beta0, c.gate.beta1.clone())?;
        }
        Ok(MixingMeasure {
            family,
            dim,
            components,
        })
    }

    /// Builds a ground-truth measure, enforcing the pinning, distinctness and
    /// input-dependence assumptions.
    pub fn new_true(family: Family, components: Vec<Component>) -> Result<Self> {
        let m = Self::new(family, components)?;
        let violated = m.violated_assumptions();
        if violated.is_empty() {
            Ok(m)
        } else {
            Err(Error::Assumptions(violated))
        }
    }

    /// The two-expert, one-dimensional ground truth used by the rate experiments.
    pub fn benchmark_truth() -> Self {
        let comps = vec![
            Component::new(-8.0, vec![25.0], vec![-20.0], 15.0, 0.3).unwrap(),
            Component::new(0.0, vec![0.0], vec![20.0], -5.0, 0.4).unwrap(),
        ];
        Self::new_true(Family::Gaussian, comps).unwrap()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &Component {
        &self.components[i]
    }

    pub fn into_components(self) -> Vec<Component> {
        self.components
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    /// Same measure with components reordered so that new component `i` is old
    /// component `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.order() {
            return Err(Error::invalid("permutation length differs from order"));
        }
        let mut seen = vec![false; self.order()];
        for &p in perm {
            if p >= self.order() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid("not a permutation"));
            }
        }
        Ok(MixingMeasure {
            family: self.family,
            dim: self.dim,
            components: perm.iter().map(|&p| self.components[p].clone()).collect(),
        })
    }

    /// Shift every gating bias by `c` and every gating slope by `v`. The
    /// conditional density is unchanged.
    pub fn shift_gating(&self, c: f64, v: &[f64]) -> Self {
        let mut out = self.clone();
        for comp in &mut out.components {
            comp.gate.beta0 += c;
            for (b, dv) in comp.gate.beta1.iter_mut().zip(v) {
                *b += dv;
            }
        }
        out
    }

    pub fn is_pinned(&self) -> bool {
        let last = self.components.last().expect("nonempty");
        last.gate.beta0 == 0.0 && last.gate.beta1.iter().all(|&b| b == 0.0)
    }

    pub fn has_distinct_experts(&self) -> bool {
        let k = self.order();
        (0..k).all(|i| {
            (i + 1..k).all(|j| {
                let (p, q) = (&self.components[i].expert, &self.components[j].expert);
                p.a != q.a || p.b != q.b || p.sigma != q.sigma
            })
        })
    }

    pub fn is_input_dependent(&self) -> bool {
        self.components.iter().any(|c| c.gate.beta1.iter().any(|&b| b != 0.0))
    }

    /// Identifiability assumptions violated by this measure (empty when it is a
    /// valid ground truth).
    pub fn violated_assumptions(&self) -> Vec<Assumption> {
        let mut v = Vec::new();
        if !self.is_pinned() {
            v.push(Assumption::Identifiability);
        }
        if !self.has_distinct_experts() {
            v.push(Assumption::DistinctExperts);
        }
        if !self.is_input_dependent() {
            v.push(Assumption::InputDependentGating);
        }
        v
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "input has dimension {} but the measure has dimension {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn gate_logits(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.gate.logit(x)).collect()
    }

    /// Top-K sparse softmax gate at `x`.
    pub fn gate_weights(&self, x: &[f64], top_k: usize) -> Result<GateOutput> {
        self.check_x(x)?;
        check_top_k(top_k, self.order())?;
        let logits = self.gate_logits(x);
        let mut selected = Vec::with_capacity(top_k);
        topk_into(&logits, top_k, &mut selected);
        let mut weights = vec![0.0; self.order()];
        softmax_selected(&self.components, &logits, &selected, &mut weights);
        Ok(GateOutput { selected, weights })
    }

    pub fn expert_log_density(&self, i: usize, x: &[f64], y: f64) -> f64 {
        self.family.log_density(&self.components[i].expert, x, y)
    }

    /// `log g(y | x)` with top-`top_k` gating, computed by log-sum-exp over the
    /// selected experts.
    pub fn log_conditional_density(&self, top_k: usize, x: &[f64], y: f64) -> Result<f64> {
        let gate = self.gate_weights(x, top_k)?;
        Ok(self.log_density_with_gate(&gate, x, y))
    }

    pub(crate) fn log_density_with_gate(&self, gate: &GateOutput, x: &[f64], y: f64) -> f64 {
        let mut terms = [0.0f64; 0].to_vec();
        terms.reserve(gate.selected.len());
        for &i in &gate.selected {
            terms.push(gate.weights[i].ln() + self.expert_log_density(i, x, y));
        }
        log_sum_exp(&terms)
    }

    pub fn conditional_density(&self, top_k: usize, x: &[f64], y: f64) -> Result<f64> {
        Ok(self.log_conditional_density(top_k, x, y)?.exp())
    }

    /// Conditional density on a grid of responses, sharing one gate evaluation.
    pub fn conditional_density_grid(&self, top_k: usize, x: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
        let gate = self.gate_weights(x, top_k)?;
        Ok(ys
            .iter()
            .map(|&y| self.log_density_with_gate(&gate, x, y).exp())
            .collect())
    }

    /// Draw a synthetic dataset: `x` uniform on `inputs`, an expert index from the
    /// gate, then `y` from that expert.
    pub fn sample_dataset(&self, top_k: usize, n: usize, inputs: &UniformBox, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::invalid("sample size n must be >= 1"));
        }
        check_top_k(top_k, self.order())?;
        if inputs.dim() != self.dim {
            return Err(Error::invalid("input box dimension differs from the measure's"));
        }
        let violated = self.violated_assumptions();
        if !violated.is_empty() {
            return Err(Error::Assumptions(violated));
        }
        let mut rng = rng_from_seed(seed);
        let d = self.dim;
        let mut xs = vec![0.0; n * d];
        let mut ys = Vec::with_capacity(n);
        for row in xs.chunks_exact_mut(d) {
            inputs.sample_into(&mut rng, row);
            let gate = self.gate_weights(row, top_k)?;
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = *gate.selected.last().expect("K >= 1");
            for &i in &gate.selected {
                acc += gate.weights[i];
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let e = &self.components[pick].expert;
            ys.push(e.mean(row) + e.sigma * self.family.sample_standard(&mut rng));
        }
        Dataset::from_flat(d, xs, ys, inputs.bounds.clone())
    }

    /// Text document: a `family=<name> d=<int> k=<int>` header, then one line per
    /// component with `beta0 beta1[0..d) a[0..d) b sigma`. Values use 17
    /// significant digits so parsing recovers them bit for bit.
    pub fn to_text(&self) -> String {
        let mut s = format!("family={} d={} k={}\n", self.family.name(), self.dim, self.order());
        for c in &self.components {
            let mut fields = vec![fmt_f64(c.gate.beta0)];
            fields.extend(c.gate.beta1.iter().map(|&v| fmt_f64(v)));
            fields.extend(c.expert.a.iter().map(|&v| fmt_f64(v)));
            fields.push(fmt_f64(c.expert.b));
            fields.push(fmt_f64(c.expert.sigma));
            s.push_str(&fields.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parses the document written by [`MixingMeasure::to_text`]. Blank lines
    /// and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let (hline, header) = lines.next().ok_or_else(|| Error::parse(1, "empty document"))?;
        let (mut family, mut d, mut k) = (None, None, None);
        for tok in header.split_whitespace() {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse(hline, format!("expected key=value, got `{tok}`")))?;
            match key {
                "family" => family = Some(val.parse::<Family>().map_err(|e| Error::parse(hline, e.to_string()))?),
                "d" => d = Some(val.parse::<usize>().map_err(|e| Error::parse(hline, e.to_string()))?),
                "k" => k = Some(val.parse::<usize>().map_err(|e| Error::parse(hline, e.to_string()))?),
                _ => return Err(Error::parse(hline, format!("unknown header key `{key}`"))),
            }
        }
        let (family, d, k) = match (family, d, k) {
            (Some(f), Some(d), Some(k)) => (f, d, k),
            _ => return Err(Error::parse(hline, "header needs family=, d= and k=")),
        };
        let mut components = Vec::with_capacity(k);
        for (ln, line) in lines {
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(ln, format!("bad number `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != 2 * d + 3 {
                return Err(Error::parse(
                    ln,
                    format!("expected {} fields, found {}", 2 * d + 3, vals.len()),
                ));
            }
            let c = Component::new(
                vals[0],
                vals[1..1 + d].to_vec(),
                vals[1 + d..1 + 2 * d].to_vec(),
                vals[1 + 2 * d],
                vals[2 + 2 * d],
            )
            .map_err(|e| Error::parse(ln, e.to_string()))?;
            components.push(c);
        }
        if components.len() != k {
            return Err(Error::parse(
                hline,
                format!("header says k={k}, found {} components", components.len()),
            ));
        }
        MixingMeasure::new(family, components)
    }
}

impl fmt::Display for MixingMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl FromStr for MixingMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_text(s)
    }
}

/// Writes softmax weights of `beta1 . x + beta0` over `selected` into `out`
/// (zero elsewhere).
pub(crate) fn softmax_selected(comps: &[Component], logits: &[f64], selected: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|w| *w = 0.0);
    let max = selected
        .iter()
        .map(|&i| logits[i] + comps[i].gate.beta0)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &i in selected {
        let e = (logits[i] + comps[i].gate.beta0 - max).exp();
        out[i] = e;
        total += e;
    }
    for &i in selected {
        out[i] /= total;
    }
}

/// Training/evaluation data: `n` inputs of dimension `d` stored row-major, and
/// their responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    bounds: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        let d = x.first().map(|r| r.len()).unwrap_or(0);
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged input rows"));
        }
        Self::from_flat(d, x.concat(), y, bounds)
    }

    pub fn from_flat(dim: usize, x: Vec<f64>, y: Vec<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::invalid("dataset must have n >= 1 rows"));
        }
        if dim == 0 || x.len() != dim * y.len() {
            return Err(Error::invalid("x and y lengths disagree"));
        }
        if bounds.len() != dim {
            return Err(Error::invalid("bounds dimension differs from x"));
        }
        let bx = UniformBox::new(bounds)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("responses must be finite"));
        }
        for (j, row) in x.chunks_exact(dim).enumerate() {
            if !bx.contains(row) {
                return Err(Error::DegenerateData {
                    index: j,
                    reason: format!("input outside bounds ({})", Assumption::BoundedSpace),
                });
            }
        }
        Ok(Dataset {
            dim,
            x,
            y,
            bounds: bx.bounds,
        })
    }

    /// Bounds are the per-dimension min/max of `x`.
    pub fn with_tight_bounds(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be >= 1"));
        }
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); dim];
        for row in x.chunks_exact(dim) {
            for (b, &v) in bounds.iter_mut().zip(row) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        Self::from_flat(dim, x, y, bounds)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn x(&self, j: usize) -> &[f64] {
        &self.x[j * self.dim..(j + 1) * self.dim]
    }

    pub fn xs(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks_exact(self.dim)
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    /// TSV: x columns then y, one row per sample, no header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::with_capacity(self.len() * 24 * (self.dim + 1));
        for (row, y) in self.xs().zip(&self.y) {
            for v in row {
                s.push_str(&fmt_f64(*v));
                s.push('\t');
            }
            s.push_str(&fmt_f64(*y));
            s.push('\n');
        }
        s
    }

    /// Parses the TSV written by [`Dataset::to_tsv`]. Lines starting with `#`
    /// are skipped; bounds default to the data's bounding box.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut dim = None;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals = line
                .split(['\t', ' '])
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(i + 1, format!("bad number `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() < 2 {
                return Err(Error::parse(i + 1, "need at least one x column and a y column"));
            }
            let d = *dim.get_or_insert(vals.len() - 1);
            if vals.len() - 1 != d {
                return Err(Error::parse(i + 1, "inconsistent column count"));
            }
            x.extend_from_slice(&vals[..d]);
            y.push(vals[d]);
        }
        let d = dim.ok_or_else(|| Error::invalid("dataset must have n >= 1 rows"))?;
        Self::with_tight_bounds(d, x, y)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|&t| (t - max).exp()).sum::<f64>().ln()
}

/// Decimal with 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn topk_strict_max_and_ties() {
        assert_eq!(topk_select(&[1.0, 0.0], 1).unwrap(), vec![0]);
        assert_eq!(topk_select(&[0.0, 0.0, 0.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(topk_select(&[0.0, 2.0, 1.0, 2.0], 2).unwrap(), vec![1, 3]);
        assert_eq!(topk_select(&[12.5, 0.0], 1).unwrap(), vec![0]);
        assert!(topk_select(&[1.0], 0).is_err());
        assert!(topk_select(&[1.0], 2).is_err());
        assert!(topk_select(&[f64::NAN, 1.0], 1).is_err());
    }

    #[test]
    fn gate_symmetric_and_singleton() {
        let c = |b0: f64| Component::new(b0, vec![0.0], vec![0.0], 0.0, 1.0).unwrap();
        let g = MixingMeasure::new(Family::Gaussian, vec![c(0.0), c(0.0)]).unwrap();
        assert_eq!(g.gate_weights(&[0.7], 2).unwrap().weights, vec![0.5, 0.5]);

        let g = MixingMeasure::new(Family::Gaussian, vec![c(-30.0), c(4.0)]).unwrap();
        let out = g.gate_weights(&[0.3], 1).unwrap();
        assert_eq!(out.selected, vec![0]);
        assert_eq!(out.weights, vec![1.0, 0.0]);
        assert!(g.gate_weights(&[0.3, 0.1], 1).is_err());
    }

    #[test]
    fn gate_on_benchmark_truth() {
        let g = MixingMeasure::benchmark_truth();
        let out = g.gate_weights(&[0.5], 2).unwrap();
        // softmax(4.5, 0)
        let w0 = 1.0 / (1.0 + (-4.5f64).exp());
        assert!(approx(out.weights[0], w0, 1e-15));
        assert!(approx(out.weights[0], 0.98901, 1e-5));
        assert!(approx(out.weights[1], 0.01099, 1e-5));
        assert_eq!(g.gate_weights(&[0.5], 1).unwrap().selected, vec![0]);
    }

    #[test]
    fn expert_densities_at_mode() {
        let p = ExpertParams::new(vec![0.0], 0.0, 1.0).unwrap();
        assert!(approx(
            Family::Gaussian.density(&p, &[0.3], 0.0),
            0.398_942_280_401_432_7,
            1e-15
        ));
        assert!(approx(Family::Laplace.density(&p, &[0.3], 0.0), 0.5, 1e-15));
        // Student-t(5) at 0: Gamma(3)/(Gamma(2.5) sqrt(5 pi)) = 0.3796066898...
        let t5 = Family::student_t(5.0).unwrap();
        assert!(approx(t5.density(&p, &[0.3], 0.0), 0.379_606_689_822_494_6, 1e-12));

        let g = MixingMeasure::benchmark_truth();
        let e1 = &g.component(0).expert;
        assert!(approx(e1.mean(&[0.5]), 5.0, 1e-15));
        assert!(approx(
            Family::Gaussian.density(e1, &[0.5], 5.0),
            1.329_807_601_338_109_5,
            1e-12
        ));
    }

    #[test]
    fn conditional_density_cases() {
        let g = MixingMeasure::benchmark_truth();
        // K = 1: expert 1 always wins on (0, 1].
        for &x in &[0.01, 0.3, 0.5, 1.0] {
            for &y in &[-3.0, 5.0, 14.0] {
                let lhs = g.conditional_density(1, &[x], y).unwrap();
                let rhs = Family::Gaussian.density(&g.component(0).expert, &[x], y);
                assert!((lhs - rhs).abs() <= 1e-15 * rhs.max(1e-300), "{x} {y}");
            }
        }
        let w0 = 1.0 / (1.0 + (-4.5f64).exp());
        let f1 = Family::Gaussian.density(&g.component(0).expert, &[0.5], 5.0);
        let f2 = Family::Gaussian.density(&g.component(1).expert, &[0.5], 5.0);
        let got = g.conditional_density(2, &[0.5], 5.0).unwrap();
        assert!(approx(got, w0 * f1 + (1.0 - w0) * f2, 1e-14));

        let single = MixingMeasure::new(
            Family::Laplace,
            vec![Component::new(0.3, vec![1.0], vec![2.0], 1.0, 0.5).unwrap()],
        )
        .unwrap();
        let e = &single.component(0).expert;
        assert!(approx(
            single.conditional_density(1, &[0.2], 1.1).unwrap(),
            Family::Laplace.density(e, &[0.2], 1.1),
            1e-15
        ));
    }

    #[test]
    fn assumptions_are_reported() {
        let c = Component::new(1.0, vec![0.0], vec![1.0], 0.0, 1.0).unwrap();
        let err = MixingMeasure::new_true(Family::Gaussian, vec![c.clone(), c]).unwrap_err();
        match err {
            Error::Assumptions(v) => assert_eq!(
                v,
                vec![
                    Assumption::Identifiability,
                    Assumption::DistinctExperts,
                    Assumption::InputDependentGating
                ]
            ),
            e => panic!("unexpected {e}"),
        }
        assert!(Component::new(0.0, vec![0.0], vec![0.0], 0.0, 0.0).is_err());
        assert!(Family::student_t(2.0).is_err());
    }

    #[test]
    fn sampling_contract() {
        let g = MixingMeasure::benchmark_truth();
        let unit = UniformBox::unit(1);
        assert!(g.sample_dataset(1, 0, &unit, 1).is_err());
        let a = g.sample_dataset(1, 500, &unit, 42).unwrap();
        let b = g.sample_dataset(1, 500, &unit, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, g.sample_dataset(1, 500, &unit, 43).unwrap());

        let data = g.sample_dataset(1, 10_000, &unit, 3).unwrap();
        let near: Vec<f64> = data
            .xs()
            .zip(data.y())
            .filter(|(x, _)| (0.49..=0.51).contains(&x[0]))
            .map(|(_, &y)| y)
            .collect();
        assert!(near.len() > 100);
        let mean = near.iter().sum::<f64>() / near.len() as f64;
        assert!((mean - 5.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn sampling_rejects_invalid_truth() {
        let c0 = Component::new(0.0, vec![1.0], vec![1.0], 0.0, 1.0).unwrap();
        let c1 = Component::new(0.5, vec![0.0], vec![2.0], 0.0, 1.0).unwrap();
        let g = MixingMeasure::new(Family::Gaussian, vec![c0, c1]).unwrap();
        let err = g.sample_dataset(1, 10, &UniformBox::unit(1), 1).unwrap_err();
        assert!(err.to_string().contains("U.2"), "{err}");
    }

    #[test]
    fn text_document_roundtrip() {
        let g = MixingMeasure::new(
            Family::student_t(5.5).unwrap(),
            vec![
                Component::new(-8.1, vec![25.0, 0.1], vec![-20.0, 1.0 / 3.0], 15.0, 0.3).unwrap(),
                Component::new(0.0, vec![0.0, 0.0], vec![20.0, 1e-300], -5.0, 0.4).unwrap(),
            ],
        )
        .unwrap();
        let text = g.to_text();
        assert!(text.starts_with("family=student-t:5.5000000000000000e0 d=2 k=2\n"));
        assert_eq!(MixingMeasure::from_text(&text).unwrap(), g);
        assert!(MixingMeasure::from_text("family=gaussian d=1 k=2\n0 0 0 0 1\n").is_err());
        assert!(MixingMeasure::from_text("family=gaussian d=1 k=1\n0 0 0 1\n").is_err());
    }

    #[test]
    fn dataset_tsv_roundtrip() {
        let g = MixingMeasure::benchmark_truth();
        let data = g.sample_dataset(2, 50, &UniformBox::unit(1), 9).unwrap();
        let back = Dataset::from_tsv(&data.to_tsv()).unwrap();
        assert_eq!(back.x_flat(), data.x_flat());
        assert_eq!(back.y(), data.y());
    }

    fn gaussian_measure(k: usize, d: usize) -> impl Strategy<Value = MixingMeasure> {
        prop::collection::vec(
            (
                -3.0..3.0f64,
                prop::collection::vec(-5.0..5.0f64, d),
                prop::collection::vec(-5.0..5.0f64, d),
                -5.0..5.0f64,
                0.2..2.0f64,
            ),
            k,
        )
        .prop_map(|cs| {
            let comps = cs
                .into_iter()
                .map(|(b0, b1, a, b, s)| Component::new(b0, b1, a, b, s).unwrap())
                .collect();
            MixingMeasure::new(Family::Gaussian, comps).unwrap()
        })
    }

    proptest! {
        #[test]
        fn gate_normalized_with_k_nonzeros(g in gaussian_measure(4, 2), x in prop::collection::vec(-1.0..1.0f64, 2), top_k in 1usize..=4) {
            let out = g.gate_weights(&x, top_k).unwrap();
            let sum: f64 = out.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert_eq!(out.selected.len(), top_k);
            for (i, &w) in out.weights.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&w));
                // Selected weights are strictly positive here: logits are bounded well inside exp's range.
                prop_assert_eq!(out.selected.contains(&i), w > 0.0);
            }
        }

        #[test]
        fn gate_permutation_equivariant(g in gaussian_measure(4, 1), x in -1.0..1.0f64, top_k in 1usize..=4) {
            let perm = [2usize, 0, 3, 1];
            let p = g.permuted(&perm).unwrap();
            let w = g.gate_weights(&[x], top_k).unwrap().weights;
            let wp = p.gate_weights(&[x], top_k).unwrap().weights;
            for (i, &pi) in perm.iter().enumerate() {
                prop_assert!((wp[i] - w[pi]).abs() <= 1e-12);
            }
        }

        #[test]
        fn gate_shift_invariant(g in gaussian_measure(3, 1), x in 0.1..1.0f64, shift in -4.0..4.0f64, top_k in 1usize..=3) {
            // Adding the same slope to every component adds shift*x to every logit.
            let s = g.shift_gating(0.0, &[shift]);
            let a = g.gate_weights(&[x], top_k).unwrap();
            let b = s.gate_weights(&[x], top_k).unwrap();
            prop_assert_eq!(&a.selected, &b.selected);
            for (p, q) in a.weights.iter().zip(&b.weights) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }

        #[test]
        fn log_density_consistent(g in gaussian_measure(3, 1), x in 0.0..1.0f64, y in -8.0..8.0f64, top_k in 1usize..=3) {
            let ld = g.log_conditional_density(top_k, &[x], y).unwrap();
            let d = g.conditional_density(top_k, &[x], y).unwrap();
            prop_assume!(ld > -600.0);
            prop_assert!((ld.exp() - d).abs() <= 1e-10 * d);
            let gate = g.gate_weights(&[x], top_k).unwrap();
            let direct: f64 = gate.selected.iter().map(|&i| gate.weights[i] * Family::Gaussian.density(&g.component(i).expert, &[x], y)).sum();
            prop_assert!((direct - d).abs() <= 1e-10 * d.max(1e-300));
        }

        #[test]
        fn density_integrates_to_one(g in gaussian_measure(3, 1), x in 0.0..1.0f64, top_k in 1usize..=3, fam in 0usize..3) {
            let family = [Family::Gaussian, Family::Laplace, Family::StudentT { dof: 5.0 }][fam];
            let g = g.with_family(family);
            // Composite Simpson on a wide grid; t(5) tails need the extra width and
            // the Laplace kink needs a finer step.
            let (lo, hi, n) = match fam {
                0 => (-60.0, 60.0, 40_000),
                1 => (-60.0, 60.0, 400_000),
                _ => (-3000.0, 3000.0, 600_000),
            };
            let h = (hi - lo) / n as f64;
            let ys: Vec<f64> = (0..=n).map(|i| lo + h * i as f64).collect();
            let f = g.conditional_density_grid(top_k, &[x], &ys).unwrap();
            let mut s = f[0] + f[n];
            for (i, v) in f.iter().enumerate().take(n).skip(1) {
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * v;
            }
            let integral = s * h / 3.0;
            prop_assert!((integral - 1.0).abs() <= 1e-6, "integral {}", integral);
        }
    }
}
