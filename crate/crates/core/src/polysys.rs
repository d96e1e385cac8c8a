//! The polynomial system that governs the slow parameter rates of over-specified
//! Gaussian experts.
//!
//! Unknowns for `m` fitted components in `d` dimensions are `z1_i, z2_i` (vectors)
//! and `z3_i, z4_i, z5_i` (scalars). For every multi-index pair `(eta1, eta2)`
//! with `|eta1| <= r`, `eta2 <= r - |eta1|`, `|eta1| + eta2 >= 1` the equation is
//!
//! ```text
//! sum_i sum_{alpha in J(eta1, eta2)} z5_i^2 z1_i^a1 z2_i^a2 z3_i^a3 z4_i^a4 / (a1! a2! a3! a4!) = 0
//! ```
//!
//! `rbar(m)` is the smallest `r` for which no solution with every `z5_i != 0`
//! and some `z3_i != 0` exists.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Maximum absolute residual accepted as a solution.
pub const VERIFY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PolySystemInstance {
    pub m: usize,
    pub d: usize,
    pub r: u32,
}

impl PolySystemInstance {
    pub fn new(m: usize, d: usize, r: u32) -> Result<Self> {
        if m < 2 || d < 1 || r < 1 {
            return Err(Error::invalid(format!(
                "need m >= 2, d >= 1, r >= 1 (got m={m}, d={d}, r={r})"
            )));
        }
        Ok(PolySystemInstance { m, d, r })
    }
}

/// Which constraint defines the index set `J(eta1, eta2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum IndexConvention {
    /// `a1 + a2 = eta1`, `a3 + 2 a4 = eta2 - |a2|` (each `sigma` derivative counts
    /// as two location derivatives).
    #[default]
    HeatEquation,
    /// `a1 + a2 = eta1`, `|a2| + a3 + a4 = eta2`.
    Plain,
}

impl std::str::FromStr for IndexConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(IndexConvention::HeatEquation),
            "plain" => Ok(IndexConvention::Plain),
            _ => Err(Error::invalid(format!("unknown index convention `{s}` (heat|plain)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolyCandidate {
    pub z1: Vec<Vec<f64>>,
    pub z2: Vec<Vec<f64>>,
    pub z3: Vec<f64>,
    pub z4: Vec<f64>,
    pub z5: Vec<f64>,
}

impl PolyCandidate {
    pub fn zeros(m: usize, d: usize) -> Self {
        PolyCandidate {
            z1: vec![vec![0.0; d]; m],
            z2: vec![vec![0.0; d]; m],
            z3: vec![0.0; m],
            z4: vec![0.0; m],
            z5: vec![0.0; m],
        }
    }

    /// Two components with `z5 = (1, 1)`, `z3 = (c, -c)`, `z4 = -c^2 / 2`: their
    /// generating functions `exp(z3 t + z4 t^2)` agree with a constant through `t^3`.
    pub fn two_component_witness(c: f64, d: usize) -> Self {
        let mut z = Self::zeros(2, d);
        z.z5 = vec![1.0, 1.0];
        z.z3 = vec![c, -c];
        z.z4 = vec![-0.5 * c * c; 2];
        z
    }

    pub fn m(&self) -> usize {
        self.z5.len()
    }

    pub fn is_nontrivial(&self) -> bool {
        self.z5.iter().all(|&v| v != 0.0) && self.z3.iter().any(|&v| v != 0.0)
    }

    fn check(&self, inst: &PolySystemInstance) -> Result<()> {
        let m = inst.m;
        let ok = self.z3.len() == m
            && self.z4.len() == m
            && self.z5.len() == m
            && self.z1.len() == m
            && self.z2.len() == m
            && self.z1.iter().chain(&self.z2).all(|v| v.len() == inst.d);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("candidate dimensions do not match the instance"))
        }
    }

    fn from_vec(v: &[f64], m: usize, d: usize) -> Self {
        let stride = 2 * d + 3;
        let mut z = Self::zeros(m, d);
        for i in 0..m {
            let s = &v[i * stride..(i + 1) * stride];
            z.z1[i] = s[..d].to_vec();
            z.z2[i] = s[d..2 * d].to_vec();
            z.z3[i] = s[2 * d];
            z.z4[i] = s[2 * d + 1];
            z.z5[i] = s[2 * d + 2];
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Equation {
    pub eta1: Vec<u32>,
    pub eta2: u32,
}

/// Multi-indices of length `d` summing to `total`, first coordinate descending.
fn compositions(total: u32, d: usize) -> Vec<Vec<u32>> {
    if d == 1 {
        return vec![vec![total]];
    }
    (0..=total)
        .rev()
        .flat_map(|first| {
            compositions(total - first, d - 1).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

/// All `(eta1, eta2)` of the system: first the pure `eta1` equations by degree,
/// then the pure `eta2` ones, then the mixed ones by total degree.
pub fn enumerate_equations(inst: &PolySystemInstance) -> Vec<Equation> {
    let r = inst.r;
    let mut out = Vec::new();
    for deg in 1..=r {
        for eta1 in compositions(deg, inst.d) {
            out.push(Equation { eta1, eta2: 0 });
        }
    }
    for eta2 in 1..=r {
        out.push(Equation {
            eta1: vec![0; inst.d],
            eta2,
        });
    }
    for total in 2..=r {
        for deg1 in 1..total {
            for eta1 in compositions(deg1, inst.d) {
                out.push(Equation {
                    eta1,
                    eta2: total - deg1,
                });
            }
        }
    }
    out
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// Every `alpha2 <= eta1` componentwise.
fn sub_multi_indices(eta1: &[u32]) -> Vec<Vec<u32>> {
    eta1.iter().fold(vec![Vec::new()], |acc, &e| {
        acc.into_iter()
            .flat_map(|prefix| {
                (0..=e).map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// Left-hand side of equation `(eta1, eta2)` at `z`.
pub fn residual(
    inst: &PolySystemInstance,
    z: &PolyCandidate,
    eta1: &[u32],
    eta2: u32,
    conv: IndexConvention,
) -> Result<f64> {
    z.check(inst)?;
    if eta1.len() != inst.d {
        return Err(Error::invalid("eta1 has the wrong dimension"));
    }
    Ok(residual_unchecked(z, eta1, eta2, conv))
}

fn residual_unchecked(z: &PolyCandidate, eta1: &[u32], eta2: u32, conv: IndexConvention) -> f64 {
    let mut total = 0.0;
    let alpha2s = sub_multi_indices(eta1);
    for i in 0..z.m() {
        let mut inner = 0.0;
        for a2 in &alpha2s {
            let a2_abs: u32 = a2.iter().sum();
            if a2_abs > eta2 {
                continue;
            }
            let rem = eta2 - a2_abs;
            let mut vec_part = 1.0;
            for t in 0..eta1.len() {
                let a1 = eta1[t] - a2[t];
                vec_part *=
                    z.z1[i][t].powi(a1 as i32) * z.z2[i][t].powi(a2[t] as i32) / (factorial(a1) * factorial(a2[t]));
            }
            let pairs: Vec<(u32, u32)> = match conv {
                IndexConvention::HeatEquation => (0..=rem / 2).map(|a4| (rem - 2 * a4, a4)).collect(),
                IndexConvention::Plain => (0..=rem).map(|a4| (rem - a4, a4)).collect(),
            };
            for (a3, a4) in pairs {
                inner += vec_part * z.z3[i].powi(a3 as i32) * z.z4[i].powi(a4 as i32) / (factorial(a3) * factorial(a4));
            }
        }
        total += z.z5[i] * z.z5[i] * inner;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub eta1: Vec<u32>,
    pub eta2: u32,
    pub residual: f64,
}

pub fn residual_table(inst: &PolySystemInstance, z: &PolyCandidate, conv: IndexConvention) -> Result<Vec<ResidualRow>> {
    z.check(inst)?;
    Ok(enumerate_equations(inst)
        .into_iter()
        .map(|e| ResidualRow {
            residual: residual_unchecked(z, &e.eta1, e.eta2, conv),
            eta1: e.eta1,
            eta2: e.eta2,
        })
        .collect())
}

pub fn max_abs_residual(inst: &PolySystemInstance, z: &PolyCandidate, conv: IndexConvention) -> Result<f64> {
    Ok(residual_table(inst, z, conv)?
        .iter()
        .map(|r| r.residual.abs())
        .fold(0.0, f64::max))
}

/// TSV with columns `eta1`, `eta2`, `residual`; `eta1` components joined by commas.
pub fn residual_tsv(rows: &[ResidualRow]) -> String {
    let mut s = String::from("eta1\teta2\tresidual\n");
    for r in rows {
        let eta1: Vec<String> = r.eta1.iter().map(u32::to_string).collect();
        s.push_str(&format!("{}\t{}\t{:.16e}\n", eta1.join(","), r.eta2, r.residual));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchReport {
    /// Verified nontrivial solution, if any restart produced one. Finding none
    /// does not prove the system has no nontrivial solution.
    pub solution: Option<PolyCandidate>,
    pub solution_restart: Option<usize>,
    pub best_max_residual: f64,
    pub restarts: usize,
}

/// Smallest allowed `|z5_i|` relative to the pinned `z5_0 = 1` when declaring a
/// candidate nontrivial; keeps the search away from components that vanish.
const Z5_FLOOR: f64 = 1e-3;
/// Candidates with any coordinate beyond this are treated as escaping to infinity.
const COORD_CAP: f64 = 1e3;

/// Randomized multistart Levenberg-Marquardt on the sum of squared residuals.
///
/// The system is invariant under `z5 -> t z5` and under `z3 -> s z3`,
/// `z4 -> s^2 z4`, `z2 -> s z2`, so every restart pins `z3_0 = 1` and `z5_0 = 1`;
/// any nontrivial solution can be rescaled and relabeled into that slice.
pub fn search_nontrivial(
    inst: &PolySystemInstance,
    restarts: usize,
    seed: u64,
    conv: IndexConvention,
) -> Result<SearchReport> {
    if restarts == 0 {
        return Err(Error::invalid("restarts must be >= 1"));
    }
    let eqs = enumerate_equations(inst);
    let outcomes: Vec<(f64, Option<PolyCandidate>)> = (0..restarts)
        .into_par_iter()
        .map(|r| single_restart(inst, &eqs, derive_seed(seed, &[r as u64]), conv))
        .collect();
    let mut best = f64::INFINITY;
    let mut found: Option<(f64, usize, PolyCandidate)> = None;
    for (r, (res, cand)) in outcomes.into_iter().enumerate() {
        best = best.min(res);
        if let Some(c) = cand {
            if found.as_ref().is_none_or(|(fr, _, _)| res < *fr) {
                found = Some((res, r, c));
            }
        }
    }
    Ok(SearchReport {
        solution_restart: found.as_ref().map(|f| f.1),
        solution: found.map(|f| f.2),
        best_max_residual: best,
        restarts,
    })
}

fn single_restart(
    inst: &PolySystemInstance,
    eqs: &[Equation],
    seed: u64,
    conv: IndexConvention,
) -> (f64, Option<PolyCandidate>) {
    let (m, d) = (inst.m, inst.d);
    let stride = 2 * d + 3;
    let mut rng = rng_from_seed(seed);
    let normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    // Half the restarts start on the z1 = z2 = 0 slice, which is invariant under the iteration.
    let vector_scale = if seed.is_multiple_of(2) { 0.0 } else { 0.5 };
    let mut full = vec![0.0; m * stride];
    for i in 0..m {
        let s = &mut full[i * stride..(i + 1) * stride];
        for v in s[..2 * d].iter_mut() {
            *v = vector_scale * normal.sample(&mut rng);
        }
        s[2 * d] = normal.sample(&mut rng);
        s[2 * d + 1] = normal.sample(&mut rng);
        s[2 * d + 2] = 0.5 + normal.sample(&mut rng).abs();
    }
    full[2 * d] = 1.0;
    full[2 * d + 2] = 1.0;
    let pinned = [2 * d, 2 * d + 2];
    let free: Vec<usize> = (0..full.len()).filter(|i| !pinned.contains(i)).collect();

    let eval = |full: &[f64]| -> DVector<f64> {
        let z = PolyCandidate::from_vec(full, m, d);
        DVector::from_iterator(
            eqs.len(),
            eqs.iter().map(|e| residual_unchecked(&z, &e.eta1, e.eta2, conv)),
        )
    };
    let cost = |r: &DVector<f64>| r.norm_squared();

    let mut res = eval(&full);
    let mut lambda = 1e-3;
    for _ in 0..400 {
        if res.amax() < 1e-14 {
            break;
        }
        let mut jac = DMatrix::zeros(eqs.len(), free.len());
        for (col, &p) in free.iter().enumerate() {
            let h = 1e-6 * full[p].abs().max(1.0);
            let mut plus = full.clone();
            plus[p] += h;
            let mut minus = full.clone();
            minus[p] -= h;
            jac.set_column(col, &((eval(&plus) - eval(&minus)) / (2.0 * h)));
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &res;
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj.clone();
            for i in 0..free.len() {
                a[(i, i)] += lambda * (jtj[(i, i)] + 1.0);
            }
            let Some(step) = a.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = full.clone();
            for (col, &p) in free.iter().enumerate() {
                trial[p] += step[col];
            }
            let trial_res = eval(&trial);
            if trial.iter().all(|v| v.is_finite()) && cost(&trial_res) < cost(&res) {
                full = trial;
                res = trial_res;
                lambda = (lambda * 0.3).max(1e-15);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || full.iter().any(|v| v.abs() > COORD_CAP) {
            break;
        }
    }

    let z = PolyCandidate::from_vec(&full, m, d);
    let max_res = max_abs_residual(inst, &z, conv).unwrap_or(f64::INFINITY);
    let bounded = full.iter().all(|v| v.is_finite() && v.abs() <= COORD_CAP);
    let nontrivial = z.is_nontrivial() && z.z5.iter().all(|v| v.abs() >= Z5_FLOOR);
    let ok = max_res <= VERIFY_TOL && bounded && nontrivial;
    (max_res, ok.then_some(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RbarPolicy {
    /// Only the values established for small cells: `rbar(2) = 4`, `rbar(3) = 6`.
    ExactTable,
    /// `rbar(m) = 2m` for every `m >= 2`.
    Conjecture,
}

impl std::str::FromStr for RbarPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RbarPolicy::ExactTable),
            "conjecture" => Ok(RbarPolicy::Conjecture),
            _ => Err(Error::invalid(format!("unknown rbar policy `{s}` (exact|conjecture)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RbarValue {
    pub value: u32,
    pub conjectural: bool,
}

pub fn rbar(m: usize, policy: RbarPolicy) -> Result<RbarValue> {
    if m < 2 {
        return Err(Error::invalid(format!("rbar is defined for m >= 2, got {m}")));
    }
    match (policy, m) {
        (RbarPolicy::ExactTable, 2) => Ok(RbarValue {
            value: 4,
            conjectural: false,
        }),
        (RbarPolicy::ExactTable, 3) => Ok(RbarValue {
            value: 6,
            conjectural: false,
        }),
        (RbarPolicy::ExactTable, _) => Err(Error::Unsupported(format!(
            "rbar({m}) is not known exactly; use the conjecture policy (rbar(m) = 2m)"
        ))),
        (RbarPolicy::Conjecture, _) => Ok(RbarValue {
            value: 2 * m as u32,
            conjectural: m > 3,
        }),
    }
}
