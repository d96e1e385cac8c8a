//! Input-space regions induced by the top-K gate.
//!
//! A region is identified by the set of experts that win the ranking of
//! `beta1 . x` there. Region masses are estimated by Monte Carlo over fixed-size
//! chunks, each with its own derived seed, so estimates do not depend on the
//! thread count.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{check_top_k, topk_into, MixingMeasure, UniformBox};
use crate::rng::{derive_seed, rng_from_seed};
use crate::voronoi::VoronoiAssignment;

const MC_CHUNK: usize = 4096;
const MAX_REGIONS: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct RegionSpec {
    pub selected: Vec<usize>,
    pub complement: Vec<usize>,
}

impl RegionSpec {
    pub fn new(mut selected: Vec<usize>, k: usize) -> Result<Self> {
        selected.sort_unstable();
        selected.dedup();
        if selected.is_empty() || selected.len() > k || selected.iter().any(|&i| i >= k) {
            return Err(Error::invalid(format!(
                "selected set must be a nonempty subset of 0..{k}"
            )));
        }
        let complement = (0..k).filter(|i| selected.binary_search(i).is_err()).collect();
        Ok(RegionSpec { selected, complement })
    }

    pub fn contains(&self, g: &MixingMeasure, x: &[f64]) -> bool {
        let logits = g.gate_logits(x);
        self.selected
            .iter()
            .all(|&i| self.complement.iter().all(|&j| logits[i] >= logits[j]))
    }
}

/// Region whose selected set is the top-K of `beta1 . x`.
pub fn region_of(g: &MixingMeasure, x: &[f64], top_k: usize) -> Result<RegionSpec> {
    if x.len() != g.dim() {
        return Err(Error::invalid("input dimension differs from the measure's"));
    }
    check_top_k(top_k, g.order())?;
    let mut sel = Vec::with_capacity(top_k);
    topk_into(&g.gate_logits(x), top_k, &mut sel);
    RegionSpec::new(sel, g.order())
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// All `top_k`-subsets of `0..k` in lexicographic order.
pub fn k_subsets(k: usize, top_k: usize) -> Result<Vec<Vec<usize>>> {
    check_top_k(top_k, k)?;
    if binomial(k, top_k) > MAX_REGIONS {
        return Err(Error::invalid(format!(
            "C({k}, {top_k}) exceeds the enumeration limit of {MAX_REGIONS}"
        )));
    }
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..top_k).collect();
    loop {
        out.push(cur.clone());
        // Advance the rightmost index that can still move.
        let Some(pos) = (0..top_k).rev().find(|&p| cur[p] < k - top_k + p) else {
            break;
        };
        cur[pos] += 1;
        for q in pos + 1..top_k {
            cur[q] = cur[q - 1] + 1;
        }
    }
    Ok(out)
}

pub fn enumerate_regions(k: usize, top_k: usize) -> Result<Vec<RegionSpec>> {
    k_subsets(k, top_k)?
        .into_iter()
        .map(|s| RegionSpec::new(s, k))
        .collect()
}

/// Runs `f` over `n_mc` inputs drawn in fixed-size chunks and sums the per-chunk results.
fn mc_count<F>(sampler: &UniformBox, n_mc: usize, seed: u64, f: F) -> u64
where
    F: Fn(&[f64]) -> bool + Sync,
{
    let chunks = n_mc.div_ceil(MC_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(seed, &[c as u64]));
            let len = MC_CHUNK.min(n_mc - c * MC_CHUNK);
            let mut x = vec![0.0; sampler.dim()];
            let mut hits = 0u64;
            for _ in 0..len {
                sampler.sample_into(&mut rng, &mut x);
                hits += f(&x) as u64;
            }
            hits
        })
        .sum()
}

/// Monte-Carlo estimate of `P(X in region)` for `X ~ sampler`.
pub fn region_mass(
    g: &MixingMeasure,
    spec: &RegionSpec,
    top_k: usize,
    sampler: &UniformBox,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be >= 1"));
    }
    check_top_k(top_k, g.order())?;
    if spec.selected.len() != top_k || spec.selected.len() + spec.complement.len() != g.order() {
        return Err(Error::invalid("region spec does not match the measure and K"));
    }
    let hits = mc_count(sampler, n_mc, seed, |x| {
        let mut sel = Vec::with_capacity(top_k);
        topk_into(&g.gate_logits(x), top_k, &mut sel);
        sel == spec.selected
    });
    Ok(hits as f64 / n_mc as f64)
}

/// Masses of every region, in [`enumerate_regions`] order, from one Monte-Carlo pass.
pub fn region_masses(
    g: &MixingMeasure,
    top_k: usize,
    sampler: &UniformBox,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<(RegionSpec, f64)>> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be >= 1"));
    }
    let regions = enumerate_regions(g.order(), top_k)?;
    let chunks = n_mc.div_ceil(MC_CHUNK);
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(seed, &[c as u64]));
            let len = MC_CHUNK.min(n_mc - c * MC_CHUNK);
            let mut x = vec![0.0; sampler.dim()];
            let mut sel = Vec::with_capacity(top_k);
            let mut counts = vec![0u64; regions.len()];
            for _ in 0..len {
                sampler.sample_into(&mut rng, &mut x);
                topk_into(&g.gate_logits(&x), top_k, &mut sel);
                let idx = regions
                    .binary_search_by(|r| r.selected.cmp(&sel))
                    .expect("every selection is an enumerated region");
                counts[idx] += 1;
            }
            counts
        })
        .reduce(
            || vec![0u64; regions.len()],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(p, q)| *p += q);
                a
            },
        );
    Ok(regions
        .into_iter()
        .zip(counts)
        .map(|(r, c)| (r, c as f64 / n_mc as f64))
        .collect())
}

/// A region is treated as (numerically) measure-zero when its estimated mass is below `2 / n_mc`.
pub fn is_negligible(mass: f64, n_mc: usize) -> bool {
    mass < 2.0 / n_mc as f64
}

/// Selected sets of the regions with non-negligible mass.
pub fn positive_mass_subsets(
    g: &MixingMeasure,
    top_k: usize,
    sampler: &UniformBox,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    Ok(region_masses(g, top_k, sampler, n_mc, seed)?
        .into_iter()
        .filter(|(_, m)| !is_negligible(*m, n_mc))
        .map(|(r, _)| r.selected)
        .collect())
}

/// Fraction of sampled inputs at which the fitted top-`fit_k` selection equals
/// the union of the Voronoi cells of the true top-`true_k` selection. Without
/// an assignment, true component `j` corresponds to fitted component `j`.
#[allow(clippy::too_many_arguments)]
pub fn partition_match_rate(
    truth: &MixingMeasure,
    fit: &MixingMeasure,
    assignment: Option<&VoronoiAssignment>,
    true_k: usize,
    fit_k: usize,
    sampler: &UniformBox,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be >= 1"));
    }
    if truth.dim() != fit.dim() || sampler.dim() != truth.dim() {
        return Err(Error::invalid("dimension mismatch between measures and sampler"));
    }
    check_top_k(true_k, truth.order())?;
    check_top_k(fit_k, fit.order())?;
    let identity: Vec<Vec<usize>>;
    let cells: &[Vec<usize>] = match assignment {
        Some(a) => {
            if a.cells.len() != truth.order() {
                return Err(Error::invalid(
                    "assignment has a different number of cells than the truth's order",
                ));
            }
            &a.cells
        }
        None => {
            if truth.order() != fit.order() {
                return Err(Error::invalid(
                    "identity matching needs equal orders; pass an assignment",
                ));
            }
            identity = (0..truth.order()).map(|j| vec![j]).collect();
            &identity
        }
    };
    let hits = mc_count(sampler, n_mc, seed, |x| {
        let mut sel_true = Vec::with_capacity(true_k);
        topk_into(&truth.gate_logits(x), true_k, &mut sel_true);
        let mut expected: Vec<usize> = sel_true.iter().flat_map(|&j| cells[j].iter().copied()).collect();
        expected.sort_unstable();
        let mut sel_fit = Vec::with_capacity(fit_k);
        topk_into(&fit.gate_logits(x), fit_k, &mut sel_fit);
        sel_fit == expected
    });
    Ok(hits as f64 / n_mc as f64)
}

/// Copy of `g` with every gating slope moved by a random vector of norm `eta`.
pub fn perturb_gating_slopes(g: &MixingMeasure, eta: f64, seed: u64) -> MixingMeasure {
    let mut rng = rng_from_seed(seed);
    let comps = g
        .components()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            let dir: Vec<f64> = (0..g.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (b, u) in c.gate.beta1.iter_mut().zip(&dir) {
                *b += eta * u / norm;
            }
            c
        })
        .collect();
    MixingMeasure::new(g.family(), comps).expect("perturbation keeps parameters finite")
}

#[derive(Debug, Clone, Serialize)]
pub struct EtaRow {
    pub eta: f64,
    pub match_rate: f64,
}

/// Exact-specified partition match rate for gating slopes perturbed at each `eta`.
pub fn eta_sweep(
    truth: &MixingMeasure,
    top_k: usize,
    etas: &[f64],
    sampler: &UniformBox,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<EtaRow>> {
    etas.iter()
        .enumerate()
        .map(|(i, &eta)| {
            let fit = perturb_gating_slopes(truth, eta, derive_seed(seed, &[i as u64, 1]));
            let rate = partition_match_rate(
                truth,
                &fit,
                None,
                top_k,
                top_k,
                sampler,
                n_mc,
                derive_seed(seed, &[i as u64, 2]),
            )?;
            Ok(EtaRow { eta, match_rate: rate })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Component, Family};

    fn two(b1: f64, b2: f64) -> MixingMeasure {
        MixingMeasure::new(
            Family::Gaussian,
            vec![
                Component::new(0.0, vec![b1], vec![1.0], 0.0, 1.0).unwrap(),
                Component::new(0.0, vec![b2], vec![-1.0], 0.0, 1.0).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn region_of_examples() {
        let g = MixingMeasure::benchmark_truth();
        assert_eq!(region_of(&g, &[0.5], 1).unwrap().selected, vec![0]);
        let flat = MixingMeasure::new(
            Family::Gaussian,
            (0..4)
                .map(|i| Component::new(0.0, vec![1.0], vec![i as f64], 0.0, 1.0).unwrap())
                .collect(),
        )
        .unwrap();
        assert_eq!(region_of(&flat, &[0.3], 2).unwrap().selected, vec![0, 1]);
        assert_eq!(region_of(&two(1.0, -1.0), &[-0.5], 1).unwrap().selected, vec![1]);
        let r = region_of(&g, &[0.5], 1).unwrap();
        assert!(r.contains(&g, &[0.5]));
        assert_eq!(r.complement, vec![1]);
    }

    #[test]
    fn enumerate_examples() {
        let sel = |k, kk| -> Vec<Vec<usize>> {
            enumerate_regions(k, kk)
                .unwrap()
                .into_iter()
                .map(|r| r.selected)
                .collect()
        };
        assert_eq!(sel(3, 1), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(sel(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(sel(4, 2).len(), 6);
        let all = sel(9, 4);
        assert_eq!(all.len() as u128, binomial(9, 4));
        let mut dedup = all.clone();
        dedup.dedup();
        assert_eq!(dedup, all);
        assert!(enumerate_regions(40, 20).is_err());
        assert!(enumerate_regions(3, 0).is_err());
    }

    #[test]
    fn region_mass_examples() {
        let unit = UniformBox::unit(1);
        let g = MixingMeasure::benchmark_truth();
        let r0 = RegionSpec::new(vec![0], 2).unwrap();
        let r1 = RegionSpec::new(vec![1], 2).unwrap();
        let m0 = region_mass(&g, &r0, 1, &unit, 20_000, 1).unwrap();
        let m1 = region_mass(&g, &r1, 1, &unit, 20_000, 1).unwrap();
        assert!(m0 > 0.999 && m1 < 1e-3);
        assert!(is_negligible(m1, 20_000));

        let single = MixingMeasure::new(
            Family::Gaussian,
            vec![Component::new(0.0, vec![0.0], vec![1.0], 0.0, 1.0).unwrap()],
        )
        .unwrap();
        assert_eq!(
            region_mass(&single, &RegionSpec::new(vec![0], 1).unwrap(), 1, &unit, 100, 3).unwrap(),
            1.0
        );

        let sym = UniformBox::new(vec![(-1.0, 1.0)]).unwrap();
        let masses = region_masses(&two(1.0, -1.0), 1, &sym, 20_000, 5).unwrap();
        for (_, m) in &masses {
            assert!((m - 0.5).abs() < 0.02, "{m}");
        }
        let direct = region_mass(&two(1.0, -1.0), &masses[0].0, 1, &sym, 20_000, 5).unwrap();
        assert_eq!(direct, masses[0].1);
    }

    #[test]
    fn match_rate_examples() {
        let unit = UniformBox::unit(1);
        let g = MixingMeasure::benchmark_truth();
        assert_eq!(partition_match_rate(&g, &g, None, 1, 1, &unit, 10_000, 2).unwrap(), 1.0);
        let tiny = perturb_gating_slopes(&g, 1e-6, 4);
        assert_eq!(
            partition_match_rate(&g, &tiny, None, 1, 1, &unit, 10_000, 2).unwrap(),
            1.0
        );
        let flipped = MixingMeasure::new(
            Family::Gaussian,
            vec![
                Component::new(-8.0, vec![-25.0], vec![-20.0], 15.0, 0.3).unwrap(),
                g.component(1).clone(),
            ],
        )
        .unwrap();
        assert!(partition_match_rate(&g, &flipped, None, 1, 1, &unit, 10_000, 2).unwrap() < 1e-3);
    }

    #[test]
    fn mc_is_chunking_independent_of_threads() {
        let unit = UniformBox::unit(1);
        let g = two(1.0, 0.5);
        let spec = RegionSpec::new(vec![0], 2).unwrap();
        let a = region_mass(&g, &spec, 1, &unit, 10_001, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| region_mass(&g, &spec, 1, &unit, 10_001, 9).unwrap());
        assert_eq!(a, b);
    }
}
