//! Exact and analytic references for the simulators.
//!
//! [`exact_final_size`] solves the synchronous-step epidemic as an absorbing
//! Markov chain on `{S, I, R}^N` for networks of at most ten nodes. It is a
//! valid reference for Naive SIR's final size because the final infected set
//! depends only on per-node infectious periods and per-step transmission
//! coins, not on the order in which the queue processes nodes within a step.

use std::collections::HashMap;
use std::io::{self, Write};

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::distributions::{transmissibility, EpidemicParams};
use crate::graph::Network;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("exact enumeration supports at most {max} nodes, network has {got}")]
    TooManyNodes { max: usize, got: usize },
    #[error("invalid seeds: {0}")]
    InvalidSeeds(String),
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("chi-square test needs at least {needed} observations, got {got}")]
    TooFewObservations { needed: u64, got: u64 },
    #[error("histogram and expected distribution are incompatible: {0}")]
    Incompatible(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

pub const EXACT_MAX_NODES: usize = 10;

/// Exact distribution of the final number of infected nodes; `masses[s]` is
/// the probability of final size `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalSizePmf {
    pub masses: Vec<f64>,
}

impl FinalSizePmf {
    pub fn mass(&self, size: usize) -> f64 {
        self.masses.get(size).copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .map(|(s, m)| s as f64 * m)
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Two-column `size,probability` export, omitting zero masses.
    pub fn write_csv(&self, mut sink: impl Write) -> io::Result<()> {
        writeln!(sink, "size,probability")?;
        for (s, m) in self.masses.iter().enumerate() {
            if *m > 0.0 {
                writeln!(sink, "{s},{m:e}")?;
            }
        }
        Ok(())
    }
}

/// Final-size distribution by exhaustive enumeration of the synchronous
/// chain. In each step every infected node tries each susceptible neighbor
/// with probability `p` and then recovers with probability `q`.
pub fn exact_final_size(
    net: &Network,
    params: EpidemicParams,
    seeds: &[usize],
) -> Result<FinalSizePmf> {
    let n = net.node_count();
    if n > EXACT_MAX_NODES {
        return Err(AnalysisError::TooManyNodes {
            max: EXACT_MAX_NODES,
            got: n,
        });
    }
    if seeds.is_empty() || seeds.iter().any(|&s| s >= n) {
        return Err(AnalysisError::InvalidSeeds(format!(
            "{seeds:?} for {n} nodes"
        )));
    }
    let (p, q) = (params.p(), params.q());
    let neighbor_mask: Vec<u16> = (0..n)
        .map(|u| net.neighbors(u).iter().fold(0u16, |m, &v| m | (1 << v)))
        .collect();
    let all: u16 = if n == 16 { u16::MAX } else { (1u16 << n) - 1 };
    let initial_i = seeds.iter().fold(0u16, |m, &s| m | (1 << s));
    let initial_s = all & !initial_i;

    // Potential 2|S| + |I| drops strictly on every non-self-loop transition,
    // so processing levels from high to low visits states in topological order.
    let potential = |s: u16, i: u16| 2 * s.count_ones() as usize + i.count_ones() as usize;
    let mut levels: Vec<HashMap<(u16, u16), f64>> = vec![HashMap::new(); 2 * n + 1];
    levels[potential(initial_s, initial_i)].insert((initial_s, initial_i), 1.0);
    let mut masses = vec![0.0; n + 1];

    for level in (0..levels.len()).rev() {
        let states = std::mem::take(&mut levels[level]);
        for ((s, i), mass) in states {
            if i == 0 {
                masses[n - s.count_ones() as usize] += mass;
                continue;
            }
            // Susceptible nodes exposed to at least one infected neighbor.
            let mut exposed: Vec<(u16, f64)> = Vec::new();
            for (v, &mask) in neighbor_mask.iter().enumerate().take(n) {
                let bit = 1u16 << v;
                if s & bit != 0 {
                    let contacts = (mask & i).count_ones() as i32;
                    if contacts > 0 {
                        exposed.push((bit, 1.0 - (1.0 - p).powi(contacts)));
                    }
                }
            }
            let infected: Vec<u16> = (0..n).map(|v| 1u16 << v).filter(|b| i & b != 0).collect();
            let stay: f64 = exposed.iter().map(|(_, pv)| 1.0 - pv).product::<f64>()
                * (1.0 - q).powi(infected.len() as i32);
            let leave = 1.0 - stay;
            for a in 0..(1u32 << exposed.len()) {
                let mut new_inf = 0u16;
                let mut pa = 1.0;
                for (j, (bit, pv)) in exposed.iter().enumerate() {
                    if a & (1 << j) != 0 {
                        new_inf |= bit;
                        pa *= pv;
                    } else {
                        pa *= 1.0 - pv;
                    }
                }
                if pa == 0.0 {
                    continue;
                }
                for b in 0..(1u32 << infected.len()) {
                    if a == 0 && b == 0 {
                        continue;
                    }
                    let mut recovering = 0u16;
                    let mut pb = 1.0;
                    for (j, bit) in infected.iter().enumerate() {
                        if b & (1 << j) != 0 {
                            recovering |= bit;
                            pb *= q;
                        } else {
                            pb *= 1.0 - q;
                        }
                    }
                    let prob = pa * pb;
                    if prob == 0.0 {
                        continue;
                    }
                    let s2 = s & !new_inf;
                    let i2 = (i & !recovering) | new_inf;
                    *levels[potential(s2, i2)].entry((s2, i2)).or_insert(0.0) +=
                        mass * prob / leave;
                }
            }
        }
    }
    Ok(FinalSizePmf { masses })
}

/// Expected final size and duration bounds on a complete m-ary tree seeded
/// at its root.
///
/// Two readings are reported. The `*_closed_form` values evaluate
/// `([m P1]^depth - 1) / (m P1 - 1)`; the `*_unrolled` values unroll the
/// recurrence `E[T_d] <= 1/q + m P1 E[T_{d-1}]` from `E[T_0] = 1/q`, giving
/// `sum_{i=0}^{depth} (m P1)^i`. The unrolled form is the one that is exact
/// for the expected size (level `d` holds `m^d` nodes each infected with
/// probability `P1^d`) and a valid upper bound for the duration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeBound {
    pub m: usize,
    pub depth: usize,
    pub expected_size_closed_form: f64,
    pub expected_size_unrolled: f64,
    pub duration_bound_closed_form: f64,
    pub duration_bound_unrolled: f64,
}

fn geometric_sum(ratio: f64, terms: usize) -> f64 {
    if (ratio - 1.0).abs() < 1e-12 {
        terms as f64
    } else {
        (ratio.powi(terms as i32) - 1.0) / (ratio - 1.0)
    }
}

pub fn tree_bound(m: usize, depth: usize, params: EpidemicParams) -> Result<TreeBound> {
    if m == 0 {
        return Err(AnalysisError::InvalidTree("m must be at least 1".into()));
    }
    let ratio = m as f64 * transmissibility(params);
    let closed = geometric_sum(ratio, depth);
    let unrolled = geometric_sum(ratio, depth + 1);
    let inv_q = 1.0 / params.q();
    Ok(TreeBound {
        m,
        depth,
        expected_size_closed_form: closed,
        expected_size_unrolled: unrolled,
        duration_bound_closed_form: inv_q * closed,
        duration_bound_unrolled: inv_q * unrolled,
    })
}

/// `(closed_form, unrolled)` expected number of infected nodes.
pub fn tree_expected_size(m: usize, depth: usize, params: EpidemicParams) -> Result<(f64, f64)> {
    tree_bound(m, depth, params).map(|b| (b.expected_size_closed_form, b.expected_size_unrolled))
}

/// `(closed_form, unrolled)` bound on the expected epidemic duration.
pub fn tree_duration_bound(m: usize, depth: usize, params: EpidemicParams) -> Result<(f64, f64)> {
    tree_bound(m, depth, params).map(|b| (b.duration_bound_closed_form, b.duration_bound_unrolled))
}

/// Minimum expected count per bin; smaller bins are pooled.
pub const MIN_EXPECTED_COUNT: f64 = 5.0;
/// Minimum sample size accepted by the tests.
pub const MIN_OBSERVATIONS: u64 = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub passed: bool,
    /// Set when the test is degenerate, e.g. everything pooled into one bin.
    pub warning: Option<String>,
}

impl ChiSquareReport {
    fn evaluate(statistic: f64, dof: usize, alpha: f64) -> Self {
        if dof == 0 {
            return Self {
                statistic,
                degrees_of_freedom: 0,
                p_value: 1.0,
                alpha,
                passed: true,
                warning: Some("single bin after pooling; test is vacuous".into()),
            };
        }
        let p_value = if statistic.is_infinite() {
            0.0
        } else {
            ChiSquared::new(dof as f64).expect("dof > 0").sf(statistic)
        };
        Self {
            statistic,
            degrees_of_freedom: dof,
            p_value,
            alpha,
            passed: p_value >= alpha,
            warning: None,
        }
    }
}

/// Merges adjacent bins (left to right) until each group's weight reaches
/// `min_weight`; a light remainder joins the last group.
fn pool_bins(weights: &[f64], min_weight: f64) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        current.push(i);
        acc += w;
        if acc >= min_weight {
            groups.push(std::mem::take(&mut current));
            acc = 0.0;
        }
    }
    if !current.is_empty() {
        match groups.last_mut() {
            Some(last) => last.extend(current),
            None => groups.push(current),
        }
    }
    groups
}

/// Goodness of fit of `observed[s]` counts against probabilities
/// `expected[s]`. Observations in a bin of zero expected probability fail
/// the test outright.
pub fn chi_square_gof(observed: &[u64], expected: &[f64], alpha: f64) -> Result<ChiSquareReport> {
    let total: u64 = observed.iter().sum();
    if total < MIN_OBSERVATIONS {
        return Err(AnalysisError::TooFewObservations {
            needed: MIN_OBSERVATIONS,
            got: total,
        });
    }
    let bins = observed.len().max(expected.len());
    let obs = |i: usize| observed.get(i).copied().unwrap_or(0) as f64;
    let exp = |i: usize| expected.get(i).copied().unwrap_or(0.0) * total as f64;
    if (0..bins).any(|i| exp(i) == 0.0 && obs(i) > 0.0) {
        return Ok(ChiSquareReport::evaluate(
            f64::INFINITY,
            bins.max(2) - 1,
            alpha,
        ));
    }
    let support: Vec<usize> = (0..bins).filter(|&i| exp(i) > 0.0).collect();
    let weights: Vec<f64> = support.iter().map(|&i| exp(i)).collect();
    let groups = pool_bins(&weights, MIN_EXPECTED_COUNT);
    let statistic = groups
        .iter()
        .map(|g| {
            let o: f64 = g.iter().map(|&j| obs(support[j])).sum();
            let e: f64 = g.iter().map(|&j| exp(support[j])).sum();
            (o - e) * (o - e) / e
        })
        .sum();
    Ok(ChiSquareReport::evaluate(
        statistic,
        groups.len() - 1,
        alpha,
    ))
}

/// Two-sample test that two histograms come from the same distribution.
/// Bins with fewer than [`MIN_EXPECTED_COUNT`] combined observations are
/// pooled.
pub fn chi_square_two_sample(a: &[u64], b: &[u64], alpha: f64) -> Result<ChiSquareReport> {
    let (ra, rb): (u64, u64) = (a.iter().sum(), b.iter().sum());
    if ra.min(rb) < MIN_OBSERVATIONS {
        return Err(AnalysisError::TooFewObservations {
            needed: MIN_OBSERVATIONS,
            got: ra.min(rb),
        });
    }
    let bins = a.len().max(b.len());
    let get = |h: &[u64], i: usize| h.get(i).copied().unwrap_or(0) as f64;
    let support: Vec<usize> = (0..bins).filter(|&i| get(a, i) + get(b, i) > 0.0).collect();
    let weights: Vec<f64> = support.iter().map(|&i| get(a, i) + get(b, i)).collect();
    let groups = pool_bins(&weights, MIN_EXPECTED_COUNT);
    let (ka, kb) = (
        ((rb as f64) / (ra as f64)).sqrt(),
        ((ra as f64) / (rb as f64)).sqrt(),
    );
    let statistic = groups
        .iter()
        .map(|g| {
            let x: f64 = g.iter().map(|&j| get(a, support[j])).sum();
            let y: f64 = g.iter().map(|&j| get(b, support[j])).sum();
            let d = ka * x - kb * y;
            d * d / (x + y)
        })
        .sum();
    Ok(ChiSquareReport::evaluate(
        statistic,
        groups.len().saturating_sub(1),
        alpha,
    ))
}

/// Counts of `values` as a histogram indexed by value.
pub fn histogram(values: impl IntoIterator<Item = usize>) -> Vec<u64> {
    let mut h = Vec::new();
    for v in values {
        if v >= h.len() {
            h.resize(v + 1, 0);
        }
        h[v] += 1;
    }
    h
}
