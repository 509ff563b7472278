//! Distribution of the number of neighbors a single infected node infects
//! over its whole infectious period, and the cumulative tables FastSIR
//! samples from.
//!
//! An infected node stays infectious for `T ~ Geometric(q)` steps
//! (`T >= 1`) and each of its `n` susceptible neighbors is independently
//! infected with probability `1 - (1-p)^T`. Three formulations of
//! `P(X_n = k)` are provided:
//!
//! * [`pmf_direct`]: the closed alternating sum, evaluated in multiple
//!   precision because the terms cancel catastrophically.
//! * [`pmf_series`]: the positive series over the infectious period, safe
//!   in `f64`.
//! * [`pmf_table_recursive`]: the `O(n_max^2)` recursion in `n` and `k`,
//!   used to build [`InfectionCdfTable`]s.

use std::io::{self, Read, Write};

use rug::{Assign, Float};
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

use crate::graph::Network;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("invalid epidemic parameters: {0}")]
    InvalidParams(String),
    #[error("precision of {0} bits is below the 64-bit minimum")]
    InvalidPrecision(u32),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error(
        "precision failure at degree {degree} with {precision_bits} bits ({detail}); \
         rebuild with a higher precision"
    )]
    PrecisionFailure {
        degree: usize,
        precision_bits: u32,
        detail: String,
    },
    #[error("series for P(X_{n} = {k}) did not reach the tail tolerance within {terms} terms")]
    SeriesBudget { n: usize, k: usize, terms: usize },
    #[error("table has no row for degree {0}")]
    MissingDegree(usize),
    #[error("table was built for p={table_p}, q={table_q} but the run uses p={p}, q={q}")]
    ParamsMismatch {
        table_p: f64,
        table_q: f64,
        p: f64,
        q: f64,
    },
    #[error("not a distribution cache file (bad magic)")]
    BadMagic,
    #[error("unsupported cache format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt cache file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Per-step transmission probability `p` and recovery probability `q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpidemicParams {
    p: f64,
    q: f64,
}

impl EpidemicParams {
    /// `q = 0` is rejected: nodes would never recover and the closed form is
    /// singular.
    pub fn new(p: f64, q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(DistError::InvalidParams(format!(
                "p = {p} is not in [0, 1]"
            )));
        }
        if !(q > 0.0 && q <= 1.0) {
            return Err(DistError::InvalidParams(format!(
                "q = {q} is not in (0, 1]"
            )));
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }
}

/// Probability that an infected node ever transmits across one edge,
/// `P(X_1 = 1) = p / (1 - (1-p)(1-q))`.
pub fn transmissibility(params: EpidemicParams) -> f64 {
    let (p, q) = (params.p, params.q);
    if p == 0.0 {
        return 0.0;
    }
    p / (1.0 - (1.0 - p) * (1.0 - q))
}

/// Working precision for the recursive table:
/// `max(min_bits, ceil(bits_per_degree * n) + guard_bits)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionPolicy {
    pub bits_per_degree: f64,
    pub guard_bits: u32,
    pub min_bits: u32,
}

impl PrecisionPolicy {
    /// The empirical `0.8 * degree` rule with a 64-bit floor. It is not
    /// sufficient at low `p`: at `n = 200, p = 0.1` the recursion needs about
    /// 340 bits for 1e-12 accuracy and fails with 160.
    pub const EMPIRICAL: Self = Self {
        bits_per_degree: 0.8,
        guard_bits: 0,
        min_bits: 64,
    };

    /// Fixed working precision regardless of degree.
    pub const fn fixed(bits: u32) -> Self {
        Self {
            bits_per_degree: 0.0,
            guard_bits: bits,
            min_bits: 64,
        }
    }

    pub fn mantissa_bits(&self, n: usize) -> u32 {
        let scaled = (self.bits_per_degree * n as f64).ceil() as u32;
        self.min_bits.max(scaled.saturating_add(self.guard_bits))
    }
}

impl Default for PrecisionPolicy {
    /// Two bits per degree plus 64 guard bits. The recursion amplifies a
    /// rounding error in `P(X_n = 0)` by up to `C(n, k)` and the errors of
    /// earlier rows compound on top of that; measured need is about
    /// `1.6 n + 40` bits for 1e-12 absolute accuracy.
    fn default() -> Self {
        Self {
            bits_per_degree: 2.0,
            guard_bits: 64,
            min_bits: 64,
        }
    }
}

fn check_index(n: usize, k: usize) -> Result<()> {
    if k > n {
        return Err(DistError::IndexOutOfRange(format!(
            "k = {k} exceeds n = {n}"
        )));
    }
    Ok(())
}

/// Point masses for `p = 0` (nobody infected) and `p = 1` (everybody
/// infected in the first step).
fn degenerate_mass(params: EpidemicParams, n: usize, k: usize) -> Option<f64> {
    if params.p == 0.0 {
        Some(if k == 0 { 1.0 } else { 0.0 })
    } else if params.p == 1.0 {
        Some(if k == n { 1.0 } else { 0.0 })
    } else {
        None
    }
}

/// Evaluates `P(X_n = k)` from the alternating-sum closed form at
/// `precision_bits` of working precision, rounded to `f64` on return.
///
/// The sum cancels down from terms of size about `2^k / q` to a result of
/// size `P / C(n, k)`, so roughly `n + k + 50` bits are needed for full
/// `f64` accuracy.
pub fn pmf_direct(n: usize, k: usize, params: EpidemicParams, precision_bits: u32) -> Result<f64> {
    DirectPmf::new(params, n, precision_bits)?.pmf(n, k)
}

/// Reusable evaluator for [`pmf_direct`] that caches the fractions
/// `(1-p)^j / (1 - (1-q)(1-p)^j)` for `j <= n_max`.
pub struct DirectPmf {
    params: EpidemicParams,
    precision_bits: u32,
    q: Float,
    fractions: Vec<Float>,
}

impl DirectPmf {
    pub fn new(params: EpidemicParams, n_max: usize, precision_bits: u32) -> Result<Self> {
        if precision_bits < 64 {
            return Err(DistError::InvalidPrecision(precision_bits));
        }
        let prec = precision_bits;
        let q = Float::with_val(prec, params.q);
        let survive = Float::with_val(prec, 1u32 - &q);
        let a = Float::with_val(prec, 1u32 - Float::with_val(prec, params.p));
        let mut power = Float::with_val(prec, 1u32);
        let mut fractions = Vec::with_capacity(n_max + 1);
        for _ in 0..=n_max {
            let denom = Float::with_val(prec, 1u32 - Float::with_val(prec, &survive * &power));
            fractions.push(Float::with_val(prec, &power / &denom));
            power *= &a;
        }
        Ok(Self {
            params,
            precision_bits,
            q,
            fractions,
        })
    }

    pub fn n_max(&self) -> usize {
        self.fractions.len() - 1
    }

    pub fn pmf(&self, n: usize, k: usize) -> Result<f64> {
        check_index(n, k)?;
        if n > self.n_max() {
            return Err(DistError::IndexOutOfRange(format!(
                "n = {n} exceeds evaluator limit {}",
                self.n_max()
            )));
        }
        if let Some(mass) = degenerate_mass(self.params, n, k) {
            return Ok(mass);
        }
        let prec = self.precision_bits;
        let mut sum = Float::new(prec);
        let mut term = Float::new(prec);
        let mut binom = Float::with_val(prec, 1u32);
        for l in 0..=k {
            term.assign(&binom * &self.fractions[n - k + l]);
            if l % 2 == 0 {
                sum += &term;
            } else {
                sum -= &term;
            }
            binom *= (k - l) as u32;
            binom /= (l + 1) as u32;
        }
        let mut outer = Float::with_val(prec, 1u32);
        for i in 0..k {
            outer *= (n - i) as u32;
            outer /= (i + 1) as u32;
        }
        outer *= &self.q;
        sum *= &outer;
        Ok(sum.to_f64())
    }
}

/// Hard cap on series terms before [`pmf_series`] gives up.
pub const SERIES_MAX_TERMS: usize = 50_000_000;

/// `ln(1 - e^x)` for `x < 0`, accurate on both sides of `-ln 2`.
fn ln_one_minus_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Binomial coefficient as `(ln C, C)`; the linear value is built by exact
/// running products and is `None` once it grows past `1e250`.
fn binomial_coef(n: usize, k: usize) -> (f64, Option<f64>) {
    let ln = ln_binomial(n as u64, k as u64);
    if ln > 575.0 {
        return (ln, None);
    }
    let k = k.min(n - k);
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    (ln, Some(c))
}

/// `coef * q * sum_mu (1 - b^{1+mu})^k b^{(1+mu)(n-k)} (1-q)^mu` with
/// `b = 1 - p`, truncated once the geometric tail bound drops below
/// `tail_tol`. All terms are nonnegative.
///
/// Terms are products of correctly rounded powers when the coefficient is
/// representable. Summing logarithms instead loses about `|ln C| * eps` of
/// relative accuracy, which is visible at `n` in the hundreds; it is kept
/// only for coefficients beyond `f64` range.
fn infectious_period_series(
    n: usize,
    k: usize,
    coef: (f64, Option<f64>),
    params: EpidemicParams,
    tail_tol: f64,
) -> Result<f64> {
    let (p, q) = (params.p, params.q);
    let (ln_coef, linear_coef) = coef;
    let a = 1.0 - p;
    let ln_a = (-p).ln_1p();
    let ln_q = q.ln();
    let misses = (n - k) as f64;
    let hits = k as f64;
    let survive = 1.0 - q;
    let term = |mu: usize| -> f64 {
        let periods = (1 + mu) as f64;
        match linear_coef {
            Some(c) => {
                let infected = if k == 0 {
                    1.0
                } else {
                    (-(periods * ln_a).exp_m1()).powf(hits)
                };
                let stay = if mu == 0 {
                    1.0
                } else {
                    survive.powf(mu as f64)
                };
                c * q * infected * a.powf(periods * misses) * stay
            }
            None => {
                let ln_b = periods * ln_a;
                let infected = if k == 0 {
                    0.0
                } else {
                    hits * ln_one_minus_exp(ln_b)
                };
                let stay = if mu == 0 {
                    0.0
                } else {
                    mu as f64 * survive.ln()
                };
                (ln_coef + ln_q + infected + misses * ln_b + stay).exp()
            }
        }
    };
    if q == 1.0 {
        return Ok(term(0));
    }
    let ln_survive = (-q).ln_1p();
    // term_mu <= coef * q * a^{n-k} * x^mu with x = (1-q) a^{n-k} < 1
    let ln_x = ln_survive + misses * ln_a;
    let ln_tail_scale = ln_coef + ln_q + misses * ln_a - ln_one_minus_exp(ln_x);
    let ln_tol = tail_tol.ln();
    let mut sum = 0.0;
    for mu in 0..SERIES_MAX_TERMS {
        sum += term(mu);
        if ln_tail_scale + (mu + 1) as f64 * ln_x <= ln_tol {
            return Ok(sum);
        }
    }
    Err(DistError::SeriesBudget {
        n,
        k,
        terms: SERIES_MAX_TERMS,
    })
}

/// `P(X_n = k)` from the positive series over the infectious period
/// `mu + 1`, accurate in `f64` because nothing cancels. The discarded tail
/// is bounded analytically by `tail_tol`.
pub fn pmf_series(n: usize, k: usize, params: EpidemicParams, tail_tol: f64) -> Result<f64> {
    check_index(n, k)?;
    if tail_tol.is_nan() || tail_tol <= 0.0 {
        return Err(DistError::InvalidParams(format!(
            "tail tolerance {tail_tol} must be positive"
        )));
    }
    if let Some(mass) = degenerate_mass(params, n, k) {
        return Ok(mass);
    }
    infectious_period_series(n, k, binomial_coef(n, k), params, tail_tol)
}

/// Probability that exactly `k` of the `m` susceptible neighbors end up
/// infected when the node draws its infections against all `n` neighbors,
/// `n - m` of which cannot be infected:
/// `sum_i C(n-m, i-k) C(m, k) P*(X_n = i)` with `P* = P(X_n = i) / C(n, i)`,
/// the probability that one predetermined set of `i` neighbors is infected.
pub fn pmf_restricted(n: usize, m: usize, k: usize, params: EpidemicParams) -> Result<f64> {
    if k > m || m > n {
        return Err(DistError::IndexOutOfRange(format!(
            "need k <= m <= n, got k = {k}, m = {m}, n = {n}"
        )));
    }
    if params.p == 0.0 {
        return Ok(if k == 0 { 1.0 } else { 0.0 });
    }
    if params.p == 1.0 {
        return Ok(if k == m { 1.0 } else { 0.0 });
    }
    let (ln_choose_k, choose_k) = binomial_coef(m, k);
    let blocked = n - m;
    let tol = 1e-17 / (blocked + 1) as f64;
    (k..=blocked + k)
        .map(|i| {
            let (ln_blocked, blocked_coef) = binomial_coef(blocked, i - k);
            let linear = blocked_coef
                .zip(choose_k)
                .map(|(x, y)| x * y)
                .filter(|c| *c < 1e250);
            infectious_period_series(n, i, (ln_blocked + ln_choose_k, linear), params, tol)
        })
        .sum()
}

/// `P(X_n = k)` for one degree `n`; `masses[k]` for `k = 0..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PmfRow {
    pub degree: usize,
    pub masses: Vec<f64>,
}

/// Rows `n = 0..=n_max` from [`pmf_table_recursive`].
#[derive(Clone, Debug)]
pub struct PmfTable {
    pub params: EpidemicParams,
    pub precision_bits: u32,
    pub rows: Vec<PmfRow>,
}

impl PmfTable {
    pub fn n_max(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn row(&self, n: usize) -> Option<&PmfRow> {
        self.rows.get(n)
    }
}

/// Largest deviation of a row sum from 1 before the build is declared a
/// precision failure.
const ROW_SUM_ALARM: f64 = 1e-9;

/// Most negative value a working mass may take before the build is
/// declared a precision failure; anything smaller in magnitude is clamped
/// to zero on export.
const NEGATIVE_ALARM: f64 = 1e-15;

/// Streams the rows of the recursive table one degree at a time, keeping
/// only the previous row in multiple precision.
///
/// Row `n` starts from `P(X_n = 0) = q a^n / (1 - (1-q) a^n)` with
/// `a = 1 - p` and fills `k >= 1` from
/// `P(X_n = k) = (n/k) P(X_{n-1} = k-1) - ((n-k+1)/k) P(X_n = k-1)`.
pub struct RecursiveRows {
    params: EpidemicParams,
    precision_bits: u32,
    n_max: usize,
    next: usize,
    prev: Vec<Float>,
    a: Float,
    a_pow: Float,
    q: Float,
    survive: Float,
    failed: bool,
}

impl RecursiveRows {
    pub fn new(n_max: usize, params: EpidemicParams, precision_bits: u32) -> Result<Self> {
        if precision_bits < 64 {
            return Err(DistError::InvalidPrecision(precision_bits));
        }
        let prec = precision_bits;
        let q = Float::with_val(prec, params.q);
        Ok(Self {
            params,
            precision_bits,
            n_max,
            next: 0,
            prev: Vec::new(),
            a: Float::with_val(prec, 1u32 - Float::with_val(prec, params.p)),
            a_pow: Float::with_val(prec, 1u32),
            survive: Float::with_val(prec, 1u32 - &q),
            q,
            failed: false,
        })
    }

    pub fn precision_bits(&self) -> u32 {
        self.precision_bits
    }

    fn export(&self, n: usize, k: usize, value: &Float) -> Result<f64> {
        if value.is_sign_negative() && !value.is_zero() {
            if *value.as_abs() > NEGATIVE_ALARM {
                return Err(DistError::PrecisionFailure {
                    degree: n,
                    precision_bits: self.precision_bits,
                    detail: format!("P(X = {k}) = {:e} is negative", value.to_f64()),
                });
            }
            return Ok(0.0);
        }
        Ok(value.to_f64())
    }

    fn compute_row(&mut self, n: usize) -> Result<PmfRow> {
        if degenerate_mass(self.params, n, 0).is_some() {
            let masses = (0..=n)
                .map(|k| degenerate_mass(self.params, n, k).unwrap())
                .collect();
            return Ok(PmfRow { degree: n, masses });
        }
        let prec = self.precision_bits;
        let mut cur: Vec<Float> = Vec::with_capacity(n + 1);
        if n == 0 {
            cur.push(Float::with_val(prec, 1u32));
        } else {
            self.a_pow *= &self.a;
            let denom = Float::with_val(
                prec,
                1u32 - Float::with_val(prec, &self.survive * &self.a_pow),
            );
            let mut first = Float::with_val(prec, &self.q * &self.a_pow);
            first /= &denom;
            cur.push(first);
            for k in 1..=n {
                let mut value = Float::with_val(prec, &self.prev[k - 1] * n as u32);
                let back = Float::with_val(prec, &cur[k - 1] * (n - k + 1) as u32);
                value -= &back;
                value /= k as u32;
                cur.push(value);
            }
        }
        let masses = cur
            .iter()
            .enumerate()
            .map(|(k, v)| self.export(n, k, v))
            .collect::<Result<Vec<f64>>>()?;
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_ALARM {
            return Err(DistError::PrecisionFailure {
                degree: n,
                precision_bits: prec,
                detail: format!("row sums to {total}"),
            });
        }
        self.prev = cur;
        Ok(PmfRow { degree: n, masses })
    }
}

impl Iterator for RecursiveRows {
    type Item = Result<PmfRow>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next > self.n_max {
            return None;
        }
        let n = self.next;
        self.next += 1;
        let row = self.compute_row(n);
        self.failed = row.is_err();
        Some(row)
    }
}

/// All rows `n = 0..=n_max`, computed at `policy.mantissa_bits(n_max)` bits
/// throughout (the recursion mixes rows, so one global precision is used).
pub fn pmf_table_recursive(
    n_max: usize,
    params: EpidemicParams,
    policy: PrecisionPolicy,
) -> Result<PmfTable> {
    let precision_bits = policy.mantissa_bits(n_max);
    let rows = RecursiveRows::new(n_max, params, precision_bits)?.collect::<Result<Vec<_>>>()?;
    Ok(PmfTable {
        params,
        precision_bits,
        rows,
    })
}

/// Cumulative distribution from masses: running sums capped at 1 with the
/// final entry set to exactly 1.
pub fn cdf_from_masses(masses: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = masses
        .iter()
        .map(|m| {
            acc += m;
            acc.min(1.0)
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

const NO_ROW: u32 = u32::MAX;

/// Per-degree cumulative distributions `C_n(k) = P(X_n <= k)` for one
/// `(p, q)` pair. Rows are looked up by degree in constant time.
#[derive(Clone, Debug, PartialEq)]
pub struct InfectionCdfTable {
    params: EpidemicParams,
    precision_bits: u32,
    degrees: Vec<usize>,
    rows: Vec<Vec<f64>>,
    index: Vec<u32>,
}

impl InfectionCdfTable {
    fn from_parts(
        params: EpidemicParams,
        precision_bits: u32,
        rows: Vec<(usize, Vec<f64>)>,
    ) -> Self {
        let k_max = rows.iter().map(|(d, _)| *d).max().unwrap_or(0);
        let mut index = vec![NO_ROW; k_max + 1];
        let mut degrees = Vec::with_capacity(rows.len());
        let mut cdfs = Vec::with_capacity(rows.len());
        for (i, (degree, cdf)) in rows.into_iter().enumerate() {
            index[degree] = i as u32;
            degrees.push(degree);
            cdfs.push(cdf);
        }
        Self {
            params,
            precision_bits,
            degrees,
            rows: cdfs,
            index,
        }
    }

    /// Sparse table for exactly the given degrees, computed by streaming
    /// the recursion up to the largest one.
    pub fn for_degrees(
        params: EpidemicParams,
        degrees: &[usize],
        policy: PrecisionPolicy,
    ) -> Result<Self> {
        let mut wanted: Vec<usize> = degrees.to_vec();
        wanted.sort_unstable();
        wanted.dedup();
        let n_max = wanted.last().copied().unwrap_or(0);
        let precision_bits = policy.mantissa_bits(n_max);
        let mut rows = Vec::with_capacity(wanted.len());
        let mut want = wanted.iter().peekable();
        for row in RecursiveRows::new(n_max, params, precision_bits)? {
            let row = row?;
            if want.peek() == Some(&&row.degree) {
                want.next();
                rows.push((row.degree, cdf_from_masses(&row.masses)));
            }
        }
        Ok(Self::from_parts(params, precision_bits, rows))
    }

    /// Sparse table covering every degree present in `net`.
    pub fn for_network(
        params: EpidemicParams,
        net: &Network,
        policy: PrecisionPolicy,
    ) -> Result<Self> {
        let stats = crate::graph::degree_stats(net);
        Self::for_degrees(params, &stats.distinct_degrees, policy)
    }

    /// Dense table for degrees `0..=k_max`, usable with any network whose
    /// maximum degree does not exceed `k_max`.
    pub fn dense(params: EpidemicParams, k_max: usize, policy: PrecisionPolicy) -> Result<Self> {
        let all: Vec<usize> = (0..=k_max).collect();
        Self::for_degrees(params, &all, policy)
    }

    pub fn params(&self) -> EpidemicParams {
        self.params
    }

    pub fn precision_bits(&self) -> u32 {
        self.precision_bits
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    #[inline]
    pub fn row(&self, degree: usize) -> Option<&[f64]> {
        match self.index.get(degree) {
            Some(&i) if i != NO_ROW => Some(&self.rows[i as usize]),
            _ => None,
        }
    }

    /// Replaces one row. Meant for negative-control tests; the row is not
    /// validated.
    pub fn replace_row(&mut self, degree: usize, cdf: Vec<f64>) -> Result<()> {
        match self.index.get(degree) {
            Some(&i) if i != NO_ROW => {
                self.rows[i as usize] = cdf;
                Ok(())
            }
            _ => Err(DistError::MissingDegree(degree)),
        }
    }

    pub fn check_params(&self, params: EpidemicParams) -> Result<()> {
        if self.params != params {
            return Err(DistError::ParamsMismatch {
                table_p: self.params.p,
                table_q: self.params.q,
                p: params.p,
                q: params.q,
            });
        }
        Ok(())
    }

    /// Errors with the first degree of `net` that has no row.
    pub fn check_covers(&self, net: &Network) -> Result<()> {
        match net.degrees().find(|&d| self.row(d).is_none()) {
            Some(d) => Err(DistError::MissingDegree(d)),
            None => Ok(()),
        }
    }

    /// Inspection export with columns `degree,k,pmf,cdf`.
    pub fn write_csv(&self, mut sink: impl Write) -> io::Result<()> {
        writeln!(sink, "degree,k,pmf,cdf")?;
        for (degree, cdf) in self.degrees.iter().zip(&self.rows) {
            let mut prev = 0.0;
            for (k, &c) in cdf.iter().enumerate() {
                writeln!(sink, "{degree},{k},{:e},{:e}", c - prev, c)?;
                prev = c;
            }
        }
        Ok(())
    }
}

/// Prefix-sums the requested rows of `table`.
pub fn build_cdf_table(table: &PmfTable, degrees: &[usize]) -> Result<InfectionCdfTable> {
    let mut wanted = degrees.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let rows = wanted
        .into_iter()
        .map(|d| {
            table
                .row(d)
                .map(|row| (d, cdf_from_masses(&row.masses)))
                .ok_or(DistError::MissingDegree(d))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InfectionCdfTable::from_parts(
        table.params,
        table.precision_bits,
        rows,
    ))
}

pub const CACHE_MAGIC: &[u8; 4] = b"FSIR";
pub const CACHE_VERSION: u32 = 1;

/// Writes the little-endian cache format: magic, version, `p`, `q`,
/// precision, row count, then per row the degree and its `degree + 1` CDF
/// values.
pub fn save_table(table: &InfectionCdfTable, mut sink: impl Write) -> Result<()> {
    sink.write_all(CACHE_MAGIC)?;
    sink.write_all(&CACHE_VERSION.to_le_bytes())?;
    sink.write_all(&table.params.p.to_le_bytes())?;
    sink.write_all(&table.params.q.to_le_bytes())?;
    sink.write_all(&table.precision_bits.to_le_bytes())?;
    sink.write_all(&(table.rows.len() as u32).to_le_bytes())?;
    for (degree, cdf) in table.degrees.iter().zip(&table.rows) {
        sink.write_all(&(*degree as u32).to_le_bytes())?;
        for c in cdf {
            sink.write_all(&c.to_le_bytes())?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn read_bytes<const N: usize>(source: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    source.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => {
            DistError::Corrupt(format!("truncated while reading {what}"))
        }
        _ => DistError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(source: &mut impl Read, what: &str) -> Result<u32> {
    read_bytes::<4>(source, what).map(u32::from_le_bytes)
}

fn read_f64(source: &mut impl Read, what: &str) -> Result<f64> {
    read_bytes::<8>(source, what).map(f64::from_le_bytes)
}

/// Reads and validates a cache file written by [`save_table`].
pub fn load_table(mut source: impl Read) -> Result<InfectionCdfTable> {
    let magic: [u8; 4] = read_bytes(&mut source, "magic").map_err(|_| DistError::BadMagic)?;
    if &magic != CACHE_MAGIC {
        return Err(DistError::BadMagic);
    }
    let version = read_u32(&mut source, "version")?;
    if version != CACHE_VERSION {
        return Err(DistError::UnsupportedVersion(version));
    }
    let p = read_f64(&mut source, "p")?;
    let q = read_f64(&mut source, "q")?;
    let params = EpidemicParams::new(p, q).map_err(|e| DistError::Corrupt(e.to_string()))?;
    let precision_bits = read_u32(&mut source, "precision")?;
    let row_count = read_u32(&mut source, "row count")? as usize;
    let mut rows = Vec::with_capacity(row_count.min(1 << 16));
    let mut last_degree: Option<usize> = None;
    for _ in 0..row_count {
        let degree = read_u32(&mut source, "degree")? as usize;
        if last_degree.is_some_and(|d| degree <= d) {
            return Err(DistError::Corrupt(format!("degree {degree} out of order")));
        }
        last_degree = Some(degree);
        let mut cdf = Vec::with_capacity((degree + 1).min(1 << 20));
        let mut prev = 0.0;
        for k in 0..=degree {
            let c = read_f64(&mut source, "cdf value")?;
            if !(prev..=1.0).contains(&c) {
                return Err(DistError::Corrupt(format!(
                    "row {degree} is not a nondecreasing CDF in [0, 1] at k = {k}"
                )));
            }
            cdf.push(c);
            prev = c;
        }
        if (1.0 - prev) > f64::powi(2.0, -50) {
            return Err(DistError::Corrupt(format!(
                "row {degree} ends at {prev}, not 1"
            )));
        }
        rows.push((degree, cdf));
    }
    let mut trailing = [0u8; 1];
    if source.read(&mut trailing)? != 0 {
        return Err(DistError::Corrupt("trailing bytes after last row".into()));
    }
    Ok(InfectionCdfTable::from_parts(params, precision_bits, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn params(p: f64, q: f64) -> EpidemicParams {
        EpidemicParams::new(p, q).unwrap()
    }

    #[test]
    fn parameter_validation() {
        assert!(EpidemicParams::new(0.5, 0.0).is_err());
        assert!(EpidemicParams::new(-0.1, 0.5).is_err());
        assert!(EpidemicParams::new(1.1, 0.5).is_err());
        assert!(EpidemicParams::new(f64::NAN, 0.5).is_err());
        assert!(EpidemicParams::new(0.5, f64::NAN).is_err());
        assert!(EpidemicParams::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn precision_policy() {
        let empirical = PrecisionPolicy::EMPIRICAL;
        assert_eq!(empirical.mantissa_bits(0), 64);
        assert_eq!(empirical.mantissa_bits(80), 64);
        assert_eq!(empirical.mantissa_bits(81), 65);
        assert_eq!(empirical.mantissa_bits(1000), 800);
        let default = PrecisionPolicy::default();
        assert_eq!(default.mantissa_bits(200), 464);
        assert_eq!(PrecisionPolicy::fixed(512).mantissa_bits(10_000), 512);
        let mut last = 0;
        for n in 0..2000 {
            let bits = default.mantissa_bits(n);
            assert!(bits >= last && bits >= 64);
            last = bits;
        }
    }

    #[test]
    fn direct_degenerate_p() {
        for n in 0..6 {
            for k in 0..=n {
                let zero = pmf_direct(n, k, params(0.0, 0.3), 64).unwrap();
                assert_eq!(zero, if k == 0 { 1.0 } else { 0.0 });
                let one = pmf_direct(n, k, params(1.0, 0.3), 64).unwrap();
                assert_eq!(one, if k == n { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn direct_single_edge() {
        let v = pmf_direct(1, 1, params(0.5, 0.5), 128).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        assert!((transmissibility(params(0.5, 0.5)) - 2.0 / 3.0).abs() < 1e-15);
    }

    /// Monte Carlo of one infectious node and one susceptible neighbor.
    #[test]
    fn single_edge_monte_carlo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let trials = 1_000_000;
        let mut hits = 0u32;
        for _ in 0..trials {
            loop {
                if rng.random::<f64>() < 0.5 {
                    hits += 1;
                    break;
                }
                if rng.random::<f64>() < 0.5 {
                    break;
                }
            }
        }
        let freq = hits as f64 / trials as f64;
        let sigma = (2.0 / 9.0 / trials as f64).sqrt();
        assert!((freq - 2.0 / 3.0).abs() < 5.0 * sigma, "freq {freq}");
    }

    #[test]
    fn q_one_is_binomial() {
        let expected = [0.125, 0.375, 0.375, 0.125];
        for (k, e) in expected.iter().enumerate() {
            let d = pmf_direct(3, k, params(0.5, 1.0), 128).unwrap();
            let s = pmf_series(3, k, params(0.5, 1.0), 1e-16).unwrap();
            assert!((d - e).abs() < 1e-15);
            assert!((s - e).abs() < 1e-15);
        }
    }

    #[test]
    fn series_matches_hand_values() {
        let s = pmf_series(1, 1, params(0.5, 0.5), 1e-16).unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
        let s = pmf_series(2, 0, params(0.5, 0.5), 1e-16).unwrap();
        assert!((s - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(pmf_series(4, 2, params(0.0, 0.5), 1e-12).unwrap(), 0.0);
        assert!(pmf_series(4, 2, params(0.5, 0.5), 0.0).is_err());
        assert!(pmf_series(2, 3, params(0.5, 0.5), 1e-12).is_err());
    }

    #[test]
    fn series_log_space_fallback_for_huge_coefficients() {
        // C(1000, k) overflows the linear path near the middle of the row.
        let pq = params(0.5, 0.5);
        assert!(binomial_coef(1000, 500).1.is_none());
        assert!(binomial_coef(1000, 100).1.is_some());
        let row: Vec<f64> = (0..=1000)
            .map(|k| pmf_series(1000, k, pq, 1e-17).unwrap())
            .collect();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let mean: f64 = row.iter().enumerate().map(|(k, m)| k as f64 * m).sum();
        assert!((mean - 1000.0 * transmissibility(pq)).abs() < 1e-8);
        // Both paths agree where they meet.
        let (ln, linear) = binomial_coef(1000, 150);
        let via_linear = infectious_period_series(1000, 150, (ln, linear), pq, 1e-17).unwrap();
        let via_log = infectious_period_series(1000, 150, (ln, None), pq, 1e-17).unwrap();
        assert!(((via_linear - via_log) / via_linear).abs() < 1e-11);
    }

    #[test]
    fn series_budget_exhaustion() {
        let tiny = params(1e-12, 1e-12);
        assert!(matches!(
            pmf_series(1, 1, tiny, 1e-300),
            Err(DistError::SeriesBudget { .. })
        ));
    }

    #[test]
    fn direct_rejects_low_precision() {
        assert!(matches!(
            pmf_direct(3, 1, params(0.5, 0.5), 32),
            Err(DistError::InvalidPrecision(32))
        ));
    }

    #[test]
    fn recursion_base_step() {
        let table = pmf_table_recursive(1, params(0.5, 0.5), PrecisionPolicy::default()).unwrap();
        assert_eq!(table.rows[0].masses, vec![1.0]);
        assert!((table.rows[1].masses[0] - 1.0 / 3.0).abs() < 1e-16);
        assert!((table.rows[1].masses[1] - 2.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn recursion_matches_direct_small() {
        let pq = params(0.3, 0.4);
        let table = pmf_table_recursive(40, pq, PrecisionPolicy::default()).unwrap();
        let direct = DirectPmf::new(pq, 40, 256).unwrap();
        for row in &table.rows {
            for (k, m) in row.masses.iter().enumerate() {
                let d = direct.pmf(row.degree, k).unwrap();
                assert!((m - d).abs() < 1e-13, "n={} k={k}: {m} vs {d}", row.degree);
            }
        }
    }

    #[test]
    fn empirical_policy_fails_loudly_at_low_p() {
        let err =
            pmf_table_recursive(200, params(0.1, 0.1), PrecisionPolicy::EMPIRICAL).unwrap_err();
        assert!(matches!(err, DistError::PrecisionFailure { .. }), "{err}");
    }

    #[test]
    fn restricted_process() {
        let pq = params(0.5, 0.5);
        for k in 0..=3 {
            let full = pmf_restricted(3, 3, k, pq).unwrap();
            let direct = pmf_direct(3, k, pq, 128).unwrap();
            assert!((full - direct).abs() < 1e-12);
            let restricted = pmf_restricted(5, 3, k, pq).unwrap();
            assert!((restricted - direct).abs() < 1e-12, "k={k}");
        }
        assert!((pmf_restricted(2, 0, 0, pq).unwrap() - 1.0).abs() < 1e-12);
        assert!(pmf_restricted(2, 3, 0, pq).is_err());
        assert!(pmf_restricted(4, 2, 3, pq).is_err());
        assert_eq!(pmf_restricted(4, 2, 2, params(1.0, 0.5)).unwrap(), 1.0);
    }

    #[test]
    fn transmissibility_edges() {
        assert_eq!(transmissibility(params(0.3, 1.0)), 0.3);
        assert_eq!(transmissibility(params(1.0, 0.2)), 1.0);
        assert_eq!(transmissibility(params(0.0, 0.2)), 0.0);
    }

    #[test]
    fn cdf_rows() {
        let table = pmf_table_recursive(2, params(0.5, 1.0), PrecisionPolicy::default()).unwrap();
        let cdf = build_cdf_table(&table, &[0, 2]).unwrap();
        assert_eq!(cdf.row(0).unwrap(), &[1.0]);
        let row = cdf.row(2).unwrap();
        assert!((row[0] - 0.25).abs() < 1e-16 && (row[1] - 0.75).abs() < 1e-16);
        assert_eq!(row[2], 1.0);
        assert!(cdf.row(1).is_none());
        assert!(matches!(
            build_cdf_table(&table, &[3]),
            Err(DistError::MissingDegree(3))
        ));
        assert_eq!(
            cdf_from_masses(&[0.5, 0.5000000000000002, 0.0]),
            vec![0.5, 1.0, 1.0]
        );
    }

    #[test]
    fn sparse_and_dense_tables_agree() {
        let pq = params(0.2, 0.1);
        let dense = InfectionCdfTable::dense(pq, 30, PrecisionPolicy::fixed(256)).unwrap();
        let sparse =
            InfectionCdfTable::for_degrees(pq, &[30, 3, 7, 3], PrecisionPolicy::fixed(256))
                .unwrap();
        assert_eq!(sparse.degrees(), &[3, 7, 30]);
        for d in [3, 7, 30] {
            assert_eq!(sparse.row(d), dense.row(d));
        }
        assert_eq!(dense.row_count(), 31);
    }

    #[test]
    fn cache_round_trip_and_validation() {
        let table =
            InfectionCdfTable::dense(params(0.5, 0.5), 20, PrecisionPolicy::default()).unwrap();
        let mut bytes = Vec::new();
        save_table(&table, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"FSIR");
        let loaded = load_table(bytes.as_slice()).unwrap();
        assert_eq!(loaded, table);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            load_table(bad.as_slice()),
            Err(DistError::BadMagic)
        ));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            load_table(bad.as_slice()),
            Err(DistError::UnsupportedVersion(9))
        ));

        // Row for degree 1 begins after the 32-byte header and the 12-byte
        // degree-0 row; swap its two CDF values to break monotonicity.
        let mut bad = bytes.clone();
        let start = 32 + 12 + 4;
        let (first, second) = (start, start + 8);
        let a: [u8; 8] = bad[first..first + 8].try_into().unwrap();
        let b: [u8; 8] = bad[second..second + 8].try_into().unwrap();
        bad[first..first + 8].copy_from_slice(&b);
        bad[second..second + 8].copy_from_slice(&a);
        assert!(matches!(
            load_table(bad.as_slice()),
            Err(DistError::Corrupt(_))
        ));

        assert!(matches!(
            load_table(&bytes[..bytes.len() - 3]),
            Err(DistError::Corrupt(_))
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            load_table(longer.as_slice()),
            Err(DistError::Corrupt(_))
        ));
    }

    #[test]
    fn csv_export() {
        let table =
            InfectionCdfTable::dense(params(0.5, 1.0), 1, PrecisionPolicy::default()).unwrap();
        let mut out = Vec::new();
        table.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 1 + 2);
        assert!(text.starts_with("degree,k,pmf,cdf\n0,0,1e0,1e0\n1,0,5e-1,5e-1\n"));
    }

    #[test]
    fn coverage_and_params_checks() {
        let net = crate::graph::generate_test_graph(crate::graph::TestGraph::Star, 5).unwrap();
        let pq = params(0.3, 0.3);
        let table = InfectionCdfTable::for_network(pq, &net, PrecisionPolicy::default()).unwrap();
        assert_eq!(table.degrees(), &[1, 4]);
        table.check_covers(&net).unwrap();
        table.check_params(pq).unwrap();
        assert!(table.check_params(params(0.3, 0.4)).is_err());
        let small = InfectionCdfTable::dense(pq, 2, PrecisionPolicy::default()).unwrap();
        assert!(matches!(
            small.check_covers(&net),
            Err(DistError::MissingDegree(4))
        ));
    }
}
