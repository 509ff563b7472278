//! Repetition ensembles, `(p, q)` sweeps, Naive/Fast timing comparisons and
//! the built-in verification suites.
//!
//! Randomness is tied to repetition indices: repetition `i` of a cell always
//! uses stream `i` of the master seed, whichever worker runs it, so serial
//! and parallel execution agree run for run. Every cell of a sweep reuses
//! the same streams.

use std::borrow::Cow;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use rug::ops::Pow;
use rug::Float;
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::distributions::{
    self, pmf_restricted, pmf_series, transmissibility, DirectPmf, DistError, EpidemicParams,
    InfectionCdfTable, PrecisionPolicy, RecursiveRows,
};
use crate::graph::{self, GraphError, Network, TestGraph};
use crate::simulate::{
    self, Algorithm, RngStream, RunSummary, SimError, SubsetSampler, WorkCounters, Workspace,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(context: impl fmt::Display) -> impl FnOnce(io::Error) -> HarnessError {
    let context = context.to_string();
    move |source| HarnessError::Io { context, source }
}

/// Rounds grid coordinates so that `0.1 + 2 * 0.1` prints as `0.3`.
fn round_grid(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

/// Inclusive arithmetic grid `start, start + step, ..., <= stop`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Grid {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(start.is_finite() && stop.is_finite() && step.is_finite())
            || step <= 0.0
            || stop < start
        {
            return Err(HarnessError::Config(format!(
                "grid {start}:{stop}:{step} needs finite start <= stop and step > 0"
            )));
        }
        Ok(Self { start, stop, step })
    }

    pub fn single(value: f64) -> Self {
        Self {
            start: value,
            stop: value,
            step: 1.0,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..count)
            .map(|i| round_grid(self.start + i as f64 * self.step))
            .collect()
    }
}

impl FromStr for Grid {
    type Err = HarnessError;

    /// `start:stop:step`, or a single value.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("bad grid value {t:?} in {s:?}")))
        };
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [v] => Ok(Self::single(parse(v)?)),
            [a, b, step] => Self::new(parse(a)?, parse(b)?, parse(step)?),
            _ => Err(HarnessError::Config(format!(
                "grid {s:?} is not start:stop:step"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlgorithmChoice {
    Naive,
    Fast,
    Hybrid,
    Both,
}

impl FromStr for AlgorithmChoice {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "fast" => Ok(Self::Fast),
            "hybrid" => Ok(Self::Hybrid),
            "both" => Ok(Self::Both),
            _ => Err(HarnessError::Config(format!(
                "unknown algorithm {s:?}; expected naive, fast, hybrid or both"
            ))),
        }
    }
}

/// Which simulator produced a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellAlgorithm {
    Naive,
    Fast,
    /// Hybrid run; the payload is the algorithm that won the pilot.
    Hybrid(Algorithm),
}

impl CellAlgorithm {
    pub fn label(self) -> String {
        match self {
            Self::Naive => "naive".into(),
            Self::Fast => "fast".into(),
            Self::Hybrid(a) => format!("hybrid:{}", a.name()),
        }
    }
}

impl From<Algorithm> for CellAlgorithm {
    fn from(a: Algorithm) -> Self {
        match a {
            Algorithm::Naive => Self::Naive,
            Algorithm::Fast => Self::Fast,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub p: f64,
    pub q: f64,
    pub algorithm: CellAlgorithm,
    pub repetitions: usize,
    pub mean_infected: f64,
    /// Population standard deviation over repetitions.
    pub std_infected: f64,
    pub mean_duration: f64,
    /// Simulation time only.
    pub wall_seconds: f64,
    /// Time spent building or loading the FastSIR table; zero for Naive SIR.
    pub dist_seconds: f64,
    /// Whether the table came from a cache file, in which case its load time
    /// is charged to FastSIR in timing ratios.
    pub dist_loaded: bool,
    /// `histogram[s]` counts repetitions with final size `s`.
    pub histogram: Vec<u64>,
    pub counters: WorkCounters,
}

impl CellResult {
    fn from_runs(
        params: EpidemicParams,
        algorithm: CellAlgorithm,
        runs: &[RunSummary],
        wall_seconds: f64,
    ) -> Self {
        let n = runs.len() as f64;
        let histogram = analysis::histogram(runs.iter().map(|r| r.total_infected));
        let mean_infected = runs.iter().map(|r| r.total_infected as f64).sum::<f64>() / n;
        let var = runs
            .iter()
            .map(|r| (r.total_infected as f64 - mean_infected).powi(2))
            .sum::<f64>()
            / n;
        let mut counters = WorkCounters::default();
        for r in runs {
            counters.dequeues += r.counters.dequeues;
            counters.infection_attempts += r.counters.infection_attempts;
            counters.rng_draws += r.counters.rng_draws;
            counters.subset_work += r.counters.subset_work;
        }
        Self {
            p: params.p(),
            q: params.q(),
            algorithm,
            repetitions: runs.len(),
            mean_infected,
            std_infected: var.sqrt(),
            mean_duration: runs.iter().map(|r| r.duration as f64).sum::<f64>() / n,
            wall_seconds: wall_seconds.max(1e-9),
            dist_seconds: 0.0,
            dist_loaded: false,
            histogram,
            counters,
        }
    }

    /// Wall time charged to this cell in timing comparisons: simulation plus
    /// table loading when the table came from disk.
    pub fn charged_seconds(&self) -> f64 {
        self.wall_seconds
            + if self.dist_loaded {
                self.dist_seconds
            } else {
                0.0
            }
    }
}

/// Fixed-width worker pool. One worker runs inline on the calling thread.
pub struct Executor {
    pool: Option<rayon::ThreadPool>,
    workers: usize,
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        let pool = if workers == 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?,
            )
        };
        Ok(Self { pool, workers })
    }

    pub fn serial() -> Self {
        Self {
            pool: None,
            workers: 1,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Applies `f` to `0..len` and returns the results in index order.
    pub fn map<T, F>(&self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..len).map(f).collect(),
            Some(pool) => pool.install(|| (0..len).into_par_iter().map(f).collect()),
        }
    }

    /// Runs one simulation per stream index, in stream order.
    #[allow(clippy::too_many_arguments)]
    pub fn run_streams(
        &self,
        algorithm: Algorithm,
        net: &Network,
        params: EpidemicParams,
        table: Option<&InfectionCdfTable>,
        seeds: &[usize],
        master_seed: u64,
        streams: Range<u64>,
    ) -> Result<Vec<RunSummary>> {
        let job = |ws: &mut Workspace, i: usize| {
            let mut rng = RngStream::new(master_seed, streams.start + i as u64).rng();
            ws.run(algorithm, net, params, table, seeds, &mut rng)
        };
        let len = (streams.end - streams.start) as usize;
        let runs: std::result::Result<Vec<RunSummary>, SimError> = match &self.pool {
            None => {
                let mut ws = Workspace::new(net);
                (0..len).map(|i| job(&mut ws, i)).collect()
            }
            Some(pool) => pool.install(|| {
                (0..len)
                    .into_par_iter()
                    .map_init(|| Workspace::new(net), |ws, i| job(ws, i))
                    .collect()
            }),
        };
        Ok(runs?)
    }
}

/// Where FastSIR gets its table.
#[derive(Clone, Debug)]
pub enum TableSource<'a> {
    /// Build a sparse in-memory table for the network's degrees.
    Build(PrecisionPolicy),
    /// Use a table the caller already has.
    Table(&'a InfectionCdfTable),
    /// Load one cache file; its parameters must match the cell.
    CacheFile(PathBuf),
    /// One cache file per `(p, q)` inside a directory, created on first use.
    CacheDir {
        dir: PathBuf,
        policy: PrecisionPolicy,
    },
}

pub struct PreparedTable<'a> {
    pub table: Cow<'a, InfectionCdfTable>,
    pub seconds: f64,
    pub loaded: bool,
}

pub fn cache_file_name(params: EpidemicParams) -> String {
    format!(
        "cdf_p{}_q{}.fsir",
        round_grid(params.p()),
        round_grid(params.q())
    )
}

fn load_cache(path: &Path) -> Result<InfectionCdfTable> {
    let file = File::open(path).map_err(io_err(format!("cannot open {}", path.display())))?;
    Ok(distributions::load_table(BufReader::new(file))?)
}

fn save_cache(table: &InfectionCdfTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(format!("cannot create {}", path.display())))?;
    Ok(distributions::save_table(table, BufWriter::new(file))?)
}

pub fn prepare_table<'a>(
    net: &Network,
    params: EpidemicParams,
    source: &'a TableSource<'a>,
) -> Result<PreparedTable<'a>> {
    let start = Instant::now();
    let (table, loaded) = match source {
        TableSource::Build(policy) => (
            Cow::Owned(InfectionCdfTable::for_network(params, net, *policy)?),
            false,
        ),
        TableSource::Table(t) => (Cow::Borrowed(*t), false),
        TableSource::CacheFile(path) => (Cow::Owned(load_cache(path)?), true),
        TableSource::CacheDir { dir, policy } => {
            let path = dir.join(cache_file_name(params));
            let k_max = graph::degree_stats(net).k_max;
            let cached = if path.exists() {
                let t = load_cache(&path)?;
                (t.params() == params && t.check_covers(net).is_ok()).then_some(t)
            } else {
                None
            };
            match cached {
                Some(t) => (Cow::Owned(t), true),
                None => {
                    let t = InfectionCdfTable::dense(params, k_max, *policy)?;
                    fs::create_dir_all(dir)
                        .map_err(io_err(format!("cannot create {}", dir.display())))?;
                    save_cache(&t, &path)?;
                    (Cow::Owned(t), false)
                }
            }
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    table.check_params(params)?;
    table.check_covers(net)?;
    Ok(PreparedTable {
        table,
        seconds,
        loaded,
    })
}

/// Stream index of the discarded warm-up run that precedes each timed batch.
pub const WARM_UP_STREAM: u64 = u64::MAX;

/// One discarded warm-up run, then the timed batch.
#[allow(clippy::too_many_arguments)]
fn timed_streams(
    exec: &Executor,
    algorithm: Algorithm,
    net: &Network,
    params: EpidemicParams,
    table: Option<&InfectionCdfTable>,
    seeds: &[usize],
    master_seed: u64,
    streams: Range<u64>,
) -> Result<(Vec<RunSummary>, f64)> {
    let mut ws = Workspace::new(net);
    ws.run(
        algorithm,
        net,
        params,
        table,
        seeds,
        &mut RngStream::new(master_seed, WARM_UP_STREAM).rng(),
    )?;
    let start = Instant::now();
    let runs = exec.run_streams(algorithm, net, params, table, seeds, master_seed, streams)?;
    Ok((runs, start.elapsed().as_secs_f64()))
}

/// Shared inputs of one cell.
#[derive(Clone, Copy)]
pub struct CellInput<'a> {
    pub net: &'a Network,
    pub params: EpidemicParams,
    pub seeds: &'a [usize],
    pub master_seed: u64,
}

/// Runs `reps` repetitions on streams `0..reps`.
pub fn run_repetitions(
    exec: &Executor,
    input: CellInput<'_>,
    reps: usize,
    algorithm: Algorithm,
    source: &TableSource<'_>,
) -> Result<CellResult> {
    if reps == 0 {
        return Err(HarnessError::Config(
            "repetitions must be at least 1".into(),
        ));
    }
    let prepared = match algorithm {
        Algorithm::Fast => Some(prepare_table(input.net, input.params, source)?),
        Algorithm::Naive => None,
    };
    let table = prepared.as_ref().map(|t| t.table.as_ref());
    let (runs, wall) = timed_streams(
        exec,
        algorithm,
        input.net,
        input.params,
        table,
        input.seeds,
        input.master_seed,
        0..reps as u64,
    )?;
    let mut cell = CellResult::from_runs(input.params, algorithm.into(), &runs, wall);
    if let Some(t) = prepared {
        cell.dist_seconds = t.seconds;
        cell.dist_loaded = t.loaded;
    }
    Ok(cell)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HybridPlan {
    pub pilot_reps: usize,
    pub naive_pilot_seconds: f64,
    pub fast_pilot_seconds: f64,
    pub chosen: Algorithm,
}

/// Pilot scheduling: Naive SIR on streams `0..pilot`, FastSIR on
/// `pilot..2 pilot`, then the faster one on `2 pilot..reps`. `run` returns
/// the summaries and elapsed seconds for a batch.
pub fn schedule_hybrid<F>(
    reps: usize,
    pilot: usize,
    mut run: F,
) -> Result<(Vec<RunSummary>, f64, HybridPlan)>
where
    F: FnMut(Algorithm, Range<u64>) -> Result<(Vec<RunSummary>, f64)>,
{
    if pilot == 0 || 2 * pilot > reps {
        return Err(HarnessError::Config(format!(
            "pilot of {pilot} per algorithm does not fit in {reps} repetitions"
        )));
    }
    let (pilot_u, reps_u) = (pilot as u64, reps as u64);
    let (mut runs, naive_secs) = run(Algorithm::Naive, 0..pilot_u)?;
    let (fast_runs, fast_secs) = run(Algorithm::Fast, pilot_u..2 * pilot_u)?;
    runs.extend(fast_runs);
    let chosen = if fast_secs <= naive_secs {
        Algorithm::Fast
    } else {
        Algorithm::Naive
    };
    let mut total = naive_secs + fast_secs;
    if 2 * pilot_u < reps_u {
        let (rest, secs) = run(chosen, 2 * pilot_u..reps_u)?;
        runs.extend(rest);
        total += secs;
    }
    let plan = HybridPlan {
        pilot_reps: pilot,
        naive_pilot_seconds: naive_secs,
        fast_pilot_seconds: fast_secs,
        chosen,
    };
    Ok((runs, total, plan))
}

/// Default pilot size: one percent of the repetitions, at least two.
pub fn default_pilot(reps: usize) -> usize {
    (reps / 100).max(2)
}

/// Hybrid SIR: pilots both simulators, then commits to the faster one.
/// Requires `2 <= pilot_reps <= reps / 10`.
pub fn run_hybrid(
    exec: &Executor,
    input: CellInput<'_>,
    reps: usize,
    pilot_reps: usize,
    source: &TableSource<'_>,
) -> Result<(CellResult, HybridPlan)> {
    if pilot_reps < 2 || pilot_reps > reps / 10 {
        return Err(HarnessError::Config(format!(
            "pilot repetitions must lie in [2, reps / 10], got {pilot_reps} for {reps} repetitions"
        )));
    }
    let prepared = prepare_table(input.net, input.params, source)?;
    let table = prepared.table.as_ref();
    let (runs, wall, plan) = schedule_hybrid(reps, pilot_reps, |algorithm, streams| {
        timed_streams(
            exec,
            algorithm,
            input.net,
            input.params,
            Some(table),
            input.seeds,
            input.master_seed,
            streams,
        )
    })?;
    let mut cell = CellResult::from_runs(
        input.params,
        CellAlgorithm::Hybrid(plan.chosen),
        &runs,
        wall,
    );
    cell.dist_seconds = prepared.seconds;
    cell.dist_loaded = prepared.loaded;
    Ok((cell, plan))
}

#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub p_grid: Grid,
    pub q_grid: Grid,
    pub repetitions: usize,
    pub algorithm: AlgorithmChoice,
    pub seeds: Vec<usize>,
    pub master_seed: u64,
    /// A directory (one file per cell, created on demand) or a single file
    /// whose parameters must match every cell.
    pub dist_cache: Option<PathBuf>,
    pub workers: usize,
    /// Hybrid pilot size per algorithm; defaults to [`default_pilot`].
    pub pilot_reps: Option<usize>,
    pub precision: PrecisionPolicy,
}

impl SweepConfig {
    pub fn new(p_grid: Grid, q_grid: Grid, seeds: Vec<usize>) -> Self {
        Self {
            p_grid,
            q_grid,
            repetitions: 2000,
            algorithm: AlgorithmChoice::Both,
            seeds,
            master_seed: 0,
            dist_cache: None,
            workers: 1,
            pilot_reps: None,
            precision: PrecisionPolicy::default(),
        }
    }

    /// Grid cells in row-major `(p, q)` order.
    pub fn cells(&self) -> Result<Vec<EpidemicParams>> {
        let qs = self.q_grid.values();
        self.p_grid
            .values()
            .into_iter()
            .flat_map(|p| qs.iter().map(move |&q| (p, q)))
            .map(|(p, q)| {
                EpidemicParams::new(p, q)
                    .map_err(|e| HarnessError::Config(format!("grid cell ({p}, {q}): {e}")))
            })
            .collect()
    }

    fn table_source(&self) -> TableSource<'static> {
        match &self.dist_cache {
            None => TableSource::Build(self.precision),
            Some(path) if path.is_file() => TableSource::CacheFile(path.clone()),
            Some(path) => TableSource::CacheDir {
                dir: path.clone(),
                policy: self.precision,
            },
        }
    }
}

/// One result per grid cell per algorithm (two per cell for `Both`).
pub fn sweep(net: &Network, config: &SweepConfig) -> Result<Vec<CellResult>> {
    if config.repetitions == 0 {
        return Err(HarnessError::Config(
            "repetitions must be at least 1".into(),
        ));
    }
    if config.seeds.is_empty() {
        return Err(HarnessError::Config("no seed nodes".into()));
    }
    let cells = config.cells()?;
    let exec = Executor::new(config.workers)?;
    let source = config.table_source();
    let mut out = Vec::new();
    for params in cells {
        let input = CellInput {
            net,
            params,
            seeds: &config.seeds,
            master_seed: config.master_seed,
        };
        let reps = config.repetitions;
        match config.algorithm {
            AlgorithmChoice::Naive => out.push(run_repetitions(
                &exec,
                input,
                reps,
                Algorithm::Naive,
                &source,
            )?),
            AlgorithmChoice::Fast => out.push(run_repetitions(
                &exec,
                input,
                reps,
                Algorithm::Fast,
                &source,
            )?),
            AlgorithmChoice::Both => {
                out.push(run_repetitions(
                    &exec,
                    input,
                    reps,
                    Algorithm::Naive,
                    &source,
                )?);
                out.push(run_repetitions(
                    &exec,
                    input,
                    reps,
                    Algorithm::Fast,
                    &source,
                )?);
            }
            AlgorithmChoice::Hybrid => {
                let pilot = config.pilot_reps.unwrap_or_else(|| default_pilot(reps));
                out.push(run_hybrid(&exec, input, reps, pilot, &source)?.0);
            }
        }
    }
    Ok(out)
}

pub const SWEEP_HEADER: &str =
    "p,q,algorithm,reps,mean_infected,std_infected,mean_duration,wall_seconds,ratio_naive_over_fast";

/// Naive wall time over FastSIR's charged time for each `(p, q)` that has
/// both, keyed by cell position in `cells`.
fn ratios(cells: &[CellResult]) -> Vec<Option<f64>> {
    cells
        .iter()
        .map(|c| {
            let partner = |alg: CellAlgorithm| {
                cells
                    .iter()
                    .find(|o| o.p == c.p && o.q == c.q && o.algorithm == alg)
            };
            match (partner(CellAlgorithm::Naive), partner(CellAlgorithm::Fast)) {
                (Some(n), Some(f))
                    if matches!(c.algorithm, CellAlgorithm::Naive | CellAlgorithm::Fast) =>
                {
                    Some(n.wall_seconds / f.charged_seconds())
                }
                _ => None,
            }
        })
        .collect()
}

/// Writes `#`-prefixed `key: value` metadata lines, the header and one row
/// per cell.
pub fn write_sweep_csv(
    mut sink: impl Write,
    metadata: &[(&str, String)],
    cells: &[CellResult],
) -> io::Result<()> {
    for (key, value) in metadata {
        writeln!(sink, "# {key}: {value}")?;
    }
    writeln!(sink, "{SWEEP_HEADER}")?;
    for (c, ratio) in cells.iter().zip(ratios(cells)) {
        let ratio = ratio.map(|r| format!("{r:.6}")).unwrap_or_default();
        writeln!(
            sink,
            "{},{},{},{},{},{},{},{:.6},{}",
            c.p,
            c.q,
            c.algorithm.label(),
            c.repetitions,
            c.mean_infected,
            c.std_infected,
            c.mean_duration,
            c.wall_seconds,
            ratio
        )?;
    }
    sink.flush()
}

/// Long-format histograms: `p,q,algorithm,size,count`, zero counts omitted.
pub fn write_histogram_csv(mut sink: impl Write, cells: &[CellResult]) -> io::Result<()> {
    writeln!(sink, "p,q,algorithm,size,count")?;
    for c in cells {
        for (size, &count) in c.histogram.iter().enumerate() {
            if count > 0 {
                writeln!(
                    sink,
                    "{},{},{},{size},{count}",
                    c.p,
                    c.q,
                    c.algorithm.label()
                )?;
            }
        }
    }
    sink.flush()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrecalcReport {
    pub k_max: usize,
    pub precision_bits: u32,
    pub build_seconds: f64,
}

/// Builds the dense table for degrees `0..=k_max`, timing the build alone.
pub fn build_dense_timed(
    params: EpidemicParams,
    k_max: usize,
    policy: PrecisionPolicy,
) -> Result<(InfectionCdfTable, f64)> {
    if k_max == 0 {
        return Err(HarnessError::Config("k_max must be at least 1".into()));
    }
    let start = Instant::now();
    let table = InfectionCdfTable::dense(params, k_max, policy)?;
    Ok((table, start.elapsed().as_secs_f64()))
}

/// Builds the dense table and writes it to `out`.
pub fn precalc_command(
    params: EpidemicParams,
    k_max: usize,
    precision_bits: Option<u32>,
    out: &Path,
) -> Result<PrecalcReport> {
    let policy = precision_bits.map_or_else(PrecisionPolicy::default, PrecisionPolicy::fixed);
    let (table, build_seconds) = build_dense_timed(params, k_max, policy)?;
    save_cache(&table, out)?;
    Ok(PrecalcReport {
        k_max,
        precision_bits: table.precision_bits(),
        build_seconds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Dist,
    Equivalence,
    Tree,
    Sampling,
}

impl FromStr for Suite {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dist" => Ok(Self::Dist),
            "equivalence" => Ok(Self::Equivalence),
            "tree" => Ok(Self::Tree),
            "sampling" => Ok(Self::Sampling),
            _ => Err(HarnessError::Config(format!(
                "unknown suite {s:?}; expected dist, equivalence, tree or sampling"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn write(&self, mut sink: impl Write) -> io::Result<()> {
        for c in &self.checks {
            writeln!(
                sink,
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        let failed = self.failures().count();
        writeln!(sink, "{} checks, {failed} failed", self.checks.len())
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub master_seed: u64,
    pub workers: usize,
    /// Largest degree in the distribution suite.
    pub dist_n_max: usize,
    /// Largest degree for the restricted-process identity.
    pub restricted_n_max: usize,
    /// `(p, q)` values, each taken over this list squared; `q = 1` rows are
    /// always added.
    pub dist_grid: Vec<f64>,
    pub equivalence_reps: usize,
    pub tree_reps: usize,
    pub sampling_draws: usize,
    /// Family-wise significance level, split over the tests of a suite.
    pub alpha: f64,
    /// Negative control: reverse the seed-degree row of every FastSIR table
    /// in the equivalence suite.
    pub corrupt_cdf: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            master_seed: 1,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            dist_n_max: 200,
            restricted_n_max: 20,
            dist_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            equivalence_reps: 100_000,
            tree_reps: 2000,
            sampling_draws: 100_000,
            alpha: 1e-3,
            corrupt_cdf: false,
        }
    }
}

pub fn verify_command(suite: Suite, opts: &VerifyOptions) -> Result<VerifyReport> {
    let exec = Executor::new(opts.workers)?;
    let checks = match suite {
        Suite::Dist => verify_dist(&exec, opts)?,
        Suite::Equivalence => verify_equivalence(&exec, opts)?,
        Suite::Tree => verify_tree(&exec, opts)?,
        Suite::Sampling => verify_sampling(opts)?,
    };
    Ok(VerifyReport { checks })
}

/// Largest deviations seen at one `(p, q)` point of the distribution suite.
#[derive(Clone, Copy, Debug, Default)]
pub struct DistDeviations {
    pub direct_vs_series: f64,
    pub direct_vs_recursive: f64,
    pub series_vs_recursive: f64,
    pub row_sum: f64,
    pub mean_identity: f64,
    /// Against the exact binomial; only meaningful when `q = 1`.
    pub binomial: f64,
    pub restricted: f64,
}

impl DistDeviations {
    pub fn max(self, o: Self) -> Self {
        Self {
            direct_vs_series: self.direct_vs_series.max(o.direct_vs_series),
            direct_vs_recursive: self.direct_vs_recursive.max(o.direct_vs_recursive),
            series_vs_recursive: self.series_vs_recursive.max(o.series_vs_recursive),
            row_sum: self.row_sum.max(o.row_sum),
            mean_identity: self.mean_identity.max(o.mean_identity),
            binomial: self.binomial.max(o.binomial),
            restricted: self.restricted.max(o.restricted),
        }
    }
}

/// `C(n, k) p^k (1-p)^(n-k)` evaluated in 256-bit arithmetic.
pub fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    let prec = 256;
    let mut c = Float::with_val(prec, 1u32);
    for i in 0..k {
        c *= (n - i) as u32;
        c /= (i + 1) as u32;
    }
    let pp = Float::with_val(prec, p);
    let qq = Float::with_val(prec, 1u32 - Float::with_val(prec, p));
    c *= pp.pow(k as u32);
    c *= qq.pow((n - k) as u32);
    c.to_f64()
}

/// Cross-checks the three evaluations of `P(X_n = k)` for `n <= n_max` at
/// one parameter point, plus the expectation and restricted-process
/// identities.
pub fn dist_deviations(
    params: EpidemicParams,
    n_max: usize,
    restricted_n_max: usize,
) -> Result<DistDeviations> {
    let direct = DirectPmf::new(params, n_max, 2 * n_max as u32 + 96)?;
    let rows = RecursiveRows::new(
        n_max,
        params,
        PrecisionPolicy::default().mantissa_bits(n_max),
    )?;
    let mean = |n: usize| n as f64 * transmissibility(params);
    let mut d = DistDeviations::default();
    for row in rows {
        let row = row?;
        let n = row.degree;
        let (mut sum_d, mut sum_s, mut first) = (0.0, 0.0, 0.0);
        for k in 0..=n {
            let vd = direct.pmf(n, k)?;
            let vs = pmf_series(n, k, params, 1e-15)?;
            let vr = row.masses[k];
            d.direct_vs_series = d.direct_vs_series.max((vd - vs).abs());
            d.direct_vs_recursive = d.direct_vs_recursive.max((vd - vr).abs());
            d.series_vs_recursive = d.series_vs_recursive.max((vs - vr).abs());
            if params.q() == 1.0 {
                let b = binomial_pmf(n, k, params.p());
                d.binomial = d
                    .binomial
                    .max((vd - b).abs())
                    .max((vs - b).abs())
                    .max((vr - b).abs());
            }
            sum_d += vd;
            sum_s += vs;
            first += k as f64 * vr;
        }
        let sum_r: f64 = row.masses.iter().sum();
        d.row_sum = d
            .row_sum
            .max((sum_d - 1.0).abs())
            .max((sum_s - 1.0).abs())
            .max((sum_r - 1.0).abs());
        d.mean_identity = d.mean_identity.max((first - mean(n)).abs());
    }
    if restricted_n_max > 0 {
        let small = DirectPmf::new(params, restricted_n_max, 2 * restricted_n_max as u32 + 96)?;
        for n in 0..=restricted_n_max {
            for m in 0..=n {
                for k in 0..=m {
                    let r = pmf_restricted(n, m, k, params)?;
                    d.restricted = d.restricted.max((r - small.pmf(m, k)?).abs());
                }
            }
        }
    }
    Ok(d)
}

fn verify_dist(exec: &Executor, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut points: Vec<(f64, f64)> = Vec::new();
    for &p in &opts.dist_grid {
        for &q in &opts.dist_grid {
            points.push((p, q));
        }
        if !opts.dist_grid.contains(&1.0) {
            points.push((p, 1.0));
        }
    }
    let per_point = exec.map(points.len(), |i| {
        let (p, q) = points[i];
        let params = EpidemicParams::new(p, q)?;
        dist_deviations(params, opts.dist_n_max, opts.restricted_n_max)
    });
    let mut worst = DistDeviations::default();
    for d in per_point {
        worst = worst.max(d?);
    }
    let n = opts.dist_n_max;
    let check = |name: String, value: f64, tol: f64| {
        Check::new(
            name,
            value <= tol,
            format!("max deviation {value:.3e}, tolerance {tol:e}"),
        )
    };
    Ok(vec![
        check(
            format!("direct vs series, n <= {n}"),
            worst.direct_vs_series,
            1e-12,
        ),
        check(
            format!("direct vs recursive, n <= {n}"),
            worst.direct_vs_recursive,
            1e-12,
        ),
        check(
            format!("series vs recursive, n <= {n}"),
            worst.series_vs_recursive,
            1e-12,
        ),
        check(format!("row sums, n <= {n}"), worst.row_sum, 1e-12),
        check("q = 1 rows are binomial".into(), worst.binomial, 1e-14),
        check(
            "mean equals n times transmissibility".into(),
            worst.mean_identity,
            1e-10,
        ),
        check(
            format!("restricted process, n <= {}", opts.restricted_n_max),
            worst.restricted,
            1e-10,
        ),
    ])
}

/// Small fixture graphs with their seed node.
pub fn equivalence_fixtures() -> Vec<(&'static str, Network, usize)> {
    let fixtures = [
        ("path5", graph::generate_test_graph(TestGraph::Path, 5), 1),
        ("star6", graph::generate_test_graph(TestGraph::Star, 6), 0),
        ("cycle6", graph::generate_test_graph(TestGraph::Cycle, 6), 0),
        (
            "complete5",
            graph::generate_test_graph(TestGraph::Complete, 5),
            0,
        ),
        ("binary_tree7", graph::generate_m_ary_tree(2, 2), 0),
    ];
    fixtures
        .into_iter()
        .map(|(name, net, seed)| (name, net.expect("fixture parameters are valid"), seed))
        .collect()
}

pub const EQUIVALENCE_POINTS: [(f64, f64); 6] = [
    (0.1, 0.1),
    (0.2, 0.3),
    (0.5, 0.5),
    (0.8, 0.2),
    (0.3, 0.9),
    (0.6, 1.0),
];

/// Successive differences of a CDF row.
pub fn masses_from_cdf(cdf: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    cdf.iter()
        .map(|&c| {
            let m = c - prev;
            prev = c;
            m
        })
        .collect()
}

/// Reverses the masses of one CDF row: `P'(k) = P(n - k)`.
pub fn reverse_row(cdf: &[f64]) -> Vec<f64> {
    let mut masses = masses_from_cdf(cdf);
    masses.reverse();
    distributions::cdf_from_masses(&masses)
}

fn verify_equivalence(exec: &Executor, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let fixtures = equivalence_fixtures();
    let tests = fixtures.len() * EQUIVALENCE_POINTS.len() * 2;
    let alpha = opts.alpha / tests as f64;
    let mut checks = Vec::new();
    for (name, net, seed) in &fixtures {
        for &(p, q) in &EQUIVALENCE_POINTS {
            let params = EpidemicParams::new(p, q)?;
            let exact = analysis::exact_final_size(net, params, &[*seed])?;
            checks.push(Check::new(
                format!("{name} p={p} q={q} exact masses sum to 1"),
                (exact.total() - 1.0).abs() <= 1e-10,
                format!("sum {:.15}", exact.total()),
            ));
            let mut table =
                InfectionCdfTable::for_network(params, net, PrecisionPolicy::default())?;
            if opts.corrupt_cdf {
                let degree = net.degree(*seed);
                let row = table
                    .row(degree)
                    .expect("table covers the network")
                    .to_vec();
                table.replace_row(degree, reverse_row(&row))?;
            }
            let input = CellInput {
                net,
                params,
                seeds: std::slice::from_ref(seed),
                master_seed: opts.master_seed,
            };
            for algorithm in [Algorithm::Naive, Algorithm::Fast] {
                let cell = run_repetitions(
                    exec,
                    input,
                    opts.equivalence_reps,
                    algorithm,
                    &TableSource::Table(&table),
                )?;
                let report = analysis::chi_square_gof(&cell.histogram, &exact.masses, alpha)?;
                checks.push(Check::new(
                    format!(
                        "{name} p={p} q={q} {} matches exact final size",
                        algorithm.name()
                    ),
                    report.passed,
                    format!(
                        "chi2 = {:.2}, dof = {}, p-value = {:.3e}, alpha = {alpha:.1e}",
                        report.statistic, report.degrees_of_freedom, report.p_value
                    ),
                ));
            }
        }
    }
    Ok(checks)
}

pub const TREE_SHAPES: [(usize, usize); 4] = [(2, 2), (2, 4), (3, 2), (3, 4)];
pub const TREE_GRID: [f64; 3] = [0.1, 0.5, 0.9];

/// Monte Carlo means and standard errors of Naive SIR from the root of an
/// m-ary tree: `(mean_duration, se_duration, mean_size, se_size)`.
pub fn tree_monte_carlo(
    exec: &Executor,
    m: usize,
    depth: usize,
    params: EpidemicParams,
    reps: usize,
    master_seed: u64,
) -> Result<(f64, f64, f64, f64)> {
    let net = graph::generate_m_ary_tree(m, depth)?;
    let runs = exec.run_streams(
        Algorithm::Naive,
        &net,
        params,
        None,
        &[0],
        master_seed,
        0..reps as u64,
    )?;
    let stats = |xs: Vec<f64>| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    let (md, sd) = stats(runs.iter().map(|r| r.duration as f64).collect());
    let (ms, ss) = stats(runs.iter().map(|r| r.total_infected as f64).collect());
    Ok((md, sd, ms, ss))
}

fn verify_tree(exec: &Executor, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (m, depth) in TREE_SHAPES {
        for p in TREE_GRID {
            for q in TREE_GRID {
                let params = EpidemicParams::new(p, q)?;
                let bound = analysis::tree_bound(m, depth, params)?;
                let (md, sd, ms, ss) =
                    tree_monte_carlo(exec, m, depth, params, opts.tree_reps, opts.master_seed)?;
                let limit = bound.duration_bound_unrolled + 3.0 * sd;
                checks.push(Check::new(
                    format!("tree m={m} depth={depth} p={p} q={q} duration"),
                    md <= limit,
                    format!(
                        "mean {md:.4} (se {sd:.4}) vs bound {:.4}",
                        bound.duration_bound_unrolled
                    ),
                ));
                if m as f64 * transmissibility(params) < 1.0 {
                    let expected = bound.expected_size_unrolled;
                    checks.push(Check::new(
                        format!("tree m={m} depth={depth} p={p} q={q} size"),
                        (ms - expected).abs() <= 3.0 * ss,
                        format!("mean {ms:.4} (se {ss:.4}) vs expected {expected:.4}"),
                    ));
                }
            }
        }
    }
    Ok(checks)
}

/// Index of a `k1`-subset of `0..k` in colexicographic order.
fn subset_rank(subset: &[u32]) -> usize {
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    sorted
        .iter()
        .enumerate()
        .map(|(i, &c)| binomial_usize(c as usize, i + 1))
        .sum()
}

fn binomial_usize(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Histogram of `draws` subsets of size `k1` from `0..k`, indexed by rank.
pub fn subset_histogram(k: usize, k1: usize, draws: usize, master_seed: u64) -> Vec<u64> {
    let mut rng = RngStream::new(master_seed, 0).rng();
    let mut sampler = SubsetSampler::new();
    let mut hist = vec![0u64; binomial_usize(k, k1)];
    for _ in 0..draws {
        hist[subset_rank(sampler.sample(k, k1, &mut rng))] += 1;
    }
    hist
}

/// Sampler work per call for each `k1` in `k1s`.
pub fn subset_work_per_call(k: usize, k1s: &[usize], calls: usize, master_seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(master_seed, 1).rng();
    k1s.iter()
        .map(|&k1| {
            let mut sampler = SubsetSampler::new();
            for _ in 0..calls {
                sampler.sample(k, k1, &mut rng);
            }
            sampler.work() as f64 / calls as f64
        })
        .collect()
}

fn verify_sampling(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let alpha = opts.alpha / 3.0;
    for (k, k1) in [(6, 3), (6, 1), (6, 5)] {
        let hist = subset_histogram(k, k1, opts.sampling_draws, opts.master_seed);
        let uniform = vec![1.0 / hist.len() as f64; hist.len()];
        let report = analysis::chi_square_gof(&hist, &uniform, alpha)?;
        checks.push(Check::new(
            format!("uniform {k1}-subsets of {k}"),
            report.passed,
            format!(
                "{} subsets, chi2 = {:.2}, p-value = {:.3e}",
                hist.len(),
                report.statistic,
                report.p_value
            ),
        ));
    }
    let k = 1000;
    let k1s = [0, 10, 100, 500, 900, 990, 1000];
    let work = subset_work_per_call(k, &k1s, 100, opts.master_seed);
    let exact = k1s
        .iter()
        .zip(&work)
        .all(|(&k1, &w)| w == k1.min(k - k1) as f64);
    checks.push(Check::new(
        "sampler work equals min(k1, k - k1)",
        exact,
        format!("k = {k}, k1 = {k1s:?}, work per call = {work:?}"),
    ));

    let params = EpidemicParams::new(0.3, 0.4)?;
    let table = InfectionCdfTable::dense(params, 12, PrecisionPolicy::default())?;
    let row = table.row(12).expect("dense table");
    let mut rng = RngStream::new(opts.master_seed, 2).rng();
    let mut hist = vec![0u64; 13];
    for _ in 0..opts.sampling_draws {
        hist[simulate::sample_infection_count(row, rng.random::<f64>())?] += 1;
    }
    let report = analysis::chi_square_gof(&hist, &masses_from_cdf(row), opts.alpha)?;
    checks.push(Check::new(
        "inverse transform reproduces the degree-12 row",
        report.passed,
        format!(
            "chi2 = {:.2}, p-value = {:.3e}",
            report.statistic, report.p_value
        ),
    ));
    Ok(checks)
}
