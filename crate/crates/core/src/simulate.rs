//! Single epidemic realizations.
//!
//! [`run_naive`] follows the epidemic in discrete time: every infected node
//! tries each susceptible neighbor once per step and then recovers with
//! probability `q`. [`run_fast`] orders the work by generation instead: each
//! infected node is dequeued exactly once, draws how many neighbors it will
//! infect over its whole infectious period from an [`InfectionCdfTable`],
//! picks that many of its neighbors uniformly, and infects the ones still
//! susceptible. Both produce identically distributed final sizes.
//!
//! All randomness comes from an [`RngStream`], so a run is a pure function of
//! `(network, params, seeds, master_seed, stream_index)`.

use std::collections::VecDeque;

use fixedbitset::FixedBitSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::distributions::{DistError, EpidemicParams, InfectionCdfTable};
use crate::graph::Network;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no seed nodes given")]
    NoSeeds,
    #[error("seed node {node} is out of range for a network of {node_count} nodes")]
    InvalidSeed { node: usize, node_count: usize },
    #[error("cannot pick {k1} of {k} neighbors")]
    SubsetTooLarge { k: usize, k1: usize },
    #[error("FastSIR needs an infection CDF table")]
    MissingTable,
    #[error("malformed CDF row: {0}")]
    MalformedRow(String),
    #[error(transparent)]
    Table(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// The generator behind every simulation: ChaCha with 8 rounds.
pub type SimRng = ChaCha8Rng;

/// Names one independent random stream. The master seed is expanded to a
/// ChaCha key and the stream index selects ChaCha's 64-bit stream, so
/// distinct indices never share keystream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    pub fn rng(&self) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkCounters {
    pub dequeues: u64,
    pub infection_attempts: u64,
    pub rng_draws: u64,
    /// Iterations spent choosing neighbor subsets (FastSIR only).
    pub subset_work: u64,
}

/// Final size and duration of one run without the per-node indicator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub total_infected: usize,
    /// Synchronous steps for Naive SIR, generation depth + 1 for FastSIR.
    pub duration: u32,
    pub counters: WorkCounters,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimulationOutcome {
    /// `R(v)`: every node that was ever infected, hence finally recovered.
    pub recovered: FixedBitSet,
    pub total_infected: usize,
    pub duration: u32,
    pub counters: WorkCounters,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Naive,
    Fast,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Naive => "naive",
            Algorithm::Fast => "fast",
        }
    }
}

/// Smallest `k` with `cdf[k] > r`.
#[inline]
fn inverse_cdf(cdf: &[f64], r: f64) -> usize {
    cdf.partition_point(|&c| c <= r).min(cdf.len() - 1)
}

/// Inverse-transform draw of the number of infected neighbors: the smallest
/// `k1` with `cdf_row[k1] > r`, by binary search.
pub fn sample_infection_count(cdf_row: &[f64], r: f64) -> Result<usize> {
    match cdf_row.last() {
        None => return Err(SimError::MalformedRow("empty row".into())),
        Some(&last) if last != 1.0 => {
            return Err(SimError::MalformedRow(format!("row ends at {last}, not 1")))
        }
        _ => {}
    }
    if !(0.0..1.0).contains(&r) {
        return Err(SimError::MalformedRow(format!(
            "uniform draw {r} outside [0, 1)"
        )));
    }
    Ok(inverse_cdf(cdf_row, r))
}

/// Uniform random k1-subsets of `0..k` in `O(min(k1, k - k1))` sampling
/// work: Floyd's algorithm draws the smaller of the subset and its
/// complement, with membership tracked by generation stamps so nothing is
/// cleared between calls.
#[derive(Clone, Debug, Default)]
pub struct SubsetSampler {
    marks: Vec<u32>,
    stamp: u32,
    picked: Vec<u32>,
    work: u64,
}

impl SubsetSampler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total Floyd iterations performed so far.
    pub fn work(&self) -> u64 {
        self.work
    }

    /// Returns the chosen indices. Panics if `k1 > k`.
    pub fn sample<R: Rng + ?Sized>(&mut self, k: usize, k1: usize, rng: &mut R) -> &[u32] {
        assert!(k1 <= k, "cannot pick {k1} of {k}");
        if self.marks.len() < k {
            self.marks.resize(k, 0);
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
        let stamp = self.stamp;
        let small = k1.min(k - k1);
        self.picked.clear();
        for j in (k - small)..k {
            let t = rng.random_range(0..=j);
            let pick = if self.marks[t] == stamp { j } else { t };
            self.marks[pick] = stamp;
            self.picked.push(pick as u32);
        }
        self.work += small as u64;
        if small != k1 {
            self.picked.clear();
            self.picked
                .extend((0..k as u32).filter(|&i| self.marks[i as usize] != stamp));
        }
        &self.picked
    }
}

/// One uniformly random `k1`-subset of `0..k`.
pub fn sample_subset<R: Rng + ?Sized>(k: usize, k1: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k1 > k {
        return Err(SimError::SubsetTooLarge { k, k1 });
    }
    let mut sampler = SubsetSampler::new();
    Ok(sampler
        .sample(k, k1, rng)
        .iter()
        .map(|&i| i as usize)
        .collect())
}

const SUSCEPTIBLE: u8 = 0;
const INFECTED: u8 = 1;

/// Run-local state, reusable across runs on the same network. Only the
/// nodes touched by the previous run are reset, so a small outbreak on a
/// large network costs time proportional to the outbreak.
#[derive(Clone, Debug)]
pub struct Workspace {
    state: Vec<u8>,
    infected: Vec<u32>,
    queue: VecDeque<(u32, u32)>,
    sampler: SubsetSampler,
}

impl Workspace {
    pub fn new(net: &Network) -> Self {
        Self {
            state: vec![SUSCEPTIBLE; net.node_count()],
            infected: Vec::new(),
            queue: VecDeque::new(),
            sampler: SubsetSampler::new(),
        }
    }

    /// Nodes infected in the last run, in infection order.
    pub fn infected_nodes(&self) -> &[u32] {
        &self.infected
    }

    fn reset(&mut self, net: &Network, seeds: &[usize]) -> Result<()> {
        if seeds.is_empty() {
            return Err(SimError::NoSeeds);
        }
        if let Some(&bad) = seeds.iter().find(|&&s| s >= net.node_count()) {
            return Err(SimError::InvalidSeed {
                node: bad,
                node_count: net.node_count(),
            });
        }
        if self.state.len() != net.node_count() {
            self.state = vec![SUSCEPTIBLE; net.node_count()];
        } else {
            for &v in &self.infected {
                self.state[v as usize] = SUSCEPTIBLE;
            }
        }
        self.infected.clear();
        self.queue.clear();
        for &s in seeds {
            if self.state[s] == SUSCEPTIBLE {
                self.state[s] = INFECTED;
                self.infected.push(s as u32);
                self.queue.push_back((s as u32, 0));
            }
        }
        Ok(())
    }

    /// Naive SIR. Queue entries carry the step in which the node acts;
    /// infections made in step `t` act from step `t + 1`, and a node that
    /// does not recover is re-enqueued for the next step.
    pub fn run_naive<R: Rng + ?Sized>(
        &mut self,
        net: &Network,
        params: EpidemicParams,
        seeds: &[usize],
        rng: &mut R,
    ) -> Result<RunSummary> {
        self.reset(net, seeds)?;
        let (p, q) = (params.p(), params.q());
        let mut counters = WorkCounters::default();
        let mut last_step = 0;
        while let Some((u, step)) = self.queue.pop_front() {
            counters.dequeues += 1;
            last_step = step;
            for &v in net.neighbors(u as usize) {
                if self.state[v as usize] == SUSCEPTIBLE {
                    counters.infection_attempts += 1;
                    counters.rng_draws += 1;
                    if rng.random::<f64>() < p {
                        self.state[v as usize] = INFECTED;
                        self.infected.push(v);
                        self.queue.push_back((v, step + 1));
                    }
                }
            }
            counters.rng_draws += 1;
            if rng.random::<f64>() >= q {
                self.queue.push_back((u, step + 1));
            }
        }
        Ok(RunSummary {
            total_infected: self.infected.len(),
            duration: last_step + 1,
            counters,
        })
    }

    /// FastSIR. Each dequeued node draws `k1` against its full degree, picks
    /// `k1` neighbors uniformly, infects those still susceptible, and is
    /// done.
    pub fn run_fast<R: Rng + ?Sized>(
        &mut self,
        net: &Network,
        params: EpidemicParams,
        table: &InfectionCdfTable,
        seeds: &[usize],
        rng: &mut R,
    ) -> Result<RunSummary> {
        table.check_params(params)?;
        self.reset(net, seeds)?;
        let mut counters = WorkCounters::default();
        let work_before = self.sampler.work();
        let mut last_generation = 0;
        while let Some((u, generation)) = self.queue.pop_front() {
            counters.dequeues += 1;
            last_generation = generation;
            let neighbors = net.neighbors(u as usize);
            let degree = neighbors.len();
            if degree == 0 {
                continue;
            }
            let row = table.row(degree).ok_or(DistError::MissingDegree(degree))?;
            counters.rng_draws += 1;
            let k1 = inverse_cdf(row, rng.random::<f64>());
            for &idx in self.sampler.sample(degree, k1, rng) {
                let v = neighbors[idx as usize];
                counters.infection_attempts += 1;
                if self.state[v as usize] == SUSCEPTIBLE {
                    self.state[v as usize] = INFECTED;
                    self.infected.push(v);
                    self.queue.push_back((v, generation + 1));
                }
            }
        }
        counters.subset_work = self.sampler.work() - work_before;
        Ok(RunSummary {
            total_infected: self.infected.len(),
            duration: last_generation + 1,
            counters,
        })
    }

    pub fn run<R: Rng + ?Sized>(
        &mut self,
        algorithm: Algorithm,
        net: &Network,
        params: EpidemicParams,
        table: Option<&InfectionCdfTable>,
        seeds: &[usize],
        rng: &mut R,
    ) -> Result<RunSummary> {
        match (algorithm, table) {
            (Algorithm::Naive, _) => self.run_naive(net, params, seeds, rng),
            (Algorithm::Fast, Some(table)) => self.run_fast(net, params, table, seeds, rng),
            (Algorithm::Fast, None) => Err(SimError::MissingTable),
        }
    }

    fn outcome(&self, net: &Network, summary: RunSummary) -> SimulationOutcome {
        let mut recovered = FixedBitSet::with_capacity(net.node_count());
        for &v in &self.infected {
            recovered.insert(v as usize);
        }
        SimulationOutcome {
            recovered,
            total_infected: summary.total_infected,
            duration: summary.duration,
            counters: summary.counters,
        }
    }
}

/// One Naive SIR realization.
pub fn run_naive(
    net: &Network,
    params: EpidemicParams,
    seeds: &[usize],
    stream: RngStream,
) -> Result<SimulationOutcome> {
    let mut ws = Workspace::new(net);
    let summary = ws.run_naive(net, params, seeds, &mut stream.rng())?;
    Ok(ws.outcome(net, summary))
}

/// One FastSIR realization. `table` must be built for the same `(p, q)` and
/// contain a row for every degree the epidemic reaches.
pub fn run_fast(
    net: &Network,
    params: EpidemicParams,
    table: &InfectionCdfTable,
    seeds: &[usize],
    stream: RngStream,
) -> Result<SimulationOutcome> {
    let mut ws = Workspace::new(net);
    let summary = ws.run_fast(net, params, table, seeds, &mut stream.rng())?;
    Ok(ws.outcome(net, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::PrecisionPolicy;
    use crate::graph::{generate_test_graph, TestGraph};

    fn params(p: f64, q: f64) -> EpidemicParams {
        EpidemicParams::new(p, q).unwrap()
    }

    fn table(net: &Network, pq: EpidemicParams) -> InfectionCdfTable {
        InfectionCdfTable::for_network(pq, net, PrecisionPolicy::default()).unwrap()
    }

    #[test]
    fn inverse_transform_boundaries() {
        let row = [0.25, 0.75, 1.0];
        assert_eq!(sample_infection_count(&row, 0.0).unwrap(), 0);
        assert_eq!(sample_infection_count(&row, 0.2499).unwrap(), 0);
        assert_eq!(sample_infection_count(&row, 0.25).unwrap(), 1);
        assert_eq!(sample_infection_count(&row, 0.5).unwrap(), 1);
        assert_eq!(sample_infection_count(&row, 0.75).unwrap(), 2);
        assert_eq!(sample_infection_count(&row, 0.999).unwrap(), 2);
        assert!(sample_infection_count(&[], 0.1).is_err());
        assert!(sample_infection_count(&[0.5, 0.9], 0.1).is_err());
        assert!(sample_infection_count(&row, 1.0).is_err());
    }

    #[test]
    fn subset_edge_cases() {
        let mut rng = RngStream::new(1, 0).rng();
        assert!(sample_subset(5, 0, &mut rng).unwrap().is_empty());
        assert_eq!(sample_subset(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(
            sample_subset(3, 4, &mut rng),
            Err(SimError::SubsetTooLarge { .. })
        ));
        for _ in 0..200 {
            let mut s = sample_subset(9, 6, &mut rng).unwrap();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 6);
            assert!(s.iter().all(|&i| i < 9));
        }
    }

    #[test]
    fn subset_work_is_min_side() {
        let mut rng = RngStream::new(2, 0).rng();
        let mut sampler = SubsetSampler::new();
        for k1 in 0..=10 {
            let before = sampler.work();
            assert_eq!(sampler.sample(10, k1, &mut rng).len(), k1);
            assert_eq!(sampler.work() - before, k1.min(10 - k1) as u64);
        }
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let draw = |stream_index| {
            let mut rng = RngStream::new(7, stream_index).rng();
            (0..4).map(|_| rng.random::<u64>()).collect::<Vec<_>>()
        };
        let (a, b, c) = (draw(3), draw(3), draw(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn no_transmission() {
        let net = generate_test_graph(TestGraph::Complete, 6).unwrap();
        let pq = params(0.0, 0.4);
        let t = table(&net, pq);
        for i in 0..20 {
            let naive = run_naive(&net, pq, &[2], RngStream::new(5, i)).unwrap();
            assert_eq!(naive.total_infected, 1);
            assert!(naive.recovered.contains(2));
            let fast = run_fast(&net, pq, &t, &[2], RngStream::new(5, i)).unwrap();
            assert_eq!(fast.total_infected, 1);
            assert_eq!(fast.duration, 1);
        }
    }

    #[test]
    fn certain_transmission_floods() {
        let net = crate::graph::generate_m_ary_tree(3, 3).unwrap();
        let pq = params(1.0, 0.3);
        let t = table(&net, pq);
        let naive = run_naive(&net, pq, &[0], RngStream::new(1, 0)).unwrap();
        assert_eq!(naive.total_infected, net.node_count());
        let fast = run_fast(&net, pq, &t, &[0], RngStream::new(1, 0)).unwrap();
        assert_eq!(fast.total_infected, net.node_count());
        assert_eq!(fast.duration, 4);
        assert_eq!(naive.recovered.count_ones(..), net.node_count());
    }

    #[test]
    fn seed_validation() {
        let net = generate_test_graph(TestGraph::Path, 3).unwrap();
        let pq = params(0.5, 0.5);
        assert!(matches!(
            run_naive(&net, pq, &[], RngStream::new(0, 0)),
            Err(SimError::NoSeeds)
        ));
        assert!(matches!(
            run_naive(&net, pq, &[3], RngStream::new(0, 0)),
            Err(SimError::InvalidSeed { node: 3, .. })
        ));
        let t = table(&net, pq);
        assert!(run_fast(&net, pq, &t, &[7], RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn fast_rejects_mismatched_or_incomplete_tables() {
        let net = generate_test_graph(TestGraph::Star, 5).unwrap();
        let pq = params(0.9, 0.5);
        let other = table(&net, params(0.8, 0.5));
        assert!(matches!(
            run_fast(&net, pq, &other, &[0], RngStream::new(0, 0)),
            Err(SimError::Table(DistError::ParamsMismatch { .. }))
        ));
        let partial = InfectionCdfTable::for_degrees(pq, &[1], PrecisionPolicy::default()).unwrap();
        assert!(matches!(
            run_fast(&net, pq, &partial, &[0], RngStream::new(0, 0)),
            Err(SimError::Table(DistError::MissingDegree(4)))
        ));
    }

    #[test]
    fn determinism_and_invariants() {
        let net = generate_test_graph(TestGraph::Cycle, 40).unwrap();
        let pq = params(0.4, 0.3);
        let t = table(&net, pq);
        for i in 0..50 {
            let stream = RngStream::new(99, i);
            let a = run_naive(&net, pq, &[0, 20], stream).unwrap();
            let b = run_naive(&net, pq, &[0, 20], stream).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.total_infected, a.recovered.count_ones(..));
            assert!(a.total_infected >= 2);
            let f = run_fast(&net, pq, &t, &[0, 20], stream).unwrap();
            assert_eq!(f, run_fast(&net, pq, &t, &[0, 20], stream).unwrap());
            assert_eq!(f.total_infected, f.recovered.count_ones(..));
            assert_eq!(f.counters.dequeues as usize, f.total_infected);
        }
    }

    #[test]
    fn workspace_reuse_matches_fresh_runs() {
        let net = generate_test_graph(TestGraph::Complete, 12).unwrap();
        let pq = params(0.2, 0.6);
        let t = table(&net, pq);
        let mut ws = Workspace::new(&net);
        for i in 0..30 {
            let stream = RngStream::new(4, i);
            let reused = ws.run_fast(&net, pq, &t, &[1], &mut stream.rng()).unwrap();
            let fresh = run_fast(&net, pq, &t, &[1], stream).unwrap();
            assert_eq!(reused.total_infected, fresh.total_infected);
            let reused = ws.run_naive(&net, pq, &[1], &mut stream.rng()).unwrap();
            let fresh = run_naive(&net, pq, &[1], stream).unwrap();
            assert_eq!(reused.total_infected, fresh.total_infected);
            assert_eq!(reused.duration, fresh.duration);
        }
    }

    #[test]
    fn recovered_nodes_are_reachable() {
        let net = crate::graph::load_edge_list("0 1\n1 2\n2 0\n3 4\n4 5\n".as_bytes()).unwrap();
        let pq = params(0.9, 0.2);
        let t = table(&net, pq);
        let reach = net.component_of(&[0]);
        for i in 0..50 {
            let a = run_naive(&net, pq, &[0], RngStream::new(8, i)).unwrap();
            let b = run_fast(&net, pq, &t, &[0], RngStream::new(8, i)).unwrap();
            for v in a.recovered.ones().chain(b.recovered.ones()) {
                assert!(reach[v]);
            }
        }
    }
}
