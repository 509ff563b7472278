//! Contact networks: loading, validation, synthetic generators and degree
//! statistics.
//!
//! A [`Network`] is an immutable simple undirected graph stored in CSR form
//! (one offset array plus one flat neighbor array). Neighbor lists are sorted
//! so that simulations are byte-deterministic for a given RNG stream.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("edge list contains no edges")]
    EmptyEdgeSet,
    #[error("node count overflows the supported index range")]
    TooLarge,
    #[error("invalid generator argument: {0}")]
    InvalidArgument(String),
    #[error("network invariant violated: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Undirected, unweighted contact network with dense node indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Network {
    offsets: Vec<usize>,
    targets: Vec<u32>,
    link_count: usize,
}

impl Network {
    /// Builds a network on `node_count` nodes from an arbitrary edge list.
    /// Self-loops are dropped and duplicate edges merged.
    pub fn from_edges(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if node_count > u32::MAX as usize {
            return Err(GraphError::TooLarge);
        }
        let mut lists: Vec<Vec<u32>> = vec![Vec::new(); node_count];
        for (u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(GraphError::Invalid(format!(
                    "edge ({u}, {v}) out of range for {node_count} nodes"
                )));
            }
            if u == v {
                continue;
            }
            lists[u].push(v as u32);
            lists[v].push(u as u32);
        }
        let mut offsets = Vec::with_capacity(node_count + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            targets.extend_from_slice(list);
            offsets.push(targets.len());
        }
        let link_count = targets.len() / 2;
        Ok(Self {
            offsets,
            targets,
            link_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn link_count(&self) -> usize {
        self.link_count
    }

    #[inline]
    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    #[inline]
    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn degrees(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }

    /// Node with the largest degree; ties go to the lowest index.
    pub fn max_degree_node(&self) -> Option<usize> {
        let mut best: Option<(usize, usize)> = None;
        for (node, d) in self.degrees().enumerate() {
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((node, d));
            }
        }
        best.map(|(node, _)| node)
    }

    /// Checks every structural invariant. Constructors already guarantee
    /// these; the validator exists for tests and for loaded data.
    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        let mut total = 0usize;
        for u in 0..n {
            let list = self.neighbors(u);
            total += list.len();
            for w in list.windows(2) {
                if w[0] >= w[1] {
                    return Err(GraphError::Invalid(format!(
                        "adjacency of {u} is not strictly increasing"
                    )));
                }
            }
            for &v in list {
                let v = v as usize;
                if v >= n {
                    return Err(GraphError::Invalid(format!(
                        "neighbor {v} of {u} out of range"
                    )));
                }
                if v == u {
                    return Err(GraphError::Invalid(format!("self-loop at {u}")));
                }
                if self.neighbors(v).binary_search(&(u as u32)).is_err() {
                    return Err(GraphError::Invalid(format!("edge {u}->{v} has no reverse")));
                }
            }
        }
        if total != 2 * self.link_count {
            return Err(GraphError::Invalid(format!(
                "link_count {} but adjacency holds {total} entries",
                self.link_count
            )));
        }
        Ok(())
    }

    /// Nodes reachable from any of `seeds`.
    pub fn component_of(&self, seeds: &[usize]) -> Vec<bool> {
        let mut seen = vec![false; self.node_count()];
        let mut queue = VecDeque::new();
        for &s in seeds {
            if s < seen.len() && !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u) {
                let v = v as usize;
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    pub fn is_connected(&self) -> bool {
        self.node_count() == 0 || self.component_of(&[0]).iter().all(|&b| b)
    }

    /// Serializes as an edge list using dense ids. Lines are ordered by the
    /// larger endpoint, then by the smaller endpoint descending; with this
    /// order a network whose ids are in first-appearance order (every
    /// network produced by [`load_edge_list`]) reloads to itself.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for v in 0..self.node_count() {
            for &u in self.neighbors(v).iter().rev() {
                if (u as usize) < v {
                    let _ = writeln!(out, "{u} {v}");
                }
            }
        }
        out
    }
}

/// Parses a whitespace-separated edge list, one edge per line. Lines starting
/// with `#` or `%` are comments; columns after the first two are ignored.
pub fn load_edge_list(source: impl BufRead) -> Result<Network> {
    load_edge_list_with_ids(source).map(|(net, _)| net)
}

/// Like [`load_edge_list`], also returning the original id of every dense
/// node index (first-appearance order).
pub fn load_edge_list_with_ids(source: impl BufRead) -> Result<(Network, Vec<u64>)> {
    let mut ids: HashMap<u64, usize> = HashMap::new();
    let mut original: Vec<u64> = Vec::new();
    let mut edges = Vec::new();
    let mut intern = |raw: u64| -> usize {
        *ids.entry(raw).or_insert_with(|| {
            original.push(raw);
            original.len() - 1
        })
    };
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('%') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let mut endpoint = || -> Result<u64> {
            let tok = tokens.next().ok_or_else(|| GraphError::Parse {
                line: lineno,
                message: "expected two node ids".into(),
            })?;
            tok.parse::<u64>().map_err(|_| GraphError::Parse {
                line: lineno,
                message: format!("malformed node id {tok:?}"),
            })
        };
        let a = endpoint()?;
        let b = endpoint()?;
        if a == b {
            continue;
        }
        let (u, v) = (intern(a), intern(b));
        edges.push((u, v));
    }
    if edges.is_empty() {
        return Err(GraphError::EmptyEdgeSet);
    }
    let net = Network::from_edges(original.len(), edges)?;
    Ok((net, original))
}

/// Writes the `original_id,dense_id` remap table.
pub fn write_id_map(original_ids: &[u64], mut sink: impl Write) -> std::io::Result<()> {
    writeln!(sink, "original_id,dense_id")?;
    for (dense, raw) in original_ids.iter().enumerate() {
        writeln!(sink, "{raw},{dense}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegreeStats {
    pub k_max: usize,
    pub mean_degree: f64,
    /// Sorted, without repetition.
    pub distinct_degrees: Vec<usize>,
    /// Sum over `distinct_degrees`: the number of CDF rows a sparse table
    /// holds beyond the per-row constant.
    pub sum_distinct_degrees: usize,
}

pub fn degree_stats(net: &Network) -> DegreeStats {
    let mut seen = vec![false; net.degrees().max().unwrap_or(0) + 1];
    for d in net.degrees() {
        seen[d] = true;
    }
    let distinct_degrees: Vec<usize> = seen
        .iter()
        .enumerate()
        .filter_map(|(d, &s)| s.then_some(d))
        .collect();
    let n = net.node_count();
    DegreeStats {
        k_max: distinct_degrees.last().copied().unwrap_or(0),
        mean_degree: if n == 0 {
            0.0
        } else {
            2.0 * net.link_count() as f64 / n as f64
        },
        sum_distinct_degrees: distinct_degrees.iter().sum(),
        distinct_degrees,
    }
}

/// Complete m-ary tree with `depth + 1` levels. Nodes are numbered in
/// breadth-first order, so the root is 0 and the children of `i` are
/// `m*i + 1 ..= m*i + m`.
pub fn generate_m_ary_tree(m: usize, depth: usize) -> Result<Network> {
    if m == 0 {
        return Err(GraphError::InvalidArgument("m must be at least 1".into()));
    }
    let mut count: usize = 0;
    let mut level: usize = 1;
    for _ in 0..=depth {
        count = count.checked_add(level).ok_or(GraphError::TooLarge)?;
        level = level.checked_mul(m).ok_or(GraphError::TooLarge)?;
    }
    if count > u32::MAX as usize {
        return Err(GraphError::TooLarge);
    }
    Network::from_edges(count, (1..count).map(|child| ((child - 1) / m, child)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestGraph {
    Path,
    Cycle,
    Star,
    Complete,
}

/// Canonical fixture graphs. The star has its center at node 0.
pub fn generate_test_graph(kind: TestGraph, n: usize) -> Result<Network> {
    let min = match kind {
        TestGraph::Cycle => 3,
        _ => 1,
    };
    if n < min {
        return Err(GraphError::InvalidArgument(format!(
            "{kind:?} needs at least {min} nodes, got {n}"
        )));
    }
    let edges: Vec<(usize, usize)> = match kind {
        TestGraph::Path => (1..n).map(|i| (i - 1, i)).collect(),
        TestGraph::Cycle => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        TestGraph::Star => (1..n).map(|i| (0, i)).collect(),
        TestGraph::Complete => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
    };
    Network::from_edges(n, edges)
}

/// Configuration-model graph with a power-law degree sequence
/// `P(k) ~ k^-exponent` on `[k_min, k_cap]`. Stubs are matched uniformly at
/// random; the resulting self-loops and multi-edges are dropped.
pub fn generate_scale_free<R: Rng + ?Sized>(
    n: usize,
    exponent: f64,
    k_min: usize,
    k_cap: usize,
    rng: &mut R,
) -> Result<Network> {
    if n < 2 || k_min == 0 || k_cap < k_min || exponent <= 1.0 {
        return Err(GraphError::InvalidArgument(format!(
            "scale-free generator needs n >= 2, 1 <= k_min <= k_cap, exponent > 1 (got n={n}, k_min={k_min}, k_cap={k_cap}, exponent={exponent})"
        )));
    }
    let weights: Vec<f64> = (k_min..=k_cap)
        .map(|k| (k as f64).powf(-exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    let mut stubs: Vec<usize> = Vec::new();
    for node in 0..n {
        let r: f64 = rng.random();
        let idx = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
        let k = k_min + idx;
        stubs.extend(std::iter::repeat_n(node, k));
    }
    if stubs.len() % 2 == 1 {
        stubs.push(rng.random_range(0..n));
    }
    stubs.shuffle(rng);
    Network::from_edges(n, stubs.chunks_exact(2).map(|c| (c[0], c[1])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Network> {
        load_edge_list(text.as_bytes())
    }

    #[test]
    fn path_of_three() {
        let net = parse("0 1\n1 2").unwrap();
        assert_eq!(net.node_count(), 3);
        assert_eq!(net.link_count(), 2);
        assert_eq!(net.neighbors(1), &[0, 2]);
        net.validate().unwrap();
    }

    #[test]
    fn duplicates_and_self_loops() {
        let net = parse("0 1\n1 0\n0 0").unwrap();
        assert_eq!(net.node_count(), 2);
        assert_eq!(net.link_count(), 1);
    }

    #[test]
    fn comments_and_remap() {
        let text = "% konect header\n# another\n\n10 20\n20 30 1.0 99\n";
        let (net, ids) = load_edge_list_with_ids(text.as_bytes()).unwrap();
        assert_eq!(ids, vec![10, 20, 30]);
        assert_eq!(net.neighbors(1), &[0, 2]);
        let mut csv = Vec::new();
        write_id_map(&ids, &mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "original_id,dense_id\n10,0\n20,1\n30,2\n"
        );
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match parse("0 1\n1 x\n") {
            Err(GraphError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse("# c\n7\n") {
            Err(GraphError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse("# nothing\n"),
            Err(GraphError::EmptyEdgeSet)
        ));
        assert!(matches!(parse("3 3\n"), Err(GraphError::EmptyEdgeSet)));
    }

    #[test]
    fn degree_stats_of_path() {
        let stats = degree_stats(&parse("0 1\n1 2").unwrap());
        assert_eq!(stats.k_max, 2);
        assert!((stats.mean_degree - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(stats.distinct_degrees, vec![1, 2]);
        assert_eq!(stats.sum_distinct_degrees, 3);
    }

    #[test]
    fn m_ary_tree_sizes() {
        let t = generate_m_ary_tree(2, 0).unwrap();
        assert_eq!((t.node_count(), t.link_count()), (1, 0));
        let t = generate_m_ary_tree(2, 1).unwrap();
        assert_eq!((t.node_count(), t.link_count()), (3, 2));
        let t = generate_m_ary_tree(3, 2).unwrap();
        assert_eq!((t.node_count(), t.link_count()), (13, 12));
        let t = generate_m_ary_tree(1, 4).unwrap();
        assert_eq!(t.node_count(), 5);
        assert!(generate_m_ary_tree(0, 3).is_err());
        assert!(matches!(
            generate_m_ary_tree(2, 200),
            Err(GraphError::TooLarge)
        ));
    }

    #[test]
    fn m_ary_tree_degrees() {
        for (m, depth) in [(2, 3), (3, 2), (4, 3)] {
            let t = generate_m_ary_tree(m, depth).unwrap();
            t.validate().unwrap();
            let first_leaf = t.node_count() - m.pow(depth as u32);
            assert_eq!(t.degree(0), m);
            for v in 1..first_leaf {
                assert_eq!(t.degree(v), m + 1, "internal node {v}");
            }
            for v in first_leaf..t.node_count() {
                assert_eq!(t.degree(v), 1, "leaf {v}");
            }
        }
    }

    #[test]
    fn fixtures() {
        let p = generate_test_graph(TestGraph::Path, 3).unwrap();
        assert_eq!(p.neighbors(1), &[0, 2]);
        let s = generate_test_graph(TestGraph::Star, 4).unwrap();
        assert_eq!(s.degree(0), 3);
        assert_eq!(s.max_degree_node(), Some(0));
        let k = generate_test_graph(TestGraph::Complete, 4).unwrap();
        assert_eq!(k.link_count(), 6);
        let c = generate_test_graph(TestGraph::Cycle, 5).unwrap();
        assert!(c.degrees().all(|d| d == 2));
        assert!(generate_test_graph(TestGraph::Cycle, 2).is_err());
        assert!(generate_test_graph(TestGraph::Path, 0).is_err());
        for g in [p, s, k, c] {
            g.validate().unwrap();
            assert!(g.is_connected());
        }
    }

    #[test]
    fn scale_free_is_valid() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let net = generate_scale_free(2000, 2.5, 2, 40, &mut rng).unwrap();
        net.validate().unwrap();
        let stats = degree_stats(&net);
        assert!(stats.k_max <= 40);
        assert!(stats.mean_degree > 2.0);
    }

    #[test]
    fn component_reachability() {
        let net = parse("0 1\n1 2\n3 4").unwrap();
        assert_eq!(net.component_of(&[0]), vec![true, true, true, false, false]);
        assert!(!net.is_connected());
    }

    proptest! {
        #[test]
        fn arbitrary_edge_lists_normalize(edges in prop::collection::vec((0u64..30, 0u64..30), 1..80)) {
            let text: String = edges.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
            match parse(&text) {
                Ok(net) => {
                    net.validate().unwrap();
                    let reloaded = parse(&net.to_edge_list()).unwrap();
                    prop_assert_eq!(&reloaded, &net);
                }
                Err(GraphError::EmptyEdgeSet) => prop_assert!(edges.iter().all(|(a, b)| a == b)),
                Err(e) => panic!("{e}"),
            }
        }
    }
}
