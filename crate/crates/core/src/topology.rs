//! Peer graph construction, loading and hop-count analysis.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a simulated node.
pub type NodeId = u32;

/// Latency assigned to edge-list entries that do not carry one.
pub const DEFAULT_LATENCY_MS: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: self-loop on node {node}")]
    SelfLoop { line: usize, node: NodeId },
    #[error("line {line}: duplicate edge {u}-{v}")]
    DuplicateEdge { line: usize, u: NodeId, v: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid generator parameters: {0}")]
    Parameters(String),
    #[error("edge list is empty")]
    Empty,
}

/// Undirected peer graph with per-edge latency and a validator/tracker split.
///
/// Node ids are dense: `0..node_count`. Edges are stored with the lower id first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyGraph {
    node_count: usize,
    edges: BTreeMap<(NodeId, NodeId), f64>,
    validators: BTreeSet<NodeId>,
    adjacency: Vec<Vec<NodeId>>,
}

fn edge_key(u: NodeId, v: NodeId) -> (NodeId, NodeId) {
    if u < v {
        (u, v)
    } else {
        (v, u)
    }
}

impl TopologyGraph {
    /// Builds a graph from explicit parts, checking every structural invariant.
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (NodeId, NodeId, f64)>,
        validators: impl IntoIterator<Item = NodeId>,
    ) -> Result<Self, TopologyError> {
        let mut map = BTreeMap::new();
        for (i, (u, v, lat)) in edges.into_iter().enumerate() {
            let line = i + 1;
            if u == v {
                return Err(TopologyError::SelfLoop { line, node: u });
            }
            for n in [u, v] {
                if n as usize >= node_count {
                    return Err(TopologyError::UnknownNode(n));
                }
            }
            if !(lat > 0.0 && lat.is_finite()) {
                return Err(TopologyError::Parse {
                    line,
                    reason: format!("latency must be positive, got {lat}"),
                });
            }
            if map.insert(edge_key(u, v), lat).is_some() {
                let (u, v) = edge_key(u, v);
                return Err(TopologyError::DuplicateEdge { line, u, v });
            }
        }
        let validators: BTreeSet<NodeId> = validators.into_iter().collect();
        if let Some(&bad) = validators.iter().find(|&&v| v as usize >= node_count) {
            return Err(TopologyError::UnknownNode(bad));
        }
        let mut g = TopologyGraph {
            node_count,
            edges: map,
            validators,
            adjacency: Vec::new(),
        };
        g.rebuild_adjacency();
        Ok(g)
    }

    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(u, v) in self.edges.keys() {
            adj[u as usize].push(v);
            adj[v as usize].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        self.adjacency = adj;
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(u, v, latency_ms)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.edges.iter().map(|(&(u, v), &l)| (u, v, l))
    }

    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.edges.contains_key(&edge_key(u, v))
    }

    pub fn latency(&self, u: NodeId, v: NodeId) -> Option<f64> {
        self.edges.get(&edge_key(u, v)).copied()
    }

    /// Sorted neighbor list.
    pub fn neighbors(&self, n: NodeId) -> &[NodeId] {
        &self.adjacency[n as usize]
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.adjacency[n as usize].len()
    }

    pub fn validators(&self) -> &BTreeSet<NodeId> {
        &self.validators
    }

    pub fn is_validator(&self, n: NodeId) -> bool {
        self.validators.contains(&n)
    }

    /// Every node that is not a validator.
    pub fn trackers(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.node_count as NodeId).filter(move |n| !self.validators.contains(n))
    }

    /// `2|E| / N` as an exact fraction.
    pub fn avg_degree_exact(&self) -> Ratio<u64> {
        Ratio::new(2 * self.edges.len() as u64, self.node_count.max(1) as u64)
    }

    /// Connected components, largest first (ties broken by smallest member).
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = vec![false; self.node_count];
        let mut comps = Vec::new();
        for start in 0..self.node_count {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start as NodeId];
            let mut queue = VecDeque::from([start as NodeId]);
            while let Some(u) = queue.pop_front() {
                for &v in self.neighbors(u) {
                    if !seen[v as usize] {
                        seen[v as usize] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        comps
    }

    pub fn is_connected(&self) -> bool {
        self.node_count > 0 && self.components().len() == 1
    }

    /// Serializes to the edge-list text format, always writing the latency column.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# nodes {}\n", self.node_count));
        if !self.validators.is_empty() {
            let ids: Vec<String> = self.validators.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("# validators {}\n", ids.join(" ")));
        }
        for (u, v, l) in self.edges() {
            out.push_str(&format!("{u} {v} {l}\n"));
        }
        out
    }
}

/// Parses an edge list: one `u v [latency_ms]` per line, `#` lines are comments.
///
/// The node set is `0..=max_id`. A `# nodes N` comment widens it to `0..N`.
pub fn load_topology(
    text: &str,
    validator_ids: &BTreeSet<NodeId>,
    default_latency_ms: f64,
) -> Result<TopologyGraph, TopologyError> {
    let mut edges = Vec::new();
    let mut declared: Option<usize> = None;
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let mut parts = comment.split_whitespace();
            if parts.next() == Some("nodes") {
                if let Some(n) = parts.next().and_then(|s| s.parse::<usize>().ok()) {
                    declared = Some(n);
                }
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(TopologyError::Parse {
                line,
                reason: format!("expected `u v [latency_ms]`, got {trimmed:?}"),
            });
        }
        let parse_id = |s: &str| {
            s.parse::<NodeId>().map_err(|_| TopologyError::Parse {
                line,
                reason: format!("invalid node id {s:?}"),
            })
        };
        let u = parse_id(fields[0])?;
        let v = parse_id(fields[1])?;
        let lat = match fields.get(2) {
            Some(s) => s.parse::<f64>().map_err(|_| TopologyError::Parse {
                line,
                reason: format!("invalid latency {s:?}"),
            })?,
            None => default_latency_ms,
        };
        if u == v {
            return Err(TopologyError::SelfLoop { line, node: u });
        }
        if !(lat > 0.0 && lat.is_finite()) {
            return Err(TopologyError::Parse {
                line,
                reason: format!("latency must be positive, got {lat}"),
            });
        }
        if !seen.insert(edge_key(u, v)) {
            let (u, v) = edge_key(u, v);
            return Err(TopologyError::DuplicateEdge { line, u, v });
        }
        edges.push((u, v, lat));
    }
    let max_id = edges.iter().map(|&(u, v, _)| u.max(v)).max();
    let node_count = match (max_id, declared) {
        (Some(m), Some(d)) => d.max(m as usize + 1),
        (Some(m), None) => m as usize + 1,
        (None, Some(d)) if d > 0 => d,
        _ => return Err(TopologyError::Empty),
    };
    TopologyGraph::new(node_count, edges, validator_ids.iter().copied())
}

/// Parameters of the random dense-graph generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub node_count: usize,
    pub target_avg_degree: f64,
    pub validator_fraction: f64,
    pub latency_range_ms: (f64, f64),
    pub seed: u64,
}

/// Configuration-model generator: stub matching toward the target degree,
/// random top-up of collided stubs, then bridging edges until connected.
pub fn generate_topology(p: &GeneratorParams) -> Result<TopologyGraph, TopologyError> {
    let n = p.node_count;
    let d = p.target_avg_degree;
    let bad = |m: String| Err(TopologyError::Parameters(m));
    if n < 2 {
        return bad(format!("node_count must be at least 2, got {n}"));
    }
    if !d.is_finite() || d > (n - 1) as f64 {
        return bad(format!("target degree {d} exceeds n-1 = {}", n - 1));
    }
    let min_connected = 2.0 * (n - 1) as f64 / n as f64;
    if d < min_connected {
        return bad(format!(
            "target degree {d} below {min_connected:.4} needed for a connected graph"
        ));
    }
    if !(p.validator_fraction > 0.0 && p.validator_fraction < 1.0) {
        return bad(format!(
            "validator_fraction must be in (0,1), got {}",
            p.validator_fraction
        ));
    }
    let (lo, hi) = p.latency_range_ms;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return bad(format!(
            "latency range ({lo}, {hi}) must satisfy 0 < low <= high"
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let max_edges = n * (n - 1) / 2;
    let target_edges = ((n as f64 * d / 2.0).round() as usize).clamp(n - 1, max_edges);

    // Degree sequence summing to 2 * target_edges, each entry floor(d) or floor(d)+1.
    let base = (2 * target_edges) / n;
    let extra = 2 * target_edges - base * n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut degrees = vec![base; n];
    for &i in order.iter().take(extra) {
        degrees[i] += 1;
    }
    let mut stubs: Vec<NodeId> = degrees
        .iter()
        .enumerate()
        .flat_map(|(i, &k)| std::iter::repeat_n(i as NodeId, k))
        .collect();
    stubs.shuffle(&mut rng);

    let mut edges: BTreeSet<(NodeId, NodeId)> = BTreeSet::new();
    for pair in stubs.chunks_exact(2) {
        if pair[0] != pair[1] {
            edges.insert(edge_key(pair[0], pair[1]));
        }
    }
    // Stubs lost to self-loops and multi-edges are replaced by uniform pairs.
    while edges.len() < target_edges {
        let u = rng.gen_range(0..n) as NodeId;
        let v = rng.gen_range(0..n) as NodeId;
        if u != v {
            edges.insert(edge_key(u, v));
        }
    }

    let mut g = TopologyGraph::new(n, edges.iter().map(|&(u, v)| (u, v, lo)), [])?;
    loop {
        let comps = g.components();
        if comps.len() == 1 {
            break;
        }
        for comp in &comps[1..] {
            let a = comps[0][rng.gen_range(0..comps[0].len())];
            let b = comp[rng.gen_range(0..comp.len())];
            edges.insert(edge_key(a, b));
        }
        g = TopologyGraph::new(n, edges.iter().map(|&(u, v)| (u, v, lo)), [])?;
    }

    let realized = 2.0 * edges.len() as f64 / n as f64;
    if (realized - d).abs() > 0.1 * d {
        return bad(format!(
            "realized average degree {realized:.3} is not within 10% of {d}"
        ));
    }

    let edges_with_latency: Vec<(NodeId, NodeId, f64)> = edges
        .iter()
        .map(|&(u, v)| {
            let lat = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            (u, v, lat)
        })
        .collect();
    let validator_count = ((p.validator_fraction * n as f64).ceil() as usize).min(n);
    let mut ids: Vec<NodeId> = (0..n as NodeId).collect();
    ids.shuffle(&mut rng);
    ids.truncate(validator_count);
    TopologyGraph::new(n, edges_with_latency, ids)
}

/// Hop-count summary of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub diameter: u32,
    pub radius: u32,
    pub avg_distance: f64,
    pub median_distance: f64,
    pub avg_degree: f64,
    pub max_degree: u32,
    pub connected: bool,
    pub giant_component_size: usize,
}

fn bfs_hops(g: &TopologyGraph, src: NodeId, dist: &mut [u32]) {
    dist.fill(u32::MAX);
    dist[src as usize] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u as usize];
        for &v in g.neighbors(u) {
            if dist[v as usize] == u32::MAX {
                dist[v as usize] = du + 1;
                queue.push_back(v);
            }
        }
    }
}

/// All-pairs hop metrics over the giant component; degree metrics over the whole graph.
pub fn graph_stats(g: &TopologyGraph) -> GraphStats {
    let n = g.node_count();
    if n == 0 {
        return GraphStats {
            diameter: 0,
            radius: 0,
            avg_distance: 0.0,
            median_distance: 0.0,
            avg_degree: 0.0,
            max_degree: 0,
            connected: false,
            giant_component_size: 0,
        };
    }
    let comps = g.components();
    let giant = &comps[0];
    // Histogram of unordered-pair distances.
    let mut hist: Vec<u64> = Vec::new();
    let mut diameter = 0;
    let mut radius = u32::MAX;
    let mut dist = vec![u32::MAX; n];
    for &src in giant {
        bfs_hops(g, src, &mut dist);
        let mut ecc = 0;
        for &dst in giant {
            let d = dist[dst as usize];
            ecc = ecc.max(d);
            if dst > src {
                if hist.len() <= d as usize {
                    hist.resize(d as usize + 1, 0);
                }
                hist[d as usize] += 1;
            }
        }
        diameter = diameter.max(ecc);
        radius = radius.min(ecc);
    }
    let pairs: u64 = hist.iter().sum();
    let (avg_distance, median_distance) = if pairs == 0 {
        (0.0, 0.0)
    } else {
        let total: u64 = hist.iter().enumerate().map(|(d, &c)| d as u64 * c).sum();
        (total as f64 / pairs as f64, histogram_median(&hist, pairs))
    };
    let avg = g.avg_degree_exact();
    GraphStats {
        diameter,
        radius,
        avg_distance,
        median_distance,
        avg_degree: *avg.numer() as f64 / *avg.denom() as f64,
        max_degree: (0..n as NodeId).map(|v| g.degree(v)).max().unwrap_or(0) as u32,
        connected: comps.len() == 1,
        giant_component_size: giant.len(),
    }
}

fn histogram_median(hist: &[u64], total: u64) -> f64 {
    let value_at = |rank: u64| {
        let mut acc = 0;
        for (d, &c) in hist.iter().enumerate() {
            acc += c;
            if acc > rank {
                return d as f64;
            }
        }
        (hist.len() - 1) as f64
    };
    if total % 2 == 1 {
        value_at(total / 2)
    } else {
        (value_at(total / 2 - 1) + value_at(total / 2)) / 2.0
    }
}
