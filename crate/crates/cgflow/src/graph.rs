//! Graph data model: simple graphs, typed variable neighborhoods, the
//! potential-edge encoding used for generation, synthetic dataset
//! samplers, and JSONL I/O.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgError, Result};
use crate::tensor::Tensor;

/// An undirected simple graph: topology only, nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph, normalizing each edge to `u < v` and sorting.
    /// Self-loops, duplicate edges and out-of-range endpoints are rejected.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a == b {
                return Err(CgError::Graph(format!("self-loop at node {a}")));
            }
            if a >= n || b >= n {
                return Err(CgError::Graph(format!(
                    "edge ({a},{b}) out of range for n={n}"
                )));
            }
            let e = (a.min(b), a.max(b));
            if !set.insert(e) {
                return Err(CgError::Graph(format!("duplicate edge {e:?}")));
            }
        }
        Ok(Self { n, edges: set.into_iter().collect() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges in canonical order: `u < v`, sorted lexicographically.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let e = (a.min(b), a.max(b));
        self.edges.binary_search(&e).is_ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let adj = self.adjacency_lists();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut visited = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    visited += 1;
                    stack.push(v);
                }
            }
        }
        visited == self.n
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Graph> {
        let edges: Vec<(usize, usize)> =
            self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Graph::new(self.n, &edges)
    }
}

/// Directed typed neighborhoods over a set of variables: for variable
/// `i`, `of(i)` lists `(j, edge_type)` pairs meaning `i` receives a
/// message from `j` through the type's function. List order is fixed at
/// construction and deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    lists: Vec<Vec<(usize, usize)>>,
    edge_type_count: usize,
}

impl Neighborhoods {
    pub fn new(lists: Vec<Vec<(usize, usize)>>, edge_type_count: usize) -> Result<Self> {
        let n = lists.len();
        for (i, list) in lists.iter().enumerate() {
            for &(j, t) in list {
                if j >= n {
                    return Err(CgError::Graph(format!(
                        "neighbor {j} of variable {i} out of range for n={n}"
                    )));
                }
                if t >= edge_type_count {
                    return Err(CgError::Graph(format!(
                        "edge type {t} out of range ({edge_type_count} types)"
                    )));
                }
            }
        }
        Ok(Self { lists, edge_type_count })
    }

    pub fn n_vars(&self) -> usize {
        self.lists.len()
    }

    pub fn edge_type_count(&self) -> usize {
        self.edge_type_count
    }

    pub fn of(&self, i: usize) -> &[(usize, usize)] {
        &self.lists[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<(usize, usize)>> {
        self.lists.iter()
    }

    /// Neighborhoods of the sub-system induced by `keep` (re-indexed in
    /// `keep` order). Only pairs with both endpoints kept survive.
    pub fn induced(&self, keep: &[usize]) -> Result<Neighborhoods> {
        let mut pos = vec![usize::MAX; self.n_vars()];
        for (new, &old) in keep.iter().enumerate() {
            if old >= self.n_vars() {
                return Err(CgError::Graph(format!("induced index {old} out of range")));
            }
            if pos[old] != usize::MAX {
                return Err(CgError::Graph(format!("induced index {old} repeated")));
            }
            pos[old] = new;
        }
        let lists = keep
            .iter()
            .map(|&old| {
                self.lists[old]
                    .iter()
                    .filter(|(j, _)| pos[*j] != usize::MAX)
                    .map(|&(j, t)| (pos[j], t))
                    .collect()
            })
            .collect();
        Neighborhoods::new(lists, self.edge_type_count)
    }

    /// Applies a variable permutation consistently: variable `i` becomes
    /// `perm[i]` and every neighbor reference is rewritten.
    pub fn permuted(&self, perm: &[usize]) -> Neighborhoods {
        let mut lists = vec![Vec::new(); self.n_vars()];
        for (i, list) in self.lists.iter().enumerate() {
            lists[perm[i]] = list.iter().map(|&(j, t)| (perm[j], t)).collect();
        }
        Neighborhoods { lists, edge_type_count: self.edge_type_count }
    }
}

/// Node-state matrix plus its typed neighborhoods: the random-variable
/// set a flow block transforms.
#[derive(Debug, Clone)]
pub struct TypedGraph {
    pub states: Tensor,
    pub nbrs: Neighborhoods,
}

impl TypedGraph {
    pub fn new(states: Tensor, nbrs: Neighborhoods) -> Result<Self> {
        if states.rows() != nbrs.n_vars() {
            return Err(CgError::Graph(format!(
                "{} state rows vs {} variables",
                states.rows(),
                nbrs.n_vars()
            )));
        }
        Ok(Self { states, nbrs })
    }

    pub fn n_vars(&self) -> usize {
        self.nbrs.n_vars()
    }

    pub fn var_dim(&self) -> usize {
        self.states.cols()
    }
}

/// The variable template for generating graphs on `n` nodes: one
/// variable per potential edge of the complete graph, in lexicographic
/// `(u, v)` order, with two variables adjacent iff their underlying
/// edges share an endpoint. Single edge type.
#[derive(Debug, Clone)]
pub struct EdgeVariableTemplate {
    n_nodes: usize,
    pairs: Vec<(usize, usize)>,
    nbrs: Neighborhoods,
}

/// Builds the template for `n >= 2` nodes: C(n,2) variables.
pub fn line_graph_of_complete(n: usize) -> Result<EdgeVariableTemplate> {
    if n < 2 {
        return Err(CgError::Graph(format!(
            "potential-edge template needs n >= 2, got {n}"
        )));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for u in 0..n {
        for v in (u + 1)..n {
            pairs.push((u, v));
        }
    }
    let lists = pairs
        .iter()
        .map(|&(u, v)| {
            pairs
                .iter()
                .enumerate()
                .filter(|&(_, &(a, b))| {
                    (a, b) != (u, v) && (a == u || a == v || b == u || b == v)
                })
                .map(|(j, _)| (j, 0usize))
                .collect()
        })
        .collect();
    let nbrs = Neighborhoods::new(lists, 1)?;
    Ok(EdgeVariableTemplate { n_nodes: n, pairs, nbrs })
}

impl EdgeVariableTemplate {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_vars(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn neighborhoods(&self) -> &Neighborhoods {
        &self.nbrs
    }

    /// 0/1 state per potential edge, canonical order.
    pub fn encode_graph(&self, g: &Graph) -> Result<Tensor> {
        if g.n() != self.n_nodes {
            return Err(CgError::Graph(format!(
                "graph has {} nodes, template expects {}",
                g.n(),
                self.n_nodes
            )));
        }
        let data = self
            .pairs
            .iter()
            .map(|&(u, v)| if g.has_edge(u, v) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(self.pairs.len(), 1, data)
    }

    /// Thresholds each state (edge present iff `state >= threshold`) and
    /// rebuilds the graph.
    pub fn decode_graph(&self, states: &Tensor, threshold: f64) -> Result<Graph> {
        if states.shape() != (self.pairs.len(), 1) {
            return Err(CgError::Graph(format!(
                "states shape {:?}, expected ({}, 1)",
                states.shape(),
                self.pairs.len()
            )));
        }
        let edges: Vec<(usize, usize)> = self
            .pairs
            .iter()
            .zip(states.data())
            .filter(|(_, &s)| s >= threshold)
            .map(|(&p, _)| p)
            .collect();
        Graph::new(self.n_nodes, &edges)
    }
}

/// Two dense halves plus a few bridging edges; sizes within Table-style
/// small-community envelopes.
pub fn community_small_sampler<R: Rng>(rng: &mut R, n_range: (usize, usize)) -> Result<Graph> {
    let (lo, hi) = n_range;
    if lo < 12 || hi > 20 || lo > hi {
        return Err(CgError::Config(format!(
            "community-small size range must lie in [12, 20], got [{lo}, {hi}]"
        )));
    }
    const ATTEMPTS: usize = 50;
    for _ in 0..ATTEMPTS {
        let n = rng.random_range(lo..=hi);
        let half = n / 2;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                let same = (u < half) == (v < half);
                if same && rng.random::<f64>() < 0.7 {
                    edges.push((u, v));
                }
            }
        }
        let inter_target = (0.05 * n as f64).ceil() as usize;
        let mut inter = BTreeSet::new();
        while inter.len() < inter_target {
            let u = rng.random_range(0..half);
            let v = rng.random_range(half..n);
            inter.insert((u, v));
        }
        edges.extend(inter);
        let g = Graph::new(n, &edges)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(CgError::SamplerExhausted { attempts: ATTEMPTS })
}

/// A hub connected to every other node, with peripheral pairs linked at
/// probability 0.3: a radius-1 ego network.
pub fn ego_small_sampler<R: Rng>(rng: &mut R, n_range: (usize, usize)) -> Result<Graph> {
    let (lo, hi) = n_range;
    if lo < 4 || hi > 18 || lo > hi {
        return Err(CgError::Config(format!(
            "ego-small size range must lie in [4, 18], got [{lo}, {hi}]"
        )));
    }
    let n = rng.random_range(lo..=hi);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (0, v)).collect();
    for u in 1..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < 0.3 {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, &edges)
}

/// Encodes graphs as typed variable sets over their potential-edge
/// templates (one template per node count, shared neighborhoods).
pub fn encode_graph_dataset(graphs: &[Graph]) -> Result<Vec<TypedGraph>> {
    let mut cache: std::collections::HashMap<usize, EdgeVariableTemplate> =
        std::collections::HashMap::new();
    graphs
        .iter()
        .map(|g| {
            if !cache.contains_key(&g.n()) {
                cache.insert(g.n(), line_graph_of_complete(g.n())?);
            }
            let template = &cache[&g.n()];
            TypedGraph::new(template.encode_graph(g)?, template.neighborhoods().clone())
        })
        .collect()
}

/// Writes one JSON object per line: `{"n": ..., "edges": [[u, v], ...]}`
/// with canonical edge order.
pub fn write_graphs<P: AsRef<Path>>(path: P, graphs: &[Graph]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for g in graphs {
        let rec = GraphRecord { n: g.n, edges: g.edges.clone() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_graphs<P: AsRef<Path>>(path: P) -> Result<Vec<Graph>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut graphs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord =
            serde_json::from_str(&line).map_err(|e| CgError::GraphParse {
                line: i + 1,
                detail: e.to_string(),
            })?;
        let g = Graph::new(rec.n, &rec.edges).map_err(|e| CgError::GraphParse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        graphs.push(g);
    }
    Ok(graphs)
}
