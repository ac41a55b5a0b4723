//! Graph-statistic extraction (degree, clustering coefficient, 4-node
//! orbit counts) and maximum mean discrepancy between graph sets.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CgError, Result};
use crate::flow::FlowModel;
use crate::graph::{line_graph_of_complete, Graph};

/// Threshold separating the dequantization bins `(x, x+1)` when decoding
/// sampled continuous states back to edge indicators.
pub const DECODE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatKind {
    Degree,
    Clustering,
    Orbit,
}

/// A normalized per-graph histogram with a fixed bin scheme. Empty bins
/// vector means the statistic had no support (e.g. orbit counts of a
/// graph with no connected 4-node subgraph).
#[derive(Debug, Clone, PartialEq)]
pub struct StatDistribution {
    pub kind: StatKind,
    pub bins: Vec<f64>,
    /// Width of one bin in the statistic's natural units; used by the
    /// 1-Wasserstein ground distance.
    pub bin_width: f64,
}

impl StatDistribution {
    fn normalized(kind: StatKind, mut bins: Vec<f64>, bin_width: f64) -> Self {
        let total: f64 = bins.iter().sum();
        if total > 0.0 {
            for b in &mut bins {
                *b /= total;
            }
        }
        Self { kind, bins, bin_width }
    }
}

/// Normalized histogram of node degrees, bins `0..=max_degree`.
pub fn degree_hist(g: &Graph) -> StatDistribution {
    let degrees = g.degrees();
    let max_deg = degrees.iter().copied().max().unwrap_or(0);
    let mut bins = vec![0.0; max_deg + 1];
    for d in degrees {
        bins[d] += 1.0;
    }
    StatDistribution::normalized(StatKind::Degree, bins, 1.0)
}

/// Per-node triangle counts (each triangle counted once per member node).
fn node_triangles(g: &Graph) -> Vec<usize> {
    let adj = g.adjacency_lists();
    let mut tri = vec![0usize; g.n()];
    // Edge-centric: each triangle is discovered once per edge, i.e. three
    // times, crediting all three members each time.
    for &(u, v) in g.edges() {
        for &w in &adj[u] {
            if w != v && g.has_edge(v, w) {
                tri[u] += 1;
                tri[v] += 1;
                tri[w] += 1;
            }
        }
    }
    for t in &mut tri {
        *t /= 3;
    }
    tri
}

/// Histogram of local clustering coefficients over `bins` equal cells of
/// [0, 1]. Nodes of degree < 2 contribute coefficient 0.
pub fn clustering_hist(g: &Graph, bins: usize) -> StatDistribution {
    assert!(bins >= 1, "at least one bin");
    let degrees = g.degrees();
    let tri = node_triangles(g);
    let mut hist = vec![0.0; bins];
    for v in 0..g.n() {
        let c = if degrees[v] < 2 {
            0.0
        } else {
            2.0 * tri[v] as f64 / (degrees[v] * (degrees[v] - 1)) as f64
        };
        let idx = ((c * bins as f64) as usize).min(bins - 1);
        hist[idx] += 1.0;
    }
    StatDistribution::normalized(StatKind::Clustering, hist, 1.0 / bins as f64)
}

/// The node orbits of the six connected 4-node graph classes, in fixed
/// order: path ends, path mids, star leaves, star hub, cycle, paw
/// pendant, paw rim, paw apex, diamond tips, diamond axis, clique.
pub const ORBIT_COUNT: usize = 11;

/// Classifies one induced 4-node subgraph given its edge count and the
/// within-subset degree of a member; returns the member's orbit id, or
/// None when the subgraph is disconnected.
fn orbit_of(edge_count: usize, degree: usize, max_degree: usize, min_degree: usize) -> Option<usize> {
    match edge_count {
        3 => {
            if min_degree == 0 {
                None // triangle plus isolated node
            } else if max_degree == 3 {
                Some(if degree == 3 { 3 } else { 2 }) // star
            } else {
                Some(if degree == 1 { 0 } else { 1 }) // path
            }
        }
        4 => {
            if max_degree == 3 {
                // paw: pendant (1), rim (2), apex (3)
                Some(match degree {
                    1 => 5,
                    2 => 6,
                    _ => 7,
                })
            } else {
                Some(4) // 4-cycle
            }
        }
        5 => Some(if degree == 2 { 8 } else { 9 }), // diamond
        6 => Some(10),                              // clique
        _ => None,
    }
}

/// Exhaustively enumerates all C(n,4) node subsets, classifies each
/// connected induced subgraph, and aggregates per-orbit membership
/// counts into a normalized histogram. Brute-force budget: n <= 30.
pub fn orbit4_counts(g: &Graph) -> Result<StatDistribution> {
    if g.n() > 30 {
        return Err(CgError::Config(format!(
            "orbit counting enumerates all C(n,4) subsets; n = {} exceeds the \
             brute-force budget of 30 (sample the graph down first)",
            g.n()
        )));
    }
    let mut counts = vec![0.0; ORBIT_COUNT];
    let n = g.n();
    let mut any = false;
    for a in 0..n {
        for b in (a + 1)..n {
            for c in (b + 1)..n {
                for d in (c + 1)..n {
                    let quad = [a, b, c, d];
                    let mut deg = [0usize; 4];
                    let mut edges = 0usize;
                    for i in 0..4 {
                        for j in (i + 1)..4 {
                            if g.has_edge(quad[i], quad[j]) {
                                edges += 1;
                                deg[i] += 1;
                                deg[j] += 1;
                            }
                        }
                    }
                    if edges < 3 {
                        continue;
                    }
                    let max_deg = *deg.iter().max().expect("4 nodes");
                    let min_deg = *deg.iter().min().expect("4 nodes");
                    for i in 0..4 {
                        if let Some(orbit) = orbit_of(edges, deg[i], max_deg, min_deg) {
                            counts[orbit] += 1.0;
                            any = true;
                        }
                    }
                }
            }
        }
    }
    if !any {
        return Ok(StatDistribution { kind: StatKind::Orbit, bins: Vec::new(), bin_width: 1.0 });
    }
    Ok(StatDistribution::normalized(StatKind::Orbit, counts, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundDistance {
    TotalVariation,
    Wasserstein1,
}

/// Gaussian-kernel MMD configuration; the estimator is the biased one
/// (diagonal terms included), so identical sets score exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdConfig {
    pub sigma: f64,
    pub distance: GroundDistance,
}

impl Default for MmdConfig {
    fn default() -> Self {
        Self { sigma: 1.0, distance: GroundDistance::TotalVariation }
    }
}

fn aligned<'a>(p: &'a StatDistribution, q: &'a StatDistribution) -> (Vec<f64>, Vec<f64>) {
    let len = p.bins.len().max(q.bins.len());
    let mut a = p.bins.clone();
    let mut b = q.bins.clone();
    a.resize(len, 0.0);
    b.resize(len, 0.0);
    (a, b)
}

/// Ground distance between two histograms aligned on a common support.
pub fn hist_distance(p: &StatDistribution, q: &StatDistribution, cfg: &MmdConfig) -> f64 {
    let (a, b) = aligned(p, q);
    match cfg.distance {
        GroundDistance::TotalVariation => {
            0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>()
        }
        GroundDistance::Wasserstein1 => {
            let width = p.bin_width.max(q.bin_width);
            let mut cdf = 0.0;
            let mut total = 0.0;
            for (x, y) in a.iter().zip(&b) {
                cdf += x - y;
                total += cdf.abs();
            }
            total * width
        }
    }
}

fn kernel(p: &StatDistribution, q: &StatDistribution, cfg: &MmdConfig) -> f64 {
    let d = hist_distance(p, q, cfg);
    (-d * d / (2.0 * cfg.sigma * cfg.sigma)).exp()
}

/// Squared MMD between two sets of per-graph statistics, biased
/// estimator with a Gaussian kernel over the configured ground distance.
pub fn mmd(set_a: &[StatDistribution], set_b: &[StatDistribution], cfg: &MmdConfig) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(CgError::Config("mmd needs non-empty sets".into()));
    }
    let mean_kernel = |xs: &[StatDistribution], ys: &[StatDistribution]| -> f64 {
        let mut total = 0.0;
        for x in xs {
            for y in ys {
                total += kernel(x, y, cfg);
            }
        }
        total / (xs.len() * ys.len()) as f64
    };
    let value = mean_kernel(set_a, set_a) + mean_kernel(set_b, set_b)
        - 2.0 * mean_kernel(set_a, set_b);
    // The biased estimator is a squared RKHS norm; clamp away the
    // negative rounding dust.
    Ok(value.max(0.0))
}

/// The three statistic MMDs between two graph sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdTriple {
    pub degree_mmd: f64,
    pub clustering_mmd: f64,
    pub orbit_mmd: f64,
}

pub const CLUSTERING_BINS: usize = 100;

pub fn mmd_between_sets(
    reference: &[Graph],
    generated: &[Graph],
    cfg: &MmdConfig,
) -> Result<MmdTriple> {
    let deg_a: Vec<_> = reference.iter().map(degree_hist).collect();
    let deg_b: Vec<_> = generated.iter().map(degree_hist).collect();
    let clu_a: Vec<_> = reference.iter().map(|g| clustering_hist(g, CLUSTERING_BINS)).collect();
    let clu_b: Vec<_> = generated.iter().map(|g| clustering_hist(g, CLUSTERING_BINS)).collect();
    let orb_a: Vec<_> = reference.iter().map(orbit4_counts).collect::<Result<_>>()?;
    let orb_b: Vec<_> = generated.iter().map(orbit4_counts).collect::<Result<_>>()?;
    Ok(MmdTriple {
        degree_mmd: mmd(&deg_a, &deg_b, cfg)?,
        clustering_mmd: mmd(&clu_a, &clu_b, cfg)?,
        orbit_mmd: mmd(&orb_a, &orb_b, cfg)?,
    })
}

/// The evaluation report emitted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub degree_mmd: f64,
    pub clustering_mmd: f64,
    pub orbit_mmd: f64,
    pub n_generated: usize,
    pub seed: u64,
    pub generated_mean_nodes: f64,
    pub generated_mean_edges: f64,
}

/// Samples `n_generate` graphs from the model (sizes drawn uniformly
/// from the test set's size list) and scores them against the full test
/// set. Deterministic given the seed.
pub fn evaluate_protocol(
    model: &FlowModel,
    test_set: &[Graph],
    n_generate: usize,
    seed: u64,
    cfg: &MmdConfig,
) -> Result<MetricsReport> {
    if test_set.is_empty() {
        return Err(CgError::Config("empty test set".into()));
    }
    if n_generate < test_set.len() {
        return Err(CgError::Config(format!(
            "n_generate = {n_generate} is smaller than the test set ({})",
            test_set.len()
        )));
    }
    let mut rng = <ChaCha12Rng as rand::SeedableRng>::seed_from_u64(seed);
    let generated = sample_graphs(model, test_set, n_generate, &mut rng)?;
    let triple = mmd_between_sets(test_set, &generated, cfg)?;
    let mean_nodes =
        generated.iter().map(|g| g.n() as f64).sum::<f64>() / generated.len() as f64;
    let mean_edges =
        generated.iter().map(|g| g.edge_count() as f64).sum::<f64>() / generated.len() as f64;
    Ok(MetricsReport {
        degree_mmd: triple.degree_mmd,
        clustering_mmd: triple.clustering_mmd,
        orbit_mmd: triple.orbit_mmd,
        n_generated: generated.len(),
        seed,
        generated_mean_nodes: mean_nodes,
        generated_mean_edges: mean_edges,
    })
}

/// Draws `count` graphs from the model, matching the size list of
/// `size_source` empirically.
pub fn sample_graphs<R: Rng>(
    model: &FlowModel,
    size_source: &[Graph],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Graph>> {
    let sizes: Vec<usize> = size_source.iter().map(Graph::n).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = sizes[rng.random_range(0..sizes.len())];
        out.push(sample_one_graph(model, n, rng)?);
    }
    Ok(out)
}

/// One generated graph on `n` nodes: sample potential-edge states and
/// threshold at the dequantization bin boundary.
pub fn sample_one_graph<R: Rng>(model: &FlowModel, n: usize, rng: &mut R) -> Result<Graph> {
    let template = line_graph_of_complete(n)?;
    let states = model.sample(template.neighborhoods(), rng)?;
    template.decode_graph(&states, DECODE_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(n, edges).unwrap()
    }

    #[test]
    fn degree_hist_examples() {
        let path = graph(3, &[(0, 1), (1, 2)]);
        let h = degree_hist(&path);
        assert_eq!(h.bins, vec![0.0, 2.0 / 3.0, 1.0 / 3.0]);

        let k4 = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        assert_eq!(degree_hist(&k4).bins, vec![0.0, 0.0, 0.0, 1.0]);

        let empty = graph(3, &[]);
        assert_eq!(degree_hist(&empty).bins, vec![1.0]);
    }

    #[test]
    fn clustering_hist_examples() {
        let k3 = graph(3, &[(0, 1), (0, 2), (1, 2)]);
        let h = clustering_hist(&k3, 10);
        assert_eq!(h.bins[9], 1.0, "all coefficients are 1.0");

        let star = graph(4, &[(0, 1), (0, 2), (0, 3)]);
        let h = clustering_hist(&star, 10);
        assert_eq!(h.bins[0], 1.0, "no triangles anywhere");
    }

    /// Independent brute-force clustering oracle: enumerate all node
    /// triples directly.
    fn clustering_oracle(g: &Graph) -> Vec<f64> {
        let n = g.n();
        (0..n)
            .map(|v| {
                let nbrs: Vec<usize> =
                    (0..n).filter(|&u| u != v && g.has_edge(u, v)).collect();
                if nbrs.len() < 2 {
                    return 0.0;
                }
                let mut closed = 0usize;
                let mut wedges = 0usize;
                for i in 0..nbrs.len() {
                    for j in (i + 1)..nbrs.len() {
                        wedges += 1;
                        if g.has_edge(nbrs[i], nbrs[j]) {
                            closed += 1;
                        }
                    }
                }
                closed as f64 / wedges as f64
            })
            .collect()
    }

    fn random_graph(n: usize, p: f64, rng: &mut ChaCha12Rng) -> Graph {
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        graph(n, &edges)
    }

    #[test]
    fn clustering_matches_brute_force_on_random_graphs() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let g = random_graph(8, 0.45, &mut rng);
            let coeffs = clustering_oracle(&g);
            let mut expected = vec![0.0; 20];
            for c in &coeffs {
                let idx = ((c * 20.0) as usize).min(19);
                expected[idx] += 1.0;
            }
            let total: f64 = expected.iter().sum();
            for e in &mut expected {
                *e /= total;
            }
            assert_eq!(clustering_hist(&g, 20).bins, expected);
        }
    }

    #[test]
    fn orbit_counts_on_k4() {
        let k4 = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        let h = orbit4_counts(&k4).unwrap();
        let mut expected = vec![0.0; ORBIT_COUNT];
        expected[10] = 1.0;
        assert_eq!(h.bins, expected);
    }

    #[test]
    fn orbit_counts_on_p4() {
        let p4 = graph(4, &[(0, 1), (1, 2), (2, 3)]);
        let h = orbit4_counts(&p4).unwrap();
        // One 4-subset: two ends, two mids.
        let mut expected = vec![0.0; ORBIT_COUNT];
        expected[0] = 0.5;
        expected[1] = 0.5;
        assert_eq!(h.bins, expected);
    }

    #[test]
    fn orbit_counts_rejects_oversized_graphs() {
        let g = graph(31, &[(0, 1)]);
        let err = orbit4_counts(&g).unwrap_err();
        assert!(err.to_string().contains("sample"), "{err}");
    }

    #[test]
    fn graph_without_connected_quads_has_empty_orbit_histogram() {
        let g = graph(5, &[(0, 1), (2, 3)]);
        let h = orbit4_counts(&g).unwrap();
        assert!(h.bins.is_empty());
    }

    /// Independent orbit oracle: classify each induced 4-node subgraph by
    /// isomorphism against reference adjacency matrices under all 4!
    /// permutations, tracking which reference node each original node
    /// maps to.
    fn orbit_oracle(g: &Graph) -> Vec<f64> {
        // Reference graphs as edge lists on nodes 0..4, with a node-orbit
        // label per reference node.
        let references: Vec<(Vec<(usize, usize)>, [usize; 4])> = vec![
            (vec![(0, 1), (1, 2), (2, 3)], [0, 1, 1, 0]),          // path
            (vec![(0, 1), (0, 2), (0, 3)], [3, 2, 2, 2]),          // star
            (vec![(0, 1), (1, 2), (2, 3), (0, 3)], [4, 4, 4, 4]),  // cycle
            (vec![(0, 1), (0, 2), (1, 2), (2, 3)], [6, 6, 7, 5]),  // paw
            (vec![(0, 1), (0, 2), (0, 3), (1, 2), (2, 3)], [9, 8, 9, 8]), // diamond: 0-2 axis
            (
                vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
                [10, 10, 10, 10],
            ), // clique
        ];
        let perms = permutations4();
        let mut counts = vec![0.0; ORBIT_COUNT];
        let n = g.n();
        for a in 0..n {
            for b in (a + 1)..n {
                for c in (b + 1)..n {
                    for d in (c + 1)..n {
                        let quad = [a, b, c, d];
                        let mut adj = [[false; 4]; 4];
                        for i in 0..4 {
                            for j in 0..4 {
                                if i != j && g.has_edge(quad[i], quad[j]) {
                                    adj[i][j] = true;
                                }
                            }
                        }
                        'refs: for (edges, labels) in &references {
                            let mut radj = [[false; 4]; 4];
                            for &(u, v) in edges {
                                radj[u][v] = true;
                                radj[v][u] = true;
                            }
                            for perm in &perms {
                                // perm maps subset position -> reference node.
                                let mut ok = true;
                                'check: for i in 0..4 {
                                    for j in 0..4 {
                                        if adj[i][j] != radj[perm[i]][perm[j]] {
                                            ok = false;
                                            break 'check;
                                        }
                                    }
                                }
                                if ok {
                                    for i in 0..4 {
                                        counts[labels[perm[i]]] += 1.0;
                                    }
                                    break 'refs;
                                }
                            }
                        }
                    }
                }
            }
        }
        let total: f64 = counts.iter().sum();
        if total > 0.0 {
            for c in &mut counts {
                *c /= total;
            }
        }
        counts
    }

    fn permutations4() -> Vec<[usize; 4]> {
        let mut out = Vec::new();
        let mut items = [0usize, 1, 2, 3];
        heap_permute(&mut items, 4, &mut out);
        out
    }

    fn heap_permute(items: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
        if k == 1 {
            out.push(*items);
            return;
        }
        for i in 0..k {
            heap_permute(items, k - 1, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }

    #[test]
    fn orbit_counts_match_isomorphism_oracle_on_random_graphs() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for trial in 0..25 {
            let g = random_graph(10, 0.35, &mut rng);
            let got = orbit4_counts(&g).unwrap();
            let expected = orbit_oracle(&g);
            if got.bins.is_empty() {
                assert!(expected.iter().all(|&c| c == 0.0));
                continue;
            }
            for (i, (a, b)) in got.bins.iter().zip(&expected).enumerate() {
                assert!(
                    (a - b).abs() < 1e-12,
                    "trial {trial}, orbit {i}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn statistics_are_isomorphism_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = random_graph(9, 0.4, &mut rng);
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rng);
            let relabeled = g.relabel(&perm).unwrap();
            assert_eq!(degree_hist(&g), degree_hist(&relabeled));
            assert_eq!(clustering_hist(&g, 50), clustering_hist(&relabeled, 50));
            assert_eq!(
                orbit4_counts(&g).unwrap(),
                orbit4_counts(&relabeled).unwrap()
            );
        }
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let graphs: Vec<Graph> = (0..20).map(|_| random_graph(8, 0.3, &mut rng)).collect();
        let stats: Vec<_> = graphs.iter().map(degree_hist).collect();
        let v = mmd(&stats, &stats, &MmdConfig::default()).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn singleton_mmd_matches_hand_expansion() {
        let p = degree_hist(&graph(3, &[(0, 1), (1, 2)]));
        let q = degree_hist(&graph(3, &[(0, 1)]));
        let cfg = MmdConfig::default();
        let v = mmd(
            std::slice::from_ref(&p),
            std::slice::from_ref(&q),
            &cfg,
        )
        .unwrap();
        // Biased estimator on singletons: k(p,p) + k(q,q) - 2 k(p,q)
        // = 2 - 2 exp(-d^2 / 2 sigma^2).
        let d = hist_distance(&p, &q, &cfg);
        let expected = 2.0 - 2.0 * (-d * d / 2.0).exp();
        assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
    }

    #[test]
    fn mmd_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let a: Vec<_> = (0..12)
            .map(|_| degree_hist(&random_graph(8, 0.25, &mut rng)))
            .collect();
        let b: Vec<_> = (0..15)
            .map(|_| degree_hist(&random_graph(8, 0.55, &mut rng)))
            .collect();
        let cfg = MmdConfig::default();
        let ab = mmd(&a, &b, &cfg).unwrap();
        let ba = mmd(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab >= 0.0);
    }

    #[test]
    fn wasserstein_distance_sees_bin_locations() {
        // Two point masses three degree-bins apart.
        let p = StatDistribution { kind: StatKind::Degree, bins: vec![1.0], bin_width: 1.0 };
        let q = StatDistribution {
            kind: StatKind::Degree,
            bins: vec![0.0, 0.0, 0.0, 1.0],
            bin_width: 1.0,
        };
        let w = MmdConfig { sigma: 1.0, distance: GroundDistance::Wasserstein1 };
        let tv = MmdConfig::default();
        assert!((hist_distance(&p, &q, &w) - 3.0).abs() < 1e-12);
        assert!((hist_distance(&p, &q, &tv) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn set_level_mmd_between_identical_files_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let graphs: Vec<Graph> = (0..10).map(|_| random_graph(7, 0.4, &mut rng)).collect();
        let t = mmd_between_sets(&graphs, &graphs, &MmdConfig::default()).unwrap();
        assert_eq!(t.degree_mmd, 0.0);
        assert_eq!(t.clustering_mmd, 0.0);
        assert_eq!(t.orbit_mmd, 0.0);
    }
}
