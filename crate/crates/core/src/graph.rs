//! Weighted directed graphs over forecast categories.
//!
//! Nodes are dense ids `0..num_nodes`. Edges carry strictly positive
//! weights; `A[src][dst] = weight`. The two synthetic families used for
//! data generation live here: a ring with asymmetric transport and a
//! seeded random geometric graph.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Redraw budget for geometric graphs that come out disconnected.
pub const MAX_CONNECTIVITY_DRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, f64)", into = "(usize, usize, f64)")]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

impl From<(usize, usize, f64)> for Edge {
    fn from((src, dst, weight): (usize, usize, f64)) -> Self {
        Edge { src, dst, weight }
    }
}

impl From<Edge> for (usize, usize, f64) {
    fn from(e: Edge) -> Self {
        (e.src, e.dst, e.weight)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct WeightedDigraph {
    num_nodes: usize,
    edges: Vec<Edge>,
    node_attrs: Option<Vec<Vec<f64>>>,
    node_coords: Option<Vec<[f64; 2]>>,
    seed: Option<u64>,
}

/// On-disk shape of a graph document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_attrs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_coords: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl TryFrom<RawGraph> for WeightedDigraph {
    type Error = Error;

    fn try_from(raw: RawGraph) -> Result<Self> {
        let mut g = WeightedDigraph::new(raw.num_nodes, raw.edges)?;
        if let Some(attrs) = raw.node_attrs {
            g = g.with_node_attrs(attrs)?;
        }
        if let Some(coords) = raw.node_coords {
            g = g.with_node_coords(coords)?;
        }
        g.seed = raw.seed;
        Ok(g)
    }
}

impl From<WeightedDigraph> for RawGraph {
    fn from(g: WeightedDigraph) -> Self {
        RawGraph {
            num_nodes: g.num_nodes,
            edges: g.edges,
            node_attrs: g.node_attrs,
            node_coords: g.node_coords,
            seed: g.seed,
        }
    }
}

impl WeightedDigraph {
    /// Builds a graph, rejecting self-loops, duplicate pairs, out-of-range
    /// ids, and non-positive or non-finite weights.
    pub fn new(num_nodes: usize, edges: Vec<Edge>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for e in &edges {
            if e.src >= num_nodes || e.dst >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge ({}, {}) references a node outside [0, {num_nodes})",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(Error::InvalidGraph(format!("self-loop on node {}", e.src)));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::InvalidGraph(format!(
                    "edge ({}, {}) has non-positive weight {}",
                    e.src, e.dst, e.weight
                )));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge ({}, {})",
                    e.src, e.dst
                )));
            }
        }
        Ok(WeightedDigraph {
            num_nodes,
            edges,
            node_attrs: None,
            node_coords: None,
            seed: None,
        })
    }

    pub fn with_node_attrs(mut self, attrs: Vec<Vec<f64>>) -> Result<Self> {
        if attrs.len() != self.num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} attribute rows for {} nodes",
                attrs.len(),
                self.num_nodes
            )));
        }
        let dim = attrs[0].len();
        if attrs.iter().any(|a| a.len() != dim) {
            return Err(Error::InvalidGraph(
                "node attributes must share one dimension".into(),
            ));
        }
        self.node_attrs = Some(attrs);
        Ok(self)
    }

    pub fn with_node_coords(mut self, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != self.num_nodes {
            return Err(Error::InvalidGraph(format!(
                "{} coordinates for {} nodes",
                coords.len(),
                self.num_nodes
            )));
        }
        self.node_coords = Some(coords);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_attrs(&self) -> Option<&[Vec<f64>]> {
        self.node_attrs.as_deref()
    }

    pub fn node_coords(&self) -> Option<&[[f64; 2]]> {
        self.node_coords.as_deref()
    }

    /// Seed actually used to draw a random graph, if any.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Dense weighted adjacency, `A[src][dst]`.
    pub fn adjacency(&self) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.num_nodes, self.num_nodes);
        for e in &self.edges {
            a[(e.src, e.dst)] = e.weight;
        }
        a
    }

    /// Total incoming edge weight per node.
    pub fn in_weight(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_nodes];
        for e in &self.edges {
            w[e.dst] += e.weight;
        }
        w
    }

    /// Total outgoing edge weight per node.
    pub fn out_weight(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.num_nodes];
        for e in &self.edges {
            w[e.src] += e.weight;
        }
        w
    }

    pub fn is_weakly_connected(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.num_nodes).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut components = self.num_nodes;
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.src), find(&mut parent, e.dst));
            if a != b {
                parent[a] = b;
                components -= 1;
            }
        }
        components == 1
    }

    /// Relabels node `i` as `perm[i]`. Edge order is preserved so that
    /// per-node reductions visit neighbors in the same sequence.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_nodes)?;
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                weight: e.weight,
            })
            .collect();
        let mut g = WeightedDigraph::new(self.num_nodes, edges)?;
        if let Some(attrs) = &self.node_attrs {
            g = g.with_node_attrs(permute_rows(attrs, perm))?;
        }
        if let Some(coords) = &self.node_coords {
            g = g.with_node_coords(permute_rows(coords, perm))?;
        }
        g.seed = self.seed;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                e.into()
            }
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::invalid(format!(
            "permutation of length {} for {n} nodes",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid("not a permutation"));
        }
    }
    Ok(())
}

/// `out[perm[i]] = rows[i]`.
pub fn permute_rows<T: Clone>(rows: &[T], perm: &[usize]) -> Vec<T> {
    let mut out = rows.to_vec();
    for (i, row) in rows.iter().enumerate() {
        out[perm[i]] = row.clone();
    }
    out
}

/// `L_out = D_out - A`, with `D_out` the diagonal of row sums of `A`.
pub fn out_degree_laplacian(g: &WeightedDigraph) -> DenseMatrix {
    let mut l = g.adjacency().scaled(-1.0);
    for (i, w) in g.out_weight().into_iter().enumerate() {
        l[(i, i)] += w;
    }
    l
}

/// Cycle graph with counter-clockwise edges `i -> i+1` and, when
/// `cw_weight > 0`, clockwise edges `i -> i-1`.
pub fn ring_graph(n: usize, ccw_weight: f64, cw_weight: f64) -> Result<WeightedDigraph> {
    if n < 3 {
        return Err(Error::invalid(format!("ring needs at least 3 nodes, got {n}")));
    }
    if !(cw_weight >= 0.0 && ccw_weight > cw_weight && ccw_weight.is_finite()) {
        return Err(Error::invalid(format!(
            "ring weights need ccw > cw >= 0, got ccw={ccw_weight}, cw={cw_weight}"
        )));
    }
    let mut edges = Vec::with_capacity(2 * n);
    for i in 0..n {
        edges.push(Edge {
            src: i,
            dst: (i + 1) % n,
            weight: ccw_weight,
        });
        if cw_weight > 0.0 {
            edges.push(Edge {
                src: i,
                dst: (i + n - 1) % n,
                weight: cw_weight,
            });
        }
    }
    WeightedDigraph::new(n, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricParams {
    pub n: usize,
    pub radius: f64,
    pub weight_low: f64,
    pub weight_high: f64,
}

impl Default for GeometricParams {
    fn default() -> Self {
        GeometricParams {
            n: 25,
            radius: 0.3,
            weight_low: 0.5,
            weight_high: 2.0,
        }
    }
}

/// Points uniform in the unit square; every unordered pair within `radius`
/// becomes two directed edges with independent uniform weights. Draws
/// that are not weakly connected are retried with `seed + 1`, `seed + 2`,
/// ...; the seed that succeeded is stored on the graph.
pub fn random_geometric_graph(params: GeometricParams, seed: u64) -> Result<WeightedDigraph> {
    let GeometricParams {
        n,
        radius,
        weight_low,
        weight_high,
    } = params;
    if !(radius > 0.0 && radius < 1.0) {
        return Err(Error::invalid(format!("radius must lie in (0, 1), got {radius}")));
    }
    if !(weight_low > 0.0 && weight_low <= weight_high && weight_high.is_finite()) {
        return Err(Error::invalid(format!(
            "weight bounds need 0 < low <= high, got [{weight_low}, {weight_high}]"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("geometric graph needs at least one node"));
    }
    for attempt in 0..MAX_CONNECTIVITY_DRAWS as u64 {
        let used = seed.wrapping_add(attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(used);
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let (dx, dy) = (coords[i][0] - coords[j][0], coords[i][1] - coords[j][1]);
                if dx.hypot(dy) <= radius {
                    for (src, dst) in [(i, j), (j, i)] {
                        let weight = if weight_low == weight_high {
                            weight_low
                        } else {
                            rng.random_range(weight_low..weight_high)
                        };
                        edges.push(Edge { src, dst, weight });
                    }
                }
            }
        }
        let mut g = WeightedDigraph::new(n, edges)?.with_node_coords(coords)?;
        if g.is_weakly_connected() {
            if attempt > 0 {
                log::info!("geometric graph: seed {seed} disconnected, used seed {used}");
            }
            g.seed = Some(used);
            return Ok(g);
        }
    }
    Err(Error::Disconnected {
        attempts: MAX_CONNECTIVITY_DRAWS,
    })
}

/// Copy of `g` keeping only edges for which `remove` returns false.
pub fn delete_edges(g: &WeightedDigraph, mut remove: impl FnMut(&Edge) -> bool) -> WeightedDigraph {
    let mut out = g.clone();
    out.edges.retain(|e| !remove(e));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node(a: f64, b: f64) -> WeightedDigraph {
        WeightedDigraph::new(2, vec![(0, 1, a).into(), (1, 0, b).into()]).unwrap()
    }

    #[test]
    fn laplacian_two_node() {
        let l = out_degree_laplacian(&two_node(1.0, 1.0));
        assert_eq!(l.data(), &[1.0, -1.0, -1.0, 1.0]);
        let l = out_degree_laplacian(&two_node(0.3, 2.0));
        assert_eq!(l.data(), &[0.3, -0.3, -2.0, 2.0]);
    }

    #[test]
    fn laplacian_no_edges_is_zero() {
        let g = WeightedDigraph::new(4, vec![]).unwrap();
        assert!(out_degree_laplacian(&g).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let graphs = [
            ring_graph(25, 2.0, 0.5).unwrap(),
            random_geometric_graph(GeometricParams::default(), 3).unwrap(),
        ];
        for g in &graphs {
            let l = out_degree_laplacian(g);
            for i in 0..g.num_nodes() {
                let s: f64 = (0..g.num_nodes()).map(|j| l[(i, j)]).sum();
                assert!(s.abs() < 1e-12, "row {i} sums to {s}");
            }
        }
    }

    #[test]
    fn ring_construction() {
        let g = ring_graph(3, 1.0, 0.0).unwrap();
        let pairs: Vec<_> = g.edges().iter().map(|e| (e.src, e.dst, e.weight)).collect();
        assert_eq!(pairs, vec![(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]);

        let g = ring_graph(25, 2.0, 0.5).unwrap();
        assert_eq!(g.edges().len(), 50);
        assert!(g.out_weight().iter().all(|&w| w == 2.5));
    }

    #[test]
    fn ring_rejects_bad_parameters() {
        assert!(ring_graph(2, 1.0, 0.0).is_err());
        assert!(ring_graph(5, 1.0, 1.0).is_err());
        assert!(ring_graph(5, 0.5, 1.0).is_err());
        assert!(ring_graph(5, 1.0, -0.1).is_err());
    }

    #[test]
    fn ring_is_vertex_transitive() {
        let n = 7;
        let g = ring_graph(n, 1.5, 0.0).unwrap();
        let original: HashSet<(usize, usize)> = g.edges().iter().map(|e| (e.src, e.dst)).collect();
        for k in 0..n {
            let shifted: HashSet<_> = g
                .edges()
                .iter()
                .map(|e| ((e.src + k) % n, (e.dst + k) % n))
                .collect();
            assert_eq!(original, shifted);
        }
    }

    #[test]
    fn geometric_rejects_bad_radius() {
        let p = GeometricParams {
            n: 2,
            radius: 1.5,
            ..Default::default()
        };
        assert!(random_geometric_graph(p, 0).is_err());
        let p = GeometricParams {
            radius: 0.0,
            ..Default::default()
        };
        assert!(random_geometric_graph(p, 0).is_err());
    }

    #[test]
    fn geometric_matches_brute_force_pairs() {
        let p = GeometricParams {
            n: 5,
            radius: 0.99,
            weight_low: 0.5,
            weight_high: 2.0,
        };
        for seed in 0..20 {
            let g = random_geometric_graph(p, seed).unwrap();
            let c = g.node_coords().unwrap();
            let mut expected = HashSet::new();
            for i in 0..5 {
                for j in 0..5 {
                    let d = ((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2)).sqrt();
                    if i != j && d <= 0.99 {
                        expected.insert((i, j));
                    }
                }
            }
            let got: HashSet<_> = g.edges().iter().map(|e| (e.src, e.dst)).collect();
            assert_eq!(got, expected, "seed {seed}");
            assert!(g.edges().iter().all(|e| (0.5..=2.0).contains(&e.weight)));
        }
    }

    #[test]
    fn geometric_is_reproducible() {
        let a = random_geometric_graph(GeometricParams::default(), 11).unwrap();
        let b = random_geometric_graph(GeometricParams::default(), 11).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.is_weakly_connected());
        assert!(a.seed().unwrap() >= 11);
    }

    #[test]
    fn geometric_gives_up_when_connectivity_is_impossible() {
        let p = GeometricParams {
            n: 40,
            radius: 0.01,
            ..Default::default()
        };
        assert!(matches!(
            random_geometric_graph(p, 0),
            Err(Error::Disconnected { attempts: 100 })
        ));
    }

    #[test]
    fn delete_edges_variants() {
        let ring = ring_graph(3, 1.0, 0.0).unwrap();
        let bare = delete_edges(&ring, |_| true);
        assert_eq!(bare.num_nodes(), 3);
        assert!(bare.edges().is_empty());
        assert_eq!(delete_edges(&ring, |_| false), ring);

        let g = two_node(0.5, 2.0);
        let kept = delete_edges(&g, |e| e.weight < 1.0);
        assert_eq!(kept.edges(), &[Edge { src: 1, dst: 0, weight: 2.0 }]);
    }

    #[test]
    fn invalid_graphs_rejected() {
        assert!(WeightedDigraph::new(2, vec![(0, 0, 1.0).into()]).is_err());
        assert!(WeightedDigraph::new(2, vec![(0, 1, 0.0).into()]).is_err());
        assert!(WeightedDigraph::new(2, vec![(0, 2, 1.0).into()]).is_err());
        assert!(WeightedDigraph::new(2, vec![(0, 1, 1.0).into(), (0, 1, 2.0).into()]).is_err());
        assert!(serde_json::from_str::<WeightedDigraph>(r#"{"num_nodes":2,"edges":[[0,0,1.0]]}"#).is_err());
    }

    #[test]
    fn json_round_trip_keeps_optional_fields() {
        let g = random_geometric_graph(GeometricParams::default(), 5).unwrap();
        let back: WeightedDigraph = serde_json::from_str(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        let text = ring_graph(3, 1.0, 0.0).unwrap().to_json().unwrap();
        assert!(!text.contains("node_coords"));
    }
}
