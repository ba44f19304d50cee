//! Graph representation, GCN adjacency normalization, local-graph extraction
//! and negative sampling.

use std::collections::{HashSet, VecDeque};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Csr, Matrix};

/// Undirected attributed graph, optionally weighted and labeled.
///
/// Edges are stored once as `(i, j)` with `i < j`; self-loops are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    edge_weights: Option<Vec<f64>>,
    features: Matrix,
    graph_label: Option<usize>,
    node_labels: Option<Vec<usize>>,
    true_degrees: Option<Vec<f64>>,
    base_ids: Option<Vec<usize>>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Validates and canonicalizes the edge list.
    pub fn new(n: usize, edges: Vec<(usize, usize)>, features: Matrix) -> Result<Self> {
        Self::with_weights(n, edges, None, features)
    }

    pub fn with_weights(
        n: usize,
        edges: Vec<(usize, usize)>,
        edge_weights: Option<Vec<f64>>,
        features: Matrix,
    ) -> Result<Self> {
        if features.rows() != n {
            return Err(Error::Graph(format!(
                "feature matrix has {} rows but n = {n}",
                features.rows()
            )));
        }
        if let Some(w) = &edge_weights {
            if w.len() != edges.len() {
                return Err(Error::Graph(format!(
                    "{} edge weights for {} edges",
                    w.len(),
                    edges.len()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut canon = Vec::with_capacity(edges.len());
        let mut neighbors = vec![Vec::new(); n];
        for (k, &(a, b)) in edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(Error::Graph(format!(
                    "edge {k} ({a}, {b}) references a node >= n = {n}"
                )));
            }
            if a == b {
                return Err(Error::Graph(format!("edge {k} ({a}, {b}) is a self-loop")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::Graph(format!("edge {k} ({a}, {b}) is a duplicate")));
            }
            if let Some(w) = &edge_weights {
                if !(w[k] > 0.0 && w[k] <= 1.0) {
                    return Err(Error::Graph(format!(
                        "edge {k} ({a}, {b}) has weight {} outside (0, 1]",
                        w[k]
                    )));
                }
            }
            canon.push(e);
            neighbors[e.0].push(e.1);
            neighbors[e.1].push(e.0);
        }
        neighbors.iter_mut().for_each(|nb| nb.sort_unstable());
        Ok(Self {
            n,
            edges: canon,
            edge_weights,
            features,
            graph_label: None,
            node_labels: None,
            true_degrees: None,
            base_ids: None,
            neighbors,
        })
    }

    pub fn with_graph_label(mut self, label: usize) -> Self {
        self.graph_label = Some(label);
        self
    }

    pub fn with_node_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::Graph(format!(
                "{} node labels for {} nodes",
                labels.len(),
                self.n
            )));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn with_true_degrees(mut self, degrees: Vec<f64>) -> Result<Self> {
        if degrees.len() != self.n {
            return Err(Error::Graph(format!(
                "{} true degrees for {} nodes",
                degrees.len(),
                self.n
            )));
        }
        self.true_degrees = Some(degrees);
        Ok(self)
    }

    pub fn set_graph_label(&mut self, label: Option<usize>) {
        self.graph_label = label;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_weights(&self) -> Option<&[f64]> {
        self.edge_weights.as_deref()
    }

    pub fn edge_weight(&self, k: usize) -> f64 {
        self.edge_weights.as_ref().map_or(1.0, |w| w[k])
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn true_degrees(&self) -> Option<&[f64]> {
        self.true_degrees.as_deref()
    }

    /// Node ids in the base graph, for local graphs produced by [`extract_local_graph`].
    pub fn base_ids(&self) -> Option<&[usize]> {
        self.base_ids.as_deref()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// Weighted degree (sum of incident edge weights).
    pub fn weighted_degrees(&self) -> Vec<f64> {
        let mut deg = vec![0.0; self.n];
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            let w = self.edge_weight(k);
            deg[a] += w;
            deg[b] += w;
        }
        deg
    }

    /// True iff the graph contains a cycle (iterative DFS over the edge set).
    pub fn has_cycle(&self) -> bool {
        let mut visited = vec![false; self.n];
        for start in 0..self.n {
            if visited[start] {
                continue;
            }
            let mut stack = vec![(start, usize::MAX)];
            visited[start] = true;
            while let Some((v, parent)) = stack.pop() {
                for &u in &self.neighbors[v] {
                    if u == parent {
                        continue;
                    }
                    if visited[u] {
                        return true;
                    }
                    visited[u] = true;
                    stack.push((u, v));
                }
            }
        }
        false
    }

    /// Hop distances from `v` (None for unreachable nodes).
    pub fn bfs_distances(&self, v: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[v] = Some(0);
        let mut queue = VecDeque::from([v]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &w in &self.neighbors[u] {
                if dist[w].is_none() {
                    dist[w] = Some(d + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Degree-normalized sparse propagation operator (see [`normalize_adjacency`]).
    pub fn propagation(&self) -> Csr {
        let degrees = self.normalization_degrees();
        let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut trip = Vec::with_capacity(self.n + 2 * self.edges.len());
        for (i, s) in inv_sqrt.iter().enumerate() {
            trip.push((i, i, s * s));
        }
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            let v = self.edge_weight(k) * inv_sqrt[a] * inv_sqrt[b];
            trip.push((a, b, v));
            trip.push((b, a, v));
        }
        Csr::from_triplets(self.n, self.n, trip)
    }

    fn normalization_degrees(&self) -> Vec<f64> {
        match &self.true_degrees {
            Some(d) => d.iter().map(|x| x + 1.0).collect(),
            None => self.weighted_degrees().iter().map(|x| x + 1.0).collect(),
        }
    }
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` as a dense matrix.
///
/// `A` carries edge weights when present. `D̃` uses `true_degrees + 1` when the
/// graph records original degrees, otherwise the row sums of `A + I`.
pub fn normalize_adjacency(g: &Graph) -> Matrix {
    g.propagation().to_dense()
}

/// Node-classification dataset over one base graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDataset {
    pub base: Graph,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// GCN depth; local graphs contain nodes within this many hops.
    pub hops: usize,
    pub num_classes: usize,
    /// Per class, ground-truth prototype graphs (node 0 is the center).
    pub ground_truth_prototypes: Option<Vec<Vec<Graph>>>,
    /// Motif instance each node belongs to, when generated with motifs.
    pub motif_of: Option<Vec<Option<usize>>>,
}

impl NodeDataset {
    pub fn validate(&self) -> Result<()> {
        let labels = self
            .base
            .node_labels()
            .ok_or_else(|| Error::Graph("node dataset base graph has no node labels".into()))?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Graph(format!(
                "node label {bad} >= class count {}",
                self.num_classes
            )));
        }
        check_splits(&self.train, &self.val, &self.test, self.base.n())
    }

    pub fn label(&self, v: usize) -> usize {
        self.base.node_labels().expect("validated")[v]
    }
}

/// Graph-classification dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub graphs: Vec<Graph>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub num_classes: usize,
    pub ground_truth_prototypes: Option<Vec<Vec<Graph>>>,
}

impl GraphDataset {
    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.graphs.iter().enumerate() {
            match g.graph_label() {
                Some(l) if l >= self.num_classes => {
                    return Err(Error::Graph(format!(
                        "graph {i} has label {l} >= class count {}",
                        self.num_classes
                    )))
                }
                _ => {}
            }
        }
        let dims: HashSet<usize> = self.graphs.iter().map(Graph::feature_dim).collect();
        if dims.len() > 1 {
            return Err(Error::Graph(format!("mixed feature widths {dims:?}")));
        }
        check_splits(&self.train, &self.val, &self.test, self.graphs.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs.first().map_or(0, Graph::feature_dim)
    }
}

fn check_splits(train: &[usize], val: &[usize], test: &[usize], n: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for (name, split) in [("train", train), ("val", val), ("test", test)] {
        for &i in split {
            if i >= n {
                return Err(Error::Graph(format!("{name} split index {i} >= {n}")));
            }
            if !seen.insert(i) {
                return Err(Error::Graph(format!("index {i} appears in more than one split")));
            }
        }
    }
    Ok(())
}

/// Local graph of `v`: the subgraph induced by nodes within `hops` of `v`.
///
/// Node 0 of the result is `v`; remaining nodes follow BFS order. The result
/// records each node's degree in the base graph as `true_degrees`, its base
/// node ids, and carries `v`'s label as the graph label.
pub fn extract_local_graph(d: &NodeDataset, v: usize) -> Result<Graph> {
    local_graph(&d.base, v, d.hops)
}

pub fn local_graph(base: &Graph, v: usize, hops: usize) -> Result<Graph> {
    if v >= base.n() {
        return Err(Error::Index {
            index: v,
            len: base.n(),
        });
    }
    let mut order = vec![v];
    let mut local = vec![usize::MAX; base.n()];
    local[v] = 0;
    let mut frontier = vec![v];
    for _ in 0..hops {
        let mut next = Vec::new();
        for &u in &frontier {
            for &w in base.neighbors(u) {
                if local[w] == usize::MAX {
                    local[w] = order.len();
                    order.push(w);
                    next.push(w);
                }
            }
        }
        frontier = next;
    }
    let mut edges = Vec::new();
    let mut weights = base.edge_weights().map(|_| Vec::new());
    for (k, &(a, b)) in base.edges().iter().enumerate() {
        if local[a] != usize::MAX && local[b] != usize::MAX {
            edges.push((local[a], local[b]));
            if let Some(w) = &mut weights {
                w.push(base.edge_weight(k));
            }
        }
    }
    let features = Matrix::from_fn(order.len(), base.feature_dim(), |i, j| {
        base.features().get(order[i], j)
    });
    let base_degrees = base.weighted_degrees();
    let mut g = Graph::with_weights(order.len(), edges, weights, features)?
        .with_true_degrees(order.iter().map(|&u| base_degrees[u]).collect())?;
    if let Some(labels) = base.node_labels() {
        g = g.with_node_labels(order.iter().map(|&u| labels[u]).collect())?;
        g.graph_label = Some(labels[v]);
    }
    g.base_ids = Some(order);
    Ok(g)
}

/// Up to `count` distinct nodes drawn uniformly from the non-neighbors of `v`
/// (excluding `v`). Returns the whole pool when it holds fewer than `count`.
pub fn negative_sample(g: &Graph, v: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let pool = g.n() - 1 - g.degree(v);
    if count == 0 || pool == 0 {
        return Vec::new();
    }
    let excluded = |u: usize| u == v || g.has_edge(v, u);
    if count >= pool {
        return (0..g.n()).filter(|&u| !excluded(u)).collect();
    }
    if pool * 2 >= g.n() {
        // Rejection sampling: cheap when most nodes are candidates.
        let mut picked = Vec::with_capacity(count);
        while picked.len() < count {
            let u = rng.random_range(0..g.n());
            if !excluded(u) && !picked.contains(&u) {
                picked.push(u);
            }
        }
        picked
    } else {
        let candidates: Vec<usize> = (0..g.n()).filter(|&u| !excluded(u)).collect();
        index::sample(rng, candidates.len(), count)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_features(n: usize) -> Matrix {
        Matrix::filled(n, 1, 1.0)
    }

    fn path3() -> NodeDataset {
        let g = Graph::new(3, vec![(0, 1), (1, 2)], unit_features(3))
            .unwrap()
            .with_node_labels(vec![0, 1, 0])
            .unwrap();
        NodeDataset {
            base: g,
            train: vec![0],
            val: vec![1],
            test: vec![2],
            hops: 1,
            num_classes: 2,
            ground_truth_prototypes: None,
            motif_of: None,
        }
    }

    #[test]
    fn rejects_invalid_edges() {
        let f = unit_features(3);
        assert!(Graph::new(3, vec![(0, 3)], f.clone()).is_err());
        assert!(Graph::new(3, vec![(1, 1)], f.clone()).is_err());
        assert!(Graph::new(3, vec![(0, 1), (1, 0)], f.clone()).is_err());
        assert!(Graph::with_weights(3, vec![(0, 1)], Some(vec![1.5]), f.clone()).is_err());
        assert!(Graph::with_weights(3, vec![(0, 1)], Some(vec![0.0]), f.clone()).is_err());
        assert!(Graph::new(2, vec![], f).is_err());
    }

    #[test]
    fn normalization_small_cases() {
        let g = Graph::new(1, vec![], unit_features(1)).unwrap();
        assert_eq!(normalize_adjacency(&g).data(), &[1.0]);
        let g = Graph::new(2, vec![(0, 1)], unit_features(2)).unwrap();
        let a = normalize_adjacency(&g);
        for v in a.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn local_graph_of_path() {
        let d = path3();
        let mid = extract_local_graph(&d, 1).unwrap();
        assert_eq!(mid.n(), 3);
        assert_eq!(mid.edges().len(), 2);
        assert_eq!(mid.base_ids().unwrap()[0], 1);
        assert_eq!(mid.graph_label(), Some(1));
        let end = extract_local_graph(&d, 0).unwrap();
        assert_eq!(end.n(), 2);
        assert_eq!(end.edges(), &[(0, 1)]);
        assert_eq!(end.true_degrees().unwrap(), &[1.0, 2.0]);
        assert!(matches!(extract_local_graph(&d, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn isolated_node_local_graph() {
        let g = Graph::new(2, vec![], unit_features(2))
            .unwrap()
            .with_node_labels(vec![1, 0])
            .unwrap();
        let d = NodeDataset {
            base: g,
            train: vec![],
            val: vec![],
            test: vec![],
            hops: 2,
            num_classes: 2,
            ground_truth_prototypes: None,
            motif_of: None,
        };
        let ego = extract_local_graph(&d, 0).unwrap();
        assert_eq!(ego.n(), 1);
        assert_eq!(ego.graph_label(), Some(1));
    }

    #[test]
    fn negatives_in_complete_and_star_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k4 = Graph::new(
            4,
            vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
            unit_features(4),
        )
        .unwrap();
        assert!(negative_sample(&k4, 2, 5, &mut rng).is_empty());
        let star = Graph::new(5, vec![(0, 1), (0, 2), (0, 3), (0, 4)], unit_features(5)).unwrap();
        assert!(negative_sample(&star, 0, 3, &mut rng).is_empty());
        for _ in 0..20 {
            let s = negative_sample(&star, 2, 2, &mut rng);
            assert_eq!(s.len(), 2);
            assert!(!s.contains(&0) && !s.contains(&2));
            assert_ne!(s[0], s[1]);
        }
        let all = negative_sample(&star, 1, 10, &mut rng);
        assert_eq!(all, vec![2, 3, 4]);
    }

    #[test]
    fn cycle_detection() {
        let tri = Graph::new(3, vec![(0, 1), (1, 2), (0, 2)], unit_features(3)).unwrap();
        assert!(tri.has_cycle());
        let path = Graph::new(3, vec![(0, 1), (1, 2)], unit_features(3)).unwrap();
        assert!(!path.has_cycle());
    }

    #[test]
    fn split_validation() {
        let mut d = path3();
        d.validate().unwrap();
        d.val = vec![0];
        assert!(d.validate().is_err());
    }
}
