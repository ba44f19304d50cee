//! Synthetic datasets with known ground-truth prototypes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset, NodeDataset};
use crate::numerics::Matrix;

/// How each house motif is wired to the base graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttachRule {
    /// A uniformly chosen house node joins a uniformly chosen base node.
    RandomNode,
    /// Always attach through the first bottom node of the house.
    Bottom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaShapesConfig {
    pub base_nodes: usize,
    /// Edges added per new node during preferential attachment.
    pub attach_edges: usize,
    pub motif_count: usize,
    pub perturb_edge_fraction: f64,
    pub attach_rule: AttachRule,
    /// Local-graph radius recorded on the dataset.
    pub hops: usize,
    pub seed: u64,
}

impl Default for BaShapesConfig {
    fn default() -> Self {
        Self {
            base_nodes: 300,
            attach_edges: 5,
            motif_count: 80,
            perturb_edge_fraction: 0.1,
            attach_rule: AttachRule::RandomNode,
            hops: 2,
            seed: 0,
        }
    }
}

/// House roles, in node order within each motif: apex, two middles, two bottoms.
const HOUSE_LABELS: [usize; 5] = [1, 2, 2, 3, 3];
const HOUSE_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (1, 3), (2, 4), (3, 4)];

/// Barabási–Albert graph (networkx convention: m seed nodes without edges,
/// the first newcomer links to all of them).
fn barabasi_albert(n: usize, m: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    if m == 0 || n <= m {
        return edges;
    }
    let mut targets: Vec<usize> = (0..m).collect();
    let mut repeated: Vec<usize> = Vec::new();
    for source in m..n {
        for &t in &targets {
            edges.push((source, t));
        }
        repeated.extend_from_slice(&targets);
        repeated.extend(std::iter::repeat_n(source, m));
        let mut chosen = HashSet::new();
        while chosen.len() < m {
            chosen.insert(repeated[rng.random_range(0..repeated.len())]);
        }
        targets = chosen.into_iter().collect();
        targets.sort_unstable();
    }
    edges
}

fn random_split(n: usize, fractions: (f64, f64), rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let n_train = (n as f64 * fractions.0).round() as usize;
    let n_val = (n as f64 * fractions.1).round() as usize;
    let test = ids.split_off((n_train + n_val).min(n));
    let val = ids.split_off(n_train.min(ids.len()));
    (ids, val, test)
}

fn house_graph(center_role: usize) -> Graph {
    // Reorder so that node 0 carries the requested role.
    let center = HOUSE_LABELS.iter().position(|&l| l == center_role).expect("role");
    let mut order: Vec<usize> = vec![center];
    order.extend((0..5).filter(|&v| v != center));
    let mut pos = [0usize; 5];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    let edges: Vec<(usize, usize)> = HOUSE_EDGES.iter().map(|&(a, b)| (pos[a], pos[b])).collect();
    let mut degree = [0.0; 5];
    for &(a, b) in &edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let features = Matrix::from_fn(5, 2, |i, j| if j == 0 { degree[i] } else { 1.0 });
    let labels = order.iter().map(|&v| HOUSE_LABELS[v]).collect();
    Graph::new(5, edges, features)
        .and_then(|g| g.with_node_labels(labels))
        .expect("house is valid")
        .with_graph_label(center_role)
}

/// BA base graph with attached house motifs and random noise edges.
///
/// Labels: 0 for base nodes, 1/2/3 for house apex/middle/bottom. Features are
/// `[degree, 1]`. Ground-truth prototypes for classes 1–3 are the house
/// reordered so that node 0 has the class's role; class 0 has none.
pub fn gen_ba_shapes(cfg: &BaShapesConfig) -> Result<NodeDataset> {
    let n = cfg
        .motif_count
        .checked_mul(5)
        .and_then(|h| h.checked_add(cfg.base_nodes))
        .ok_or_else(|| Error::Config("BA-Shapes node count overflows".into()))?;
    if cfg.motif_count > 0 && cfg.base_nodes == 0 {
        return Err(Error::Config("house motifs need at least one base node".into()));
    }
    if !(0.0..=1.0).contains(&cfg.perturb_edge_fraction) {
        return Err(Error::Config(format!(
            "perturb_edge_fraction must lie in [0, 1], got {}",
            cfg.perturb_edge_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut edges = barabasi_albert(cfg.base_nodes, cfg.attach_edges, &mut rng);
    let mut labels = vec![0usize; n];
    let mut motif_of = vec![None; n];
    for h in 0..cfg.motif_count {
        let first = cfg.base_nodes + 5 * h;
        for (k, &l) in HOUSE_LABELS.iter().enumerate() {
            labels[first + k] = l;
            motif_of[first + k] = Some(h);
        }
        edges.extend(HOUSE_EDGES.iter().map(|&(a, b)| (first + a, first + b)));
        let from = match cfg.attach_rule {
            AttachRule::RandomNode => first + rng.random_range(0..5),
            AttachRule::Bottom => first + 3,
        };
        edges.push((from, rng.random_range(0..cfg.base_nodes)));
    }
    let mut present: HashSet<(usize, usize)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let noise = (cfg.perturb_edge_fraction * n as f64).floor() as usize;
    let max_edges = n * n.saturating_sub(1) / 2;
    let mut added = 0;
    while added < noise && present.len() < max_edges {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && present.insert((a.min(b), a.max(b))) {
            edges.push((a, b));
            added += 1;
        }
    }
    let mut degree = vec![0.0; n];
    for &(a, b) in &edges {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let features = Matrix::from_fn(n, 2, |i, j| if j == 0 { degree[i] } else { 1.0 });
    let base = Graph::new(n, edges, features)?.with_node_labels(labels)?;
    let (train, val, test) = random_split(n, (0.8, 0.1), &mut rng);
    let ground_truth = (0..4)
        .map(|c| if c == 0 { Vec::new() } else { vec![house_graph(c)] })
        .collect();
    let d = NodeDataset {
        base,
        train,
        val,
        test,
        hops: cfg.hops,
        num_classes: 4,
        ground_truth_prototypes: Some(ground_truth),
        motif_of: Some(motif_of),
    };
    d.validate()?;
    Ok(d)
}

/// Random recursive tree on `k` nodes with shuffled node ids.
fn random_tree(k: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(rng);
    (1..k)
        .map(|v| (perm[v], perm[rng.random_range(0..v)]))
        .collect()
}

fn cycle_edges(k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i, (i + 1) % k)).collect()
}

/// Cycles (class 1) against random trees (class 0), constant node features.
///
/// Classes alternate, so they are balanced within one graph. Ground truth is
/// one path (class 0) and one cycle (class 1) per size in `size_range`.
pub fn gen_cyclic_toy(
    n_graphs: usize,
    size_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<GraphDataset> {
    let (lo, hi) = (*size_range.start(), *size_range.end());
    if lo < 3 || hi > 12 || lo > hi {
        return Err(Error::Config(format!(
            "cyclic toy sizes must lie within 3..=12, got {lo}..={hi}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs = Vec::with_capacity(n_graphs);
    for i in 0..n_graphs {
        let k = rng.random_range(lo..=hi);
        let class = i % 2;
        let edges = if class == 1 { cycle_edges(k) } else { random_tree(k, &mut rng) };
        graphs.push(Graph::new(k, edges, Matrix::filled(k, 1, 1.0))?.with_graph_label(class));
    }
    let (train, val, test) = random_split(n_graphs, (0.5, 0.25), &mut rng);
    let mut paths = Vec::new();
    let mut cycles = Vec::new();
    for k in lo..=hi {
        let path = (0..k - 1).map(|i| (i, i + 1)).collect();
        paths.push(Graph::new(k, path, Matrix::filled(k, 1, 1.0))?.with_graph_label(0));
        cycles.push(Graph::new(k, cycle_edges(k), Matrix::filled(k, 1, 1.0))?.with_graph_label(1));
    }
    let d = GraphDataset {
        graphs,
        train,
        val,
        test,
        num_classes: 2,
        ground_truth_prototypes: Some(vec![paths, cycles]),
    };
    d.validate()?;
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotifDatasetConfig {
    pub classes: usize,
    pub motifs_per_class: usize,
    pub copies_per_motif: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Extra edges beyond the spanning tree, as a fraction of the node count.
    pub extra_edge_fraction: f64,
    pub feature_dim: usize,
    /// Std of the per-class feature means.
    pub class_separation: f64,
    /// Std of each motif's offset from its class mean.
    pub motif_spread: f64,
    /// Std of per-node feature noise around the motif mean.
    pub node_noise: f64,
    /// Per-node deletion probability; the expected number of inserted nodes matches.
    pub node_perturb: f64,
    /// Per-edge rewiring probability.
    pub edge_perturb: f64,
    /// Minimum fraction of motif edges a copy must keep.
    pub min_edge_retention: f64,
    pub seed: u64,
}

impl Default for MotifDatasetConfig {
    fn default() -> Self {
        Self {
            classes: 2,
            motifs_per_class: 5,
            copies_per_motif: 20,
            min_nodes: 8,
            max_nodes: 15,
            extra_edge_fraction: 0.3,
            feature_dim: 8,
            class_separation: 0.3,
            motif_spread: 1.0,
            node_noise: 2.0,
            node_perturb: 0.1,
            edge_perturb: 0.1,
            min_edge_retention: 0.6,
            seed: 0,
        }
    }
}

struct Motif {
    graph: Graph,
    mean: Vec<f64>,
}

fn sample_row(mean: &[f64], std: f64, rng: &mut impl Rng) -> Vec<f64> {
    if std == 0.0 {
        return mean.to_vec();
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    mean.iter().map(|m| m + normal.sample(rng)).collect()
}

fn random_motif(cfg: &MotifDatasetConfig, class: usize, class_mean: &[f64], rng: &mut impl Rng) -> Result<Motif> {
    let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
    let mut edges = random_tree(n, rng);
    let mut present: HashSet<(usize, usize)> = edges.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    let extra = (cfg.extra_edge_fraction * n as f64).round() as usize;
    let max_edges = n * (n - 1) / 2;
    while present.len() < (edges.len() + extra).min(max_edges) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && present.insert((a.min(b), a.max(b))) {
            edges.push((a, b));
        }
    }
    let mean = sample_row(class_mean, cfg.motif_spread, rng);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| sample_row(&mean, cfg.node_noise, rng)).collect();
    let graph = Graph::new(n, edges, Matrix::from_rows(&rows)?)?.with_graph_label(class);
    Ok(Motif { graph, mean })
}

/// One perturbed copy: node deletion/insertion then edge rewiring.
///
/// Returns the copy and the number of motif edges it still contains.
fn perturb(cfg: &MotifDatasetConfig, motif: &Motif, rng: &mut impl Rng) -> Result<(Graph, usize)> {
    let g = &motif.graph;
    let keep: Vec<bool> = (0..g.n()).map(|_| !rng.random_bool(cfg.node_perturb)).collect();
    let mut new_id = vec![usize::MAX; g.n()];
    let mut rows = Vec::new();
    for v in 0..g.n() {
        if keep[v] {
            new_id[v] = rows.len();
            rows.push(g.features().row(v).to_vec());
        }
    }
    if rows.is_empty() {
        new_id[0] = 0;
        rows.push(g.features().row(0).to_vec());
    }
    let mut edges: Vec<(usize, usize, bool)> = g
        .edges()
        .iter()
        .filter(|&&(a, b)| new_id[a] != usize::MAX && new_id[b] != usize::MAX)
        .map(|&(a, b)| (new_id[a], new_id[b], true))
        .collect();
    let inserted = (0..g.n()).filter(|_| rng.random_bool(cfg.node_perturb)).count();
    for _ in 0..inserted {
        let anchor = rng.random_range(0..rows.len());
        edges.push((rows.len(), anchor, false));
        rows.push(sample_row(&motif.mean, cfg.node_noise, rng));
    }
    let n = rows.len();
    let mut present: HashSet<(usize, usize)> = edges.iter().map(|&(a, b, _)| (a.min(b), a.max(b))).collect();
    if n > 2 {
        for e in edges.iter_mut() {
            if !rng.random_bool(cfg.edge_perturb) {
                continue;
            }
            // Move one endpoint to a random node, keeping the graph simple.
            for _ in 0..8 {
                let c = rng.random_range(0..n);
                let fixed = e.0;
                let cand = (fixed.min(c), fixed.max(c));
                if c != fixed && !present.contains(&cand) {
                    present.remove(&(e.0.min(e.1), e.0.max(e.1)));
                    present.insert(cand);
                    *e = (fixed, c, false);
                    break;
                }
            }
        }
    }
    let retained = edges.iter().filter(|e| e.2).count();
    let pairs = edges.into_iter().map(|(a, b, _)| (a, b)).collect();
    let graph = Graph::new(n, pairs, Matrix::from_rows(&rows)?)?.with_graph_label(g.graph_label().expect("labeled"));
    Ok((graph, retained))
}

/// Motif-plus-perturbation graph classification dataset.
///
/// Each class owns `motifs_per_class` random motifs whose node features come
/// from a class-level Gaussian; the dataset holds perturbed copies of them.
/// The motifs themselves are the ground-truth prototypes.
/// A perturbed copy keeping at least `min_edge_retention` of the motif's
/// edges; resamples up to 1000 times, then keeps the last draw.
fn perturbed_copy(cfg: &MotifDatasetConfig, motif: &Motif, rng: &mut impl Rng) -> Result<(Graph, usize)> {
    let total = motif.graph.edges().len();
    let mut attempt = 0;
    loop {
        let (copy, retained) = perturb(cfg, motif, rng)?;
        attempt += 1;
        if retained as f64 >= cfg.min_edge_retention * total as f64 || attempt >= 1000 {
            return Ok((copy, retained));
        }
    }
}

pub fn gen_motif_dataset(cfg: &MotifDatasetConfig) -> Result<GraphDataset> {
    if cfg.classes == 0 || cfg.motifs_per_class == 0 || cfg.feature_dim == 0 {
        return Err(Error::Config("motif dataset needs classes, motifs and features".into()));
    }
    if cfg.min_nodes < 2 || cfg.min_nodes > cfg.max_nodes {
        return Err(Error::Config(format!(
            "motif sizes must satisfy 2 <= min <= max, got {}..={}",
            cfg.min_nodes, cfg.max_nodes
        )));
    }
    for (name, p) in [
        ("node_perturb", cfg.node_perturb),
        ("edge_perturb", cfg.edge_perturb),
        ("min_edge_retention", cfg.min_edge_retention),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graphs = Vec::new();
    let mut ground_truth = Vec::new();
    for class in 0..cfg.classes {
        let class_mean = sample_row(&vec![0.0; cfg.feature_dim], cfg.class_separation, &mut rng);
        let mut motifs = Vec::new();
        for _ in 0..cfg.motifs_per_class {
            let motif = random_motif(cfg, class, &class_mean, &mut rng)?;
            for _ in 0..cfg.copies_per_motif {
                graphs.push(perturbed_copy(cfg, &motif, &mut rng)?.0);
            }
            motifs.push(motif.graph);
        }
        ground_truth.push(motifs);
    }
    let (train, val, test) = random_split(graphs.len(), (0.5, 0.25), &mut rng);
    let d = GraphDataset {
        graphs,
        train,
        val,
        test,
        num_classes: cfg.classes,
        ground_truth_prototypes: Some(ground_truth),
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ba_shapes_defaults() {
        let d = gen_ba_shapes(&BaShapesConfig::default()).unwrap();
        assert_eq!(d.base.n(), 700);
        assert_eq!(d.num_classes, 4);
        let labels = d.base.node_labels().unwrap();
        for c in 0..4 {
            assert!(labels.contains(&c));
        }
        assert_eq!(d.train.len() + d.val.len() + d.test.len(), 700);
    }

    #[test]
    fn ba_shapes_without_motifs() {
        let cfg = BaShapesConfig {
            motif_count: 0,
            ..Default::default()
        };
        let d = gen_ba_shapes(&cfg).unwrap();
        assert!(d.base.node_labels().unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn house_membership() {
        let d = gen_ba_shapes(&BaShapesConfig::default()).unwrap();
        let labels = d.base.node_labels().unwrap();
        let motif_of = d.motif_of.as_ref().unwrap();
        let mut groups = vec![Vec::new(); 80];
        for v in 0..d.base.n() {
            match motif_of[v] {
                Some(h) => groups[h].push(labels[v]),
                None => assert_eq!(labels[v], 0),
            }
        }
        for g in &mut groups {
            g.sort_unstable();
            assert_eq!(g, &vec![1, 2, 2, 3, 3]);
        }
        for v in 0..d.base.n() {
            if labels[v] == 1 {
                let inside = d
                    .base
                    .neighbors(v)
                    .iter()
                    .filter(|&&u| motif_of[u] == motif_of[v])
                    .count();
                assert!(inside >= 2);
            }
        }
    }

    #[test]
    fn ba_shapes_seeded() {
        let a = gen_ba_shapes(&BaShapesConfig::default()).unwrap();
        let b = gen_ba_shapes(&BaShapesConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = gen_ba_shapes(&BaShapesConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn house_ground_truth_centers() {
        for role in 1..=3 {
            let g = house_graph(role);
            assert_eq!(g.node_labels().unwrap()[0], role);
            assert_eq!(g.edges().len(), 6);
        }
    }

    #[test]
    fn cyclic_toy_structure() {
        let d = gen_cyclic_toy(40, 3..=8, 3).unwrap();
        let ones = d.graphs.iter().filter(|g| g.graph_label() == Some(1)).count();
        assert!((ones as isize - 20).abs() <= 1);
        for g in &d.graphs {
            assert_eq!(g.has_cycle(), g.graph_label() == Some(1));
            if g.graph_label() == Some(1) && g.n() == 3 {
                assert_eq!(g.edges().len(), 3);
            }
        }
        assert!(gen_cyclic_toy(4, 2..=5, 0).is_err());
    }

    #[test]
    fn motif_defaults() {
        let d = gen_motif_dataset(&MotifDatasetConfig::default()).unwrap();
        assert_eq!(d.graphs.len(), 200);
        for c in 0..2 {
            assert_eq!(d.graphs.iter().filter(|g| g.graph_label() == Some(c)).count(), 100);
        }
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (100, 50, 50));
        let gt = d.ground_truth_prototypes.as_ref().unwrap();
        assert!(gt.iter().all(|m| m.len() == 5));
        assert!(gt.iter().flatten().all(|g| (8..=15).contains(&g.n())));
    }

    #[test]
    fn unperturbed_copies_equal_motif() {
        let cfg = MotifDatasetConfig {
            node_perturb: 0.0,
            edge_perturb: 0.0,
            copies_per_motif: 3,
            ..Default::default()
        };
        let d = gen_motif_dataset(&cfg).unwrap();
        let gt = d.ground_truth_prototypes.as_ref().unwrap();
        for (i, g) in d.graphs.iter().enumerate() {
            let class = i / (3 * 5);
            let motif = &gt[class][(i / 3) % 5];
            assert_eq!(g, motif);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

        #[test]
        fn copies_keep_most_motif_edges(seed in 0u64..10_000) {
            let cfg = MotifDatasetConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let motif = random_motif(&cfg, 0, &vec![0.0; cfg.feature_dim], &mut rng).unwrap();
            let (_, retained) = perturbed_copy(&cfg, &motif, &mut rng).unwrap();
            proptest::prop_assert!(retained as f64 >= 0.6 * motif.graph.edges().len() as f64);
        }
    }
}
