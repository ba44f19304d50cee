//! Learnable prototype embeddings, K-Means initialization and the
//! deviation regularizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::{sq_dist, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub objective: f64,
    /// Objective after seeding and after every refinement pass of the best run.
    pub history: Vec<f64>,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = d2.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// One run: Lloyd iterations, then single-point moves that lower the
/// objective once centroid shifts are accounted for.
fn run_once(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut impl Rng) -> KMeans {
    let dim = points[0].len();
    let mut centroids = plus_plus_seeds(points, k, rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = vec![objective(points, &centroids, &assignments)];
    for _ in 0..max_iter {
        let (mut mu, counts) = means(points, &assignments, k, dim);
        // An emptied cluster restarts at the point worst served by its centroid.
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = (0..points.len())
                .map(|i| (i, sq_dist(&points[i], &mu[assignments[i]])))
                .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
                .0;
            mu[c] = points[far].clone();
        }
        centroids = mu;
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != assignments;
        assignments = next;
        history.push(objective(points, &centroids, &assignments));
        if !changed {
            break;
        }
    }
    let (mut centroids, mut counts) = means(points, &assignments, k, dim);
    let mut improved = true;
    let mut passes = 0;
    while improved && passes < max_iter {
        improved = false;
        passes += 1;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] <= 1 {
                continue;
            }
            let ca = counts[a] as f64;
            let removal = ca / (ca - 1.0) * sq_dist(p, &centroids[a]);
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let cb = counts[b] as f64;
                let add = cb / (cb + 1.0) * sq_dist(p, &centroids[b]);
                if add < removal - 1e-12 * (1.0 + removal) && best.is_none_or(|(_, v)| add < v) {
                    best = Some((b, add));
                }
            }
            if let Some((b, _)) = best {
                let (ca, cb) = (counts[a] as f64, counts[b] as f64);
                for (j, x) in p.iter().enumerate() {
                    centroids[a][j] = (centroids[a][j] * ca - x) / (ca - 1.0);
                    centroids[b][j] = (centroids[b][j] * cb + x) / (cb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assignments[i] = b;
                improved = true;
            }
        }
        if improved {
            // Recompute exactly to avoid drift from incremental updates.
            let (mu, cnt) = means(points, &assignments, k, dim);
            centroids = mu;
            counts = cnt;
            history.push(objective(points, &centroids, &assignments));
        }
    }
    let objective = objective(points, &centroids, &assignments);
    KMeans {
        centroids,
        assignments,
        objective,
        history,
    }
}

/// K-Means with k-means++ seeding; the best of `n_init` runs is returned.
///
/// With fewer points than `k`, every point becomes its own centroid and the
/// remaining centroids repeat points cyclically.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize, n_init: usize, rng: &mut impl Rng) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Config("K-Means needs at least one cluster".into()));
    }
    if points.is_empty() {
        return Err(Error::Config("K-Means needs at least one point".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Usage("K-Means points differ in dimension".into()));
    }
    if points.len() <= k {
        let centroids: Vec<Vec<f64>> = (0..k).map(|c| points[c % points.len()].clone()).collect();
        return Ok(KMeans {
            centroids,
            assignments: (0..points.len()).collect(),
            objective: 0.0,
            history: vec![0.0],
        });
    }
    let mut best: Option<KMeans> = None;
    for _ in 0..n_init.max(1) {
        let run = run_once(points, k, max_iter, rng);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

/// One prototype of class `class`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub class: usize,
    pub index: usize,
    /// Learnable `H̃`, stored in the model's parameter store.
    pub embedding: ParamId,
    /// Frozen `H_init`.
    pub init_embedding: Matrix,
    pub init_graph: SerdeGraph,
    /// Index of the init graph in the dataset.
    pub source: usize,
}

/// A [`Graph`] wrapper that serializes through the graph file schema.
#[derive(Clone, Debug, PartialEq)]
pub struct SerdeGraph(pub Graph);

impl Serialize for SerdeGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let text = crate::io::graph_to_string(&self.0);
        let value: serde_json::Value = serde_json::from_str(&text).map_err(serde::ser::Error::custom)?;
        value.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SerdeGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let value = serde_json::Value::deserialize(d)?;
        crate::io::graph_from_value(value)
            .map(SerdeGraph)
            .map_err(serde::de::Error::custom)
    }
}

/// `C·K` prototypes ordered by `(class, index)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub num_classes: usize,
    pub per_class: usize,
    pub entries: Vec<Prototype>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().map(|p| p.class).collect()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
        self.entries.iter().map(|p| tape.param(store, p.embedding)).collect()
    }

    pub fn bind_constant(&self, tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| tape.constant(store.value(p.embedding).clone()))
            .collect()
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        for p in &self.entries {
            store.set_frozen(p.embedding, frozen);
        }
    }

    /// Value of `L_R` without a tape.
    pub fn regularizer_value(&self, store: &ParamStore) -> f64 {
        let total: f64 = self
            .entries
            .iter()
            .map(|p| {
                store
                    .value(p.embedding)
                    .zip_map(&p.init_embedding, |a, b| a - b)
                    .frobenius_sq()
            })
            .sum();
        total / self.entries.len().max(1) as f64
    }
}

/// `L_R = (1/CK) Σ ‖H̃ − H_init‖²_F` over bound prototype embeddings.
pub fn regularizer(tape: &mut Tape, ps: &PrototypeSet, embeddings: &[Var]) -> Result<Var> {
    if embeddings.len() != ps.len() {
        return Err(Error::Usage(format!(
            "{} bound embeddings for {} prototypes",
            embeddings.len(),
            ps.len()
        )));
    }
    let mut terms = Vec::with_capacity(ps.len());
    for (p, &h) in ps.entries.iter().zip(embeddings) {
        let init = tape.constant(p.init_embedding.clone());
        let d = tape.sub(h, init)?;
        terms.push(tape.frobenius_sq(d));
    }
    let all = tape.concat_rows(&terms)?;
    let sum = tape.sum(all);
    Ok(tape.scale(sum, 1.0 / ps.len().max(1) as f64))
}

/// Inputs to prototype initialization over a dataset `D`.
pub struct InitPool<'a> {
    /// Graph embedding of every instance in `D`.
    pub embeddings: &'a [Vec<f64>],
    /// Predicted class of every instance.
    pub predicted: &'a [usize],
    /// Known labels (training split), used only when a class has no predictions.
    pub known_labels: &'a [Option<usize>],
}

pub struct InitOptions {
    pub num_classes: usize,
    pub per_class: usize,
    pub max_iter: usize,
    pub n_init: usize,
}

/// Chooses `K` init graphs per class and registers their embeddings.
///
/// For each class the embeddings of instances predicted as that class are
/// clustered; each centroid takes the nearest instance of `D` (lowest index on
/// ties), skipping instances already chosen for the class. `materialize` turns
/// an instance index into its graph (local graphs are built on demand).
pub fn init_prototypes(
    store: &mut ParamStore,
    enc: &Encoder,
    pool: &InitPool<'_>,
    opts: &InitOptions,
    mut materialize: impl FnMut(usize) -> Result<Graph>,
    rng: &mut impl Rng,
) -> Result<PrototypeSet> {
    let n = pool.embeddings.len();
    if pool.predicted.len() != n || pool.known_labels.len() != n {
        return Err(Error::Usage("init pool vectors differ in length".into()));
    }
    if opts.per_class == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if opts.per_class > n {
        return Err(Error::Config(format!(
            "K = {} exceeds the {n} available graphs",
            opts.per_class
        )));
    }
    let mut entries = Vec::with_capacity(opts.num_classes * opts.per_class);
    for class in 0..opts.num_classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| pool.predicted[i] == class).collect();
        if members.is_empty() {
            members = (0..n).filter(|&i| pool.known_labels[i] == Some(class)).collect();
        }
        if members.is_empty() {
            return Err(Error::Config(format!(
                "class {class} has no predicted or labeled members to initialize prototypes from"
            )));
        }
        let points: Vec<Vec<f64>> = members.iter().map(|&i| pool.embeddings[i].clone()).collect();
        let km = kmeans(&points, opts.per_class, opts.max_iter, opts.n_init, rng)?;
        let mut chosen: Vec<usize> = Vec::with_capacity(opts.per_class);
        for (index, centroid) in km.centroids.iter().enumerate() {
            let source = (0..n)
                .filter(|i| !chosen.contains(i))
                .map(|i| (i, sq_dist(&pool.embeddings[i], centroid)))
                .fold(None, |best: Option<(usize, f64)>, cand| match best {
                    Some(b) if b.1 <= cand.1 => Some(b),
                    _ => Some(cand),
                })
                .map(|(i, _)| i)
                .expect("K <= |D| leaves a candidate");
            chosen.push(source);
            let graph = materialize(source)?;
            let init_embedding = enc.node_embeddings(store, &graph)?;
            let embedding = store.add(format!("prototype.{class}.{index}"), init_embedding.clone());
            entries.push(Prototype {
                class,
                index,
                embedding,
                init_embedding,
                init_graph: SerdeGraph(graph),
                source,
            });
        }
    }
    Ok(PrototypeSet {
        num_classes: opts.num_classes,
        per_class: opts.per_class,
        entries,
    })
}
