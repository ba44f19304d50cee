#![allow(dead_code)]

use protognn::graph::{Graph, GraphDataset};
use protognn::model::Model;
use protognn::numerics::{Matrix, ParamStore};
use protognn::trainer::TrainConfig;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Random connected graph: a random tree plus a few extra edges.
pub fn random_graph(n: usize, dim: usize, rng: &mut impl Rng) -> Graph {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
    for _ in 0..rng.random_range(0..=n / 2) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && !edges.contains(&(a.min(b), a.max(b))) && !edges.contains(&(a.max(b), a.min(b))) {
            edges.push((a.min(b), a.max(b)));
        }
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    Graph::new(n, edges, Matrix::from_fn(n, dim, |_, _| normal.sample(rng))).unwrap()
}

/// `count` small graphs with alternating labels, all in the training split.
pub fn micro_dataset(count: usize, dim: usize, rng: &mut impl Rng) -> GraphDataset {
    let graphs = (0..count)
        .map(|i| {
            let n = rng.random_range(3..=5);
            random_graph(n, dim, rng).with_graph_label(i % 2)
        })
        .collect();
    GraphDataset {
        graphs,
        train: (0..count).collect(),
        val: Vec::new(),
        test: Vec::new(),
        num_classes: 2,
        ground_truth_prototypes: None,
    }
}

/// Tiny dimensions and no pretraining.
pub fn micro_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden_dim: 3,
        embed_dim: 3,
        decoder_hidden: 3,
        k: 1,
        q: 2,
        pretrain_epochs: 0,
        train_epochs: 0,
        kmeans_restarts: 2,
        seed,
        ..TrainConfig::default()
    }
}

/// Adds Gaussian noise to every parameter, prototype embeddings included.
pub fn perturb(model: &mut Model, sd: f64, rng: &mut impl Rng) {
    perturb_store(&mut model.store, sd, rng);
}

pub fn perturb_store(store: &mut ParamStore, sd: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, sd).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += normal.sample(rng);
        }
    }
}
