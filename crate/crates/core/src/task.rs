//! Graph- and node-classification behind one interface.
//!
//! In node mode every node is an instance whose graph is its local graph.
//! Embeddings are computed once on the whole base graph and the center rows
//! are read off; with original degrees recorded on local graphs this gives
//! the same center embeddings as encoding each local graph separately.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::Prediction;
use crate::encoder::{BoundEncoder, Propagation, Readout};
use crate::error::{Error, Result};
use crate::generator::{attr_error, link_error, recon_losses, sample_links, BoundGenerator, LinkSample};
use crate::graph::{local_graph, Graph, GraphDataset, NodeDataset};
use crate::io::Dataset;
use crate::model::Model;
use crate::numerics::{Csr, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Graph,
    Node,
}

impl Mode {
    pub fn default_readout(self) -> Readout {
        match self {
            Mode::Graph => Readout::Mean,
            Mode::Node => Readout::Center,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Task<'a> {
    Graph(&'a GraphDataset),
    Node(&'a NodeDataset),
}

impl<'a> From<&'a Dataset> for Task<'a> {
    fn from(d: &'a Dataset) -> Self {
        match d {
            Dataset::Graph(g) => Task::Graph(g),
            Dataset::Node(n) => Task::Node(n),
        }
    }
}

impl<'a> Task<'a> {
    pub fn mode(&self) -> Mode {
        match self {
            Task::Graph(_) => Mode::Graph,
            Task::Node(_) => Mode::Node,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Task::Graph(d) => d.num_classes,
            Task::Node(d) => d.num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Task::Graph(d) => d.feature_dim(),
            Task::Node(d) => d.base.feature_dim(),
        }
    }

    /// Number of instances in `D`.
    pub fn len(&self) -> usize {
        match self {
            Task::Graph(d) => d.graphs.len(),
            Task::Node(d) => d.base.n(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        match self {
            Task::Graph(d) => d.graphs[i].graph_label(),
            Task::Node(d) => d.base.node_labels().map(|l| l[i]),
        }
    }

    pub fn split(&self, s: Split) -> &'a [usize] {
        let (train, val, test) = match self {
            Task::Graph(d) => (&d.train, &d.val, &d.test),
            Task::Node(d) => (&d.train, &d.val, &d.test),
        };
        match s {
            Split::Train => train,
            Split::Val => val,
            Split::Test => test,
        }
    }

    /// Labels of `ids`; an unlabeled instance is a usage error.
    pub fn labels(&self, ids: &[usize]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&i| {
                self.label(i)
                    .ok_or_else(|| Error::Usage(format!("instance {i} has no label")))
            })
            .collect()
    }

    /// Graph of instance `i` (the local graph in node mode).
    pub fn instance_graph(&self, i: usize) -> Result<Graph> {
        match self {
            Task::Graph(d) => d.graphs.get(i).cloned().ok_or(Error::Index {
                index: i,
                len: d.graphs.len(),
            }),
            Task::Node(d) => local_graph(&d.base, i, d.hops),
        }
    }

    pub fn ground_truth(&self) -> Option<&'a Vec<Vec<Graph>>> {
        match self {
            Task::Graph(d) => d.ground_truth_prototypes.as_ref(),
            Task::Node(d) => d.ground_truth_prototypes.as_ref(),
        }
    }

    pub fn prepare(&self) -> Prepared {
        match self {
            Task::Graph(d) => Prepared::Graphs(d.graphs.iter().map(|g| Rc::new(g.propagation())).collect()),
            Task::Node(d) => Prepared::Base(Rc::new(d.base.propagation())),
        }
    }
}

/// Cached propagation operators.
pub enum Prepared {
    Graphs(Vec<Rc<Csr>>),
    Base(Rc<Csr>),
}

/// Differentiable outputs for one batch.
pub struct BatchForward {
    /// B×d graph embeddings.
    pub embeddings: Var,
    pub attr_loss: Var,
    pub link_loss: Var,
}

/// Embeds a batch and computes its reconstruction terms.
pub fn forward_batch(
    tape: &mut Tape,
    task: &Task<'_>,
    prep: &Prepared,
    enc: &BoundEncoder,
    gen: &BoundGenerator,
    ids: &[usize],
    q: usize,
    rng: &mut impl Rng,
) -> Result<BatchForward> {
    if ids.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    match (task, prep) {
        (Task::Graph(d), Prepared::Graphs(props)) => {
            let mut rows = Vec::with_capacity(ids.len());
            let mut props_used = Vec::with_capacity(ids.len());
            let mut samples = Vec::with_capacity(ids.len());
            for &i in ids {
                let g = &d.graphs[i];
                let prop = Propagation::Fixed(Rc::clone(&props[i]));
                let x = tape.constant(g.features().clone());
                rows.push(enc.graph_embed(tape, &prop, x)?);
                samples.push(sample_links(g, 0..g.n(), q, rng));
                props_used.push(prop);
            }
            let embeddings = tape.concat_rows(&rows)?;
            let batch: Vec<(&Graph, &Propagation, &LinkSample)> = ids
                .iter()
                .zip(&props_used)
                .zip(&samples)
                .map(|((&i, p), s)| (&d.graphs[i], p, s))
                .collect();
            let (attr_loss, link_loss) = recon_losses(tape, enc, gen, &batch)?;
            Ok(BatchForward {
                embeddings,
                attr_loss,
                link_loss,
            })
        }
        (Task::Node(d), Prepared::Base(op)) => {
            let prop = Propagation::Fixed(Rc::clone(op));
            let x = tape.constant(d.base.features().clone());
            let h = enc.encode_nodes(tape, &prop, x)?;
            let rows = Rc::new(ids.to_vec());
            let embeddings = tape.select_rows(h, Rc::clone(&rows))?;
            // Reconstruction of the batch nodes' attributes and incident links,
            // with negatives from the whole base graph.
            let x_hat = gen.decode(tape, h)?;
            let x_hat_b = tape.select_rows(x_hat, Rc::clone(&rows))?;
            let x_b = tape.select_rows(x, rows)?;
            let scale = 1.0 / ids.len() as f64;
            let attr = attr_error(tape, x_hat_b, x_b)?;
            let sample = sample_links(&d.base, ids.iter().copied(), q, rng);
            let link = link_error(tape, gen, x_hat, &sample)?;
            Ok(BatchForward {
                embeddings,
                attr_loss: tape.scale(attr, scale),
                link_loss: tape.scale(link, scale),
            })
        }
        _ => Err(Error::Usage("prepared operators do not match the task".into())),
    }
}

/// Graph embeddings of the listed instances at the model's current parameters.
pub fn instance_embeddings(model: &Model, task: &Task<'_>, ids: &[usize]) -> Result<Vec<Vec<f64>>> {
    match task {
        Task::Graph(d) => ids
            .iter()
            .map(|&i| model.encoder.graph_embedding(&model.store, &d.graphs[i]))
            .collect(),
        Task::Node(d) => {
            let h = model.encoder.node_embeddings(&model.store, &d.base)?;
            Ok(ids.iter().map(|&i| h.row(i).to_vec()).collect())
        }
    }
}

/// Embeddings of every instance of `D`.
pub fn all_embeddings(model: &Model, task: &Task<'_>) -> Result<Vec<Vec<f64>>> {
    let ids: Vec<usize> = (0..task.len()).collect();
    instance_embeddings(model, task, &ids)
}

/// Prototype-based predictions for the listed instances.
pub fn predict_instances(model: &Model, task: &Task<'_>, ids: &[usize]) -> Result<Vec<Prediction>> {
    let protos = model.prototype_embeddings()?;
    instance_embeddings(model, task, ids)?
        .iter()
        .map(|h| model.predict_embedding(h, &protos))
        .collect()
}

/// Fraction of `ids` whose predicted class equals the label.
pub fn accuracy_of(model: &Model, task: &Task<'_>, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Config("accuracy of an empty split".into()));
    }
    let labels = task.labels(ids)?;
    let preds = predict_instances(model, task, ids)?;
    let correct = preds.iter().zip(&labels).filter(|(p, &y)| p.class() == y).count();
    Ok(correct as f64 / ids.len() as f64)
}
