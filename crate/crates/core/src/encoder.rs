//! Two-layer GCN encoder with a linear classification head.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::{softmax_rows, Csr, Matrix, ParamId, ParamStore, Tape, Var};

/// Pools node embeddings into one graph embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    Mean,
    /// Embedding of node 0. Local graphs place their center there, so this
    /// is the readout used for node classification.
    Center,
}

/// Normalized propagation operator for one forward pass.
#[derive(Clone, Debug)]
pub enum Propagation {
    /// Constant operator of a dataset graph.
    Fixed(Rc<Csr>),
    /// Differentiable dense operator (prototype graphs).
    Dense(Var),
}

impl Propagation {
    pub fn of(g: &Graph) -> Self {
        Propagation::Fixed(Rc::new(g.propagation()))
    }
}

/// Parameter handles of the encoder and its pretraining head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub wc: ParamId,
    pub readout: Readout,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

/// Encoder weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub wc: Var,
    pub readout: Readout,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        feature_dim: usize,
        hidden_dim: usize,
        embed_dim: usize,
        num_classes: usize,
        readout: Readout,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w1: store.add_glorot("encoder.w1", feature_dim, hidden_dim, rng),
            b1: store.add("encoder.b1", Matrix::zeros(1, hidden_dim)),
            w2: store.add_glorot("encoder.w2", hidden_dim, embed_dim, rng),
            b2: store.add("encoder.b2", Matrix::zeros(1, embed_dim)),
            wc: store.add_glorot("encoder.head", embed_dim, num_classes, rng),
            readout,
            feature_dim,
            hidden_dim,
            embed_dim,
            num_classes,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundEncoder {
        BoundEncoder {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
            wc: tape.param(store, self.wc),
            readout: self.readout,
        }
    }

    pub fn check_features(&self, g: &Graph) -> Result<()> {
        if g.feature_dim() != self.feature_dim {
            return Err(Error::Shape {
                op: "encode_nodes",
                left: (g.n(), g.feature_dim()),
                right: (self.feature_dim, self.hidden_dim),
            });
        }
        Ok(())
    }

    /// Node embeddings of a dataset graph, without recording gradients.
    pub fn node_embeddings(&self, store: &ParamStore, g: &Graph) -> Result<Matrix> {
        self.check_features(g)?;
        let mut tape = Tape::new();
        let b = self.bind_constant(&mut tape, store);
        let x = tape.constant(g.features().clone());
        let h = b.encode_nodes(&mut tape, &Propagation::of(g), x)?;
        Ok(tape.value(h).clone())
    }

    /// Graph embedding `h^G` of a dataset graph.
    pub fn graph_embedding(&self, store: &ParamStore, g: &Graph) -> Result<Vec<f64>> {
        let h = self.node_embeddings(store, g)?;
        Ok(match self.readout {
            Readout::Mean => h.mean_rows(),
            Readout::Center => h.row(0).to_vec(),
        })
    }

    /// Class distribution `softmax(h^G · W_C)`.
    pub fn classify(&self, store: &ParamStore, g: &Graph) -> Result<Vec<f64>> {
        let h = self.graph_embedding(store, g)?;
        self.classify_embedding(store, &h)
    }

    pub fn classify_embedding(&self, store: &ParamStore, h: &[f64]) -> Result<Vec<f64>> {
        let row = Matrix::from_vec(1, h.len(), h.to_vec())?;
        let logits = row.matmul(store.value(self.wc))?;
        Ok(softmax_rows(&logits, 1.0, None).into_data())
    }

    pub fn bind_constant(&self, tape: &mut Tape, store: &ParamStore) -> BoundEncoder {
        BoundEncoder {
            w1: tape.constant(store.value(self.w1).clone()),
            b1: tape.constant(store.value(self.b1).clone()),
            w2: tape.constant(store.value(self.w2).clone()),
            b2: tape.constant(store.value(self.b2).clone()),
            wc: tape.constant(store.value(self.wc).clone()),
            readout: self.readout,
        }
    }
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}` of a differentiable weighted adjacency.
pub fn normalize_dense(tape: &mut Tape, adjacency: Var) -> Result<Var> {
    let n = tape.shape(adjacency).0;
    let eye = tape.constant(Matrix::identity(n));
    let a = tape.add(adjacency, eye)?;
    let deg = tape.row_sums(a);
    let inv_sqrt = tape.powf(deg, -0.5);
    let inv_sqrt_row = tape.transpose(inv_sqrt);
    let left = tape.mul_col_broadcast(a, inv_sqrt)?;
    tape.mul_row_broadcast(left, inv_sqrt_row)
}

impl BoundEncoder {
    /// `Â · relu(Â · X · W1 + b1) · W2 + b2`.
    pub fn encode_nodes(&self, tape: &mut Tape, prop: &Propagation, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w1)?;
        let z = propagate(tape, prop, xw)?;
        let z = tape.add_row_broadcast(z, self.b1)?;
        let h1 = tape.relu(z);
        let hw = tape.matmul(h1, self.w2)?;
        let h = propagate(tape, prop, hw)?;
        tape.add_row_broadcast(h, self.b2)
    }

    pub fn readout(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        match self.readout {
            Readout::Mean => Ok(tape.mean_rows(h)),
            Readout::Center => tape.select_rows(h, Rc::new(vec![0])),
        }
    }

    pub fn graph_embed(&self, tape: &mut Tape, prop: &Propagation, x: Var) -> Result<Var> {
        let h = self.encode_nodes(tape, prop, x)?;
        self.readout(tape, h)
    }

    /// Unnormalized class scores `h^G · W_C` for a stack of graph embeddings.
    pub fn logits(&self, tape: &mut Tape, hg: Var) -> Result<Var> {
        tape.matmul(hg, self.wc)
    }
}

fn propagate(tape: &mut Tape, prop: &Propagation, x: Var) -> Result<Var> {
    match prop {
        Propagation::Fixed(op) => tape.spmm(Rc::clone(op), x),
        Propagation::Dense(a) => tape.matmul(*a, x),
    }
}

/// Mean cross-entropy of `logits` (B×C) against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let b = tape.shape(logits).0;
    if labels.len() != b {
        return Err(Error::Usage(format!("{} labels for {b} logit rows", labels.len())));
    }
    let lse = tape.logsumexp_rows(logits, None)?;
    let picked = tape.gather(logits, Rc::new(labels.iter().copied().enumerate().collect()))?;
    let diff = tape.sub(lse, picked)?;
    Ok(tape.mean(diff))
}
