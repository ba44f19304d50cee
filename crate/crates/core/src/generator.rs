//! Prototype generator: attribute decoder, link predictor, reconstruction
//! losses and thresholded prototype graphs.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{BoundEncoder, Propagation};
use crate::error::{Error, Result};
use crate::graph::{negative_sample, Graph};
use crate::numerics::{Matrix, ParamId, ParamStore, Tape, Var};

/// Guards the logarithms of link probabilities.
const LOG_EPS: f64 = 1e-12;

/// Parameter handles of the decoder MLP and the link predictor.
///
/// The link weight `W` acting on `[x_i, x_j]` is stored as its two halves
/// `w_src` and `w_dst` (each F×1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub dec1: ParamId,
    pub bias1: ParamId,
    pub dec2: ParamId,
    pub bias2: ParamId,
    pub w_src: ParamId,
    pub w_dst: ParamId,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGenerator {
    pub dec1: Var,
    pub bias1: Var,
    pub dec2: Var,
    pub bias2: Var,
    pub w_src: Var,
    pub w_dst: Var,
}

impl Generator {
    pub fn new(
        store: &mut ParamStore,
        embed_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            dec1: store.add_glorot("generator.dec1", embed_dim, hidden_dim, rng),
            bias1: store.add("generator.bias1", Matrix::zeros(1, hidden_dim)),
            dec2: store.add_glorot("generator.dec2", hidden_dim, feature_dim, rng),
            bias2: store.add("generator.bias2", Matrix::zeros(1, feature_dim)),
            w_src: store.add_glorot("generator.link_src", feature_dim, 1, rng),
            w_dst: store.add_glorot("generator.link_dst", feature_dim, 1, rng),
            embed_dim,
            hidden_dim,
            feature_dim,
        }
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundGenerator {
        BoundGenerator {
            dec1: tape.param(store, self.dec1),
            bias1: tape.param(store, self.bias1),
            dec2: tape.param(store, self.dec2),
            bias2: tape.param(store, self.bias2),
            w_src: tape.param(store, self.w_src),
            w_dst: tape.param(store, self.w_dst),
        }
    }

    pub fn bind_constant(&self, tape: &mut Tape, store: &ParamStore) -> BoundGenerator {
        let mut c = |id| tape.constant(store.value(id).clone());
        BoundGenerator {
            dec1: c(self.dec1),
            bias1: c(self.bias1),
            dec2: c(self.dec2),
            bias2: c(self.bias2),
            w_src: c(self.w_src),
            w_dst: c(self.w_dst),
        }
    }

    /// Decoded attributes of an embedding matrix, outside any training tape.
    pub fn decode_attributes(&self, store: &ParamStore, h: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let b = self.bind_constant(&mut tape, store);
        let hv = tape.constant(h.clone());
        let x = b.decode(&mut tape, hv)?;
        Ok(tape.value(x).clone())
    }

    /// Full symmetrized link-probability matrix for attributes `x`.
    pub fn predict_links(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let b = self.bind_constant(&mut tape, store);
        let xv = tape.constant(x.clone());
        let s = b.link_matrix(&mut tape, xv)?;
        Ok(tape.value(s).clone())
    }
}

/// A prototype graph materialized from an embedding matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedPrototype {
    pub attributes: Matrix,
    /// Symmetric weighted adjacency; zero on the diagonal and wherever the
    /// threshold rule dropped the pair.
    pub adjacency: Matrix,
    /// Row-major Ñ×Ñ flags of the kept pairs.
    pub kept_mask: Vec<bool>,
}

impl GeneratedPrototype {
    pub fn n(&self) -> usize {
        self.attributes.rows()
    }

    pub fn kept(&self, i: usize, j: usize) -> bool {
        self.kept_mask[i * self.n() + j]
    }

    /// Kept edges as an undirected weighted graph.
    pub fn to_graph(&self) -> Graph {
        let n = self.n();
        let mut edges = Vec::new();
        let mut weights = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = self.adjacency.get(i, j);
                if self.kept(i, j) && w > 0.0 {
                    edges.push((i, j));
                    weights.push(w.min(1.0));
                }
            }
        }
        Graph::with_weights(n, edges, Some(weights), self.attributes.clone())
            .expect("kept weights lie in (0, 1]")
    }
}

/// Threshold rule: init edges survive above `t_low`, other pairs above `t_high`.
pub fn threshold_mask(links: &Matrix, init: &Graph, t_low: f64, t_high: f64) -> Result<Vec<bool>> {
    let n = links.rows();
    if init.n() != n {
        return Err(Error::Usage(format!(
            "prototype has {n} nodes but its init graph has {}",
            init.n()
        )));
    }
    if !(0.0 <= t_low && t_low <= t_high && t_high <= 1.0) {
        return Err(Error::Config(format!(
            "thresholds must satisfy 0 <= T_l <= T_h <= 1, got T_l = {t_low}, T_h = {t_high}"
        )));
    }
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let t = if init.has_edge(i, j) { t_low } else { t_high };
            mask[i * n + j] = links.get(i, j) > t;
        }
    }
    Ok(mask)
}

/// Generated prototype on a tape: attributes, weighted adjacency and mask.
pub struct PrototypeVars {
    pub attributes: Var,
    pub adjacency: Var,
    pub kept_mask: Vec<bool>,
}

impl BoundGenerator {
    /// `relu(H·W1 + b1)·W2 + b2`.
    pub fn decode(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let z = tape.matmul(h, self.dec1)?;
        let z = tape.add_row_broadcast(z, self.bias1)?;
        let a = tape.relu(z);
        let out = tape.matmul(a, self.dec2)?;
        tape.add_row_broadcast(out, self.bias2)
    }

    /// Per-node halves of the link logit: `x·w_src` and `x·w_dst`.
    pub fn link_halves(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        Ok((tape.matmul(x, self.w_src)?, tape.matmul(x, self.w_dst)?))
    }

    /// Symmetrized `(σ(W·[x_i, x_j]) + σ(W·[x_j, x_i])) / 2` for every pair.
    pub fn link_matrix(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (src, dst) = self.link_halves(tape, x)?;
        let logits = tape.outer_sum(src, dst)?;
        let s = tape.sigmoid(logits);
        let st = tape.transpose(s);
        let sum = tape.add(s, st)?;
        Ok(tape.scale(sum, 0.5))
    }

    /// Decodes `h` and applies the threshold rule against `init`.
    ///
    /// The mask is a constant of the pass; gradients flow through the kept
    /// link weights and the attributes.
    pub fn generate(&self, tape: &mut Tape, h: Var, init: &Graph, t_low: f64, t_high: f64) -> Result<PrototypeVars> {
        let attributes = self.decode(tape, h)?;
        let links = self.link_matrix(tape, attributes)?;
        let kept_mask = threshold_mask(tape.value(links), init, t_low, t_high)?;
        let n = init.n();
        let mask = tape.constant(Matrix::from_vec(
            n,
            n,
            kept_mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )?);
        let adjacency = tape.mul(links, mask)?;
        Ok(PrototypeVars {
            attributes,
            adjacency,
            kept_mask,
        })
    }
}

/// Positive and negative node pairs of one graph for the adjacency loss.
#[derive(Clone, Debug, Default)]
pub struct LinkSample {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// For each node in `sources` and each neighbor, one positive pair plus up to
/// `q` negatives drawn from the node's non-neighbors.
pub fn sample_links(g: &Graph, sources: impl IntoIterator<Item = usize>, q: usize, rng: &mut impl Rng) -> LinkSample {
    let mut s = LinkSample::default();
    for j in sources {
        for &k in g.neighbors(j) {
            s.positives.push((j, k));
            for n in negative_sample(g, j, q, rng) {
                s.negatives.push((j, n));
            }
        }
    }
    s
}

/// `Σ ‖X̂ − X‖²_F` for one graph (the caller averages over the batch).
pub fn attr_error(tape: &mut Tape, x_hat: Var, x: Var) -> Result<Var> {
    let d = tape.sub(x_hat, x)?;
    Ok(tape.frobenius_sq(d))
}

/// `−Σ ln S⁺ − Σ ln(1 − S⁻)` over sampled pairs for one graph.
pub fn link_error(tape: &mut Tape, gen: &BoundGenerator, x_hat: Var, sample: &LinkSample) -> Result<Var> {
    let (src, dst) = gen.link_halves(tape, x_hat)?;
    let mut total = tape.constant(Matrix::scalar(0.0));
    if !sample.positives.is_empty() {
        let p = tape.pair_links(src, dst, Rc::new(sample.positives.clone()))?;
        let p = tape.add_scalar(p, LOG_EPS);
        let lp = tape.ln(p);
        let s = tape.sum(lp);
        total = tape.sub(total, s)?;
    }
    if !sample.negatives.is_empty() {
        let n = tape.pair_links(src, dst, Rc::new(sample.negatives.clone()))?;
        let n = tape.neg(n);
        let n = tape.add_scalar(n, 1.0 + LOG_EPS);
        let ln = tape.ln(n);
        let s = tape.sum(ln);
        total = tape.sub(total, s)?;
    }
    Ok(total)
}

/// Reconstruction terms `(L_rec^X, L_rec^A)` averaged over a batch of graphs.
pub fn recon_losses(
    tape: &mut Tape,
    enc: &BoundEncoder,
    gen: &BoundGenerator,
    batch: &[(&Graph, &Propagation, &LinkSample)],
) -> Result<(Var, Var)> {
    if batch.is_empty() {
        return Err(Error::Usage("reconstruction loss of an empty batch".into()));
    }
    let mut attr = Vec::with_capacity(batch.len());
    let mut link = Vec::with_capacity(batch.len());
    for &(g, prop, sample) in batch {
        let x = tape.constant(g.features().clone());
        let h = enc.encode_nodes(tape, prop, x)?;
        let x_hat = gen.decode(tape, h)?;
        attr.push(attr_error(tape, x_hat, x)?);
        link.push(link_error(tape, gen, x_hat, sample)?);
    }
    let scale = 1.0 / batch.len() as f64;
    let a = tape.concat_rows(&attr)?;
    let a = tape.sum(a);
    let l = tape.concat_rows(&link)?;
    let l = tape.sum(l);
    Ok((tape.scale(a, scale), tape.scale(l, scale)))
}

/// Value-only prototype generation.
pub fn generate_prototype(
    gen: &Generator,
    store: &ParamStore,
    h: &Matrix,
    init: &Graph,
    t_low: f64,
    t_high: f64,
) -> Result<GeneratedPrototype> {
    if h.cols() != gen.embed_dim {
        return Err(Error::Shape {
            op: "generate_prototype",
            left: h.shape(),
            right: (gen.embed_dim, gen.hidden_dim),
        });
    }
    let mut tape = Tape::new();
    let b = gen.bind_constant(&mut tape, store);
    let hv = tape.constant(h.clone());
    let p = b.generate(&mut tape, hv, init, t_low, t_high)?;
    Ok(GeneratedPrototype {
        attributes: tape.value(p.attributes).clone(),
        adjacency: tape.value(p.adjacency).clone(),
        kept_mask: p.kept_mask,
    })
}
