//! The trained artifact: parameters, prototypes and inference helpers.

use serde::{Deserialize, Serialize};

use crate::classifier::{predict, Prediction, ProtoEmbedding};
use crate::encoder::{normalize_dense, BoundEncoder, Encoder, Propagation};
use crate::error::{Error, Result};
use crate::generator::{generate_prototype, BoundGenerator, GeneratedPrototype, Generator};
use crate::numerics::{Matrix, ParamStore, Tape, Var};
use crate::prototypes::PrototypeSet;

/// Settings that shape prototype generation and prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub t_low: f64,
    pub t_high: f64,
    pub tau: f64,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub generator: Generator,
    pub prototypes: Option<PrototypeSet>,
    /// Prototype graphs fixed at initialization (frozen-prototype ablation).
    pub frozen_graphs: Option<Vec<GeneratedPrototype>>,
    pub predict: PredictConfig,
}

/// A prototype graph on a tape, ready for encoding.
pub struct ProtoOnTape {
    pub attributes: Var,
    pub adjacency: Var,
}

impl Model {
    pub fn num_classes(&self) -> usize {
        self.encoder.num_classes
    }

    pub fn prototypes(&self) -> Result<&PrototypeSet> {
        self.prototypes
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no prototypes yet".into()))
    }

    /// Generated prototype graphs at the current parameters.
    pub fn prototype_graphs(&self) -> Result<Vec<GeneratedPrototype>> {
        if let Some(frozen) = &self.frozen_graphs {
            return Ok(frozen.clone());
        }
        let ps = self.prototypes()?;
        ps.entries
            .iter()
            .map(|p| {
                generate_prototype(
                    &self.generator,
                    &self.store,
                    self.store.value(p.embedding),
                    &p.init_graph.0,
                    self.predict.t_low,
                    self.predict.t_high,
                )
            })
            .collect()
    }

    /// Graph embedding of a generated prototype under the current encoder.
    pub fn embed_generated(&self, p: &GeneratedPrototype) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let enc = self.encoder.bind_constant(&mut tape, &self.store);
        let x = tape.constant(p.attributes.clone());
        let a = tape.constant(p.adjacency.clone());
        let h = embed_prototype(&mut tape, &enc, &ProtoOnTape { attributes: x, adjacency: a })?;
        Ok(tape.value(h).data().to_vec())
    }

    pub fn prototype_embeddings(&self) -> Result<Vec<ProtoEmbedding>> {
        let ps = self.prototypes()?;
        let graphs = self.prototype_graphs()?;
        ps.entries
            .iter()
            .zip(&graphs)
            .map(|(p, g)| {
                Ok(ProtoEmbedding {
                    class: p.class,
                    index: p.index,
                    embedding: self.embed_generated(g)?,
                })
            })
            .collect()
    }

    pub fn predict_embedding(&self, h: &[f64], protos: &[ProtoEmbedding]) -> Result<Prediction> {
        predict(h, protos, self.num_classes(), self.predict.m, self.predict.tau)
    }

    /// Prototype graphs on a training tape; frozen graphs enter as constants.
    pub fn prototypes_on_tape(
        &self,
        tape: &mut Tape,
        gen: &BoundGenerator,
        embeddings: &[Var],
    ) -> Result<Vec<ProtoOnTape>> {
        if let Some(frozen) = &self.frozen_graphs {
            return Ok(frozen
                .iter()
                .map(|g| ProtoOnTape {
                    attributes: tape.constant(g.attributes.clone()),
                    adjacency: tape.constant(g.adjacency.clone()),
                })
                .collect());
        }
        let ps = self.prototypes()?;
        ps.entries
            .iter()
            .zip(embeddings)
            .map(|(p, &h)| {
                let v = gen.generate(tape, h, &p.init_graph.0, self.predict.t_low, self.predict.t_high)?;
                Ok(ProtoOnTape {
                    attributes: v.attributes,
                    adjacency: v.adjacency,
                })
            })
            .collect()
    }
}

/// `h̃^G` of a prototype graph: the encoder run on its weighted adjacency.
pub fn embed_prototype(tape: &mut Tape, enc: &BoundEncoder, p: &ProtoOnTape) -> Result<Var> {
    let norm = normalize_dense(tape, p.adjacency)?;
    enc.graph_embed(tape, &Propagation::Dense(norm), p.attributes)
}

/// Stacks prototype graph embeddings into a P×d matrix.
pub fn embed_prototypes(tape: &mut Tape, enc: &BoundEncoder, protos: &[ProtoOnTape]) -> Result<Var> {
    let rows = protos
        .iter()
        .map(|p| embed_prototype(tape, enc, p))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

impl GeneratedPrototype {
    /// Adjacency binarized at weight > 0.
    pub fn binary_adjacency(&self) -> Matrix {
        self.adjacency.map(|w| if w > 0.0 { 1.0 } else { 0.0 })
    }
}
