//! Similarity-based prediction against prototype graphs.

use std::cmp::Ordering;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Tape, Var};

/// `s(a, b) = −‖a − b‖²`.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "similarity",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    Ok(-sq_dist(a, b))
}

/// A prototype's graph embedding together with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoEmbedding {
    pub class: usize,
    pub index: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub class: usize,
    pub index: usize,
    pub similarity: f64,
}

/// All prototypes by descending similarity; ties go to the lower `(class, index)`.
pub fn rank_prototypes(h: &[f64], protos: &[ProtoEmbedding]) -> Result<Vec<Ranked>> {
    let mut ranked = protos
        .iter()
        .map(|p| {
            Ok(Ranked {
                class: p.class,
                index: p.index,
                similarity: similarity(h, &p.embedding)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then((a.class, a.index).cmp(&(b.class, b.index)))
    });
    Ok(ranked)
}

/// `softmax(sims / τ)`.
pub fn attention_weights(sims: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub class: usize,
    pub index: usize,
    pub similarity: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_distribution: Vec<f64>,
    /// The `M` most similar prototypes, most similar first.
    pub nearest: Vec<Neighbor>,
    /// `(class, index)` of the most similar prototype of the predicted class.
    pub explanation: (usize, usize),
}

impl Prediction {
    /// Argmax of the distribution; ties go to the lower class id.
    pub fn class(&self) -> usize {
        argmax(&self.class_distribution)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weighted vote of the `m` nearest prototypes.
pub fn predict(h: &[f64], protos: &[ProtoEmbedding], num_classes: usize, m: usize, tau: f64) -> Result<Prediction> {
    if m == 0 || m > protos.len() {
        return Err(Error::Config(format!(
            "M must lie in 1..={}, got {m}",
            protos.len()
        )));
    }
    let ranked = rank_prototypes(h, protos)?;
    let top = &ranked[..m];
    let sims: Vec<f64> = top.iter().map(|r| r.similarity).collect();
    let weights = attention_weights(&sims, tau)?;
    let mut dist = vec![0.0; num_classes];
    for (r, w) in top.iter().zip(&weights) {
        if r.class >= num_classes {
            return Err(Error::Index {
                index: r.class,
                len: num_classes,
            });
        }
        dist[r.class] += w;
    }
    let predicted = argmax(&dist);
    // Ranking is descending, so the first prototype of the class is the best.
    let best = ranked
        .iter()
        .find(|r| r.class == predicted)
        .expect("predicted class has a prototype among the top M");
    Ok(Prediction {
        class_distribution: dist,
        nearest: top
            .iter()
            .zip(weights)
            .map(|(r, w)| Neighbor {
                class: r.class,
                index: r.index,
                similarity: r.similarity,
                weight: w,
            })
            .collect(),
        explanation: (best.class, best.index),
    })
}

/// Contrastive loss over all prototypes.
///
/// `queries` is B×d, `protos` is P×d with classes `proto_classes`. Returns the
/// batch mean of `lse_all(s/τ) − lse_same(s/τ)` where `s = −‖h − h̃‖²`.
pub fn classification_loss(
    tape: &mut Tape,
    queries: Var,
    protos: Var,
    labels: &[usize],
    proto_classes: &[usize],
    tau: f64,
) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (b, _) = tape.shape(queries);
    let (p, _) = tape.shape(protos);
    if labels.len() != b || proto_classes.len() != p {
        return Err(Error::Usage(format!(
            "{} labels for {b} queries, {} classes for {p} prototypes",
            labels.len(),
            proto_classes.len()
        )));
    }
    let mut mask = Vec::with_capacity(b * p);
    for &y in labels {
        if !proto_classes.contains(&y) {
            return Err(Error::Usage(format!("label {y} has no prototypes")));
        }
        mask.extend(proto_classes.iter().map(|&c| c == y));
    }
    let d = tape.sq_dist(queries, protos)?;
    let logits = tape.scale(d, -1.0 / tau);
    let all = tape.logsumexp_rows(logits, None)?;
    let same = tape.logsumexp_rows(logits, Some(Rc::new(mask)))?;
    let diff = tape.sub(all, same)?;
    Ok(tape.mean(diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, ParamStore};

    fn proto(class: usize, index: usize, e: &[f64]) -> ProtoEmbedding {
        ProtoEmbedding {
            class,
            index,
            embedding: e.to_vec(),
        }
    }

    #[test]
    fn similarity_values() {
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), -2.0);
        assert_eq!(similarity(&[3.0], &[3.0]).unwrap(), 0.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ranking_and_ties() {
        let ps = vec![proto(1, 0, &[1.0]), proto(0, 1, &[-1.0]), proto(0, 0, &[0.0])];
        let r = rank_prototypes(&[0.0], &ps).unwrap();
        assert_eq!((r[0].class, r[0].index), (0, 0));
        assert_eq!((r[1].class, r[1].index), (0, 1));
        assert_eq!((r[2].class, r[2].index), (1, 0));
        let single = rank_prototypes(&[5.0], &ps[..1]).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn attention_cases() {
        let w = attention_weights(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(attention_weights(&[-4.0], 1.0).unwrap(), vec![1.0]);
        let u = attention_weights(&[1.0, 1.0, 1.0, 1.0], 0.3).unwrap();
        assert!(u.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(attention_weights(&[1.0], 0.0).is_err());
    }

    #[test]
    fn prediction_votes() {
        // Similarities 0 and −ln 2 give weights (2/3, 1/3).
        let q = [0.0];
        let ps = vec![proto(0, 0, &[0.0]), proto(1, 0, &[2f64.ln().sqrt()])];
        let p = predict(&q, &ps, 2, 2, 1.0).unwrap();
        assert!((p.class_distribution[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.class_distribution[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.explanation, (0, 0));
        let same = vec![proto(1, 0, &[0.0]), proto(1, 1, &[0.1]), proto(0, 0, &[9.0])];
        let p = predict(&q, &same, 2, 2, 1.0).unwrap();
        assert_eq!(p.class_distribution, vec![0.0, 1.0]);
        let even = vec![proto(0, 0, &[1.0]), proto(1, 0, &[-1.0])];
        let p = predict(&q, &even, 2, 2, 1.0).unwrap();
        assert_eq!(p.class_distribution, vec![0.5, 0.5]);
        assert!(predict(&q, &even, 2, 3, 1.0).is_err());
    }

    fn loss_of(q: Matrix, p: Matrix, labels: &[usize], classes: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let qv = tape.constant(q);
        let pv = tape.constant(p);
        let l = classification_loss(&mut tape, qv, pv, labels, classes, 1.0).unwrap();
        tape.item(l)
    }

    #[test]
    fn loss_cases() {
        let q = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let p = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((loss_of(q.clone(), p.clone(), &[0], &[0, 1]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(loss_of(q.clone(), p.clone(), &[0], &[0, 0]), 0.0);
        let far = Matrix::from_vec(2, 2, vec![0.0, 0.0, 30.0, 0.0]).unwrap();
        assert!(loss_of(q, far, &[0], &[0, 1]) < 1e-100);
    }

    #[test]
    fn loss_reaches_prototypes() {
        let mut store = ParamStore::new();
        let id = store.add("protos", Matrix::from_vec(2, 2, vec![0.3, -0.2, 1.0, 0.5]).unwrap());
        let mut tape = Tape::new();
        let q = tape.constant(Matrix::from_vec(1, 2, vec![0.1, 0.1]).unwrap());
        let p = tape.param(&store, id);
        let l = classification_loss(&mut tape, q, p, &[1], &[0, 1], 1.0).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert!(store.grad(id).data().iter().any(|&g| g != 0.0));
    }
}
