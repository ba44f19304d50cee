//! Evaluation: accuracy, prototype confidence, silhouette analysis and
//! distance to ground-truth prototypes.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratedPrototype;
use crate::graph::Graph;
use crate::model::Model;
use crate::numerics::{sq_dist, AdamState, Matrix, Tape};
use crate::task::{accuracy_of, all_embeddings, forward_batch, Mode, Split, Task};
use crate::trainer::{fit, new_model, TrainConfig};

/// Fraction of `split` classified correctly by the prototype classifier.
pub fn accuracy(model: &Model, task: &Task<'_>, split: Split) -> Result<f64> {
    accuracy_of(model, task, task.split(split))
}

/// Probability the reference classifier assigns to each prototype's own class.
pub fn confidence_scores(reference: &Model, model: &Model) -> Result<Vec<f64>> {
    let ps = model.prototypes()?;
    let graphs = model.prototype_graphs()?;
    ps.entries
        .iter()
        .zip(&graphs)
        .map(|(p, g)| {
            let h = reference.embed_generated(g)?;
            let probs = reference.encoder.classify_embedding(&reference.store, &h)?;
            Ok(probs[p.class])
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn confidence_score(reference: &Model, model: &Model) -> Result<(f64, f64)> {
    Ok(mean_std(&confidence_scores(reference, model)?))
}

/// Mean silhouette coefficient with Euclidean distances.
///
/// Members of singleton clusters score 0. Cluster ids need not be contiguous.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    if points.len() != assignments.len() {
        return Err(Error::Usage(format!(
            "{} points but {} assignments",
            points.len(),
            assignments.len()
        )));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let clusters = sizes.iter().filter(|&&s| s > 0).count();
    if clusters < 2 {
        return Err(Error::Metric(format!(
            "silhouette needs at least 2 non-empty clusters, got {clusters}"
        )));
    }
    let n = points.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = assignments[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[assignments[j]] += sq_dist(&points[i], &points[j]).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Index of the nearest of `centers` for each point (lowest index on ties).
pub fn nearest_assignments(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

/// Encoder and generator trained on reconstruction alone, without labels.
///
/// Its embedding space is the common ruler for silhouette and ground-truth
/// distances, independent of the model being evaluated.
pub fn train_autoencoder(cfg: &TrainConfig, task: &Task<'_>, epochs: usize) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a07e);
    let mut model = new_model(cfg, task, &mut rng);
    let prep = task.prepare();
    let mut adam = AdamState::new(cfg.lr);
    let mut ids: Vec<usize> = (0..task.len()).collect();
    for epoch in 0..epochs {
        let batches: Vec<Vec<usize>> = match task.mode() {
            Mode::Node => vec![ids.clone()],
            Mode::Graph => {
                ids.shuffle(&mut rng);
                ids.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
            }
        };
        for batch in &batches {
            let mut tape = Tape::new();
            let be = model.encoder.bind(&mut tape, &model.store);
            let bg = model.generator.bind(&mut tape, &model.store);
            let fw = forward_batch(&mut tape, task, &prep, &be, &bg, batch, cfg.q, &mut rng)?;
            let loss = tape.add(fw.attr_loss, fw.link_loss)?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    term: "L_rec",
                    value,
                });
            }
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store);
        }
    }
    Ok(model)
}

/// Graph embedding of a generated prototype in the autoencoder's space.
pub fn embed_in(autoencoder: &Model, g: &GeneratedPrototype) -> Result<Vec<f64>> {
    autoencoder.embed_generated(g)
}

/// Mean over ground-truth graphs of the distance to the nearest learned
/// prototype of the same class, in the autoencoder's embedding space.
pub fn gt_distance(
    autoencoder: &Model,
    learned: &[(usize, GeneratedPrototype)],
    ground_truth: Option<&Vec<Vec<Graph>>>,
) -> Result<f64> {
    let gt = ground_truth.ok_or_else(|| Error::Metric("dataset has no ground-truth prototypes".into()))?;
    let learned = learned
        .iter()
        .map(|(c, g)| Ok((*c, embed_in(autoencoder, g)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut dists = Vec::new();
    for (class, graphs) in gt.iter().enumerate() {
        for g in graphs {
            let h = autoencoder.encoder.graph_embedding(&autoencoder.store, g)?;
            let nearest = learned
                .iter()
                .filter(|(c, _)| *c == class)
                .map(|(_, p)| sq_dist(&h, p).sqrt())
                .fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                dists.push(nearest);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::Metric("no ground-truth graph has a learned prototype of its class".into()));
    }
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// Class-tagged prototype graphs of a model.
pub fn labeled_prototypes(model: &Model) -> Result<Vec<(usize, GeneratedPrototype)>> {
    let ps = model.prototypes()?;
    Ok(ps.entries.iter().map(|p| p.class).zip(model.prototype_graphs()?).collect())
}

/// The model with its prototype embeddings replaced by Gaussian noise of the
/// same overall scale as the initial embeddings.
pub fn randomize_prototypes(model: &Model, rng: &mut impl Rng) -> Result<Model> {
    let mut out = model.clone();
    out.frozen_graphs = None;
    let ps = out.prototypes()?.clone();
    let (sum, count) = ps.entries.iter().fold((0.0, 0usize), |(s, c), p| {
        (s + p.init_embedding.frobenius_sq(), c + p.init_embedding.len())
    });
    let sd = (sum / count.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, sd.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
    for p in &ps.entries {
        let (r, c) = p.init_embedding.shape();
        *out.store.value_mut(p.embedding) = Matrix::from_fn(r, c, |_, _| normal.sample(rng));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub accuracy: f64,
    /// Mean and standard deviation of the prototype confidence scores.
    pub confidence: Option<(f64, f64)>,
    pub silhouette: Option<f64>,
    pub gt_distance: Option<f64>,
    /// Instances of `D` nearest to each prototype, in `(class, index)` order.
    pub cluster_sizes: Vec<usize>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.6}"))
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split: {}", self.split);
        let _ = writeln!(s, "accuracy: {:.6}", self.accuracy);
        match self.confidence {
            Some((m, sd)) => {
                let _ = writeln!(s, "confidence: {m:.6} +- {sd:.6}");
            }
            None => {
                let _ = writeln!(s, "confidence: n/a");
            }
        }
        let _ = writeln!(s, "silhouette: {}", opt(self.silhouette));
        let _ = writeln!(s, "gt_distance: {}", opt(self.gt_distance));
        let sizes: Vec<String> = self.cluster_sizes.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "cluster_sizes: {}", sizes.join(" "));
        s
    }

    pub fn csv_header() -> &'static str {
        "split,accuracy,confidence_mean,confidence_std,silhouette,gt_distance"
    }

    /// Unavailable metrics are empty fields.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{},{}",
            self.split,
            self.accuracy,
            opt_csv(self.confidence.map(|c| c.0)),
            opt_csv(self.confidence.map(|c| c.1)),
            opt_csv(self.silhouette),
            opt_csv(self.gt_distance)
        )
    }
}

/// Silhouette of `D` under nearest-prototype assignment in the autoencoder space,
/// with the cluster sizes.
pub fn prototype_silhouette(autoencoder: &Model, model: &Model, task: &Task<'_>) -> Result<(f64, Vec<usize>)> {
    let (points, assignments, sizes) = prototype_clusters(autoencoder, model, task)?;
    Ok((silhouette(&points, &assignments)?, sizes))
}

type Clusters = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>);

fn prototype_clusters(autoencoder: &Model, model: &Model, task: &Task<'_>) -> Result<Clusters> {
    let points = all_embeddings(autoencoder, task)?;
    let centers = model
        .prototype_graphs()?
        .iter()
        .map(|g| embed_in(autoencoder, g))
        .collect::<Result<Vec<_>>>()?;
    let assignments = nearest_assignments(&points, &centers);
    let mut sizes = vec![0; centers.len()];
    for &a in &assignments {
        sizes[a] += 1;
    }
    Ok((points, assignments, sizes))
}

/// Accuracy on `split` plus whichever metrics the supplied models allow:
/// confidence needs a reference classifier, silhouette and ground-truth
/// distance need an autoencoder. A silhouette over fewer than two occupied
/// clusters is reported as unavailable.
pub fn evaluate(
    model: &Model,
    task: &Task<'_>,
    split: Split,
    reference: Option<&Model>,
    autoencoder: Option<&Model>,
) -> Result<EvalReport> {
    let acc = accuracy(model, task, split)?;
    let confidence = reference.map(|r| confidence_score(r, model)).transpose()?;
    let (mut sil, mut cluster_sizes, mut gt) = (None, Vec::new(), None);
    if let Some(ae) = autoencoder {
        let (points, assignments, sizes) = prototype_clusters(ae, model, task)?;
        sil = match silhouette(&points, &assignments) {
            Ok(v) => Some(v),
            Err(Error::Metric(_)) => None,
            Err(e) => return Err(e),
        };
        cluster_sizes = sizes;
        if let Some(truth) = task.ground_truth() {
            gt = Some(gt_distance(ae, &labeled_prototypes(model)?, Some(truth))?);
        }
    }
    Ok(EvalReport {
        split: format!("{split:?}").to_lowercase(),
        accuracy: acc,
        confidence,
        silhouette: sil,
        gt_distance: gt,
        cluster_sizes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub accuracy: f64,
    /// `None` when the prototypes occupy fewer than two clusters.
    pub silhouette: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("setting,accuracy,silhouette\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{}", r.setting, r.accuracy, opt_csv(r.silhouette));
    }
    s
}

/// Trains one model per grid point; test accuracy and silhouette are measured
/// against one shared autoencoder trained under `base`.
pub fn sweep_driver(base: &TrainConfig, task: &Task<'_>, grid: &[(String, TrainConfig)]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Usage("sweep grid is empty".into()));
    }
    let autoencoder = train_autoencoder(base, task, base.pretrain_epochs)?;
    grid.iter()
        .map(|(setting, cfg)| {
            let ck = fit(cfg, *task)?;
            let model = ck.final_model();
            let silhouette = match prototype_silhouette(&autoencoder, model, task) {
                Ok((v, _)) => Some(v),
                Err(Error::Metric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(SweepRow {
                setting: setting.clone(),
                accuracy: accuracy(model, task, Split::Test)?,
                silhouette,
            })
        })
        .collect()
}
