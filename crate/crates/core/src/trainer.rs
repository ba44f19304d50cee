//! Staged training: pretraining, prototype initialization and joint
//! optimization, with resumable checkpoints.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, classification_loss};
use crate::encoder::{cross_entropy, Encoder, Readout};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::model::{embed_prototypes, Model, PredictConfig};
use crate::numerics::{AdamState, ParamStore, Tape, Var};
use crate::prototypes::{init_prototypes, regularizer, InitOptions, InitPool};
use crate::task::{accuracy_of, all_embeddings, forward_batch, Mode, Prepared, Split, Task};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the reconstruction loss.
    pub alpha: f64,
    /// Weight of the prototype deviation regularizer.
    pub beta: f64,
    /// Similarity temperature.
    pub tau: f64,
    /// Prototypes per class.
    pub k: usize,
    /// Nearest prototypes used for prediction; defaults to `k`.
    pub m: Option<usize>,
    /// Negative samples per positive link.
    pub q: usize,
    pub t_low: f64,
    pub t_high: f64,
    pub lr: f64,
    /// Learning rate of the joint stage.
    pub joint_lr: f64,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    /// Graphs per step in graph mode; node mode is full-batch.
    pub batch_size: usize,
    /// Joint epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub decoder_hidden: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_restarts: usize,
    /// Keep the initial prototype graphs fixed during joint training.
    pub freeze_prototypes: bool,
    /// Graph readout; by default mean pooling for graphs, center node for nodes.
    pub readout: Option<Readout>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            tau: 1.0,
            k: 2,
            m: None,
            q: 50,
            t_low: 0.2,
            t_high: 0.8,
            lr: 1e-2,
            joint_lr: 1e-3,
            pretrain_epochs: 200,
            train_epochs: 500,
            batch_size: 32,
            patience: 50,
            seed: 0,
            hidden_dim: 32,
            embed_dim: 32,
            decoder_hidden: 32,
            kmeans_max_iter: 100,
            kmeans_restarts: 10,
            freeze_prototypes: false,
            readout: None,
        }
    }
}

impl TrainConfig {
    pub fn m(&self) -> usize {
        self.m.unwrap_or(self.k)
    }


    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be a finite value >= 0, got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if !(0.0 <= self.t_low && self.t_low <= self.t_high && self.t_high <= 1.0) {
            return bad(
                "t_low/t_high",
                format!("need 0 <= t_low <= t_high <= 1, got {} and {}", self.t_low, self.t_high),
            );
        }
        if self.k == 0 {
            return bad("k", "must be at least 1".into());
        }
        let total = num_classes * self.k;
        if self.m() == 0 || self.m() > total {
            return bad("m", format!("must lie in 1..={total}, got {}", self.m()));
        }
        for (field, lr) in [("lr", self.lr), ("joint_lr", self.joint_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(field, format!("must be a finite value >= 0, got {lr}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        for (field, v) in [
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("decoder_hidden", self.decoder_hidden),
        ] {
            if v == 0 {
                return bad(field, "must be at least 1".into());
            }
        }
        Ok(())
    }

    fn predict_config(&self) -> PredictConfig {
        PredictConfig {
            t_low: self.t_low,
            t_high: self.t_high,
            tau: self.tau,
            m: self.m(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Joint,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub recon: f64,
    pub total: f64,
}

/// Objective terms on the training split at the end of a joint epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub classification: f64,
    pub recon: f64,
    pub regularizer: f64,
    pub total: f64,
    pub val_acc: f64,
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub mode: Mode,
    pub config: TrainConfig,
    pub stage: Stage,
    /// Completed epochs of the current stage.
    pub epoch: usize,
    pub model: Model,
    /// Best-validation model of the joint stage.
    pub best: Option<Model>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
    /// The model right after pretraining; serves as an independent reference classifier.
    pub reference: Option<Model>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub pretrain_history: Vec<PretrainEpoch>,
    pub history: Vec<EpochLosses>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            context: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                context: "version".into(),
                message: format!("unsupported checkpoint version {}", ck.version),
            });
        }
        ck.model.store.ensure_grads();
        for m in ck.best.iter_mut().chain(ck.reference.iter_mut()) {
            m.store.ensure_grads();
        }
        Ok(ck)
    }

    /// The model to use for prediction: the best-validation one when available.
    pub fn final_model(&self) -> &Model {
        self.best.as_ref().unwrap_or(&self.model)
    }
}

/// A fresh model for `task` under `cfg`.
pub fn new_model(cfg: &TrainConfig, task: &Task<'_>, rng: &mut ChaCha8Rng) -> Model {
    let mut store = ParamStore::new();
    let readout = cfg.readout.unwrap_or(task.mode().default_readout());
    let encoder = Encoder::new(
        &mut store,
        task.feature_dim(),
        cfg.hidden_dim,
        cfg.embed_dim,
        task.num_classes(),
        readout,
        rng,
    );
    let generator = Generator::new(&mut store, cfg.embed_dim, cfg.decoder_hidden, task.feature_dim(), rng);
    Model {
        store,
        encoder,
        generator,
        prototypes: None,
        frozen_graphs: None,
        predict: cfg.predict_config(),
    }
}

fn check_finite(epoch: usize, term: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, term, value })
    }
}

pub struct Trainer<'a> {
    task: Task<'a>,
    prep: Prepared,
    pub state: Checkpoint,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, task: Task<'a>) -> Result<Self> {
        cfg.validate(task.num_classes())?;
        if task.split(Split::Train).is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        task.labels(task.split(Split::Train))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = new_model(&cfg, &task, &mut rng);
        let state = Checkpoint {
            version: CHECKPOINT_VERSION,
            mode: task.mode(),
            adam: AdamState::new(cfg.lr),
            config: cfg,
            stage: Stage::Pretrain,
            epoch: 0,
            model,
            best: None,
            best_val_acc: 0.0,
            best_epoch: 0,
            stale_epochs: 0,
            reference: None,
            rng,
            pretrain_history: Vec::new(),
            history: Vec::new(),
        };
        Ok(Self {
            prep: task.prepare(),
            task,
            state,
        })
    }

    /// Continues from a checkpoint on a compatible dataset.
    pub fn resume(state: Checkpoint, task: Task<'a>) -> Result<Self> {
        if state.mode != task.mode() {
            return Err(Error::Usage(format!(
                "checkpoint was trained in {:?} mode but the dataset is {:?}",
                state.mode,
                task.mode()
            )));
        }
        check_compatible(&state.model, &task)?;
        Ok(Self {
            prep: task.prepare(),
            task,
            state,
        })
    }

    pub fn task(&self) -> &Task<'a> {
        &self.task
    }

    fn batches(&mut self) -> Vec<Vec<usize>> {
        let mut ids = self.task.split(Split::Train).to_vec();
        match self.task.mode() {
            Mode::Node => vec![ids],
            Mode::Graph => {
                ids.shuffle(&mut self.state.rng);
                ids.chunks(self.state.config.batch_size).map(<[usize]>::to_vec).collect()
            }
        }
    }

    /// One pretraining epoch on cross-entropy plus weighted reconstruction.
    pub fn pretrain_epoch(&mut self) -> Result<PretrainEpoch> {
        let epoch = self.state.epoch;
        let alpha = self.state.config.alpha;
        let q = self.state.config.q;
        let batches = self.batches();
        let (mut ce_sum, mut rec_sum, mut tot_sum) = (0.0, 0.0, 0.0);
        for ids in &batches {
            let model = &mut self.state.model;
            let mut tape = Tape::new();
            let o = pretrain_objective(&mut tape, model, &self.task, &self.prep, ids, alpha, q, &mut self.state.rng)?;
            let (ce, rec, total) = (tape.item(o.cross_entropy), tape.item(o.recon), tape.item(o.total));
            check_finite(epoch, "cross_entropy", ce)?;
            check_finite(epoch, "L_rec", rec)?;
            ce_sum += ce;
            rec_sum += rec;
            tot_sum += total;
            tape.backward(o.total, &mut model.store)?;
            self.state.adam.step(&mut model.store);
        }
        let n = batches.len() as f64;
        let record = PretrainEpoch {
            epoch,
            cross_entropy: ce_sum / n,
            recon: rec_sum / n,
            total: tot_sum / n,
        };
        debug!("pretrain epoch {epoch}: {record:?}");
        self.state.epoch += 1;
        self.state.pretrain_history.push(record.clone());
        Ok(record)
    }

    /// Snapshots the reference classifier and initializes prototypes.
    pub fn finish_pretraining(&mut self) -> Result<()> {
        let cfg = self.state.config.clone();
        let model = &mut self.state.model;
        self.state.reference = Some(model.clone());
        let embeddings = all_embeddings(model, &self.task)?;
        let predicted = embeddings
            .iter()
            .map(|h| model.encoder.classify_embedding(&model.store, h).map(|p| argmax(&p)))
            .collect::<Result<Vec<_>>>()?;
        let mut known = vec![None; self.task.len()];
        for &i in self.task.split(Split::Train) {
            known[i] = self.task.label(i);
        }
        let pool = InitPool {
            embeddings: &embeddings,
            predicted: &predicted,
            known_labels: &known,
        };
        let opts = InitOptions {
            num_classes: self.task.num_classes(),
            per_class: cfg.k,
            max_iter: cfg.kmeans_max_iter,
            n_init: cfg.kmeans_restarts,
        };
        let task = self.task;
        let ps = init_prototypes(
            &mut model.store,
            &model.encoder.clone(),
            &pool,
            &opts,
            |i| task.instance_graph(i),
            &mut self.state.rng,
        )?;
        model.prototypes = Some(ps);
        if cfg.freeze_prototypes {
            model.frozen_graphs = Some(model.prototype_graphs()?);
            model.prototypes.as_ref().expect("set").set_frozen(&mut model.store, true);
        }
        info!("initialized {} prototypes", model.prototypes()?.len());
        self.state.adam = AdamState::new(cfg.joint_lr);
        self.state.stage = Stage::Joint;
        self.state.epoch = 0;
        self.state.stale_epochs = 0;
        let acc = self.validation_accuracy()?;
        self.state.best = Some(self.state.model.clone());
        self.state.best_val_acc = acc;
        self.state.best_epoch = 0;
        Ok(())
    }

    fn validation_accuracy(&self) -> Result<f64> {
        let val = self.task.split(Split::Val);
        let ids = if val.is_empty() { self.task.split(Split::Train) } else { val };
        accuracy_of(&self.state.model, &self.task, ids)
    }

    /// One joint epoch on `L_c + α·L_rec + β·L_R`.
    pub fn joint_epoch(&mut self) -> Result<EpochLosses> {
        let epoch = self.state.epoch;
        let cfg = self.state.config.clone();
        let batches = self.batches();
        for ids in &batches {
            let model = &mut self.state.model;
            let mut tape = Tape::new();
            let o = joint_objective(&mut tape, model, &self.task, &self.prep, ids, &cfg, &mut self.state.rng)?;
            for (term, v) in [("L_c", o.classification), ("L_rec", o.recon), ("L_R", o.regularizer), ("total", o.total)] {
                check_finite(epoch, term, tape.item(v))?;
            }
            tape.backward(o.total, &mut model.store)?;
            self.state.adam.step(&mut model.store);
        }
        if !self.state.model.store.all_finite() {
            return Err(Error::Divergence {
                epoch,
                term: "parameters",
                value: f64::NAN,
            });
        }
        let val_acc = self.validation_accuracy()?;
        let [classification, recon, regularizer, total] = self.train_objective()?;
        let record = EpochLosses {
            epoch,
            classification,
            recon,
            regularizer,
            total,
            val_acc,
        };
        debug!("joint epoch {epoch}: {record:?}");
        self.state.epoch += 1;
        if val_acc > self.state.best_val_acc {
            self.state.stale_epochs = 0;
        } else {
            self.state.stale_epochs += 1;
        }
        // Ties keep the later, longer-trained model.
        if val_acc >= self.state.best_val_acc {
            self.state.best_val_acc = val_acc;
            self.state.best_epoch = self.state.epoch;
            self.state.best = Some(self.state.model.clone());
        }
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// The joint objective over the whole training split, with negatives drawn
    /// from the same seed every epoch so that successive values are comparable.
    fn train_objective(&self) -> Result<[f64; 4]> {
        let cfg = &self.state.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6f_6773);
        let ids = self.task.split(Split::Train);
        let mut tape = Tape::new();
        let o = joint_objective(&mut tape, &self.state.model, &self.task, &self.prep, ids, cfg, &mut rng)?;
        Ok([o.classification, o.recon, o.regularizer, o.total].map(|v| tape.item(v)))
    }

    /// Advances by one unit of work; returns false once training is complete.
    pub fn step(&mut self) -> Result<bool> {
        let cfg = &self.state.config;
        match self.state.stage {
            Stage::Pretrain if self.state.epoch < cfg.pretrain_epochs => {
                self.pretrain_epoch()?;
            }
            Stage::Pretrain => self.finish_pretraining()?,
            Stage::Joint if self.state.epoch < cfg.train_epochs && self.state.stale_epochs < cfg.patience => {
                self.joint_epoch()?;
            }
            Stage::Joint => {
                info!(
                    "joint training stopped after {} epochs; best validation accuracy {:.4} at epoch {}",
                    self.state.epoch, self.state.best_val_acc, self.state.best_epoch
                );
                self.state.stage = Stage::Done;
            }
            Stage::Done => return Ok(false),
        }
        Ok(true)
    }

    /// Runs to completion.
    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    /// Runs until pretraining and prototype initialization are complete.
    pub fn run_pretraining(&mut self) -> Result<()> {
        while self.state.stage == Stage::Pretrain {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }
}

/// Rejects datasets whose feature width or class count differ from the model's.
pub fn check_compatible(model: &Model, task: &Task<'_>) -> Result<()> {
    if model.encoder.feature_dim != task.feature_dim() {
        return Err(Error::Usage(format!(
            "model expects {} node features but the dataset has {}",
            model.encoder.feature_dim,
            task.feature_dim()
        )));
    }
    if model.num_classes() != task.num_classes() {
        return Err(Error::Usage(format!(
            "model has {} classes but the dataset has {}",
            model.num_classes(),
            task.num_classes()
        )));
    }
    Ok(())
}

/// Pretraining alone; returns the pretrained model and its loss history.
pub fn pretrain(cfg: &TrainConfig, task: Task<'_>) -> Result<(Model, Vec<PretrainEpoch>)> {
    let mut t = Trainer::new(cfg.clone(), task)?;
    while t.state.epoch < cfg.pretrain_epochs {
        t.pretrain_epoch()?;
    }
    Ok((t.state.model, t.state.pretrain_history))
}

/// Full staged training.
pub fn fit(cfg: &TrainConfig, task: Task<'_>) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg.clone(), task)?;
    t.run()?;
    Ok(t.into_checkpoint())
}

/// Node classification through local graphs.
pub fn node_mode_fit(cfg: &TrainConfig, d: &crate::graph::NodeDataset) -> Result<Checkpoint> {
    fit(cfg, Task::Node(d))
}

/// Pretraining terms of one batch on a tape.
pub struct PretrainObjective {
    pub cross_entropy: Var,
    pub attr: Var,
    pub link: Var,
    pub recon: Var,
    pub total: Var,
}

/// `CE + α·L_rec` for a batch.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_objective(
    tape: &mut Tape,
    model: &Model,
    task: &Task<'_>,
    prep: &Prepared,
    ids: &[usize],
    alpha: f64,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainObjective> {
    let labels = task.labels(ids)?;
    let be = model.encoder.bind(tape, &model.store);
    let bg = model.generator.bind(tape, &model.store);
    let fw = forward_batch(tape, task, prep, &be, &bg, ids, q, rng)?;
    let logits = be.logits(tape, fw.embeddings)?;
    let ce = cross_entropy(tape, logits, &labels)?;
    let recon = tape.add(fw.attr_loss, fw.link_loss)?;
    let weighted = tape.scale(recon, alpha);
    let total = tape.add(ce, weighted)?;
    Ok(PretrainObjective {
        cross_entropy: ce,
        attr: fw.attr_loss,
        link: fw.link_loss,
        recon,
        total,
    })
}

/// Joint-stage terms of one batch on a tape.
pub struct JointObjective {
    pub classification: Var,
    pub attr: Var,
    pub link: Var,
    pub recon: Var,
    pub regularizer: Var,
    pub total: Var,
}

/// `L_c + α·L_rec + β·L_R` for a batch, with prototype graphs regenerated
/// from the current prototype embeddings.
pub fn joint_objective(
    tape: &mut Tape,
    model: &Model,
    task: &Task<'_>,
    prep: &Prepared,
    ids: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<JointObjective> {
    let labels = task.labels(ids)?;
    let ps = model.prototypes()?;
    let be = model.encoder.bind(tape, &model.store);
    let bg = model.generator.bind(tape, &model.store);
    let hs: Vec<Var> = if model.frozen_graphs.is_some() {
        ps.bind_constant(tape, &model.store)
    } else {
        ps.bind(tape, &model.store)
    };
    let protos = model.prototypes_on_tape(tape, &bg, &hs)?;
    let p = embed_prototypes(tape, &be, &protos)?;
    let fw = forward_batch(tape, task, prep, &be, &bg, ids, cfg.q, rng)?;
    let lc = classification_loss(tape, fw.embeddings, p, &labels, &ps.classes(), cfg.tau)?;
    let recon = tape.add(fw.attr_loss, fw.link_loss)?;
    let lr = regularizer(tape, ps, &hs)?;
    let a = tape.scale(recon, cfg.alpha);
    let b = tape.scale(lr, cfg.beta);
    let total = tape.add(lc, a)?;
    let total = tape.add(total, b)?;
    Ok(JointObjective {
        classification: lc,
        attr: fw.attr_loss,
        link: fw.link_loss,
        recon,
        regularizer: lr,
        total,
    })
}

/// `[L_c, L_rec, L_R, total]` at the current parameters on a batch (no update).
pub fn total_loss(model: &Model, task: &Task<'_>, ids: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<[f64; 4]> {
    let prep = task.prepare();
    let mut tape = Tape::new();
    let o = joint_objective(&mut tape, model, task, &prep, ids, cfg, rng)?;
    Ok([
        tape.item(o.classification),
        tape.item(o.recon),
        tape.item(o.regularizer),
        tape.item(o.total),
    ])
}
