mod common;

use protognn::graph::{extract_local_graph, GraphDataset};
use protognn::synth::{gen_ba_shapes, gen_cyclic_toy, BaShapesConfig};
use protognn::task::{predict_instances, Split, Task};
use protognn::trainer::{fit, node_mode_fit, pretrain, total_loss, Checkpoint, Stage, TrainConfig, Trainer};
use protognn::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cyclic() -> GraphDataset {
    gen_cyclic_toy(40, 3..=6, 7).unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden_dim: 8,
        embed_dim: 8,
        decoder_hidden: 8,
        q: 5,
        pretrain_epochs: 4,
        train_epochs: 4,
        kmeans_restarts: 2,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[cfg_attr(not(acceptance), test)]
    fn config_validation_names_the_field(
        alpha in -1.0f64..2.0,
        tau in -1.0f64..2.0,
        t_low in -0.2f64..1.2,
        t_high in -0.2f64..1.2,
        k in 0usize..3,
        m in prop::option::of(0usize..8),
        batch_size in 0usize..3,
    ) {
        let cfg = TrainConfig { alpha, tau, t_low, t_high, k, m, batch_size, ..TrainConfig::default() };
        let m_eff = m.unwrap_or(k);
        let problems = [
            ("alpha", alpha < 0.0),
            ("tau", tau <= 0.0),
            ("t_low/t_high", !(0.0 <= t_low && t_low <= t_high && t_high <= 1.0)),
            ("k", k == 0),
            ("m", k > 0 && (m_eff == 0 || m_eff > 2 * k)),
            ("batch_size", batch_size == 0),
        ];
        match cfg.validate(2) {
            Ok(()) => prop_assert!(problems.iter().all(|p| !p.1)),
            Err(Error::Config(msg)) => {
                let first = problems.iter().find(|p| p.1).expect("a rejected config has a problem");
                prop_assert!(msg.starts_with(first.0), "{msg}");
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }
}

#[cfg_attr(not(acceptance), test)]
fn resuming_from_any_step_matches_an_uninterrupted_run() {
    let data = cyclic();
    let cfg = small_config(1);
    let reference = fit(&cfg, Task::Graph(&data)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    for stop in 0..=cfg.pretrain_epochs + cfg.train_epochs + 2 {
        let mut t = Trainer::new(cfg.clone(), Task::Graph(&data)).unwrap();
        for _ in 0..stop {
            t.step().unwrap();
        }
        t.into_checkpoint().save(&path).unwrap();
        let mut resumed = Trainer::resume(Checkpoint::load(&path).unwrap(), Task::Graph(&data)).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.into_checkpoint(), reference, "resumed after {stop} steps");
    }
}

#[cfg_attr(not(acceptance), test)]
fn training_is_deterministic() {
    let data = cyclic();
    let cfg = small_config(2);
    let a = fit(&cfg, Task::Graph(&data)).unwrap();
    let b = fit(&cfg, Task::Graph(&data)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.stage, Stage::Done);
    assert_eq!(a.history.len(), cfg.train_epochs);
    assert_eq!(a.pretrain_history.len(), cfg.pretrain_epochs);
    let c = fit(&small_config(3), Task::Graph(&data)).unwrap();
    assert_ne!(a.history, c.history);
}

#[cfg_attr(not(acceptance), test)]
fn huge_learning_rate_diverges_with_a_named_term() {
    let data = cyclic();
    let cfg = TrainConfig { lr: 1e300, joint_lr: 1e300, ..small_config(0) };
    match fit(&cfg, Task::Graph(&data)) {
        Err(Error::Divergence { term, value, .. }) => {
            assert!(["cross_entropy", "L_rec", "L_c", "L_R", "total", "parameters"].contains(&term), "{term}");
            assert!(!value.is_finite());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[cfg_attr(not(acceptance), test)]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = cyclic();
    let cfg = TrainConfig { lr: 0.0, joint_lr: 0.0, ..small_config(4) };
    let initial = Trainer::new(cfg.clone(), Task::Graph(&data)).unwrap().state.model;
    let ck = fit(&cfg, Task::Graph(&data)).unwrap();
    let after_pretrain = ck.reference.as_ref().unwrap();
    for (id, p) in initial.store.iter() {
        assert_eq!(&ck.model.store.value(id).data(), &p.value.data(), "{}", p.name);
        assert_eq!(&after_pretrain.store.value(id).data(), &p.value.data(), "{}", p.name);
    }
    assert_eq!(ck.model.prototypes().unwrap().regularizer_value(&ck.model.store), 0.0);
}

#[cfg_attr(not(acceptance), test)]
fn pretraining_reduces_the_loss() {
    let data = cyclic();
    let cfg = TrainConfig { pretrain_epochs: 40, ..small_config(5) };
    let (_, history) = pretrain(&cfg, Task::Graph(&data)).unwrap();
    assert_eq!(history.len(), 40);
    assert!(history[39].total < history[0].total, "{} -> {}", history[0].total, history[39].total);
    assert!(history[39].cross_entropy < history[0].cross_entropy);
}

#[cfg_attr(not(acceptance), test)]
fn loss_terms_at_initialization() {
    let data = cyclic();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids = data.train.clone();
    for (alpha, beta) in [(0.0, 0.0), (1.0, 1.0), (0.5, 2.0)] {
        let cfg = TrainConfig { alpha, beta, ..small_config(6) };
        let mut t = Trainer::new(cfg.clone(), Task::Graph(&data)).unwrap();
        t.run_pretraining().unwrap();
        let model = t.into_checkpoint().model;
        let [lc, lrec, lr, total] = total_loss(&model, &Task::Graph(&data), &ids, &cfg, &mut rng).unwrap();
        assert_eq!(lr, 0.0);
        assert!(lc > 0.0 && lrec > 0.0);
        assert!((total - (lc + alpha * lrec + beta * lr)).abs() < 1e-12);
        if alpha == 0.0 && beta == 0.0 {
            assert_eq!(total, lc);
        }
    }
}

#[cfg_attr(not(acceptance), test)]
fn zero_joint_epochs_keeps_the_initialized_model() {
    let data = cyclic();
    let cfg = TrainConfig { train_epochs: 0, ..small_config(7) };
    let ck = fit(&cfg, Task::Graph(&data)).unwrap();
    assert_eq!(ck.stage, Stage::Done);
    assert!(ck.history.is_empty());
    assert_eq!(ck.final_model(), &ck.model);
    let mut t = Trainer::new(cfg, Task::Graph(&data)).unwrap();
    t.run_pretraining().unwrap();
    assert_eq!(t.state.model, ck.model);
}

#[cfg_attr(not(acceptance), test)]
fn frozen_prototypes_do_not_move() {
    let data = cyclic();
    let cfg = TrainConfig { freeze_prototypes: true, ..small_config(8) };
    let mut t = Trainer::new(cfg, Task::Graph(&data)).unwrap();
    t.run_pretraining().unwrap();
    let before = t.state.model.prototype_graphs().unwrap();
    t.run().unwrap();
    let model = &t.state.model;
    assert_eq!(model.prototype_graphs().unwrap(), before);
    assert_eq!(model.prototypes().unwrap().regularizer_value(&model.store), 0.0);
}

#[cfg_attr(not(acceptance), test)]
fn node_predictions_match_local_graph_predictions() {
    let data = gen_ba_shapes(&BaShapesConfig {
        base_nodes: 40,
        attach_edges: 2,
        motif_count: 6,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let ck = node_mode_fit(&small_config(9), &data).unwrap();
    let model = ck.final_model();
    let task = Task::Node(&data);
    let ids: Vec<usize> = (0..data.base.n()).collect();
    let protos = model.prototype_embeddings().unwrap();
    for (v, pred) in ids.iter().zip(predict_instances(model, &task, &ids).unwrap()) {
        let local = extract_local_graph(&data, *v).unwrap();
        let h = model.encoder.graph_embedding(&model.store, &local).unwrap();
        let direct = model.predict_embedding(&h, &protos).unwrap();
        assert_eq!(direct.class(), pred.class(), "node {v}");
        assert_eq!(direct.explanation, pred.explanation, "node {v}");
        for (a, b) in direct.class_distribution.iter().zip(&pred.class_distribution) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    assert!(!task.split(Split::Test).is_empty());
}

#[cfg_attr(not(acceptance), test)]
fn checkpoint_errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load(dir.path().join("missing.json")), Err(Error::Io { .. })));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"version\": 1,\n  oops\n}").unwrap();
    match Checkpoint::load(&bad) {
        Err(Error::Parse { context, .. }) => assert!(context.starts_with("line 3"), "{context}"),
        other => panic!("expected parse error, got {other:?}"),
    }
}

/// Every check in this file, for the acceptance runner.
#[allow(dead_code)]
pub fn suite() -> Vec<(&'static str, fn())> {
    vec![
        ("config_validation_names_the_field", config_validation_names_the_field),
        ("resuming_from_any_step_matches_an_uninterrupted_run", resuming_from_any_step_matches_an_uninterrupted_run),
        ("training_is_deterministic", training_is_deterministic),
        ("huge_learning_rate_diverges_with_a_named_term", huge_learning_rate_diverges_with_a_named_term),
        ("zero_learning_rate_leaves_parameters_unchanged", zero_learning_rate_leaves_parameters_unchanged),
        ("pretraining_reduces_the_loss", pretraining_reduces_the_loss),
        ("loss_terms_at_initialization", loss_terms_at_initialization),
        ("zero_joint_epochs_keeps_the_initialized_model", zero_joint_epochs_keeps_the_initialized_model),
        ("frozen_prototypes_do_not_move", frozen_prototypes_do_not_move),
        ("node_predictions_match_local_graph_predictions", node_predictions_match_local_graph_predictions),
        ("checkpoint_errors_are_classified", checkpoint_errors_are_classified),
    ]
}
