mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::info;
use protognn::classifier::Prediction;
use protognn::graph::Graph;
use protognn::io::{graph_to_dot, load_dataset, load_graph, save_dataset, save_graph, Dataset};
use protognn::metrics::{evaluate, labeled_prototypes, sweep_csv, sweep_driver, train_autoencoder, EvalReport};
use protognn::model::Model;
use protognn::synth::{gen_ba_shapes, gen_cyclic_toy, gen_motif_dataset};
use protognn::task::{predict_instances, Mode, Split, Task};
use protognn::trainer::{check_compatible, Checkpoint, Stage, Trainer};
use protognn::{Error, Result};
use serde::Serialize;
use toml::Value;

use crate::config::{env_assignments, parse_assignment, resolve, train_with, RunConfig};

const DATASETS: [&str; 3] = ["ba-shapes", "cyclic", "motif"];

#[derive(Parser)]
#[command(name = "protognn", version, about = "Prototype-based graph classification with built-in explanations")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training and dataset generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Expected task kind.
    #[arg(long, global = true, value_parser = ["node", "graph"])]
    mode: Option<String>,
    /// Override any config key, e.g. `--set train.k=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (ba-shapes, cyclic or motif).
    Generate { name: String },
    /// Pretrain, initialize prototypes and train jointly.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stop after prototype initialization.
        #[arg(long)]
        pretrain_only: bool,
        /// Continue from a checkpoint; its stored training config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Explain the prediction for a graph file or a node of the dataset.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "node", required_unless_present = "node")]
        graph: Option<PathBuf>,
        #[arg(long)]
        node: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model per grid point and tabulate accuracy and silhouette.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Axis `key=v1,v2,...` over training-config keys. Repeatable.
        #[arg(long = "grid", value_name = "KEY=VALUES")]
        grid: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(if e.code() == "usage" { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut layers = env_assignments(std::env::vars());
    for s in &cli.set {
        layers.push(parse_assignment(s)?);
    }
    if let Some(s) = cli.seed {
        layers.push(("seed".into(), Value::Integer(s as i64)));
    }
    if let Some(o) = &cli.out {
        layers.push(("out".into(), Value::String(o.display().to_string())));
    }
    if let Some(m) = &cli.mode {
        layers.push(("mode".into(), Value::String(m.clone())));
    }
    let cfg = resolve(cli.config.as_deref(), &layers)?;
    match cli.command {
        Command::Generate { name } => cmd_generate(&cfg, &name),
        Command::Train {
            data,
            pretrain_only,
            resume,
        } => cmd_train(&cfg, data.as_deref(), pretrain_only, resume.as_deref()),
        Command::Eval { checkpoint, data, split } => cmd_eval(&cfg, &checkpoint, data.as_deref(), split.parse()?),
        Command::Explain {
            checkpoint,
            graph,
            node,
            data,
        } => cmd_explain(&cfg, &checkpoint, graph.as_deref(), node, data.as_deref()),
        Command::Sweep { data, grid } => cmd_sweep(&cfg, data.as_deref(), &grid),
    }
}

fn generate(cfg: &RunConfig, name: &str) -> Result<Dataset> {
    let d = &cfg.dataset;
    match name {
        "ba-shapes" => Ok(Dataset::Node(gen_ba_shapes(&d.ba_shapes)?)),
        "cyclic" => Ok(Dataset::Graph(gen_cyclic_toy(
            d.cyclic.graphs,
            d.cyclic.min_size..=d.cyclic.max_size,
            d.cyclic.seed,
        )?)),
        "motif" => Ok(Dataset::Graph(gen_motif_dataset(&d.motif)?)),
        other => Err(Error::Usage(format!(
            "unknown dataset `{other}` (valid: {})",
            DATASETS.join(", ")
        ))),
    }
}

/// The dataset from `--data`, the config's `data`, or generated from `dataset.name`.
fn load_data(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    let d = match data.or(cfg.data.as_deref()) {
        Some(p) => load_dataset(p)?,
        None => match &cfg.dataset.name {
            Some(name) => generate(cfg, name)?,
            None => {
                return Err(Error::Usage(
                    "no dataset: pass --data or set dataset.name".into(),
                ))
            }
        },
    };
    let kind = Task::from(&d).mode();
    if let Some(m) = cfg.mode {
        if m != kind {
            return Err(Error::Usage(format!(
                "mode is {m:?} but the dataset is for {kind:?} classification"
            )));
        }
    }
    Ok(d)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn summary(name: &str, d: &Dataset) -> String {
    let (kind, counts) = match d {
        Dataset::Graph(g) => {
            let n = g.graphs.len() as f64;
            let nodes: usize = g.graphs.iter().map(Graph::n).sum();
            let edges: usize = g.graphs.iter().map(|x| x.edges().len()).sum();
            (
                "graph",
                format!(
                    "graphs: {}\navg_nodes: {:.2}\navg_edges: {:.2}\n",
                    g.graphs.len(),
                    nodes as f64 / n,
                    edges as f64 / n
                ),
            )
        }
        Dataset::Node(nd) => (
            "node",
            format!("nodes: {}\nedges: {}\n", nd.base.n(), nd.base.edges().len()),
        ),
    };
    let task = Task::from(d);
    format!(
        "dataset: {name}\nmode: {kind}\n{counts}classes: {}\nfeatures: {}\ntrain/val/test: {}/{}/{}\n",
        d.num_classes(),
        d.feature_dim(),
        task.split(Split::Train).len(),
        task.split(Split::Val).len(),
        task.split(Split::Test).len()
    )
}

fn cmd_generate(cfg: &RunConfig, name: &str) -> Result<()> {
    let d = generate(cfg, name)?;
    create_dir(&cfg.out)?;
    save_dataset(&d, cfg.out.join("dataset.json"))?;
    print!("{}", summary(name, &d));
    Ok(())
}

fn losses_csv(ck: &Checkpoint) -> String {
    let mut s = String::from("epoch,L_c,L_rec,L_R,total,val_acc\n");
    for r in &ck.history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.classification, r.recon, r.regularizer, r.total, r.val_acc
        ));
    }
    s
}

fn pretrain_csv(ck: &Checkpoint) -> String {
    let mut s = String::from("epoch,cross_entropy,L_rec,total\n");
    for r in &ck.pretrain_history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.cross_entropy, r.recon, r.total));
    }
    s
}

/// One JSON graph and one DOT file per prototype.
fn export_prototypes(model: &Model, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let ps = model.prototypes()?;
    for (p, (class, g)) in ps.entries.iter().zip(labeled_prototypes(model)?) {
        let name = format!("class{}_proto{}", class, p.index);
        let graph = g.to_graph().with_graph_label(class);
        save_graph(&graph, dir.join(format!("{name}.json")))?;
        write(&dir.join(format!("{name}.dot")), &graph_to_dot(&graph, &name))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow {
    instance: usize,
    split: &'static str,
    label: String,
    predicted: usize,
    probability: f64,
    explanation_class: usize,
    explanation_index: usize,
}

fn split_of(task: &Task<'_>) -> Vec<&'static str> {
    let mut out = vec!["none"; task.len()];
    for (s, name) in [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")] {
        for &i in task.split(s) {
            out[i] = name;
        }
    }
    out
}

fn predictions_csv(model: &Model, task: &Task<'_>, ids: &[usize]) -> Result<String> {
    let splits = split_of(task);
    let preds = predict_instances(model, task, ids)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for (&i, p) in ids.iter().zip(&preds) {
        let c = p.class();
        w.serialize(PredictionRow {
            instance: i,
            split: splits[i],
            label: task.label(i).map_or_else(String::new, |l| l.to_string()),
            predicted: c,
            probability: p.class_distribution[c],
            explanation_class: p.explanation.0,
            explanation_index: p.explanation.1,
        })
        .map_err(|e| Error::Usage(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn report(cfg: &RunConfig, ck: &Checkpoint, task: &Task<'_>, split: Split) -> Result<EvalReport> {
    let m = &cfg.metrics;
    let autoencoder = if m.silhouette || m.gt_distance {
        let epochs = m.autoencoder_epochs.unwrap_or(ck.config.pretrain_epochs);
        Some(train_autoencoder(&ck.config, task, epochs)?)
    } else {
        None
    };
    let reference = ck.reference.as_ref().filter(|_| m.confidence);
    let mut r = evaluate(ck.final_model(), task, split, reference, autoencoder.as_ref())?;
    if !m.silhouette {
        r.silhouette = None;
        r.cluster_sizes.clear();
    }
    if !m.gt_distance {
        r.gt_distance = None;
    }
    Ok(r)
}

fn write_report(out: &Path, r: &EvalReport) -> Result<()> {
    write(&out.join("report.txt"), &r.to_text())?;
    write(
        &out.join("report.csv"),
        &format!("{}\n{}\n", EvalReport::csv_header(), r.csv_row()),
    )
}

fn cmd_train(cfg: &RunConfig, data: Option<&Path>, pretrain_only: bool, resume: Option<&Path>) -> Result<()> {
    let d = load_data(cfg, data)?;
    let task = Task::from(&d);
    create_dir(&cfg.out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            info!("resuming from {} at stage {:?}, epoch {}", p.display(), ck.stage, ck.epoch);
            Trainer::resume(ck, task)?
        }
        None => Trainer::new(cfg.train.clone(), task)?,
    };
    let mut snapshot = cfg.clone();
    snapshot.train = trainer.state.config.clone();
    if let Some(p) = data {
        snapshot.data = Some(p.to_path_buf());
    }
    write(&cfg.out.join("config.toml"), &snapshot.to_toml())?;
    if pretrain_only {
        trainer.run_pretraining()?;
    } else {
        trainer.run()?;
    }
    let ck = trainer.into_checkpoint();
    ck.save(cfg.out.join("checkpoint.json"))?;
    write(&cfg.out.join("pretrain_losses.csv"), &pretrain_csv(&ck))?;
    write(&cfg.out.join("losses.csv"), &losses_csv(&ck))?;
    let model = ck.final_model();
    export_prototypes(model, &cfg.out.join("prototypes"))?;
    let ids: Vec<usize> = (0..task.len()).collect();
    write(&cfg.out.join("predictions.csv"), &predictions_csv(model, &task, &ids)?)?;
    let split = if task.split(Split::Val).is_empty() { Split::Train } else { Split::Val };
    let r = report(cfg, &ck, &task, split)?;
    write_report(&cfg.out, &r)?;
    let stage = match ck.stage {
        Stage::Done => "done",
        _ => "pretrained",
    };
    print!("stage: {stage}\nbest_epoch: {}\n{}", ck.best_epoch, r.to_text());
    Ok(())
}

fn load_checkpoint(path: &Path, task: &Task<'_>) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.mode != task.mode() {
        return Err(Error::Usage(format!(
            "checkpoint was trained in {:?} mode but the dataset is for {:?} classification",
            ck.mode,
            task.mode()
        )));
    }
    check_compatible(&ck.model, task)?;
    Ok(ck)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>, split: Split) -> Result<()> {
    let d = load_data(cfg, data)?;
    let task = Task::from(&d);
    let ck = load_checkpoint(checkpoint, &task)?;
    let r = report(cfg, &ck, &task, split)?;
    create_dir(&cfg.out)?;
    write_report(&cfg.out, &r)?;
    write(
        &cfg.out.join("predictions.csv"),
        &predictions_csv(ck.final_model(), &task, task.split(split))?,
    )?;
    print!("{}", r.to_text());
    Ok(())
}

#[derive(Serialize)]
struct Explanation {
    predicted_class: usize,
    class_distribution: Vec<f64>,
    nearest: Vec<protognn::classifier::Neighbor>,
    explanation_class: usize,
    explanation_index: usize,
    explanation_graph: String,
}

fn cmd_explain(
    cfg: &RunConfig,
    checkpoint: &Path,
    graph: Option<&Path>,
    node: Option<usize>,
    data: Option<&Path>,
) -> Result<()> {
    let (ck, pred): (Checkpoint, Prediction) = match (graph, node) {
        (Some(gp), _) => {
            let ck = Checkpoint::load(checkpoint)?;
            let g = load_graph(gp)?;
            let model = ck.final_model();
            let h = model.encoder.graph_embedding(&model.store, &g)?;
            let pred = model.predict_embedding(&h, &model.prototype_embeddings()?)?;
            (ck, pred)
        }
        (None, Some(v)) => {
            let d = load_data(cfg, data)?;
            let task = Task::from(&d);
            if task.mode() != Mode::Node {
                return Err(Error::Usage("--node needs a node-classification dataset".into()));
            }
            let ck = load_checkpoint(checkpoint, &task)?;
            if v >= task.len() {
                return Err(Error::Index { index: v, len: task.len() });
            }
            let pred = predict_instances(ck.final_model(), &task, &[v])?.remove(0);
            (ck, pred)
        }
        (None, None) => return Err(Error::Usage("pass --graph or --node".into())),
    };
    let model = ck.final_model();
    create_dir(&cfg.out)?;
    let (c, k) = pred.explanation;
    let (pos, proto) = labeled_prototypes(model)?
        .into_iter()
        .enumerate()
        .filter(|(_, (class, _))| *class == c)
        .nth(k)
        .map(|(i, (_, g))| (i, g))
        .ok_or_else(|| Error::Index { index: k, len: model.prototypes().map_or(0, |p| p.len()) })?;
    let name = format!("class{c}_proto{}", model.prototypes()?.entries[pos].index);
    let g = proto.to_graph().with_graph_label(c);
    write(&cfg.out.join("explanation.dot"), &graph_to_dot(&g, &name))?;
    let bundle = Explanation {
        predicted_class: pred.class(),
        class_distribution: pred.class_distribution.clone(),
        nearest: pred.nearest.clone(),
        explanation_class: c,
        explanation_index: k,
        explanation_graph: format!("prototypes/{name}.json"),
    };
    let mut text = serde_json::to_string_pretty(&bundle).expect("explanation serializes");
    text.push('\n');
    write(&cfg.out.join("explanation.json"), &text)?;
    export_prototypes(model, &cfg.out.join("prototypes"))?;
    println!("predicted_class: {}", bundle.predicted_class);
    for n in &bundle.nearest {
        println!(
            "prototype class{}_proto{}: similarity {:.6}, weight {:.6}",
            n.class, n.index, n.similarity, n.weight
        );
    }
    println!("explanation: {name}");
    Ok(())
}

/// Axes from the config file first, then from flags; the grid is their product.
fn grid_axes(cfg: &RunConfig, flags: &[String]) -> Result<Vec<(String, Vec<Value>)>> {
    let mut axes: Vec<(String, Vec<Value>)> = cfg.sweep.grid.clone().into_iter().collect();
    for f in flags {
        let (key, raw) = f
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected KEY=V1,V2,..., got `{f}`")))?;
        let values: Vec<Value> = raw
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(config::parse_value)
            .collect();
        axes.push((key.trim().to_string(), values));
    }
    if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::Usage("sweep grid is empty".into()));
    }
    Ok(axes)
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn cmd_sweep(cfg: &RunConfig, data: Option<&Path>, flags: &[String]) -> Result<()> {
    let axes = grid_axes(cfg, flags)?;
    let mut points: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for (key, values) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let grid = points
        .iter()
        .map(|p| {
            let setting: Vec<String> = p.iter().map(|(k, v)| format!("{k}={}", render(v))).collect();
            Ok((setting.join(";"), train_with(&cfg.train, p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let d = load_data(cfg, data)?;
    let task = Task::from(&d);
    for (_, t) in &grid {
        t.validate(task.num_classes())?;
    }
    let rows = sweep_driver(&cfg.train, &task, &grid)?;
    let csv = sweep_csv(&rows);
    create_dir(&cfg.out)?;
    write(&cfg.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
