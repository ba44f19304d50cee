//! JSON file formats for graphs and datasets.
//!
//! Graph file:
//!
//! ```json
//! {
//!   "version": 1,
//!   "n": 3,
//!   "feature_dim": 1,
//!   "features": [1.0, 1.0, 1.0],
//!   "edges": [[0, 1], [1, 2]],
//!   "edge_weights": [0.5, 1.0],
//!   "graph_label": 0,
//!   "node_labels": [0, 1, 0],
//!   "true_degrees": [1.0, 2.0, 1.0]
//! }
//! ```
//!
//! `features` is row-major. The last four fields are optional. A dataset file
//! carries `version`, `kind` (`"graph"` or `"node"`), `num_classes`, `train`,
//! `val`, `test` and optional `ground_truth_prototypes` (per class, a list of
//! graphs). Graph datasets add `graphs`; node datasets add `base`, `hops` and
//! optional `motif_of`. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset, NodeDataset};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    #[serde(default = "format_version")]
    version: u32,
    n: usize,
    feature_dim: usize,
    features: Vec<f64>,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_degrees: Option<Vec<f64>>,
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Graph,
    Node,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    version: u32,
    kind: Kind,
    num_classes: usize,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graphs: Option<Vec<GraphRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<GraphRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hops: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    motif_of: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth_prototypes: Option<Vec<Vec<GraphRecord>>>,
}

/// Either kind of dataset, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Graph(GraphDataset),
    Node(NodeDataset),
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        match self {
            Dataset::Graph(d) => d.num_classes,
            Dataset::Node(d) => d.num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Dataset::Graph(d) => d.feature_dim(),
            Dataset::Node(d) => d.base.feature_dim(),
        }
    }
}

fn to_record(g: &Graph) -> GraphRecord {
    GraphRecord {
        version: FORMAT_VERSION,
        n: g.n(),
        feature_dim: g.feature_dim(),
        features: g.features().data().to_vec(),
        edges: g.edges().iter().map(|&(a, b)| [a, b]).collect(),
        edge_weights: g.edge_weights().map(<[f64]>::to_vec),
        graph_label: g.graph_label(),
        node_labels: g.node_labels().map(<[usize]>::to_vec),
        true_degrees: g.true_degrees().map(<[f64]>::to_vec),
    }
}

/// Semantic checks happen here so the error can name the offending field.
fn from_record(r: GraphRecord, field: &str) -> std::result::Result<Graph, (String, String)> {
    let at = |sub: &str| format!("{field}{sub}");
    if r.version != FORMAT_VERSION {
        return Err((at(".version"), format!("unsupported version {}", r.version)));
    }
    for (k, &[a, b]) in r.edges.iter().enumerate() {
        if a >= r.n || b >= r.n {
            return Err((at(&format!(".edges[{k}]")), format!("edge {k} ({a}, {b}) references a node >= n = {}", r.n)));
        }
    }
    if r.features.len() != r.n * r.feature_dim {
        return Err((
            at(".features"),
            format!(
                "expected n * feature_dim = {} values, found {}",
                r.n * r.feature_dim,
                r.features.len()
            ),
        ));
    }
    let features = Matrix::from_vec(r.n, r.feature_dim, r.features).map_err(|e| (field.to_string(), e.to_string()))?;
    let edges = r.edges.iter().map(|&[a, b]| (a, b)).collect();
    let build = || -> Result<Graph> {
        let mut g = Graph::with_weights(r.n, edges, r.edge_weights, features)?;
        if let Some(l) = r.graph_label {
            g = g.with_graph_label(l);
        }
        if let Some(l) = r.node_labels {
            g = g.with_node_labels(l)?;
        }
        if let Some(d) = r.true_degrees {
            g = g.with_true_degrees(d)?;
        }
        Ok(g)
    };
    build().map_err(|e| (field.to_string(), e.to_string()))
}

fn parse_err(path: &Path, (context, message): (String, String)) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        context,
        message,
    }
}

fn syntax_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        context: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), &to_record(g))
}

pub fn graph_to_string(g: &Graph) -> String {
    serde_json::to_string_pretty(&to_record(g)).expect("serializable")
}

/// Undirected DOT rendering; edge labels carry weights rounded to 2 decimals.
///
/// `name` must be a DOT identifier (letters, digits, underscores).
pub fn graph_to_dot(g: &Graph, name: &str) -> String {
    let mut s = format!("graph {name} {{\n");
    for v in 0..g.n() {
        s.push_str(&format!("  {v};\n"));
    }
    for (k, &(a, b)) in g.edges().iter().enumerate() {
        let w = g.edge_weight(k);
        s.push_str(&format!("  {a} -- {b} [label=\"{w:.2}\", weight={w:.2}];\n"));
    }
    s.push_str("}\n");
    s
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let record: GraphRecord = serde_json::from_str(&text).map_err(|e| syntax_err(path, e))?;
    from_record(record, "graph").map_err(|e| parse_err(path, e))
}

pub(crate) fn graph_from_value(value: serde_json::Value) -> std::result::Result<Graph, String> {
    let record: GraphRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
    from_record(record, "graph").map_err(|(ctx, msg)| format!("{ctx}: {msg}"))
}

fn gt_records(gt: &Option<Vec<Vec<Graph>>>) -> Option<Vec<Vec<GraphRecord>>> {
    gt.as_ref()
        .map(|classes| classes.iter().map(|c| c.iter().map(to_record).collect()).collect())
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let record = match d {
        Dataset::Graph(d) => DatasetRecord {
            version: FORMAT_VERSION,
            kind: Kind::Graph,
            num_classes: d.num_classes,
            train: d.train.clone(),
            val: d.val.clone(),
            test: d.test.clone(),
            graphs: Some(d.graphs.iter().map(to_record).collect()),
            base: None,
            hops: None,
            motif_of: None,
            ground_truth_prototypes: gt_records(&d.ground_truth_prototypes),
        },
        Dataset::Node(d) => DatasetRecord {
            version: FORMAT_VERSION,
            kind: Kind::Node,
            num_classes: d.num_classes,
            train: d.train.clone(),
            val: d.val.clone(),
            test: d.test.clone(),
            graphs: None,
            base: Some(to_record(&d.base)),
            hops: Some(d.hops),
            motif_of: d.motif_of.clone(),
            ground_truth_prototypes: gt_records(&d.ground_truth_prototypes),
        },
    };
    write_json(path.as_ref(), &record)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let r: DatasetRecord = serde_json::from_str(&text).map_err(|e| syntax_err(path, e))?;
    let fail = |ctx: &str, msg: String| parse_err(path, (ctx.to_string(), msg));
    if r.version != FORMAT_VERSION {
        return Err(fail("version", format!("unsupported version {}", r.version)));
    }
    let gt = match r.ground_truth_prototypes {
        None => None,
        Some(classes) => {
            let mut out = Vec::with_capacity(classes.len());
            for (c, graphs) in classes.into_iter().enumerate() {
                let mut class = Vec::with_capacity(graphs.len());
                for (k, g) in graphs.into_iter().enumerate() {
                    class.push(
                        from_record(g, &format!("ground_truth_prototypes[{c}][{k}]"))
                            .map_err(|e| parse_err(path, e))?,
                    );
                }
                out.push(class);
            }
            Some(out)
        }
    };
    let dataset = match r.kind {
        Kind::Graph => {
            let records = r.graphs.ok_or_else(|| fail("graphs", "graph dataset lacks `graphs`".into()))?;
            let mut graphs = Vec::with_capacity(records.len());
            for (i, g) in records.into_iter().enumerate() {
                graphs.push(from_record(g, &format!("graphs[{i}]")).map_err(|e| parse_err(path, e))?);
            }
            let d = GraphDataset {
                graphs,
                train: r.train,
                val: r.val,
                test: r.test,
                num_classes: r.num_classes,
                ground_truth_prototypes: gt,
            };
            d.validate().map_err(|e| fail("dataset", e.to_string()))?;
            Dataset::Graph(d)
        }
        Kind::Node => {
            let base = r.base.ok_or_else(|| fail("base", "node dataset lacks `base`".into()))?;
            let base = from_record(base, "base").map_err(|e| parse_err(path, e))?;
            let hops = r.hops.ok_or_else(|| fail("hops", "node dataset lacks `hops`".into()))?;
            let d = NodeDataset {
                base,
                train: r.train,
                val: r.val,
                test: r.test,
                hops,
                num_classes: r.num_classes,
                ground_truth_prototypes: gt,
                motif_of: r.motif_of,
            };
            d.validate().map_err(|e| fail("dataset", e.to_string()))?;
            Dataset::Node(d)
        }
    };
    Ok(dataset)
}
