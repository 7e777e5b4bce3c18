//! Dataset directory format.
//!
//! ```text
//! meta.json            node types, relations, target type, class count
//! nodes_<type>.tsv     <id>\t<f1,f2,...>      (absent => unattributed type)
//! edges_<rel>.tsv      <src>\t<dst>[\t<weight>]
//! labels_<target>.tsv  <id>\t<class>
//! splits.json          {"train": [...], "valid": [...], "test": [...]}
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{GraphError, GraphParts, HetGraph, NodeType, Relation, Result, Splits};
use crate::hetgraph::SparseBiadj;
use crate::relalgebra::MetaRelation;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct MetaFile {
    node_types: Vec<MetaNodeType>,
    relations: Vec<MetaRelationEntry>,
    target_type: String,
    num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaNodeType {
    name: String,
    count: usize,
    feature_dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRelationEntry {
    name: String,
    src: String,
    dst: String,
    #[serde(default)]
    directed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitsFile {
    train: Vec<Value>,
    valid: Vec<Value>,
    test: Vec<Value>,
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(GraphError::MissingFile(path.display().to_string()));
    }
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

struct IdMap {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl IdMap {
    fn numeric(count: usize) -> Self {
        let ids: Vec<String> = (0..count).map(|i| i.to_string()).collect();
        let lookup = ids.iter().cloned().zip(0..).collect();
        IdMap { ids, lookup }
    }

    fn resolve(&self, id: &str, node_type: &str, context: &str) -> Result<usize> {
        self.lookup
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::DanglingNode {
                node_type: node_type.to_string(),
                id: id.to_string(),
                context: context.to_string(),
            })
    }
}

fn json_id(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Read and validate a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<HetGraph> {
    let dir = dir.as_ref();
    let meta: MetaFile = serde_json::from_str(&read(&dir.join("meta.json"))?)
        .map_err(|e| GraphError::Meta(e.to_string()))?;

    let mut node_types = Vec::new();
    let mut features = Vec::new();
    let mut id_maps = Vec::new();
    for nt in &meta.node_types {
        let file = format!("nodes_{}.tsv", nt.name);
        let path = dir.join(&file);
        let (map, feat) = if path.exists() {
            read_nodes(&read(&path)?, &file, nt)?
        } else if let Some(d) = nt.feature_dim {
            return Err(GraphError::MissingFile(format!(
                "{} (type {} declares {d} features)",
                path.display(),
                nt.name
            )));
        } else {
            (IdMap::numeric(nt.count), None)
        };
        node_types.push(NodeType {
            name: nt.name.clone(),
            count: nt.count,
            feature_dim: nt.feature_dim,
        });
        features.push(feat);
        id_maps.push(map);
    }
    let type_index = |name: &str| {
        node_types
            .iter()
            .position(|nt: &NodeType| nt.name == name)
            .ok_or_else(|| GraphError::UnknownType(name.to_string()))
    };

    let mut relations = Vec::new();
    for rel in &meta.relations {
        let (s, d) = (type_index(&rel.src)?, type_index(&rel.dst)?);
        let file = format!("edges_{}.tsv", rel.name);
        let text = read(&dir.join(&file))?;
        let mut triples = Vec::new();
        for (ln, line) in lines(&text) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 2 || cols.len() > 3 {
                return Err(parse_err(&file, ln, "expected <src>\\t<dst>[\\t<weight>]"));
            }
            let i = id_maps[s].resolve(cols[0].trim(), &rel.src, &file)?;
            let j = id_maps[d].resolve(cols[1].trim(), &rel.dst, &file)?;
            let w = match cols.get(2) {
                Some(w) => w
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(&file, ln, format!("bad weight: {e}")))?,
                None => 1.0,
            };
            if w < 0.0 || !w.is_finite() {
                return Err(GraphError::NegativeWeight {
                    relation: rel.name.clone(),
                    weight: w,
                });
            }
            if s == d && i == j {
                return Err(GraphError::SelfLoop {
                    relation: rel.name.clone(),
                    index: i,
                });
            }
            triples.push((i, j, w));
        }
        let matrix = SparseBiadj::from_triples(node_types[s].count, node_types[d].count, triples)?;
        relations.push(Relation {
            meta: MetaRelation::base(rel.name.clone(), rel.src.clone(), rel.dst.clone()),
            matrix: Arc::new(matrix),
            directed: rel.directed,
        });
    }

    let target_type = type_index(&meta.target_type)?;
    let label_file = format!("labels_{}.tsv", meta.target_type);
    let mut labels = vec![None; node_types[target_type].count];
    for (ln, line) in lines(&read(&dir.join(&label_file))?) {
        let (id, class) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(&label_file, ln, "expected <id>\\t<class>"))?;
        let i = id_maps[target_type].resolve(id.trim(), &meta.target_type, &label_file)?;
        let c: usize = class
            .trim()
            .parse()
            .map_err(|e| parse_err(&label_file, ln, format!("bad class: {e}")))?;
        labels[i] = Some(c);
    }

    let splits_text = read(&dir.join("splits.json"))?;
    let raw: SplitsFile =
        serde_json::from_str(&splits_text).map_err(|e| GraphError::Splits(e.to_string()))?;
    let resolve_all = |values: &[Value]| -> Result<Vec<usize>> {
        values
            .iter()
            .map(|v| {
                let id = json_id(v).ok_or_else(|| GraphError::Splits(format!("bad id {v}")))?;
                id_maps[target_type].resolve(&id, &meta.target_type, "splits.json")
            })
            .collect()
    };
    let splits = Splits {
        train: resolve_all(&raw.train)?,
        valid: resolve_all(&raw.valid)?,
        test: resolve_all(&raw.test)?,
    };

    HetGraph::new(GraphParts {
        node_types,
        features,
        ids: id_maps.into_iter().map(|m| m.ids).collect(),
        relations,
        target_type,
        labels,
        num_classes: meta.num_classes,
        splits,
    })
}

fn read_nodes(text: &str, file: &str, nt: &MetaNodeType) -> Result<(IdMap, Option<Tensor>)> {
    let mut ids = Vec::new();
    let mut lookup = HashMap::new();
    let mut data = Vec::new();
    for (ln, line) in lines(text) {
        let (id, rest) = match line.split_once('\t') {
            Some((id, rest)) => (id.trim(), rest.trim()),
            None => (line.trim(), ""),
        };
        if lookup.insert(id.to_string(), ids.len()).is_some() {
            return Err(parse_err(file, ln, format!("duplicate node id {id:?}")));
        }
        ids.push(id.to_string());
        if let Some(dim) = nt.feature_dim {
            let values: Vec<f64> = if rest.is_empty() {
                Vec::new()
            } else {
                rest.split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(file, ln, format!("bad feature value: {e}")))?
            };
            if values.len() != dim {
                return Err(GraphError::FeatureDim {
                    node_type: nt.name.clone(),
                    expected: dim,
                    found: values.len(),
                });
            }
            data.extend(values);
        }
    }
    if ids.len() != nt.count {
        return Err(GraphError::Meta(format!(
            "type {} declares {} nodes but {file} lists {}",
            nt.name,
            nt.count,
            ids.len()
        )));
    }
    let features = nt.feature_dim.map(|d| Tensor::from_vec(nt.count, d, data).expect("row lengths checked"));
    Ok((IdMap { ids, lookup }, features))
}

/// Write `g` in the directory format read by [`load_dataset`].
///
/// Relation names become file names, so composed relations are not written.
pub fn save_dataset(g: &HetGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| GraphError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let meta = MetaFile {
        node_types: g
            .node_types()
            .iter()
            .map(|nt| MetaNodeType {
                name: nt.name.clone(),
                count: nt.count,
                feature_dim: nt.feature_dim,
            })
            .collect(),
        relations: g
            .relations()
            .iter()
            .map(|r| MetaRelationEntry {
                name: r.meta.edge_names()[0].clone(),
                src: r.meta.source().to_string(),
                dst: r.meta.target().to_string(),
                directed: r.directed,
            })
            .collect(),
        target_type: g.type_name(g.target_type()).to_string(),
        num_classes: g.num_classes(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| GraphError::Meta(e.to_string()))?;
    write(&dir.join("meta.json"), &json)?;

    for (t, nt) in g.node_types().iter().enumerate() {
        let Some(x) = g.features(t) else { continue };
        let mut out = String::new();
        for (i, id) in g.ids(t).iter().enumerate() {
            let row: Vec<String> = x.row(i).iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{id}\t{}", row.join(","));
        }
        write(&dir.join(format!("nodes_{}.tsv", nt.name)), &out)?;
    }

    for rel in g.relations() {
        let (s, d) = (
            g.type_index(rel.meta.source()).expect("validated"),
            g.type_index(rel.meta.target()).expect("validated"),
        );
        let mut out = String::new();
        for (r, c, w) in rel.matrix.triples() {
            let _ = writeln!(out, "{}\t{}\t{w}", g.ids(s)[r], g.ids(d)[c]);
        }
        write(&dir.join(format!("edges_{}.tsv", rel.meta.edge_names()[0])), &out)?;
    }

    let t = g.target_type();
    let mut out = String::new();
    for (i, label) in g.labels().iter().enumerate() {
        if let Some(c) = label {
            let _ = writeln!(out, "{}\t{c}", g.ids(t)[i]);
        }
    }
    write(&dir.join(format!("labels_{}.tsv", g.type_name(t))), &out)?;

    let to_ids = |v: &[usize]| v.iter().map(|&i| Value::String(g.ids(t)[i].clone())).collect();
    let splits = SplitsFile {
        train: to_ids(&g.splits().train),
        valid: to_ids(&g.splits().valid),
        test: to_ids(&g.splits().test),
    };
    let json = serde_json::to_string(&splits).map_err(|e| GraphError::Splits(e.to_string()))?;
    write(&dir.join("splits.json"), &json)
}
