//! Attributed heterogeneous networks: typed node sets, per-type features,
//! relation-indexed biadjacency matrices, labels and splits.

mod io;
mod sparse;
pub mod synth;

use std::collections::HashSet;
use std::sync::Arc;

use thiserror::Error;

pub use io::{load_dataset, save_dataset};
pub use sparse::{SparseBiadj, SparseError};
pub use synth::{synth_generate, PlantedRule, SynthConfig};

use crate::relalgebra::{MetaRelation, RelationSet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("invalid meta.json: {0}")]
    Meta(String),
    #[error("dangling node id {id:?} for type {node_type} in {context}")]
    DanglingNode {
        node_type: String,
        id: String,
        context: String,
    },
    #[error("feature dimension mismatch for type {node_type}: expected {expected}, found {found}")]
    FeatureDim {
        node_type: String,
        expected: usize,
        found: usize,
    },
    #[error("negative edge weight {weight} in relation {relation}")]
    NegativeWeight { relation: String, weight: f64 },
    #[error("self-loop on node {index} in relation {relation}")]
    SelfLoop { relation: String, index: usize },
    #[error("unknown node type {0}")]
    UnknownType(String),
    #[error("relation {relation} is {found:?}, expected {expected:?}")]
    RelationShape {
        relation: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("node type mismatch: {0}")]
    TypeMismatch(String),
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("invalid splits: {0}")]
    Splits(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeType {
    pub name: String,
    pub count: usize,
    /// `None` marks an unattributed type.
    pub feature_dim: Option<usize>,
}

/// A node addressed by its type index and dense per-type offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub node_type: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub meta: MetaRelation,
    pub matrix: Arc<SparseBiadj>,
    pub directed: bool,
}

/// Node ids of the target type, pairwise disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Raw pieces validated by [`HetGraph::new`].
#[derive(Debug, Clone)]
pub struct GraphParts {
    pub node_types: Vec<NodeType>,
    /// One entry per node type; `None` for unattributed types.
    pub features: Vec<Option<Tensor>>,
    /// External string id of every node, per type. Empty means `"0".."count-1"`.
    pub ids: Vec<Vec<String>>,
    pub relations: Vec<Relation>,
    pub target_type: usize,
    pub labels: Vec<Option<usize>>,
    pub num_classes: usize,
    pub splits: Splits,
}

/// Immutable attributed heterogeneous network.
#[derive(Debug, Clone)]
pub struct HetGraph {
    node_types: Vec<NodeType>,
    features: Vec<Option<Tensor>>,
    ids: Vec<Vec<String>>,
    relations: Vec<Relation>,
    target_type: usize,
    labels: Vec<Option<usize>>,
    num_classes: usize,
    splits: Splits,
}

impl HetGraph {
    pub fn new(parts: GraphParts) -> Result<Self> {
        let GraphParts {
            node_types,
            features,
            mut ids,
            relations,
            target_type,
            labels,
            num_classes,
            splits,
        } = parts;

        if features.len() != node_types.len() {
            return Err(GraphError::Config(format!(
                "{} feature blocks for {} node types",
                features.len(),
                node_types.len()
            )));
        }
        let mut seen_names = HashSet::new();
        for nt in &node_types {
            if !seen_names.insert(nt.name.as_str()) {
                return Err(GraphError::Config(format!("duplicate node type {}", nt.name)));
            }
        }
        for (nt, feat) in node_types.iter().zip(&features) {
            match (nt.feature_dim, feat) {
                (Some(d), Some(x)) => {
                    if x.rows() != nt.count {
                        return Err(GraphError::Config(format!(
                            "type {} has {} feature rows for {} nodes",
                            nt.name,
                            x.rows(),
                            nt.count
                        )));
                    }
                    if x.cols() != d {
                        return Err(GraphError::FeatureDim {
                            node_type: nt.name.clone(),
                            expected: d,
                            found: x.cols(),
                        });
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(GraphError::Config(format!(
                        "type {} declares features inconsistently",
                        nt.name
                    )))
                }
            }
        }
        ids.resize(node_types.len(), Vec::new());
        for (nt, type_ids) in node_types.iter().zip(ids.iter_mut()) {
            if type_ids.is_empty() {
                *type_ids = (0..nt.count).map(|i| i.to_string()).collect();
            } else if type_ids.len() != nt.count {
                return Err(GraphError::Config(format!(
                    "type {} has {} ids for {} nodes",
                    nt.name,
                    type_ids.len(),
                    nt.count
                )));
            }
        }

        let type_index = |name: &str| {
            node_types
                .iter()
                .position(|nt| nt.name == name)
                .ok_or_else(|| GraphError::UnknownType(name.to_string()))
        };
        let mut seen_rel = HashSet::new();
        for rel in &relations {
            if rel.meta.order() != 1 {
                return Err(GraphError::Config(format!(
                    "graph relation {} must be first-order",
                    rel.meta
                )));
            }
            if !seen_rel.insert(rel.meta.clone()) {
                return Err(GraphError::Config(format!("duplicate relation {}", rel.meta)));
            }
            let (s, d) = (type_index(rel.meta.source())?, type_index(rel.meta.target())?);
            let expected = (node_types[s].count, node_types[d].count);
            if rel.matrix.shape() != expected {
                return Err(GraphError::RelationShape {
                    relation: rel.meta.name(),
                    expected,
                    found: rel.matrix.shape(),
                });
            }
            if s == d {
                if let Some((i, _, _)) = rel.matrix.triples().find(|&(r, c, _)| r == c) {
                    return Err(GraphError::SelfLoop {
                        relation: rel.meta.name(),
                        index: i,
                    });
                }
            }
        }

        if target_type >= node_types.len() {
            return Err(GraphError::Config(format!("target type index {target_type}")));
        }
        if labels.len() != node_types[target_type].count {
            return Err(GraphError::Config(format!(
                "{} labels for {} target nodes",
                labels.len(),
                node_types[target_type].count
            )));
        }
        if let Some(&label) = labels.iter().flatten().find(|&&l| l >= num_classes) {
            return Err(GraphError::Label { label, num_classes });
        }
        let mut assigned = HashSet::new();
        for (name, part) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
            for &i in part {
                if i >= labels.len() {
                    return Err(GraphError::Splits(format!("{name} node {i} out of range")));
                }
                if labels[i].is_none() {
                    return Err(GraphError::Splits(format!("{name} node {i} has no label")));
                }
                if !assigned.insert(i) {
                    return Err(GraphError::Splits(format!("node {i} appears twice")));
                }
            }
        }

        Ok(HetGraph {
            node_types,
            features,
            ids,
            relations,
            target_type,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn num_node_types(&self) -> usize {
        self.node_types.len()
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|nt| nt.name == name)
    }

    pub fn type_name(&self, t: usize) -> &str {
        &self.node_types[t].name
    }

    pub fn count(&self, t: usize) -> usize {
        self.node_types[t].count
    }

    pub fn num_nodes(&self) -> usize {
        self.node_types.iter().map(|nt| nt.count).sum()
    }

    pub fn features(&self, t: usize) -> Option<&Tensor> {
        self.features[t].as_ref()
    }

    pub fn is_attributed(&self, t: usize) -> bool {
        self.features[t].is_some()
    }

    pub fn ids(&self, t: usize) -> &[String] {
        &self.ids[t]
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation(&self, meta: &MetaRelation) -> Option<&Relation> {
        self.relations.iter().find(|r| &r.meta == meta)
    }

    /// First-order relation set, in graph order.
    pub fn base_relations(&self) -> RelationSet {
        let mut rs = RelationSet::new(1);
        for r in &self.relations {
            rs.insert(r.meta.clone(), r.matrix.clone())
                .expect("graph relations are first-order");
        }
        rs
    }

    pub fn target_type(&self) -> usize {
        self.target_type
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Neighbors of `i` under the first-order relation `r`, with weights.
    pub fn neighbors(&self, r: &MetaRelation, i: NodeRef) -> Result<Vec<(NodeRef, f64)>> {
        let rel = self
            .relation(r)
            .ok_or_else(|| GraphError::Config(format!("unknown relation {r}")))?;
        let src = self
            .type_index(r.source())
            .ok_or_else(|| GraphError::UnknownType(r.source().to_string()))?;
        let dst = self
            .type_index(r.target())
            .ok_or_else(|| GraphError::UnknownType(r.target().to_string()))?;
        if i.node_type != src {
            return Err(GraphError::TypeMismatch(format!(
                "node of type {} queried on relation {} with source {}",
                self.type_name(i.node_type),
                r,
                r.source()
            )));
        }
        if i.index >= self.count(src) {
            return Err(GraphError::DanglingNode {
                node_type: r.source().to_string(),
                id: i.index.to_string(),
                context: "neighbors query".into(),
            });
        }
        let (cols, vals) = rel.matrix.row(i.index);
        Ok(cols
            .iter()
            .zip(vals)
            .map(|(&c, &w)| (NodeRef { node_type: dst, index: c }, w))
            .collect())
    }

    /// Adds the transposed relation for every relation lacking one.
    ///
    /// A relation `(m, n)` counts as already reversed if some relation
    /// `(n, m)` (possibly itself) holds exactly the transposed entries, so
    /// running this twice adds nothing the second time.
    pub fn add_reverse_relations(&self) -> HetGraph {
        let mut relations = self.relations.clone();
        for rel in &self.relations {
            let transposed = rel.matrix.transpose();
            let covered = relations.iter().any(|other| {
                other.meta.source() == rel.meta.target()
                    && other.meta.target() == rel.meta.source()
                    && *other.matrix == transposed
            });
            if covered {
                continue;
            }
            let name = reverse_name(&rel.meta, &relations);
            relations.push(Relation {
                meta: MetaRelation::base(name, rel.meta.target(), rel.meta.source()),
                matrix: Arc::new(transposed),
                directed: rel.directed,
            });
        }
        HetGraph {
            relations,
            ..self.clone()
        }
    }

    /// Copy with every edge incident to the given target-type nodes removed.
    pub fn without_target_edges(&self, removed: &HashSet<usize>) -> HetGraph {
        let t = self.target_type;
        let relations = self
            .relations
            .iter()
            .map(|rel| {
                let src = self.type_index(rel.meta.source()) == Some(t);
                let dst = self.type_index(rel.meta.target()) == Some(t);
                if !src && !dst {
                    return rel.clone();
                }
                let matrix = rel.matrix.filter(|r, c, _| {
                    !(src && removed.contains(&r)) && !(dst && removed.contains(&c))
                });
                Relation {
                    matrix: Arc::new(matrix),
                    ..rel.clone()
                }
            })
            .collect();
        HetGraph {
            relations,
            ..self.clone()
        }
    }

    /// Copy with each feature row scaled to unit L2 norm (zero rows left alone).
    pub fn with_normalized_features(&self) -> HetGraph {
        let features = self
            .features
            .iter()
            .map(|f| {
                f.as_ref().map(|x| {
                    let mut x = x.clone();
                    for r in 0..x.rows() {
                        let row = x.row_mut(r);
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            row.iter_mut().for_each(|v| *v /= norm);
                        }
                    }
                    x
                })
            })
            .collect();
        HetGraph {
            features,
            ..self.clone()
        }
    }

    /// Copy with the given relations replacing the current ones (validated).
    pub fn with_relations(&self, relations: Vec<Relation>) -> Result<HetGraph> {
        HetGraph::new(GraphParts {
            node_types: self.node_types.clone(),
            features: self.features.clone(),
            ids: self.ids.clone(),
            relations,
            target_type: self.target_type,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            splits: self.splits.clone(),
        })
    }

    /// Copy with different splits (validated).
    pub fn with_splits(&self, splits: Splits) -> Result<HetGraph> {
        HetGraph::new(GraphParts {
            node_types: self.node_types.clone(),
            features: self.features.clone(),
            ids: self.ids.clone(),
            relations: self.relations.clone(),
            target_type: self.target_type,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            splits,
        })
    }
}

fn reverse_name(meta: &MetaRelation, existing: &[Relation]) -> String {
    let name = &meta.edge_names()[0];
    let conventional = format!("{}{}", meta.source(), meta.target());
    let mut candidate = if *name == conventional {
        format!("{}{}", meta.target(), meta.source())
    } else {
        format!("{name}_rev")
    };
    while existing.iter().any(|r| r.meta.edge_names()[0] == candidate) {
        candidate.push_str("_rev");
    }
    candidate
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy() -> HetGraph {
        let pa = SparseBiadj::from_triples(4, 3, [(0, 1, 1.0), (1, 0, 1.0), (2, 2, 0.5), (3, 1, 2.0)]).unwrap();
        HetGraph::new(GraphParts {
            node_types: vec![
                NodeType { name: "P".into(), count: 4, feature_dim: Some(2) },
                NodeType { name: "A".into(), count: 3, feature_dim: None },
            ],
            features: vec![Some(Tensor::full(4, 2, 1.0)), None],
            ids: vec![],
            relations: vec![Relation {
                meta: MetaRelation::base("PA", "P", "A"),
                matrix: Arc::new(pa),
                directed: false,
            }],
            target_type: 0,
            labels: vec![Some(0), Some(1), Some(0), None],
            num_classes: 2,
            splits: Splits { train: vec![0], valid: vec![1], test: vec![2] },
        })
        .unwrap()
    }

    #[test]
    fn counts_and_ids() {
        let g = toy();
        assert_eq!(g.count(0), 4);
        assert_eq!(g.count(1), 3);
        assert_eq!(g.ids(1), ["0", "1", "2"]);
        assert!(!g.is_attributed(1));
    }

    #[test]
    fn reverse_injection_and_idempotence() {
        let g = toy().add_reverse_relations();
        assert_eq!(g.relations().len(), 2);
        let ap = &g.relations()[1];
        assert_eq!(ap.meta.name(), "AP");
        assert_eq!(ap.matrix.get(1, 0), 1.0);
        assert_eq!(ap.matrix.get(1, 3), 2.0);
        let again = g.add_reverse_relations();
        assert_eq!(again.relations(), g.relations());
    }

    #[test]
    fn neighbors_of_row() {
        let g = toy();
        let pa = MetaRelation::base("PA", "P", "A");
        let n = g.neighbors(&pa, NodeRef { node_type: 0, index: 3 }).unwrap();
        assert_eq!(n, vec![(NodeRef { node_type: 1, index: 1 }, 2.0)]);
        let err = g.neighbors(&pa, NodeRef { node_type: 1, index: 0 }).unwrap_err();
        assert!(matches!(err, GraphError::TypeMismatch(_)));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let g = toy();
        let err = g
            .with_splits(Splits { train: vec![0], valid: vec![0], test: vec![] })
            .unwrap_err();
        assert!(matches!(err, GraphError::Splits(_)));
        let err = g
            .with_splits(Splits { train: vec![3], valid: vec![], test: vec![] })
            .unwrap_err();
        assert!(matches!(err, GraphError::Splits(_)));
    }

    #[test]
    fn self_loops_rejected_on_same_type_relation() {
        let g = toy();
        let pp = SparseBiadj::from_triples(4, 4, [(1, 1, 1.0)]).unwrap();
        let mut rels = g.relations().to_vec();
        rels.push(Relation {
            meta: MetaRelation::base("PP", "P", "P"),
            matrix: Arc::new(pp),
            directed: true,
        });
        assert!(matches!(g.with_relations(rels), Err(GraphError::SelfLoop { .. })));
    }

    #[test]
    fn symmetric_same_type_relation_is_its_own_reverse() {
        let g = toy();
        let pp = SparseBiadj::from_triples(4, 4, [(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let mut rels = g.relations().to_vec();
        rels.push(Relation {
            meta: MetaRelation::base("cites", "P", "P"),
            matrix: Arc::new(pp),
            directed: false,
        });
        let g = g.with_relations(rels).unwrap().add_reverse_relations();
        let names: Vec<String> = g.relations().iter().map(|r| r.meta.name()).collect();
        assert_eq!(names, ["PA", "cites", "AP"]);
    }

    #[test]
    fn masking_drops_incident_edges() {
        let g = toy().add_reverse_relations();
        let masked = g.without_target_edges(&HashSet::from([3]));
        assert!(!masked.relations()[0].matrix.contains(3, 1));
        assert!(!masked.relations()[1].matrix.contains(1, 3));
        assert!(masked.relations()[1].matrix.contains(1, 0));
    }
}
