//! Meta relations and their composition into higher-order biadjacency matrices.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::SparseBiadj;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelError {
    #[error("cannot compose {left_rows}x{left_cols} with {right_rows}x{right_cols}")]
    InnerDim {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("invalid meta relation: {0}")]
    Invalid(String),
    #[error("lift needs an order-1 base set, got order {0}")]
    BaseOrder(usize),
}

/// An ordered walk over node types, with the base relation used at each hop.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaRelation {
    path: Vec<String>,
    edges: Vec<String>,
}

impl MetaRelation {
    pub fn new(path: Vec<String>, edges: Vec<String>) -> Result<Self, RelError> {
        if path.len() < 2 {
            return Err(RelError::Invalid(format!("path {path:?} is shorter than 2")));
        }
        if edges.len() + 1 != path.len() {
            return Err(RelError::Invalid(format!(
                "{} hop names for a path of {} types",
                edges.len(),
                path.len()
            )));
        }
        Ok(MetaRelation { path, edges })
    }

    /// A single-hop relation `src -> dst` named `name`.
    pub fn base(name: impl Into<String>, src: impl Into<String>, dst: impl Into<String>) -> Self {
        MetaRelation {
            path: vec![src.into(), dst.into()],
            edges: vec![name.into()],
        }
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    pub fn edge_names(&self) -> &[String] {
        &self.edges
    }

    pub fn source(&self) -> &str {
        &self.path[0]
    }

    pub fn target(&self) -> &str {
        self.path.last().expect("path has at least two types")
    }

    /// Number of hops.
    pub fn order(&self) -> usize {
        self.edges.len()
    }

    /// `self` followed by `next`; `None` unless `next` starts where `self` ends.
    pub fn then(&self, next: &MetaRelation) -> Option<MetaRelation> {
        if self.target() != next.source() {
            return None;
        }
        let mut path = self.path.clone();
        path.extend_from_slice(&next.path[1..]);
        let mut edges = self.edges.clone();
        edges.extend_from_slice(&next.edges);
        Some(MetaRelation { path, edges })
    }

    /// Short display name. When every hop is named after its endpoint types
    /// (`PA`, `AP`, ...) the type letters are run together (`PAP`); otherwise
    /// the hop names are joined with dots.
    pub fn name(&self) -> String {
        let conventional = self
            .edges
            .iter()
            .enumerate()
            .all(|(h, e)| *e == format!("{}{}", self.path[h], self.path[h + 1]));
        if conventional {
            self.path.concat()
        } else {
            self.edges.join(".")
        }
    }
}

impl fmt::Display for MetaRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub relation: MetaRelation,
    pub matrix: Arc<SparseBiadj>,
}

/// All meta relations of one order, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationSet {
    order: usize,
    members: Vec<Member>,
}

impl RelationSet {
    pub fn new(order: usize) -> Self {
        RelationSet {
            order,
            members: Vec::new(),
        }
    }

    /// Adds `relation`, replacing the matrix if the key is already present.
    pub fn insert(&mut self, relation: MetaRelation, matrix: Arc<SparseBiadj>) -> Result<(), RelError> {
        if relation.order() != self.order {
            return Err(RelError::Invalid(format!(
                "{} has order {}, set has order {}",
                relation,
                relation.order(),
                self.order
            )));
        }
        match self.members.iter_mut().find(|m| m.relation == relation) {
            Some(m) => m.matrix = matrix,
            None => self.members.push(Member { relation, matrix }),
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn get(&self, relation: &MetaRelation) -> Option<&Member> {
        self.members.iter().find(|m| &m.relation == relation)
    }

    pub fn position(&self, relation: &MetaRelation) -> Option<usize> {
        self.members.iter().position(|m| &m.relation == relation)
    }

    pub fn relations(&self) -> impl Iterator<Item = &MetaRelation> {
        self.members.iter().map(|m| &m.relation)
    }
}

/// Members of `rs` whose source type is `node_type`, in insertion order.
pub fn relations_from(rs: &RelationSet, node_type: &str) -> RelationSet {
    RelationSet {
        order: rs.order,
        members: rs
            .members
            .iter()
            .filter(|m| m.relation.source() == node_type)
            .cloned()
            .collect(),
    }
}

/// Degree-normalized composition `A_mn · D⁻¹ · A_np`, where `D_jj` is the
/// in-degree of `j` under `A_mn` plus its out-degree under `A_np`.
///
/// Intermediate nodes with zero combined degree contribute nothing.
pub fn compose(a_mn: &SparseBiadj, a_np: &SparseBiadj) -> Result<SparseBiadj, RelError> {
    if a_mn.n_cols() != a_np.n_rows() {
        return Err(RelError::InnerDim {
            left_rows: a_mn.n_rows(),
            left_cols: a_mn.n_cols(),
            right_rows: a_np.n_rows(),
            right_cols: a_np.n_cols(),
        });
    }
    let inv_degree: Vec<f64> = a_mn
        .col_sums()
        .into_iter()
        .zip(a_np.row_sums())
        .map(|(d_in, d_out)| {
            let d = d_in + d_out;
            if d > 0.0 {
                1.0 / d
            } else {
                0.0
            }
        })
        .collect();

    let n_out = a_np.n_cols();
    let rows: Vec<Vec<(usize, f64)>> = (0..a_mn.n_rows())
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; n_out], vec![false; n_out], Vec::<usize>::new()),
            |(acc, seen, touched), i| {
                let (mids, weights) = a_mn.row(i);
                for (&j, &a_ij) in mids.iter().zip(weights) {
                    let scale = a_ij * inv_degree[j];
                    if scale == 0.0 {
                        continue;
                    }
                    let (cols, vals) = a_np.row(j);
                    for (&k, &b_jk) in cols.iter().zip(vals) {
                        if !seen[k] {
                            seen[k] = true;
                            touched.push(k);
                        }
                        acc[k] += scale * b_jk;
                    }
                }
                touched.sort_unstable();
                let mut row = Vec::with_capacity(touched.len());
                for &k in touched.iter() {
                    if acc[k] > 0.0 {
                        row.push((k, acc[k]));
                    }
                    acc[k] = 0.0;
                    seen[k] = false;
                }
                touched.clear();
                row
            },
        )
        .collect();
    Ok(SparseBiadj::from_rows(n_out, rows))
}

/// Next-order set: one member per matching pair `(r1, r2)` with
/// `target(r1) == source(r2)`, iterating `prev` in order and `base` in order.
pub fn lift(prev: &RelationSet, base: &RelationSet) -> Result<RelationSet, RelError> {
    if base.order != 1 {
        return Err(RelError::BaseOrder(base.order));
    }
    let mut out = RelationSet::new(prev.order + 1);
    for r1 in &prev.members {
        for r2 in &base.members {
            if let Some(relation) = r1.relation.then(&r2.relation) {
                let matrix = compose(&r1.matrix, &r2.matrix)?;
                out.members.push(Member {
                    relation,
                    matrix: Arc::new(matrix),
                });
            }
        }
    }
    Ok(out)
}

/// Orders `1..=max_order`, each lifted from the previous one.
pub fn relation_orders(base: &RelationSet, max_order: usize) -> Result<Vec<RelationSet>, RelError> {
    let mut orders = vec![base.clone()];
    while orders.len() < max_order {
        let next = lift(orders.last().expect("non-empty"), base)?;
        orders.push(next);
    }
    orders.truncate(max_order.max(1));
    Ok(orders)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneRule {
    /// Drop entries strictly below the threshold.
    Epsilon(f64),
    /// Keep the `k` largest entries per row; ties go to the smaller column.
    TopK(usize),
}

pub fn prune(a: &SparseBiadj, rule: PruneRule) -> Result<SparseBiadj, RelError> {
    match rule {
        PruneRule::Epsilon(eps) if eps >= 0.0 => Ok(a.filter(|_, _, w| w >= eps)),
        PruneRule::TopK(k) if k >= 1 => {
            let rows = (0..a.n_rows())
                .map(|r| {
                    let (cols, vals) = a.row(r);
                    let mut order: Vec<usize> = (0..cols.len()).collect();
                    order.sort_by(|&x, &y| vals[y].total_cmp(&vals[x]).then(cols[x].cmp(&cols[y])));
                    order.truncate(k);
                    order.sort_unstable();
                    order.into_iter().map(|e| (cols[e], vals[e])).collect()
                })
                .collect();
            Ok(SparseBiadj::from_rows(a.n_cols(), rows))
        }
        other => Err(RelError::Invalid(format!("bad prune rule {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(name: &str) -> MetaRelation {
        let mut chars = name.chars();
        let (s, d) = (chars.next().unwrap(), chars.next().unwrap());
        MetaRelation::base(name, s.to_string(), d.to_string())
    }

    fn set(names: &[&str]) -> RelationSet {
        let mut rs = RelationSet::new(1);
        for n in names {
            rs.insert(rel(n), Arc::new(SparseBiadj::empty(2, 2))).unwrap();
        }
        rs
    }

    #[test]
    fn compose_hand_example_degree_three() {
        // m1-n1 (1); n1-p1 (1), n1-p2 (1): D_n1 = 1 + 2 = 3
        let a = SparseBiadj::from_triples(1, 1, [(0, 0, 1.0)]).unwrap();
        let b = SparseBiadj::from_triples(1, 2, [(0, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let c = compose(&a, &b).unwrap();
        assert!((c.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn compose_hand_example_weighted() {
        let a = SparseBiadj::from_triples(1, 1, [(0, 0, 2.0)]).unwrap();
        let b = SparseBiadj::from_triples(1, 1, [(0, 0, 4.0)]).unwrap();
        let c = compose(&a, &b).unwrap();
        assert!((c.get(0, 0) - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn compose_with_empty_is_empty() {
        let a = SparseBiadj::from_triples(2, 3, [(0, 0, 1.0), (1, 2, 1.0)]).unwrap();
        let c = compose(&a, &SparseBiadj::empty(3, 4)).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.shape(), (2, 4));
    }

    #[test]
    fn compose_inner_mismatch() {
        let err = compose(&SparseBiadj::empty(2, 3), &SparseBiadj::empty(4, 1)).unwrap_err();
        assert!(matches!(err, RelError::InnerDim { .. }));
    }

    #[test]
    fn lift_dblp_shape() {
        let base = set(&["PA", "AP", "PC", "CP"]);
        let two = lift(&base, &base).unwrap();
        let names: Vec<String> = two.relations().map(MetaRelation::name).collect();
        assert_eq!(names, ["PAP", "APA", "APC", "PCP", "CPA", "CPC"]);
        assert!(two.relations().all(|r| r.path().len() == 3));
    }

    #[test]
    fn lift_without_matching_pairs() {
        let base = set(&["PA"]);
        assert!(lift(&base, &base).unwrap().is_empty());
    }

    #[test]
    fn lift_requires_order_one_base() {
        let base = set(&["PA", "AP"]);
        let two = lift(&base, &base).unwrap();
        assert_eq!(lift(&base, &two).unwrap_err(), RelError::BaseOrder(2));
    }

    #[test]
    fn filter_by_source() {
        let rs = set(&["PA", "AP", "PC"]);
        let names: Vec<String> = relations_from(&rs, "P").relations().map(MetaRelation::name).collect();
        assert_eq!(names, ["PA", "PC"]);
        assert!(relations_from(&rs, "Z").is_empty());
        let dblp = set(&["PA", "PC", "PT", "AP", "CP", "TP"]);
        let names: Vec<String> = relations_from(&dblp, "A").relations().map(MetaRelation::name).collect();
        assert_eq!(names, ["AP"]);
    }

    #[test]
    fn prune_rules() {
        let a = SparseBiadj::from_triples(1, 4, [(0, 0, 0.5), (0, 1, 0.3), (0, 2, 0.2), (0, 3, 0.3)]).unwrap();
        assert_eq!(prune(&a, PruneRule::Epsilon(0.0)).unwrap(), a);
        let top = prune(&a, PruneRule::TopK(2)).unwrap();
        assert_eq!(top.row(0).0, &[0, 1]);
        let eps = prune(&a, PruneRule::Epsilon(0.25)).unwrap();
        assert_eq!(eps.row(0).0, &[0, 1, 3]);
        assert!(prune(&a, PruneRule::TopK(0)).is_err());
        assert!(prune(&a, PruneRule::Epsilon(-1.0)).is_err());
    }

    #[test]
    fn names() {
        let pap = rel("PA").then(&rel("AP")).unwrap();
        assert_eq!(pap.name(), "PAP");
        let odd = MetaRelation::base("writes", "P", "A").then(&rel("AP")).unwrap();
        assert_eq!(odd.name(), "writes.AP");
        assert!(rel("PA").then(&rel("PA")).is_none());
        assert!(MetaRelation::new(vec!["P".into()], vec![]).is_err());
    }
}
