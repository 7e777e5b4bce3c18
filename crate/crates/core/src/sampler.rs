//! Mini-batch subnetworks built by recursive fixed-fanout neighbor sampling.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hetgraph::HetGraph;
use crate::relalgebra::RelationSet;

/// Edges of one relation inside a subnetwork, in local ids, sorted by source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub weight: Vec<f64>,
}

impl LocalEdges {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

const ABSENT: usize = usize::MAX;

/// Nodes retained per type plus every relation's edges among them, for each order.
#[derive(Debug, Clone, PartialEq)]
pub struct Subnetwork {
    /// Global ids per node type; the position is the local id.
    pub nodes: Vec<Vec<usize>>,
    /// `edges[t][j]` holds the edges of member `j` of the order-`t+1` set.
    pub edges: Vec<Vec<LocalEdges>>,
    /// Local ids (in the target type) of the nodes the batch is built around.
    pub seeds: Vec<usize>,
    local: Vec<Vec<usize>>,
}

impl Subnetwork {
    /// The whole graph as one batch; every target node is a seed.
    pub fn full(g: &HetGraph, orders: &[RelationSet]) -> Self {
        let nodes = (0..g.num_node_types()).map(|t| (0..g.count(t)).collect()).collect();
        let seeds = (0..g.count(g.target_type())).collect();
        Self::induced(g, orders, nodes, seeds)
    }

    /// Subnetwork on the given node lists (global ids, no duplicates) with
    /// `seeds` given as local ids of the target type.
    pub fn induced(g: &HetGraph, orders: &[RelationSet], nodes: Vec<Vec<usize>>, seeds: Vec<usize>) -> Self {
        let mut local: Vec<Vec<usize>> = (0..g.num_node_types()).map(|t| vec![ABSENT; g.count(t)]).collect();
        for (t, list) in nodes.iter().enumerate() {
            for (pos, &gid) in list.iter().enumerate() {
                local[t][gid] = pos;
            }
        }
        let edges = orders
            .iter()
            .map(|rs| {
                rs.members()
                    .iter()
                    .map(|m| {
                        let s = g.type_index(m.relation.source()).expect("relation types exist");
                        let d = g.type_index(m.relation.target()).expect("relation types exist");
                        let mut out = LocalEdges::default();
                        for (li, &gi) in nodes[s].iter().enumerate() {
                            let (cols, vals) = m.matrix.row(gi);
                            for (&gk, &w) in cols.iter().zip(vals) {
                                let lk = local[d][gk];
                                if lk != ABSENT {
                                    out.src.push(li);
                                    out.dst.push(lk);
                                    out.weight.push(w);
                                }
                            }
                        }
                        out
                    })
                    .collect()
            })
            .collect();
        Subnetwork { nodes, edges, seeds, local }
    }

    pub fn num_nodes(&self, t: usize) -> usize {
        self.nodes[t].len()
    }

    pub fn local_id(&self, t: usize, global: usize) -> Option<usize> {
        self.local[t].get(global).copied().filter(|&l| l != ABSENT)
    }

    pub fn global_id(&self, t: usize, local: usize) -> usize {
        self.nodes[t][local]
    }

    /// Global ids of the seed nodes.
    pub fn seed_globals(&self, target_type: usize) -> Vec<usize> {
        self.seeds.iter().map(|&l| self.nodes[target_type][l]).collect()
    }
}

/// Sample `min(fanout, degree)` distinct neighbors per frontier node and
/// first-order relation at each hop, then take every order's edges among the
/// retained nodes. Hop `h` uses `fanouts[h]`.
pub fn sample_batch(
    g: &HetGraph,
    orders: &[RelationSet],
    seeds: &[usize],
    fanouts: &[usize],
    seed: u64,
) -> Subnetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = g.target_type();
    let base = g.base_relations();
    let rel_types: Vec<(usize, usize)> = base
        .members()
        .iter()
        .map(|m| {
            (
                g.type_index(m.relation.source()).expect("known type"),
                g.type_index(m.relation.target()).expect("known type"),
            )
        })
        .collect();

    let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); g.num_node_types()];
    let mut seen: Vec<HashSet<usize>> = vec![HashSet::new(); g.num_node_types()];
    let mut seed_locals = Vec::with_capacity(seeds.len());
    let mut frontier: Vec<(usize, usize)> = Vec::new();
    for &s in seeds {
        if seen[t].insert(s) {
            nodes[t].push(s);
            frontier.push((t, s));
        }
        seed_locals.push(nodes[t].iter().position(|&x| x == s).expect("just inserted"));
    }

    let mut scratch: Vec<usize> = Vec::new();
    for &fanout in fanouts {
        let mut next = Vec::new();
        for &(nt, node) in &frontier {
            for (member, &(src, dst)) in base.members().iter().zip(&rel_types) {
                if src != nt {
                    continue;
                }
                let cols = member.matrix.row(node).0;
                scratch.clear();
                scratch.extend(0..cols.len());
                let take = fanout.min(cols.len());
                // partial Fisher-Yates: the first `take` slots end up a uniform sample
                for k in 0..take {
                    let pick = rng.random_range(k..scratch.len());
                    scratch.swap(k, pick);
                }
                for &e in &scratch[..take] {
                    let nb = cols[e];
                    if seen[dst].insert(nb) {
                        nodes[dst].push(nb);
                        next.push((dst, nb));
                    }
                }
            }
        }
        frontier = next;
    }

    Subnetwork::induced(g, orders, nodes, seed_locals)
}

/// Split for inductive training: the first graph has every edge touching a
/// test node removed, the second is the full graph. Higher orders must be
/// composed from the first graph's own base relations.
pub fn inductive_mask(g: &HetGraph) -> (HetGraph, HetGraph) {
    let test: HashSet<usize> = g.splits().test.iter().copied().collect();
    if test.is_empty() {
        return (g.clone(), g.clone());
    }
    (g.without_target_edges(&test), g.clone())
}
