//! Synthetic heterogeneous networks with a planted labelling rule.
//!
//! Three node types: `P` (labelled target), `A` and `S`, linked `P–A` and
//! `A–S`. One type is the *carrier*: its first `num_classes` feature columns
//! are a near one-hot encoding of a latent class. A paper's label is the
//! majority carrier class among its neighbors at the planted hop distance:
//!
//! * first order: carrier `A`, vote over `P → A` links;
//! * second order: carrier `S`, vote over `P → A → S` paths, while `A`
//!   features are pure noise.
//!
//! Column `num_classes` of every non-noise type holds an activity score
//! correlated with the node's link count. An optional `N` type attached to
//! papers by random `P–N` links carries no label information at all.

use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GraphError, GraphParts, HetGraph, NodeType, Relation, Result, Splits};
use crate::hetgraph::SparseBiadj;
use crate::relalgebra::MetaRelation;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantedRule {
    FirstOrder,
    SecondOrder,
}

impl PlantedRule {
    /// Hop distance at which labels are decided.
    pub fn hops(self) -> usize {
        match self {
            PlantedRule::FirstOrder => 1,
            PlantedRule::SecondOrder => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rule: PlantedRule,
    pub num_classes: usize,
    pub n_target: usize,
    pub n_mid: usize,
    pub n_far: usize,
    /// Width of every feature vector; must exceed `num_classes`.
    pub feature_dim: usize,
    /// Each paper links to between `min_links` and `max_links` `A` nodes.
    pub min_links: usize,
    pub max_links: usize,
    /// `S` neighbors per `A` node, all of the `A` node's latent topic.
    pub far_links: usize,
    /// Spread of the log-normal popularity used to pick link endpoints.
    pub degree_skew: f64,
    /// When set, adds this many `N` nodes and a random `P–N` relation.
    pub noise_nodes: Option<usize>,
    pub train_frac: f64,
    pub valid_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rule: PlantedRule::SecondOrder,
            num_classes: 3,
            n_target: 300,
            n_mid: 200,
            n_far: 100,
            feature_dim: 8,
            min_links: 2,
            max_links: 4,
            far_links: 2,
            degree_skew: 1.0,
            noise_nodes: None,
            train_frac: 0.4,
            valid_frac: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn with_rule(rule: PlantedRule) -> Self {
        SynthConfig {
            rule,
            ..SynthConfig::default()
        }
    }

    /// 30 nodes over three types, used for finite-difference checks.
    pub fn tiny() -> Self {
        SynthConfig {
            n_target: 12,
            n_mid: 10,
            n_far: 8,
            feature_dim: 5,
            min_links: 2,
            max_links: 3,
            far_links: 2,
            ..SynthConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let g = self.num_classes;
        let bad = |msg: String| Err(GraphError::Config(msg));
        if g < 2 {
            return bad(format!("num_classes {g} < 2"));
        }
        if self.n_target == 0 {
            return bad("n_target must be positive".into());
        }
        if self.feature_dim <= g {
            return bad(format!("feature_dim {} must exceed num_classes {g}", self.feature_dim));
        }
        if self.min_links == 0 || self.min_links > self.max_links {
            return bad(format!("link range {}..={}", self.min_links, self.max_links));
        }
        if self.n_mid / g < self.max_links {
            return bad(format!(
                "n_mid {} too small for {} links per paper across {g} topics",
                self.n_mid, self.max_links
            ));
        }
        if self.far_links == 0 || self.n_far / g < self.far_links {
            return bad(format!("n_far {} cannot supply {} links per topic", self.n_far, self.far_links));
        }
        if self.noise_nodes == Some(0) {
            return bad("noise_nodes must be positive when set".into());
        }
        if !(self.degree_skew >= 0.0) {
            return bad(format!("degree_skew {}", self.degree_skew));
        }
        let fracs_ok = (0.0..=1.0).contains(&self.train_frac)
            && (0.0..=1.0).contains(&self.valid_frac)
            && self.train_frac + self.valid_frac <= 1.0;
        if !fracs_ok {
            return bad(format!("split fractions {} / {}", self.train_frac, self.valid_frac));
        }
        Ok(())
    }
}

fn balanced_classes(n: usize, g: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| i % g).collect();
    v.shuffle(rng);
    v
}

/// Weighted sampling of `k` distinct items (exponential-key method).
fn weighted_distinct(pool: &[usize], weight: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = pool
        .iter()
        .map(|&i| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / weight[i], i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

fn one_hot_block(class: usize, g: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..g)
        .map(|c| {
            let jitter = rng.random_range(-0.3..0.3);
            if c == class {
                1.0 + jitter
            } else {
                jitter
            }
        })
        .collect()
}

fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Class read off a carrier node's features: argmax of the first `g` columns.
pub fn carrier_class(features: &Tensor, node: usize, g: usize) -> usize {
    let row = &features.row(node)[..g];
    let mut best = 0;
    for c in 1..g {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Majority class of `counts`, ties to the smaller class.
pub fn majority(counts: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..counts.len() {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

/// Generate a graph from `cfg`; identical `(cfg, seed)` give identical graphs.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<HetGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = cfg.num_classes;
    let d = cfg.feature_dim;

    let planted_labels = balanced_classes(cfg.n_target, g, &mut rng);
    let topics = balanced_classes(cfg.n_mid, g, &mut rng);
    let far_classes = balanced_classes(cfg.n_far, g, &mut rng);
    let mid_activity = noise(cfg.n_mid, &mut rng);
    let far_activity = noise(cfg.n_far, &mut rng);
    let mid_weight: Vec<f64> = mid_activity.iter().map(|a| (cfg.degree_skew * a).exp()).collect();
    let far_weight: Vec<f64> = far_activity.iter().map(|a| (cfg.degree_skew * a).exp()).collect();

    let by_topic: Vec<Vec<usize>> = (0..g)
        .map(|c| (0..cfg.n_mid).filter(|&a| topics[a] == c).collect())
        .collect();
    let far_by_class: Vec<Vec<usize>> = (0..g)
        .map(|c| (0..cfg.n_far).filter(|&s| far_classes[s] == c).collect())
        .collect();

    let mut pa = Vec::new();
    let mut link_counts = Vec::with_capacity(cfg.n_target);
    for (p, &y) in planted_labels.iter().enumerate() {
        let k = rng.random_range(cfg.min_links..=cfg.max_links);
        let agree = k / 2 + 1;
        let mut chosen = weighted_distinct(&by_topic[y], &mid_weight, agree, &mut rng);
        let others: Vec<usize> = (0..cfg.n_mid).filter(|&a| topics[a] != y).collect();
        chosen.extend(weighted_distinct(&others, &mid_weight, k - agree, &mut rng));
        link_counts.push(k);
        pa.extend(chosen.into_iter().map(|a| (p, a, 1.0)));
    }
    let mut as_edges = Vec::new();
    for (a, &z) in topics.iter().enumerate() {
        for s in weighted_distinct(&far_by_class[z], &far_weight, cfg.far_links, &mut rng) {
            as_edges.push((a, s, 1.0));
        }
    }

    let mean_k = (cfg.min_links + cfg.max_links) as f64 / 2.0;
    let mut x_p = Vec::with_capacity(cfg.n_target * d);
    for &k in &link_counts {
        x_p.extend(noise(g, &mut rng));
        x_p.push(k as f64 - mean_k);
        x_p.extend(noise(d - g - 1, &mut rng));
    }
    let typed_features = |n: usize, classes: &[usize], activity: &[f64], carrier: bool, rng: &mut ChaCha8Rng| {
        let mut x = Vec::with_capacity(n * d);
        for i in 0..n {
            if carrier {
                x.extend(one_hot_block(classes[i], g, rng));
            } else {
                x.extend(noise(g, rng));
            }
            x.push(activity[i]);
            x.extend(noise(d - g - 1, rng));
        }
        Tensor::from_vec(n, d, x).expect("sized")
    };
    let x_a = typed_features(cfg.n_mid, &topics, &mid_activity, cfg.rule == PlantedRule::FirstOrder, &mut rng);
    let x_s = typed_features(cfg.n_far, &far_classes, &far_activity, cfg.rule == PlantedRule::SecondOrder, &mut rng);

    let pa = SparseBiadj::from_triples(cfg.n_target, cfg.n_mid, pa)?;
    let as_m = SparseBiadj::from_triples(cfg.n_mid, cfg.n_far, as_edges)?;

    // labels follow the rule exactly as read back from the features
    let labels: Vec<Option<usize>> = (0..cfg.n_target)
        .map(|p| {
            let mut counts = vec![0.0; g];
            let (authors, w_pa) = pa.row(p);
            for (&a, &w) in authors.iter().zip(w_pa) {
                match cfg.rule {
                    PlantedRule::FirstOrder => counts[carrier_class(&x_a, a, g)] += w,
                    PlantedRule::SecondOrder => {
                        let (fars, w_as) = as_m.row(a);
                        for (&s, &v) in fars.iter().zip(w_as) {
                            counts[carrier_class(&x_s, s, g)] += w * v;
                        }
                    }
                }
            }
            Some(majority(&counts))
        })
        .collect();

    let mut node_types = vec![
        NodeType { name: "P".into(), count: cfg.n_target, feature_dim: Some(d) },
        NodeType { name: "A".into(), count: cfg.n_mid, feature_dim: Some(d) },
        NodeType { name: "S".into(), count: cfg.n_far, feature_dim: Some(d) },
    ];
    let mut features = vec![
        Some(Tensor::from_vec(cfg.n_target, d, x_p).expect("sized")),
        Some(x_a),
        Some(x_s),
    ];
    let mut relations = vec![
        Relation {
            meta: MetaRelation::base("PA", "P", "A"),
            matrix: Arc::new(pa),
            directed: false,
        },
        Relation {
            meta: MetaRelation::base("AS", "A", "S"),
            matrix: Arc::new(as_m),
            directed: false,
        },
    ];
    if let Some(n_noise) = cfg.noise_nodes {
        let mut pn = Vec::new();
        for p in 0..cfg.n_target {
            let k = rng.random_range(1..=3.min(n_noise));
            let pool: Vec<usize> = (0..n_noise).collect();
            for v in pool.choose_multiple(&mut rng, k) {
                pn.push((p, *v, 1.0));
            }
        }
        node_types.push(NodeType { name: "N".into(), count: n_noise, feature_dim: Some(d) });
        features.push(Some(Tensor::from_vec(n_noise, d, noise(n_noise * d, &mut rng)).expect("sized")));
        relations.push(Relation {
            meta: MetaRelation::base("PN", "P", "N"),
            matrix: Arc::new(SparseBiadj::from_triples(cfg.n_target, n_noise, pn)?),
            directed: false,
        });
    }

    let mut order: Vec<usize> = (0..cfg.n_target).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.train_frac * cfg.n_target as f64).round() as usize;
    let n_valid = ((cfg.valid_frac * cfg.n_target as f64).round() as usize).min(cfg.n_target - n_train);
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    let splits = Splits {
        train: sorted(&order[..n_train]),
        valid: sorted(&order[n_train..n_train + n_valid]),
        test: sorted(&order[n_train + n_valid..]),
    };

    HetGraph::new(GraphParts {
        node_types,
        features,
        ids: vec![],
        relations,
        target_type: 0,
        labels,
        num_classes: g,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_seed() {
        let cfg = SynthConfig::with_rule(PlantedRule::SecondOrder);
        let a = synth_generate(&cfg, 7).unwrap();
        let b = synth_generate(&cfg, 7).unwrap();
        assert_eq!(a.relations(), b.relations());
        assert_eq!(a.features(1), b.features(1));
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.splits(), b.splits());
        let c = synth_generate(&cfg, 8).unwrap();
        assert_ne!(a.relations(), c.relations());
    }

    #[test]
    fn labels_match_planted_balance() {
        let cfg = SynthConfig::default();
        let g = synth_generate(&cfg, 1).unwrap();
        let mut counts = [0usize; 3];
        for l in g.labels().iter().flatten() {
            counts[*l] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
    }

    #[test]
    fn invalid_counts_rejected() {
        let cfg = SynthConfig { n_target: 0, ..SynthConfig::default() };
        assert!(matches!(synth_generate(&cfg, 0), Err(GraphError::Config(_))));
        let cfg = SynthConfig { n_mid: 5, ..SynthConfig::default() };
        assert!(synth_generate(&cfg, 0).is_err());
        let cfg = SynthConfig { feature_dim: 3, ..SynthConfig::default() };
        assert!(synth_generate(&cfg, 0).is_err());
    }

    #[test]
    fn tiny_has_thirty_nodes() {
        let g = synth_generate(&SynthConfig::tiny(), 3).unwrap();
        assert_eq!(g.num_nodes(), 30);
        assert_eq!(g.num_node_types(), 3);
        assert_eq!(g.relations().len(), 2);
    }

    #[test]
    fn noise_relation_added() {
        let cfg = SynthConfig {
            noise_nodes: Some(50),
            ..SynthConfig::with_rule(PlantedRule::FirstOrder)
        };
        let g = synth_generate(&cfg, 2).unwrap();
        assert_eq!(g.type_name(3), "N");
        assert_eq!(g.relations()[2].meta.name(), "PN");
    }
}
