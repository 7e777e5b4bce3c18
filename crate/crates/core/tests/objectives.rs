use std::sync::Arc;

use latte::hetgraph::{synth_generate, GraphParts, HetGraph, NodeType, Relation, SparseBiadj, Splits, SynthConfig};
use latte::model::{build_relation_orders, row_softmax, LatteModel, ModelConfig, Mode};
use latte::objectives::{cross_entropy, nce_loss, total_loss, Batch, LossFlags, NegSampleConfig};
use latte::relalgebra::{MetaRelation, PruneRule};
use latte::sampler::Subnetwork;
use latte::tensor::{Tape, Tensor};
use latte::trainer::gradcheck;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> HetGraph {
    synth_generate(&SynthConfig::tiny(), 11).unwrap().add_reverse_relations()
}

fn loss_value(g: &HetGraph, layers: usize, flags: LossFlags, neg: NegSampleConfig) -> (f64, f64) {
    let orders = build_relation_orders(g, layers, None).unwrap();
    let model = LatteModel::new(g, &orders, ModelConfig::new(4, layers), 2).unwrap();
    let labeled: Vec<(usize, usize)> = g.splits().train.iter().map(|&i| (i, g.labels()[i].unwrap())).collect();
    let sub = Subnetwork::full(g, &orders);
    let mut tape = Tape::new();
    let vars = model.bind_constants(&mut tape);
    let batch = Batch { graph: g, orders: &orders, sub: &sub, labeled: &labeled, index: 3, negative_targets: None };
    let parts = total_loss(&model, &mut tape, &vars, &batch, Mode::Eval, flags, &neg).unwrap();
    (tape.value(parts.total).item(), tape.value(parts.ce).item())
}

#[test]
fn without_proximity_total_is_cross_entropy() {
    let g = tiny();
    let off = LossFlags { use_proximity: false, ce_weight: 1.0 };
    for layers in [1, 2] {
        let (total, ce) = loss_value(&g, layers, off, NegSampleConfig::default());
        assert_eq!(total, ce);
        let (other, _) = loss_value(&g, layers, off, NegSampleConfig { ratio: 1.0, seed: 77 });
        assert_eq!(total, other);
        let (with, _) = loss_value(&g, layers, LossFlags::default(), NegSampleConfig::default());
        assert!(with > total);
    }
}

#[test]
fn joint_objective_gradients_match_finite_differences() {
    for (seed, layers, prox) in [(0, 1, true), (3, 1, false), (5, 2, false), (7, 2, true)] {
        let r = gradcheck(seed, layers, prox, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed} T={layers}: {}", r.max_rel_error);
    }
}

#[test]
fn gradcheck_is_deterministic() {
    let a = gradcheck(1, 1, true, 1e-5).unwrap();
    let b = gradcheck(1, 1, true, 1e-5).unwrap();
    assert_eq!(a.max_rel_error.to_bits(), b.max_rel_error.to_bits());
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
}

#[test]
fn pruning_tiny_entries_leaves_attention_intact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 100;
    let triples: Vec<(usize, usize, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|_| rng.random::<f64>() < 0.04)
        .map(|(i, j)| (i, j, 0.1 + 0.9 * ((i * 31 + j * 17) % 97) as f64 / 97.0))
        .collect();
    let pa = SparseBiadj::from_triples(n, n, triples).unwrap();
    let mut feats = Tensor::zeros(n, 3);
    for v in feats.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let g = HetGraph::new(GraphParts {
        node_types: vec![
            NodeType { name: "P".into(), count: n, feature_dim: Some(3) },
            NodeType { name: "A".into(), count: n, feature_dim: Some(3) },
        ],
        features: vec![Some(feats.clone()), Some(feats)],
        ids: vec![],
        relations: vec![Relation { meta: MetaRelation::base("PA", "P", "A"), matrix: Arc::new(pa), directed: false }],
        target_type: 0,
        labels: (0..n).map(|i| Some(i % 2)).collect(),
        num_classes: 2,
        splits: Splits { train: (0..50).collect(), valid: vec![], test: (50..n).collect() },
    })
    .unwrap()
    .add_reverse_relations();
    let plain = build_relation_orders(&g, 2, None).unwrap();
    let pruned = build_relation_orders(&g, 2, Some(PruneRule::Epsilon(1e-6))).unwrap();
    let model = LatteModel::new(&g, &plain, ModelConfig::new(8, 2), 1).unwrap();
    model.check_orders(&pruned).unwrap();

    let alphas = |orders: &[latte::relalgebra::RelationSet]| {
        let sub = Subnetwork::full(&g, orders);
        let mut tape = Tape::new();
        let vars = model.bind_constants(&mut tape);
        let fwd = model.forward(&mut tape, &vars, &g, &sub).unwrap();
        let mut out = std::collections::BTreeMap::new();
        for (j, a) in fwd.layers[1].alpha.iter().enumerate() {
            let Some(a) = a else { continue };
            let e = &sub.edges[1][j];
            for k in 0..e.len() {
                out.insert((j, e.src[k], e.dst[k]), tape.value(*a).get(k, 0));
            }
        }
        out
    };
    let (a, b) = (alphas(&plain), alphas(&pruned));
    assert!(!a.is_empty());
    let mut worst: f64 = 0.0;
    for (key, va) in &a {
        worst = worst.max((va - b.get(key).copied().unwrap_or(0.0)).abs());
    }
    assert!(worst < 1e-4, "max |d alpha| = {worst}");
}

fn nce(pos: &[f64], neg: &[f64]) -> f64 {
    let mut t = Tape::new();
    let p = t.constant(Tensor::column(pos.to_vec()));
    let n = t.constant(Tensor::column(neg.to_vec()));
    let l = nce_loss(&mut t, p, &vec![1.0; pos.len()], Some(n)).unwrap();
    t.value(l).item()
}

proptest! {
    #[test]
    fn nce_monotone_entrywise(
        pos in proptest::collection::vec(-5.0f64..5.0, 1..8),
        neg in proptest::collection::vec(-5.0f64..5.0, 1..8),
        k in 0usize..8,
    ) {
        let base = nce(&pos, &neg);
        prop_assert!(base >= 0.0);
        let mut up = pos.clone();
        up[k % pos.len()] += 0.5;
        prop_assert!(nce(&up, &neg) < base);
        let mut upn = neg.clone();
        upn[k % neg.len()] += 0.5;
        prop_assert!(nce(&pos, &upn) > base);
    }

    #[test]
    fn row_softmax_shift_invariant(
        rows in proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, 3), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let eval = |rs: &[Vec<f64>]| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::from_rows(rs).unwrap());
            let p = row_softmax(&mut t, x).unwrap();
            t.value(p).clone()
        };
        let p = eval(&rows);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let q = eval(&shifted);
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for c in 0..p.cols() {
                prop_assert!((p.get(i, c) - q.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_non_negative(
        rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..6),
        label in 0usize..4,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&rows).unwrap());
        let p = row_softmax(&mut t, x).unwrap();
        let labels = vec![label; rows.len()];
        let (l, _) = cross_entropy(&mut t, p, &labels).unwrap();
        prop_assert!(t.value(l).item() >= 0.0);
    }
}
