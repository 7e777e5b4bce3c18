//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-8 are required and make the process exit nonzero on failure.
//! Criterion 9 needs external benchmark data under `LATTE_BENCH_DIR`
//! (subdirectories `imdb/` and `acm/` in the dataset directory format) and
//! is reported but never fails the run.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use latte::hetgraph::{
    load_dataset, synth_generate, GraphParts, HetGraph, NodeType, PlantedRule, Relation, SparseBiadj, Splits,
    SynthConfig,
};
use latte::interpret::relation_weight_summary;
use latte::model::{build_relation_orders, LatteModel, ModelConfig};
use latte::objectives::{sample_negatives, NegSampleConfig};
use latte::relalgebra::{compose, lift, MetaRelation, RelationSet};
use latte::sampler::Subnetwork;
use latte::tensor::{softplus_inverse, Tape, Tensor};
use latte::trainer::{
    epoch_batches, evaluate, gradcheck, negative_pool, roc_auc, train, training_subnetwork, training_view,
    TrainConfig, TrainMode,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: Option<bool>,
    detail: String,
}

fn report(id: &'static str, name: &'static str, pass: Option<bool>, detail: String) -> Outcome {
    let tag = match pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "NOT RUN",
    };
    println!("[{tag}] criterion {id} {name}: {detail}");
    Outcome { id, name, pass, detail }
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let r = gradcheck(1, 2, true, 1e-5).expect("gradcheck runs");
    let secs = t0.elapsed().as_secs_f64();
    report(
        "1",
        "gradient fidelity",
        Some(r.max_rel_error < 1e-4 && secs < 60.0),
        format!("max rel err {:.3e} over {} scalars (< 1e-4), {secs:.1}s (< 60s)", r.max_rel_error, r.num_scalars),
    )
}

fn random_biadj(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> SparseBiadj {
    let mut triples = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if rng.random::<f64>() < density {
                triples.push((i, j, rng.random_range(0.1..3.0)));
            }
        }
    }
    SparseBiadj::from_triples(rows, cols, triples).unwrap()
}

/// `A diag(1 / (colsum(A) + rowsum(B))) B`, evaluated densely.
fn dense_compose(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, n, p) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let deg: Vec<f64> = (0..n).map(|j| (0..m).map(|i| a[i][j]).sum::<f64>() + b[j].iter().sum::<f64>()).collect();
    let mut out = vec![vec![0.0; p]; m];
    for i in 0..m {
        for j in 0..n {
            if a[i][j] == 0.0 || deg[j] == 0.0 {
                continue;
            }
            for k in 0..p {
                out[i][k] += a[i][j] * b[j][k] / deg[j];
            }
        }
    }
    out
}

fn composition_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n, p) = (rng.random_range(1..=50), rng.random_range(1..=40), rng.random_range(1..=30));
        let density = rng.random_range(0.02..0.5);
        let a = random_biadj(&mut rng, m, n, density);
        let b = random_biadj(&mut rng, n, p, density);
        let got = compose(&a, &b).unwrap().to_dense();
        let want = dense_compose(&a.to_dense(), &b.to_dense());
        for (gr, wr) in got.iter().zip(&want) {
            for (x, y) in gr.iter().zip(wr) {
                worst = worst.max((x - y).abs());
            }
        }
    }

    let mut base = RelationSet::new(1);
    let shapes = [("PA", "P", "A", 6, 4), ("AP", "A", "P", 4, 6), ("PC", "P", "C", 6, 2), ("CP", "C", "P", 2, 6)];
    for (name, s, d, r, c) in shapes {
        base.insert(MetaRelation::base(name, s, d), Arc::new(random_biadj(&mut rng, r, c, 0.5))).unwrap();
    }
    let two = lift(&base, &base).unwrap();
    let got: HashSet<String> = two.relations().map(MetaRelation::name).collect();
    let want: HashSet<String> = ["PAP", "PCP", "APA", "APC", "CPA", "CPC"].iter().map(|s| s.to_string()).collect();
    report(
        "2",
        "composition oracle",
        Some(worst < 1e-12 && got == want && two.len() == 6),
        format!("max abs err {worst:.2e} over 100 instances (< 1e-12); lift gave {} members {:?}", two.len(), {
            let mut v: Vec<_> = got.into_iter().collect();
            v.sort();
            v
        }),
    )
}

/// Largest deviation from 1 of per-(node, relation) alpha sums and per-node beta sums.
fn normalization_error(g: &HetGraph, layers: usize, seed: u64, scale: f64) -> f64 {
    let orders = build_relation_orders(g, layers, None).unwrap();
    let mut model = LatteModel::new(g, &orders, ModelConfig::new(6, layers), seed).unwrap();
    let scaled: Vec<Tensor> = model
        .params
        .values()
        .into_iter()
        .map(|t| {
            let (r, c) = t.shape();
            Tensor::from_vec(r, c, t.data().iter().map(|v| v * scale).collect()).unwrap()
        })
        .collect();
    model.params.set_values(scaled);
    let sub = Subnetwork::full(g, &orders);
    let mut tape = Tape::new();
    let vars = model.bind_constants(&mut tape);
    let fwd = model.forward(&mut tape, &vars, g, &sub).unwrap();
    let mut worst: f64 = 0.0;
    for (l, trace) in fwd.layers.iter().enumerate() {
        for (j, alpha) in trace.alpha.iter().enumerate() {
            let Some(alpha) = alpha else { continue };
            let edges = &sub.edges[l][j];
            let mut sums = std::collections::BTreeMap::<usize, f64>::new();
            for (e, &s) in edges.src.iter().enumerate() {
                *sums.entry(s).or_default() += tape.value(*alpha).get(e, 0);
            }
            worst = sums.values().fold(worst, |w, v| w.max((v - 1.0).abs()));
        }
        for t in 0..g.num_node_types() {
            let beta = model.dense_beta(&tape, &fwd, l, t, g.count(t));
            for i in 0..g.count(t) {
                worst = worst.max((beta.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    worst
}

fn normalization_suite() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let strategy = (any::<u64>(), 0.05f64..20.0, 1usize..=2, any::<bool>(), proptest::option::of(3usize..12));
    let cases = std::cell::Cell::new(0usize);
    let result = runner.run(&strategy, |(seed, scale, layers, second, noise)| {
        cases.set(cases.get() + 1);
        let cfg = SynthConfig {
            rule: if second { PlantedRule::SecondOrder } else { PlantedRule::FirstOrder },
            noise_nodes: noise,
            ..SynthConfig::tiny()
        };
        let g = synth_generate(&cfg, seed).unwrap().add_reverse_relations();
        let err = normalization_error(&g, layers, seed, scale);
        prop_assert!(err < 1e-9, "deviation {err}");
        Ok(())
    });
    let cases = cases.get();
    let ok = result.is_ok() && cases >= 1000;
    let detail = match result {
        Ok(()) => format!("{cases} random parameterizations, all sums within 1e-9 of 1"),
        Err(e) => format!("{e}"),
    };
    report("3", "normalization", Some(ok), detail)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn temperature_property() -> Outcome {
    let g = synth_generate(&SynthConfig::with_rule(PlantedRule::FirstOrder), 4).unwrap().add_reverse_relations();
    let orders = build_relation_orders(&g, 1, None).unwrap();
    let mut model = LatteModel::new(&g, &orders, ModelConfig::new(16, 1), 4).unwrap();
    let rho = model.params.id("l1.rho.PA").expect("PA temperature");
    let sub = Subnetwork::full(&g, &orders);
    let pa = orders[0].members().iter().position(|m| m.relation.name() == "PA").unwrap();
    let grid = [0.5, 1.0, 2.0, 4.0];
    // per node: entropy at each tau
    let mut per_node: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut spread: std::collections::BTreeMap<usize, bool> = Default::default();
    for &tau in &grid {
        model.params.value_mut(rho).set(0, 0, softplus_inverse(tau));
        let mut tape = Tape::new();
        let vars = model.bind_constants(&mut tape);
        let fwd = model.forward(&mut tape, &vars, &g, &sub).unwrap();
        let edges = &sub.edges[0][pa];
        let alpha = tape.value(fwd.layers[0].alpha[pa].unwrap());
        let scores = tape.value(fwd.layers[0].scores[pa].unwrap());
        let mut start = 0;
        while start < edges.len() {
            let node = edges.src[start];
            let mut end = start;
            while end < edges.len() && edges.src[end] == node {
                end += 1;
            }
            let s: Vec<f64> = (start..end).map(|e| scores.get(e, 0)).collect();
            let non_constant = s.iter().any(|&v| (v - s[0]).abs() > 1e-9);
            spread.insert(node, non_constant);
            let a: Vec<f64> = (start..end).map(|e| alpha.get(e, 0)).collect();
            per_node.entry(node).or_default().push(entropy(&a));
            start = end;
        }
    }
    let checked: Vec<&Vec<f64>> = per_node.iter().filter(|(n, _)| spread[n]).map(|(_, h)| h).collect();
    let violations = checked.iter().filter(|h| h.windows(2).any(|w| w[1] >= w[0])).count();
    let mean: Vec<f64> = (0..grid.len()).map(|k| checked.iter().map(|h| h[k]).sum::<f64>() / checked.len() as f64).collect();
    report(
        "4",
        "temperature sharpening",
        Some(!checked.is_empty() && violations == 0),
        format!(
            "{} nodes with non-constant scores, {violations} violations; mean entropy at tau {:?} = {:?}",
            checked.len(),
            grid,
            mean.iter().map(|h| (h * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn fit_f1(g: &HetGraph, layers: usize, seed: u64) -> f64 {
    let orders = build_relation_orders(g, layers, None).unwrap();
    let mut model = LatteModel::new(g, &orders, ModelConfig::new(16, layers), seed).unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        batch_size: 256,
        patience: 15,
        epochs_max: 300,
        fanouts: vec![25, 20][..layers].to_vec(),
        use_proximity: false,
        seed,
        ..TrainConfig::default()
    };
    train(&mut model, g, &orders, &cfg).unwrap();
    evaluate(&model, g, &orders, &g.splits().test).unwrap().macro_f1
}

fn higher_order_benefit() -> Outcome {
    let t0 = Instant::now();
    let (mut one, mut two) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let g = synth_generate(&SynthConfig::with_rule(PlantedRule::SecondOrder), seed).unwrap().add_reverse_relations();
        one.push(fit_f1(&g, 1, seed));
        two.push(fit_f1(&g, 2, seed));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m1, m2) = (mean(&one), mean(&two));
    let secs = t0.elapsed().as_secs_f64();
    report(
        "5",
        "higher-order benefit",
        Some(m2 - m1 >= 0.05 && secs < 300.0),
        format!("T=2 {m2:.3} vs T=1 {m1:.3}, gap {:.3} (>= 0.05) over 5 seeds, {secs:.1}s (< 300s)", m2 - m1),
    )
}

fn proximity_effect() -> Outcome {
    let (mut aucs, mut f1s) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let cfg = SynthConfig { degree_skew: 3.0, ..SynthConfig::with_rule(PlantedRule::SecondOrder) };
        let g = synth_generate(&cfg, seed).unwrap().add_reverse_relations();
        let orders = build_relation_orders(&g, 2, None).unwrap();
        let mut model = LatteModel::new(&g, &orders, ModelConfig::new(16, 2), seed).unwrap();
        let tc = TrainConfig {
            lr: 0.01,
            batch_size: 64,
            ce_weight: 0.1,
            patience: 15,
            epochs_max: 300,
            use_proximity: true,
            mode: TrainMode::Inductive,
            seed,
            ..TrainConfig::default()
        };
        train(&mut model, &g, &orders, &tc).unwrap();
        f1s.push(evaluate(&model, &g, &orders, &g.splits().test).unwrap().macro_f1);

        // held-out edges: links of test papers, never seen in inductive training
        let j = orders[0].members().iter().position(|m| m.relation.name() == "PA").unwrap();
        let pa = &orders[0].members()[j].matrix;
        let test: HashSet<usize> = g.splits().test.iter().copied().collect();
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        for (r, c, _) in pa.triples() {
            if test.contains(&r) {
                src.push(r);
                dst.push(c);
            }
        }
        let negs = sample_negatives(pa, src.len(), &NegSampleConfig { ratio: 1.0, seed: 99 });
        let sub = Subnetwork::full(&g, &orders);
        let mut tape = Tape::new();
        let vars = model.bind_constants(&mut tape);
        let fwd = model.forward(&mut tape, &vars, &g, &sub).unwrap();
        let pos = model.score_pairs(&mut tape, &fwd, 0, j, &src, &dst).unwrap();
        let neg = model.score_pairs(&mut tape, &fwd, 0, j, &negs.src, &negs.dst).unwrap();
        aucs.push(roc_auc(tape.value(pos).data(), tape.value(neg).data()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (auc, f1) = (mean(&aucs), mean(&f1s));
    let chance = 1.0 / 3.0;
    let round = |v: &[f64]| v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>();
    report(
        "6",
        "proximity objective",
        Some(auc > 0.9 && f1 >= chance + 0.2),
        format!(
            "held-out AUC {auc:.3} (> 0.9) per seed {:?}; inductive F1 {f1:.3} (>= {:.3}) per seed {:?}",
            round(&aucs),
            chance + 0.2,
            round(&f1s)
        ),
    )
}

fn leak_freedom() -> Outcome {
    let g = synth_generate(&SynthConfig::with_rule(PlantedRule::SecondOrder), 7).unwrap().add_reverse_relations();
    let orders = build_relation_orders(&g, 2, None).unwrap();
    let cfg = TrainConfig { mode: TrainMode::Inductive, batch_size: 32, seed: 7, ..TrainConfig::default() };
    let (tg, torders) = training_view(&g, &orders, cfg.mode, cfg.prune).unwrap();
    let tt = g.target_type();
    let test: HashSet<usize> = g.splits().test.iter().copied().collect();
    let mut leaks = 0usize;
    let mut scanned = 0usize;

    for rs in &torders {
        for m in rs.members() {
            let s = tg.type_index(m.relation.source()).unwrap();
            let d = tg.type_index(m.relation.target()).unwrap();
            for (r, c, _) in m.matrix.triples() {
                scanned += 1;
                leaks += usize::from((s == tt && test.contains(&r)) || (d == tt && test.contains(&c)));
            }
        }
    }
    for (b, seeds) in epoch_batches(&g.splits().train, cfg.batch_size, cfg.seed, 1).iter().enumerate() {
        let sub = training_subnetwork(&tg, &torders, seeds, &cfg, 1, b);
        leaks += sub.nodes[tt].iter().filter(|n| test.contains(n)).count();
        for (l, per) in sub.edges.iter().enumerate() {
            for (j, e) in per.iter().enumerate() {
                let m = &torders[l].members()[j];
                let s = tg.type_index(m.relation.source()).unwrap();
                let d = tg.type_index(m.relation.target()).unwrap();
                for (&u, &v) in e.src.iter().zip(&e.dst) {
                    scanned += 1;
                    let (gu, gv) = (sub.global_id(s, u), sub.global_id(d, v));
                    leaks += usize::from((s == tt && test.contains(&gu)) || (d == tt && test.contains(&gv)));
                }
            }
        }
    }
    let pool = negative_pool(&g, cfg.mode);
    leaks += pool[tt].iter().filter(|n| test.contains(n)).count();
    report(
        "7",
        "inductive leak freedom",
        Some(leaks == 0 && scanned > 0),
        format!("{scanned} edges scanned over one epoch and the training relations, {leaks} touch test nodes"),
    )
}

fn interpretation_pipeline() -> Outcome {
    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in 0..5u64 {
        let cfg = SynthConfig { noise_nodes: Some(60), ..SynthConfig::with_rule(PlantedRule::FirstOrder) };
        let g = synth_generate(&cfg, seed).unwrap().add_reverse_relations();
        let orders = build_relation_orders(&g, 1, None).unwrap();
        let mut model = LatteModel::new(&g, &orders, ModelConfig::new(16, 1), seed).unwrap();
        let tc = TrainConfig {
            lr: 0.01,
            batch_size: 256,
            dropout: 0.6,
            patience: 40,
            epochs_max: 300,
            fanouts: vec![25],
            use_proximity: false,
            seed,
            ..TrainConfig::default()
        };
        train(&mut model, &g, &orders, &tc).unwrap();
        let stats = relation_weight_summary(&model, &g, &orders).unwrap();
        let mean = |r: &str| stats.iter().find(|w| w.layer == 1 && w.relation == r).unwrap().mean;
        let (pa, pn) = (mean("PA"), mean("PN"));
        wins += usize::from(pa > pn);
        rows.push(format!("{pa:.3}>{pn:.3}"));
    }
    report(
        "8",
        "interpretation pipeline",
        Some(wins == 5),
        format!("informative PA beats noise PN in {wins}/5 seeds (mean beta PA>PN: {})", rows.join(", ")),
    )
}

/// Parameter count of a 128-wide, 2-layer model on a graph shaped like IMDB:
/// 4780 movies with 1232 features, 5841 actors, 2269 directors. Only the
/// shape matters, so the links are arbitrary.
fn imdb_shaped_parameters(actors_attributed: bool) -> usize {
    let (nm, na, nd, f) = (4780, 5841, 2269, 1232);
    let dim = |on: bool| on.then_some(f);
    let node_types = vec![
        NodeType { name: "M".into(), count: nm, feature_dim: Some(f) },
        NodeType { name: "A".into(), count: na, feature_dim: dim(actors_attributed) },
        NodeType { name: "D".into(), count: nd, feature_dim: dim(actors_attributed) },
    ];
    let features =
        node_types.iter().map(|t| t.feature_dim.map(|d| Tensor::zeros(t.count, d))).collect::<Vec<_>>();
    let rel = |name: &str, t: &str, n: usize| Relation {
        meta: MetaRelation::base(name, "M", t),
        matrix: Arc::new(SparseBiadj::from_triples(nm, n, (0..nm).map(|i| (i, i % n, 1.0))).unwrap()),
        directed: false,
    };
    let g = HetGraph::new(GraphParts {
        node_types,
        features,
        ids: vec![],
        relations: vec![rel("MA", "A", na), rel("MD", "D", nd)],
        target_type: 0,
        labels: (0..nm).map(|i| Some(i % 3)).collect(),
        num_classes: 3,
        splits: Splits { train: (0..10).collect(), valid: vec![], test: (10..20).collect() },
    })
    .unwrap()
    .add_reverse_relations();
    let orders = build_relation_orders(&g, 2, None).unwrap();
    LatteModel::new(&g, &orders, ModelConfig::new(128, 2), 0).unwrap().num_parameters()
}

fn reproduction_tier() -> Outcome {
    let movies_only = imdb_shaped_parameters(false);
    let all_attributed = imdb_shaped_parameters(true);
    let target = 196_000.0;
    let within = |n: usize| (target / 2.0..=target * 2.0).contains(&(n as f64));
    let params = format!(
        "IMDB-shaped parameter count {movies_only} (movie features only) / {all_attributed} (all types attributed) \
         vs 196K target: {}",
        if within(movies_only) || within(all_attributed) { "within 2x" } else { "outside 2x" }
    );
    let Ok(dir) = std::env::var("LATTE_BENCH_DIR") else {
        return report("9", "reproduction tier (optional)", None, format!("LATTE_BENCH_DIR unset; {params}"));
    };
    let dir = std::path::PathBuf::from(dir);
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, target, tol) in [("imdb", 0.6363, 0.05), ("acm", 0.9153, 0.03)] {
        let path = dir.join(name);
        match load_dataset(&path) {
            Ok(g) => {
                let g = g.add_reverse_relations();
                let orders = build_relation_orders(&g, 2, None).unwrap();
                let mut model = LatteModel::new(&g, &orders, ModelConfig::new(128, 2), 0).unwrap();
                train(&mut model, &g, &orders, &TrainConfig::default()).unwrap();
                let f1 = evaluate(&model, &g, &orders, &g.splits().test).unwrap().macro_f1;
                let hit = (f1 - target).abs() <= tol;
                if name == "imdb" {
                    ok &= within(model.num_parameters());
                    parts.push(format!("imdb params {}", model.num_parameters()));
                }
                ok &= hit;
                parts.push(format!("{name} F1 {f1:.4} (target {target} +/- {tol})"));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    parts.push(params);
    report("9", "reproduction tier (optional)", Some(ok), parts.join("; "))
}

fn main() {
    let t0 = Instant::now();
    let outcomes = vec![
        gradient_fidelity(),
        composition_oracle(),
        normalization_suite(),
        temperature_property(),
        higher_order_benefit(),
        proximity_effect(),
        leak_freedom(),
        interpretation_pipeline(),
        reproduction_tier(),
    ];
    let required: Vec<&Outcome> = outcomes.iter().filter(|o| o.id != "9").collect();
    let failed: Vec<&&Outcome> = required.iter().filter(|o| o.pass != Some(true)).collect();
    println!(
        "acceptance: {}/{} required criteria passed in {:.1}s",
        required.len() - failed.len(),
        required.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        for o in failed {
            eprintln!("failed criterion {} {}: {}", o.id, o.name, o.detail);
        }
        std::process::exit(1);
    }
}
