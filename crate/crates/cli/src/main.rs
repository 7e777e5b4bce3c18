//! `latte` command-line entry point.

// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use latte::hetgraph::{load_dataset, save_dataset, synth_generate, HetGraph, PlantedRule, SynthConfig};
use latte::interpret;
use latte::model::{build_relation_orders, LatteModel, ModelConfig, ModelError};
use latte::relalgebra::{PruneRule, RelationSet};
use latte::tensor::TensorError;
use latte::trainer::{self, evaluate, TrainConfig, TrainError, TrainMode};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "latte", version, about = "Layer-stacked attention embeddings for heterogeneous networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset directory and print its shape.
    Ingest {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic dataset with a planted labelling rule.
    Synth(SynthArgs),
    /// Dump every composed relation of one order.
    Compose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        /// Drop composed entries below this weight.
        #[arg(long)]
        prune_eps: Option<f64>,
    },
    /// Train a model; writes manifest.json, checkpoint.json and train_log.csv.
    Train(TrainArgs),
    /// Print test-split metrics as JSON.
    Eval(EvalArgs),
    /// Write relation-weight summaries and weight/degree correlations.
    Interpret {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
        /// Count links instead of summing their weights.
        #[arg(long)]
        unweighted_degree: bool,
        #[arg(long)]
        prune_eps: Option<f64>,
    },
    /// Finite-difference check of the full objective on a 30-node graph.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long)]
        no_proximity: bool,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    First,
    Second,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "second")]
    rule: Rule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    targets: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    degree_skew: f64,
    /// Add this many label-independent `N` nodes.
    #[arg(long)]
    noise_nodes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Transductive,
    Inductive,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 2048)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0.3)]
    dropout: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 5.0)]
    neg_ratio: f64,
    #[arg(long, value_delimiter = ',', default_value = "25,20")]
    fanouts: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, value_enum, default_value = "transductive")]
    mode: ModeArg,
    #[arg(long)]
    no_proximity: bool,
    #[arg(long, default_value_t = 1.0)]
    ce_weight: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    prune_eps: Option<f64>,
    /// Scale raw feature rows to unit length.
    #[arg(long)]
    normalize_features: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained model; without it a freshly initialized model is evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    prune_eps: Option<f64>,
}

/// A failed command and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let numerical = error.chain().any(|c| {
            matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. }))
                || matches!(c.downcast_ref::<TensorError>(), Some(TensorError::NonFinite(_)))
                || matches!(c.downcast_ref::<ModelError>(), Some(ModelError::Tensor(TensorError::NonFinite(_))))
        });
        Failure { code: if numerical { EXIT_NUMERICAL } else { EXIT_VALIDATION }, error }
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    dataset: String,
    dataset_sha256: String,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    seeds: Seeds,
    artifacts: Artifacts,
}

#[derive(Serialize)]
struct Seeds {
    init: u64,
    train: u64,
}

#[derive(Serialize)]
struct Artifacts {
    manifest: String,
    checkpoint: String,
    train_log: String,
}

#[derive(Serialize)]
struct EvalOutput {
    macro_f1: f64,
    per_class: Vec<trainer::ClassMetrics>,
    n_test: usize,
}

/// SHA-256 over the names and contents of the regular files in `dir`, sorted by name.
fn dataset_fingerprint(dir: &Path) -> anyhow::Result<String> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().unwrap_or_default().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
        h.update([0]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn load(dir: &Path) -> anyhow::Result<HetGraph> {
    let g = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(g.add_reverse_relations())
}

fn prune_rule(eps: Option<f64>) -> Option<PruneRule> {
    eps.map(PruneRule::Epsilon)
}

fn orders_for(g: &HetGraph, layers: usize, eps: Option<f64>) -> anyhow::Result<Vec<RelationSet>> {
    Ok(build_relation_orders(g, layers, prune_rule(eps))?)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn ingest(data: &Path) -> CmdResult {
    let g = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    println!("dataset {} ok", data.display());
    for t in g.node_types() {
        let feats = t.feature_dim.map_or("unattributed".to_string(), |d| format!("{d} features"));
        println!("  type {}: {} nodes, {feats}", t.name, t.count);
    }
    for r in g.relations() {
        println!("  relation {}: {} links", r.meta.name(), r.matrix.nnz());
    }
    let s = g.splits();
    println!(
        "  target {} with {} classes; split {}/{}/{}",
        g.type_name(g.target_type()),
        g.num_classes(),
        s.train.len(),
        s.valid.len(),
        s.test.len()
    );
    Ok(())
}

fn synth(a: &SynthArgs) -> CmdResult {
    let rule = match a.rule {
        Rule::First => PlantedRule::FirstOrder,
        Rule::Second => PlantedRule::SecondOrder,
    };
    let cfg = SynthConfig {
        n_target: a.targets,
        num_classes: a.classes,
        degree_skew: a.degree_skew,
        noise_nodes: a.noise_nodes,
        ..SynthConfig::with_rule(rule)
    };
    let g = synth_generate(&cfg, a.seed)?;
    save_dataset(&g, &a.out)?;
    println!("wrote {} nodes to {}", g.num_nodes(), a.out.display());
    Ok(())
}

fn compose_cmd(data: &Path, order: usize, out: &Path, eps: Option<f64>) -> CmdResult {
    if order == 0 {
        return Err(anyhow!("--order must be at least 1").into());
    }
    let g = load(data)?;
    let orders = orders_for(&g, order, eps)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut summary = String::from("name\tnnz\tdensity\n");
    for m in orders[order - 1].members() {
        let s = g.type_index(m.relation.source()).expect("known type");
        let d = g.type_index(m.relation.target()).expect("known type");
        let mut text = String::new();
        for (r, c, w) in m.matrix.triples() {
            let _ = writeln!(text, "{}\t{}\t{w}", g.ids(s)[r], g.ids(d)[c]);
        }
        let name = m.relation.name();
        let path = out.join(format!("edges_{name}.tsv"));
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        let _ = writeln!(summary, "{name}\t{}\t{}", m.matrix.nnz(), m.matrix.density());
    }
    fs::write(out.join("summary.tsv"), &summary).context("writing summary.tsv")?;
    print!("{summary}");
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> CmdResult {
    let g = load(&a.data)?;
    let model_cfg = ModelConfig {
        dropout: a.dropout,
        normalize_features: a.normalize_features,
        ..ModelConfig::new(a.dim, a.layers)
    };
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch,
        patience: a.patience,
        weight_decay: a.weight_decay,
        dropout: a.dropout,
        epochs_max: a.epochs,
        mode: match a.mode {
            ModeArg::Transductive => TrainMode::Transductive,
            ModeArg::Inductive => TrainMode::Inductive,
        },
        use_proximity: !a.no_proximity,
        ce_weight: a.ce_weight,
        neg_ratio: a.neg_ratio,
        fanouts: a.fanouts.clone(),
        seed: a.seed,
        prune: prune_rule(a.prune_eps),
    };
    cfg.validate(a.layers)?;
    let orders = orders_for(&g, a.layers, a.prune_eps)?;
    let mut model = LatteModel::new(&g, &orders, model_cfg.clone(), a.seed)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let path = |name: &str| a.out.join(name);
    let manifest = RunManifest {
        command: "train",
        dataset: a.data.display().to_string(),
        dataset_sha256: dataset_fingerprint(&a.data)?,
        model: &model_cfg,
        train: &cfg,
        seeds: Seeds { init: a.seed, train: a.seed },
        artifacts: Artifacts {
            manifest: path("manifest.json").display().to_string(),
            checkpoint: path("checkpoint.json").display().to_string(),
            train_log: path("train_log.csv").display().to_string(),
        },
    };
    write_json(&path("manifest.json"), &manifest)?;

    log::info!("{} parameters", model.num_parameters());
    let history = trainer::train(&mut model, &g, &orders, &cfg)?;
    history.write_csv(&path("train_log.csv"))?;
    model.save(&path("checkpoint.json"))?;
    if history.negative_shortfall {
        log::warn!("negative sampling fell short of the requested ratio for some relation");
    }
    if history.probability_clamped {
        log::warn!("a predicted probability was clamped before taking its log");
    }
    let best = &history.epochs[history.best_epoch.max(1) - 1];
    println!(
        "trained {} epochs (best {}, val loss {:.5}, val macro-F1 {:.4}); artifacts in {}",
        history.epochs.len(),
        history.best_epoch,
        best.val_loss,
        best.val_macro_f1,
        a.out.display()
    );
    Ok(())
}

fn model_for(g: &HetGraph, orders: &[RelationSet], a: &EvalArgs) -> anyhow::Result<LatteModel> {
    match &a.checkpoint {
        Some(p) => {
            let m = LatteModel::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            m.check_orders(orders)?;
            Ok(m)
        }
        None => Ok(LatteModel::new(g, orders, ModelConfig::new(a.dim, a.layers), a.seed)?),
    }
}

fn eval_cmd(a: &EvalArgs) -> CmdResult {
    let g = load(&a.data)?;
    let layers = match &a.checkpoint {
        Some(p) => LatteModel::load(p)?.num_layers(),
        None => a.layers,
    };
    let orders = orders_for(&g, layers, a.prune_eps)?;
    let model = model_for(&g, &orders, a)?;
    let m = evaluate(&model, &g, &orders, &g.splits().test)?;
    let out = EvalOutput { macro_f1: m.macro_f1, per_class: m.per_class, n_test: m.n };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn interpret_cmd(data: &Path, checkpoint: &Path, out: &Path, svg: bool, unweighted: bool, eps: Option<f64>) -> CmdResult {
    let g = load(data)?;
    let model = LatteModel::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let orders = orders_for(&g, model.num_layers(), eps)?;
    let r = interpret::report(&model, &g, &orders, !unweighted)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    interpret::write_report(&r, out, svg)?;
    print!("{}", interpret::summary_csv(&r.weights));
    Ok(())
}

fn gradcheck_cmd(seed: u64, layers: usize, no_proximity: bool, eps: f64, tol: f64) -> CmdResult {
    let r = trainer::gradcheck(seed, layers, !no_proximity, eps)?;
    println!("{}", serde_json::to_string(&r)?);
    if !(r.max_rel_error < tol) {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            error: anyhow!("max relative error {:e} exceeds {tol:e}", r.max_rel_error),
        });
    }
    Ok(())
}

fn configure_threads() {
    let Ok(v) = std::env::var("LATTE_THREADS") else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("LATTE_THREADS ignored: {e}");
            }
        }
        _ => log::warn!("LATTE_THREADS={v:?} is not a positive integer; ignored"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { 0 });
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::Ingest { data } => ingest(data),
        Command::Synth(a) => synth(a),
        Command::Compose { data, order, out, prune_eps } => compose_cmd(data, *order, out, *prune_eps),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Interpret { data, checkpoint, out, svg, unweighted_degree, prune_eps } => {
            interpret_cmd(data, checkpoint, out, *svg, *unweighted_degree, *prune_eps)
        }
        Command::Gradcheck { seed, layers, no_proximity, eps, tol } => {
            gradcheck_cmd(*seed, *layers, *no_proximity, *eps, *tol)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
