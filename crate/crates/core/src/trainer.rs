//! Optimization loop, early stopping, and classification metrics.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hetgraph::HetGraph;
use crate::model::{build_relation_orders, LatteModel, ModelError, Mode, ParamStore};
use crate::objectives::{total_loss, Batch, LossFlags, NegSampleConfig};
use crate::relalgebra::{PruneRule, RelationSet};
use crate::sampler::{inductive_mask, sample_batch, Subnetwork};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} at epoch {epoch}: {detail}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        detail: String,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Transductive,
    Inductive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs_max: usize,
    pub mode: TrainMode,
    pub use_proximity: bool,
    pub ce_weight: f64,
    pub neg_ratio: f64,
    /// One per layer.
    pub fanouts: Vec<usize>,
    pub seed: u64,
    /// Pruning applied when relation orders are recomposed for inductive training.
    pub prune: Option<PruneRule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 2048,
            patience: 10,
            weight_decay: 0.01,
            dropout: 0.3,
            epochs_max: 200,
            mode: TrainMode::Transductive,
            use_proximity: true,
            ce_weight: 1.0,
            neg_ratio: 5.0,
            fanouts: vec![25, 20],
            seed: 0,
            prune: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return bad("batch size and patience must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {}", self.dropout));
        }
        if !(self.weight_decay >= 0.0) || !(self.neg_ratio >= 0.0) {
            return bad("weight decay and negative ratio must be non-negative".into());
        }
        if self.fanouts.len() != layers {
            return bad(format!("{} fanouts for {layers} layers", self.fanouts.len()));
        }
        if self.fanouts.contains(&0) {
            return bad("fanouts must be positive".into());
        }
        Ok(())
    }
}

/// Adaptive moment estimation with decoupled weight decay on weights and
/// embedding tables only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One update; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (id, grad) in grads.iter().enumerate() {
            let decay = if params.get(id).kind.decays() { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[id].data_mut(), self.v[id].data_mut());
            let p = params.value_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad.as_ref().map_or(0.0, |g| g.data()[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                p[k] -= self.lr * (update + decay * p[k]);
            }
        }
    }
}

/// Patience-based stopping on a loss that should decrease, keeping a copy of
/// the best parameters.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
    snapshot: Option<Vec<Tensor>>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, stale: 0, snapshot: None }
    }

    /// Record the loss of `epoch` (1-based); returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, params: &ParamStore) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            self.snapshot = Some(params.values());
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    /// Put the best parameters back; false if nothing was recorded.
    pub fn restore(&self, params: &mut ParamStore) -> bool {
        match &self.snapshot {
            Some(values) => {
                params.set_values(values.clone());
                true
            }
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub n: usize,
}

/// Per-class precision, recall and F1; undefined ratios count as 0.
pub fn class_metrics(pred: &[usize], truth: &[usize], num_classes: usize) -> Vec<ClassMetrics> {
    assert_eq!(pred.len(), truth.len());
    let mut tp = vec![0usize; num_classes];
    let mut pred_n = vec![0usize; num_classes];
    let mut true_n = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        pred_n[p] += 1;
        true_n[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (0..num_classes)
        .map(|c| {
            let precision = ratio(tp[c], pred_n[c]);
            let recall = ratio(tp[c], true_n[c]);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { precision, recall, f1, support: true_n[c] }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over all `num_classes` classes.
pub fn macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    let per = class_metrics(pred, truth, num_classes);
    per.iter().map(|c| c.f1).sum::<f64>() / num_classes as f64
}

/// Probability that a random positive outscores a random negative (ties count half).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn labeled(g: &HetGraph, ids: &[usize]) -> Result<Vec<(usize, usize)>> {
    ids.iter()
        .map(|&i| {
            g.labels()[i]
                .map(|y| (i, y))
                .ok_or_else(|| TrainError::Data(format!("node {i} in a split has no label")))
        })
        .collect()
}

/// Predicted classes and metrics on `split`, inference mode, full graph.
pub fn evaluate(model: &LatteModel, g: &HetGraph, orders: &[RelationSet], split: &[usize]) -> Result<Metrics> {
    if split.is_empty() {
        return Err(TrainError::Data("cannot evaluate an empty split".into()));
    }
    let probs = model.predict_proba(g, orders)?;
    metrics_from_probs(&probs, &labeled(g, split)?, g.num_classes())
}

fn metrics_from_probs(probs: &Tensor, items: &[(usize, usize)], num_classes: usize) -> Result<Metrics> {
    let pred: Vec<usize> = items.iter().map(|&(i, _)| argmax(probs.row(i))).collect();
    let truth: Vec<usize> = items.iter().map(|&(_, y)| y).collect();
    let per_class = class_metrics(&pred, &truth, num_classes);
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / num_classes as f64;
    Ok(Metrics { macro_f1, per_class, n: items.len() })
}

/// The joint objective with `split` as the labeled set, plus metrics on
/// `split`; inference mode, full graph, fixed negatives.
fn validate(
    model: &LatteModel,
    g: &HetGraph,
    orders: &[RelationSet],
    split: &[usize],
    flags: LossFlags,
    neg: &NegSampleConfig,
    pool: &[Vec<usize>],
) -> Result<(f64, Metrics)> {
    let items = labeled(g, split)?;
    let sub = Subnetwork::full(g, orders);
    let mut tape = Tape::new();
    let vars = model.bind_constants(&mut tape);
    let batch = Batch {
        graph: g,
        orders,
        sub: &sub,
        labeled: &items,
        index: u64::MAX,
        negative_targets: Some(pool),
    };
    let parts = total_loss(model, &mut tape, &vars, &batch, Mode::Eval, flags, neg)?;
    let loss = tape.value(parts.total).item();
    let probs = model.predict_proba(g, orders)?;
    Ok((loss, metrics_from_probs(&probs, &items, g.num_classes())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: f64,
    /// Mean proximity loss per relation over the epoch's batches, `None` when never evaluated.
    pub proximity: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub relation_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub negative_shortfall: bool,
    pub probability_clamped: bool,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |source| TrainError::Io { path: path.display().to_string(), source };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let mut header = vec!["epoch".to_string(), "train_loss".into(), "val_loss".into(), "val_macro_f1".into()];
        header.extend(self.relation_names.iter().map(|n| format!("prox_{n}")));
        writeln!(f, "{}", header.join(",")).map_err(io)?;
        for r in &self.epochs {
            let mut cells = vec![
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.val_macro_f1.to_string(),
            ];
            cells.extend(r.proximity.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            writeln!(f, "{}", cells.join(",")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Graph and relation orders used during training under `mode`.
pub fn training_view(
    g: &HetGraph,
    orders: &[RelationSet],
    mode: TrainMode,
    prune: Option<PruneRule>,
) -> Result<(HetGraph, Vec<RelationSet>)> {
    match mode {
        TrainMode::Transductive => Ok((g.clone(), orders.to_vec())),
        TrainMode::Inductive => {
            let (train_g, _) = inductive_mask(g);
            let recomposed = build_relation_orders(&train_g, orders.len(), prune)?;
            Ok((train_g, recomposed))
        }
    }
}

/// Every node per type, minus test nodes of the target type when training inductively.
pub fn negative_pool(g: &HetGraph, mode: TrainMode) -> Vec<Vec<usize>> {
    let hidden: std::collections::HashSet<usize> = match mode {
        TrainMode::Inductive => g.splits().test.iter().copied().collect(),
        TrainMode::Transductive => Default::default(),
    };
    (0..g.num_node_types())
        .map(|t| {
            (0..g.count(t))
                .filter(|i| t != g.target_type() || !hidden.contains(i))
                .collect()
        })
        .collect()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ b.rotate_left(29)
}

/// Seed batches, in epoch order, for every epoch; exposed for leak checks.
pub fn epoch_batches(train_ids: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut ids = train_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 0));
    ids.shuffle(&mut rng);
    ids.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Subnetwork for batch `b` of `epoch`, exactly as training builds it.
pub fn training_subnetwork(
    g: &HetGraph,
    orders: &[RelationSet],
    seeds: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    b: usize,
) -> Subnetwork {
    sample_batch(g, orders, seeds, &cfg.fanouts, mix(cfg.seed, epoch as u64, b as u64 + 1))
}

/// Train in place; parameters end at the best-validation epoch.
pub fn train(model: &mut LatteModel, g: &HetGraph, orders: &[RelationSet], cfg: &TrainConfig) -> Result<History> {
    cfg.validate(model.num_layers())?;
    model.check_orders(orders)?;
    model.set_dropout(cfg.dropout)?;
    if g.splits().train.is_empty() {
        return Err(TrainError::Data("training split is empty".into()));
    }
    let (train_g, train_orders) = training_view(g, orders, cfg.mode, cfg.prune)?;
    model.check_orders(&train_orders)?;
    let train_items = labeled(&train_g, &g.splits().train)?;
    let valid = g.splits().valid.clone();

    let relation_names: Vec<String> = orders.iter().flat_map(|rs| rs.relations().map(|r| r.name())).collect();
    let flags = LossFlags { use_proximity: cfg.use_proximity, ce_weight: cfg.ce_weight };
    let mut opt = AdamW::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = History {
        relation_names: relation_names.clone(),
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        negative_shortfall: false,
        probability_clamped: false,
    };
    let train_ids: Vec<usize> = train_items.iter().map(|&(i, _)| i).collect();
    let pool = negative_pool(g, cfg.mode);

    for epoch in 1..=cfg.epochs_max {
        let batches = epoch_batches(&train_ids, cfg.batch_size, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut prox_sum = vec![0.0; relation_names.len()];
        let mut prox_n = vec![0usize; relation_names.len()];
        for (b, seeds) in batches.iter().enumerate() {
            let sub = training_subnetwork(&train_g, &train_orders, seeds, cfg, epoch, b);
            let tt = model.target_type();
            let items: Vec<(usize, usize)> = sub
                .seeds
                .iter()
                .map(|&l| (l, train_g.labels()[sub.global_id(tt, l)].expect("train nodes are labeled")))
                .collect();
            let batch = Batch {
                graph: &train_g,
                orders: &train_orders,
                sub: &sub,
                labeled: &items,
                index: ((epoch as u64) << 32) | b as u64,
                negative_targets: Some(&pool),
            };
            let neg = NegSampleConfig { ratio: cfg.neg_ratio, seed: cfg.seed };
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let mode = Mode::Train { dropout_seed: mix(cfg.seed, epoch as u64, !(b as u64)) };
            let parts = total_loss(model, &mut tape, &vars, &batch, mode, flags, &neg)?;
            let loss = tape.value(parts.total).item();
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { what: "training loss", epoch, detail: format!("batch {b}: {loss}") });
            }
            history.negative_shortfall |= parts.shortfall;
            history.probability_clamped |= parts.clamped;
            for (k, v) in parts.proximity.iter().flatten().enumerate() {
                if let Some(v) = v {
                    prox_sum[k] += v;
                    prox_n[k] += 1;
                }
            }
            let mut grads = tape.backward(parts.total).map_err(ModelError::from)?;
            let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { what: "gradient", epoch, detail: format!("batch {b}") });
            }
            opt.step(&mut model.params, &grads);
            loss_sum += loss;
        }
        let train_loss = loss_sum / batches.len() as f64;
        let (val_loss, val_f1) = if valid.is_empty() {
            (train_loss, f64::NAN)
        } else {
            let neg = NegSampleConfig { ratio: cfg.neg_ratio, seed: cfg.seed };
            let (l, m) = validate(model, &train_g, &train_orders, &valid, flags, &neg, &pool)?;
            (l, m.macro_f1)
        };
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { what: "validation loss", epoch, detail: val_loss.to_string() });
        }
        let proximity = prox_sum
            .iter()
            .zip(&prox_n)
            .map(|(s, &n)| (n > 0).then(|| s / n as f64))
            .collect();
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, val_macro_f1: val_f1, proximity });
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} f1 {val_f1:.4}");
        if stopper.observe(epoch, val_loss, &model.params) {
            history.stopped_early = true;
            break;
        }
    }
    stopper.restore(&mut model.params);
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub num_scalars: usize,
    pub loss: f64,
}

/// Central-difference check of the full joint objective on the 30-node
/// synthetic graph: every parameter, inference mode, training labels,
/// negatives drawn from the global pool.
pub fn gradcheck(seed: u64, layers: usize, use_proximity: bool, eps: f64) -> Result<GradCheckReport> {
    use crate::hetgraph::{synth_generate, SynthConfig};
    let g = synth_generate(&SynthConfig::tiny(), seed)
        .map_err(|e| TrainError::Data(e.to_string()))?
        .add_reverse_relations();
    let orders = build_relation_orders(&g, layers, None)?;
    let model = LatteModel::new(&g, &orders, crate::model::ModelConfig::new(4, layers), seed)?;
    let items = labeled(&g, &g.splits().train)?;
    let sub = Subnetwork::full(&g, &orders);
    let pool = negative_pool(&g, TrainMode::Transductive);
    let flags = LossFlags { use_proximity, ce_weight: 1.0 };
    let neg = NegSampleConfig { ratio: 2.0, seed };
    let batch = Batch {
        graph: &g,
        orders: &orders,
        sub: &sub,
        labeled: &items,
        index: 0,
        negative_targets: Some(&pool),
    };
    let f = |tape: &mut Tape, vars: &[crate::tensor::Var]| {
        total_loss(&model, tape, vars, &batch, Mode::Eval, flags, &neg)
            .map(|p| p.total)
            .map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => crate::tensor::TensorError::Invalid(other.to_string()),
            })
    };
    let values = model.params.values();
    let max_rel_error = crate::tensor::grad_check(f, &values, eps).map_err(ModelError::from)?;
    let mut tape = Tape::new();
    let vars = model.bind_constants(&mut tape);
    let total = total_loss(&model, &mut tape, &vars, &batch, Mode::Eval, flags, &neg)?.total;
    let loss = tape.value(total).item();
    Ok(GradCheckReport { max_rel_error, num_scalars: model.params.num_scalars(), loss })
}
