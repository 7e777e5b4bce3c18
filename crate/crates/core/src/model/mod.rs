//! The layer-stacked attention model: per-relation attention over composed
//! meta relations, per-node relation weighing, and layer-wise concatenation.

mod checkpoint;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{glorot, Param, ParamKind, ParamStore};

use crate::hetgraph::HetGraph;
use crate::relalgebra::{prune, relation_orders, MetaRelation, PruneRule, RelError, RelationSet};
use crate::sampler::Subnetwork;
use crate::tensor::{softplus_inverse, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Relation(#[from] RelError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("structure mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width F of every layer.
    pub dim: usize,
    /// Number of layers T, one per relation order.
    pub layers: usize,
    /// Dropout on the concatenated embedding, training only.
    pub dropout: f64,
    pub activation: Activation,
    /// Hidden width of the classifier.
    pub hidden: usize,
    /// Scale every raw feature row to unit L2 norm before use.
    #[serde(default)]
    pub normalize_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(128, 2)
    }
}

impl ModelConfig {
    pub fn new(dim: usize, layers: usize) -> Self {
        ModelConfig {
            dim,
            layers,
            dropout: 0.3,
            activation: Activation::Relu,
            hidden: dim,
            normalize_features: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.layers == 0 || self.hidden == 0 {
            return Err(ModelError::Config("dim, layers and hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Relation sets of orders `1..=layers`, composed from the graph's base
/// relations. `rule` prunes every composed order (never the first).
pub fn build_relation_orders(g: &HetGraph, layers: usize, rule: Option<PruneRule>) -> Result<Vec<RelationSet>> {
    let mut orders = relation_orders(&g.base_relations(), layers)?;
    if let Some(rule) = rule {
        for rs in orders.iter_mut().skip(1) {
            let mut pruned = RelationSet::new(rs.order());
            for m in rs.members() {
                pruned.insert(m.relation.clone(), std::sync::Arc::new(prune(&m.matrix, rule)?))?;
            }
            *rs = pruned;
        }
    }
    Ok(orders)
}

#[derive(Debug, Clone, PartialEq)]
struct MemberSlot {
    relation: MetaRelation,
    src: usize,
    dst: usize,
    q: usize,
    rho: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct TypeSlot {
    u: usize,
    v: Option<usize>,
    /// (W, b), absent when the type has no outgoing relation at this order.
    w: Option<(usize, usize)>,
    members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    members: Vec<MemberSlot>,
    types: Vec<TypeSlot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatteModel {
    config: ModelConfig,
    type_names: Vec<String>,
    input_dims: Vec<usize>,
    attributed: Vec<bool>,
    counts: Vec<usize>,
    target_type: usize,
    num_classes: usize,
    layers: Vec<LayerSlots>,
    embeddings: Vec<Option<usize>>,
    classifier: [usize; 4],
    pub params: ParamStore,
}

/// Everything one layer computed, kept for the proximity loss and for
/// interpretation. Indexed by node type or by member of the layer's order.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `U h` per node type.
    pub src: Vec<Var>,
    /// `V x` per node type that is a target at this order.
    pub tgt: Vec<Option<Var>>,
    pub q: Vec<Var>,
    pub tau: Vec<Var>,
    /// Per-edge scores (E x 1), `None` when the relation has no edges here.
    pub scores: Vec<Option<Var>>,
    pub alpha: Vec<Option<Var>>,
    /// Relation weights per node type as a column of valid entries.
    pub beta: Vec<Var>,
    /// `(node, choice)` for every entry of `beta`; choice 0 is self.
    pub beta_index: Vec<Vec<(usize, usize)>>,
    /// Layer output per node type.
    pub output: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub inputs: Vec<Var>,
    pub layers: Vec<LayerTrace>,
}

impl LatteModel {
    /// Fresh model for `g` over the given relation orders.
    pub fn new(g: &HetGraph, orders: &[RelationSet], config: ModelConfig, seed: u64) -> Result<Self> {
        let names: Vec<String> = g.node_types().iter().map(|t| t.name.clone()).collect();
        let attributed: Vec<bool> = (0..names.len()).map(|t| g.is_attributed(t)).collect();
        let dims = g
            .node_types()
            .iter()
            .map(|t| t.feature_dim.unwrap_or(config.dim))
            .collect();
        let counts = g.node_types().iter().map(|t| t.count).collect();
        let relations = orders.iter().map(|rs| rs.relations().cloned().collect()).collect();
        Self::assemble(
            config,
            names,
            dims,
            attributed,
            counts,
            g.target_type(),
            g.num_classes(),
            relations,
            seed,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: ModelConfig,
        type_names: Vec<String>,
        input_dims: Vec<usize>,
        attributed: Vec<bool>,
        counts: Vec<usize>,
        target_type: usize,
        num_classes: usize,
        relations: Vec<Vec<MetaRelation>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if relations.len() != config.layers {
            return Err(ModelError::Config(format!(
                "{} relation orders for {} layers",
                relations.len(),
                config.layers
            )));
        }
        if num_classes < 2 {
            return Err(ModelError::Config("need at least two classes".into()));
        }
        let type_of = |name: &str| {
            type_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| ModelError::Config(format!("relation uses unknown node type {name}")))
        };
        let f = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let rho0 = softplus_inverse(1.0);

        let embeddings = (0..type_names.len())
            .map(|t| {
                (!attributed[t]).then(|| {
                    params.insert(
                        format!("emb.{}", type_names[t]),
                        ParamKind::Embedding,
                        glorot(counts[t], f, &mut rng),
                    )
                })
            })
            .collect();

        let mut layers = Vec::with_capacity(config.layers);
        for (l, rels) in relations.iter().enumerate() {
            let tag = l + 1;
            let mut members = Vec::with_capacity(rels.len());
            for r in rels {
                if r.order() != tag {
                    return Err(ModelError::Config(format!("{} is not of order {tag}", r.name())));
                }
                let name = r.name();
                let q = params.insert(format!("l{tag}.q.{name}"), ParamKind::Weight, glorot(2 * f, 1, &mut rng));
                let rho = params.insert(
                    format!("l{tag}.rho.{name}"),
                    ParamKind::Temperature,
                    Tensor::scalar(rho0),
                );
                members.push(MemberSlot {
                    relation: r.clone(),
                    src: type_of(r.source())?,
                    dst: type_of(r.target())?,
                    q,
                    rho,
                });
            }
            let mut types = Vec::with_capacity(type_names.len());
            for (t, tname) in type_names.iter().enumerate() {
                let in_dim = if l == 0 { input_dims[t] } else { f };
                let u = params.insert(format!("l{tag}.U.{tname}"), ParamKind::Weight, glorot(f, in_dim, &mut rng));
                let v = members.iter().any(|m| m.dst == t).then(|| {
                    params.insert(
                        format!("l{tag}.V.{tname}"),
                        ParamKind::Weight,
                        glorot(f, input_dims[t], &mut rng),
                    )
                });
                let mine: Vec<usize> = (0..members.len()).filter(|&j| members[j].src == t).collect();
                let w = (!mine.is_empty()).then(|| {
                    let k = mine.len() + 1;
                    (
                        params.insert(format!("l{tag}.W.{tname}"), ParamKind::Weight, glorot(k, in_dim, &mut rng)),
                        params.insert(format!("l{tag}.b.{tname}"), ParamKind::Bias, Tensor::zeros(1, k)),
                    )
                });
                types.push(TypeSlot { u, v, w, members: mine });
            }
            layers.push(LayerSlots { members, types });
        }

        let tf = config.layers * f;
        let classifier = [
            params.insert("cls.W1", ParamKind::Weight, glorot(config.hidden, tf, &mut rng)),
            params.insert("cls.b1", ParamKind::Bias, Tensor::zeros(1, config.hidden)),
            params.insert("cls.W2", ParamKind::Weight, glorot(num_classes, config.hidden, &mut rng)),
            params.insert("cls.b2", ParamKind::Bias, Tensor::zeros(1, num_classes)),
        ];

        Ok(LatteModel {
            config,
            type_names,
            input_dims,
            attributed,
            counts,
            target_type,
            num_classes,
            layers,
            embeddings,
            classifier,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(ModelError::Config(format!("dropout {p} outside [0, 1)")));
        }
        self.config.dropout = p;
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.config.layers
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn embedding_width(&self) -> usize {
        self.config.layers * self.config.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn target_type(&self) -> usize {
        self.target_type
    }

    pub fn type_names(&self) -> &[String] {
        &self.type_names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Relations of layer `l` (0-based), in member order.
    pub fn relations(&self, l: usize) -> Vec<&MetaRelation> {
        self.layers[l].members.iter().map(|m| &m.relation).collect()
    }

    /// Member indices of layer `l` whose source type is `t`; choice `c >= 1`
    /// of that type's relation weights refers to member `members_from(l, t)[c - 1]`.
    pub fn members_from(&self, l: usize, t: usize) -> &[usize] {
        &self.layers[l].types[t].members
    }

    /// Source and target type of member `j` of layer `l`.
    pub fn member_types(&self, l: usize, j: usize) -> (usize, usize) {
        let m = &self.layers[l].members[j];
        (m.src, m.dst)
    }

    /// Current temperature of member `j` in layer `l`.
    pub fn temperature(&self, l: usize, j: usize) -> f64 {
        crate::tensor::softplus(self.params.get(self.layers[l].members[j].rho).value.item())
    }

    /// Check that `orders` has exactly the relations this model was built for.
    pub fn check_orders(&self, orders: &[RelationSet]) -> Result<()> {
        if orders.len() != self.layers.len() {
            return Err(ModelError::Mismatch(format!(
                "{} relation orders, model has {} layers",
                orders.len(),
                self.layers.len()
            )));
        }
        for (l, rs) in orders.iter().enumerate() {
            let got: Vec<&MetaRelation> = rs.relations().collect();
            if got != self.relations(l) {
                return Err(ModelError::Mismatch(format!("order {} relations differ", l + 1)));
            }
        }
        Ok(())
    }

    fn check_graph(&self, g: &HetGraph) -> Result<()> {
        let names: Vec<&str> = g.node_types().iter().map(|t| t.name.as_str()).collect();
        let ok = names.len() == self.type_names.len()
            && names.iter().zip(&self.type_names).all(|(a, b)| *a == b)
            && (0..names.len()).all(|t| {
                g.is_attributed(t) == self.attributed[t]
                    && (!self.attributed[t] || g.node_types()[t].feature_dim == Some(self.input_dims[t]))
                    && (self.attributed[t] || g.count(t) == self.counts[t])
            })
            && g.target_type() == self.target_type
            && g.num_classes() == self.num_classes;
        if ok {
            Ok(())
        } else {
            Err(ModelError::Mismatch("graph node types or features differ from the model".into()))
        }
    }

    /// Feature rows of attributed type `t`, normalized when configured.
    fn raw_rows(&self, g: &HetGraph, t: usize, globals: &[usize]) -> Result<Tensor> {
        let feats = g.features(t).expect("attributed type has features");
        let mut data = Vec::with_capacity(globals.len() * feats.cols());
        for &i in globals {
            let row = feats.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if self.config.normalize_features && norm > 0.0 {
                data.extend(row.iter().map(|v| v / norm));
            } else {
                data.extend_from_slice(row);
            }
        }
        Ok(Tensor::from_vec(globals.len(), feats.cols(), data)?)
    }

    /// Run every layer over the subnetwork. `vars` are this model's
    /// parameters bound on `tape`, in store order.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], g: &HetGraph, sub: &Subnetwork) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Mismatch(format!(
                "{} parameter vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        self.check_graph(g)?;
        if sub.edges.len() < self.layers.len()
            || sub.edges.iter().zip(&self.layers).any(|(e, l)| e.len() != l.members.len())
        {
            return Err(ModelError::Mismatch("subnetwork edges do not match the relation orders".into()));
        }
        let n_types = self.type_names.len();
        let mut inputs = Vec::with_capacity(n_types);
        for t in 0..n_types {
            let x = match self.embeddings[t] {
                Some(e) => tape.gather_rows(vars[e], &sub.nodes[t])?,
                None => tape.constant(self.raw_rows(g, t, &sub.nodes[t])?),
            };
            inputs.push(x);
        }

        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        for (l, slots) in self.layers.iter().enumerate() {
            let h_in: Vec<Var> = if l == 0 { inputs.clone() } else { traces[l - 1].output.clone() };
            let trace = self.layer(tape, vars, slots, &h_in, &inputs, &sub.edges[l], sub)?;
            traces.push(trace);
        }
        Ok(Forward { inputs, layers: traces })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        slots: &LayerSlots,
        h_in: &[Var],
        x: &[Var],
        edges: &[crate::sampler::LocalEdges],
        sub: &Subnetwork,
    ) -> Result<LayerTrace> {
        let f = self.config.dim;
        let mut src = Vec::with_capacity(slots.types.len());
        let mut tgt = Vec::with_capacity(slots.types.len());
        for (t, ts) in slots.types.iter().enumerate() {
            let ut = tape.transpose(vars[ts.u]);
            src.push(tape.matmul(h_in[t], ut)?);
            tgt.push(match ts.v {
                Some(v) => {
                    let vt = tape.transpose(vars[v]);
                    Some(tape.matmul(x[t], vt)?)
                }
                None => None,
            });
        }

        let mut q = Vec::with_capacity(slots.members.len());
        let mut tau = Vec::with_capacity(slots.members.len());
        let mut scores = Vec::with_capacity(slots.members.len());
        let mut alpha = Vec::with_capacity(slots.members.len());
        let mut messages = Vec::with_capacity(slots.members.len());
        for (m, e) in slots.members.iter().zip(edges) {
            let qv = vars[m.q];
            let tv = tape.softplus(vars[m.rho]);
            q.push(qv);
            tau.push(tv);
            let n_src = sub.num_nodes(m.src);
            if e.is_empty() {
                scores.push(None);
                alpha.push(None);
                messages.push(tape.constant(Tensor::zeros(n_src, f)));
                continue;
            }
            let t_side = tgt[m.dst].expect("target transform exists for relation targets");
            let hs = tape.gather_rows(src[m.src], &e.src)?;
            let xt = tape.gather_rows(t_side, &e.dst)?;
            let cat = tape.hcat(&[hs, xt])?;
            let score = tape.matmul(cat, qv)?;
            let a = tape.segment_softmax(score, &e.src, n_src, tv)?;
            messages.push(tape.segment_weighted_sum(xt, a, &e.src, n_src)?);
            scores.push(Some(score));
            alpha.push(Some(a));
        }

        let mut beta = Vec::with_capacity(slots.types.len());
        let mut beta_index = Vec::with_capacity(slots.types.len());
        let mut output = Vec::with_capacity(slots.types.len());
        for (t, ts) in slots.types.iter().enumerate() {
            let n = sub.num_nodes(t);
            let Some((w, b)) = ts.w else {
                beta.push(tape.constant(Tensor::full(n, 1, 1.0)));
                beta_index.push((0..n).map(|i| (i, 0)).collect());
                output.push(self.activate(tape, src[t]));
                continue;
            };
            let k = ts.members.len() + 1;
            let mut has_edges = vec![vec![false; n]; ts.members.len()];
            for (c, &j) in ts.members.iter().enumerate() {
                for &s in &edges[j].src {
                    has_edges[c][s] = true;
                }
            }
            let mut flat_idx = Vec::new();
            let mut stacked_idx = Vec::new();
            let mut segs = Vec::new();
            let mut index = Vec::new();
            for i in 0..n {
                for c in 0..k {
                    if c == 0 || has_edges[c - 1][i] {
                        flat_idx.push(i * k + c);
                        stacked_idx.push(c * n + i);
                        segs.push(i);
                        index.push((i, c));
                    }
                }
            }
            let wt = tape.transpose(vars[w]);
            let lin = tape.matmul(h_in[t], wt)?;
            let logits = tape.add(lin, vars[b])?;
            let flat = tape.reshape(logits, n * k, 1)?;
            let picked = tape.gather_rows(flat, &flat_idx)?;
            let one = tape.constant(Tensor::scalar(1.0));
            let bt = tape.segment_softmax(picked, &segs, n, one)?;
            let mut parts = vec![src[t]];
            parts.extend(ts.members.iter().map(|&j| messages[j]));
            let stacked = tape.vcat(&parts)?;
            let rows = tape.gather_rows(stacked, &stacked_idx)?;
            let h = tape.segment_weighted_sum(rows, bt, &segs, n)?;
            output.push(self.activate(tape, h));
            beta.push(bt);
            beta_index.push(index);
        }

        Ok(LayerTrace { src, tgt, q, tau, scores, alpha, beta, beta_index, output })
    }

    fn activate(&self, tape: &mut Tape, v: Var) -> Var {
        match self.config.activation {
            Activation::Relu => tape.relu(v),
            Activation::Identity => v,
        }
    }

    /// Concatenated layer outputs for local rows of type `t`, with dropout in training mode.
    pub fn embedding(&self, tape: &mut Tape, fwd: &Forward, t: usize, rows: &[usize], mode: Mode) -> Result<Var> {
        let mut parts = Vec::with_capacity(fwd.layers.len());
        for layer in &fwd.layers {
            parts.push(tape.gather_rows(layer.output[t], rows)?);
        }
        let cat = tape.hcat(&parts)?;
        Ok(match mode {
            Mode::Train { dropout_seed } => tape.dropout(cat, self.config.dropout, dropout_seed)?,
            Mode::Eval => cat,
        })
    }

    /// Class probabilities (rows sum to one) from embeddings.
    pub fn classify(&self, tape: &mut Tape, vars: &[Var], emb: Var) -> Result<Var> {
        let [w1, b1, w2, b2] = self.classifier.map(|i| vars[i]);
        let w1t = tape.transpose(w1);
        let z = tape.matmul(emb, w1t)?;
        let z = tape.add(z, b1)?;
        let z = tape.relu(z);
        let w2t = tape.transpose(w2);
        let z = tape.matmul(z, w2t)?;
        let logits = tape.add(z, b2)?;
        row_softmax(tape, logits)
    }

    /// Scores of arbitrary (source, target) local pairs under member `j` of layer `l`.
    pub fn score_pairs(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        l: usize,
        j: usize,
        src: &[usize],
        dst: &[usize],
    ) -> Result<Var> {
        let m = &self.layers[l].members[j];
        let trace = &fwd.layers[l];
        let t_side = trace.tgt[m.dst].expect("target transform exists for relation targets");
        let hs = tape.gather_rows(trace.src[m.src], src)?;
        let xt = tape.gather_rows(t_side, dst)?;
        let cat = tape.hcat(&[hs, xt])?;
        Ok(tape.matmul(cat, trace.q[j])?)
    }

    /// `V x` for arbitrary global nodes of type `t`, using layer `l`'s target transform.
    pub fn target_transform(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        g: &HetGraph,
        l: usize,
        t: usize,
        globals: &[usize],
    ) -> Result<Var> {
        let v = self.layers[l].types[t]
            .v
            .ok_or_else(|| ModelError::Mismatch(format!("type {} is no target at order {}", self.type_names[t], l + 1)))?;
        let x = match self.embeddings[t] {
            Some(e) => tape.gather_rows(vars[e], globals)?,
            None => tape.constant(self.raw_rows(g, t, globals)?),
        };
        let vt = tape.transpose(vars[v]);
        Ok(tape.matmul(x, vt)?)
    }

    /// Scores of local sources against arbitrary global targets under member `j` of layer `l`.
    #[allow(clippy::too_many_arguments)]
    pub fn score_to_globals(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        g: &HetGraph,
        fwd: &Forward,
        l: usize,
        j: usize,
        src: &[usize],
        dst_globals: &[usize],
    ) -> Result<Var> {
        let m = &self.layers[l].members[j];
        let xt = self.target_transform(tape, vars, g, l, m.dst, dst_globals)?;
        let hs = tape.gather_rows(fwd.layers[l].src[m.src], src)?;
        let cat = tape.hcat(&[hs, xt])?;
        Ok(tape.matmul(cat, fwd.layers[l].q[j])?)
    }

    /// Inference-mode embeddings of every node of every type on the full graph.
    pub fn embed(&self, g: &HetGraph, orders: &[RelationSet]) -> Result<Vec<Tensor>> {
        let sub = Subnetwork::full(g, orders);
        self.embed_sub(g, orders, &sub)
    }

    /// Inference-mode embeddings of every node in `sub`, per type in local order.
    pub fn embed_sub(&self, g: &HetGraph, orders: &[RelationSet], sub: &Subnetwork) -> Result<Vec<Tensor>> {
        self.check_orders(orders)?;
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let fwd = self.forward(&mut tape, &vars, g, sub)?;
        (0..self.type_names.len())
            .map(|t| {
                let rows: Vec<usize> = (0..sub.num_nodes(t)).collect();
                let e = self.embedding(&mut tape, &fwd, t, &rows, Mode::Eval)?;
                Ok(tape.value(e).clone())
            })
            .collect()
    }

    /// Inference-mode class probabilities for every target node, full graph.
    pub fn predict_proba(&self, g: &HetGraph, orders: &[RelationSet]) -> Result<Tensor> {
        self.check_orders(orders)?;
        let sub = Subnetwork::full(g, orders);
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let fwd = self.forward(&mut tape, &vars, g, &sub)?;
        let rows: Vec<usize> = (0..sub.num_nodes(self.target_type)).collect();
        let emb = self.embedding(&mut tape, &fwd, self.target_type, &rows, Mode::Eval)?;
        let p = self.classify(&mut tape, &vars, emb)?;
        Ok(tape.value(p).clone())
    }

    /// Parameters as non-tracking constants, for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Dense relation weights `n x (k + 1)` of type `t` at layer `l`, zero where a relation was excluded.
    pub fn dense_beta(&self, tape: &Tape, fwd: &Forward, l: usize, t: usize, n: usize) -> Tensor {
        let k = self.layers[l].types[t].members.len() + 1;
        let mut out = Tensor::zeros(n, k);
        let vals = tape.value(fwd.layers[l].beta[t]);
        for (e, &(i, c)) in fwd.layers[l].beta_index[t].iter().enumerate() {
            out.set(i, c, vals.get(e, 0));
        }
        out
    }
}

/// Softmax across each row of an `n x g` matrix.
pub fn row_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (n, g) = tape.shape(logits);
    let flat = tape.reshape(logits, n * g, 1)?;
    let segs: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, g)).collect();
    let one = tape.constant(Tensor::scalar(1.0));
    let p = tape.segment_softmax(flat, &segs, n, one)?;
    Ok(tape.reshape(p, n, g)?)
}
