//! Proximity (NCE) loss over attention scores, negative sampling,
//! classification cross-entropy, and the joint objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hetgraph::{HetGraph, SparseBiadj};
use crate::model::{LatteModel, Mode, Result};
use crate::relalgebra::RelationSet;
use crate::sampler::Subnetwork;
use crate::tensor::{Tape, Tensor, Var, LOG_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegSampleConfig {
    /// Negatives per positive link.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for NegSampleConfig {
    fn default() -> Self {
        NegSampleConfig { ratio: 5.0, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Negatives {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// Fewer pairs than requested could be found.
    pub shortfall: bool,
}

impl Negatives {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for one (seed, batch, relation) triple.
pub fn negative_rng(seed: u64, batch: u64, relation: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(batch)));
    rng.set_stream(relation);
    rng
}

/// `round(ratio * n_pos)` pairs `(sources[u], targets[v])` with `u`, `v`
/// uniform, rejecting pairs present in `matrix` (global ids). Returned
/// indices are positions into `sources` / `targets`.
pub fn sample_negatives_among(
    matrix: &SparseBiadj,
    sources: &[usize],
    targets: &[usize],
    n_pos: usize,
    ratio: f64,
    rng: &mut impl Rng,
) -> Negatives {
    let want = (ratio * n_pos as f64).round() as usize;
    let mut out = Negatives::default();
    if want == 0 {
        return out;
    }
    if sources.is_empty() || targets.is_empty() {
        out.shortfall = true;
        return out;
    }
    let budget = 20 * want + 100;
    let mut tries = 0;
    while out.src.len() < want && tries < budget {
        tries += 1;
        let u = rng.random_range(0..sources.len());
        let v = rng.random_range(0..targets.len());
        if !matrix.contains(sources[u], targets[v]) {
            out.src.push(u);
            out.dst.push(v);
        }
    }
    out.shortfall = out.src.len() < want;
    out
}

/// Negatives over the whole relation, as global `(row, col)` pairs.
pub fn sample_negatives(matrix: &SparseBiadj, n_pos: usize, cfg: &NegSampleConfig) -> Negatives {
    let rows: Vec<usize> = (0..matrix.n_rows()).collect();
    let cols: Vec<usize> = (0..matrix.n_cols()).collect();
    let mut rng = negative_rng(cfg.seed, 0, 0);
    sample_negatives_among(matrix, &rows, &cols, n_pos, cfg.ratio, &mut rng)
}

/// `-(1/E) sum a log sigmoid(e) - (1/K) sum log sigmoid(-e_neg)`, written with
/// softplus so that large scores stay finite. Negatives are omitted when `None`.
pub fn nce_loss(tape: &mut Tape, pos: Var, weights: &[f64], neg: Option<Var>) -> Result<Var> {
    let e = tape.shape(pos).0;
    let flipped = tape.scale(pos, -1.0);
    let sp = tape.softplus(flipped);
    let a = tape.constant(Tensor::from_vec(1, weights.len(), weights.to_vec())?);
    let weighted = tape.matmul(a, sp)?;
    let mut loss = tape.scale(weighted, 1.0 / e.max(1) as f64);
    if let Some(neg) = neg {
        let k = tape.shape(neg).0;
        if k > 0 {
            let sn = tape.softplus(neg);
            let total = tape.sum(sn);
            let mean = tape.scale(total, 1.0 / k as f64);
            loss = tape.add(loss, mean)?;
        }
    }
    Ok(loss)
}

/// Summed negative log-likelihood of `labels` under row-stochastic `probs`.
/// The flag is set when a true-class probability fell below the log floor.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<(Var, bool)> {
    let (n, g) = tape.shape(probs);
    if labels.len() != n {
        return Err(crate::tensor::TensorError::Invalid(format!("{} labels for {n} rows", labels.len())).into());
    }
    let p = tape.value(probs);
    let clamped = labels.iter().enumerate().any(|(i, &y)| p.get(i, y) < LOG_FLOOR);
    let flat = tape.reshape(probs, n * g, 1)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * g + y).collect();
    let picked = tape.gather_rows(flat, &idx)?;
    let logs = tape.log(picked);
    let total = tape.sum(logs);
    Ok((tape.scale(total, -1.0), clamped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossFlags {
    pub use_proximity: bool,
    /// Multiplier on the classification term; 0 leaves only proximity.
    pub ce_weight: f64,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags { use_proximity: true, ce_weight: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    /// Proximity loss per `[layer][member]`, `None` when the member had no edges in the batch.
    pub proximity: Vec<Vec<Option<f64>>>,
    pub shortfall: bool,
    pub clamped: bool,
}

/// Everything one evaluation of the joint objective needs.
pub struct Batch<'a> {
    pub graph: &'a HetGraph,
    pub orders: &'a [RelationSet],
    pub sub: &'a Subnetwork,
    /// `(local target id, class)` pairs that contribute to the classification term.
    pub labeled: &'a [(usize, usize)],
    /// Distinguishes batches for negative sampling.
    pub index: u64,
    /// Global candidates per node type for the target side of negatives;
    /// `None` draws targets from the batch's own nodes.
    pub negative_targets: Option<&'a [Vec<usize>]>,
}

/// Cross-entropy on labeled nodes plus, when enabled, the NCE loss of every
/// relation of every order over the batch's edges.
pub fn total_loss(
    model: &LatteModel,
    tape: &mut Tape,
    vars: &[Var],
    batch: &Batch<'_>,
    mode: Mode,
    flags: LossFlags,
    neg: &NegSampleConfig,
) -> Result<LossParts> {
    let fwd = model.forward(tape, vars, batch.graph, batch.sub)?;
    let tt = model.target_type();
    let rows: Vec<usize> = batch.labeled.iter().map(|&(i, _)| i).collect();
    let labels: Vec<usize> = batch.labeled.iter().map(|&(_, y)| y).collect();
    let emb = model.embedding(tape, &fwd, tt, &rows, mode)?;
    let probs = model.classify(tape, vars, emb)?;
    let (ce, clamped) = cross_entropy(tape, probs, &labels)?;
    let mut total = if flags.ce_weight == 1.0 { ce } else { tape.scale(ce, flags.ce_weight) };

    let mut proximity = Vec::new();
    let mut shortfall = false;
    if flags.use_proximity {
        for (l, rs) in batch.orders.iter().enumerate() {
            let mut per = Vec::with_capacity(rs.len());
            for (j, member) in rs.members().iter().enumerate() {
                let Some(pos) = fwd.layers[l].scores[j] else {
                    per.push(None);
                    continue;
                };
                let edges = &batch.sub.edges[l][j];
                let (s, d) = model.member_types(l, j);
                let mut rng = negative_rng(neg.seed, batch.index, (l as u64) << 32 | j as u64);
                let pool = match batch.negative_targets {
                    Some(p) => &p[d],
                    None => &batch.sub.nodes[d],
                };
                let negs =
                    sample_negatives_among(&member.matrix, &batch.sub.nodes[s], pool, edges.len(), neg.ratio, &mut rng);
                shortfall |= negs.shortfall;
                let neg_scores = if negs.is_empty() {
                    None
                } else if batch.negative_targets.is_some() {
                    let globals: Vec<usize> = negs.dst.iter().map(|&v| pool[v]).collect();
                    Some(model.score_to_globals(tape, vars, batch.graph, &fwd, l, j, &negs.src, &globals)?)
                } else {
                    Some(model.score_pairs(tape, &fwd, l, j, &negs.src, &negs.dst)?)
                };
                let lr = nce_loss(tape, pos, &edges.weight, neg_scores)?;
                per.push(Some(tape.value(lr).item()));
                total = tape.add(total, lr)?;
            }
            proximity.push(per);
        }
    }
    Ok(LossParts { total, ce, proximity, shortfall, clamped })
}
