//! Relation-weight summaries and weight/degree correlations of a trained model.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::hetgraph::HetGraph;
use crate::model::{LatteModel, ModelError};
use crate::relalgebra::RelationSet;
use crate::sampler::Subnetwork;
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("pearson needs two equal-length inputs of at least 2 values, got {0} and {1}")]
    Length(usize, usize),
    #[error("zero variance input")]
    ZeroVariance,
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, InterpretError>;

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(InterpretError::Length(x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(InterpretError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightStat {
    /// 1-based layer (relation order).
    pub layer: usize,
    pub node_type: String,
    /// Relation name, or the node type's own name for the self choice.
    pub relation: String,
    pub mean: f64,
    pub std: f64,
    pub n_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Correlation {
    pub relation: String,
    pub pearson_r: f64,
    pub n_nodes: usize,
    /// Either side was constant; `pearson_r` is then 0.
    pub zero_variance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationWeightReport {
    pub weights: Vec<WeightStat>,
    pub correlations: Vec<Correlation>,
}

/// Dense relation weights of every node, `[layer][type]` as `n x (k + 1)`.
fn all_betas(model: &LatteModel, g: &HetGraph, orders: &[RelationSet]) -> Result<Vec<Vec<crate::tensor::Tensor>>> {
    model.check_orders(orders)?;
    let sub = Subnetwork::full(g, orders);
    let mut tape = Tape::new();
    let vars = model.bind_constants(&mut tape);
    let fwd = model.forward(&mut tape, &vars, g, &sub)?;
    Ok((0..model.num_layers())
        .map(|l| {
            (0..g.num_node_types())
                .map(|t| model.dense_beta(&tape, &fwd, l, t, g.count(t)))
                .collect()
        })
        .collect())
}

fn choice_names(model: &LatteModel, l: usize, t: usize) -> Vec<String> {
    let rels = model.relations(l);
    let mut names = vec![model.type_names()[t].clone()];
    names.extend(model.members_from(l, t).iter().map(|&j| rels[j].name()));
    names
}

/// Mean and population standard deviation of every relation weight (self
/// included) across all nodes of its source type, per layer.
pub fn relation_weight_summary(model: &LatteModel, g: &HetGraph, orders: &[RelationSet]) -> Result<Vec<WeightStat>> {
    let betas = all_betas(model, g, orders)?;
    let mut out = Vec::new();
    for (l, per_type) in betas.iter().enumerate() {
        for (t, beta) in per_type.iter().enumerate() {
            let n = beta.rows();
            if n == 0 {
                continue;
            }
            for (c, name) in choice_names(model, l, t).into_iter().enumerate() {
                let col: Vec<f64> = (0..n).map(|i| beta.get(i, c)).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                out.push(WeightStat {
                    layer: l + 1,
                    node_type: g.type_name(t).to_string(),
                    relation: name,
                    mean,
                    std: var.sqrt(),
                    n_nodes: n,
                });
            }
        }
    }
    Ok(out)
}

/// Correlation across nodes between first-layer relation weights and degree:
/// each relation against the node's out-degree in it, the self choice against
/// the node's total degree. `weighted` sums edge weights instead of counting.
pub fn weight_degree_correlation(
    model: &LatteModel,
    g: &HetGraph,
    orders: &[RelationSet],
    weighted: bool,
) -> Result<Vec<Correlation>> {
    let betas = all_betas(model, g, orders)?;
    let members = orders[0].members();
    let mut out = Vec::new();
    for t in 0..g.num_node_types() {
        let n = g.count(t);
        let mine = model.members_from(0, t);
        if n == 0 {
            continue;
        }
        let degree_of = |j: usize| -> Vec<f64> {
            let m = &members[j].matrix;
            if weighted {
                m.row_sums()
            } else {
                (0..n).map(|i| m.row_nnz(i) as f64).collect()
            }
        };
        let degrees: Vec<Vec<f64>> = mine.iter().map(|&j| degree_of(j)).collect();
        let total: Vec<f64> = (0..n).map(|i| degrees.iter().map(|d| d[i]).sum()).collect();
        let names = choice_names(model, 0, t);
        for (c, name) in names.into_iter().enumerate() {
            let beta: Vec<f64> = (0..n).map(|i| betas[0][t].get(i, c)).collect();
            let deg = if c == 0 { &total } else { &degrees[c - 1] };
            let (r, zero_variance) = match pearson(&beta, deg) {
                Ok(r) => (r, false),
                Err(InterpretError::ZeroVariance) | Err(InterpretError::Length(..)) => {
                    log::warn!("relation {name}: correlation undefined, reporting 0");
                    (0.0, true)
                }
                Err(e) => return Err(e),
            };
            out.push(Correlation { relation: name, pearson_r: r, n_nodes: n, zero_variance });
        }
    }
    Ok(out)
}

pub fn report(model: &LatteModel, g: &HetGraph, orders: &[RelationSet], weighted: bool) -> Result<RelationWeightReport> {
    Ok(RelationWeightReport {
        weights: relation_weight_summary(model, g, orders)?,
        correlations: weight_degree_correlation(model, g, orders, weighted)?,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| InterpretError::Io { path: path.display().to_string(), source })
}

pub fn summary_csv(stats: &[WeightStat]) -> String {
    let mut s = String::from("layer,relation_path,mean_beta,std_beta\n");
    for w in stats {
        let _ = writeln!(s, "{},{},{},{}", w.layer, w.relation, w.mean, w.std);
    }
    s
}

pub fn correlation_csv(corr: &[Correlation]) -> String {
    let mut s = String::from("relation_path,pearson_r,n_nodes\n");
    for c in corr {
        let _ = writeln!(s, "{},{},{}", c.relation, c.pearson_r, c.n_nodes);
    }
    s
}

/// Bar chart of mean weights with one-std whiskers, one bar per (layer, relation).
pub fn summary_svg(stats: &[WeightStat]) -> String {
    let (bar, gap, height, top, bottom, left) = (28.0, 12.0, 240.0, 20.0, 90.0, 50.0);
    let width = left + stats.len() as f64 * (bar + gap) + gap;
    let total_h = top + height + bottom;
    let y = |v: f64| top + height * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" font-family="sans-serif" font-size="10">"#
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let ty = y(tick);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{width}" y1="{ty}" y2="{ty}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##,
            left - 4.0,
            ty + 3.0
        );
    }
    for (i, w) in stats.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let color = if w.relation == w.node_type { "#999" } else { "#4a7ab5" };
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="{bar}" height="{}" fill="{color}"/>"#,
            y(w.mean),
            height * w.mean.clamp(0.0, 1.0)
        );
        let cx = x + bar / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx}" x2="{cx}" y1="{}" y2="{}" stroke="black"/>"#,
            y(w.mean + w.std),
            y(w.mean - w.std)
        );
        let ly = top + height + 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{ly}" transform="rotate(60 {cx} {ly})">{} (t={})</text>"#,
            w.relation, w.layer
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Write `attention_summary.csv`, `correlation.csv`, and optionally `attention_summary.svg` into `dir`.
pub fn write_report(report: &RelationWeightReport, dir: &Path, svg: bool) -> Result<()> {
    write(&dir.join("attention_summary.csv"), &summary_csv(&report.weights))?;
    write(&dir.join("correlation.csv"), &correlation_csv(&report.correlations))?;
    if svg {
        write(&dir.join("attention_summary.svg"), &summary_svg(&report.weights))?;
    }
    Ok(())
}
