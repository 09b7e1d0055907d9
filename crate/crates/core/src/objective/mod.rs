//! Identity, attribute and triplet losses and the two stage objectives.

use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{config_err, input_err, Result};
use crate::model::{FullOutputs, Stage1Outputs};
use crate::numerics::{Graph, Scalar, Triplet, Var};

/// Loss weights shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Triplet margin `m`.
    pub margin: f64,
    /// Weight `λ` of the attribute term in stage 1.
    pub lambda: f64,
    /// Include the triplet term in stage 1. Off only for the plain
    /// identity-loss baseline.
    pub triplet: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            lambda: 0.1,
            triplet: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(config_err!("triplet margin must be positive, got {}", self.margin));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(config_err!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Values of the individual terms of one evaluation of an objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub id: f64,
    pub triplet: f64,
    pub attribute: f64,
    pub lambda: f64,
    pub margin: f64,
}

impl LossBreakdown {
    /// `id + triplet + λ·attribute`, the stage-1 composition.
    pub fn stage1_total(&self) -> f64 {
        self.id + self.triplet + self.lambda * self.attribute
    }

    /// `id + triplet`, the stage-2 composition.
    pub fn stage2_total(&self) -> f64 {
        self.id + self.triplet
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.total += b.total / n;
            out.id += b.id / n;
            out.triplet += b.triplet / n;
            out.attribute += b.attribute / n;
            out.lambda = b.lambda;
            out.margin = b.margin;
        }
        out
    }
}

/// Mean cross-entropy of identity logits against classifier targets.
pub fn identity_loss<T: Scalar>(graph: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let classes = graph.shape(logits)[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(input_err!("identity target {t} is not one of the {classes} train identities"));
    }
    graph.softmax_cross_entropy(logits, targets)
}

/// Sum over attribute groups of the batch-mean cross-entropy.
///
/// `labels[i]` holds one label per sample for group `i`.
pub fn attribute_loss<T: Scalar>(graph: &mut Graph<T>, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(input_err!(
            "{} attribute logit blocks for {} label groups",
            logits.len(),
            labels.len()
        ));
    }
    let mut total = None;
    for (i, (&l, y)) in logits.iter().zip(labels).enumerate() {
        let classes = graph.shape(l)[1];
        if let Some(&bad) = y.iter().find(|&&t| t >= classes) {
            return Err(input_err!("attribute group {i}: label {bad} out of range ({classes} classes)"));
        }
        let ce = graph.softmax_cross_entropy(l, y)?;
        total = Some(match total {
            None => ce,
            Some(acc) => graph.add(acc, ce)?,
        });
    }
    Ok(total.expect("at least one group"))
}

/// Batch-hard mining: for every anchor, the farthest same-identity sample and
/// the nearest different-identity sample under squared L2. Ties go to the
/// lower index. Anchors lacking either are skipped.
pub fn mine_triplets<T: Scalar>(embeddings: &[T], dim: usize, identities: &[usize]) -> Vec<Triplet> {
    let n = identities.len();
    debug_assert_eq!(embeddings.len(), n * dim);
    let row = |i: usize| &embeddings[i * dim..(i + 1) * dim];
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, T)> = None;
        let mut neg: Option<(usize, T)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = crate::numerics::sq_dist(row(a), row(j));
            if identities[j] == identities[a] {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((q, _))) = (pos, neg) {
            out.push(Triplet {
                anchor: a,
                positive: p,
                negative: q,
            });
        }
    }
    out
}

/// Mean hinge `max(d_p − d_n + m, 0)` over the triplets; 0 when there are none.
pub fn triplet_loss<T: Scalar>(graph: &mut Graph<T>, embeddings: Var, triplets: &[Triplet], margin: f64) -> Result<Var> {
    if !(margin > 0.0) {
        return Err(config_err!("triplet margin must be positive, got {margin}"));
    }
    graph.triplet_loss(embeddings, triplets, T::of_f64(margin))
}

/// Mines batch-hard triplets on the current values of `embeddings` and
/// returns the loss node.
pub fn batch_hard_triplet_loss<T: Scalar>(
    graph: &mut Graph<T>,
    embeddings: Var,
    identities: &[usize],
    margin: f64,
) -> Result<Var> {
    let dim = graph.shape(embeddings)[1];
    let triplets = mine_triplets(graph.value(embeddings).data(), dim, identities);
    triplet_loss(graph, embeddings, &triplets, margin)
}

fn targets_of(batch: &Batch) -> Result<&[usize]> {
    batch
        .targets
        .as_deref()
        .ok_or_else(|| input_err!("training losses need a batch drawn from the train split"))
}

fn value<T: Scalar>(graph: &Graph<T>, v: Var) -> f64 {
    graph.value(v).item().as_f64()
}

/// `L_id(g) + L_tri(g) + λ·L_attri`.
///
/// The attribute term is evaluated whenever the outputs carry attribute
/// logits, so its value is reported even at `λ = 0`. The triplet term is
/// dropped only when `cfg.triplet` is off.
pub fn stage1_loss<T: Scalar>(
    graph: &mut Graph<T>,
    out: &Stage1Outputs,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let id = identity_loss(graph, out.id_logits, targets_of(batch)?)?;
    let mut total = id;
    let mut bd = LossBreakdown {
        id: value(graph, id),
        lambda: cfg.lambda,
        margin: cfg.margin,
        ..Default::default()
    };
    if cfg.triplet {
        let tri = batch_hard_triplet_loss(graph, out.g, &batch.identities, cfg.margin)?;
        bd.triplet = value(graph, tri);
        total = graph.add(total, tri)?;
    }
    if !out.attr_logits.is_empty() {
        let groups = batch.attr_labels.first().map_or(0, Vec::len);
        let labels: Vec<Vec<usize>> = (0..groups).map(|g| batch.group_labels(g)).collect();
        let attr = attribute_loss(graph, &out.attr_logits, &labels)?;
        bd.attribute = value(graph, attr);
        let weighted = graph.scale(attr, T::of_f64(cfg.lambda));
        total = graph.add(total, weighted)?;
    } else if cfg.lambda > 0.0 {
        return Err(config_err!("lambda is {} but the forward pass skipped the attribute branch", cfg.lambda));
    }
    bd.total = value(graph, total);
    Ok((total, bd))
}

/// `L_id(local classifier on f_p) + L_tri(f)`.
pub fn stage2_loss<T: Scalar>(
    graph: &mut Graph<T>,
    out: &FullOutputs,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let id = identity_loss(graph, out.local_logits, targets_of(batch)?)?;
    let tri = batch_hard_triplet_loss(graph, out.f, &batch.identities, cfg.margin)?;
    let total = graph.add(id, tri)?;
    let bd = LossBreakdown {
        total: value(graph, total),
        id: value(graph, id),
        triplet: value(graph, tri),
        attribute: 0.0,
        lambda: cfg.lambda,
        margin: cfg.margin,
    };
    Ok((total, bd))
}
