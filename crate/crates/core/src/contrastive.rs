//! Multi-positive supervised contrastive loss with a similarity-cap penalty.
//!
//! For an anchor embedding `h` with positives `P`, negatives `N` and
//! candidates `A = P ∪ N`, with `s(x) = cos(h, x)`:
//!
//! ```text
//! L1 = -1/|P| · log( Σ_P exp(s/τ) / Σ_A exp(s/τ) )
//! L2 = [ -(mean_P s − β) · 1/|N| · log( Σ_N exp(s/τ) / Σ_A exp(s/τ) ) ]₊
//! Lc = Σ_groups ω1·L1 + ω2·L2
//! ```
//!
//! `L2` vanishes whenever the mean anchor–positive similarity is at or below
//! `β`; above it, the term pulls negatives in and pushes positives out.
//!
//! Two implementations live here: a scalar one over plain vectors (with an
//! analytic gradient) and a batched tensor one used during training.

use std::collections::HashSet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Span};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub enabled: bool,
    pub tau: f64,
    pub beta: f64,
    pub omega1: f64,
    pub omega2: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau: 0.1,
            beta: 0.85,
            omega1: 1.0,
            omega2: 1.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.beta > -1.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (-1, 1], got {}", self.beta)));
        }
        if !(self.omega1 >= 0.0 && self.omega2 >= 0.0) {
            return Err(Error::Config("omega1 and omega2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// One anchor with its positive and negative embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGroup {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

struct Sims {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl ContrastiveGroup {
    fn sims(&self) -> Result<Sims> {
        Ok(Sims {
            pos: self
                .positives
                .iter()
                .map(|p| cosine(&self.anchor, p))
                .collect::<Result<_>>()?,
            neg: self
                .negatives
                .iter()
                .map(|n| cosine(&self.anchor, n))
                .collect::<Result<_>>()?,
        })
    }

    fn check(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::EmptyInput("contrastive group without positives"));
        }
        if norm(&self.anchor) == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(())
    }
}

fn scaled(v: &[f64], tau: f64) -> Vec<f64> {
    v.iter().map(|s| s / tau).collect()
}

fn l1_from_sims(s: &Sims, tau: f64) -> f64 {
    let zp = scaled(&s.pos, tau);
    let za: Vec<f64> = zp.iter().copied().chain(scaled(&s.neg, tau)).collect();
    -(log_sum_exp(&zp) - log_sum_exp(&za)) / s.pos.len() as f64
}

/// Signed product inside the penalty hinge; `None` when there are no negatives.
fn l2_product(s: &Sims, tau: f64, beta: f64) -> Option<f64> {
    if s.neg.is_empty() {
        return None;
    }
    let mean_pos = s.pos.iter().sum::<f64>() / s.pos.len() as f64;
    let zn = scaled(&s.neg, tau);
    let za: Vec<f64> = scaled(&s.pos, tau).into_iter().chain(zn.iter().copied()).collect();
    let g = (log_sum_exp(&zn) - log_sum_exp(&za)) / s.neg.len() as f64;
    Some(-(mean_pos - beta) * g)
}

pub fn loss_l1(group: &ContrastiveGroup, tau: f64) -> Result<f64> {
    group.check()?;
    Ok(l1_from_sims(&group.sims()?, tau))
}

/// Penalty term; zero when the group has no negatives.
pub fn loss_l2(group: &ContrastiveGroup, tau: f64, beta: f64) -> Result<f64> {
    group.check()?;
    Ok(l2_product(&group.sims()?, tau, beta).map_or(0.0, |q| q.max(0.0)))
}

pub fn loss_lc(groups: &[ContrastiveGroup], cfg: &ContrastiveConfig) -> Result<f64> {
    let mut total = 0.0;
    for g in groups {
        total += cfg.omega1 * loss_l1(g, cfg.tau)? + cfg.omega2 * loss_l2(g, cfg.tau, cfg.beta)?;
    }
    Ok(total)
}

/// Gradient of one group's `ω1·L1 + ω2·L2` with respect to each of its vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGradient {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// d cos(a, x) / da and d cos(a, x) / dx.
fn cosine_grads(a: &[f64], x: &[f64], s: f64) -> (Vec<f64>, Vec<f64>) {
    let (na, nx) = (norm(a), norm(x));
    let da = a
        .iter()
        .zip(x)
        .map(|(ai, xi)| xi / (na * nx) - s * ai / (na * na))
        .collect();
    let dx = a
        .iter()
        .zip(x)
        .map(|(ai, xi)| ai / (na * nx) - s * xi / (nx * nx))
        .collect();
    (da, dx)
}

pub fn group_gradient(group: &ContrastiveGroup, cfg: &ContrastiveConfig) -> Result<GroupGradient> {
    group.check()?;
    let s = group.sims()?;
    let (np, nn) = (s.pos.len(), s.neg.len());
    let tau = cfg.tau;

    let zp = scaled(&s.pos, tau);
    let zn = scaled(&s.neg, tau);
    let za: Vec<f64> = zp.iter().chain(&zn).copied().collect();
    let pi_a = softmax(&za);
    let pi_p = softmax(&zp);

    // dLoss/ds for positives then negatives (same order as `za`).
    let mut ds = vec![0.0; np + nn];
    for j in 0..np + nn {
        let in_p = if j < np { pi_p[j] } else { 0.0 };
        ds[j] += cfg.omega1 * -(in_p - pi_a[j]) / (np as f64 * tau);
    }
    if let Some(q) = l2_product(&s, tau, cfg.beta) {
        if q > 0.0 {
            let mean_pos = s.pos.iter().sum::<f64>() / np as f64;
            let pi_n = softmax(&zn);
            let g = (log_sum_exp(&zn) - log_sum_exp(&za)) / nn as f64;
            for j in 0..np + nn {
                let dm = if j < np { 1.0 / np as f64 } else { 0.0 };
                let in_n = if j >= np { pi_n[j - np] } else { 0.0 };
                let dg = (in_n - pi_a[j]) / (nn as f64 * tau);
                ds[j] += cfg.omega2 * (-dm * g - (mean_pos - cfg.beta) * dg);
            }
        }
    }

    let d = group.anchor.len();
    let mut anchor = vec![0.0; d];
    let mut cand = Vec::with_capacity(np + nn);
    let sims: Vec<f64> = s.pos.iter().chain(&s.neg).copied().collect();
    for (j, x) in group.positives.iter().chain(&group.negatives).enumerate() {
        let (da, dx) = cosine_grads(&group.anchor, x, sims[j]);
        for (acc, v) in anchor.iter_mut().zip(da) {
            *acc += ds[j] * v;
        }
        cand.push(dx.into_iter().map(|v| ds[j] * v).collect::<Vec<f64>>());
    }
    let negatives = cand.split_off(np);
    Ok(GroupGradient {
        anchor,
        positives: cand,
        negatives,
    })
}

/// An entity occurrence in one dropout view of one sentence of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EntityRef {
    pub view: usize,
    pub example: usize,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorRole {
    /// Anchor is a subject; positives are its objects.
    Subject,
    /// Anchor is an object; positives are its subjects.
    Object,
}

/// A group expressed as indices into [`GroupPlan::entities`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    pub role: AnchorRole,
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupPlan {
    pub entities: Vec<EntityRef>,
    pub groups: Vec<GroupIndex>,
}

/// Assembles anchors, positives and negatives over a batch.
///
/// Every distinct gold entity of every sentence appears once per view. Each
/// gold subject (and, for [`AnchorRole::Object`], each gold object) in each
/// view anchors a group whose positives are its related entities in every
/// view, and whose negatives are every other entity in the batch except the
/// anchor's own copies in the other views.
pub fn build_groups(examples: &[Example], views: usize, roles: &[AnchorRole]) -> GroupPlan {
    let mut entities = Vec::new();
    for view in 0..views {
        for (e, ex) in examples.iter().enumerate() {
            for span in ex.entities() {
                entities.push(EntityRef {
                    view,
                    example: e,
                    span,
                });
            }
        }
    }

    let mut groups = Vec::new();
    for (a, anchor) in entities.iter().enumerate() {
        let ex = &examples[anchor.example];
        for &role in roles {
            let related: HashSet<Span> = ex
                .triples
                .iter()
                .filter_map(|t| match role {
                    AnchorRole::Subject if t.subject == anchor.span => Some(t.object),
                    AnchorRole::Object if t.object == anchor.span => Some(t.subject),
                    _ => None,
                })
                .filter(|s| *s != anchor.span)
                .collect();
            if related.is_empty() {
                continue;
            }
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for (j, other) in entities.iter().enumerate() {
                let same_sentence = other.example == anchor.example;
                if same_sentence && other.span == anchor.span {
                    continue;
                }
                if same_sentence && related.contains(&other.span) {
                    positives.push(j);
                } else {
                    negatives.push(j);
                }
            }
            groups.push(GroupIndex {
                role,
                anchor: a,
                positives,
                negatives,
            });
        }
    }
    GroupPlan { entities, groups }
}

impl GroupPlan {
    /// Looks up vectors for every group.
    pub fn materialize(&self, embed: impl Fn(&EntityRef) -> Vec<f64>) -> Vec<ContrastiveGroup> {
        let vecs: Vec<Vec<f64>> = self.entities.iter().map(embed).collect();
        self.groups
            .iter()
            .map(|g| ContrastiveGroup {
                anchor: vecs[g.anchor].clone(),
                positives: g.positives.iter().map(|&i| vecs[i].clone()).collect(),
                negatives: g.negatives.iter().map(|&i| vecs[i].clone()).collect(),
            })
            .collect()
    }
}

/// Batched `Lc` and its weighted component shares.
pub struct ContrastiveTerms {
    pub total: Tensor,
    /// `ω1 · Σ L1`.
    pub l1: f64,
    /// `ω2 · Σ L2`.
    pub l2: f64,
}

/// Differentiable `Lc` over an `[entities, d]` embedding matrix.
pub fn contrastive_loss(
    embeddings: &Tensor,
    groups: &[GroupIndex],
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveTerms> {
    let device = embeddings.device();
    let dtype = embeddings.dtype();
    if groups.is_empty() {
        return Ok(ContrastiveTerms {
            total: Tensor::zeros((), dtype, device)?,
            l1: 0.0,
            l2: 0.0,
        });
    }
    let m = embeddings.dim(0)?;
    let norms = embeddings.sqr()?.sum_keepdim(1)?.sqrt()?;
    let min_norm = norms.to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar::<f64>()?;
    if min_norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let unit = embeddings.broadcast_div(&norms)?;
    let sims = unit.matmul(&unit.t()?)?;

    let g = groups.len();
    let anchors: Vec<u32> = groups.iter().map(|gr| gr.anchor as u32).collect();
    let mut pos_mask = vec![0f64; g * m];
    let mut neg_mask = vec![0f64; g * m];
    let mut n_pos = vec![0f64; g];
    let mut inv_neg = vec![0f64; g];
    let mut neg_empty = vec![0f64; g];
    for (i, gr) in groups.iter().enumerate() {
        for &p in &gr.positives {
            pos_mask[i * m + p] = 1.0;
        }
        for &n in &gr.negatives {
            neg_mask[i * m + n] = 1.0;
        }
        n_pos[i] = gr.positives.len() as f64;
        if gr.negatives.is_empty() {
            neg_empty[i] = 1.0;
        } else {
            inv_neg[i] = 1.0 / gr.negatives.len() as f64;
        }
    }
    let mk = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?
            .to_dtype(dtype)?
            .to_device(device)?)
    };
    let pos_mask = mk(pos_mask, &[g, m])?;
    let neg_mask = mk(neg_mask, &[g, m])?;
    let n_pos = mk(n_pos, &[g])?;
    let inv_neg = mk(inv_neg, &[g])?;
    let neg_empty = mk(neg_empty, &[g])?;

    let anchor_idx = Tensor::from_vec(anchors, g, device)?;
    let rows = sims.index_select(&anchor_idx, 0)?;
    // Cosine is at most 1, so shifting by 1/τ keeps exp() in range; the shift
    // cancels in every ratio.
    let z = ((rows.clone() - 1.0)? / cfg.tau)?.exp()?;
    let sum_pos = (&z * &pos_mask)?.sum(1)?;
    let sum_neg = (&z * &neg_mask)?.sum(1)?;
    let sum_all = (&sum_pos + &sum_neg)?;
    let log_all = sum_all.log()?;

    let l1 = ((&log_all - sum_pos.log()?)? / &n_pos)?;

    let mean_pos = ((&rows * &pos_mask)?.sum(1)? / &n_pos)?;
    let safe_neg = (&sum_neg + (&neg_empty * &sum_all)?)?;
    let g_term = ((safe_neg.log()? - &log_all)? * &inv_neg)?;
    let l2 = ((mean_pos - cfg.beta)?.neg()? * g_term)?.relu()?;

    let l1_sum = (l1.sum_all()? * cfg.omega1)?;
    let l2_sum = (l2.sum_all()? * cfg.omega2)?;
    let l1_val = l1_sum.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let l2_val = l2_sum.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(ContrastiveTerms {
        total: (l1_sum + l2_sum)?,
        l1: l1_val,
        l2: l2_val,
    })
}
