//! Multi-task objective, optimisation schedule and the training loop.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{build_groups, contrastive_loss, AnchorRole, ContrastiveConfig};
use crate::corpus::{build_gold_tensors, Example, Span, SpanTriple, TagTensors};
use crate::decode::{DecodeConfig, Prediction};
use crate::encoder::{span_pool, Encoder, TokenVocab};
use crate::error::{Error, Result};
use crate::metrics::{micro_prf, MatchStandard, Prf};
use crate::model::{HeadOutput, Model, TrainingOutputs};
use crate::nn::{Dropout, ParamStore};

/// Probability clamp applied before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean BCE over positions.
pub fn head_loss(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            actual: p.len(),
        });
    }
    if p.is_empty() {
        return Err(Error::EmptyInput("head loss over zero positions"));
    }
    Ok(p.iter().zip(y).map(|(p, y)| bce(*p, *y)).sum::<f64>() / p.len() as f64)
}

fn bce_tensor(p: &Tensor, y: &Tensor) -> Result<Tensor> {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (y * p.log()?)?;
    let neg = (y.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

/// Masked BCE averaged over the valid positions of each leading-axis row,
/// then uniformly over rows.
pub fn head_loss_tensor(h: &HeadOutput) -> Result<Tensor> {
    let weighted = (bce_tensor(&h.probs, &h.target)? * &h.mask)?;
    let sums = weighted.flatten_from(1)?.sum(1)?;
    let counts = h.mask.flatten_from(1)?.sum(1)?;
    Ok((sums / counts)?.mean(0)?)
}

/// Every term of the total objective for one step (or an epoch mean).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sub_head: f64,
    pub sub_tail: f64,
    pub obj_head: f64,
    pub obj_tail: f64,
    pub rel: f64,
    pub rel_obj_head: f64,
    pub rel_obj_tail: f64,
    pub rel_sub_head: f64,
    pub rel_sub_tail: f64,
    pub lc: f64,
    /// Weighted L1 share of `lc`.
    pub lc_l1: f64,
    /// Weighted L2 share of `lc`.
    pub lc_l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn bce_terms(&self) -> [f64; 9] {
        [
            self.sub_head,
            self.sub_tail,
            self.obj_head,
            self.obj_tail,
            self.rel,
            self.rel_obj_head,
            self.rel_obj_tail,
            self.rel_sub_head,
            self.rel_sub_tail,
        ]
    }

    pub fn component_sum(&self) -> f64 {
        self.bce_terms().iter().sum::<f64>() + self.lc
    }

    pub fn is_finite(&self) -> bool {
        self.bce_terms().iter().all(|v| v.is_finite()) && self.lc.is_finite() && self.total.is_finite()
    }

    fn to_array(self) -> [f64; 13] {
        [
            self.sub_head,
            self.sub_tail,
            self.obj_head,
            self.obj_tail,
            self.rel,
            self.rel_obj_head,
            self.rel_obj_tail,
            self.rel_sub_head,
            self.rel_sub_tail,
            self.lc,
            self.lc_l1,
            self.lc_l2,
            self.total,
        ]
    }

    fn from_array(v: [f64; 13]) -> Self {
        Self {
            sub_head: v[0],
            sub_tail: v[1],
            obj_head: v[2],
            obj_tail: v[3],
            rel: v[4],
            rel_obj_head: v[5],
            rel_obj_tail: v[6],
            rel_sub_head: v[7],
            rel_sub_tail: v[8],
            lc: v[9],
            lc_l1: v[10],
            lc_l2: v[11],
            total: v[12],
        }
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        let mut v = self.to_array();
        for (a, b) in v.iter_mut().zip(other.to_array()) {
            *a += b;
        }
        *self = Self::from_array(v);
    }

    fn scaled(self, k: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * k))
    }
}

/// Contrastive part of the objective, if any.
pub struct ContrastivePart {
    pub total: Tensor,
    pub l1: f64,
    pub l2: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Sums the nine tagging losses and the contrastive term.
pub fn total_loss(
    outputs: &TrainingOutputs,
    contrastive: Option<ContrastivePart>,
) -> Result<(Tensor, LossBreakdown)> {
    let mut terms: Vec<Tensor> = Vec::with_capacity(10);
    let mut value = |h: Option<&HeadOutput>| -> Result<f64> {
        match h {
            Some(h) => {
                let t = head_loss_tensor(h)?;
                let v = scalar(&t)?;
                terms.push(t);
                Ok(v)
            }
            None => Ok(0.0),
        }
    };
    let mut b = LossBreakdown {
        sub_head: value(Some(&outputs.sub_start))?,
        sub_tail: value(Some(&outputs.sub_end))?,
        obj_head: value(Some(&outputs.obj_start))?,
        obj_tail: value(Some(&outputs.obj_end))?,
        rel: value(outputs.relations.as_ref())?,
        rel_obj_head: value(outputs.s2o_start.as_ref())?,
        rel_obj_tail: value(outputs.s2o_end.as_ref())?,
        rel_sub_head: value(outputs.o2s_start.as_ref())?,
        rel_sub_tail: value(outputs.o2s_end.as_ref())?,
        ..Default::default()
    };
    if let Some(c) = contrastive {
        b.lc = scalar(&c.total)?;
        b.lc_l1 = c.l1;
        b.lc_l2 = c.l2;
        terms.push(c.total);
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = (total + t)?;
    }
    b.total = scalar(&total)?;
    Ok((total, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of all optimisation steps spent warming up linearly.
    pub warmup_fraction: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    /// Non-improving validations tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub teacher_forcing: bool,
    /// Rescale gradients whose global L2 norm exceeds this; 0 disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Stop as soon as validation F1 reaches this value.
    pub target_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            peak_lr: 1e-5,
            warmup_fraction: 0.25,
            dropout: 0.1,
            max_epochs: 100,
            patience: 10,
            seed: 42,
            teacher_forcing: true,
            max_grad_norm: Some(1.0),
            target_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("train.peak_lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("train.warmup_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("train.dropout must lie in [0, 1)");
        }
        if self.max_epochs == 0 {
            return bad("train.max_epochs must be positive");
        }
        if self.patience == 0 {
            return bad("train.patience must be at least 1");
        }
        if self.max_grad_norm.is_some_and(|n| !(n >= 0.0)) {
            return bad("train.max_grad_norm must be non-negative");
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over the first `warmup_fraction` of `total_steps`, then constant.
///
/// `step` counts from 1.
pub fn learning_rate(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    let warmup = warmup_fraction * total_steps as f64;
    if warmup <= 0.0 {
        return peak;
    }
    peak * (step as f64 / warmup).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience-based stopping on a score where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, score: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        StopDecision {
            improved,
            stop: self.bad >= self.patience,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub valid: Prf,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_valid: Prf,
    pub stopped_early: bool,
}

pub struct TrainSetup<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub tokens: &'a TokenVocab,
    pub train: &'a [Example],
    pub valid: &'a [Example],
    pub config: &'a TrainConfig,
    pub contrastive: &'a ContrastiveConfig,
    pub decode: &'a DecodeConfig,
    pub standard: MatchStandard,
    /// Where to write the offending batch if the loss stops being finite.
    pub dump_path: Option<PathBuf>,
}

/// Loss of one batch: tagging on the first dropout view, contrastive
/// grouping across both views when enabled.
pub fn batch_loss(
    model: &Model,
    examples: &[Example],
    ids: &[Vec<u32>],
    gold: &[TagTensors],
    contrastive: &ContrastiveConfig,
    dropout: &mut Dropout,
) -> Result<(Tensor, LossBreakdown)> {
    if !contrastive.enabled {
        let reps = model.encoder.forward(ids, Some(dropout))?;
        let f = model.features(reps)?;
        return total_loss(&model.forward_training(&f, gold)?, None);
    }
    let views = model.encoder.encode_dual(ids, dropout)?;
    let plan = build_groups(examples, 2, &[AnchorRole::Subject, AnchorRole::Object]);
    let part = if plan.groups.is_empty() {
        None
    } else {
        let pick = |view: usize| -> Vec<(usize, Span)> {
            plan.entities
                .iter()
                .filter(|e| e.view == view)
                .map(|e| (e.example, e.span))
                .collect()
        };
        let emb = Tensor::cat(&[span_pool(&views.a, &pick(0))?, span_pool(&views.b, &pick(1))?], 0)?;
        let terms = contrastive_loss(&emb, &plan.groups, contrastive)?;
        Some(ContrastivePart {
            total: terms.total,
            l1: terms.l1,
            l2: terms.l2,
        })
    };
    let f = model.features(views.a)?;
    total_loss(&model.forward_training(&f, gold)?, part)
}

/// Decodes every example with the model in inference mode.
pub fn predict_examples(
    model: &Model,
    tokens: &TokenVocab,
    examples: &[Example],
    decode: &DecodeConfig,
) -> Result<Vec<Prediction>> {
    examples
        .iter()
        .map(|ex| {
            if ex.tokens.is_empty() {
                Ok(Prediction::default())
            } else {
                model.predict(&tokens.ids(&ex.tokens), decode)
            }
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    tokens: &TokenVocab,
    examples: &[Example],
    decode: &DecodeConfig,
    standard: MatchStandard,
) -> Result<Prf> {
    let preds: Vec<Vec<SpanTriple>> = predict_examples(model, tokens, examples, decode)?
        .iter()
        .map(Prediction::triples)
        .collect();
    let golds: Vec<Vec<SpanTriple>> = examples.iter().map(|e| e.triples.clone()).collect();
    micro_prf(&preds, &golds, standard)
}

/// Scales all gradients by a common factor so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * k)?);
            }
        }
    }
    Ok(norm)
}

#[derive(Serialize)]
struct BatchDump<'a> {
    epoch: usize,
    step: usize,
    loss: LossBreakdown,
    examples: &'a [Example],
}

/// Adam training with per-epoch validation, early stopping and restoration
/// of the best parameters. `log` receives one record per epoch.
pub fn train_loop(
    setup: &TrainSetup,
    log: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainSummary> {
    let cfg = setup.config;
    cfg.validate()?;
    setup.contrastive.validate()?;
    setup.decode.validate()?;
    let usable: Vec<usize> = (0..setup.train.len())
        .filter(|&i| !setup.train[i].tokens.is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyInput("training corpus has no sentences"));
    }
    let r = setup.model.num_relations();
    let ids: Vec<Vec<u32>> = setup.train.iter().map(|e| setup.tokens.ids(&e.tokens)).collect();
    let gold: Vec<TagTensors> = setup
        .train
        .iter()
        .map(|e| build_gold_tensors(e, r))
        .collect::<Result<_>>()?;

    let batches_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.max_epochs;
    let params = ParamsAdamW {
        lr: learning_rate(1, total_steps, cfg.peak_lr, cfg.warmup_fraction),
        weight_decay: 0.0,
        ..Default::default()
    };
    let vars = setup.store.vars();
    let mut opt = AdamW::new(vars.clone(), params)?;
    let mut dropout = Dropout::new(cfg.dropout, cfg.seed.wrapping_add(1));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = None;
    let mut summary = TrainSummary {
        epochs: 0,
        steps: 0,
        best_epoch: 0,
        best_valid: Prf::default(),
        stopped_early: false,
    };

    let mut order = usable.clone();
    let mut step = 0;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            lr = learning_rate(step, total_steps, cfg.peak_lr, cfg.warmup_fraction);
            opt.set_learning_rate(lr);
            let examples: Vec<Example> = chunk.iter().map(|&i| setup.train[i].clone()).collect();
            let batch_ids: Vec<Vec<u32>> = chunk.iter().map(|&i| ids[i].clone()).collect();
            let batch_gold: Vec<TagTensors> = chunk.iter().map(|&i| gold[i].clone()).collect();
            let (loss, breakdown) = batch_loss(
                setup.model,
                &examples,
                &batch_ids,
                &batch_gold,
                setup.contrastive,
                &mut dropout,
            )?;
            if !breakdown.is_finite() {
                let dump = serde_json::to_string_pretty(&BatchDump {
                    epoch,
                    step,
                    loss: breakdown,
                    examples: &examples,
                })?;
                if let Some(path) = &setup.dump_path {
                    std::fs::write(path, &dump).map_err(|e| Error::io(path, e))?;
                }
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: match &setup.dump_path {
                        Some(p) => format!("batch written to {}", p.display()),
                        None => dump,
                    },
                });
            }
            let mut grads = loss.backward()?;
            if let Some(max_norm) = cfg.max_grad_norm.filter(|n| *n > 0.0) {
                clip_grad_norm(&mut grads, &vars, max_norm)?;
            }
            opt.step(&grads)?;
            epoch_loss.accumulate(&breakdown);
        }
        let epoch_loss = epoch_loss.scaled(1.0 / batches_per_epoch as f64);
        let valid = evaluate(setup.model, setup.tokens, setup.valid, setup.decode, setup.standard)?;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: epoch_loss,
            valid,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (lc {:.4}) valid F1 {:.4}",
            epoch_loss.total,
            epoch_loss.lc,
            valid.f1
        );
        log(&record)?;
        summary.epochs = epoch;
        summary.steps = step;

        let decision = stopper.observe(valid.f1);
        if decision.improved {
            best = Some(setup.store.snapshot()?);
            summary.best_epoch = epoch;
            summary.best_valid = valid;
        }
        if cfg.target_f1.is_some_and(|t| valid.f1 >= t) {
            break;
        }
        if decision.stop {
            summary.stopped_early = true;
            break;
        }
    }
    if let Some(snapshot) = best {
        setup.store.restore(&snapshot)?;
    }
    Ok(summary)
}
