//! Tagging heads on top of the encoder.
//!
//! Three projections specialise the shared token states for subjects,
//! objects and relations. Unconditional heads tag subject and object
//! boundaries and score relation presence; two relation-specific taggers
//! then tag objects given a subject (s2o) and subjects given an object (o2s).

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::corpus::{RelGrids, Span, TagTensors};
use crate::decode::{infer, DecodeConfig, Directions, HeadProbs, Prediction, SentenceTagger};
use crate::encoder::{masked_mean, span_pool, Encoder, EncoderConfig, TokenReps, TransformerEncoder};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Linear, ParamStore, DTYPE};

/// Structural switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSwitches {
    pub directions: Directions,
    /// Without it the relation head is unused, the taggers see a zero
    /// relation vector and decoding applies no relation filter.
    pub relation_prediction: bool,
    /// Condition training-time taggers on the gold relation vector rather
    /// than the predicted one.
    pub teacher_forcing: bool,
}

impl Default for ModelSwitches {
    fn default() -> Self {
        Self {
            directions: Directions::BOTH,
            relation_prediction: true,
            teacher_forcing: true,
        }
    }
}

impl ModelSwitches {
    pub fn validate(&self) -> Result<()> {
        if !self.directions.s2o && !self.directions.o2s {
            return Err(Error::Config("at least one extraction direction must be enabled".into()));
        }
        Ok(())
    }
}

/// Relation-specific start/end tagger over `[h + v ; p_rel]`.
struct RelTagger {
    start: Linear,
    end: Linear,
}

impl RelTagger {
    fn new(store: &mut ParamStore, name: &str, d: usize, r: usize) -> Result<Self> {
        Ok(Self {
            start: Linear::new(store, &format!("{name}.start"), d + r, r)?,
            end: Linear::new(store, &format!("{name}.end"), d + r, r)?,
        })
    }
}

/// Projected token states for a batch.
pub struct Features {
    pub reps: TokenReps,
    pub h_sub: Tensor,
    pub h_obj: Tensor,
    pub h_rel: Tensor,
}

/// Probabilities, targets and validity mask of one tagging head.
pub struct HeadOutput {
    pub probs: Tensor,
    pub target: Tensor,
    pub mask: Tensor,
}

pub struct TrainingOutputs {
    pub sub_start: HeadOutput,
    pub sub_end: HeadOutput,
    pub obj_start: HeadOutput,
    pub obj_end: HeadOutput,
    pub relations: Option<HeadOutput>,
    pub s2o_start: Option<HeadOutput>,
    pub s2o_end: Option<HeadOutput>,
    pub o2s_start: Option<HeadOutput>,
    pub o2s_end: Option<HeadOutput>,
}

pub struct Model {
    pub encoder: TransformerEncoder,
    proj_sub: Linear,
    proj_obj: Linear,
    proj_rel: Linear,
    sub_start: Linear,
    sub_end: Linear,
    obj_start: Linear,
    obj_end: Linear,
    rel_head: Linear,
    s2o: RelTagger,
    o2s: RelTagger,
    num_relations: usize,
    pub switches: ModelSwitches,
}

fn scalar_head(x: &Tensor, head: &Linear, mask: &Tensor) -> Result<Tensor> {
    Ok((sigmoid(&head.forward(x)?.squeeze(D::Minus1)?)? * mask)?)
}

fn tensor2(data: Vec<f64>, rows: usize, cols: usize, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), &Device::Cpu)?
        .to_dtype(DTYPE)?
        .to_device(device)?)
}

impl Model {
    pub fn new(
        store: &mut ParamStore,
        encoder_cfg: EncoderConfig,
        vocab_size: usize,
        num_relations: usize,
        switches: ModelSwitches,
    ) -> Result<Self> {
        switches.validate()?;
        if num_relations == 0 {
            return Err(Error::Config("relation vocabulary is empty".into()));
        }
        let encoder = TransformerEncoder::new(store, encoder_cfg, vocab_size)?;
        let d = encoder_cfg.hidden;
        let r = num_relations;
        Ok(Self {
            encoder,
            proj_sub: Linear::new(store, "proj_sub", d, d)?,
            proj_obj: Linear::new(store, "proj_obj", d, d)?,
            proj_rel: Linear::new(store, "proj_rel", d, d)?,
            sub_start: Linear::new(store, "sub_head.start", d, 1)?,
            sub_end: Linear::new(store, "sub_head.end", d, 1)?,
            obj_start: Linear::new(store, "obj_head.start", d, 1)?,
            obj_end: Linear::new(store, "obj_head.end", d, 1)?,
            rel_head: Linear::new(store, "rel_head", d, r)?,
            s2o: RelTagger::new(store, "s2o", d, r)?,
            o2s: RelTagger::new(store, "o2s", d, r)?,
            num_relations,
            switches,
        })
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn features(&self, reps: TokenReps) -> Result<Features> {
        Ok(Features {
            h_sub: self.proj_sub.forward(&reps.hidden)?,
            h_obj: self.proj_obj.forward(&reps.hidden)?,
            h_rel: self.proj_rel.forward(&reps.hidden)?,
            reps,
        })
    }

    /// Subject start/end probabilities, `[batch, len]` each; zero at padding.
    pub fn tag_subjects(&self, f: &Features) -> Result<(Tensor, Tensor)> {
        Ok((
            scalar_head(&f.h_sub, &self.sub_start, &f.reps.mask)?,
            scalar_head(&f.h_sub, &self.sub_end, &f.reps.mask)?,
        ))
    }

    pub fn tag_objects(&self, f: &Features) -> Result<(Tensor, Tensor)> {
        Ok((
            scalar_head(&f.h_obj, &self.obj_start, &f.reps.mask)?,
            scalar_head(&f.h_obj, &self.obj_end, &f.reps.mask)?,
        ))
    }

    /// Relation presence probabilities from the masked mean of the relation
    /// states, `[batch, relations]`.
    pub fn predict_relations(&self, f: &Features) -> Result<Tensor> {
        if f.reps.lengths.contains(&0) {
            return Err(Error::EmptyInput("sentence with no real tokens"));
        }
        let pooled = masked_mean(&f.h_rel, &f.reps.mask)?;
        sigmoid(&self.rel_head.forward(&pooled)?)
    }

    fn conditioned(
        &self,
        f: &Features,
        states: &Tensor,
        tagger: &RelTagger,
        spans: &[(usize, Span)],
        relations: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (_, l, _) = states.dims3()?;
        let s = spans.len();
        let r = self.num_relations;
        if relations.dims() != [s, r] {
            return Err(Error::LengthMismatch {
                expected: s * r,
                actual: relations.elem_count(),
            });
        }
        let pooled = span_pool(&f.reps, spans)?;
        let rows: Vec<u32> = spans.iter().map(|(b, _)| *b as u32).collect();
        let rows = Tensor::from_vec(rows, s, states.device())?;
        let h = states.index_select(&rows, 0)?.broadcast_add(&pooled.unsqueeze(1)?)?;
        let rel = relations.unsqueeze(1)?.broadcast_as((s, l, r))?;
        let x = Tensor::cat(&[&h, &rel], D::Minus1)?;
        let mask = f.reps.mask.index_select(&rows, 0)?.unsqueeze(D::Minus1)?;
        let start = sigmoid(&tagger.start.forward(&x)?)?.broadcast_mul(&mask)?;
        let end = sigmoid(&tagger.end.forward(&x)?)?.broadcast_mul(&mask)?;
        Ok((start, end))
    }

    /// Object start/end probabilities per relation, `[spans, len, relations]`,
    /// for each `(batch row, subject)` and its relation vector.
    pub fn tag_objects_given_subjects(
        &self,
        f: &Features,
        subjects: &[(usize, Span)],
        relations: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.conditioned(f, &f.h_obj, &self.s2o, subjects, relations)
    }

    pub fn tag_subjects_given_objects(
        &self,
        f: &Features,
        objects: &[(usize, Span)],
        relations: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        self.conditioned(f, &f.h_sub, &self.o2s, objects, relations)
    }

    /// Runs every head needed for training and gathers matching targets.
    ///
    /// Relation-specific taggers are conditioned on the gold entities of each
    /// sentence.
    pub fn forward_training(&self, f: &Features, gold: &[TagTensors]) -> Result<TrainingOutputs> {
        let b = f.reps.batch_size();
        if gold.len() != b {
            return Err(Error::LengthMismatch {
                expected: b,
                actual: gold.len(),
            });
        }
        let l = f.reps.max_len();
        let r = self.num_relations;
        let device = f.reps.hidden.device();
        for (g, &len) in gold.iter().zip(&f.reps.lengths) {
            if g.sub_start.len() != len || g.rel_labels.len() != r {
                return Err(Error::LengthMismatch {
                    expected: len,
                    actual: g.sub_start.len(),
                });
            }
        }
        let padded = |pick: fn(&TagTensors) -> &Vec<f64>| -> Result<Tensor> {
            let mut data = vec![0f64; b * l];
            for (i, g) in gold.iter().enumerate() {
                let v = pick(g);
                data[i * l..i * l + v.len()].copy_from_slice(v);
            }
            tensor2(data, b, l, device)
        };
        let mask = &f.reps.mask;
        let (ss, se) = self.tag_subjects(f)?;
        let (os, oe) = self.tag_objects(f)?;
        let head = |probs: Tensor, pick: fn(&TagTensors) -> &Vec<f64>| -> Result<HeadOutput> {
            Ok(HeadOutput {
                probs,
                target: padded(pick)?,
                mask: mask.clone(),
            })
        };
        let sub_start = head(ss, |g| &g.sub_start)?;
        let sub_end = head(se, |g| &g.sub_end)?;
        let obj_start = head(os, |g| &g.obj_start)?;
        let obj_end = head(oe, |g| &g.obj_end)?;

        let gold_rel = tensor2(
            gold.iter().flat_map(|g| g.rel_labels.iter().copied()).collect(),
            b,
            r,
            device,
        )?;
        let (relations, conditioning) = if self.switches.relation_prediction {
            let p = self.predict_relations(f)?;
            let cond = if self.switches.teacher_forcing {
                gold_rel.clone()
            } else {
                p.detach()
            };
            let out = HeadOutput {
                probs: p,
                target: gold_rel.clone(),
                mask: gold_rel.ones_like()?,
            };
            (Some(out), cond)
        } else {
            (None, gold_rel.zeros_like()?)
        };

        let tagged = |spans_of: fn(&TagTensors) -> (&Vec<Span>, &Vec<RelGrids>),
                      s2o: bool|
         -> Result<Option<(HeadOutput, HeadOutput)>> {
            let mut spans = Vec::new();
            let mut start_t = Vec::new();
            let mut end_t = Vec::new();
            for (i, g) in gold.iter().enumerate() {
                let (sp, grids) = spans_of(g);
                for (span, grid) in sp.iter().zip(grids) {
                    spans.push((i, *span));
                    let len = grid.start.cols;
                    for t in 0..l {
                        for k in 0..r {
                            let inside = t < len;
                            start_t.push(if inside { grid.start.get(k, t) } else { 0.0 });
                            end_t.push(if inside { grid.end.get(k, t) } else { 0.0 });
                        }
                    }
                }
            }
            if spans.is_empty() {
                return Ok(None);
            }
            let s = spans.len();
            let rows = Tensor::from_vec(
                spans.iter().map(|(i, _)| *i as u32).collect::<Vec<_>>(),
                s,
                device,
            )?;
            let cond = conditioning.index_select(&rows, 0)?;
            let (ps, pe) = if s2o {
                self.tag_objects_given_subjects(f, &spans, &cond)?
            } else {
                self.tag_subjects_given_objects(f, &spans, &cond)?
            };
            let m = mask
                .index_select(&rows, 0)?
                .unsqueeze(D::Minus1)?
                .broadcast_as((s, l, r))?
                .contiguous()?;
            let to3 = |v: Vec<f64>| -> Result<Tensor> {
                Ok(tensor2(v, s * l, r, device)?.reshape((s, l, r))?)
            };
            Ok(Some((
                HeadOutput {
                    probs: ps,
                    target: to3(start_t)?,
                    mask: m.clone(),
                },
                HeadOutput {
                    probs: pe,
                    target: to3(end_t)?,
                    mask: m,
                },
            )))
        };

        let (s2o_start, s2o_end) = if self.switches.directions.s2o {
            tagged(|g| (&g.subjects, &g.rel_obj), true)?.unzip()
        } else {
            (None, None)
        };
        let (o2s_start, o2s_end) = if self.switches.directions.o2s {
            tagged(|g| (&g.objects, &g.rel_sub), false)?.unzip()
        } else {
            (None, None)
        };

        Ok(TrainingOutputs {
            sub_start,
            sub_end,
            obj_start,
            obj_end,
            relations,
            s2o_start,
            s2o_end,
            o2s_start,
            o2s_end,
        })
    }

    /// Deterministic view of one sentence for decoding.
    pub fn sentence(&self, ids: &[u32]) -> Result<ModelSentence<'_>> {
        let reps = self.encoder.encode(ids)?;
        Ok(ModelSentence {
            model: self,
            features: self.features(reps)?,
        })
    }

    /// Decodes one sentence of token ids.
    pub fn predict(&self, ids: &[u32], cfg: &DecodeConfig) -> Result<Prediction> {
        let sentence = self.sentence(ids)?;
        let mut cfg = *cfg;
        if !self.switches.relation_prediction {
            cfg.relation_filter = false;
        }
        infer(&sentence, &cfg, self.switches.directions)
    }
}

/// One encoded sentence, exposed to the decoder.
pub struct ModelSentence<'a> {
    model: &'a Model,
    features: Features,
}

fn row_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.squeeze(0)?.to_dtype(DTYPE)?.to_vec1()?)
}

fn to_grids(start: &Tensor, end: &Tensor) -> Result<Vec<RelGrids>> {
    let start: Vec<Vec<Vec<f64>>> = start.to_vec3()?;
    let end: Vec<Vec<Vec<f64>>> = end.to_vec3()?;
    Ok(start
        .iter()
        .zip(&end)
        .map(|(s, e)| {
            let l = s.len();
            let r = s.first().map_or(0, Vec::len);
            let mut g = RelGrids::zeros(r, l);
            for t in 0..l {
                for k in 0..r {
                    g.start.set(k, t, s[t][k]);
                    g.end.set(k, t, e[t][k]);
                }
            }
            g
        })
        .collect())
}

impl ModelSentence<'_> {
    fn run(&self, spans: &[Span], relations: &[f64], s2o: bool) -> Result<Vec<RelGrids>> {
        let r = self.model.num_relations;
        if relations.len() != r {
            return Err(Error::LengthMismatch {
                expected: r,
                actual: relations.len(),
            });
        }
        let rows: Vec<(usize, Span)> = spans.iter().map(|s| (0, *s)).collect();
        let rel: Vec<f64> = spans.iter().flat_map(|_| relations.iter().copied()).collect();
        let rel = tensor2(rel, spans.len(), r, self.features.reps.hidden.device())?;
        let (start, end) = if s2o {
            self.model.tag_objects_given_subjects(&self.features, &rows, &rel)?
        } else {
            self.model.tag_subjects_given_objects(&self.features, &rows, &rel)?
        };
        to_grids(&start, &end)
    }

    pub fn len(&self) -> usize {
        self.features.reps.lengths[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SentenceTagger for ModelSentence<'_> {
    fn heads(&self) -> Result<HeadProbs> {
        let (ss, se) = self.model.tag_subjects(&self.features)?;
        let (os, oe) = self.model.tag_objects(&self.features)?;
        let relations = if self.model.switches.relation_prediction {
            row_vec(&self.model.predict_relations(&self.features)?)?
        } else {
            vec![0.0; self.model.num_relations]
        };
        Ok(HeadProbs {
            sub_start: row_vec(&ss)?,
            sub_end: row_vec(&se)?,
            obj_start: row_vec(&os)?,
            obj_end: row_vec(&oe)?,
            relations,
        })
    }

    fn objects_given_subjects(&self, subjects: &[Span], relations: &[f64]) -> Result<Vec<RelGrids>> {
        self.run(subjects, relations, true)
    }

    fn subjects_given_objects(&self, objects: &[Span], relations: &[f64]) -> Result<Vec<RelGrids>> {
        self.run(objects, relations, false)
    }
}
