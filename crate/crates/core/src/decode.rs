//! Three-stage inference: unconditional heads, span/relation thresholding,
//! conditioned relation-specific tagging in both directions, then the union.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Grid, RelGrids, Span, SpanTriple, TagTensors};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// A position is tagged when its start/end probability exceeds this.
    pub span_threshold: f64,
    /// A relation is considered present when its probability exceeds this.
    pub relation_threshold: f64,
    /// Zero relation-specific rows for relations not predicted present.
    pub relation_filter: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            span_threshold: 0.5,
            relation_threshold: 0.5,
            relation_filter: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("span_threshold", self.span_threshold),
            ("relation_threshold", self.relation_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("decode.{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Which extraction directions run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Directions {
    pub s2o: bool,
    pub o2s: bool,
}

impl Default for Directions {
    fn default() -> Self {
        Self { s2o: true, o2s: true }
    }
}

impl Directions {
    pub const S2O: Directions = Directions { s2o: true, o2s: false };
    pub const O2S: Directions = Directions { s2o: false, o2s: true };
    pub const BOTH: Directions = Directions { s2o: true, o2s: true };
}

/// Pairs thresholded start and end positions into spans.
///
/// Starts are visited left to right; each takes the nearest not yet used end
/// at or after it. Starts without an available end are dropped.
pub fn pair_spans(p_start: &[f64], p_end: &[f64], threshold: f64) -> Result<Vec<Span>> {
    if p_start.len() != p_end.len() {
        return Err(Error::LengthMismatch {
            expected: p_start.len(),
            actual: p_end.len(),
        });
    }
    let ends: Vec<usize> = (0..p_end.len()).filter(|&i| p_end[i] > threshold).collect();
    let mut used = vec![false; ends.len()];
    let mut spans = Vec::new();
    for start in (0..p_start.len()).filter(|&i| p_start[i] > threshold) {
        if let Some(j) = (0..ends.len()).find(|&j| !used[j] && ends[j] >= start) {
            used[j] = true;
            spans.push(Span::new(start, ends[j]));
        }
    }
    Ok(spans)
}

/// Applies [`pair_spans`] to every relation row of a start/end grid pair.
pub fn decode_grids(start: &Grid, end: &Grid, threshold: f64) -> Result<Vec<(usize, Span)>> {
    if start.rows != end.rows || start.cols != end.cols {
        return Err(Error::LengthMismatch {
            expected: start.data.len(),
            actual: end.data.len(),
        });
    }
    let mut out = Vec::new();
    for k in 0..start.rows {
        for span in pair_spans(start.row(k), end.row(k), threshold)? {
            out.push((k, span));
        }
    }
    Ok(out)
}

/// Unconditional head outputs for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProbs {
    pub sub_start: Vec<f64>,
    pub sub_end: Vec<f64>,
    pub obj_start: Vec<f64>,
    pub obj_end: Vec<f64>,
    /// Per-relation presence probabilities; also the vector fed to the
    /// relation-specific taggers.
    pub relations: Vec<f64>,
}

/// Access to a sentence's tagger outputs, computed lazily per stage.
pub trait SentenceTagger {
    fn heads(&self) -> Result<HeadProbs>;

    /// Relation-specific object grids, one per conditioning subject.
    fn objects_given_subjects(&self, subjects: &[Span], relations: &[f64]) -> Result<Vec<RelGrids>>;

    /// Relation-specific subject grids, one per conditioning object.
    fn subjects_given_objects(&self, objects: &[Span], relations: &[f64]) -> Result<Vec<RelGrids>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    S2o,
    O2s,
    Both,
}

impl Provenance {
    fn merge(self, other: Provenance) -> Provenance {
        if self == other {
            self
        } else {
            Provenance::Both
        }
    }
}

/// Decoded triple set with the direction(s) that produced each triple.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prediction {
    entries: BTreeMap<SpanTriple, Provenance>,
}

impl Prediction {
    pub fn insert(&mut self, triple: SpanTriple, from: Provenance) {
        self.entries
            .entry(triple)
            .and_modify(|p| *p = p.merge(from))
            .or_insert(from);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, triple: &SpanTriple) -> bool {
        self.entries.contains_key(triple)
    }

    pub fn provenance(&self, triple: &SpanTriple) -> Option<Provenance> {
        self.entries.get(triple).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SpanTriple, &Provenance)> {
        self.entries.iter()
    }

    pub fn triples(&self) -> Vec<SpanTriple> {
        self.entries.keys().copied().collect()
    }
}

fn filtered_rows(grids: &RelGrids, relations: &[f64], cfg: &DecodeConfig) -> RelGrids {
    if !cfg.relation_filter {
        return grids.clone();
    }
    let mut g = grids.clone();
    for (k, p) in relations.iter().enumerate() {
        if *p <= cfg.relation_threshold {
            for i in 0..g.start.cols {
                g.start.set(k, i, 0.0);
                g.end.set(k, i, 0.0);
            }
        }
    }
    g
}

/// Runs the enabled directions and merges their triples.
pub fn infer(
    tagger: &dyn SentenceTagger,
    cfg: &DecodeConfig,
    directions: Directions,
) -> Result<Prediction> {
    let heads = tagger.heads()?;
    let mut prediction = Prediction::default();

    if directions.s2o {
        let subjects = pair_spans(&heads.sub_start, &heads.sub_end, cfg.span_threshold)?;
        if !subjects.is_empty() {
            let grids = tagger.objects_given_subjects(&subjects, &heads.relations)?;
            for (subject, g) in subjects.iter().zip(&grids) {
                let g = filtered_rows(g, &heads.relations, cfg);
                for (k, object) in decode_grids(&g.start, &g.end, cfg.span_threshold)? {
                    prediction.insert(SpanTriple::new(*subject, k, object), Provenance::S2o);
                }
            }
        }
    }

    if directions.o2s {
        let objects = pair_spans(&heads.obj_start, &heads.obj_end, cfg.span_threshold)?;
        if !objects.is_empty() {
            let grids = tagger.subjects_given_objects(&objects, &heads.relations)?;
            for (object, g) in objects.iter().zip(&grids) {
                let g = filtered_rows(g, &heads.relations, cfg);
                for (k, subject) in decode_grids(&g.start, &g.end, cfg.span_threshold)? {
                    prediction.insert(SpanTriple::new(subject, k, *object), Provenance::O2s);
                }
            }
        }
    }

    Ok(prediction)
}

/// Serves gold tag tensors as if they were model probabilities.
///
/// Conditioning on a span that is not a gold entity yields all-zero grids.
pub struct GoldTagger<'a> {
    pub gold: &'a TagTensors,
}

impl GoldTagger<'_> {
    fn lookup(&self, keys: &[Span], grids: &[RelGrids], query: &[Span]) -> Vec<RelGrids> {
        let r = self.gold.rel_labels.len();
        let l = self.gold.sub_start.len();
        query
            .iter()
            .map(|q| match keys.iter().position(|k| k == q) {
                Some(i) => grids[i].clone(),
                None => RelGrids::zeros(r, l),
            })
            .collect()
    }
}

impl SentenceTagger for GoldTagger<'_> {
    fn heads(&self) -> Result<HeadProbs> {
        Ok(HeadProbs {
            sub_start: self.gold.sub_start.clone(),
            sub_end: self.gold.sub_end.clone(),
            obj_start: self.gold.obj_start.clone(),
            obj_end: self.gold.obj_end.clone(),
            relations: self.gold.rel_labels.clone(),
        })
    }

    fn objects_given_subjects(&self, subjects: &[Span], _: &[f64]) -> Result<Vec<RelGrids>> {
        Ok(self.lookup(&self.gold.subjects, &self.gold.rel_obj, subjects))
    }

    fn subjects_given_objects(&self, objects: &[Span], _: &[f64]) -> Result<Vec<RelGrids>> {
        Ok(self.lookup(&self.gold.objects, &self.gold.rel_sub, objects))
    }
}
