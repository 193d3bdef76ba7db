//! Dataset ingestion, token alignment, overlap classification and gold tag
//! construction.
//!
//! Input files carry one record per sentence:
//!
//! ```json
//! {"text": "Tom was born in New York at 2000.",
//!  "triple_list": [["Tom", "birth_place", "New York"], ["Tom", "birth_date", "2000"]]}
//! ```
//!
//! either as JSON lines or as a single top-level array. Entities are grounded
//! to the first byte offset at which their surface string occurs and mapped
//! onto every token overlapping that range.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MatchStandard;
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

/// One sentence with surface-string triples, as read from disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub text: String,
    pub triples: Vec<RawTriple>,
}

#[derive(Deserialize)]
struct Record {
    text: String,
    triple_list: Vec<(String, String, String)>,
}

/// Bijection between relation labels and dense ids, in sorted label order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationVocab {
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        let labels: Vec<String> = sorted.into_iter().collect();
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Self { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

impl Serialize for RelationVocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.labels.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RelationVocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let labels = Vec::<String>::deserialize(d)?;
        let vocab = RelationVocab::from_labels(labels.iter().cloned());
        if vocab.labels != labels {
            return Err(serde::de::Error::custom(
                "relation labels must be unique and sorted",
            ));
        }
        Ok(vocab)
    }
}

/// Counters collected while reading a dataset file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub records: usize,
    pub skipped_missing_entity: usize,
    pub malformed: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<RawExample>,
    pub vocab: RelationVocab,
    pub standard: MatchStandard,
    pub report: LoadReport,
}

/// Reads a dataset file. In strict mode a malformed record is an error
/// carrying its line number; in lenient mode it is counted and skipped.
pub fn load_dataset(path: &Path, standard: MatchStandard, lenient: bool) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, standard, lenient)
}

pub fn parse_dataset(text: &str, standard: MatchStandard, lenient: bool) -> Result<Dataset> {
    let mut report = LoadReport::default();
    let mut records: Vec<Record> = Vec::new();

    if text.trim_start().starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(text).map_err(|e| Error::MalformedRecord {
                line: e.line(),
                message: e.to_string(),
            })?;
        for (i, v) in values.into_iter().enumerate() {
            match serde_json::from_value::<Record>(v) {
                Ok(r) => records.push(r),
                Err(e) if lenient => {
                    log::warn!("skipping malformed record #{}: {e}", i + 1);
                    report.malformed += 1;
                }
                Err(e) => {
                    return Err(Error::MalformedRecord {
                        line: i + 1,
                        message: format!("array element {}: {e}", i + 1),
                    })
                }
            }
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(line) {
                Ok(r) => records.push(r),
                Err(e) if lenient => {
                    log::warn!("skipping malformed line {}: {e}", i + 1);
                    report.malformed += 1;
                }
                Err(e) => {
                    return Err(Error::MalformedRecord {
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
    }

    report.records = records.len();
    let vocab = RelationVocab::from_labels(
        records
            .iter()
            .flat_map(|r| r.triple_list.iter().map(|t| t.1.clone())),
    );

    let mut examples = Vec::with_capacity(records.len());
    for r in records {
        let locatable = !r.text.is_empty()
            && r.triple_list.iter().all(|(s, _, o)| {
                !s.is_empty() && !o.is_empty() && r.text.contains(s) && r.text.contains(o)
            });
        if !locatable {
            log::warn!("skipping record with an entity not found in text: {:?}", r.text);
            report.skipped_missing_entity += 1;
            continue;
        }
        examples.push(RawExample {
            text: r.text,
            triples: r
                .triple_list
                .into_iter()
                .map(|(subject, relation, object)| RawTriple {
                    subject,
                    relation,
                    object,
                })
                .collect(),
        });
    }

    Ok(Dataset {
        examples,
        vocab,
        standard,
        report,
    })
}

/// Inclusive token span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Number of tokens covered.
    pub fn width(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.start > self.end || self.end >= len {
            return Err(Error::InvalidSpan {
                start: self.start,
                end: self.end,
                len,
            });
        }
        Ok(())
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanTriple {
    pub subject: Span,
    pub relation: usize,
    pub object: Span,
}

impl SpanTriple {
    pub fn new(subject: Span, relation: usize, object: Span) -> Self {
        Self {
            subject,
            relation,
            object,
        }
    }
}

/// Overlap pattern of a sentence. SEO and EPO may both hold; Normal excludes both.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapFlags {
    pub normal: bool,
    pub seo: bool,
    pub epo: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CountBucket {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "5+")]
    FivePlus,
}

impl CountBucket {
    pub const ALL: [CountBucket; 5] = [
        CountBucket::One,
        CountBucket::Two,
        CountBucket::Three,
        CountBucket::Four,
        CountBucket::FivePlus,
    ];

    pub fn of(count: usize) -> Option<Self> {
        match count {
            0 => None,
            1 => Some(CountBucket::One),
            2 => Some(CountBucket::Two),
            3 => Some(CountBucket::Three),
            4 => Some(CountBucket::Four),
            _ => Some(CountBucket::FivePlus),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CountBucket::One => "N=1",
            CountBucket::Two => "N=2",
            CountBucket::Three => "N=3",
            CountBucket::Four => "N=4",
            CountBucket::FivePlus => "N>=5",
        }
    }
}

/// A tokenized sentence with span-level gold triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub tokens: Vec<String>,
    /// Byte range of each token in `text`.
    pub offsets: Vec<(usize, usize)>,
    pub triples: Vec<SpanTriple>,
    pub overlap: Option<OverlapFlags>,
    pub bucket: Option<CountBucket>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Surface string covered by a token span.
    pub fn surface(&self, span: Span) -> &str {
        let start = self.offsets[span.start].0;
        let end = self.offsets[span.end].1;
        &self.text[start..end]
    }

    /// Distinct gold subject spans, in order of first appearance.
    pub fn gold_subjects(&self) -> Vec<Span> {
        unique(self.triples.iter().map(|t| t.subject))
    }

    pub fn gold_objects(&self) -> Vec<Span> {
        unique(self.triples.iter().map(|t| t.object))
    }

    /// Distinct entity spans playing either role.
    pub fn entities(&self) -> Vec<Span> {
        unique(self.triples.iter().flat_map(|t| [t.subject, t.object]))
    }
}

fn unique(spans: impl Iterator<Item = Span>) -> Vec<Span> {
    let mut seen = HashSet::new();
    spans.filter(|s| seen.insert(*s)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignReport {
    /// Triples lost because an entity fell (partly) beyond `max_len`.
    pub dropped_truncated: usize,
    /// Triples whose entity could not be mapped onto any token.
    pub dropped_unaligned: usize,
}

/// Tokenizes a raw example and grounds its triples to token spans.
pub fn tokenize_align(
    raw: &RawExample,
    vocab: &RelationVocab,
    tokenizer: &dyn Tokenizer,
    max_len: usize,
) -> Result<(Example, AlignReport)> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut tokens = tokenizer.tokenize(&raw.text);
    let full_len = tokens.len();
    tokens.truncate(max_len);
    let mut report = AlignReport::default();

    // Spans are resolved against the untruncated sequence so that entities
    // straddling the cut are detected rather than silently clipped.
    let all_tokens = tokenizer.tokenize(&raw.text);
    let locate = |entity: &str| -> Option<Span> {
        let start = raw.text.find(entity)?;
        let end = start + entity.len();
        let mut hit = all_tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < end && t.end > start)
            .map(|(i, _)| i);
        let first = hit.next()?;
        let last = hit.last().unwrap_or(first);
        Some(Span::new(first, last))
    };

    let mut triples = Vec::new();
    let mut seen = HashSet::new();
    for t in &raw.triples {
        let relation = vocab
            .id(&t.relation)
            .ok_or_else(|| Error::UnknownRelation(t.relation.clone()))?;
        let (Some(subject), Some(object)) = (locate(&t.subject), locate(&t.object)) else {
            report.dropped_unaligned += 1;
            continue;
        };
        if subject.end >= max_len || object.end >= max_len {
            if subject.start < max_len || object.start < max_len {
                log::warn!(
                    "dropping triple crossing the truncation boundary ({max_len} of {full_len} tokens)"
                );
            }
            report.dropped_truncated += 1;
            continue;
        }
        let triple = SpanTriple::new(subject, relation, object);
        if seen.insert(triple) {
            triples.push(triple);
        }
    }

    let overlap = classify_overlap(&triples);
    let bucket = CountBucket::of(triples.len());
    Ok((
        Example {
            text: raw.text.clone(),
            offsets: tokens.iter().map(|t| (t.start, t.end)).collect(),
            tokens: tokens.into_iter().map(|t| t.text).collect(),
            triples,
            overlap,
            bucket,
        },
        report,
    ))
}

/// Classifies a sentence's triples by overlap pattern; `None` for zero triples.
///
/// EPO: an ordered (subject, object) pair occurs in more than one triple.
/// SEO: among the distinct pairs, some entity is shared.
/// Normal: every triple uses two entities that appear nowhere else.
pub fn classify_overlap(triples: &[SpanTriple]) -> Option<OverlapFlags> {
    if triples.is_empty() {
        return None;
    }
    let mut pairs: Vec<(Span, Span)> = triples.iter().map(|t| (t.subject, t.object)).collect();
    let all_pairs = pairs.len();
    pairs.sort();
    pairs.dedup();
    let epo = pairs.len() != all_pairs;

    let pair_entities: HashSet<Span> = pairs.iter().flat_map(|(s, o)| [*s, *o]).collect();
    let seo = pair_entities.len() != 2 * pairs.len();

    let all_entities: HashSet<Span> = triples.iter().flat_map(|t| [t.subject, t.object]).collect();
    let normal = all_entities.len() == 2 * triples.len();

    Some(OverlapFlags { normal, seo, epo })
}

/// Dense row-major `rows × cols` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.cols + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

/// Start/end grids of a relation-specific tagger conditioned on one span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelGrids {
    pub start: Grid,
    pub end: Grid,
}

impl RelGrids {
    pub fn zeros(relations: usize, len: usize) -> Self {
        Self {
            start: Grid::zeros(relations, len),
            end: Grid::zeros(relations, len),
        }
    }
}

/// Binary gold targets for every tagger head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagTensors {
    pub sub_start: Vec<f64>,
    pub sub_end: Vec<f64>,
    pub obj_start: Vec<f64>,
    pub obj_end: Vec<f64>,
    pub rel_labels: Vec<f64>,
    /// Gold subjects, aligned with `rel_obj`.
    pub subjects: Vec<Span>,
    /// Per gold subject: its objects under each relation.
    pub rel_obj: Vec<RelGrids>,
    /// Gold objects, aligned with `rel_sub`.
    pub objects: Vec<Span>,
    /// Per gold object: its subjects under each relation.
    pub rel_sub: Vec<RelGrids>,
}

pub fn build_gold_tensors(example: &Example, num_relations: usize) -> Result<TagTensors> {
    let l = example.len();
    for t in &example.triples {
        t.subject.validate(l)?;
        t.object.validate(l)?;
        if t.relation >= num_relations {
            return Err(Error::Config(format!(
                "relation id {} outside vocabulary of {num_relations}",
                t.relation
            )));
        }
    }
    let mut sub_start = vec![0.0; l];
    let mut sub_end = vec![0.0; l];
    let mut obj_start = vec![0.0; l];
    let mut obj_end = vec![0.0; l];
    let mut rel_labels = vec![0.0; num_relations];
    for t in &example.triples {
        sub_start[t.subject.start] = 1.0;
        sub_end[t.subject.end] = 1.0;
        obj_start[t.object.start] = 1.0;
        obj_end[t.object.end] = 1.0;
        rel_labels[t.relation] = 1.0;
    }

    let subjects = example.gold_subjects();
    let rel_obj = subjects
        .iter()
        .map(|s| {
            let mut g = RelGrids::zeros(num_relations, l);
            for t in example.triples.iter().filter(|t| t.subject == *s) {
                g.start.set(t.relation, t.object.start, 1.0);
                g.end.set(t.relation, t.object.end, 1.0);
            }
            g
        })
        .collect();

    let objects = example.gold_objects();
    let rel_sub = objects
        .iter()
        .map(|o| {
            let mut g = RelGrids::zeros(num_relations, l);
            for t in example.triples.iter().filter(|t| t.object == *o) {
                g.start.set(t.relation, t.subject.start, 1.0);
                g.end.set(t.relation, t.subject.end, 1.0);
            }
            g
        })
        .collect();

    Ok(TagTensors {
        sub_start,
        sub_end,
        obj_start,
        obj_end,
        rel_labels,
        subjects,
        rel_obj,
        objects,
        rel_sub,
    })
}

/// Sentence, triple, overlap-class and bucket counts of an aligned corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub triples: usize,
    pub relations: usize,
    pub normal: usize,
    pub seo: usize,
    pub epo: usize,
    pub no_triples: usize,
    pub buckets: [usize; 5],
    pub load: LoadReport,
    pub align: AlignReport,
}

/// An aligned corpus sharing one relation vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: RelationVocab,
    pub standard: MatchStandard,
    pub examples: Vec<Example>,
}

impl Corpus {
    /// Aligns every raw example, accumulating drop counters.
    pub fn align(
        dataset: &Dataset,
        vocab: &RelationVocab,
        tokenizer: &dyn Tokenizer,
        max_len: usize,
    ) -> Result<(Corpus, AlignReport)> {
        let mut total = AlignReport::default();
        let mut examples = Vec::with_capacity(dataset.examples.len());
        for raw in &dataset.examples {
            let (ex, rep) = tokenize_align(raw, vocab, tokenizer, max_len)?;
            total.dropped_truncated += rep.dropped_truncated;
            total.dropped_unaligned += rep.dropped_unaligned;
            examples.push(ex);
        }
        Ok((
            Corpus {
                vocab: vocab.clone(),
                standard: dataset.standard,
                examples,
            },
            total,
        ))
    }

    pub fn stats(&self) -> CorpusStats {
        let mut s = CorpusStats {
            sentences: self.examples.len(),
            relations: self.vocab.len(),
            ..Default::default()
        };
        for ex in &self.examples {
            s.triples += ex.triples.len();
            match ex.overlap {
                Some(f) => {
                    s.normal += f.normal as usize;
                    s.seo += f.seo as usize;
                    s.epo += f.epo as usize;
                }
                None => s.no_triples += 1,
            }
            if let Some(b) = ex.bucket {
                s.buckets[b as usize] += 1;
            }
        }
        s
    }

    /// Re-expresses relation ids against another vocabulary (by label).
    pub fn remap(&self, target: &RelationVocab) -> Result<Corpus> {
        let mut mapping = Vec::with_capacity(self.vocab.len());
        for label in self.vocab.labels() {
            mapping.push(
                target
                    .id(label)
                    .ok_or_else(|| Error::UnknownRelation(label.clone()))?,
            );
        }
        let examples = self
            .examples
            .iter()
            .map(|ex| {
                let mut ex = ex.clone();
                for t in &mut ex.triples {
                    t.relation = mapping[t.relation];
                }
                ex
            })
            .collect();
        Ok(Corpus {
            vocab: target.clone(),
            standard: self.standard,
            examples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}
