//! Triple-level scoring under the Partial and Exact match standards.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{CountBucket, Example, SpanTriple};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStandard {
    /// Relation plus the head (first token) of both entities.
    Partial,
    /// Relation plus both full entity spans.
    #[default]
    Exact,
}

impl std::str::FromStr for MatchStandard {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "partial" => Ok(MatchStandard::Partial),
            "exact" => Ok(MatchStandard::Exact),
            other => Err(Error::Config(format!("unknown match standard `{other}`"))),
        }
    }
}

/// The fields two triples must share to count as a match.
type MatchKey = (usize, usize, usize, usize, usize);

fn key(t: &SpanTriple, standard: MatchStandard) -> MatchKey {
    match standard {
        MatchStandard::Exact => (
            t.subject.start,
            t.subject.end,
            t.relation,
            t.object.start,
            t.object.end,
        ),
        MatchStandard::Partial => (t.subject.start, 0, t.relation, t.object.start, 0),
    }
}

pub fn match_triple(pred: &SpanTriple, gold: &SpanTriple, standard: MatchStandard) -> bool {
    key(pred, standard) == key(gold, standard)
}

/// Number of predictions matched to distinct gold triples in one sentence.
///
/// Matching is an equivalence on [`MatchKey`], so a maximum one-to-one
/// assignment pairs `min(#pred, #gold)` triples within each key class.
pub fn true_positives(pred: &[SpanTriple], gold: &[SpanTriple], standard: MatchStandard) -> usize {
    let mut counts: HashMap<MatchKey, (usize, usize)> = HashMap::new();
    for t in pred {
        counts.entry(key(t, standard)).or_default().0 += 1;
    }
    for t in gold {
        counts.entry(key(t, standard)).or_default().1 += 1;
    }
    counts.values().map(|(p, g)| (*p).min(*g)).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            predicted,
            gold,
        }
    }
}

/// Micro-averaged precision, recall and F1 over aligned sentence lists.
pub fn micro_prf(
    preds: &[Vec<SpanTriple>],
    golds: &[Vec<SpanTriple>],
    standard: MatchStandard,
) -> Result<Prf> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch {
            expected: golds.len(),
            actual: preds.len(),
        });
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        tp += true_positives(p, g, standard);
        np += p.len();
        ng += g.len();
    }
    Ok(Prf::from_counts(tp, np, ng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    /// Sentences in the category.
    pub support: usize,
    /// Absent when the category is empty.
    pub scores: Option<Prf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub standard: MatchStandard,
    pub sentences: usize,
    pub overall: Prf,
    pub by_overlap: BTreeMap<String, CategoryRow>,
    pub by_count: BTreeMap<String, CategoryRow>,
}

pub const OVERLAP_CLASSES: [&str; 3] = ["Normal", "SEO", "EPO"];

fn category_row(
    preds: &[Vec<SpanTriple>],
    examples: &[Example],
    standard: MatchStandard,
    member: impl Fn(&Example) -> bool,
) -> CategoryRow {
    let (mut tp, mut np, mut ng, mut support) = (0, 0, 0, 0);
    for (p, ex) in preds.iter().zip(examples) {
        if member(ex) {
            support += 1;
            tp += true_positives(p, &ex.triples, standard);
            np += p.len();
            ng += ex.triples.len();
        }
    }
    CategoryRow {
        support,
        scores: (support > 0).then(|| Prf::from_counts(tp, np, ng)),
    }
}

/// Scores predictions against a corpus, overall and per overlap class / triple-count bucket.
pub fn report(
    preds: &[Vec<SpanTriple>],
    examples: &[Example],
    standard: MatchStandard,
) -> Result<EvalReport> {
    let golds: Vec<Vec<SpanTriple>> = examples.iter().map(|e| e.triples.clone()).collect();
    let overall = micro_prf(preds, &golds, standard)?;

    let mut by_overlap = BTreeMap::new();
    by_overlap.insert(
        "Normal".to_string(),
        category_row(preds, examples, standard, |e| e.overlap.is_some_and(|f| f.normal)),
    );
    by_overlap.insert(
        "SEO".to_string(),
        category_row(preds, examples, standard, |e| e.overlap.is_some_and(|f| f.seo)),
    );
    by_overlap.insert(
        "EPO".to_string(),
        category_row(preds, examples, standard, |e| e.overlap.is_some_and(|f| f.epo)),
    );

    let mut by_count = BTreeMap::new();
    for b in CountBucket::ALL {
        by_count.insert(
            b.label().to_string(),
            category_row(preds, examples, standard, |e| e.bucket == Some(b)),
        );
    }

    Ok(EvalReport {
        standard,
        sentences: examples.len(),
        overall,
        by_overlap,
        by_count,
    })
}

impl EvalReport {
    /// Plain-text table: overall P/R/F1 followed by per-category F1.
    pub fn render(&self) -> String {
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        let mut out = String::new();
        let std = match self.standard {
            MatchStandard::Partial => "Partial Match",
            MatchStandard::Exact => "Exact Match",
        };
        let _ = writeln!(out, "{std} ({} sentences)", self.sentences);
        let _ = writeln!(out, "{:<8} {:>7} {:>7} {:>7}", "", "Prec.", "Rec.", "F1");
        let _ = writeln!(
            out,
            "{:<8} {:>7} {:>7} {:>7}",
            "overall",
            pct(self.overall.precision),
            pct(self.overall.recall),
            pct(self.overall.f1)
        );
        let _ = writeln!(out);

        let mut header = String::new();
        let mut values = String::new();
        let mut support = String::new();
        let cols = OVERLAP_CLASSES
            .iter()
            .map(|c| (c.to_string(), &self.by_overlap[*c]))
            .chain(
                CountBucket::ALL
                    .iter()
                    .map(|b| (b.label().to_string(), &self.by_count[b.label()])),
            );
        for (name, row) in cols {
            let _ = write!(header, "{name:>8}");
            let cell = row.scores.map(|s| pct(s.f1)).unwrap_or_else(|| "-".into());
            let _ = write!(values, "{cell:>8}");
            let _ = write!(support, "{:>8}", row.support);
        }
        let _ = writeln!(out, "{:<8}{header}", "");
        let _ = writeln!(out, "{:<8}{values}", "F1");
        let _ = writeln!(out, "{:<8}{support}", "support");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{classify_overlap, Span};

    fn t(s: (usize, usize), r: usize, o: (usize, usize)) -> SpanTriple {
        SpanTriple::new(Span::new(s.0, s.1), r, Span::new(o.0, o.1))
    }

    fn example(triples: Vec<SpanTriple>) -> Example {
        Example {
            text: String::new(),
            tokens: vec![String::new(); 10],
            offsets: vec![(0, 0); 10],
            overlap: classify_overlap(&triples),
            bucket: CountBucket::of(triples.len()),
            triples,
        }
    }

    #[test]
    fn identical_triples_match_under_both() {
        let a = t((0, 1), 2, (4, 5));
        assert!(match_triple(&a, &a, MatchStandard::Exact));
        assert!(match_triple(&a, &a, MatchStandard::Partial));
    }

    #[test]
    fn longer_subject_matches_partial_only() {
        let gold = t((0, 0), 2, (4, 5));
        let pred = t((0, 1), 2, (4, 5));
        assert!(match_triple(&pred, &gold, MatchStandard::Partial));
        assert!(!match_triple(&pred, &gold, MatchStandard::Exact));
    }

    #[test]
    fn wrong_relation_never_matches() {
        let gold = t((0, 0), 2, (4, 5));
        let pred = t((0, 0), 1, (4, 5));
        assert!(!match_triple(&pred, &gold, MatchStandard::Partial));
        assert!(!match_triple(&pred, &gold, MatchStandard::Exact));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let g = vec![vec![t((0, 0), 0, (2, 2)), t((0, 0), 1, (3, 3))]];
        let p = micro_prf(&g, &g, MatchStandard::Exact).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn half_right() {
        let gold = vec![vec![t((0, 0), 0, (2, 2)), t((0, 0), 1, (3, 3))]];
        let pred = vec![vec![t((0, 0), 0, (2, 2)), t((5, 5), 1, (3, 3))]];
        let p = micro_prf(&pred, &gold, MatchStandard::Exact).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn no_predictions() {
        let gold = vec![vec![t((0, 0), 0, (2, 2))]];
        let p = micro_prf(&[vec![]], &gold, MatchStandard::Partial).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn gold_matched_at_most_once() {
        // Two partial-equivalent predictions against one gold triple.
        let gold = vec![vec![t((0, 0), 0, (2, 2))]];
        let pred = vec![vec![t((0, 0), 0, (2, 2)), t((0, 1), 0, (2, 3))]];
        let p = micro_prf(&pred, &gold, MatchStandard::Partial).unwrap();
        assert_eq!(p.tp, 1);
        assert_eq!(p.precision, 0.5);
    }

    #[test]
    fn single_normal_sentence_report() {
        let ex = example(vec![t((0, 0), 0, (2, 2))]);
        let preds = vec![ex.triples.clone()];
        let r = report(&preds, &[ex], MatchStandard::Exact).unwrap();
        assert_eq!(r.by_overlap["Normal"].scores.unwrap().f1, 1.0);
        assert_eq!(r.by_overlap["SEO"].support, 0);
        assert_eq!(r.by_overlap["EPO"].scores, None);
        assert_eq!(r.by_count["N=1"].support, 1);
        let table = r.render();
        assert!(table.contains("Normal") && table.contains("100.0"));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(micro_prf(&[vec![]], &[], MatchStandard::Exact).is_err());
    }
}
