//! Exact-match span scoring.
//!
//! A predicted span is correct only when `(start, end, polarity)` equals a
//! gold span. Scores are micro-averaged over the corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oei::{Example, Polarity, SpanSet};
use crate::par;

/// Raw match counts; precision/recall/F1 derive from these.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl Counts {
    pub fn plus(self, other: Counts) -> Counts {
        Counts { tp: self.tp + other.tp, pred: self.pred + other.pred, gold: self.gold + other.gold }
    }

    /// Precision, recall and F1. Both totals zero scores 1/1/1; a zero
    /// denominator otherwise yields 0 for that ratio.
    pub fn prf(&self) -> Prf {
        if self.pred == 0 && self.gold == 0 {
            return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let precision = if self.pred == 0 { 0.0 } else { self.tp as f64 / self.pred as f64 };
        let recall = if self.gold == 0 { 0.0 } else { self.tp as f64 / self.gold as f64 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarityScore {
    pub counts: Counts,
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub label: String,
    pub sentences: usize,
    pub counts: Counts,
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub pred_count: usize,
    pub gold_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_polarity: BTreeMap<Polarity, PolarityScore>,
    pub per_bucket: Vec<BucketScore>,
}

impl EvalReport {
    pub fn from_counts(overall: Counts, per_polarity: BTreeMap<Polarity, Counts>) -> Self {
        let prf = overall.prf();
        EvalReport {
            tp: overall.tp,
            pred_count: overall.pred,
            gold_count: overall.gold,
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            per_polarity: per_polarity
                .into_iter()
                .map(|(p, c)| (p, PolarityScore { counts: c, prf: c.prf() }))
                .collect(),
            per_bucket: Vec::new(),
        }
    }

    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, pred: self.pred_count, gold: self.gold_count }
    }

    /// Aligned plain-text table, percentages with two decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, name: &str, c: Counts, prf: Prf, extra: &str| {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}{}",
                name,
                pct(prf.precision),
                pct(prf.recall),
                pct(prf.f1),
                c.tp,
                c.pred,
                c.gold,
                extra
            );
        };
        let _ =
            writeln!(out, "{:<10} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}", "scope", "P", "R", "F1", "tp", "pred", "gold");
        row(
            &mut out,
            "overall",
            self.counts(),
            Prf { precision: self.precision, recall: self.recall, f1: self.f1 },
            "",
        );
        for (pol, s) in &self.per_polarity {
            row(&mut out, pol.manifest_name(), s.counts, s.prf, "");
        }
        for b in &self.per_bucket {
            row(&mut out, &format!("len {}", b.label), b.counts, b.prf, &format!("  n={}", b.sentences));
        }
        out
    }

    /// `key=value` lines, one metric per line.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut out = String::new();
        let put = |out: &mut String, scope: &str, c: Counts, prf: Prf| {
            let _ = writeln!(out, "{prefix}{scope}.precision={}", pct(prf.precision));
            let _ = writeln!(out, "{prefix}{scope}.recall={}", pct(prf.recall));
            let _ = writeln!(out, "{prefix}{scope}.f1={}", pct(prf.f1));
            let _ = writeln!(out, "{prefix}{scope}.tp={}", c.tp);
            let _ = writeln!(out, "{prefix}{scope}.pred={}", c.pred);
            let _ = writeln!(out, "{prefix}{scope}.gold={}", c.gold);
        };
        put(&mut out, "overall", self.counts(), Prf { precision: self.precision, recall: self.recall, f1: self.f1 });
        for (pol, s) in &self.per_polarity {
            put(&mut out, pol.tag_name(), s.counts, s.prf);
        }
        for b in &self.per_bucket {
            put(&mut out, &format!("bucket[{}]", b.label), b.counts, b.prf);
            let _ = writeln!(out, "{prefix}bucket[{}].sentences={}", b.label, b.sentences);
        }
        out
    }
}

/// Percentage with two decimals, e.g. `0.84734 -> "84.73"`.
pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn pair_counts(gold: &SpanSet, pred: &SpanSet, pol: Option<Polarity>) -> Counts {
    let keep = |p: Polarity| pol.is_none_or(|want| want == p);
    Counts {
        tp: gold.intersection(pred).filter(|s| keep(s.polarity)).count(),
        pred: pred.iter().filter(|s| keep(s.polarity)).count(),
        gold: gold.iter().filter(|s| keep(s.polarity)).count(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    all: Counts,
    pos: Counts,
    neg: Counts,
}

impl Tally {
    fn add(self, o: Tally) -> Tally {
        Tally { all: self.all.plus(o.all), pos: self.pos.plus(o.pos), neg: self.neg.plus(o.neg) }
    }
}

const CHUNK: usize = 256;

/// Corpus-level micro P/R/F1 with a per-polarity breakdown.
///
/// Chunks are tallied in parallel and summed in chunk order; integer counts
/// make the result identical to a sequential pass.
pub fn score(pairs: &[(SpanSet, SpanSet)]) -> EvalReport {
    let chunks: Vec<&[(SpanSet, SpanSet)]> = pairs.chunks(CHUNK).collect();
    let tallies = par::map(&chunks, |chunk| {
        chunk.iter().fold(Tally::default(), |t, (g, p)| {
            t.add(Tally {
                all: pair_counts(g, p, None),
                pos: pair_counts(g, p, Some(Polarity::Pos)),
                neg: pair_counts(g, p, Some(Polarity::Neg)),
            })
        })
    });
    let total = tallies.into_iter().fold(Tally::default(), Tally::add);
    let mut per = BTreeMap::new();
    per.insert(Polarity::Pos, total.pos);
    per.insert(Polarity::Neg, total.neg);
    EvalReport::from_counts(total.all, per)
}

/// Brute-force reference for [`score`]: materializes every triple and counts
/// equal pairs with nested loops. Used only to cross-check the fast path.
pub fn oracle_score(pairs: &[(SpanSet, SpanSet)]) -> EvalReport {
    let mut tp = [0usize; 3];
    let mut npred = [0usize; 3];
    let mut ngold = [0usize; 3];
    let slot = |p: Polarity| if p == Polarity::Pos { 1 } else { 2 };
    for (gold, pred) in pairs {
        let g: Vec<(usize, usize, Polarity)> = gold.iter().map(|s| (s.start, s.end, s.polarity)).collect();
        let p: Vec<(usize, usize, Polarity)> = pred.iter().map(|s| (s.start, s.end, s.polarity)).collect();
        for a in &g {
            ngold[0] += 1;
            ngold[slot(a.2)] += 1;
        }
        for b in &p {
            npred[0] += 1;
            npred[slot(b.2)] += 1;
            for a in &g {
                if a == b {
                    tp[0] += 1;
                    tp[slot(a.2)] += 1;
                }
            }
        }
    }
    let prf = |k: usize| -> (f64, f64, f64) {
        if npred[k] == 0 && ngold[k] == 0 {
            return (1.0, 1.0, 1.0);
        }
        let p = if npred[k] > 0 { tp[k] as f64 / npred[k] as f64 } else { 0.0 };
        let r = if ngold[k] > 0 { tp[k] as f64 / ngold[k] as f64 } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    };
    let mut per_polarity = BTreeMap::new();
    for (k, pol) in [(1, Polarity::Pos), (2, Polarity::Neg)] {
        let (precision, recall, f1) = prf(k);
        per_polarity.insert(
            pol,
            PolarityScore {
                counts: Counts { tp: tp[k], pred: npred[k], gold: ngold[k] },
                prf: Prf { precision, recall, f1 },
            },
        );
    }
    let (precision, recall, f1) = prf(0);
    EvalReport {
        tp: tp[0],
        pred_count: npred[0],
        gold_count: ngold[0],
        precision,
        recall,
        f1,
        per_polarity,
        per_bucket: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("{examples} examples but {preds} prediction sets")]
    LengthMismatch { examples: usize, preds: usize },
    #[error("bucket edges must be positive and strictly increasing")]
    BadEdges,
}

/// Sentence-length buckets matching the `1-8 / 9-16 / >16` breakdown.
pub const DEFAULT_EDGES: [usize; 2] = [8, 16];

pub fn bucket_labels(edges: &[usize]) -> Vec<String> {
    let mut labels = Vec::with_capacity(edges.len() + 1);
    let mut lo = 1;
    for &e in edges {
        labels.push(format!("{lo}-{e}"));
        lo = e + 1;
    }
    labels.push(format!(">{}", edges.last().copied().unwrap_or(0)));
    labels
}

pub fn bucket_of(len: usize, edges: &[usize]) -> usize {
    edges.iter().position(|&e| len <= e).unwrap_or(edges.len())
}

/// Scores each sentence-length bucket independently.
pub fn bucket_report(examples: &[Example], preds: &[SpanSet], edges: &[usize]) -> Result<Vec<BucketScore>, ScoreError> {
    if examples.len() != preds.len() {
        return Err(ScoreError::LengthMismatch { examples: examples.len(), preds: preds.len() });
    }
    if edges.first() == Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ScoreError::BadEdges);
    }
    let labels = bucket_labels(edges);
    let mut groups: Vec<Vec<(SpanSet, SpanSet)>> = vec![Vec::new(); labels.len()];
    for (ex, pred) in examples.iter().zip(preds) {
        groups[bucket_of(ex.tokens.len(), edges)].push((ex.gold.clone(), pred.clone()));
    }
    Ok(labels
        .into_iter()
        .zip(groups)
        .map(|(label, pairs)| {
            let r = score(&pairs);
            BucketScore { label, sentences: pairs.len(), counts: r.counts(), prf: r.counts().prf() }
        })
        .collect())
}
