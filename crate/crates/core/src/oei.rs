//! Domain types shared by every stage: polarity, opinion spans, token
//! sequences and corpus examples.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentiment carried by an opinion expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    pub const ALL: [Polarity; 2] = [Polarity::Pos, Polarity::Neg];

    /// Lowercase form used inside tagged templates.
    pub fn tag_name(self) -> &'static str {
        match self {
            Polarity::Pos => "pos",
            Polarity::Neg => "neg",
        }
    }

    /// Uppercase form used in manifests.
    pub fn manifest_name(self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neg => "NEG",
        }
    }

    pub fn flipped(self) -> Polarity {
        match self {
            Polarity::Pos => Polarity::Neg,
            Polarity::Neg => Polarity::Pos,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.manifest_name())
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "POS" | "pos" => Ok(Polarity::Pos),
            "NEG" | "neg" => Ok(Polarity::Neg),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

/// Half-open token span `[start, end)` with a polarity.
///
/// Ordering is lexicographic on `(start, end, polarity)`, which is also the
/// order spans appear in a sentence when they do not overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpinionSpan {
    pub start: usize,
    pub end: usize,
    pub polarity: Polarity,
}

impl OpinionSpan {
    pub fn new(start: usize, end: usize, polarity: Polarity) -> Self {
        Self { start, end, polarity }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &OpinionSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl fmt::Display for OpinionSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.start, self.end, self.polarity)
    }
}

/// A set of spans over one sentence.
pub type SpanSet = BTreeSet<OpinionSpan>;

/// Whitespace-word token sequence. Tokens are non-empty and carry no
/// whitespace or angle brackets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    /// Wraps already-clean tokens. Tokens are sanitized the same way
    /// [`tokenize`] does, so the invariant holds regardless of input.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(tokens.into_iter().flat_map(|t| tokenize(t.as_ref()).0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.0.get(i).map(String::as_str)
    }

    pub fn push(&mut self, token: &str) {
        self.0.extend(tokenize(token).0);
    }

    /// Space-joined surface form.
    pub fn join(&self) -> String {
        self.0.join(" ")
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

impl std::ops::Index<usize> for TokenSeq {
    type Output = str;

    fn index(&self, i: usize) -> &str {
        &self.0[i]
    }
}

impl<'a> IntoIterator for &'a TokenSeq {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// One corpus row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub tokens: TokenSeq,
    /// Audio path relative to the manifest directory.
    pub audio: Option<PathBuf>,
    pub gold: SpanSet,
    /// Set when the opinion words are polarity-neutral and the label is
    /// carried by the audio alone.
    pub ambiguous: bool,
}

impl Example {
    pub fn validate(&self) -> Result<(), SpanError> {
        validate_spans(&self.tokens, &self.gold)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpanError {
    #[error("span {0} is out of bounds")]
    OutOfBounds(OpinionSpan),
    #[error("span {0} is empty")]
    EmptySpan(OpinionSpan),
    #[error("span {0} overlaps {1}")]
    Overlap(OpinionSpan, OpinionSpan),
}

impl SpanError {
    pub fn span(&self) -> OpinionSpan {
        match self {
            SpanError::OutOfBounds(s) | SpanError::EmptySpan(s) | SpanError::Overlap(s, _) => *s,
        }
    }
}

/// Splits on whitespace runs and replaces `<`/`>` with `(`/`)`.
pub fn tokenize(text: &str) -> TokenSeq {
    TokenSeq(text.split_whitespace().map(|w| w.replace('<', "(").replace('>', ")")).collect())
}

/// Checks bounds, emptiness and pairwise disjointness. Spans are visited in
/// set order and the first violation is returned.
pub fn validate_spans<'a, I>(tokens: &TokenSeq, spans: I) -> Result<(), SpanError>
where
    I: IntoIterator<Item = &'a OpinionSpan>,
{
    let mut sorted: Vec<OpinionSpan> = spans.into_iter().copied().collect();
    sorted.sort();
    let mut prev: Option<OpinionSpan> = None;
    for span in sorted {
        if span.is_empty() {
            return Err(SpanError::EmptySpan(span));
        }
        if span.end > tokens.len() {
            return Err(SpanError::OutOfBounds(span));
        }
        if let Some(p) = prev {
            if p.overlaps(&span) {
                return Err(SpanError::Overlap(span, p));
            }
        }
        prev = Some(span);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(n: usize) -> TokenSeq {
        TokenSeq::from_tokens((0..n).map(|i| format!("w{i}")))
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("the movie was great").into_inner(), ["the", "movie", "was", "great"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a  <b>").into_inner(), ["a", "(b)"]);
    }

    #[test]
    fn validate_examples() {
        let pos = Polarity::Pos;
        assert!(validate_spans(&seq(4), &[OpinionSpan::new(3, 4, pos)]).is_ok());
        assert_eq!(
            validate_spans(&seq(4), &[OpinionSpan::new(3, 5, pos)]),
            Err(SpanError::OutOfBounds(OpinionSpan::new(3, 5, pos)))
        );
        let err =
            validate_spans(&seq(6), &[OpinionSpan::new(1, 3, pos), OpinionSpan::new(2, 4, Polarity::Neg)]).unwrap_err();
        assert!(matches!(err, SpanError::Overlap(..)));
        assert_eq!(err.span(), OpinionSpan::new(2, 4, Polarity::Neg));
        assert_eq!(
            validate_spans(&seq(6), &[OpinionSpan::new(2, 2, pos)]),
            Err(SpanError::EmptySpan(OpinionSpan::new(2, 2, pos)))
        );
    }

    #[test]
    fn nested_spans_rejected() {
        let spans = [OpinionSpan::new(0, 5, Polarity::Pos), OpinionSpan::new(1, 2, Polarity::Pos)];
        assert!(matches!(validate_spans(&seq(6), &spans), Err(SpanError::Overlap(..))));
    }

    #[test]
    fn polarity_surface_forms() {
        assert_eq!(Polarity::Pos.tag_name(), "pos");
        assert_eq!(Polarity::Neg.manifest_name(), "NEG");
        assert_eq!("NEG".parse::<Polarity>(), Ok(Polarity::Neg));
        assert!("Neutral".parse::<Polarity>().is_err());
    }

    fn arb_valid() -> impl Strategy<Value = (usize, Vec<OpinionSpan>)> {
        (1usize..30)
            .prop_flat_map(|n| (Just(n), proptest::collection::vec((0..n, 1usize..4, any::<bool>()), 0..6)))
            .prop_map(|(n, raw)| {
                // Greedy left-to-right placement keeps the spans disjoint.
                let mut starts: Vec<_> = raw;
                starts.sort();
                let mut spans = Vec::new();
                let mut cursor = 0;
                for (s, len, pos) in starts {
                    let start = s.max(cursor);
                    let end = (start + len).min(n);
                    if start < end {
                        let pol = if pos { Polarity::Pos } else { Polarity::Neg };
                        spans.push(OpinionSpan::new(start, end, pol));
                        cursor = end;
                    }
                }
                (n, spans)
            })
    }

    proptest! {
        #[test]
        fn valid_spans_pass_and_stretched_fail((n, spans) in arb_valid(), pick in any::<prop::sample::Index>(), extra in 1usize..5) {
            let tokens = seq(n);
            prop_assert!(validate_spans(&tokens, &spans).is_ok());
            if !spans.is_empty() {
                let mut broken = spans.clone();
                let i = pick.index(broken.len());
                broken[i].end = n + extra;
                prop_assert!(validate_spans(&tokens, &broken).is_err());
            }
        }

        #[test]
        fn tokenize_idempotent(text in "[ a-z<>\\t\\n]{0,40}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join());
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.iter().all(|t| !t.is_empty() && !t.contains('<') && !t.contains('>')));
        }
    }
}
