//! Inline-tag output template.
//!
//! A tagged sentence is the source tokens joined by single spaces with every
//! opinion span wrapped as `<pos>first ... last</pos>` (or `neg`). Markers
//! abut the span's first and last token. This is the exact string the model
//! is trained to emit and the string parsed back at evaluation time.

use std::fmt;

use thiserror::Error;

use crate::oei::{tokenize, validate_spans, OpinionSpan, Polarity, SpanError, SpanSet, TokenSeq};

pub const POS_OPEN: &str = "<pos>";
pub const POS_CLOSE: &str = "</pos>";
pub const NEG_OPEN: &str = "<neg>";
pub const NEG_CLOSE: &str = "</neg>";

/// All four marker strings, in vocabulary order.
pub const MARKERS: [&str; 4] = [POS_OPEN, POS_CLOSE, NEG_OPEN, NEG_CLOSE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

/// A single lexical item of tagged text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Open(Polarity),
    Close(Polarity),
}

impl Piece {
    pub fn as_str(&self) -> &str {
        match self {
            Piece::Word(w) => w,
            Piece::Open(p) => open_marker(*p),
            Piece::Close(p) => close_marker(*p),
        }
    }
}

pub fn open_marker(p: Polarity) -> &'static str {
    match p {
        Polarity::Pos => POS_OPEN,
        Polarity::Neg => NEG_OPEN,
    }
}

pub fn close_marker(p: Polarity) -> &'static str {
    match p {
        Polarity::Pos => POS_CLOSE,
        Polarity::Neg => NEG_CLOSE,
    }
}

fn marker_piece(s: &str) -> Option<Piece> {
    match s {
        POS_OPEN => Some(Piece::Open(Polarity::Pos)),
        POS_CLOSE => Some(Piece::Close(Polarity::Pos)),
        NEG_OPEN => Some(Piece::Open(Polarity::Neg)),
        NEG_CLOSE => Some(Piece::Close(Polarity::Neg)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    Nested,
    Unclosed,
    MismatchedClose,
    UnopenedClose,
    EmptyRegion,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::Nested => "open tag inside an open region",
            Violation::Unclosed => "tag never closed",
            Violation::MismatchedClose => "close tag polarity differs from open tag",
            Violation::UnopenedClose => "close tag without an open region",
            Violation::EmptyRegion => "tagged region is empty",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("invalid spans: {0}")]
    InvalidSpans(#[from] SpanError),
    /// `position` is the byte offset of the offending marker (or the input
    /// length for an unclosed tag).
    #[error("malformed template at byte {position}: {rule}")]
    MalformedTemplate { position: usize, rule: Violation },
    #[error("decoded tokens diverge from source at token {index}")]
    TokenMismatch { index: usize },
}

/// Splits tagged text into words and markers, recording each piece's byte
/// offset. Markers split words even without surrounding whitespace; leftover
/// angle brackets inside words are sanitized like [`tokenize`].
pub fn lex(text: &str) -> Vec<(usize, Piece)> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;
    let flush = |word: &mut String, start: usize, out: &mut Vec<(usize, Piece)>| {
        if !word.is_empty() {
            for t in tokenize(word).into_inner() {
                out.push((start, Piece::Word(t)));
            }
            word.clear();
        }
    };
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if let Some(m) = MARKERS.iter().find(|m| rest.starts_with(**m)) {
            flush(&mut word, word_start, &mut out);
            out.push((i, marker_piece(m).expect("known marker")));
            i += m.len();
            continue;
        }
        let ch = rest.chars().next().expect("non-empty rest");
        if ch.is_whitespace() {
            flush(&mut word, word_start, &mut out);
        } else {
            if word.is_empty() {
                word_start = i;
            }
            word.push(ch);
        }
        i += ch.len_utf8();
    }
    flush(&mut word, word_start, &mut out);
    out
}

/// Renders pieces in canonical spacing: single spaces between pieces except
/// directly after an open marker and directly before a close marker.
pub fn render(pieces: &[Piece]) -> String {
    let mut out = String::new();
    let mut prev: Option<&Piece> = None;
    for piece in pieces {
        let glue = matches!(prev, Some(Piece::Open(_))) || matches!(piece, Piece::Close(_));
        if prev.is_some() && !glue {
            out.push(' ');
        }
        out.push_str(piece.as_str());
        prev = Some(piece);
    }
    out
}

/// Pieces for a gold sentence; `render` of the result is `encode_tagged`.
pub fn tagged_pieces(tokens: &TokenSeq, spans: &SpanSet) -> Result<Vec<Piece>, TemplateError> {
    validate_spans(tokens, spans)?;
    let mut pieces = Vec::with_capacity(tokens.len() + 2 * spans.len());
    let mut spans = spans.iter().peekable();
    let mut open: Option<OpinionSpan> = None;
    for (i, tok) in tokens.iter().enumerate() {
        if let Some(s) = spans.next_if(|s| s.start == i) {
            pieces.push(Piece::Open(s.polarity));
            open = Some(*s);
        }
        pieces.push(Piece::Word(tok.clone()));
        if let Some(s) = open.filter(|s| s.end == i + 1) {
            pieces.push(Piece::Close(s.polarity));
            open = None;
        }
    }
    Ok(pieces)
}

pub fn encode_tagged(tokens: &TokenSeq, spans: &SpanSet) -> Result<String, TemplateError> {
    Ok(render(&tagged_pieces(tokens, spans)?))
}

/// Strips markers and returns the tokens plus spans indexed into them.
pub fn parse_tagged(tagged: &str, mode: ParseMode) -> Result<(TokenSeq, SpanSet), TemplateError> {
    parse_pieces(&lex(tagged), tagged.len(), mode)
}

/// Parser over pre-lexed pieces; `end_pos` is reported for unclosed tags.
pub fn parse_pieces(
    pieces: &[(usize, Piece)],
    end_pos: usize,
    mode: ParseMode,
) -> Result<(TokenSeq, SpanSet), TemplateError> {
    let strict = mode == ParseMode::Strict;
    let malformed = |position, rule| TemplateError::MalformedTemplate { position, rule };
    let mut words: Vec<String> = Vec::new();
    let mut spans = SpanSet::new();
    // (polarity, start token, marker offset)
    let mut open: Option<(Polarity, usize, usize)> = None;

    let close_region = |spans: &mut SpanSet, pol: Polarity, start: usize, end: usize, at: usize| {
        if end > start {
            spans.insert(OpinionSpan::new(start, end, pol));
            Ok(())
        } else if strict {
            Err(malformed(at, Violation::EmptyRegion))
        } else {
            Ok(())
        }
    };

    for (pos, piece) in pieces {
        match piece {
            Piece::Word(w) => words.push(w.clone()),
            Piece::Open(p) => {
                if let Some((pol, start, _)) = open.take() {
                    if strict {
                        return Err(malformed(*pos, Violation::Nested));
                    }
                    close_region(&mut spans, pol, start, words.len(), *pos)?;
                }
                open = Some((*p, words.len(), *pos));
            }
            Piece::Close(p) => match open.take() {
                Some((pol, start, _)) => {
                    if pol != *p && strict {
                        return Err(malformed(*pos, Violation::MismatchedClose));
                    }
                    close_region(&mut spans, pol, start, words.len(), *pos)?;
                }
                None => {
                    if strict {
                        return Err(malformed(*pos, Violation::UnopenedClose));
                    }
                }
            },
        }
    }
    if let Some((pol, start, _)) = open {
        if strict {
            return Err(malformed(end_pos, Violation::Unclosed));
        }
        close_region(&mut spans, pol, start, words.len(), end_pos)?;
    }
    Ok((TokenSeq::from_tokens(words), spans))
}

/// Longest-common-subsequence alignment of `decoded` onto `source`.
/// Entry `i` is the source index decoded token `i` maps to, if any. Among
/// optimal alignments the one using the earliest source indices is chosen.
pub fn lcs_alignment(source: &[String], decoded: &[String]) -> Vec<Option<usize>> {
    let (n, m) = (decoded.len(), source.len());
    // suffix table: best[i][j] = LCS(decoded[i..], source[j..])
    let w = m + 1;
    let mut best = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            best[i * w + j] = if decoded[i] == source[j] {
                1 + best[(i + 1) * w + j + 1]
            } else {
                best[(i + 1) * w + j].max(best[i * w + j + 1])
            };
        }
    }
    let mut out = vec![None; n];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if decoded[i] == source[j] && best[i * w + j] == 1 + best[(i + 1) * w + j + 1] {
            out[i] = Some(j);
            i += 1;
            j += 1;
        } else if best[(i + 1) * w + j] == best[i * w + j] {
            // dropping the decoded token keeps source[j] available
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Maps spans over `decoded` back onto `source`.
pub fn align_to_source(
    source: &TokenSeq,
    decoded: &TokenSeq,
    spans: &SpanSet,
    mode: ParseMode,
) -> Result<SpanSet, TemplateError> {
    validate_spans(decoded, spans)?;
    match mode {
        ParseMode::Strict => {
            let first_diff = source
                .iter()
                .zip(decoded.iter())
                .position(|(a, b)| a != b)
                .or_else(|| (source.len() != decoded.len()).then(|| source.len().min(decoded.len())));
            match first_diff {
                Some(index) => Err(TemplateError::TokenMismatch { index }),
                None => Ok(spans.clone()),
            }
        }
        ParseMode::Lenient => {
            let map = lcs_alignment(source.as_slice(), decoded.as_slice());
            let mut out = SpanSet::new();
            'spans: for span in spans {
                let mut prev: Option<usize> = None;
                for &m in &map[span.start..span.end] {
                    let Some(src) = m else { continue 'spans };
                    if prev.is_some_and(|p| src != p + 1) {
                        continue 'spans;
                    }
                    prev = Some(src);
                }
                let first = map[span.start].expect("aligned");
                out.insert(OpinionSpan::new(first, first + span.len(), span.polarity));
            }
            Ok(out)
        }
    }
}
