//! Word-level vocabulary with reserved specials and the four tag markers.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::oei::TokenSeq;
use crate::template::{self, Piece, MARKERS};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Ids 4..8 hold `<pos> </pos> <neg> </neg>`.
pub const FIRST_MARKER: usize = 4;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Task prompt prepended to every sentence.
pub const PROMPT: [&str; 3] = ["extract", "opinions", ":"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials, markers, prompt words, then the sorted corpus words.
    pub fn build<'a, I>(corpus: I) -> Self
    where
        I: IntoIterator<Item = &'a TokenSeq>,
    {
        let mut seen = BTreeSet::new();
        for seq in corpus {
            for w in seq {
                seen.insert(w.clone());
            }
        }
        let mut words: Vec<String> = SPECIALS.iter().chain(MARKERS.iter()).map(|s| s.to_string()).collect();
        for w in PROMPT {
            seen.remove(w);
            words.push(w.to_string());
        }
        let fresh: Vec<String> = seen.into_iter().filter(|w| !words.contains(w)).collect();
        words.extend(fresh);
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn is_marker(id: usize) -> bool {
        (FIRST_MARKER..FIRST_MARKER + 4).contains(&id)
    }

    /// Prompt followed by the sentence.
    pub fn prefix_ids(&self, tokens: &TokenSeq) -> Vec<usize> {
        PROMPT.iter().map(|w| self.id(w)).chain(tokens.iter().map(|w| self.id(w))).collect()
    }

    /// `BOS`, the tagged pieces, `EOS`.
    pub fn target_ids(&self, pieces: &[Piece]) -> Vec<usize> {
        std::iter::once(BOS).chain(pieces.iter().map(|p| self.id(p.as_str()))).chain(std::iter::once(EOS)).collect()
    }

    /// Renders generated ids (without BOS/EOS) back into tagged text.
    /// Specials other than markers are skipped.
    pub fn render(&self, ids: &[usize]) -> String {
        let pieces: Vec<Piece> = ids
            .iter()
            .filter(|&&id| id >= FIRST_MARKER || id == UNK)
            .map(|&id| {
                template::lex(self.word(id)).into_iter().next().map(|(_, p)| p).unwrap_or(Piece::Word("(unk)".into()))
            })
            .collect();
        template::render(&pieces)
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oei::{tokenize, OpinionSpan, Polarity, SpanSet};

    #[test]
    fn layout_and_round_trip() {
        let s = tokenize("the movie was great");
        let v = Vocab::build([&s]);
        assert_eq!(v.word(PAD), "<pad>");
        assert_eq!(v.id("<pos>"), FIRST_MARKER);
        assert_eq!(v.id("</neg>"), FIRST_MARKER + 3);
        assert_eq!(v.id("extract"), 8);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.len(), 8 + 3 + 4);

        let spans: SpanSet = [OpinionSpan::new(3, 4, Polarity::Pos)].into_iter().collect();
        let pieces = template::tagged_pieces(&s, &spans).unwrap();
        let ids = v.target_ids(&pieces);
        assert_eq!(ids.first(), Some(&BOS));
        assert_eq!(ids.last(), Some(&EOS));
        assert_eq!(v.render(&ids[1..ids.len() - 1]), "the movie was <pos>great</pos>");
        assert_eq!(v.prefix_ids(&s).len(), 7);
    }
}
