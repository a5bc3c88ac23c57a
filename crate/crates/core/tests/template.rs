use proptest::prelude::*;
use stoei::template::{self, ParseMode, MARKERS};
use stoei::{validate_spans, OpinionSpan, Polarity, SpanSet, TokenSeq};

const WORDS: &[&str] = &["the", "movie", "was", "great", "so", "bad", "wild", "a", "(x)", "i'm", "and"];

fn arb_pair() -> impl Strategy<Value = (TokenSeq, SpanSet)> {
    (1usize..25).prop_flat_map(|n| {
        let tokens = prop::collection::vec(prop::sample::select(WORDS), n);
        let cuts = prop::collection::vec((0..n, 1usize..4, any::<bool>()), 0..5);
        (tokens, cuts).prop_map(move |(tokens, cuts)| {
            let tokens = TokenSeq::from_tokens(tokens);
            let mut spans = SpanSet::new();
            for (start, len, pos) in cuts {
                let s = OpinionSpan::new(start, (start + len).min(n), if pos { Polarity::Pos } else { Polarity::Neg });
                if spans.iter().all(|o| !o.overlaps(&s)) {
                    spans.insert(s);
                }
            }
            (tokens, spans)
        })
    })
}

fn arb_noise() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        prop::sample::select(MARKERS.to_vec()).prop_map(str::to_string),
        prop::sample::select(WORDS).prop_map(str::to_string),
        Just("<".to_string()),
        Just(">".to_string()),
        Just("</".to_string()),
        Just(" ".to_string()),
        "[a-z<>/ ]{0,6}",
        any::<char>().prop_map(|c| c.to_string()),
    ];
    prop::collection::vec(piece, 0..30).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn strict_round_trip((tokens, spans) in arb_pair()) {
        let tagged = template::encode_tagged(&tokens, &spans).unwrap();
        let (t2, s2) = template::parse_tagged(&tagged, ParseMode::Strict).unwrap();
        prop_assert_eq!(t2, tokens);
        prop_assert_eq!(s2, spans);
    }

    #[test]
    fn lenient_parse_is_total(text in arb_noise()) {
        let (tokens, spans) = template::parse_tagged(&text, ParseMode::Lenient).unwrap();
        prop_assert!(validate_spans(&tokens, &spans).is_ok());
    }

    #[test]
    fn lenient_agrees_with_strict_on_valid_input((tokens, spans) in arb_pair()) {
        let tagged = template::encode_tagged(&tokens, &spans).unwrap();
        prop_assert_eq!(
            template::parse_tagged(&tagged, ParseMode::Lenient).unwrap(),
            template::parse_tagged(&tagged, ParseMode::Strict).unwrap()
        );
    }

    #[test]
    fn alignment_of_identical_text_is_identity((tokens, spans) in arb_pair()) {
        for mode in [ParseMode::Strict, ParseMode::Lenient] {
            prop_assert_eq!(template::align_to_source(&tokens, &tokens, &spans, mode).unwrap(), spans.clone());
        }
    }

    #[test]
    fn lcs_alignment_is_monotone_and_matching(
        a in prop::collection::vec(prop::sample::select(WORDS), 0..15),
        b in prop::collection::vec(prop::sample::select(WORDS), 0..15),
    ) {
        let a: Vec<String> = a.into_iter().map(String::from).collect();
        let b: Vec<String> = b.into_iter().map(String::from).collect();
        let map = template::lcs_alignment(&a, &b);
        prop_assert_eq!(map.len(), b.len());
        let hits: Vec<(usize, usize)> = map.iter().enumerate().filter_map(|(i, m)| m.map(|j| (i, j))).collect();
        for &(i, j) in &hits {
            prop_assert_eq!(&b[i], &a[j]);
        }
        for w in hits.windows(2) {
            prop_assert!(w[0].1 < w[1].1);
        }
    }

    #[test]
    fn lenient_alignment_preserves_span_text(
        (decoded, spans) in arb_pair(),
        extra in prop::collection::vec(prop::sample::select(WORDS), 0..25),
    ) {
        // source = decoded with words interleaved; every span maps to equal text
        let mut source = Vec::new();
        for (i, t) in decoded.iter().enumerate() {
            if let Some(w) = extra.get(i) {
                source.push(w.to_string());
            }
            source.push(t.clone());
        }
        let source = TokenSeq::from_tokens(source);
        let aligned = template::align_to_source(&source, &decoded, &spans, ParseMode::Lenient).unwrap();
        prop_assert!(validate_spans(&source, &aligned).is_ok());
        prop_assert!(aligned.len() <= spans.len());
        for a in &aligned {
            let text = &source.as_slice()[a.start..a.end];
            prop_assert!(spans.iter().any(|s| s.polarity == a.polarity && &decoded.as_slice()[s.start..s.end] == text));
        }
    }
}
