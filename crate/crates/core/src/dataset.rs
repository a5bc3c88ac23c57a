//! Synthetic speech+text opinion corpora: generation, manifests, splits and
//! corpus statistics.
//!
//! Sentences come from a closed clause grammar. Lexical examples use
//! polar opinion words whose polarity matches the audio. Ambiguous examples
//! use polarity-neutral opinion words and are generated as twins: the same
//! text once with every span positive and once negative, so the text carries
//! no information about the label and only the prosody does.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, MisalignConfig, ProsodyConfig};
use crate::oei::{tokenize, Example, OpinionSpan, Polarity, SpanError, SpanSet, TokenSeq};
use crate::par;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("lexicon class {0:?} is empty")]
    EmptyVocab(&'static str),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: String, source: std::io::Error },
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("missing audio file {0}")]
    MissingAudio(PathBuf),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("bad corpus config: {0}")]
    BadConfig(String),
    #[error("row {id}: {source}")]
    InvalidRow { id: String, source: SpanError },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::IoFailure { path: path.display().to_string(), source }
}

/// Word classes of the clause grammar. Every entry is a space-separated
/// phrase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lexicon {
    pub subjects: Vec<String>,
    pub copulas: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
    /// Opinion phrases with no lexical polarity.
    pub neutral: Vec<String>,
    /// Non-opinion predicates.
    pub descriptive: Vec<String>,
    pub fillers: Vec<String>,
    pub connectives: Vec<String>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            subjects: strings(&[
                "the movie",
                "this film",
                "the actor",
                "the story",
                "the music",
                "the ending",
                "the plot",
                "her voice",
                "the scene",
                "the cast",
                "the director",
                "his performance",
            ]),
            copulas: strings(&["was", "is", "seemed", "felt"]),
            positive: strings(&[
                "great",
                "wonderful",
                "brilliant",
                "delightful",
                "really good",
                "so moving",
                "amazing",
                "charming",
            ]),
            negative: strings(&["terrible", "awful", "boring", "dull", "really bad", "so painful", "horrible", "weak"]),
            neutral: strings(&[
                "surprising",
                "intense",
                "unexpected",
                "something else",
                "unbelievable",
                "quite a ride",
                "different",
                "wild",
            ]),
            descriptive: strings(&["long", "loud", "in color", "shown yesterday", "two hours", "in french"]),
            fillers: strings(&["honestly", "i think", "to be fair", "overall", "in the end", "well"]),
            connectives: strings(&["and", "but", "while", "although"]),
        }
    }
}

impl Lexicon {
    fn check(&self, ambiguous_fraction: f64) -> Result<(), DatasetError> {
        let required: [(&'static str, &Vec<String>, bool); 7] = [
            ("subjects", &self.subjects, true),
            ("copulas", &self.copulas, true),
            ("descriptive", &self.descriptive, true),
            ("connectives", &self.connectives, true),
            ("positive", &self.positive, ambiguous_fraction < 1.0),
            ("negative", &self.negative, ambiguous_fraction < 1.0),
            ("neutral", &self.neutral, ambiguous_fraction > 0.0),
        ];
        for (name, class, needed) in required {
            if needed && class.iter().all(|p| tokenize(p).is_empty()) {
                return Err(DatasetError::EmptyVocab(name));
            }
        }
        Ok(())
    }

    /// Every opinion phrase, tokenized.
    pub fn opinion_phrases(&self) -> impl Iterator<Item = TokenSeq> + '_ {
        self.positive.iter().chain(&self.negative).chain(&self.neutral).map(|p| tokenize(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    pub ambiguous_fraction: f64,
    pub seed: u64,
    pub lexicon: Lexicon,
    pub prosody: ProsodyConfig,
    pub misalign: MisalignConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 2700,
            ambiguous_fraction: 0.5,
            seed: 7,
            lexicon: Lexicon::default(),
            prosody: ProsodyConfig::default(),
            misalign: MisalignConfig::default(),
        }
    }
}

/// A text example plus the seed its audio is synthesized from.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRow {
    pub example: Example,
    pub audio_seed: u64,
}

#[derive(Clone, Copy)]
enum Mode {
    Lexical,
    Ambiguous,
}

fn pick<'a>(rng: &mut ChaCha8Rng, class: &'a [String]) -> &'a str {
    let live: Vec<&String> = class.iter().filter(|p| !tokenize(p).is_empty()).collect();
    live[rng.random_range(0..live.len())]
}

/// One sentence; spans are opened on opinion clauses only. Ambiguous
/// sentences get placeholder polarity `Pos`, flipped later for the twin.
fn gen_sentence(rng: &mut ChaCha8Rng, lex: &Lexicon, mode: Mode) -> (TokenSeq, SpanSet) {
    let n_clauses = match rng.random_range(0..20) {
        0..=6 => 1,
        7..=14 => 2,
        _ => 3,
    };
    let forced = rng.random_range(0..n_clauses);
    let mut tokens = TokenSeq::new();
    let mut spans = SpanSet::new();
    if !lex.fillers.is_empty() && rng.random_bool(0.3) {
        tokens.push(pick(rng, &lex.fillers));
    }
    for c in 0..n_clauses {
        if c > 0 {
            for t in &tokenize(pick(rng, &lex.connectives)) {
                tokens.push(t);
            }
        }
        for t in tokenize(pick(rng, &lex.subjects)).iter().chain(tokenize(pick(rng, &lex.copulas)).iter()) {
            tokens.push(t);
        }
        let opinion = match mode {
            Mode::Ambiguous => c == forced || rng.random_bool(0.6),
            Mode::Lexical => rng.random_bool(0.7),
        };
        let (phrase, polarity) = if !opinion {
            (pick(rng, &lex.descriptive), None)
        } else {
            match mode {
                Mode::Ambiguous => (pick(rng, &lex.neutral), Some(Polarity::Pos)),
                Mode::Lexical => {
                    if rng.random_bool(0.5) {
                        (pick(rng, &lex.positive), Some(Polarity::Pos))
                    } else {
                        (pick(rng, &lex.negative), Some(Polarity::Neg))
                    }
                }
            }
        };
        let start = tokens.len();
        for t in &tokenize(phrase) {
            tokens.push(t);
        }
        if let Some(p) = polarity {
            spans.insert(OpinionSpan::new(start, tokens.len(), p));
        }
    }
    (tokens, spans)
}

fn with_polarity(spans: &SpanSet, p: Polarity) -> SpanSet {
    spans.iter().map(|s| OpinionSpan::new(s.start, s.end, p)).collect()
}

/// Text side of the corpus, deterministic in `seed`. Ids are `ex00000`...
/// in output order.
pub fn generate_text(
    size: usize,
    ambiguous_fraction: f64,
    lex: &Lexicon,
    seed: u64,
) -> Result<Vec<TextRow>, DatasetError> {
    if size == 0 {
        return Err(DatasetError::BadConfig("size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&ambiguous_fraction) {
        return Err(DatasetError::BadConfig(format!("ambiguous_fraction {ambiguous_fraction} not in [0,1]")));
    }
    lex.check(ambiguous_fraction)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let n_amb = (size as f64 * ambiguous_fraction).round() as usize;
    let mut rows = Vec::with_capacity(size);
    let mut push = |tokens: TokenSeq, gold: SpanSet, ambiguous: bool, audio_seed: u64| {
        rows.push(TextRow { example: Example { id: String::new(), tokens, audio: None, gold, ambiguous }, audio_seed })
    };
    for pair in 0..n_amb.div_ceil(2) {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let audio_seed = master.random();
        let (tokens, spans) = gen_sentence(&mut rng, lex, Mode::Ambiguous);
        let first = if master.random_bool(0.5) { Polarity::Pos } else { Polarity::Neg };
        push(tokens.clone(), with_polarity(&spans, first), true, audio_seed);
        if 2 * pair + 1 < n_amb {
            push(tokens, with_polarity(&spans, first.flipped()), true, audio_seed);
        }
    }
    for _ in 0..size - n_amb {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let audio_seed = master.random();
        let (tokens, spans) = gen_sentence(&mut rng, lex, Mode::Lexical);
        push(tokens, spans, false, audio_seed);
    }
    rows.shuffle(&mut master);
    for (i, r) in rows.iter_mut().enumerate() {
        r.example.id = format!("ex{i:05}");
    }
    Ok(rows)
}

/// A list of examples plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<Example>,
    pub meta: BTreeMap<String, String>,
    /// Directory audio paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn audio_path(&self, ex: &Example) -> Option<PathBuf> {
        ex.audio.as_ref().map(|a| self.root.join(a))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ambiguous_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.rows.iter().filter(|r| r.ambiguous).count() as f64 / self.rows.len() as f64
        }
    }
}

pub const AUDIO_DIR: &str = "audio";

/// Generates the corpus and writes one wav per example under
/// `out_dir/audio/`. Row order depends only on the seed.
pub fn build_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest, DatasetError> {
    let rows = generate_text(cfg.size, cfg.ambiguous_fraction, &cfg.lexicon, cfg.seed)?;
    let audio_dir = out_dir.join(AUDIO_DIR);
    fs::create_dir_all(&audio_dir).map_err(io_err(&audio_dir))?;
    let examples = par::try_map(&rows, |row| -> Result<Example, DatasetError> {
        let ex = &row.example;
        let clean = audio::synth_utterance(&ex.tokens, &ex.gold, &cfg.prosody, row.audio_seed)?;
        let wav = audio::add_misalignment(
            &clean,
            cfg.misalign.max_shift,
            cfg.misalign.max_interjection,
            row.audio_seed ^ 0x9e37_79b9_7f4a_7c15,
        );
        let rel = PathBuf::from(AUDIO_DIR).join(format!("{}.wav", ex.id));
        audio::write_wav(&wav, &out_dir.join(&rel))?;
        Ok(Example { audio: Some(rel), ..ex.clone() })
    })?;
    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), serde_json::to_string(cfg).expect("config serializes"));
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("split".into(), "all".into());
    Ok(Manifest { rows: examples, meta, root: out_dir.to_path_buf() })
}

fn format_spans(spans: &SpanSet) -> String {
    spans.iter().map(|s| format!("{}:{}:{}", s.start, s.end, s.polarity.manifest_name())).collect::<Vec<_>>().join(";")
}

fn parse_spans(field: &str) -> Result<SpanSet, String> {
    let mut out = SpanSet::new();
    for item in field.split(';').filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        let [s, e, p] = parts[..] else {
            return Err(format!("span {item:?} is not start:end:POL"));
        };
        let start = s.parse().map_err(|_| format!("bad start in {item:?}"))?;
        let end = e.parse().map_err(|_| format!("bad end in {item:?}"))?;
        let pol = match p {
            "POS" => Polarity::Pos,
            "NEG" => Polarity::Neg,
            _ => return Err(format!("bad polarity in {item:?}")),
        };
        if !out.insert(OpinionSpan::new(start, end, pol)) {
            return Err(format!("duplicate span {item:?}"));
        }
    }
    Ok(out)
}

/// One manifest record: `id \t tokens \t audio \t spans \t ambiguous`.
pub fn format_row(ex: &Example) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}",
        ex.id,
        ex.tokens.join(),
        ex.audio.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default(),
        format_spans(&ex.gold),
        if ex.ambiguous { 1 } else { 0 }
    )
}

fn parse_row(line: &str) -> Result<Example, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let [id, tokens, audio, spans, flag] = fields[..] else {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    };
    if id.is_empty() {
        return Err("empty id".into());
    }
    let tokens = tokenize(tokens);
    let gold = parse_spans(spans)?;
    crate::oei::validate_spans(&tokens, &gold).map_err(|e| e.to_string())?;
    let ambiguous = match flag {
        "1" => true,
        "0" => false,
        other => return Err(format!("bad ambiguity flag {other:?}")),
    };
    Ok(Example {
        id: id.to_string(),
        tokens,
        audio: (!audio.is_empty()).then(|| PathBuf::from(audio)),
        gold,
        ambiguous,
    })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for (k, v) in &manifest.meta {
        let _ = writeln!(out, "# {k}={v}");
    }
    for ex in &manifest.rows {
        out.push_str(&format_row(ex));
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

/// Loads a manifest; audio paths resolve against the manifest's directory
/// and must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = Manifest { root, ..Default::default() };
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if let Some(meta) = line.strip_prefix('#') {
            if let Some((k, v)) = meta.trim_start().split_once('=') {
                manifest.meta.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_row(&line).map_err(|message| DatasetError::ParseError { line: line_no, message })?;
        if !ids.insert(ex.id.clone()) {
            return Err(DatasetError::ParseError { line: line_no, message: format!("duplicate id {}", ex.id) });
        }
        if let Some(p) = manifest.audio_path(&ex) {
            if !p.is_file() {
                return Err(DatasetError::MissingAudio(p));
            }
        }
        manifest.rows.push(ex);
    }
    Ok(manifest)
}

/// Stratified seeded partition into train/dev/test.
pub fn split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<[Manifest; 3], DatasetError> {
    if ratios.iter().any(|r| r.is_nan() || *r <= 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios.to_vec()));
    }
    let n = manifest.rows.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_dev = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let sizes = [n_train, n_dev, n - n_train - n_dev];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut amb: Vec<usize> = (0..n).filter(|&i| manifest.rows[i].ambiguous).collect();
    let mut lex: Vec<usize> = (0..n).filter(|&i| !manifest.rows[i].ambiguous).collect();
    amb.shuffle(&mut rng);
    lex.shuffle(&mut rng);

    let a = amb.len();
    let mut amb_sizes = [0usize; 3];
    for k in 0..2 {
        amb_sizes[k] = if n == 0 { 0 } else { (a as f64 * sizes[k] as f64 / n as f64).round() as usize };
    }
    amb_sizes[2] = a.saturating_sub(amb_sizes[0] + amb_sizes[1]);
    // keep every stratum count feasible
    for k in 0..3 {
        amb_sizes[k] = amb_sizes[k].min(sizes[k]);
    }
    let mut leftover = a - amb_sizes.iter().sum::<usize>();
    for k in 0..3 {
        let room = sizes[k] - amb_sizes[k];
        let take = room.min(leftover);
        amb_sizes[k] += take;
        leftover -= take;
    }

    let (mut ai, mut li) = (amb.into_iter(), lex.into_iter());
    let names = ["train", "dev", "test"];
    let parts: Vec<Manifest> = (0..3)
        .map(|k| {
            let mut idx: Vec<usize> = ai.by_ref().take(amb_sizes[k]).collect();
            idx.extend(li.by_ref().take(sizes[k] - amb_sizes[k]));
            idx.sort_unstable();
            let mut meta = manifest.meta.clone();
            meta.insert("split".into(), names[k].into());
            meta.insert("split_seed".into(), seed.to_string());
            Manifest {
                rows: idx.into_iter().map(|i| manifest.rows[i].clone()).collect(),
                meta,
                root: manifest.root.clone(),
            }
        })
        .collect();
    Ok(parts.try_into().expect("three parts"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub pos_span_count: usize,
    pub neg_span_count: usize,
    pub total_minutes: f64,
}

impl CorpusStats {
    /// Minutes rounded to one decimal for display.
    pub fn minutes_display(&self) -> String {
        format!("{:.1}", self.total_minutes)
    }
}

pub fn stats(manifest: &Manifest) -> Result<CorpusStats, DatasetError> {
    let mut s = CorpusStats { sentence_count: 0, pos_span_count: 0, neg_span_count: 0, total_minutes: 0.0 };
    let mut seconds = 0.0;
    for ex in &manifest.rows {
        s.sentence_count += 1;
        for span in &ex.gold {
            match span.polarity {
                Polarity::Pos => s.pos_span_count += 1,
                Polarity::Neg => s.neg_span_count += 1,
            }
        }
        if let Some(p) = manifest.audio_path(ex) {
            if !p.is_file() {
                return Err(DatasetError::MissingAudio(p));
            }
            seconds += audio::wav_duration(&p)?;
        }
    }
    s.total_minutes = seconds / 60.0;
    Ok(s)
}

/// Table in the `Dataset #Sent #POS #NEG Minutes` layout.
pub fn stats_table(rows: &[(&str, CorpusStats)]) -> String {
    let mut out = format!("{:<10} {:>7} {:>7} {:>7} {:>9}\n", "Dataset", "#Sent", "#POS", "#NEG", "Minutes");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>7} {:>7} {:>9}",
            name,
            s.sentence_count,
            s.pos_span_count,
            s.neg_span_count,
            s.minutes_display()
        );
    }
    out
}

/// Occurrence counts per `(opinion phrase, polarity)` over gold spans.
pub fn lexeme_polarity_counts(rows: &[Example]) -> BTreeMap<String, [usize; 2]> {
    let mut out: BTreeMap<String, [usize; 2]> = BTreeMap::new();
    for ex in rows {
        for s in &ex.gold {
            let phrase = ex.tokens.as_slice()[s.start..s.end].join(" ");
            let slot = if s.polarity == Polarity::Pos { 0 } else { 1 };
            out.entry(phrase).or_default()[slot] += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(size: usize, frac: f64, seed: u64) -> Vec<Example> {
        generate_text(size, frac, &Lexicon::default(), seed).unwrap().into_iter().map(|r| r.example).collect()
    }

    #[test]
    fn generated_rows_are_valid_and_varied() {
        let rows = texts(1000, 0.5, 3);
        assert_eq!(rows.len(), 1000);
        assert_eq!(rows.iter().filter(|r| r.ambiguous).count(), 500);
        for r in &rows {
            r.validate().unwrap();
            assert!(r.gold.len() <= 3);
            if r.ambiguous {
                assert!(!r.gold.is_empty());
                let pols: HashSet<_> = r.gold.iter().map(|s| s.polarity).collect();
                assert_eq!(pols.len(), 1);
            }
        }
        let lens: Vec<usize> = rows.iter().map(|r| r.tokens.len()).collect();
        assert!(lens.iter().any(|&l| l <= 8));
        assert!(lens.iter().any(|&l| (9..=16).contains(&l)));
        assert!(lens.iter().any(|&l| l > 16));
        assert!(rows.iter().any(|r| r.gold.is_empty()));
        assert_eq!(texts(1000, 0.5, 3), rows);
    }

    #[test]
    fn fully_ambiguous_lexemes_take_both_polarities() {
        let rows = texts(2000, 1.0, 7);
        for (lexeme, [p, n]) in lexeme_polarity_counts(&rows) {
            if p + n >= 10 {
                assert!(p >= 1 && n >= 1, "{lexeme}: {p}/{n}");
            }
        }
    }

    #[test]
    fn lexical_corpus_is_a_function_of_text() {
        let rows = texts(2000, 0.0, 7);
        for (lexeme, [p, n]) in lexeme_polarity_counts(&rows) {
            assert!(p == 0 || n == 0, "{lexeme}: {p}/{n}");
        }
    }

    #[test]
    fn ambiguous_subset_balanced_per_lexeme() {
        let rows = texts(4000, 0.5, 11);
        let amb: Vec<Example> = rows.into_iter().filter(|r| r.ambiguous).collect();
        let mut checked = 0;
        for (lexeme, [p, n]) in lexeme_polarity_counts(&amb) {
            if p + n >= 100 {
                let frac = p as f64 / (p + n) as f64;
                assert!((frac - 0.5).abs() <= 0.05, "{lexeme}: {p}/{n}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn empty_vocab_and_bad_config() {
        let lex = Lexicon { neutral: vec![], ..Default::default() };
        assert!(matches!(generate_text(10, 0.5, &lex, 1), Err(DatasetError::EmptyVocab("neutral"))));
        assert!(generate_text(10, 0.0, &lex, 1).is_ok());
        assert!(matches!(generate_text(0, 0.5, &Lexicon::default(), 1), Err(DatasetError::BadConfig(_))));
        assert!(matches!(generate_text(5, 1.5, &Lexicon::default(), 1), Err(DatasetError::BadConfig(_))));
    }

    fn manifest_of(rows: Vec<Example>) -> Manifest {
        Manifest { rows, ..Default::default() }
    }

    #[test]
    fn split_sizes_disjoint_stratified() {
        let m = manifest_of(texts(2000, 0.5, 5));
        let [tr, dv, te] = split(&m, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (1600, 200, 200));
        let mut ids: Vec<&str> = tr.rows.iter().chain(&dv.rows).chain(&te.rows).map(|r| r.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 2000);
        for part in [&tr, &dv, &te] {
            assert!((part.ambiguous_fraction() - 0.5).abs() <= 0.02);
        }
        assert_eq!(split(&m, [0.8, 0.1, 0.1], 1).unwrap(), [tr, dv, te]);
        assert!(matches!(split(&m, [0.8, 0.1, 0.2], 1), Err(DatasetError::BadRatios(_))));
        assert!(matches!(split(&m, [1.0, 0.0, 0.0], 1), Err(DatasetError::BadRatios(_))));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = manifest_of(texts(30, 0.5, 2));
        m.meta.insert("seed".into(), "2".into());
        let path = dir.path().join("m.tsv");
        save_manifest(&m, &path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.rows, m.rows);
        assert_eq!(back.meta, m.meta);

        // corrupt line 17 (one meta line, so row 16)
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[16] = "broken line".into();
        fs::write(&path, lines.join("\n")).unwrap();
        match load_manifest(&path) {
            Err(DatasetError::ParseError { line, .. }) => assert_eq!(line, 17),
            other => panic!("{other:?}"),
        }

        let mut with_audio = manifest_of(texts(3, 0.0, 2));
        with_audio.rows[1].audio = Some(PathBuf::from("audio/nope.wav"));
        save_manifest(&with_audio, &path).unwrap();
        match load_manifest(&path) {
            Err(DatasetError::MissingAudio(p)) => assert!(p.ends_with("audio/nope.wav")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn row_format_is_exact() {
        let ex = Example {
            id: "ex1".into(),
            tokens: tokenize("bad but fun"),
            audio: Some(PathBuf::from("audio/ex1.wav")),
            gold: [OpinionSpan::new(0, 1, Polarity::Neg), OpinionSpan::new(2, 3, Polarity::Pos)].into_iter().collect(),
            ambiguous: false,
        };
        assert_eq!(format_row(&ex), "ex1\tbad but fun\taudio/ex1.wav\t0:1:NEG;2:3:POS\t0");
        assert_eq!(parse_row(&format_row(&ex)).unwrap(), ex);
        assert!(parse_row("ex\ta b\t\t0:3:POS\t0").is_err());
    }

    #[test]
    fn empty_stats() {
        let s = stats(&Manifest::default()).unwrap();
        assert_eq!((s.sentence_count, s.pos_span_count, s.neg_span_count, s.total_minutes), (0, 0, 0, 0.0));
    }

    #[test]
    fn stats_minutes_from_audio() {
        let dir = tempfile::tempdir().unwrap();
        let a = audio::RawAudio::new(vec![0.0; 15200]);
        let mut rows = texts(10, 0.0, 1);
        for r in &mut rows {
            let rel = PathBuf::from(format!("{}.wav", r.id));
            audio::write_wav(&a, &dir.path().join(&rel)).unwrap();
            r.audio = Some(rel);
        }
        let m = Manifest { rows, root: dir.path().to_path_buf(), ..Default::default() };
        assert_eq!(stats(&m).unwrap().minutes_display(), "0.2");
    }
}
