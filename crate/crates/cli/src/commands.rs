//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use stoei::checkpoint;
use stoei::dataset::{self, Manifest};
use stoei::model::{Group, ModelConfig, ModelParams, Vocab};
use stoei::scorer::{self, pct};
use stoei::trainer::{self, DevSet, EpochMetrics, Prediction};
use stoei::{Example, Polarity};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{AnalyzeArgs, BuildDataArgs, EvalArgs, GradCheckArgs, OutArg, PretrainArgs, ScoreArgs, TrainArgs};

pub const ENV_OUT: &str = "STOEI_OUT";
const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn out_dir(arg: &OutArg, command: &str) -> Result<PathBuf, CliError> {
    let dir = match &arg.out {
        Some(d) => d.clone(),
        None => std::env::var_os(ENV_OUT).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")).join(command),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.tsv"))
}

/// Appends one JSON line per epoch.
struct MetricLog {
    file: fs::File,
    path: PathBuf,
    error: Option<CliError>,
}

impl MetricLog {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(Self { file, path, error: None })
    }

    fn record(&mut self, tag: &str, m: &EpochMetrics) {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(self.file, "{line}") {
            self.error.get_or_insert(CliError::io(&self.path, e));
        }
        let dev = m.dev_f1.map(|f| format!(" dev_f1={}", pct(f))).unwrap_or_default();
        eprintln!("[{tag}] epoch {:>2} loss={:.4}{dev}", m.epoch, m.train_loss);
    }

    fn finish(self) -> Result<(), CliError> {
        self.error.map_or(Ok(()), Err)
    }
}

pub fn build_data(args: &BuildDataArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(None, config)?;
    if let Some(n) = args.size {
        cfg.data.size = n;
    }
    if let Some(f) = args.ambiguous_fraction {
        cfg.data.ambiguous_fraction = f;
    }
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    let out = out_dir(&args.out, "data")?;
    cfg.save(&out)?;
    let all = dataset::build_synthetic(&cfg.data, &out)?;
    dataset::save_manifest(&all, &out.join("manifest.tsv"))?;
    let parts = dataset::split(&all, cfg.split.ratios, cfg.split.seed)?;
    let mut rows = Vec::new();
    for (name, part) in SPLITS.iter().zip(&parts) {
        dataset::save_manifest(part, &split_path(&out, name))?;
        rows.push((*name, dataset::stats(part)?));
    }
    rows.push(("total", dataset::stats(&all)?));
    let mut text = dataset::stats_table(&rows);
    let ambiguous: Vec<Example> = all.rows.iter().filter(|r| r.ambiguous).cloned().collect();
    if !ambiguous.is_empty() {
        text.push('\n');
        text += &lexeme_table(&ambiguous);
    }
    write(&out.join("stats.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Per-phrase polarity counts with the positive share.
fn lexeme_table(rows: &[Example]) -> String {
    let counts = dataset::lexeme_polarity_counts(rows);
    let mut out = format!("{:<18} {:>6} {:>6} {:>7}\n", "ambiguous phrase", "#POS", "#NEG", "POS %");
    for (phrase, [p, n]) in counts {
        let share = if p + n == 0 { 0.0 } else { p as f64 / (p + n) as f64 };
        let _ = writeln!(out, "{:<18} {:>6} {:>6} {:>7}", phrase, p, n, pct(share));
    }
    out
}

fn load_split(data: &Path, split: &str) -> Result<Manifest, CliError> {
    Ok(dataset::load_manifest(&split_path(data, split))?)
}

fn pretrain_into(cfg: &RunConfig, train_rows: &[Example], out: &Path) -> Result<(ModelParams, Vocab), CliError> {
    let vocab = trainer::build_vocab(&cfg.data.lexicon, train_rows);
    let model_cfg = ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
    model_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let mut log = MetricLog::create(out.join("pretrain_metrics.jsonl"))?;
    let base = trainer::pretrain_base(
        &model_cfg,
        &vocab,
        &cfg.data.lexicon,
        cfg.data.ambiguous_fraction,
        &cfg.pretrain,
        |m| log.record("pretrain", m),
    )?;
    log.finish()?;
    checkpoint::save(&base, &vocab, &out.join("base.ckpt"))?;
    Ok((base, vocab))
}

pub fn pretrain(args: &PretrainArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(Some(&args.data), config)?;
    if let Some(e) = args.epochs {
        cfg.pretrain.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.pretrain.seed = s;
    }
    let out = out_dir(&args.out, "pretrain")?;
    cfg.save(&out)?;
    let train = load_split(&args.data, "train")?;
    pretrain_into(&cfg, &train.rows, &out)?;
    println!("base checkpoint: {}", out.join("base.ckpt").display());
    Ok(())
}

pub fn train(args: &TrainArgs, config: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(Some(&args.data), config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let out = out_dir(&args.out, if args.text_only { "train-text" } else { "train" })?;
    cfg.save(&out)?;
    let train_m = load_split(&args.data, "train")?;
    let dev_m = load_split(&args.data, "dev")?;

    let (base, vocab) = match &args.base {
        Some(p) => checkpoint::load(p)?,
        None => pretrain_into(&cfg, &train_m.rows, &out)?,
    };
    let mut params = ModelParams::init_seeded(&base.config, !args.text_only, cfg.train.seed);
    params.load_base_from(&base);

    let train_s = trainer::featurize(&train_m, &vocab, &params)?;
    let dev_s = trainer::featurize(&dev_m, &vocab, &params)?;
    let mut log = MetricLog::create(out.join("metrics.jsonl"))?;
    let outcome = trainer::train(
        &mut params,
        &train_s,
        Some(DevSet { samples: &dev_s, rows: &dev_m.rows }),
        &vocab,
        &cfg.train,
        Group::Trainable,
        |m| log.record("train", m),
    )?;
    log.finish()?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&outcome.best, &vocab, &ckpt)?;
    let (trainable, frozen) = (params.count(Group::Trainable), params.count(Group::Frozen));
    println!(
        "parameters: trainable {trainable} / total {} ({}%)",
        trainable + frozen,
        pct(trainable as f64 / (trainable + frozen) as f64)
    );
    println!("best epoch {} dev F1 {}", outcome.best_epoch, outcome.best_dev_f1.map(pct).unwrap_or_else(|| "-".into()));
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

type Subset = (&'static str, fn(&Example) -> bool);

/// Overall/polarity/length table, ambiguity subsets and decode diagnostics.
pub fn eval_report(preds: &[Prediction], rows: &[Example]) -> (String, String) {
    let overall = trainer::report(preds, rows);
    let mut table = overall.to_table();
    let mut kv = overall.to_kv("");
    let subsets: [Subset; 2] = [("ambiguous", |r| r.ambiguous), ("lexical", |r| !r.ambiguous)];
    for (name, keep) in subsets {
        let n = rows.iter().filter(|r| keep(r)).count();
        if n == 0 {
            continue;
        }
        let rep = trainer::report_subset(preds, rows, keep);
        let _ = writeln!(
            table,
            "{:<10} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}  n={n}",
            name,
            pct(rep.precision),
            pct(rep.recall),
            pct(rep.f1),
            rep.tp,
            rep.pred_count,
            rep.gold_count
        );
        let sub = scorer::EvalReport { per_polarity: BTreeMap::new(), per_bucket: Vec::new(), ..rep };
        kv += &sub.to_kv(&format!("{name}."));
    }
    let mismatched = preds.iter().filter(|p| p.token_mismatch).count();
    let dropped: usize = preds.iter().map(|p| p.dropped).sum();
    let _ = writeln!(table, "sentences {}  token mismatches {mismatched}  dropped spans {dropped}", rows.len());
    let _ = writeln!(kv, "sentences={}\ntoken_mismatches={mismatched}\ndropped_spans={dropped}", rows.len());
    (table, kv)
}

fn write_reports(out: &Path, preds: &[Prediction], rows: &[Example]) -> Result<String, CliError> {
    let (table, kv) = eval_report(preds, rows);
    let mut tsv = String::new();
    for p in preds {
        let _ = writeln!(tsv, "{}\t{}", p.id, p.tagged);
    }
    write(&out.join("predictions.tsv"), &tsv)?;
    write(&out.join("report.txt"), &table)?;
    write(&out.join("report.kv"), &kv)?;
    Ok(table)
}

pub fn eval(args: &EvalArgs, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(Some(&args.data), config)?;
    let (params, vocab) = checkpoint::load(&args.model)?;
    let manifest = load_split(&args.data, &args.split)?;
    let out = out_dir(&args.out, "eval")?;
    let samples = trainer::featurize(&manifest, &vocab, &params)?;
    let preds = trainer::predict(&params, &vocab, &samples, &manifest.rows, cfg.train.max_new_tokens)?;
    print!("{}", write_reports(&out, &preds, &manifest.rows)?);
    Ok(())
}

/// Reads `id<TAB>tagged` lines; ids absent from the file predict nothing.
fn read_predictions(path: &Path, gold: &Manifest) -> Result<Vec<Prediction>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    let known: BTreeMap<&str, ()> = gold.rows.iter().map(|r| (r.id.as_str(), ())).collect();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| CliError::Data(format!("{}: line {}: {m}", path.display(), i + 1));
        let (id, tagged) = line.split_once('\t').ok_or_else(|| bad("expected `id<TAB>tagged`".into()))?;
        if !known.contains_key(id) {
            return Err(bad(format!("unknown id {id:?}")));
        }
        if by_id.insert(id, tagged).is_some() {
            return Err(bad(format!("duplicate id {id:?}")));
        }
    }
    Ok(gold
        .rows
        .iter()
        .map(|r| trainer::decode_prediction(&r.id, &r.tokens, by_id.get(r.id.as_str()).copied().unwrap_or("")))
        .collect())
}

pub fn score(args: &ScoreArgs) -> Result<(), CliError> {
    let gold = dataset::load_manifest(&args.gold)?;
    let preds = read_predictions(&args.pred, &gold)?;
    let table = match &args.out.out {
        Some(_) => write_reports(&out_dir(&args.out, "score")?, &preds, &gold.rows)?,
        None => eval_report(&preds, &gold.rows).0,
    };
    print!("{table}");
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let gold = dataset::load_manifest(&args.gold)?;
    let name = args.gold.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    let mut text = dataset::stats_table(&[(name, dataset::stats(&gold)?)]);

    let _ = writeln!(text, "\n{:<10} {:>7} {:>7} {:>7}", "length", "#Sent", "#POS", "#NEG");
    let labels = scorer::bucket_labels(&scorer::DEFAULT_EDGES);
    let mut buckets = vec![[0usize; 3]; labels.len()];
    for r in &gold.rows {
        let b = &mut buckets[scorer::bucket_of(r.tokens.len(), &scorer::DEFAULT_EDGES)];
        b[0] += 1;
        b[1] += r.gold.iter().filter(|s| s.polarity == Polarity::Pos).count();
        b[2] += r.gold.iter().filter(|s| s.polarity == Polarity::Neg).count();
    }
    for (label, [s, p, n]) in labels.iter().zip(&buckets) {
        let _ = writeln!(text, "{label:<10} {s:>7} {p:>7} {n:>7}");
    }
    let ambiguous: Vec<Example> = gold.rows.iter().filter(|r| r.ambiguous).cloned().collect();
    let _ = writeln!(text, "\nambiguous sentences {} of {}", ambiguous.len(), gold.rows.len());
    if !ambiguous.is_empty() {
        text += &lexeme_table(&ambiguous);
    }
    if let Some(p) = &args.pred {
        let preds = read_predictions(p, &gold)?;
        text.push('\n');
        text += &eval_report(&preds, &gold.rows).0;
    }
    print!("{text}");
    Ok(())
}

pub fn grad_check(args: &GradCheckArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let (params, batch) = trainer::micro_batch(args.seed)?;
    let refs: Vec<_> = batch.iter().collect();
    let groups: &[Group] = if args.all { &[Group::Frozen, Group::Trainable] } else { &[Group::Trainable] };
    let checks = trainer::grad_check(&params, &refs, groups, args.coords, args.step, args.seed)?;
    println!("{:<28} {:<9} {:>6} {:>12}", "tensor", "group", "coords", "max rel err");
    let mut worst: f64 = 0.0;
    for c in &checks {
        println!("{:<28} {:<9} {:>6} {:>12.3e}", c.name, c.group.as_str(), c.coords, c.max_rel_error);
        worst = worst.max(c.max_rel_error);
    }
    println!("max relative error {worst:.3e} over {} tensors in {:.1}s", checks.len(), start.elapsed().as_secs_f64());
    if worst < args.tolerance {
        Ok(())
    } else {
        Err(CliError::Check(format!("max relative error {worst:.3e} exceeds {:.1e}", args.tolerance)))
    }
}
