//! Featurization, AdamW training, greedy-decode evaluation and finite
//! difference gradient checks.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError};
use crate::dataset::Manifest;
use crate::model::net::{self, RunOptions, Sample};
use crate::model::{Group, ModelError, ModelParams, Vocab};
use crate::oei::{Example, SpanSet};
use crate::par;
use crate::scorer::{self, EvalReport};
use crate::template::{self, ParseMode, TemplateError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became {loss} at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize, loss: f64 },
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("audio {path}: {source}")]
    Audio { path: String, source: AudioError },
    #[error("example {id}: {source}")]
    Template { id: String, source: TemplateError },
    #[error("example {0} has no audio but the model expects speech")]
    MissingAudio(String),
    #[error("data: {0}")]
    Data(#[from] crate::dataset::DatasetError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub per_token_mean: bool,
    /// Decoding budget for evaluation.
    pub max_new_tokens: usize,
    /// Epochs without dev improvement before stopping; 0 never stops early.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 2e-3,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 13,
            per_token_mean: false,
            max_new_tokens: 96,
            patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::BadConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 || self.clip_norm <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps and clip_norm must be positive, weight_decay non-negative");
        }
        Ok(())
    }
}

/// Token ids and (optionally) frozen speech features for every row.
pub fn featurize(manifest: &Manifest, vocab: &Vocab, params: &ModelParams) -> Result<Vec<Sample>> {
    par::try_map(&manifest.rows, |ex| featurize_one(ex, manifest, vocab, params))
}

fn featurize_one(ex: &Example, manifest: &Manifest, vocab: &Vocab, params: &ModelParams) -> Result<Sample> {
    let pieces = template::tagged_pieces(&ex.tokens, &ex.gold)
        .map_err(|source| TrainError::Template { id: ex.id.clone(), source })?;
    let speech = match &params.encoder {
        None => None,
        Some(enc) => {
            let path = manifest.audio_path(ex).ok_or_else(|| TrainError::MissingAudio(ex.id.clone()))?;
            let audio_err = |source| TrainError::Audio { path: path.display().to_string(), source };
            let raw = audio::read_wav(&path).map_err(audio_err)?;
            let mel = audio::log_mel(&raw, audio::N_MELS).map_err(audio_err)?;
            Some(net::encode_speech(&mel, enc)?)
        }
    };
    Ok(Sample { prefix_ids: vocab.prefix_ids(&ex.tokens), speech, target_ids: vocab.target_ids(&pieces) })
}

/// Text-only view of samples (speech dropped).
pub fn without_speech(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().map(|s| Sample { speech: None, ..s.clone() }).collect()
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Batch loss and gradient. Per-sample gradients may be computed in
/// parallel but are summed in batch order, so results do not depend on
/// scheduling.
pub fn batch_grad(
    params: &ModelParams,
    batch: &[&Sample],
    per_token_mean: bool,
    frozen_grads: bool,
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelParams)> {
    let denom = if per_token_mean {
        batch.iter().map(|s| s.target_ids.len()).sum::<usize>() as f64
    } else {
        batch.len() as f64
    };
    let parts = par::map_indexed(batch, |i, s| {
        let opts = RunOptions { lora: true, dropout_seed: dropout_seed.map(|d| mix(d, i as u64)), frozen_grads };
        let mut g = params.zeros_like();
        net::sample_grad(s, params, 1.0 / denom, &opts, &mut g).map(|l| (l, g))
    });
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Decoupled-weight-decay Adam over one parameter group.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: ModelParams,
    v: ModelParams,
    t: u64,
    pub group: Group,
}

impl AdamW {
    pub fn new(params: &ModelParams, group: Group) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0, group }
    }

    /// Clips the group's gradient to `cfg.clip_norm` and applies one update.
    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, cfg: &TrainConfig) -> f64 {
        let group = self.group;
        let mut sq = 0.0;
        grad.for_each(|p| {
            if p.group == group {
                sq += p.data.iter().map(|g| g * g).sum::<f64>();
            }
        });
        let norm = sq.sqrt();
        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);

        let mut grads = Vec::new();
        grad.for_each(|p| grads.push(p.data));
        let mut ms = Vec::new();
        self.m.for_each_mut(|p| ms.push(p.data));
        let mut vs = Vec::new();
        self.v.for_each_mut(|p| vs.push(p.data));
        let mut i = 0;
        params.for_each_mut(|p| {
            if p.group == group {
                let (g, m, v) = (grads[i], &mut ms[i], &mut vs[i]);
                for (k, w) in p.data.iter_mut().enumerate() {
                    let gk = g[k] * clip;
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                    let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                    *w -= cfg.lr * (update + cfg.weight_decay * *w);
                }
            }
            i += 1;
        });
        norm
    }
}

/// One decoded example after lenient parsing and alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub tagged: String,
    pub spans: SpanSet,
    /// The decoded tokens differ from the source.
    pub token_mismatch: bool,
    /// Spans lost during alignment.
    pub dropped: usize,
}

/// Greedy decode, render, lenient parse, align to the source tokens.
pub fn predict(
    params: &ModelParams,
    vocab: &Vocab,
    samples: &[Sample],
    rows: &[Example],
    max_new: usize,
) -> Result<Vec<Prediction>> {
    let pairs: Vec<(&Sample, &Example)> = samples.iter().zip(rows).collect();
    par::try_map(&pairs, |(s, ex)| {
        let fused = net::fused_prefix(s, params)?;
        let ids = net::generate(&fused, params, max_new)?;
        Ok(decode_prediction(&ex.id, &ex.tokens, &vocab.render(&ids)))
    })
}

/// Lenient parse and alignment of one tagged string; never fails.
pub fn decode_prediction(id: &str, source: &crate::oei::TokenSeq, tagged: &str) -> Prediction {
    let (decoded, spans) = template::parse_tagged(tagged, ParseMode::Lenient).expect("lenient parse never fails");
    let aligned = template::align_to_source(source, &decoded, &spans, ParseMode::Lenient).unwrap_or_default();
    Prediction {
        id: id.to_string(),
        tagged: tagged.to_string(),
        dropped: spans.len() - aligned.len(),
        spans: aligned,
        token_mismatch: decoded != *source,
    }
}

/// Scores predictions against gold, adding length buckets.
pub fn report(preds: &[Prediction], rows: &[Example]) -> EvalReport {
    let pairs: Vec<(SpanSet, SpanSet)> =
        preds.iter().zip(rows).map(|(p, r)| (r.gold.clone(), p.spans.clone())).collect();
    let mut rep = scorer::score(&pairs);
    let spans: Vec<SpanSet> = preds.iter().map(|p| p.spans.clone()).collect();
    if let Ok(b) = scorer::bucket_report(rows, &spans, &scorer::DEFAULT_EDGES) {
        rep.per_bucket = b;
    }
    rep
}

/// Report restricted to rows matching `keep`.
pub fn report_subset(preds: &[Prediction], rows: &[Example], keep: impl Fn(&Example) -> bool) -> EvalReport {
    let (p, r): (Vec<Prediction>, Vec<Example>) =
        preds.iter().zip(rows).filter(|(_, r)| keep(r)).map(|(p, r)| (p.clone(), r.clone())).unzip();
    report(&p, &r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub dev_loss: Option<f64>,
    #[serde(rename = "dev_P")]
    pub dev_p: Option<f64>,
    #[serde(rename = "dev_R")]
    pub dev_r: Option<f64>,
    #[serde(rename = "dev_F1")]
    pub dev_f1: Option<f64>,
    pub best: bool,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch (last epoch without dev data).
    pub best: ModelParams,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
    pub history: Vec<EpochMetrics>,
}

/// Held-out data for model selection.
pub struct DevSet<'a> {
    pub samples: &'a [Sample],
    pub rows: &'a [Example],
}

/// Minibatch AdamW over `group`. Gradients for the other group are not
/// computed and its tensors are left untouched.
pub fn train(
    params: &mut ModelParams,
    data: &[Sample],
    dev: Option<DevSet<'_>>,
    vocab: &Vocab,
    cfg: &TrainConfig,
    group: Group,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::BadConfig("no training data".into()));
    }
    let mut opt = AdamW::new(params, group);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_f1: Option<f64> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    let start = std::time::Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let dropout_seed = Some(mix(cfg.seed, ((epoch as u64) << 32) | step as u64));
            let (loss, grad) = batch_grad(params, &batch, cfg.per_token_mean, group == Group::Frozen, dropout_seed)?;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, step, loss });
            }
            norm_sum += opt.step(params, &grad, cfg);
            loss_sum += loss;
            steps += 1;
        }
        let (dev_loss, dev_rep) = match &dev {
            Some(d) => {
                let rep = report(&predict(params, vocab, d.samples, d.rows, cfg.max_new_tokens)?, d.rows);
                (Some(mean_loss(params, d.samples, cfg.per_token_mean)?), Some(rep))
            }
            None => (None, None),
        };
        let dev_f1 = dev_rep.as_ref().map(|r| r.f1);
        let improved = match (dev_f1, best_f1) {
            (Some(f), Some(b)) => f > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = params.clone();
            best_epoch = epoch;
            best_f1 = dev_f1;
            stale = 0;
        } else {
            stale += 1;
        }
        let m = EpochMetrics {
            epoch,
            steps,
            train_loss: loss_sum / steps as f64,
            grad_norm: norm_sum / steps as f64,
            dev_loss,
            dev_p: dev_rep.as_ref().map(|r| r.precision),
            dev_r: dev_rep.as_ref().map(|r| r.recall),
            dev_f1,
            best: improved,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
        if cfg.patience > 0 && stale >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch, best_dev_f1: best_f1, history })
}

/// Teacher-forced loss over `samples`, batch-mean convention.
pub fn mean_loss(params: &ModelParams, samples: &[Sample], per_token_mean: bool) -> Result<f64> {
    let logits = par::try_map(samples, |s| -> Result<net::Logits> {
        let fused = net::fused_prefix(s, params)?;
        Ok(net::forward(&fused, &s.target_ids, params)?)
    })?;
    Ok(net::loss(&logits, per_token_mean)?)
}

/// Finite-difference check of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub group: Group,
    pub coords: usize,
    pub max_rel_error: f64,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// coordinates with vanishing gradient from dominating.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the batch loss against central
/// differences on up to `coords` random coordinates of every tensor in
/// `groups`. Dropout is disabled.
pub fn grad_check(
    params: &ModelParams,
    batch: &[&Sample],
    groups: &[Group],
    coords: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<TensorCheck>> {
    let frozen = groups.contains(&Group::Frozen);
    let (_, grad) = batch_grad(params, batch, false, frozen, None)?;
    let loss_at = |p: &ModelParams| -> Result<f64> {
        let mut total = 0.0;
        for s in batch {
            let fused = net::fused_prefix(s, p)?;
            let logits = net::forward(&fused, &s.target_ids, p)?;
            total += net::sequence_nll(&logits).0;
        }
        Ok(total / batch.len() as f64)
    };
    let mut analytic = Vec::new();
    grad.for_each(|p| analytic.push(p.data.to_vec()));
    let layout = params.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (t, (_, group, shape)) in layout.iter().enumerate() {
        if !groups.contains(group) {
            continue;
        }
        let n: usize = shape.iter().product();
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            let all: Vec<usize> = (0..n).collect();
            all.choose_multiple(&mut rng, coords).copied().collect()
        };
        jobs.extend(picks.into_iter().map(|k| (t, k)));
    }
    let numeric = par::try_map(&jobs, |&(t, k)| -> Result<f64> {
        let shifted = |delta: f64| {
            let mut p = params.clone();
            let mut i = 0;
            p.for_each_mut(|q| {
                if i == t {
                    q.data[k] += delta;
                }
                i += 1;
            });
            loss_at(&p)
        };
        Ok((shifted(step)? - shifted(-step)?) / (2.0 * step))
    })?;
    let mut out: Vec<TensorCheck> = Vec::new();
    for (&(t, k), n) in jobs.iter().zip(numeric) {
        let (name, group, _) = &layout[t];
        let err = rel_error(analytic[t][k], n, GRAD_CHECK_FLOOR);
        match out.last_mut() {
            Some(c) if c.name == *name => {
                c.coords += 1;
                c.max_rel_error = c.max_rel_error.max(err);
            }
            _ => out.push(TensorCheck { name: name.clone(), group: *group, coords: 1, max_rel_error: err }),
        }
    }
    Ok(out)
}

/// Fills every LoRA `b` with small random values so their gradients (and
/// those of `a`) are non-trivial.
pub fn perturb_lora(params: &mut ModelParams, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for blk in &mut params.base.blocks {
        blk.lora_q.b.mapv_inplace(|_| rng.random_range(-scale..scale));
        blk.lora_v.b.mapv_inplace(|_| rng.random_range(-scale..scale));
    }
}

/// Text-only warm start for the base LM, standing in for a pretrained
/// instruction-tuned LM. Runs on its own synthetic corpus (no audio), so it
/// never sees the experiment's train/dev/test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub size: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            size: 3000,
            seed: 99,
            train: TrainConfig { epochs: 4, lr: 3e-3, weight_decay: 0.0, ..TrainConfig::default() },
        }
    }
}

/// Vocabulary covering every lexicon phrase plus the given rows.
pub fn build_vocab(lexicon: &crate::dataset::Lexicon, rows: &[Example]) -> Vocab {
    let lex = [
        &lexicon.subjects,
        &lexicon.copulas,
        &lexicon.positive,
        &lexicon.negative,
        &lexicon.neutral,
        &lexicon.descriptive,
        &lexicon.fillers,
        &lexicon.connectives,
    ];
    let seqs: Vec<crate::oei::TokenSeq> = lex
        .iter()
        .flat_map(|class| class.iter().map(|p| crate::oei::tokenize(p)))
        .chain(rows.iter().map(|r| r.tokens.clone()))
        .collect();
    Vocab::build(seqs.iter())
}

/// Trains every base-LM tensor of a fresh text-only model on a generated
/// corpus. LoRA factors keep their initialization.
pub fn pretrain_base(
    config: &crate::model::ModelConfig,
    vocab: &Vocab,
    lexicon: &crate::dataset::Lexicon,
    ambiguous_fraction: f64,
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<ModelParams> {
    let mut params = ModelParams::init(config, false, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let rows = crate::dataset::generate_text(cfg.size, ambiguous_fraction, lexicon, cfg.seed)?;
    let manifest = Manifest { rows: rows.into_iter().map(|r| r.example).collect(), ..Default::default() };
    let samples = featurize(&manifest, vocab, &params)?;
    let out = train(&mut params, &samples, None, vocab, &cfg.train, Group::Frozen, &mut on_epoch)?;
    Ok(out.best)
}

/// A fixed two-example micro-batch with in-memory audio and a speech model
/// whose LoRA factors are perturbed, for gradient checks.
pub fn micro_batch(seed: u64) -> Result<(ModelParams, Vec<Sample>)> {
    let cfg = crate::dataset::SynthConfig::default();
    let rows = crate::dataset::generate_text(2, 0.5, &cfg.lexicon, seed)?;
    let examples: Vec<Example> = rows.iter().map(|r| r.example.clone()).collect();
    let vocab = build_vocab(&cfg.lexicon, &examples);
    let config = crate::model::ModelConfig::with_vocab(vocab.len());
    let mut params = ModelParams::init(&config, true, &mut ChaCha8Rng::seed_from_u64(seed));
    perturb_lora(&mut params, 0.1, seed ^ 1);
    let enc = params.encoder.as_ref().expect("speech model");
    let mut samples = Vec::new();
    for row in &rows {
        let ex = &row.example;
        let audio_err = |source| TrainError::Audio { path: format!("<{}>", ex.id), source };
        let raw = audio::synth_utterance(&ex.tokens, &ex.gold, &cfg.prosody, row.audio_seed).map_err(audio_err)?;
        let mel = audio::log_mel(&raw, audio::N_MELS).map_err(audio_err)?;
        let pieces = template::tagged_pieces(&ex.tokens, &ex.gold)
            .map_err(|source| TrainError::Template { id: ex.id.clone(), source })?;
        samples.push(Sample {
            prefix_ids: vocab.prefix_ids(&ex.tokens),
            speech: Some(net::encode_speech(&mel, enc)?),
            target_ids: vocab.target_ids(&pieces),
        });
    }
    Ok((params, samples))
}
