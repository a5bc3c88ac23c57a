//! Forward, backward and greedy decoding for the fusion LM.
//!
//! Sequence layout: `[prompt + sentence embeddings | speech embeddings |
//! BOS y_1 .. y_m EOS]`. Attention is causal over the whole sequence. The
//! row before `BOS` predicts `BOS`; the row before `EOS` predicts `EOS`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::ops::{self, LnCache};
use super::params::{Adapter, BaseLm, Block, Lora, ModelParams, SpeechEncoder};
use super::vocab::{BOS, EOS};
use crate::audio::MelFeatures;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{stage}: input of length {len} yields no output frames")]
    TooShort { stage: &'static str, len: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    UnknownToken { id: usize, vocab: usize },
    #[error("column mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("model has no speech path")]
    NoSpeechPath,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Encoder output, one row per subsampled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechFeatures(pub Array2<f64>);

impl SpeechFeatures {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

/// Text rows followed by speech rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    pub rows: Array2<f64>,
    /// Index of the first speech row (= number of text rows).
    pub boundary: usize,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Scores for every position plus next-token labels and the loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub scores: Array2<f64>,
    /// `labels[r]` is the token row `r` should predict (meaningful only
    /// where `mask[r]`).
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Logits {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Fixed affine squash of log-mel values into roughly `[-1.6, 2]`.
pub fn normalize_mel(frames: ArrayView2<f64>) -> Array2<f64> {
    frames.mapv(|v| (v.max(-10.0) + 2.0) / 5.0)
}

/// Frozen stand-in for a pretrained speech encoder.
pub fn encode_speech(mel: &MelFeatures, enc: &SpeechEncoder) -> Result<SpeechFeatures> {
    let mut x = normalize_mel(mel.frames.view());
    for conv in &enc.convs {
        if conv.out_len(x.nrows()) == 0 {
            return Err(ModelError::TooShort { stage: "speech encoder", len: x.nrows() });
        }
        if conv.c_in() != x.ncols() {
            return Err(ModelError::ShapeMismatch(format!(
                "encoder expects {} channels, got {}",
                conv.c_in(),
                x.ncols()
            )));
        }
        x = ops::conv1d(x.view(), conv).0.mapv(ops::gelu);
    }
    Ok(SpeechFeatures(ops::linear(x.view(), &enc.proj)))
}

pub struct AdapterCache {
    stages: Vec<(Array2<f64>, Array2<f64>, usize)>, // (cols, pre-activation, input length)
    conv_out: Array2<f64>,
    down_pre: Array2<f64>,
    down_act: Array2<f64>,
}

fn adapt_cached(a: &SpeechFeatures, adapter: &Adapter) -> Result<(Array2<f64>, AdapterCache)> {
    if a.is_empty() {
        return Err(ModelError::TooShort { stage: "adapter", len: 0 });
    }
    let mut x = a.0.clone();
    let mut stages = Vec::with_capacity(adapter.convs.len());
    for conv in &adapter.convs {
        if conv.out_len(x.nrows()) == 0 {
            return Err(ModelError::TooShort { stage: "adapter", len: x.nrows() });
        }
        let in_len = x.nrows();
        let (pre, cols) = ops::conv1d(x.view(), conv);
        x = pre.mapv(ops::gelu);
        stages.push((cols, pre, in_len));
    }
    let down_pre = ops::linear(x.view(), &adapter.down);
    let down_act = down_pre.mapv(ops::gelu);
    let out = &x + &ops::linear(down_act.view(), &adapter.up);
    Ok((out, AdapterCache { stages, conv_out: x, down_pre, down_act }))
}

/// Conv subsampling then a residual bottleneck into the text embedding
/// space.
pub fn adapt(a: &SpeechFeatures, adapter: &Adapter) -> Result<Array2<f64>> {
    adapt_cached(a, adapter).map(|(out, _)| out)
}

fn adapt_backward(dout: ArrayView2<f64>, cache: &AdapterCache, adapter: &Adapter, grad: &mut Adapter) -> Array2<f64> {
    let dact = ops::linear_backward(cache.down_act.view(), dout, &adapter.up, Some(&mut grad.up));
    let dpre = &dact * &cache.down_pre.mapv(ops::gelu_grad);
    let mut dx = dout.to_owned();
    dx += &ops::linear_backward(cache.conv_out.view(), dpre.view(), &adapter.down, Some(&mut grad.down));
    for ((conv, g), (cols, pre, in_len)) in adapter.convs.iter().zip(grad.convs.iter_mut()).zip(&cache.stages).rev() {
        let dpre = &dx * &pre.mapv(ops::gelu_grad);
        dx = ops::conv1d_backward(dpre.view(), cols, *in_len, conv, Some(g));
    }
    dx
}

/// Scaled embedding lookup plus sinusoidal positions starting at
/// `start_pos`.
pub fn embed_at(ids: &[usize], base: &BaseLm, start_pos: usize) -> Result<Array2<f64>> {
    let (v, d) = base.embed.dim();
    let scale = (d as f64).sqrt();
    let mut out = Array2::zeros((ids.len(), d));
    for (i, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(ModelError::UnknownToken { id, vocab: v });
        }
        let mut row = out.row_mut(i);
        row.assign(&base.embed.row(id));
        row *= scale;
        ops::add_position(start_pos + i, row);
    }
    Ok(out)
}

/// Text embedding of prompt + sentence ids.
pub fn embed_text(ids: &[usize], base: &BaseLm) -> Result<Array2<f64>> {
    embed_at(ids, base, 0)
}

fn embed_backward(ids: &[usize], drows: ArrayView2<f64>, grad: &mut BaseLm) {
    let scale = (grad.embed.ncols() as f64).sqrt();
    for (i, &id) in ids.iter().enumerate() {
        let mut row = grad.embed.row_mut(id);
        row.scaled_add(scale, &drows.row(i));
    }
}

/// Row-wise concatenation, text first.
pub fn fuse(h_text: &Array2<f64>, h_speech: &Array2<f64>) -> Result<FusedSequence> {
    if h_speech.nrows() == 0 {
        return Ok(FusedSequence { rows: h_text.clone(), boundary: h_text.nrows() });
    }
    if h_text.ncols() != h_speech.ncols() {
        return Err(ModelError::DimMismatch { left: h_text.ncols(), right: h_speech.ncols() });
    }
    let rows = concatenate(Axis(0), &[h_text.view(), h_speech.view()]).expect("matching columns");
    Ok(FusedSequence { rows, boundary: h_text.nrows() })
}

/// `W·x + (alpha/rank)·B·(A·x)` in column-vector convention, with `w`
/// `(d_out, d_in)`, `a` `(rank, d_in)`, `b` `(d_out, rank)`.
pub fn lora_apply(
    w: &Array2<f64>,
    a: &Array2<f64>,
    b: &Array2<f64>,
    alpha: f64,
    rank: usize,
    x: &Array1<f64>,
) -> Result<Array1<f64>> {
    let (d_out, d_in) = w.dim();
    if x.len() != d_in || a.dim() != (rank, d_in) || b.dim() != (d_out, rank) || rank == 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "w {:?}, a {:?}, b {:?}, rank {rank}, x {}",
            w.dim(),
            a.dim(),
            b.dim(),
            x.len()
        )));
    }
    let low = b.dot(&a.dot(x));
    Ok(w.dot(x) + &(low * (alpha / rank as f64)))
}

/// Knobs that differ between training, evaluation and checks.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub lora: bool,
    /// Seed for LoRA input dropout; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Accumulate gradients for frozen tensors too.
    pub frozen_grads: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { lora: true, dropout_seed: None, frozen_grads: false }
    }
}

struct LoraCache {
    input: Array2<f64>, // dropped-out input when dropout is on
    mask: Option<Array2<f64>>,
    low: Array2<f64>, // input · a
}

struct BlockCache {
    ln1: LnCache,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    lq: Option<LoraCache>,
    lv: Option<LoraCache>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    z: Array2<f64>,
    f: Array2<f64>,
}

fn lora_forward(
    h: &Array2<f64>,
    lora: &Lora,
    scale: f64,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> (Array2<f64>, LoraCache) {
    let (input, mask) = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Array2::from_shape_simple_fn(h.raw_dim(), || if rng.random::<f64>() < p { 0.0 } else { keep });
            (h * &mask, Some(mask))
        }
        _ => (h.clone(), None),
    };
    let low = input.dot(&lora.a);
    let delta = low.dot(&lora.b) * scale;
    (delta, LoraCache { input, mask, low })
}

fn lora_backward(dy: ArrayView2<f64>, cache: &LoraCache, lora: &Lora, scale: f64, grad: &mut Lora) -> Array2<f64> {
    let dy_s = &dy * scale;
    grad.b += &cache.low.t().dot(&dy_s);
    let dlow = dy_s.dot(&lora.b.t());
    grad.a += &cache.input.t().dot(&dlow);
    let dinput = dlow.dot(&lora.a.t());
    match &cache.mask {
        Some(m) => dinput * m,
        None => dinput,
    }
}

fn block_forward(
    x: &Array2<f64>,
    blk: &Block,
    n_heads: usize,
    lora_scale: f64,
    opts: &RunOptions,
    dropout: &mut Option<(f64, ChaCha8Rng)>,
) -> (Array2<f64>, BlockCache) {
    let (l, d) = x.dim();
    let dh = d / n_heads;
    let (h, ln1) = ops::layer_norm(x.view(), &blk.ln1);
    let mut q = h.dot(&blk.wq);
    let k = h.dot(&blk.wk);
    let mut v = h.dot(&blk.wv);
    let (mut lq, mut lv) = (None, None);
    if opts.lora {
        let (dq, cq) = lora_forward(&h, &blk.lora_q, lora_scale, dropout.as_mut().map(|(p, r)| (*p, r)));
        q += &dq;
        let (dv, cv) = lora_forward(&h, &blk.lora_v, lora_scale, dropout.as_mut().map(|(p, r)| (*p, r)));
        v += &dv;
        lq = Some(cq);
        lv = Some(cv);
    }
    let inv = 1.0 / (dh as f64).sqrt();
    let mut o = Array2::zeros((l, d));
    let mut probs = Vec::with_capacity(n_heads);
    for hd in 0..n_heads {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        for i in 0..l {
            let mut row = scores.row_mut(i);
            let rs = row.as_slice_mut().expect("contiguous");
            rs[..=i].iter_mut().for_each(|v| *v *= inv);
            let mut buf = vec![0.0; i + 1];
            ops::softmax_into(&rs[..=i], &mut buf);
            rs[..=i].copy_from_slice(&buf);
            rs[i + 1..].fill(0.0);
        }
        o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let x1 = x + &o.dot(&blk.wo);
    let (h2, ln2) = ops::layer_norm(x1.view(), &blk.ln2);
    let z = ops::linear(h2.view(), &blk.ffn_in);
    let f = z.mapv(ops::gelu);
    let out = &x1 + &ops::linear(f.view(), &blk.ffn_out);
    (out, BlockCache { ln1, h, q, k, v, lq, lv, probs, o, ln2, h2, z, f })
}

fn block_backward(
    dout: Array2<f64>,
    c: &BlockCache,
    blk: &Block,
    grad: &mut Block,
    n_heads: usize,
    lora_scale: f64,
    frozen: bool,
) -> Array2<f64> {
    let (l, d) = dout.dim();
    let dh = d / n_heads;
    let df = ops::linear_backward(c.f.view(), dout.view(), &blk.ffn_out, frozen.then_some(&mut grad.ffn_out));
    let dz = &df * &c.z.mapv(ops::gelu_grad);
    let dh2 = ops::linear_backward(c.h2.view(), dz.view(), &blk.ffn_in, frozen.then_some(&mut grad.ffn_in));
    let mut dx1 = dout;
    dx1 += &ops::layer_norm_backward(dh2.view(), &c.ln2, &blk.ln2, frozen.then_some(&mut grad.ln2));

    if frozen {
        grad.wo += &c.o.t().dot(&dx1);
    }
    let d_o = dx1.dot(&blk.wo.t());
    let inv = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((l, d));
    let mut dk = Array2::zeros((l, d));
    let mut dv = Array2::zeros((l, d));
    for (hd, p) in c.probs.iter().enumerate() {
        let cols = s![.., hd * dh..(hd + 1) * dh];
        let doh = d_o.slice(cols);
        let dp = doh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let mut ds = &dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot: f64 = row.sum();
            row.zip_mut_with(&prow, |v, &pp| *v -= pp * dot);
        }
        ds *= inv;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    if frozen {
        grad.wq += &c.h.t().dot(&dq);
        grad.wk += &c.h.t().dot(&dk);
        grad.wv += &c.h.t().dot(&dv);
    }
    let mut dh_ = dq.dot(&blk.wq.t());
    dh_ += &dk.dot(&blk.wk.t());
    dh_ += &dv.dot(&blk.wv.t());
    if let Some(cq) = &c.lq {
        dh_ += &lora_backward(dq.view(), cq, &blk.lora_q, lora_scale, &mut grad.lora_q);
    }
    if let Some(cv) = &c.lv {
        dh_ += &lora_backward(dv.view(), cv, &blk.lora_v, lora_scale, &mut grad.lora_v);
    }
    let mut dx = dx1;
    dx += &ops::layer_norm_backward(dh_.view(), &c.ln1, &blk.ln1, frozen.then_some(&mut grad.ln1));
    dx
}

struct StackCache {
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    y: Array2<f64>,
}

fn stack_forward(x: Array2<f64>, params: &ModelParams, opts: &RunOptions) -> (Array2<f64>, StackCache) {
    let cfg = &params.config;
    let mut dropout =
        opts.dropout_seed.filter(|_| cfg.lora.dropout > 0.0).map(|s| (cfg.lora.dropout, ChaCha8Rng::seed_from_u64(s)));
    let mut x = x;
    let mut caches = Vec::with_capacity(cfg.n_layers);
    for blk in &params.base.blocks {
        let (nx, c) = block_forward(&x, blk, cfg.n_heads, cfg.lora.scale(), opts, &mut dropout);
        x = nx;
        caches.push(c);
    }
    let (y, ln_f) = ops::layer_norm(x.view(), &params.base.ln_f);
    (y.clone(), StackCache { blocks: caches, ln_f, y })
}

fn check_len(len: usize, max: usize) -> Result<()> {
    if len > max {
        Err(ModelError::SequenceTooLong { len, max })
    } else {
        Ok(())
    }
}

fn full_input(fused: &FusedSequence, target_ids: &[usize], params: &ModelParams) -> Result<Array2<f64>> {
    let total = fused.len() + target_ids.len();
    check_len(total, params.config.max_seq_len)?;
    let d = params.config.d_model;
    if fused.rows.ncols() != d && !fused.is_empty() {
        return Err(ModelError::DimMismatch { left: fused.rows.ncols(), right: d });
    }
    let tgt = embed_at(target_ids, &params.base, fused.len())?;
    Ok(concatenate(Axis(0), &[fused.rows.view(), tgt.view()]).expect("matching columns"))
}

fn labels_and_mask(prefix_len: usize, target_ids: &[usize], total: usize) -> (Vec<usize>, Vec<bool>) {
    let mut labels = vec![0; total];
    let mut mask = vec![false; total];
    if prefix_len > 0 {
        for (j, &t) in target_ids.iter().enumerate() {
            labels[prefix_len - 1 + j] = t;
            mask[prefix_len - 1 + j] = true;
        }
    }
    (labels, mask)
}

/// Logits at every position of `fused ++ targets`.
pub fn forward_with(
    fused: &FusedSequence,
    target_ids: &[usize],
    params: &ModelParams,
    opts: &RunOptions,
) -> Result<Logits> {
    let x = full_input(fused, target_ids, params)?;
    let total = x.nrows();
    let (y, _) = stack_forward(x, params, opts);
    let scores = y.dot(&params.base.head);
    let (labels, mask) = labels_and_mask(fused.len(), target_ids, total);
    Ok(Logits { scores, labels, mask })
}

pub fn forward(fused: &FusedSequence, target_ids: &[usize], params: &ModelParams) -> Result<Logits> {
    forward_with(fused, target_ids, params, &RunOptions::default())
}

/// Sum of target-token negative log-likelihoods of one sequence, and the
/// number of target tokens.
pub fn sequence_nll(logits: &Logits) -> (f64, usize) {
    let mut nll = 0.0;
    let mut n = 0;
    for (r, row) in logits.scores.rows().into_iter().enumerate() {
        if logits.mask[r] {
            nll -= ops::log_softmax_at(row.as_slice().expect("contiguous"), logits.labels[r]);
            n += 1;
        }
    }
    (nll, n)
}

/// Cross-entropy over masked positions: per-sequence sums averaged over
/// the batch, or averaged over tokens with `per_token_mean`.
pub fn loss(batch: &[Logits], per_token_mean: bool) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for l in batch {
        let (nll, n) = sequence_nll(l);
        total += nll;
        tokens += n;
    }
    if tokens == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(if per_token_mean { total / tokens as f64 } else { total / batch.len() as f64 })
}

/// One training sequence. `speech` holds frozen-encoder output, so it is
/// computed once per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub prefix_ids: Vec<usize>,
    pub speech: Option<SpeechFeatures>,
    pub target_ids: Vec<usize>,
}

/// Builds the fused prefix for a sample. Text-only models, or samples
/// without speech, get an empty speech block.
pub fn fused_prefix(sample: &Sample, params: &ModelParams) -> Result<FusedSequence> {
    let h_text = embed_text(&sample.prefix_ids, &params.base)?;
    match (&sample.speech, &params.adapter) {
        (Some(a), Some(adapter)) => fuse(&h_text, &adapt(a, adapter)?),
        _ => fuse(&h_text, &Array2::zeros((0, params.config.d_model))),
    }
}

/// Loss contribution and gradients of one sample. `weight` multiplies the
/// sequence NLL (`1/N` for batch mean). Returns the weighted NLL.
pub fn sample_grad(
    sample: &Sample,
    params: &ModelParams,
    weight: f64,
    opts: &RunOptions,
    grad: &mut ModelParams,
) -> Result<f64> {
    let base = &params.base;
    let h_text = embed_text(&sample.prefix_ids, base)?;
    let speech = match (&sample.speech, &params.adapter) {
        (Some(a), Some(adapter)) => Some(adapt_cached(a, adapter)?),
        _ => None,
    };
    let n_text = h_text.nrows();
    let n_speech = speech.as_ref().map_or(0, |(h, _)| h.nrows());
    let fused = match &speech {
        Some((h, _)) => fuse(&h_text, h)?,
        None => FusedSequence { rows: h_text, boundary: n_text },
    };
    let prefix_len = fused.len();
    if prefix_len == 0 {
        return Err(ModelError::EmptyMask);
    }
    let x = full_input(&fused, &sample.target_ids, params)?;
    let (_, cache) = stack_forward(x, params, opts);

    // logits only where the loss looks
    let first = prefix_len - 1;
    let n_t = sample.target_ids.len();
    let y_rows = cache.y.slice(s![first..first + n_t, ..]);
    let scores = y_rows.dot(&base.head);
    let mut dscores = Array2::zeros(scores.raw_dim());
    let mut nll = 0.0;
    let mut probs = vec![0.0; scores.ncols()];
    for (j, &label) in sample.target_ids.iter().enumerate() {
        let row = scores.row(j);
        let row = row.as_slice().expect("contiguous");
        nll -= ops::log_softmax_at(row, label);
        ops::softmax_into(row, &mut probs);
        let mut drow = dscores.row_mut(j);
        for (c, &p) in probs.iter().enumerate() {
            drow[c] = weight * p;
        }
        drow[label] -= weight;
    }
    if opts.frozen_grads {
        grad.base.head += &y_rows.t().dot(&dscores);
    }
    let mut dy = Array2::zeros(cache.y.raw_dim());
    dy.slice_mut(s![first..first + n_t, ..]).assign(&dscores.dot(&base.head.t()));
    let mut dx =
        ops::layer_norm_backward(dy.view(), &cache.ln_f, &base.ln_f, opts.frozen_grads.then_some(&mut grad.base.ln_f));
    let cfg = &params.config;
    for ((blk, g), c) in base.blocks.iter().zip(grad.base.blocks.iter_mut()).zip(&cache.blocks).rev() {
        dx = block_backward(dx, c, blk, g, cfg.n_heads, cfg.lora.scale(), opts.frozen_grads);
    }
    if opts.frozen_grads {
        embed_backward(&sample.prefix_ids, dx.slice(s![..n_text, ..]), &mut grad.base);
        embed_backward(&sample.target_ids, dx.slice(s![prefix_len.., ..]), &mut grad.base);
    }
    if let (Some((_, ac)), Some(adapter), Some(ga)) = (&speech, &params.adapter, grad.adapter.as_mut()) {
        adapt_backward(dx.slice(s![n_text..n_text + n_speech, ..]), ac, adapter, ga);
    }
    Ok(weight * nll)
}

/// Per-layer key/value rows for incremental decoding.
struct KvCache {
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    len: usize,
}

fn step(x: Array1<f64>, params: &ModelParams, cache: &mut KvCache) -> Array1<f64> {
    let cfg = &params.config;
    let (d, nh) = (cfg.d_model, cfg.n_heads);
    let dh = d / nh;
    let pos = cache.len;
    let scale = cfg.lora.scale();
    let inv = 1.0 / (dh as f64).sqrt();
    let mut x = x.insert_axis(Axis(0));
    for (li, blk) in params.base.blocks.iter().enumerate() {
        let (h, _) = ops::layer_norm(x.view(), &blk.ln1);
        let mut q = h.dot(&blk.wq);
        q += &(h.dot(&blk.lora_q.a).dot(&blk.lora_q.b) * scale);
        let k = h.dot(&blk.wk);
        let mut v = h.dot(&blk.wv);
        v += &(h.dot(&blk.lora_v.a).dot(&blk.lora_v.b) * scale);
        cache.k[li].row_mut(pos).assign(&k.row(0));
        cache.v[li].row_mut(pos).assign(&v.row(0));
        let mut o = Array2::zeros((1, d));
        for hd in 0..nh {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let keys = cache.k[li].slice(s![..=pos, hd * dh..(hd + 1) * dh]);
            let vals = cache.v[li].slice(s![..=pos, hd * dh..(hd + 1) * dh]);
            let scores: Vec<f64> = keys.dot(&q.slice(cols).row(0)).iter().map(|s| s * inv).collect();
            let mut p = vec![0.0; scores.len()];
            ops::softmax_into(&scores, &mut p);
            let p = Array1::from(p);
            o.slice_mut(cols).row_mut(0).assign(&vals.t().dot(&p));
        }
        let x1 = &x + &o.dot(&blk.wo);
        let (h2, _) = ops::layer_norm(x1.view(), &blk.ln2);
        let f = ops::linear(h2.view(), &blk.ffn_in).mapv(ops::gelu);
        x = &x1 + &ops::linear(f.view(), &blk.ffn_out);
    }
    cache.len += 1;
    let (y, _) = ops::layer_norm(x.view(), &params.base.ln_f);
    y.row(0).dot(&params.base.head)
}

fn argmax_lowest(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `BOS` after the prefix. Stops at `EOS` (not
/// returned), after `max_new_tokens`, or when the sequence fills
/// `max_seq_len`.
pub fn generate(fused: &FusedSequence, params: &ModelParams, max_new_tokens: usize) -> Result<Vec<usize>> {
    let cfg = &params.config;
    check_len(fused.len() + 1, cfg.max_seq_len)?;
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    let cap = cfg.max_seq_len;
    let mut cache = KvCache {
        k: (0..cfg.n_layers).map(|_| Array2::zeros((cap, cfg.d_model))).collect(),
        v: (0..cfg.n_layers).map(|_| Array2::zeros((cap, cfg.d_model))).collect(),
        len: 0,
    };
    for row in fused.rows.rows() {
        step(row.to_owned(), params, &mut cache);
    }
    let mut out = Vec::new();
    let mut prev = BOS;
    while out.len() < max_new_tokens && cache.len < cap {
        let x = embed_at(&[prev], &params.base, cache.len)?.row(0).to_owned();
        let logits = step(x, params, &mut cache);
        let next = argmax_lowest(&logits);
        if next == EOS {
            break;
        }
        out.push(next);
        prev = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::params::Conv1d;
    use ndarray::array;

    fn params(speech: bool, seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig::with_vocab(40), speech, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn mel(t: usize, seed: u64) -> MelFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelFeatures { frames: Array2::from_shape_simple_fn((t, 80), || rng.random_range(-12.0..5.0)), frame_hop: 0.01 }
    }

    #[test]
    fn encoder_lengths() {
        let p = params(true, 1);
        let enc = p.encoder.as_ref().unwrap();
        assert_eq!(encode_speech(&mel(98, 1), enc).unwrap().len(), 25);
        assert_eq!(encode_speech(&mel(4, 1), enc).unwrap().len(), 1);
        let empty = MelFeatures { frames: Array2::zeros((0, 80)), frame_hop: 0.01 };
        assert!(matches!(encode_speech(&empty, enc), Err(ModelError::TooShort { .. })));
    }

    #[test]
    fn adapter_lengths_and_zero_input() {
        let mut p = params(true, 2);
        let ad = p.adapter.as_mut().unwrap();
        let feats = |t| SpeechFeatures(Array2::from_elem((t, 64), 0.3));
        assert_eq!(adapt(&feats(100), ad).unwrap().dim(), (13, 64));
        assert_eq!(adapt(&feats(8), ad).unwrap().nrows(), 1);
        assert!(adapt(&SpeechFeatures(Array2::zeros((0, 64))), ad).is_err());

        for c in &mut ad.convs {
            c.b.fill(0.0);
        }
        ad.down.b = Array1::from_shape_fn(16, |i| 0.1 * i as f64 - 0.5);
        ad.up.b = Array1::from_shape_fn(64, |i| 0.01 * i as f64);
        let out = adapt(&SpeechFeatures(Array2::zeros((10, 64))), ad).unwrap();
        let expect = ad.down.b.mapv(ops::gelu).dot(&ad.up.w) + &ad.up.b;
        for row in out.rows() {
            for (a, b) in row.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fuse_shapes() {
        let t = Array2::ones((10, 64));
        let f = fuse(&t, &Array2::zeros((13, 64))).unwrap();
        assert_eq!((f.len(), f.boundary), (23, 10));
        let f = fuse(&t, &Array2::zeros((0, 64))).unwrap();
        assert_eq!(f.rows, t);
        assert_eq!(fuse(&t, &Array2::zeros((3, 32))), Err(ModelError::DimMismatch { left: 64, right: 32 }));
    }

    #[test]
    fn lora_apply_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = |r, c| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
        let (w, a, x) = (m(6, 6), m(2, 6), Array1::from_shape_fn(6, |i| i as f64 - 2.0));
        let zero_b = Array2::zeros((6, 2));
        assert_eq!(lora_apply(&w, &a, &zero_b, 16.0, 2, &x).unwrap(), w.dot(&x));
        let b = m(6, 2);
        let out = lora_apply(&Array2::zeros((6, 6)), &a, &b, 2.0, 2, &x).unwrap();
        let expect = b.dot(&a.dot(&x));
        assert!(out.iter().zip(expect.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
        let unit = Array1::from_elem(1, 1.0);
        let one = |v: f64| Array2::from_elem((1, 1), v);
        let out = lora_apply(&one(0.0), &Array2::ones((8, 1)), &Array2::from_elem((1, 8), 1.0 / 8.0), 16.0, 8, &unit)
            .unwrap();
        assert_eq!(out[0], 2.0);
        assert!(matches!(lora_apply(&w, &a, &b, 2.0, 3, &x), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let p = params(false, 4);
        let fused = fuse(&embed_text(&(5..28).collect::<Vec<_>>(), &p.base).unwrap(), &Array2::zeros((0, 64))).unwrap();
        let targets: Vec<usize> = (0..12).map(|i| 4 + i).collect();
        let l = forward(&fused, &targets, &p).unwrap();
        assert_eq!(l.scores.dim(), (35, 40));
        assert_eq!(l.masked_count(), 12);
        assert!(l.mask[22] && l.mask[33] && !l.mask[34] && !l.mask[21]);
        assert_eq!(l.labels[22], targets[0]);
        let mut buf = vec![0.0; 40];
        for row in l.scores.rows() {
            ops::softmax_into(row.as_slice().unwrap(), &mut buf);
            assert!((buf.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(matches!(embed_text(&[40], &p.base), Err(ModelError::UnknownToken { id: 40, .. })));
        let long: Vec<usize> = vec![5; 200];
        assert!(matches!(forward(&fused, &long, &p), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn causal_attention() {
        let p = params(false, 5);
        let fused = fuse(&embed_text(&[8, 9, 10, 11], &p.base).unwrap(), &Array2::zeros((0, 64))).unwrap();
        let t1 = vec![BOS, 12, 13, 14, 15, EOS];
        let mut t2 = t1.clone();
        t2[3] = 20;
        let a = forward(&fused, &t1, &p).unwrap();
        let b = forward(&fused, &t2, &p).unwrap();
        let changed = fused.len() + 3;
        for r in 0..changed {
            assert_eq!(a.scores.row(r), b.scores.row(r), "row {r}");
        }
        assert_ne!(a.scores.row(changed), b.scores.row(changed));
    }

    #[test]
    fn loss_values() {
        let v = 64;
        let uniform = Logits { scores: Array2::zeros((2, v)), labels: vec![7, 0], mask: vec![true, false] };
        assert!((loss(std::slice::from_ref(&uniform), false).unwrap() - (v as f64).ln()).abs() < 1e-12);
        let l1 = loss(std::slice::from_ref(&uniform), false).unwrap();
        let l2 = loss(&[uniform.clone(), uniform.clone()], false).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        let mut sharp = Array2::zeros((1, v));
        sharp[[0, 3]] = 200.0;
        let l = loss(&[Logits { scores: sharp, labels: vec![3], mask: vec![true] }], false).unwrap();
        assert!(l < 1e-80);
        let none = Logits { scores: Array2::zeros((1, v)), labels: vec![0], mask: vec![false] };
        assert_eq!(loss(&[none], false), Err(ModelError::EmptyMask));
    }

    #[test]
    fn sample_grad_loss_matches_forward() {
        let p = params(true, 6);
        let enc = p.encoder.as_ref().unwrap();
        let sample = Sample {
            prefix_ids: vec![8, 9, 10, 20, 21],
            speech: Some(encode_speech(&mel(60, 2), enc).unwrap()),
            target_ids: vec![BOS, 20, 4, 21, 5, EOS],
        };
        let fused = fused_prefix(&sample, &p).unwrap();
        let logits = forward(&fused, &sample.target_ids, &p).unwrap();
        let expect = loss(&[logits], false).unwrap();
        let mut g = p.zeros_like();
        let got = sample_grad(&sample, &p, 1.0, &RunOptions::default(), &mut g).unwrap();
        assert!((expect - got).abs() < 1e-10, "{expect} vs {got}");
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let mut p = params(true, 7);
        for blk in &mut p.base.blocks {
            blk.lora_q.b.fill(0.05);
            blk.lora_v.b.fill(-0.03);
        }
        let enc = p.encoder.as_ref().unwrap();
        let sample = Sample {
            prefix_ids: vec![8, 9, 10, 30, 31, 32],
            speech: Some(encode_speech(&mel(40, 3), enc).unwrap()),
            target_ids: vec![],
        };
        let fused = fused_prefix(&sample, &p).unwrap();
        let got = generate(&fused, &p, 10).unwrap();
        let mut naive = Vec::new();
        let mut seq = vec![BOS];
        for _ in 0..10 {
            let l = forward(&fused, &seq, &p).unwrap();
            let last = l.scores.row(l.scores.nrows() - 1).to_owned();
            let next = argmax_lowest(&last);
            if next == EOS {
                break;
            }
            naive.push(next);
            seq.push(next);
        }
        assert_eq!(got, naive);
        assert_eq!(generate(&fused, &p, 0).unwrap(), Vec::<usize>::new());
        assert_eq!(generate(&fused, &p, 10).unwrap(), got);
    }

    #[test]
    fn argmax_ties_take_lowest_id() {
        assert_eq!(argmax_lowest(&array![1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn conv_shape_mismatch_reported() {
        let enc = SpeechEncoder {
            convs: vec![Conv1d { w: Array2::zeros((3 * 10, 4)), b: Array1::zeros(4), kernel: 3, stride: 2, pad: 1 }],
            proj: crate::model::params::Linear { w: Array2::zeros((4, 4)), b: Array1::zeros(4) },
        };
        assert!(matches!(encode_speech(&mel(10, 1), &enc), Err(ModelError::ShapeMismatch(_))));
    }
}
