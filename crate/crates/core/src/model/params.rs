//! Parameter tensors and their frozen/trainable partition.
//!
//! Every tensor is reachable through [`Visit`], which yields a dotted name,
//! its group and a flat view of its data. Gradients reuse the same
//! structures, so optimizer, checkpointing and hashing all walk tensors in
//! one canonical order.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Frozen,
    Trainable,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Frozen => "frozen",
            Group::Trainable => "trainable",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        match s {
            "frozen" => Some(Group::Frozen),
            "trainable" => Some(Group::Trainable),
            _ => None,
        }
    }
}

pub struct ParamRef<'a> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub trait Visit {
    fn visit<'a>(&'a self, name: &str, group: Group, f: &mut dyn FnMut(ParamRef<'a>));
    fn visit_mut<'a>(&'a mut self, name: &str, group: Group, f: &mut dyn FnMut(ParamMut<'a>));
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

impl Visit for Array1<f64> {
    fn visit<'a>(&'a self, name: &str, group: Group, f: &mut dyn FnMut(ParamRef<'a>)) {
        let data = self.as_slice().expect("standard layout");
        f(ParamRef { name: name.to_string(), group, shape: vec![self.len()], data })
    }

    fn visit_mut<'a>(&'a mut self, name: &str, group: Group, f: &mut dyn FnMut(ParamMut<'a>)) {
        let shape = vec![self.len()];
        let data = self.as_slice_mut().expect("standard layout");
        f(ParamMut { name: name.to_string(), group, shape, data })
    }
}

impl Visit for Array2<f64> {
    fn visit<'a>(&'a self, name: &str, group: Group, f: &mut dyn FnMut(ParamRef<'a>)) {
        let data = self.as_slice().expect("standard layout");
        f(ParamRef { name: name.to_string(), group, shape: self.shape().to_vec(), data })
    }

    fn visit_mut<'a>(&'a mut self, name: &str, group: Group, f: &mut dyn FnMut(ParamMut<'a>)) {
        let shape = self.shape().to_vec();
        let data = self.as_slice_mut().expect("standard layout");
        f(ParamMut { name: name.to_string(), group, shape, data })
    }
}

impl<T: Visit> Visit for Vec<T> {
    fn visit<'a>(&'a self, name: &str, group: Group, f: &mut dyn FnMut(ParamRef<'a>)) {
        for (i, t) in self.iter().enumerate() {
            t.visit(&join(name, &i.to_string()), group, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, name: &str, group: Group, f: &mut dyn FnMut(ParamMut<'a>)) {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut(&join(name, &i.to_string()), group, f);
        }
    }
}

impl<T: Visit> Visit for Option<T> {
    fn visit<'a>(&'a self, name: &str, group: Group, f: &mut dyn FnMut(ParamRef<'a>)) {
        if let Some(t) = self {
            t.visit(name, group, f);
        }
    }

    fn visit_mut<'a>(&'a mut self, name: &str, group: Group, f: &mut dyn FnMut(ParamMut<'a>)) {
        if let Some(t) = self {
            t.visit_mut(name, group, f);
        }
    }
}

/// Implements [`Visit`] for a struct. `field => Some(group)` overrides the
/// inherited group for that field's subtree.
macro_rules! visit_fields {
    ($ty:ty { $($field:ident => $grp:expr),* $(,)? }) => {
        impl Visit for $ty {
            fn visit<'a>(&'a self, name: &str, group: Group, f: &mut dyn FnMut(ParamRef<'a>)) {
                $(
                    let g: Option<Group> = $grp;
                    self.$field.visit(&join(name, stringify!($field)), g.unwrap_or(group), f);
                )*
            }

            fn visit_mut<'a>(&'a mut self, name: &str, group: Group, f: &mut dyn FnMut(ParamMut<'a>)) {
                $(
                    let g: Option<Group> = $grp;
                    self.$field.visit_mut(&join(name, stringify!($field)), g.unwrap_or(group), f);
                )*
            }
        }
    };
}

/// `y = x·w + b` with `w` stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

/// 1-D convolution over time with weights stored im2col-style as
/// `(kernel·c_in, c_out)`; row `k·c_in + c` multiplies input channel `c` at
/// kernel tap `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Low-rank pair: the update to `x·W` is `scale · (x·a)·b`, with `a`
/// `(in, rank)` and `b` `(rank, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub lora_q: Lora,
    pub lora_v: Lora,
    pub ln2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseLm {
    pub embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEncoder {
    pub convs: Vec<Conv1d>,
    pub proj: Linear,
}

/// Conv subsampling followed by a residual bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub convs: Vec<Conv1d>,
    pub down: Linear,
    pub up: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub base: BaseLm,
    pub encoder: Option<SpeechEncoder>,
    pub adapter: Option<Adapter>,
}

visit_fields!(Linear { w => None, b => None });
visit_fields!(LayerNorm { gain => None, bias => None });
visit_fields!(Conv1d { w => None, b => None });
visit_fields!(Lora { a => None, b => None });
visit_fields!(Block {
    ln1 => None,
    wq => None,
    wk => None,
    wv => None,
    wo => None,
    lora_q => Some(Group::Trainable),
    lora_v => Some(Group::Trainable),
    ln2 => None,
    ffn_in => None,
    ffn_out => None,
});
visit_fields!(BaseLm { embed => None, blocks => None, ln_f => None, head => None });
visit_fields!(SpeechEncoder { convs => None, proj => None });
visit_fields!(Adapter { convs => None, down => None, up => None });
visit_fields!(ModelParams {
    base => Some(Group::Frozen),
    encoder => Some(Group::Frozen),
    adapter => Some(Group::Trainable),
});

fn normal<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

impl Linear {
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, std: f64) -> Self {
        Self { w: normal(rng, (d_in, d_out), std), b: Array1::zeros(d_out) }
    }
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gain: Array1::ones(d), bias: Array1::zeros(d) }
    }
}

impl Conv1d {
    pub fn init<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let std = gain / ((kernel * c_in) as f64).sqrt();
        Self { w: normal(rng, (kernel * c_in, c_out), std), b: Array1::zeros(c_out), kernel, stride, pad }
    }

    pub fn c_in(&self) -> usize {
        self.w.nrows() / self.kernel
    }

    pub fn c_out(&self) -> usize {
        self.w.ncols()
    }

    /// `floor((len + 2·pad − kernel) / stride) + 1`, or 0 when the padded
    /// input is shorter than the kernel.
    pub fn out_len(&self, len: usize) -> usize {
        conv_out_len(len, self.kernel, self.stride, self.pad)
    }
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    let padded = len + 2 * pad;
    if len == 0 || padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

impl Lora {
    /// `a` small random, `b` zero, so the adapted projection starts equal
    /// to the base projection.
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, rank: usize) -> Self {
        Self { a: normal(rng, (d_in, rank), 1.0 / (d_in as f64).sqrt()), b: Array2::zeros((rank, d_out)) }
    }
}

impl ModelParams {
    /// Random initialization. Without `speech` the encoder and adapter are
    /// absent (text-only model).
    pub fn init<R: Rng>(config: &ModelConfig, speech: bool, rng: &mut R) -> Self {
        let d = config.d_model;
        let inv = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: normal(rng, (d, d), inv),
                wk: normal(rng, (d, d), inv),
                wv: normal(rng, (d, d), inv),
                wo: normal(rng, (d, d), inv / (2.0 * config.n_layers as f64).sqrt()),
                lora_q: Lora::init(rng, d, d, config.lora.rank),
                lora_v: Lora::init(rng, d, d, config.lora.rank),
                ln2: LayerNorm::new(d),
                ffn_in: Linear::init(rng, d, config.ffn_dim, inv),
                ffn_out: Linear::init(
                    rng,
                    config.ffn_dim,
                    d,
                    1.0 / ((config.ffn_dim * 2 * config.n_layers) as f64).sqrt(),
                ),
            })
            .collect();
        let base = BaseLm {
            embed: normal(rng, (config.vocab_size, d), inv),
            blocks,
            ln_f: LayerNorm::new(d),
            head: normal(rng, (d, config.vocab_size), inv),
        };
        let (encoder, adapter) = if speech {
            let mut c_in = config.n_mels;
            let convs = (0..config.encoder_conv_layers)
                .map(|_| {
                    let c = Conv1d::init(rng, c_in, config.speech_enc_dim, 3, 2, 1, 1.0);
                    c_in = config.speech_enc_dim;
                    c
                })
                .collect();
            let encoder = SpeechEncoder {
                convs,
                proj: Linear::init(
                    rng,
                    config.speech_enc_dim,
                    config.speech_enc_dim,
                    1.0 / (config.speech_enc_dim as f64).sqrt(),
                ),
            };
            let a = &config.adapter;
            let mut c_in = config.speech_enc_dim;
            let convs = (0..a.conv_layers)
                .map(|i| {
                    let c_out = if i + 1 == a.conv_layers { d } else { a.conv_channels };
                    let c = Conv1d::init(rng, c_in, c_out, a.kernel, a.stride, a.pad, 2f64.sqrt());
                    c_in = c_out;
                    c
                })
                .collect();
            let adapter = Adapter {
                convs,
                down: Linear::init(rng, d, a.bottleneck_rank, inv),
                up: Linear::init(rng, a.bottleneck_rank, d, 1.0 / (a.bottleneck_rank as f64).sqrt()),
            };
            (Some(encoder), Some(adapter))
        } else {
            (None, None)
        };
        Self { config: config.clone(), base, encoder, adapter }
    }

    /// [`ModelParams::init`] with a ChaCha8 stream seeded by `seed`.
    pub fn init_seeded(config: &ModelConfig, speech: bool, seed: u64) -> Self {
        Self::init(config, speech, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn has_speech(&self) -> bool {
        self.encoder.is_some() && self.adapter.is_some()
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(ParamRef<'a>)) {
        self.visit("", Group::Frozen, &mut f);
    }

    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(ParamMut<'a>)) {
        self.visit_mut("", Group::Frozen, &mut f);
    }

    /// Same structure, all zeros; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|p| p.data.fill(0.0));
        z
    }

    /// `(name, group, shape)` for every tensor in canonical order.
    pub fn layout(&self) -> Vec<(String, Group, Vec<usize>)> {
        let mut out = Vec::new();
        self.for_each(|p| out.push((p.name, p.group, p.shape)));
        out
    }

    pub fn count(&self, group: Group) -> usize {
        let mut n = 0;
        self.for_each(|p| {
            if p.group == group {
                n += p.data.len();
            }
        });
        n
    }

    /// SHA-256 over the names and little-endian bytes of one group.
    pub fn group_hash(&self, group: Group) -> String {
        let mut h = Sha256::new();
        self.for_each(|p| {
            if p.group == group {
                h.update(p.name.as_bytes());
                for v in p.data {
                    h.update(v.to_le_bytes());
                }
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `self += other` tensor-wise.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let mut srcs: Vec<&[f64]> = Vec::new();
        other.for_each(|p| srcs.push(p.data));
        let mut i = 0;
        self.for_each_mut(|p| {
            for (d, s) in p.data.iter_mut().zip(srcs[i]) {
                *d += s;
            }
            i += 1;
        });
    }

    pub fn scale(&mut self, k: f64) {
        self.for_each_mut(|p| p.data.iter_mut().for_each(|v| *v *= k));
    }

    /// Sets every LoRA `b` to zero, which disables the low-rank path.
    pub fn zero_lora(&mut self) {
        for blk in &mut self.base.blocks {
            blk.lora_q.b.fill(0.0);
            blk.lora_v.b.fill(0.0);
        }
    }

    /// Copies the base LM weights of `other` (same config) into `self`.
    pub fn load_base_from(&mut self, other: &ModelParams) {
        let lora: Vec<(Lora, Lora)> = self.base.blocks.iter().map(|b| (b.lora_q.clone(), b.lora_v.clone())).collect();
        self.base = other.base.clone();
        for (blk, (q, v)) in self.base.blocks.iter_mut().zip(lora) {
            blk.lora_q = q;
            blk.lora_v = v;
        }
    }
}
