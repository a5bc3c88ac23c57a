//! Checkpoint files: a line-oriented text header followed by every tensor
//! as little-endian f64.
//!
//! ```text
//! stoei-checkpoint 1
//! config {...json...}
//! vocab ["<pad>", ...]
//! tensor base.embed frozen 40,64 0
//! ...
//! data 123456
//! <raw bytes>
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Group, ModelConfig, ModelParams, Vocab};

pub const MAGIC: &str = "stoei-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    IoFailure { path: String, source: std::io::Error },
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn to_bytes(params: &ModelParams, vocab: &Vocab) -> Vec<u8> {
    let mut header = format!("{MAGIC} {VERSION}\n");
    header += &format!("config {}\n", serde_json::to_string(&params.config).expect("config serializes"));
    header += &format!("vocab {}\n", serde_json::to_string(vocab.words()).expect("words serialize"));
    let mut offset = 0;
    let mut blob = Vec::new();
    params.for_each(|p| {
        let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        header += &format!("tensor {} {} {} {offset}\n", p.name, p.group.as_str(), shape.join(","));
        offset += p.data.len();
        for v in p.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    header += &format!("data {offset}\n");
    let mut out = header.into_bytes();
    out.extend(blob);
    out
}

pub fn save(params: &ModelParams, vocab: &Vocab, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params, vocab))
        .map_err(|source| CheckpointError::IoFailure { path: path.display().to_string(), source })
}

pub fn load(path: &Path) -> Result<(ModelParams, Vocab)> {
    let bytes =
        fs::read(path).map_err(|source| CheckpointError::IoFailure { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}

fn corrupt(m: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptFile(m.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not UTF-8"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, Vocab)> {
    let mut r = Reader { bytes, pos: 0 };
    let first = r.line()?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| corrupt("missing magic line"))?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
    }
    let config: ModelConfig = r
        .line()?
        .strip_prefix("config ")
        .and_then(|j| serde_json::from_str(j).ok())
        .ok_or_else(|| corrupt("bad config line"))?;
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    let words: Vec<String> = r
        .line()?
        .strip_prefix("vocab ")
        .and_then(|j| serde_json::from_str(j).ok())
        .ok_or_else(|| corrupt("bad vocab line"))?;
    if words.len() != config.vocab_size {
        return Err(corrupt(format!("vocab has {} words, config says {}", words.len(), config.vocab_size)));
    }

    let mut entries = Vec::new();
    let total = loop {
        let line = r.line()?;
        if let Some(n) = line.strip_prefix("data ") {
            break n.parse::<usize>().map_err(|_| corrupt("bad data line"))?;
        }
        let f: Vec<&str> = line.split(' ').collect();
        if f.len() != 5 || f[0] != "tensor" {
            return Err(corrupt(format!("bad tensor line {line:?}")));
        }
        let group = Group::parse(f[2]).ok_or_else(|| corrupt(format!("bad group {:?}", f[2])))?;
        let shape = f[3]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| corrupt(format!("bad shape {:?}", f[3])))?;
        let offset: usize = f[4].parse().map_err(|_| corrupt("bad offset"))?;
        entries.push((f[1].to_string(), group, shape, offset));
    };
    let blob = &bytes[r.pos..];
    if blob.len() != total * 8 {
        return Err(corrupt(format!("expected {} data bytes, found {}", total * 8, blob.len())));
    }

    let speech = entries.iter().any(|(n, ..)| n.starts_with("encoder."));
    let mut params = ModelParams::init(&config, speech, &mut ChaCha8Rng::seed_from_u64(0));
    let expect = params.layout();
    if expect.len() != entries.len() {
        return Err(corrupt(format!("{} tensors, expected {}", entries.len(), expect.len())));
    }
    let mut expected_offset = 0;
    for ((name, group, shape), (en, eg, es, eo)) in expect.iter().zip(&entries) {
        if name != en || group != eg || shape != es || *eo != expected_offset {
            return Err(corrupt(format!("tensor {en} does not match the model layout")));
        }
        expected_offset += shape.iter().product::<usize>();
    }
    if expected_offset != total {
        return Err(corrupt("data length disagrees with tensor shapes"));
    }
    let mut floats = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    params.for_each_mut(|p| {
        for v in p.data.iter_mut() {
            *v = floats.next().expect("length checked");
        }
    });
    Ok((params, Vocab::from_words(words)))
}
