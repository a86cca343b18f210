//! Versioned binary checkpoints.
//!
//! All integers are little-endian and fixed width:
//!
//! ```text
//! offset  field
//! 0       magic "FKD1"
//! 4       u32 format version (currently 1)
//! 8       u32 metadata length n, then n bytes of UTF-8 `key=value` lines
//! ..      u32 tensor count, then per tensor:
//!           u16 name length, name bytes, u8 rank, rank × u32 dims
//! ..      f32 payloads, manifest order, row-major
//! end-4   u32 CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! The metadata block carries the encoder configuration (`config.*` keys),
//! the training strategy, seed and tokens trained, plus free-form extras.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fairkd_core::encoder::{EncoderConfig, EncoderWeights, Param};

pub const MAGIC: [u8; 4] = *b"FKD1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?} at offset 0")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {version} at offset 4")]
    UnsupportedVersion { version: u32 },
    #[error("file truncated at offset {offset}: {needed} more bytes expected")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x} (checksum at offset {offset})")]
    Checksum { stored: u32, computed: u32, offset: usize },
    #[error("malformed checkpoint at offset {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("tensor manifest does not match the stored configuration: {0}")]
    ManifestMismatch(String),
}

/// Provenance stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub strategy: String,
    pub seed: u64,
    pub tokens_trained: u64,
    /// Extra keys; must not start with `config.` or repeat a fixed field.
    pub extra: BTreeMap<String, String>,
}

const FIXED_KEYS: [&str; 3] = ["strategy", "seed", "tokens_trained"];

fn config_entries(c: &EncoderConfig) -> Vec<(&'static str, String)> {
    vec![
        ("config.num_layers", c.num_layers.to_string()),
        ("config.hidden_size", c.hidden_size.to_string()),
        ("config.num_heads", c.num_heads.to_string()),
        ("config.ff_dim", c.ff_dim.to_string()),
        ("config.vocab_size", c.vocab_size.to_string()),
        ("config.max_seq_len", c.max_seq_len.to_string()),
        ("config.tie_lm_head", c.tie_lm_head.to_string()),
        // Debug formatting of f64 round-trips exactly.
        ("config.layer_norm_eps", format!("{:?}", c.layer_norm_eps)),
    ]
}

fn encode_meta(config: &EncoderConfig, meta: &CheckpointMeta) -> Result<String, CheckpointError> {
    let mut out = String::new();
    let fixed = [
        ("strategy", meta.strategy.clone()),
        ("seed", meta.seed.to_string()),
        ("tokens_trained", meta.tokens_trained.to_string()),
    ];
    let extra = meta.extra.iter().map(|(k, v)| (k.as_str(), v.clone()));
    for (k, v) in config_entries(config).into_iter().chain(fixed).chain(extra) {
        let bad = k.is_empty() || k.contains(['=', '\n']) || v.contains('\n');
        if bad {
            return Err(CheckpointError::Malformed {
                offset: 8,
                msg: format!("metadata entry {k:?} cannot be stored as a key=value line"),
            });
        }
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    Ok(out)
}

/// Serializes `weights` and `meta` into the checkpoint byte layout.
pub fn to_bytes(weights: &EncoderWeights<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>, CheckpointError> {
    if let Some(k) = meta
        .extra
        .keys()
        .find(|k| k.starts_with("config.") || FIXED_KEYS.contains(&k.as_str()))
    {
        return Err(CheckpointError::Malformed {
            offset: 8,
            msg: format!("extra metadata key {k:?} is reserved"),
        });
    }
    check_manifest(
        &weights.config,
        weights.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice())),
    )?;
    let meta_text = encode_meta(&weights.config, meta)?;
    let payload: usize = weights.params.iter().map(|p| p.data.len() * 4).sum();
    let mut buf = Vec::with_capacity(64 + meta_text.len() + payload);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta_text.as_bytes());
    buf.extend_from_slice(&(weights.params.len() as u32).to_le_bytes());
    for p in &weights.params {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.shape.len() as u8);
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for p in &weights.params {
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Writes the checkpoint atomically (temporary file, then rename).
pub fn save(path: &Path, weights: &EncoderWeights<f32>, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    let bytes = to_bytes(weights, meta)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(EncoderWeights<f32>, CheckpointMeta), CheckpointError> {
    from_bytes(&fs::read(path)?)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.buf.len(),
                needed: self.pos + n - self.buf.len(),
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn malformed(offset: usize, msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed {
        offset,
        msg: msg.into(),
    }
}

fn parse_config(map: &BTreeMap<String, String>) -> Result<EncoderConfig, CheckpointError> {
    fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T, CheckpointError> {
        map.get(key)
            .ok_or_else(|| malformed(8, format!("metadata lacks {key}")))?
            .parse()
            .map_err(|_| malformed(8, format!("metadata {key} is not valid")))
    }
    let config = EncoderConfig {
        num_layers: get(map, "config.num_layers")?,
        hidden_size: get(map, "config.hidden_size")?,
        num_heads: get(map, "config.num_heads")?,
        ff_dim: get(map, "config.ff_dim")?,
        vocab_size: get(map, "config.vocab_size")?,
        max_seq_len: get(map, "config.max_seq_len")?,
        tie_lm_head: get(map, "config.tie_lm_head")?,
        layer_norm_eps: get(map, "config.layer_norm_eps")?,
    };
    config
        .validate()
        .map_err(|e| malformed(8, format!("stored configuration is invalid: {e}")))?;
    Ok(config)
}

fn check_manifest<'a>(
    config: &EncoderConfig,
    entries: impl ExactSizeIterator<Item = (&'a str, &'a [usize])>,
) -> Result<(), CheckpointError> {
    let specs = config.param_specs();
    if specs.len() != entries.len() {
        return Err(CheckpointError::ManifestMismatch(format!(
            "{} tensors stored, configuration defines {}",
            entries.len(),
            specs.len()
        )));
    }
    for ((name, shape, _), (got_name, got_shape)) in specs.iter().zip(entries) {
        if name != got_name || shape.as_slice() != got_shape {
            return Err(CheckpointError::ManifestMismatch(format!(
                "expected {name} {shape:?}, found {got_name} {got_shape:?}"
            )));
        }
    }
    Ok(())
}

/// Parses and verifies a checkpoint image.
pub fn from_bytes(buf: &[u8]) -> Result<(EncoderWeights<f32>, CheckpointMeta), CheckpointError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { version });
    }
    let meta_len = c.u32()? as usize;
    let meta_at = c.pos;
    let meta_text = std::str::from_utf8(c.take(meta_len)?)
        .map_err(|e| malformed(meta_at, format!("metadata is not UTF-8: {e}")))?;
    let count_at = c.pos;
    let count = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = c.pos;
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| malformed(at, "tensor name is not UTF-8"))?;
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        manifest.push((name.to_string(), shape));
    }
    let payload: usize = manifest
        .iter()
        .try_fold(0usize, |acc, (_, s)| {
            s.iter()
                .try_fold(4usize, |n, &d| n.checked_mul(d))
                .and_then(|n| acc.checked_add(n))
        })
        .ok_or_else(|| malformed(count_at, "tensor sizes overflow"))?;
    let payload_at = c.pos;
    let raw = c.take(payload)?;
    let crc_at = c.pos;
    let stored = c.u32()?;
    if c.pos != buf.len() {
        return Err(malformed(c.pos, format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let computed = crc32fast::hash(&buf[..crc_at]);
    if stored != computed {
        return Err(CheckpointError::Checksum {
            stored,
            computed,
            offset: crc_at,
        });
    }

    let mut map = BTreeMap::new();
    for line in meta_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| malformed(meta_at, format!("metadata line {line:?} has no '='")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(malformed(meta_at, format!("duplicate metadata key {k}")));
        }
    }
    let config = parse_config(&map)?;
    check_manifest(&config, manifest.iter().map(|(n, s)| (n.as_str(), s.as_slice())))?;
    let field = |k: &str| {
        map.get(k)
            .ok_or_else(|| malformed(meta_at, format!("metadata lacks {k}")))
    };
    let num = |k: &str| -> Result<u64, CheckpointError> {
        field(k)?
            .parse()
            .map_err(|_| malformed(meta_at, format!("metadata {k} is not an integer")))
    };
    let meta = CheckpointMeta {
        strategy: field("strategy")?.clone(),
        seed: num("seed")?,
        tokens_trained: num("tokens_trained")?,
        extra: map
            .iter()
            .filter(|(k, _)| !k.starts_with("config.") && !FIXED_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };

    let mut values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let params = config
        .param_specs()
        .into_iter()
        .map(|(name, shape, decay)| {
            let n = shape.iter().product();
            Param {
                data: values.by_ref().take(n).collect(),
                name,
                shape,
                decay,
            }
        })
        .collect();
    debug_assert_eq!(payload_at + payload, crc_at);
    Ok((EncoderWeights { config, params }, meta))
}
