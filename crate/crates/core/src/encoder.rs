//! BERT-style masked-language-model encoder.
//!
//! Post-norm blocks (attention, add & norm, GELU feed-forward, add & norm),
//! learned absolute position embeddings and an LM head that by default shares
//! the token embedding table. [`forward`] returns every activation the
//! distillation losses read: the normalised embedding output, per-layer hidden
//! states, scaled attention scores (pad keys at `-inf`), attention
//! distributions, per-head values and the MLM logits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Real, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_lm_head: bool,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Config with `ff_dim = 4·hidden_size` and a tied LM head.
    pub fn new(num_layers: usize, hidden_size: usize, num_heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            num_layers,
            hidden_size,
            num_heads,
            ff_dim: 4 * hidden_size,
            vocab_size,
            max_seq_len,
            tie_lm_head: true,
            layer_norm_eps: 1e-12,
        }
    }

    /// BERT-base shape: L=12, H=768, A=12, WordPiece vocabulary, 512 positions.
    pub fn bert_base() -> Self {
        Self::new(12, 768, 12, 30_522, 512)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden_size == 0 || self.num_heads == 0 || self.ff_dim == 0 {
            return bad(format!("hidden_size, num_heads and ff_dim must be positive: {self:?}"));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad(format!("vocab_size and max_seq_len must be positive: {self:?}"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad(format!("layer_norm_eps must be positive, got {}", self.layer_norm_eps));
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, bool)> {
        let (d, ff, v, s) = (self.hidden_size, self.ff_dim, self.vocab_size, self.max_seq_len);
        let mut out = vec![
            (String::from("embeddings.token"), vec![v, d], true),
            (String::from("embeddings.position"), vec![s, d], true),
            (String::from("embeddings.norm.gain"), vec![d], false),
            (String::from("embeddings.norm.bias"), vec![d], false),
        ];
        for l in 0..self.num_layers {
            for (name, shape, decay) in [
                ("attention.query.weight", vec![d, d], true),
                ("attention.query.bias", vec![d], false),
                ("attention.key.weight", vec![d, d], true),
                ("attention.key.bias", vec![d], false),
                ("attention.value.weight", vec![d, d], true),
                ("attention.value.bias", vec![d], false),
                ("attention.output.weight", vec![d, d], true),
                ("attention.output.bias", vec![d], false),
                ("attention.norm.gain", vec![d], false),
                ("attention.norm.bias", vec![d], false),
                ("ffn.in.weight", vec![d, ff], true),
                ("ffn.in.bias", vec![ff], false),
                ("ffn.out.weight", vec![ff, d], true),
                ("ffn.out.bias", vec![d], false),
                ("ffn.norm.gain", vec![d], false),
                ("ffn.norm.bias", vec![d], false),
            ] {
                out.push((format!("layer{l}.{name}"), shape, decay));
            }
        }
        out.push((String::from("lm_head.bias"), vec![v], false));
        if !self.tie_lm_head {
            out.push((String::from("lm_head.weight"), vec![d, v], true));
        }
        out
    }
}

/// Exact number of scalar parameters for `config`.
pub fn count_parameters(config: &EncoderConfig) -> u64 {
    config
        .param_specs()
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>() as u64)
        .sum()
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Whether weight decay applies (matrices and embeddings, not gains/biases).
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| <U as Real>::from_f64(Real::to_f64(v)))
                .collect(),
            decay: self.decay,
        }
    }
}

const EMB_TOKEN: usize = 0;
const EMB_POSITION: usize = 1;
const EMB_GAIN: usize = 2;
const EMB_BIAS: usize = 3;
const PER_LAYER: usize = 16;
const Q_W: usize = 0;
const Q_B: usize = 1;
const K_W: usize = 2;
const K_B: usize = 3;
const V_W: usize = 4;
const V_B: usize = 5;
const O_W: usize = 6;
const O_B: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const F1_W: usize = 10;
const F1_B: usize = 11;
const F2_W: usize = 12;
const F2_B: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

fn layer_index(layer: usize, slot: usize) -> usize {
    4 + layer * PER_LAYER + slot
}

/// Parameters of an encoder, in the order of [`EncoderConfig::param_specs`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub config: EncoderConfig,
    pub params: Vec<Param<T>>,
}

/// Draws weights from a normal(0, 0.02) truncated at ±2 std; biases start at
/// zero and normalisation gains at one. Fully determined by `seed`.
pub fn build_encoder<T: Real>(config: &EncoderConfig, seed: u64) -> Result<EncoderWeights<T>> {
    config.validate()?;
    let params = config
        .param_specs()
        .into_iter()
        .enumerate()
        .map(|(i, (name, shape, decay))| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![T::one(); n]
            } else if name.ends_with(".bias") {
                vec![T::zero(); n]
            } else {
                let mut r = rng::stream(seed, &[0x7765_6967_6874, i as u64]);
                (0..n)
                    .map(|_| T::from_f64(rng::truncated_normal(&mut r, 0.02)))
                    .collect()
            };
            Param {
                name,
                shape,
                data,
                decay,
            }
        })
        .collect();
    Ok(EncoderWeights {
        config: config.clone(),
        params,
    })
}

impl<T: Real> EncoderWeights<T> {
    /// Checks that parameter names and shapes match the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for ((name, shape, _), p) in specs.iter().zip(&self.params) {
            if name != &p.name || shape != &p.shape || p.data.len() != shape.iter().product::<usize>() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {} has shape {:?}, expected {name} {shape:?}",
                    p.name, p.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            config: self.config.clone(),
            params: self.params.iter().map(Param::cast).collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Places every parameter on `g` as a leaf, in storage order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundEncoder> {
        let tensors = self
            .params
            .iter()
            .map(|p| g.leaf(&p.shape, p.data.clone(), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundEncoder {
            config: self.config.clone(),
            tensors,
        })
    }

    /// Copies the gradients left on `g` by a backward pass, in storage order.
    pub fn grads(&self, g: &Graph<T>, bound: &BoundEncoder) -> Vec<Vec<T>> {
        bound
            .tensors
            .iter()
            .zip(&self.params)
            .map(|(&t, p)| {
                g.grad(t)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); p.data.len()])
            })
            .collect()
    }
}

/// Parameter leaves of one encoder on a graph.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub config: EncoderConfig,
    pub tensors: Vec<Tensor>,
}

impl BoundEncoder {
    fn layer(&self, l: usize, slot: usize) -> Tensor {
        self.tensors[layer_index(l, slot)]
    }

    pub fn token_embedding(&self) -> Tensor {
        self.tensors[EMB_TOKEN]
    }
}

/// Masked-LM minibatch of `batch_size` sequences of `seq_len` positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
    /// Per sequence, the masked positions in increasing order.
    pub mlm_positions: Vec<Vec<usize>>,
    /// Per sequence, the original token at each masked position.
    pub mlm_labels: Vec<Vec<u32>>,
}

impl Batch {
    /// Unmasked batch from equal-length sequences; `pad_id` marks padding.
    pub fn from_sequences(sequences: &[Vec<u32>], pad_id: u32) -> Result<Self> {
        let seq_len = sequences.first().map(Vec::len).unwrap_or(0);
        if seq_len == 0 || sequences.iter().any(|s| s.len() != seq_len) {
            return Err(Error::InvalidArgument(String::from(
                "batch sequences must be non-empty and of equal length",
            )));
        }
        let token_ids: Vec<u32> = sequences.concat();
        let attention_mask = token_ids.iter().map(|&t| t != pad_id).collect();
        Ok(Self {
            batch_size: sequences.len(),
            seq_len,
            token_ids,
            attention_mask,
            mlm_positions: vec![Vec::new(); sequences.len()],
            mlm_labels: vec![Vec::new(); sequences.len()],
        })
    }

    /// Flat row indices `b·seq_len + p` of all masked positions.
    pub fn masked_rows(&self) -> Vec<usize> {
        self.mlm_positions
            .iter()
            .enumerate()
            .flat_map(|(b, ps)| ps.iter().map(move |&p| b * self.seq_len + p))
            .collect()
    }

    pub fn masked_labels(&self) -> Vec<u32> {
        self.mlm_labels.concat()
    }

    /// Flat row indices of all non-pad positions.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.attention_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn num_masked(&self) -> usize {
        self.mlm_positions.iter().map(Vec::len).sum()
    }

    /// Number of non-pad positions.
    pub fn num_valid(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }
}

/// Activations of one forward pass. Shapes use `B` sequences of `s`
/// positions, `A` heads of width `d_k`.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    /// `B×s×d`, after the embedding layer norm.
    pub embedding_output: Tensor,
    /// One `B×s×d` tensor per layer; the last is the encoder output.
    pub hidden_states: Vec<Tensor>,
    /// One `B×A×s×s` tensor per layer: `QKᵀ/√d_k`, pad keys at `-inf`.
    pub attention_logits: Vec<Tensor>,
    /// Softmax of `attention_logits`.
    pub attention_dists: Vec<Tensor>,
    /// One `B×A×s×d_k` tensor per layer.
    pub values: Vec<Tensor>,
    /// `B×s×V` logits, or `None` when the LM head was skipped.
    pub mlm_logits: Option<Tensor>,
    /// Embedding output as `B·s×d`; the tensor the first layer consumes.
    pub embedding_flat: Tensor,
    /// Final hidden states as `B·s×d`.
    pub last_hidden_flat: Tensor,
}

fn check_batch(config: &EncoderConfig, batch: &Batch) -> Result<()> {
    if batch.batch_size == 0 || batch.seq_len == 0 || batch.seq_len > config.max_seq_len {
        return Err(Error::InvalidArgument(format!(
            "batch of {}×{} does not fit max_seq_len {}",
            batch.batch_size, batch.seq_len, config.max_seq_len
        )));
    }
    let n = batch.batch_size * batch.seq_len;
    if batch.token_ids.len() != n || batch.attention_mask.len() != n {
        return Err(Error::InvalidArgument(String::from(
            "token_ids and attention_mask must hold batch_size·seq_len entries",
        )));
    }
    for (i, &id) in batch.token_ids.iter().enumerate() {
        if id as usize >= config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: config.vocab_size,
                sequence: i / batch.seq_len,
                position: i % batch.seq_len,
            });
        }
    }
    for b in 0..batch.batch_size {
        if !batch.attention_mask[b * batch.seq_len..(b + 1) * batch.seq_len]
            .iter()
            .any(|&m| m)
        {
            return Err(Error::InvalidArgument(format!("sequence {b} has no valid positions")));
        }
    }
    Ok(())
}

/// Full forward pass including MLM logits at every position.
pub fn forward<T: Real>(g: &mut Graph<T>, enc: &BoundEncoder, batch: &Batch) -> Result<EncoderOutputs> {
    forward_with(g, enc, batch, true)
}

/// Forward pass; the LM head is evaluated only when `with_mlm_logits`.
pub fn forward_with<T: Real>(
    g: &mut Graph<T>,
    enc: &BoundEncoder,
    batch: &Batch,
    with_mlm_logits: bool,
) -> Result<EncoderOutputs> {
    let cfg = &enc.config;
    check_batch(cfg, batch)?;
    let (bsz, s, d, heads) = (batch.batch_size, batch.seq_len, cfg.hidden_size, cfg.num_heads);
    let dk = cfg.head_dim();
    let n = bsz * s;
    let eps = T::from_f64(cfg.layer_norm_eps);

    let ids: Vec<usize> = batch.token_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).map(|i| i % s).collect();
    let tok = g.select_rows(enc.tensors[EMB_TOKEN], &ids)?;
    let pos = g.select_rows(enc.tensors[EMB_POSITION], &positions)?;
    let x = g.add(tok, pos)?;
    let mut h = g.layer_norm(x, enc.tensors[EMB_GAIN], enc.tensors[EMB_BIAS], eps)?;
    let embedding_flat = h;
    let embedding_output = g.reshape(h, &[bsz, s, d])?;

    // Pad keys are masked for every (batch, head, query) row.
    let key_mask: Vec<bool> = (0..bsz * heads * s * s)
        .map(|i| {
            let b = i / (heads * s * s);
            let key = i % s;
            !batch.attention_mask[b * s + key]
        })
        .collect();
    let scale = T::one() / T::from_f64(dk as f64).sqrt();

    let mut hidden_states = Vec::with_capacity(cfg.num_layers);
    let mut attention_logits = Vec::with_capacity(cfg.num_layers);
    let mut attention_dists = Vec::with_capacity(cfg.num_layers);
    let mut values = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let split = |g: &mut Graph<T>, w: usize, b: usize| -> Result<Tensor> {
            let y = g.matmul(h, enc.layer(l, w))?;
            let y = g.add_bias(y, enc.layer(l, b))?;
            let y = g.reshape(y, &[bsz, s, heads, dk])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = split(g, Q_W, Q_B)?;
        let k = split(g, K_W, K_B)?;
        let v = split(g, V_W, V_B)?;
        values.push(v);
        let q = g.reshape(q, &[bsz * heads, s, dk])?;
        let k = g.reshape(k, &[bsz * heads, s, dk])?;
        let v3 = g.reshape(v, &[bsz * heads, s, dk])?;

        let scores = g.batched_matmul(q, k, true)?;
        let scores = g.scale(scores, scale);
        let scores = g.mask_fill_neg_inf(scores, key_mask.clone())?;
        let logits = g.reshape(scores, &[bsz, heads, s, s])?;
        attention_logits.push(logits);
        let probs = g.softmax_rows(logits)?;
        attention_dists.push(probs);

        let probs3 = g.reshape(probs, &[bsz * heads, s, s])?;
        let ctx = g.batched_matmul(probs3, v3, false)?;
        let ctx = g.reshape(ctx, &[bsz, heads, s, dk])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, d])?;
        let attn = g.matmul(ctx, enc.layer(l, O_W))?;
        let attn = g.add_bias(attn, enc.layer(l, O_B))?;
        let res = g.add(h, attn)?;
        let h1 = g.layer_norm(res, enc.layer(l, LN1_G), enc.layer(l, LN1_B), eps)?;

        let ff = g.matmul(h1, enc.layer(l, F1_W))?;
        let ff = g.add_bias(ff, enc.layer(l, F1_B))?;
        let ff = g.gelu(ff);
        let ff = g.matmul(ff, enc.layer(l, F2_W))?;
        let ff = g.add_bias(ff, enc.layer(l, F2_B))?;
        let res = g.add(h1, ff)?;
        h = g.layer_norm(res, enc.layer(l, LN2_G), enc.layer(l, LN2_B), eps)?;
        hidden_states.push(g.reshape(h, &[bsz, s, d])?);
    }

    let mlm_logits = if with_mlm_logits {
        let bias = enc.tensors[4 + cfg.num_layers * PER_LAYER];
        let logits = if cfg.tie_lm_head {
            let h3 = g.reshape(h, &[1, n, d])?;
            let table = g.reshape(enc.tensors[EMB_TOKEN], &[1, cfg.vocab_size, d])?;
            let z = g.batched_matmul(h3, table, true)?;
            g.reshape(z, &[n, cfg.vocab_size])?
        } else {
            g.matmul(h, enc.tensors[5 + cfg.num_layers * PER_LAYER])?
        };
        let logits = g.add_bias(logits, bias)?;
        Some(g.reshape(logits, &[bsz, s, cfg.vocab_size])?)
    } else {
        None
    };

    Ok(EncoderOutputs {
        embedding_output,
        hidden_states,
        attention_logits,
        attention_dists,
        values,
        mlm_logits,
        embedding_flat,
        last_hidden_flat: h,
    })
}

/// Mean hard-label cross-entropy over the masked positions of `batch`.
pub fn mlm_loss<T: Real>(g: &mut Graph<T>, outputs: &EncoderOutputs, batch: &Batch) -> Result<Tensor> {
    let rows = batch.masked_rows();
    if rows.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let logits = outputs
        .mlm_logits
        .ok_or_else(|| Error::InvalidArgument(String::from("mlm_loss needs MLM logits")))?;
    let shape = g.shape(logits).to_vec();
    let v = *shape.last().unwrap();
    let flat = g.reshape(logits, &[shape.iter().product::<usize>() / v, v])?;
    let picked = g.select_rows(flat, &rows)?;
    let logp = g.log_softmax_rows(picked)?;
    let idx: Vec<usize> = batch
        .masked_labels()
        .iter()
        .enumerate()
        .map(|(i, &label)| i * v + label as usize)
        .collect();
    let target = g.gather(logp, &idx)?;
    let mean = g.mean(target);
    Ok(g.scale(mean, -T::one()))
}
