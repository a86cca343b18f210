use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adamw_step, lr_at, OptimizerConfig, OptimizerState};
use crate::data::{CLS, NUM_SPECIALS, PAD, SEP};
use crate::encoder::{forward_with, Batch, EncoderWeights, Param};
use crate::rng;
use crate::tensor::Graph;
use crate::{Error, Real, Result};

/// All probe tasks are binary.
pub const NUM_CLASSES: usize = 2;

/// Synthetic sequence-classification task family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProbeKind {
    /// Does the bigram `a b` occur?
    ContainsPattern,
    /// Is the number of occurrences of `a` odd?
    TokenCountParity,
    /// Does `a` occur more often than `b`?
    MajoritySymbol,
    /// Is the first content token `a` (rather than `b`)?
    FirstToken,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 4] = [
        ProbeKind::ContainsPattern,
        ProbeKind::TokenCountParity,
        ProbeKind::MajoritySymbol,
        ProbeKind::FirstToken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::ContainsPattern => "contains-pattern",
            ProbeKind::TokenCountParity => "token-count-parity",
            ProbeKind::MajoritySymbol => "majority-symbol",
            ProbeKind::FirstToken => "first-token",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown probe task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ProbeTask {
    pub kind: ProbeKind,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    /// Full sequence length including CLS and SEP.
    pub seq_len: usize,
    /// Vocabulary the token ids are drawn from (specials excluded).
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeData {
    pub task: ProbeTask,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

struct Generator {
    kind: ProbeKind,
    n: usize,
    lo: u32,
    hi: u32,
    a: u32,
    b: u32,
}

impl Generator {
    /// A content id different from every id in `avoid`.
    fn filler(&self, r: &mut ChaCha8Rng, avoid: &[u32]) -> u32 {
        loop {
            let t = r.random_range(self.lo..self.hi);
            if !avoid.contains(&t) {
                return t;
            }
        }
    }

    /// `n` filler tokens with `count` copies of each `(symbol, count)` at distinct random places.
    fn scatter(&self, r: &mut ChaCha8Rng, placed: &[(u32, usize)]) -> Vec<u32> {
        let avoid: Vec<u32> = placed.iter().map(|p| p.0).collect();
        let mut content: Vec<u32> = (0..self.n).map(|_| self.filler(r, &avoid)).collect();
        let slots = rng::permutation(r, self.n);
        let mut next = slots.into_iter();
        for &(sym, count) in placed {
            for _ in 0..count {
                content[next.next().unwrap()] = sym;
            }
        }
        content
    }

    fn content(&self, r: &mut ChaCha8Rng, label: u32) -> Vec<u32> {
        let cap = (self.n / 2).clamp(1, 5);
        match self.kind {
            ProbeKind::ContainsPattern => loop {
                let mut c: Vec<u32> = (0..self.n).map(|_| r.random_range(self.lo..self.hi)).collect();
                if label == 1 {
                    let i = r.random_range(0..self.n - 1);
                    c[i] = self.a;
                    c[i + 1] = self.b;
                }
                if c.windows(2).any(|w| w == [self.a, self.b]) == (label == 1) {
                    return c;
                }
            },
            ProbeKind::TokenCountParity => {
                let max = self.n.min(6);
                let choices: Vec<usize> = (0..=max).filter(|c| (c % 2) as u32 == label).collect();
                let count = choices[r.random_range(0..choices.len())];
                self.scatter(r, &[(self.a, count)])
            }
            ProbeKind::MajoritySymbol => loop {
                let ca = r.random_range(0..=cap);
                let cb = r.random_range(0..=cap);
                if ca != cb && (ca > cb) == (label == 1) {
                    return self.scatter(r, &[(self.a, ca), (self.b, cb)]);
                }
            },
            ProbeKind::FirstToken => {
                let mut c = self.scatter(r, &[]);
                for t in c.iter_mut() {
                    if *t == self.a || *t == self.b {
                        *t = self.filler(r, &[self.a, self.b]);
                    }
                }
                c[0] = if label == 1 { self.a } else { self.b };
                c
            }
        }
    }
}

impl ProbeTask {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Train and dev sets with alternating labels (balanced to within one
    /// example), no repeated sequences, and no sequence shared between them.
    pub fn generate(&self) -> Result<ProbeData> {
        let n = self.seq_len.saturating_sub(2);
        let content_ids = self.vocab_size.saturating_sub(NUM_SPECIALS as usize);
        if n < 4 || content_ids < 8 || self.train_size < 2 || self.dev_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "probe task needs seq_len ≥ 6, ≥ 8 content ids and ≥ 2 examples per split: {self:?}"
            )));
        }
        let mut r = rng::stream(self.seed, &[0x7072_6f62, self.kind as u64]);
        let lo = NUM_SPECIALS;
        let hi = self.vocab_size as u32;
        let a = r.random_range(lo..hi);
        let b = loop {
            let b = r.random_range(lo..hi);
            if b != a {
                break b;
            }
        };
        let gen = Generator {
            kind: self.kind,
            n,
            lo,
            hi,
            a,
            b,
        };
        let mut seen = BTreeSet::new();
        let mut split = |size: usize, r: &mut ChaCha8Rng| -> Result<Vec<Example>> {
            let mut out = Vec::with_capacity(size);
            for i in 0..size {
                let label = (i % 2) as u32;
                let mut attempts = 0;
                let content = loop {
                    let c = gen.content(r, label);
                    if seen.insert(c.clone()) {
                        break c;
                    }
                    attempts += 1;
                    if attempts > 1000 {
                        return Err(Error::InvalidConfig(format!(
                            "{}: cannot draw {size} distinct examples",
                            self.kind
                        )));
                    }
                };
                let mut tokens = Vec::with_capacity(self.seq_len);
                tokens.push(CLS);
                tokens.extend(content);
                tokens.push(SEP);
                out.push(Example { tokens, label });
            }
            Ok(out)
        };
        let train = split(self.train_size, &mut r)?;
        let dev = split(self.dev_size, &mut r)?;
        Ok(ProbeData {
            task: *self,
            train,
            dev,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneParams {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Betas, epsilon, decay and warmup; `peak_lr` is replaced by `lr`.
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub dev_accuracy: f64,
    pub steps: u64,
    /// Mean training loss over the last epoch.
    pub final_train_loss: f64,
}

fn classifier<T: Real>(d: usize, seed: u64) -> [Param<T>; 2] {
    let mut r = rng::stream(seed, &[0x636c_7366]);
    [
        Param {
            name: String::from("classifier.weight"),
            shape: vec![d, NUM_CLASSES],
            data: (0..d * NUM_CLASSES)
                .map(|_| T::from_f64(rng::truncated_normal(&mut r, 0.02)))
                .collect(),
            decay: true,
        },
        Param {
            name: String::from("classifier.bias"),
            shape: vec![NUM_CLASSES],
            data: vec![T::zero(); NUM_CLASSES],
            decay: false,
        },
    ]
}

fn to_batch(examples: &[&Example]) -> Result<Batch> {
    let seqs: Vec<Vec<u32>> = examples.iter().map(|e| e.tokens.clone()).collect();
    Batch::from_sequences(&seqs, PAD)
}

/// Class log-probabilities at the CLS position, `B × NUM_CLASSES`.
fn class_logits<T: Real>(
    g: &mut Graph<T>,
    encoder: &EncoderWeights<T>,
    head: &[Param<T>; 2],
    batch: &Batch,
    trainable: bool,
) -> Result<(
    crate::tensor::Tensor,
    crate::encoder::BoundEncoder,
    [crate::tensor::Tensor; 2],
)> {
    let bound = encoder.bind(g, trainable)?;
    let out = forward_with(g, &bound, batch, false)?;
    let cls_rows: Vec<usize> = (0..batch.batch_size).map(|b| b * batch.seq_len).collect();
    let cls = g.select_rows(out.last_hidden_flat, &cls_rows)?;
    let w = g.leaf(&head[0].shape, head[0].data.clone(), trainable)?;
    let bias = g.leaf(&head[1].shape, head[1].data.clone(), trainable)?;
    let z = g.matmul(cls, w)?;
    let z = g.add_bias(z, bias)?;
    let logp = g.log_softmax_rows(z)?;
    Ok((logp, bound, [w, bias]))
}

fn accuracy<T: Real>(encoder: &EncoderWeights<T>, head: &[Param<T>; 2], examples: &[Example]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in examples.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = to_batch(&refs)?;
        let mut g = Graph::new();
        let (logp, _, _) = class_logits(&mut g, encoder, head, &batch, false)?;
        for (row, e) in g.value(logp).chunks(NUM_CLASSES).zip(chunk) {
            let pred = if row[1] > row[0] { 1 } else { 0 };
            correct += usize::from(pred == e.label);
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Finetunes a copy of `encoder` with a fresh linear classifier on the CLS
/// state and returns the dev accuracy. The learning rate warms up and then
/// decays linearly to zero over all steps.
pub fn finetune_probe<T: Real>(
    encoder: &EncoderWeights<T>,
    data: &ProbeData,
    hp: &FinetuneParams,
) -> Result<FinetuneResult> {
    let cfg = &encoder.config;
    if data.task.vocab_size != cfg.vocab_size {
        return Err(Error::VocabMismatch {
            task: data.task.vocab_size,
            model: cfg.vocab_size,
        });
    }
    if data.task.seq_len > cfg.max_seq_len {
        return Err(Error::InvalidConfig(format!(
            "task sequences of {} exceed max_seq_len {}",
            data.task.seq_len, cfg.max_seq_len
        )));
    }
    if hp.batch_size == 0 || hp.epochs == 0 || !(hp.lr >= 0.0) {
        return Err(Error::InvalidConfig(format!("invalid finetuning parameters {hp:?}")));
    }
    let mut enc = encoder.clone();
    let mut head = classifier::<T>(cfg.hidden_size, hp.seed);
    let opt = OptimizerConfig {
        peak_lr: hp.lr,
        ..hp.optimizer
    };
    let mut state = OptimizerState::new(opt, enc.params.iter().chain(head.iter()))?;
    let per_epoch = data.train.len().div_ceil(hp.batch_size);
    let total_steps = (per_epoch * hp.epochs) as f64;
    let mut step = 0u64;
    let mut final_train_loss = 0.0;
    for epoch in 0..hp.epochs {
        let mut r = rng::stream(hp.seed, &[0x6674_6e65, epoch as u64]);
        let order = rng::permutation(&mut r, data.train.len());
        let mut epoch_loss = 0.0;
        for idx in order.chunks(hp.batch_size) {
            let refs: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
            let batch = to_batch(&refs)?;
            let mut g = Graph::new();
            let (logp, bound, head_t) = class_logits(&mut g, &enc, &head, &batch, true)?;
            let picks: Vec<usize> = refs
                .iter()
                .enumerate()
                .map(|(i, e)| i * NUM_CLASSES + e.label as usize)
                .collect();
            let picked = g.gather(logp, &picks)?;
            let mean = g.mean(picked);
            let loss = g.scale(mean, -T::one());
            epoch_loss += Real::to_f64(g.item(loss));
            g.backward(loss)?;
            let mut grads = enc.grads(&g, &bound);
            for t in head_t {
                grads.push(g.grad(t).map(<[T]>::to_vec).unwrap_or_default());
            }
            let lr = lr_at((step as f64 + 0.5) / total_steps, hp.lr, opt.warmup)?;
            let mut params: Vec<&mut Param<T>> = enc.params.iter_mut().chain(head.iter_mut()).collect();
            adamw_step(&mut params, &grads, &mut state, lr)?;
            step += 1;
        }
        final_train_loss = epoch_loss / per_epoch as f64;
    }
    Ok(FinetuneResult {
        dev_accuracy: accuracy(&enc, &head, &data.dev)?,
        steps: step,
        final_train_loss,
    })
}

/// Hyperparameter grid for [`grid_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            batch_sizes: vec![16, 32],
            learning_rates: vec![1e-5, 3e-5, 5e-5, 8e-5],
            epochs: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRun {
    pub batch_size: usize,
    pub lr: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: GridRun,
    /// Every evaluated combination, batch size major.
    pub runs: Vec<GridRun>,
}

/// Best dev metric over the grid. Ties go to the lower learning rate, then
/// the smaller batch size.
pub fn grid_search<T: Real>(
    encoder: &EncoderWeights<T>,
    data: &ProbeData,
    grid: &Grid,
    base: &FinetuneParams,
) -> Result<GridResult> {
    if grid.batch_sizes.is_empty() || grid.learning_rates.is_empty() {
        return Err(Error::InvalidConfig(String::from(
            "grid needs batch sizes and learning rates",
        )));
    }
    let mut runs = Vec::new();
    for &batch_size in &grid.batch_sizes {
        for &lr in &grid.learning_rates {
            let hp = FinetuneParams {
                batch_size,
                lr,
                epochs: grid.epochs,
                ..*base
            };
            let r = finetune_probe(encoder, data, &hp)?;
            log::debug!("{} bs={batch_size} lr={lr:e}: {:.4}", data.task.kind, r.dev_accuracy);
            runs.push(GridRun {
                batch_size,
                lr,
                metric: r.dev_accuracy,
            });
        }
    }
    let best = *runs
        .iter()
        .min_by(|x, y| {
            y.metric
                .total_cmp(&x.metric)
                .then(x.lr.total_cmp(&y.lr))
                .then(x.batch_size.cmp(&y.batch_size))
        })
        .unwrap();
    Ok(GridResult { best, runs })
}
