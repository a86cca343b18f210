//! Vocabulary, synthetic corpora, packing, masking and budgeted streaming.
//!
//! Sequences are packed as `[CLS] t₁ … t_{s−2} [SEP]`, the last one padded.
//! Only content tokens count against a token allowance; CLS, SEP and padding
//! are free.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::Batch;
use crate::rng;
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const CLS: u32 = 3;
pub const SEP: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]", "[SEP]"];

/// Default probability of selecting a position for masking.
pub const MASK_PROB: f64 = 0.15;
/// Smallest sequence length accepted by [`pack_ids`].
pub const MIN_SEQ_LEN: usize = 8;

/// Whitespace word vocabulary with the five specials at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Specials followed by `tokens` in order. Rejects duplicates and
    /// tokens that spell a special or contain whitespace.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            index: BTreeMap::new(),
        };
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            v.index.insert(s.to_string(), i as u32);
        }
        for t in tokens {
            let t: String = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid vocabulary token {t:?}")));
            }
            if v.index.contains_key(&t) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
            v.index.insert(t.clone(), v.tokens.len() as u32);
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS as usize..]
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids.iter().map(|&i| self.token(i).unwrap_or("[UNK]")).collect();
        words.join(" ")
    }
}

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

/// The `max_size` most frequent whitespace tokens seen at least `min_freq`
/// times; ties in frequency go to the lexicographically smaller token.
pub fn build_vocab(corpus: &str, max_size: usize, min_freq: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in corpus.split_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, c)| c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&w))
        .collect();
    // Stable sort keeps the BTreeMap's lexicographic order among equal counts.
    ranked.sort_by_key(|&(_, c)| core::cmp::Reverse(c));
    ranked.truncate(max_size);
    Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w))
}

const SUCCESSORS: usize = 8;
/// Probability that an order-2 chain follows its pair-specific successor.
const PAIR_FOLLOW: f64 = 0.8;
/// Probability of a uniform jump, which keeps every word reachable.
const JUMP: f64 = 0.02;

/// Pronounceable word for lexicon index `i`; distinct for distinct `i`.
pub fn lexicon_word(i: usize) -> String {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut n = i;
    let mut w = String::new();
    loop {
        let syl = n % 60;
        w.push_str(ONSETS[syl / 5]);
        w.push_str(VOWELS[syl % 5]);
        n /= 60;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    w
}

/// Seeded Markov chain over lexicon indices `0..vocab_size`.
///
/// Each word has eight hashed successors with weights `2⁻ʲ`. An order-2 chain
/// additionally prefers, with probability 0.8, one of the first two successors
/// of the previous word chosen by a hash of the preceding pair.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    seed: u64,
    vocab_size: usize,
    order: usize,
    rng: ChaCha8Rng,
    prev: (u32, u32),
    cumulative: [f64; SUCCESSORS],
}

impl MarkovChain {
    pub fn new(seed: u64, vocab_size: usize, order: usize) -> Result<Self> {
        Self::with_stream(seed, 0, vocab_size, order)
    }

    /// Same language as `new(seed, ..)`, sampled along an independent
    /// random stream; used for held-out and freshly streamed text.
    pub fn with_stream(seed: u64, stream: u64, vocab_size: usize, order: usize) -> Result<Self> {
        if vocab_size < 10 {
            return Err(Error::InvalidArgument(format!(
                "lexicon needs at least 10 words, got {vocab_size}"
            )));
        }
        if !(1..=2).contains(&order) {
            return Err(Error::InvalidArgument(format!(
                "chain order must be 1 or 2, got {order}"
            )));
        }
        let mut rng = rng::stream(seed, &[0x6d61_726b, stream]);
        let a = rng.random_range(0..vocab_size as u32);
        let b = rng.random_range(0..vocab_size as u32);
        let mut cumulative = [0.0; SUCCESSORS];
        let total: f64 = (0..SUCCESSORS).map(|j| libm::ldexp(1.0, -(j as i32))).sum();
        let mut acc = 0.0;
        for (j, c) in cumulative.iter_mut().enumerate() {
            acc += libm::ldexp(1.0, -(j as i32)) / total;
            *c = acc;
        }
        Ok(Self {
            seed,
            vocab_size,
            order,
            rng,
            prev: (a, b),
            cumulative,
        })
    }

    fn successor(&self, word: u32, j: usize) -> u32 {
        (rng::derive(self.seed, &[word as u64, j as u64]) % self.vocab_size as u64) as u32
    }

    pub fn next_word(&mut self) -> u32 {
        let (a, b) = self.prev;
        let u: f64 = self.rng.random();
        let next = if u < JUMP {
            self.rng.random_range(0..self.vocab_size as u32)
        } else if self.order == 2 && self.rng.random::<f64>() < PAIR_FOLLOW {
            let j = (rng::derive(self.seed, &[0x7061_6972, a as u64, b as u64]) % 2) as usize;
            self.successor(b, j)
        } else {
            let r: f64 = self.rng.random();
            let j = self.cumulative.iter().position(|&c| r < c).unwrap_or(SUCCESSORS - 1);
            self.successor(b, j)
        };
        self.prev = (b, next);
        next
    }
}

/// `n_tokens` space-separated words drawn from a [`MarkovChain`].
pub fn synth_corpus(seed: u64, n_tokens: usize, vocab_size: usize, order: usize) -> Result<String> {
    synth_corpus_stream(seed, 0, n_tokens, vocab_size, order)
}

/// As [`synth_corpus`], sampled along stream `stream` of the same chain.
pub fn synth_corpus_stream(seed: u64, stream: u64, n_tokens: usize, vocab_size: usize, order: usize) -> Result<String> {
    let mut chain = MarkovChain::with_stream(seed, stream, vocab_size, order)?;
    let words: Vec<String> = (0..vocab_size).map(lexicon_word).collect();
    let mut out = String::with_capacity(n_tokens * 4);
    for i in 0..n_tokens {
        if i > 0 {
            out.push(if i % 16 == 0 { '\n' } else { ' ' });
        }
        out.push_str(&words[chain.next_word() as usize]);
    }
    Ok(out)
}

/// One `[CLS] … [SEP]` sequence of length `s` holding `content`.
fn frame(content: &[u32], s: usize) -> Vec<u32> {
    let mut seq = Vec::with_capacity(s);
    seq.push(CLS);
    seq.extend_from_slice(content);
    seq.push(SEP);
    seq.resize(s, PAD);
    seq
}

/// Packs a token id stream into sequences of length `s`.
pub fn pack_ids(ids: &[u32], s: usize) -> Result<Vec<Vec<u32>>> {
    if s < MIN_SEQ_LEN {
        return Err(Error::InvalidArgument(format!(
            "sequence length must be at least {MIN_SEQ_LEN}, got {s}"
        )));
    }
    Ok(ids.chunks(s - 2).map(|c| frame(c, s)).collect())
}

pub fn pack_sequences(corpus: &str, vocab: &Vocab, s: usize) -> Result<Vec<Vec<u32>>> {
    pack_ids(&vocab.encode(corpus), s)
}

/// Tokens of a packed sequence that count against an allowance.
pub fn content_len(seq: &[u32]) -> usize {
    seq.iter().filter(|&&t| !is_special(t)).count()
}

/// Content tokens between CLS and SEP, including any UNK.
fn content(seq: &[u32]) -> &[u32] {
    let end = seq.iter().position(|&t| t == SEP).unwrap_or(seq.len());
    let start = usize::from(seq.first() == Some(&CLS));
    &seq[start..end]
}

/// BERT-style masking of equal-length sequences, fully determined by
/// `(seed, step)`. Positions holding non-special ids are eligible; each is
/// selected with `mask_prob`, and a selected token becomes MASK (80%), a
/// uniform random non-special id (10%) or stays as is (10%). A sequence with
/// no draw gets its first eligible position selected.
pub fn mask_batch(sequences: &[Vec<u32>], vocab_size: usize, mask_prob: f64, seed: u64, step: u64) -> Result<Batch> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask probability must lie in (0, 1), got {mask_prob}"
        )));
    }
    if vocab_size <= NUM_SPECIALS as usize {
        return Err(Error::InvalidArgument(format!(
            "vocabulary of {vocab_size} has no content tokens"
        )));
    }
    let mut batch = Batch::from_sequences(sequences, PAD)?;
    let mut r = rng::stream(seed, &[0x6d61_736b, step]);
    let s = batch.seq_len;
    for b in 0..batch.batch_size {
        let row = &mut batch.token_ids[b * s..(b + 1) * s];
        let mut selected = Vec::new();
        let mut first_eligible = None;
        for (p, &t) in row.iter().enumerate() {
            if is_special(t) {
                continue;
            }
            first_eligible.get_or_insert(p);
            if r.random::<f64>() < mask_prob {
                selected.push(p);
            }
        }
        if selected.is_empty() {
            match first_eligible {
                Some(p) => selected.push(p),
                None => return Err(Error::NoEligiblePositions(b)),
            }
        }
        let mut labels = Vec::with_capacity(selected.len());
        for &p in &selected {
            labels.push(row[p]);
            let u: f64 = r.random();
            if u < 0.8 {
                row[p] = MASK;
            } else if u < 0.9 {
                row[p] = r.random_range(NUM_SPECIALS..vocab_size as u32);
            }
        }
        batch.mlm_positions[b] = selected;
        batch.mlm_labels[b] = labels;
    }
    Ok(batch)
}

/// Whether the token source may be repeated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// A single pass over fresh text.
    Unlimited,
    /// Shuffled passes over a fixed packed corpus.
    Limited,
}

/// Where a [`TokenStream`] reads text from.
#[derive(Clone, Debug)]
pub enum Source {
    /// Pre-packed sequences in corpus order.
    Packed(Vec<Vec<u32>>),
    /// Endless chain output; `ids[w]` is the vocabulary id of lexicon word `w`.
    Synthetic { chain: MarkovChain, ids: Vec<u32> },
}

impl Source {
    /// Synthetic source whose words are looked up in `vocab`.
    pub fn synthetic(seed: u64, stream: u64, lexicon_size: usize, order: usize, vocab: &Vocab) -> Result<Self> {
        let chain = MarkovChain::with_stream(seed, stream, lexicon_size, order)?;
        let ids = (0..lexicon_size).map(|i| vocab.id(&lexicon_word(i))).collect();
        Ok(Source::Synthetic { chain, ids })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamSpec {
    pub regime: Regime,
    pub token_allowance: u64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

/// Masked batches until exactly `token_allowance` content tokens were emitted.
#[derive(Clone, Debug)]
pub struct TokenStream {
    spec: StreamSpec,
    vocab_size: usize,
    source: Source,
    order: Vec<usize>,
    cursor: usize,
    epoch_counter: u64,
    emitted: u64,
    step: u64,
    corpus_tokens: u64,
}

impl TokenStream {
    pub fn new(spec: StreamSpec, source: Source, vocab_size: usize) -> Result<Self> {
        if spec.seq_len < MIN_SEQ_LEN || spec.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "stream needs seq_len ≥ {MIN_SEQ_LEN} and a positive batch size"
            )));
        }
        let corpus_tokens = match &source {
            Source::Packed(seqs) => seqs.iter().map(|s| content_len(s) as u64).sum(),
            Source::Synthetic { .. } => 0,
        };
        match (&source, spec.regime) {
            (Source::Packed(seqs), _) if seqs.iter().any(|s| s.len() != spec.seq_len) => {
                return Err(Error::InvalidArgument(String::from(
                    "packed sequences must match seq_len",
                )));
            }
            (Source::Packed(_), _) if corpus_tokens == 0 => return Err(Error::EmptyCorpus),
            (Source::Synthetic { .. }, Regime::Limited) => {
                return Err(Error::InvalidConfig(String::from(
                    "limited regime needs a packed corpus; pack a synthetic sample first",
                )))
            }
            _ => {}
        }
        let order = match &source {
            Source::Packed(seqs) => (0..seqs.len()).collect(),
            Source::Synthetic { .. } => Vec::new(),
        };
        Ok(Self {
            spec,
            vocab_size,
            source,
            order,
            cursor: 0,
            epoch_counter: 0,
            emitted: 0,
            step: 0,
            corpus_tokens,
        })
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    /// Epochs begun so far; 0 before the first batch.
    pub fn epoch_counter(&self) -> u64 {
        self.epoch_counter
    }

    /// Content tokens emitted so far.
    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    /// Batches emitted so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Content tokens in one pass over a packed corpus; 0 for synthetic text.
    pub fn corpus_tokens(&self) -> u64 {
        self.corpus_tokens
    }

    fn next_sequence(&mut self) -> Result<Vec<u32>> {
        let s = self.spec.seq_len;
        match &mut self.source {
            Source::Synthetic { chain, ids } => {
                let words: Vec<u32> = (0..s - 2).map(|_| ids[chain.next_word() as usize]).collect();
                if self.epoch_counter == 0 {
                    self.epoch_counter = 1;
                }
                Ok(frame(&words, s))
            }
            Source::Packed(seqs) => {
                if self.cursor == self.order.len() || self.epoch_counter == 0 {
                    if self.spec.regime == Regime::Unlimited && self.epoch_counter > 0 {
                        return Err(Error::CorpusExhausted {
                            consumed: self.emitted,
                            allowance: self.spec.token_allowance,
                        });
                    }
                    self.epoch_counter += 1;
                    self.cursor = 0;
                    if self.spec.regime == Regime::Limited {
                        let mut r = rng::stream(self.spec.seed, &[0x6570_6f63, self.epoch_counter]);
                        self.order = rng::permutation(&mut r, seqs.len());
                    }
                }
                let seq = seqs[self.order[self.cursor]].clone();
                self.cursor += 1;
                Ok(seq)
            }
        }
    }

    /// Next masked batch, or `None` once the allowance is spent.
    pub fn next_batch(&mut self) -> Result<Option<Batch>> {
        let s = self.spec.seq_len;
        let mut seqs = Vec::with_capacity(self.spec.batch_size);
        while seqs.len() < self.spec.batch_size && self.emitted < self.spec.token_allowance {
            let seq = self.next_sequence()?;
            let n = content_len(&seq) as u64;
            if n == 0 {
                continue;
            }
            let left = self.spec.token_allowance - self.emitted;
            if n <= left {
                self.emitted += n;
                seqs.push(seq);
            } else {
                // Keep the first `left` countable tokens.
                let mut kept = Vec::new();
                let mut count = 0;
                for &t in content(&seq) {
                    if count == left {
                        break;
                    }
                    kept.push(t);
                    count += u64::from(!is_special(t));
                }
                self.emitted += count;
                seqs.push(frame(&kept, s));
            }
        }
        if seqs.is_empty() {
            return Ok(None);
        }
        let batch = mask_batch(&seqs, self.vocab_size, self.spec.mask_prob, self.spec.seed, self.step)?;
        self.step += 1;
        Ok(Some(batch))
    }
}

impl Iterator for TokenStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}
