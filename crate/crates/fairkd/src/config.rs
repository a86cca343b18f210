//! Experiment configuration, read from a TOML file.
//!
//! Every seed must be spelled out; nothing falls back to OS entropy. The full
//! schema is documented in the README.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};

use fairkd_core::budget::{BudgetSpec, CostModel, DataMode};
use fairkd_core::distill::Strategy;
use fairkd_core::encoder::EncoderConfig;
use fairkd_core::train::{Grid, OptimizerConfig, ProbeKind, PEAK_LR_KD, PEAK_LR_SCRATCH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub seeds: Seeds,
    pub data: DataSection,
    pub teacher: TeacherSection,
    pub student: ModelSection,
    pub budget: BudgetSection,
    #[serde(default)]
    pub train: TrainSection,
    pub probe: ProbeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Output directory, relative to the config file unless absolute.
    pub out_dir: PathBuf,
    pub strategies: Vec<String>,
    /// Run strategies on separate threads.
    #[serde(default)]
    pub parallel: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Synthetic corpus generation.
    pub corpus: u64,
    /// Weight and projection initialization.
    pub init: u64,
    /// Batch order and masking.
    pub data: u64,
    /// Probe-task generation and finetuning.
    pub probe: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            corpus: seed,
            init: seed,
            data: seed,
            probe: seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Unlimited,
    Limited,
}

impl FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "unlimited" => Ok(Mode::Unlimited),
            "limited" => Ok(Mode::Limited),
            _ => bail!("data mode must be 'unlimited' or 'limited', got {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub mode: Mode,
    /// Whitespace-tokenized text file. Without it a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    /// Vocabulary file; built from the corpus when absent.
    pub vocab: Option<PathBuf>,
    #[serde(default = "defaults::corpus_tokens")]
    pub corpus_tokens: usize,
    #[serde(default = "defaults::lexicon_size")]
    pub lexicon_size: usize,
    #[serde(default = "defaults::markov_order")]
    pub markov_order: usize,
    #[serde(default = "defaults::max_vocab")]
    pub max_vocab: usize,
    #[serde(default = "defaults::one")]
    pub min_freq: usize,
    pub seq_len: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::mask_prob")]
    pub mask_prob: f64,
    /// Sequences held out for measuring pretraining progress.
    #[serde(default = "defaults::heldout")]
    pub heldout_sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Defaults to `4 · hidden`.
    pub ff_dim: Option<usize>,
}

impl ModelSection {
    pub fn encoder_config(&self, vocab_size: usize, max_seq_len: usize) -> EncoderConfig {
        let mut c = EncoderConfig::new(self.layers, self.hidden, self.heads, vocab_size, max_seq_len);
        if let Some(ff) = self.ff_dim {
            c.ff_dim = ff;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: Option<usize>,
    /// Load this checkpoint instead of pretraining a teacher.
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub pretrain_tokens: u64,
    #[serde(default = "defaults::teacher_lr")]
    pub peak_lr: f64,
}

impl TeacherSection {
    pub fn model(&self) -> ModelSection {
        ModelSection {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ff_dim: self.ff_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub flop_budget: u64,
    #[serde(default = "defaults::yes")]
    pub count_teacher_lm_head: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub peak_lr_scratch: f64,
    pub peak_lr_kd: f64,
    pub weight_decay: f64,
    pub warmup: f64,
    pub max_grad_norm: Option<f64>,
    pub log_every: u64,
    pub grad_accumulation: usize,
    pub temperature: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            peak_lr_scratch: PEAK_LR_SCRATCH,
            peak_lr_kd: PEAK_LR_KD,
            weight_decay: o.weight_decay,
            warmup: o.warmup,
            max_grad_norm: None,
            log_every: 10,
            grad_accumulation: 1,
            temperature: 1.0,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self, peak_lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            peak_lr,
            weight_decay: self.weight_decay,
            warmup: self.warmup,
            max_grad_norm: self.max_grad_norm,
            ..OptimizerConfig::default()
        }
    }

    pub fn peak_lr(&self, strategy: Strategy) -> f64 {
        if strategy == Strategy::Scratch {
            self.peak_lr_scratch
        } else {
            self.peak_lr_kd
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    pub tasks: Vec<String>,
    pub train_size: usize,
    pub dev_size: usize,
    pub seq_len: usize,
    #[serde(default = "defaults::batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "defaults::learning_rates")]
    pub learning_rates: Vec<f64>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
}

impl ProbeSection {
    pub fn kinds(&self) -> anyhow::Result<Vec<ProbeKind>> {
        self.tasks
            .iter()
            .map(|t| t.parse().map_err(anyhow::Error::from))
            .collect()
    }

    pub fn grid(&self) -> Grid {
        Grid {
            batch_sizes: self.batch_sizes.clone(),
            learning_rates: self.learning_rates.clone(),
            epochs: self.epochs,
        }
    }
}

mod defaults {
    pub fn corpus_tokens() -> usize {
        2_000_000
    }
    pub fn lexicon_size() -> usize {
        200
    }
    pub fn markov_order() -> usize {
        2
    }
    pub fn max_vocab() -> usize {
        30_000
    }
    pub fn one() -> usize {
        1
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn mask_prob() -> f64 {
        fairkd_core::data::MASK_PROB
    }
    pub fn heldout() -> usize {
        128
    }
    pub fn teacher_lr() -> f64 {
        fairkd_core::train::PEAK_LR_SCRATCH
    }
    pub fn yes() -> bool {
        true
    }
    pub fn batch_sizes() -> Vec<usize> {
        fairkd_core::train::Grid::default().batch_sizes
    }
    pub fn learning_rates() -> Vec<f64> {
        fairkd_core::train::Grid::default().learning_rates
    }
    pub fn epochs() -> usize {
        fairkd_core::train::Grid::default().epochs
    }
}

impl ExperimentConfig {
    /// Parses and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.experiment.out_dir);
        cfg.data.corpus.as_mut().map(resolve);
        cfg.data.vocab.as_mut().map(resolve);
        cfg.teacher.checkpoint.as_mut().map(resolve);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn strategies(&self) -> anyhow::Result<Vec<Strategy>> {
        let mut out: Vec<Strategy> = Vec::new();
        for s in &self.experiment.strategies {
            let st: Strategy = s.parse()?;
            ensure!(!out.contains(&st), "strategy {st} listed twice");
            out.push(st);
        }
        Ok(out)
    }

    pub fn data_mode(&self, corpus_tokens: u64) -> DataMode {
        match self.data.mode {
            Mode::Unlimited => DataMode::Unlimited,
            Mode::Limited => DataMode::Limited { corpus_tokens },
        }
    }

    pub fn budget(&self, corpus_tokens: u64) -> anyhow::Result<BudgetSpec> {
        let mut b = BudgetSpec::new(self.budget.flop_budget as u128, self.data_mode(corpus_tokens))?;
        b.count_teacher_lm_head = self.budget.count_teacher_lm_head;
        Ok(b)
    }

    pub fn student_config(&self, vocab_size: usize) -> EncoderConfig {
        self.student.encoder_config(vocab_size, self.max_seq_len())
    }

    pub fn teacher_config(&self, vocab_size: usize) -> EncoderConfig {
        self.teacher.model().encoder_config(vocab_size, self.max_seq_len())
    }

    /// Position table size shared by pretraining and the probe tasks.
    pub fn max_seq_len(&self) -> usize {
        self.data.seq_len.max(self.probe.seq_len)
    }

    pub fn cost_model(&self, vocab_size: usize) -> CostModel {
        CostModel::new(
            &self.student_config(vocab_size),
            Some(&self.teacher_config(vocab_size)),
            self.data.seq_len,
            self.budget.count_teacher_lm_head,
        )
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let strategies = self.strategies()?;
        ensure!(!strategies.is_empty(), "experiment.strategies is empty");
        let d = &self.data;
        ensure!(
            d.seq_len >= fairkd_core::data::MIN_SEQ_LEN,
            "data.seq_len must be at least 8"
        );
        ensure!(d.batch_size > 0, "data.batch_size must be positive");
        ensure!(
            d.mask_prob > 0.0 && d.mask_prob < 1.0,
            "data.mask_prob must lie in (0, 1)"
        );
        ensure!(d.heldout_sequences > 0, "data.heldout_sequences must be positive");
        if d.corpus.is_none() {
            ensure!(d.corpus_tokens > 0, "data.corpus_tokens must be positive");
        }
        for (name, m) in [("student", self.student.clone()), ("teacher", self.teacher.model())] {
            m.encoder_config(8, self.max_seq_len())
                .validate()
                .with_context(|| format!("[{name}] section"))?;
        }
        if strategies.iter().any(|s| s.is_layer_wise()) {
            ensure!(
                self.teacher.heads == self.student.heads,
                "layer-wise strategies need equal head counts (teacher {}, student {})",
                self.teacher.heads,
                self.student.heads
            );
        }
        let needs_teacher = strategies.iter().any(|s| s.needs_teacher());
        if needs_teacher && self.teacher.checkpoint.is_none() {
            ensure!(
                self.teacher.pretrain_tokens > 0,
                "teacher.pretrain_tokens or teacher.checkpoint is required"
            );
        }
        ensure!(self.budget.flop_budget > 0, "budget.flop_budget must be positive");
        let t = &self.train;
        self.train.optimizer(t.peak_lr_scratch).validate()?;
        self.train.optimizer(t.peak_lr_kd).validate()?;
        ensure!(
            t.log_every > 0 && t.grad_accumulation > 0,
            "train.log_every and train.grad_accumulation must be positive"
        );
        ensure!(t.temperature > 0.0, "train.temperature must be positive");
        let p = &self.probe;
        ensure!(!p.tasks.is_empty(), "probe.tasks is empty");
        p.kinds()?;
        ensure!(
            !p.batch_sizes.is_empty() && !p.learning_rates.is_empty(),
            "probe grid is empty"
        );
        ensure!(
            p.epochs > 0 && p.batch_sizes.iter().all(|&b| b > 0),
            "probe epochs and batch sizes must be positive"
        );
        Ok(())
    }
}
