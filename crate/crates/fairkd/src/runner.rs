//! Config-driven experiment pipeline.
//!
//! Stages, in order: `data` (vocabulary), `teacher` (pretrain or load),
//! `pretrain:<strategy>`, `probe:<strategy>` and `report`. Each completed
//! stage is recorded in `manifest.tsv` under the output directory together
//! with a fingerprint of everything it read (configuration and input file
//! checksums) and the files it wrote. A stage whose fingerprint matches and
//! whose files all exist is reused; anything else runs again. Deleting one
//! strategy's checkpoint therefore retrains only that strategy, and because
//! training is deterministic its downstream stages see identical inputs and
//! are reused as well.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use anyhow::{bail, ensure, Context};
use log::info;

use fairkd_core::budget::CostModel;
use fairkd_core::data::{
    build_vocab, content_len, mask_batch, pack_sequences, synth_corpus_stream, Regime, Source, StreamSpec, TokenStream,
    Vocab,
};
use fairkd_core::distill::{DistillSpec, Strategy};
use fairkd_core::encoder::{build_encoder, Batch, EncoderWeights};
use fairkd_core::rng;
use fairkd_core::train::{evaluate, grid_search, pretrain, FinetuneParams, PretrainOptions, ProbeTask};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{ExperimentConfig, Mode};
use crate::formats::{self, HeldOut};
use crate::report::{self, Format, ReportRow};

/// Random streams of the synthetic language: the corpus itself, fresh text
/// for the unlimited regime, and held-out text.
const CORPUS_STREAM: u64 = 0;
const FRESH_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;

pub const MANIFEST: &str = "manifest.tsv";
pub const VOCAB_FILE: &str = "data/vocab.txt";
pub const TEACHER_CHECKPOINT: &str = "teacher/teacher.fkd";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_MD: &str = "report.md";

pub fn student_checkpoint(s: Strategy) -> String {
    format!("{s}/student.fkd")
}

fn train_log_file(dir: &str) -> String {
    format!("{dir}/train_log.tsv")
}

fn heldout_file(dir: &str) -> String {
    format!("{dir}/heldout.tsv")
}

fn probes_file(s: Strategy) -> String {
    format!("{s}/probes.tsv")
}

/// How far to take the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Until {
    Teacher,
    Pretrain,
    Probes,
    Report,
}

/// A stage that failed; the manifest keeps every stage completed before it.
#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {error:#}")]
pub struct StageError {
    pub stage: String,
    pub error: anyhow::Error,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub reused: Vec<String>,
    /// Optimizer steps taken while pretraining (teacher and students).
    pub pretrain_steps: u64,
    /// Finetuning runs executed by grid searches.
    pub finetune_runs: u64,
    pub tasks: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Held-out objective per pretraining run (`teacher` or a strategy name).
    pub heldout: Vec<(String, HeldOut)>,
    pub report_md: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    fingerprint: u32,
    files: Vec<String>,
}

/// Stage records persisted in `manifest.tsv` (`stage fingerprint files`, the
/// file list comma-separated and relative to the output directory).
#[derive(Debug, Default)]
struct Manifest {
    entries: BTreeMap<String, Entry>,
}

impl Manifest {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let mut m = Self::default();
        let Ok(text) = fs::read_to_string(path) else {
            return Ok(m);
        };
        for line in text.lines().skip(1) {
            let c: Vec<&str> = line.split('\t').collect();
            ensure!(c.len() == 3, "malformed manifest line {line:?}");
            let files = c[2].split(',').filter(|f| !f.is_empty()).map(str::to_string).collect();
            let fingerprint = u32::from_str_radix(c[1], 16).context("manifest fingerprint")?;
            m.entries.insert(c[0].to_string(), Entry { fingerprint, files });
        }
        Ok(m)
    }

    fn save(&self, path: &Path) -> anyhow::Result<()> {
        let mut out = String::from("stage\tfingerprint\tfiles\n");
        for (stage, e) in &self.entries {
            let _ = writeln!(out, "{stage}\t{:08x}\t{}", e.fingerprint, e.files.join(","));
        }
        formats::write_atomic(path, out.as_bytes())
    }
}

/// Reads the stage records of an output directory.
pub fn manifest_stages(out_dir: &Path) -> anyhow::Result<BTreeMap<String, Vec<String>>> {
    Ok(Manifest::load(&out_dir.join(MANIFEST))?
        .entries
        .into_iter()
        .map(|(k, e)| (k, e.files))
        .collect())
}

/// Training material shared by the stages that run; built on first use.
struct Corpus {
    /// Packed training sequences (file corpora exclude the held-out tail).
    train: Vec<Vec<u32>>,
    heldout: Vec<Batch>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    base_fingerprint: u32,
    manifest: Mutex<Manifest>,
    summary: Mutex<RunSummary>,
    vocab: OnceLock<Vocab>,
    corpus: OnceLock<anyhow::Result<Corpus>>,
}

fn file_crc(path: &Path) -> anyhow::Result<u32> {
    Ok(crc32fast::hash(
        &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
    ))
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig) -> anyhow::Result<Self> {
        let out = cfg.experiment.out_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        // The experiment section only says where and what to run; it does not
        // change any stage's result.
        let mut fp_cfg = cfg.clone();
        fp_cfg.experiment.out_dir = PathBuf::new();
        fp_cfg.experiment.strategies.clear();
        fp_cfg.experiment.parallel = false;
        Ok(Self {
            cfg,
            base_fingerprint: crc32fast::hash(fp_cfg.to_toml().as_bytes()),
            manifest: Mutex::new(Manifest::load(&out.join(MANIFEST))?),
            out,
            summary: Mutex::new(RunSummary::default()),
            vocab: OnceLock::new(),
            corpus: OnceLock::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn fingerprint(&self, stage: &str, inputs: &[u32]) -> u32 {
        let mut h = crc32fast::Hasher::new_with_initial(self.base_fingerprint);
        h.update(stage.as_bytes());
        for i in inputs {
            h.update(&i.to_le_bytes());
        }
        h.finalize()
    }

    /// Runs `body` unless a matching manifest entry with all files present exists.
    fn stage<F>(&self, name: &str, inputs: &[u32], body: F) -> Result<(), StageError>
    where
        F: FnOnce() -> anyhow::Result<Vec<String>>,
    {
        let fp = self.fingerprint(name, inputs);
        let reusable = {
            let m = self.manifest.lock().unwrap();
            m.entries
                .get(name)
                .is_some_and(|e| e.fingerprint == fp && e.files.iter().all(|f| self.path(f).is_file()))
        };
        if reusable {
            info!("stage {name}: up to date");
            self.summary.lock().unwrap().reused.push(name.to_string());
            return Ok(());
        }
        info!("stage {name}: running");
        let fail = |source: anyhow::Error| StageError {
            stage: name.to_string(),
            error: source,
        };
        let files = body().map_err(fail)?;
        let mut m = self.manifest.lock().unwrap();
        // Files the previous version of this stage wrote but this one did not.
        if let Some(old) = m.entries.get(name) {
            for f in old.files.iter().filter(|f| !files.contains(f)) {
                let _ = fs::remove_file(self.path(f));
            }
        }
        m.entries.insert(name.to_string(), Entry { fingerprint: fp, files });
        m.save(&self.path(MANIFEST)).map_err(fail)?;
        self.summary.lock().unwrap().executed.push(name.to_string());
        Ok(())
    }

    fn input_crc(&self, rel: &str) -> anyhow::Result<u32> {
        file_crc(&self.path(rel))
    }

    fn vocab(&self) -> anyhow::Result<&Vocab> {
        if let Some(v) = self.vocab.get() {
            return Ok(v);
        }
        let v = formats::read_vocab(&self.path(VOCAB_FILE))?;
        Ok(self.vocab.get_or_init(|| v))
    }

    fn corpus_text(&self) -> anyhow::Result<String> {
        let d = &self.cfg.data;
        match &d.corpus {
            Some(p) => formats::read_corpus(p),
            None => Ok(synth_corpus_stream(
                self.cfg.seeds.corpus,
                CORPUS_STREAM,
                d.corpus_tokens,
                d.lexicon_size,
                d.markov_order,
            )?),
        }
    }

    fn corpus(&self) -> anyhow::Result<&Corpus> {
        let c = self.corpus.get_or_init(|| self.build_corpus());
        c.as_ref().map_err(|e| anyhow::anyhow!("{e:#}"))
    }

    fn build_corpus(&self) -> anyhow::Result<Corpus> {
        let d = &self.cfg.data;
        let vocab = self.vocab()?;
        let mut train = pack_sequences(&self.corpus_text()?, vocab, d.seq_len)?;
        let held_seqs = match &d.corpus {
            None => {
                let n = d.heldout_sequences * (d.seq_len - 2);
                let text =
                    synth_corpus_stream(self.cfg.seeds.corpus, HELDOUT_STREAM, n, d.lexicon_size, d.markov_order)?;
                pack_sequences(&text, vocab, d.seq_len)?
            }
            Some(_) => {
                ensure!(
                    train.len() > d.heldout_sequences,
                    "corpus packs into {} sequences, too few to hold out {}",
                    train.len(),
                    d.heldout_sequences
                );
                train.split_off(train.len() - d.heldout_sequences)
            }
        };
        let heldout = held_seqs
            .chunks(d.batch_size)
            .enumerate()
            .map(|(i, chunk)| {
                mask_batch(
                    chunk,
                    vocab.len(),
                    d.mask_prob,
                    rng::derive(self.cfg.seeds.data, &[HELDOUT_STREAM]),
                    i as u64,
                )
            })
            .collect::<fairkd_core::Result<Vec<_>>>()?;
        Ok(Corpus { train, heldout })
    }

    fn corpus_tokens(&self) -> anyhow::Result<u64> {
        Ok(self.corpus()?.train.iter().map(|s| content_len(s) as u64).sum())
    }

    fn stream(&self, regime: Regime, allowance: u64) -> anyhow::Result<TokenStream> {
        let d = &self.cfg.data;
        let vocab = self.vocab()?;
        let source = match (regime, &d.corpus) {
            (Regime::Unlimited, None) => Source::synthetic(
                self.cfg.seeds.corpus,
                FRESH_STREAM,
                d.lexicon_size,
                d.markov_order,
                vocab,
            )?,
            _ => Source::Packed(self.corpus()?.train.clone()),
        };
        let spec = StreamSpec {
            regime,
            token_allowance: allowance,
            seq_len: d.seq_len,
            batch_size: d.batch_size,
            mask_prob: d.mask_prob,
            seed: self.cfg.seeds.data,
        };
        Ok(TokenStream::new(spec, source, vocab.len())?)
    }

    fn data_stage(&self) -> Result<(), StageError> {
        let inputs = match &self.cfg.data.corpus {
            Some(p) => vec![file_crc(p).map_err(|e| StageError {
                stage: "data".into(),
                error: e,
            })?],
            None => vec![],
        };
        let vocab_input = match &self.cfg.data.vocab {
            Some(p) => file_crc(p).ok(),
            None => None,
        };
        let inputs: Vec<u32> = inputs.into_iter().chain(vocab_input).collect();
        self.stage("data", &inputs, || {
            let d = &self.cfg.data;
            let vocab = match &d.vocab {
                Some(p) => formats::read_vocab(p)?,
                None => build_vocab(&self.corpus_text()?, d.max_vocab, d.min_freq)?,
            };
            formats::write_vocab(&self.path(VOCAB_FILE), &vocab)?;
            Ok(vec![VOCAB_FILE.to_string()])
        })
    }

    fn teacher_stage(&self) -> Result<(), StageError> {
        let err = |source| StageError {
            stage: "teacher".into(),
            error: source,
        };
        let vocab_crc = self.input_crc(VOCAB_FILE).map_err(err)?;
        if let Some(p) = &self.cfg.teacher.checkpoint {
            let crc = file_crc(p).map_err(err)?;
            return self.stage("teacher", &[vocab_crc, crc], || {
                let (w, _) = checkpoint::load(p)?;
                let want = self.cfg.teacher_config(self.vocab()?.len());
                ensure!(
                    w.config == want,
                    "teacher checkpoint {} has config {:?}, expected {want:?}",
                    p.display(),
                    w.config
                );
                Ok(vec![])
            });
        }
        self.stage("teacher", &[vocab_crc], || {
            let cfg = self.cfg.teacher_config(self.vocab()?.len());
            let seed = rng::derive(self.cfg.seeds.init, &[0]);
            let w = build_encoder::<f32>(&cfg, seed)?;
            let spec = DistillSpec::<f32>::new(Strategy::Scratch, &cfg, None, seed)?;
            let heldout = &self.corpus()?.heldout;
            let initial = evaluate(&w, None, &spec, None, heldout)?.total;
            let mut stream = self.stream(Regime::Limited, self.cfg.teacher.pretrain_tokens)?;
            let cost = fairkd_core::budget::train_step_flops_per_token(
                Strategy::Scratch,
                &cfg,
                None,
                self.cfg.data.seq_len,
                true,
            )?;
            let opts = self.pretrain_options(self.cfg.teacher.peak_lr);
            let out = pretrain(w, spec.clone(), None, &mut stream, cost, &opts)?;
            let held = HeldOut {
                metric: "mlm".into(),
                initial,
                r#final: evaluate(&out.student, None, &spec, None, heldout)?.total,
            };
            info!("teacher held-out MLM {:.4} -> {:.4}", held.initial, held.r#final);
            self.summary.lock().unwrap().pretrain_steps += out.log.steps;
            self.write_run(
                "teacher",
                TEACHER_CHECKPOINT,
                "teacher",
                seed,
                &out.student,
                out.log,
                &held,
            )
        })
    }

    fn pretrain_options(&self, peak_lr: f64) -> PretrainOptions {
        let t = &self.cfg.train;
        PretrainOptions {
            optimizer: t.optimizer(peak_lr),
            log_every: t.log_every,
            grad_accumulation: t.grad_accumulation,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn write_run(
        &self,
        dir: &str,
        ckpt: &str,
        strategy: &str,
        seed: u64,
        weights: &EncoderWeights<f32>,
        mut log: fairkd_core::train::TrainLog,
        held: &HeldOut,
    ) -> anyhow::Result<Vec<String>> {
        let meta = CheckpointMeta {
            strategy: strategy.to_string(),
            seed,
            tokens_trained: log.total_tokens,
            extra: BTreeMap::from([
                ("data_seed".to_string(), self.cfg.seeds.data.to_string()),
                ("total_flops".to_string(), log.total_flops.to_string()),
            ]),
        };
        checkpoint::save(&self.path(ckpt), weights, &meta)?;
        log.checkpoint = Some(ckpt.to_string());
        let (log_file, held_file) = (train_log_file(dir), heldout_file(dir));
        formats::write_atomic(&self.path(&log_file), formats::format_train_log(&log).as_bytes())?;
        formats::write_atomic(&self.path(&held_file), held.format().as_bytes())?;
        Ok(vec![ckpt.to_string(), log_file, held_file])
    }

    fn teacher_weights(&self) -> anyhow::Result<EncoderWeights<f32>> {
        let path = match &self.cfg.teacher.checkpoint {
            Some(p) => p.clone(),
            None => self.path(TEACHER_CHECKPOINT),
        };
        Ok(checkpoint::load(&path)?.0)
    }

    fn teacher_crc(&self) -> anyhow::Result<u32> {
        match &self.cfg.teacher.checkpoint {
            Some(p) => file_crc(p),
            None => self.input_crc(TEACHER_CHECKPOINT),
        }
    }

    fn pretrain_stage(&self, st: Strategy) -> Result<(), StageError> {
        let name = format!("pretrain:{st}");
        let err = |source| StageError {
            stage: name.clone(),
            error: source,
        };
        let mut inputs = vec![self.input_crc(VOCAB_FILE).map_err(err)?];
        if st.needs_teacher() {
            inputs.push(self.teacher_crc().map_err(err)?);
        }
        self.stage(&name, &inputs, || {
            let v = self.vocab()?.len();
            let (scfg, tcfg) = (self.cfg.student_config(v), self.cfg.teacher_config(v));
            let teacher = if st.needs_teacher() {
                Some(self.teacher_weights()?)
            } else {
                None
            };
            let seed = rng::derive(self.cfg.seeds.init, &[1]);
            let w = build_encoder::<f32>(&scfg, seed)?;
            let mut spec = DistillSpec::<f32>::new(st, &scfg, Some(&tcfg), rng::derive(self.cfg.seeds.init, &[2]))?;
            spec.temperature = self.cfg.train.temperature;

            let heldout = &self.corpus()?.heldout;
            let (eval_spec, eval_teacher, metric) = if st.is_layer_wise() {
                (spec.clone(), teacher.as_ref(), "distill")
            } else {
                (DistillSpec::new(Strategy::Scratch, &scfg, None, 0)?, None, "mlm")
            };
            let initial = evaluate(&w, spec.projections.as_ref(), &eval_spec, eval_teacher, heldout)?.total;

            let cm = self.cost_model()?;
            let budget = self.cfg.budget(self.corpus_tokens_for_budget()?)?;
            let allowance = cm.token_allowance(st, &budget)?;
            let regime = match self.cfg.data.mode {
                Mode::Unlimited => Regime::Unlimited,
                Mode::Limited => Regime::Limited,
            };
            let mut stream = self.stream(regime, allowance)?;
            let opts = self.pretrain_options(self.cfg.train.peak_lr(st));
            let out = pretrain(w, spec, teacher.as_ref(), &mut stream, cm.per_token(st)?, &opts)?;
            ensure!(
                out.log.total_tokens == allowance,
                "run consumed {} tokens, allowance {allowance}",
                out.log.total_tokens
            );
            let held = HeldOut {
                metric: metric.into(),
                initial,
                r#final: evaluate(
                    &out.student,
                    out.projections.as_ref(),
                    &eval_spec,
                    eval_teacher,
                    heldout,
                )?
                .total,
            };
            info!(
                "{st}: {} tokens, held-out {metric} {:.4} -> {:.4}",
                allowance, held.initial, held.r#final
            );
            self.summary.lock().unwrap().pretrain_steps += out.log.steps;
            let dir = st.to_string();
            self.write_run(
                &dir,
                &student_checkpoint(st),
                st.name(),
                seed,
                &out.student,
                out.log,
                &held,
            )
        })
    }

    fn cost_model(&self) -> anyhow::Result<CostModel> {
        Ok(self.cfg.cost_model(self.vocab()?.len()))
    }

    /// Corpus size for the limited regime; unused (and not computed) otherwise.
    fn corpus_tokens_for_budget(&self) -> anyhow::Result<u64> {
        match self.cfg.data.mode {
            Mode::Limited => self.corpus_tokens(),
            Mode::Unlimited => Ok(0),
        }
    }

    fn probe_tasks(&self) -> anyhow::Result<Vec<ProbeTask>> {
        let p = &self.cfg.probe;
        let v = self.vocab()?.len();
        Ok(p.kinds()?
            .into_iter()
            .map(|kind| ProbeTask {
                kind,
                seed: self.cfg.seeds.probe,
                train_size: p.train_size,
                dev_size: p.dev_size,
                seq_len: p.seq_len,
                vocab_size: v,
            })
            .collect())
    }

    fn probe_stage(&self, st: Strategy) -> Result<(), StageError> {
        let name = format!("probe:{st}");
        let ckpt = student_checkpoint(st);
        let crc = self.input_crc(&ckpt).map_err(|source| StageError {
            stage: name.clone(),
            error: source,
        })?;
        self.stage(&name, &[crc], || {
            let (w, _) = checkpoint::load(&self.path(&ckpt))?;
            let base = FinetuneParams {
                batch_size: 1,
                lr: 0.0,
                epochs: 1,
                seed: self.cfg.seeds.probe,
                optimizer: self.cfg.train.optimizer(0.0),
            };
            let grid = self.cfg.probe.grid();
            let mut results = Vec::new();
            for task in self.probe_tasks()? {
                let data = task.generate()?;
                let r = grid_search(&w, &data, &grid, &base)?;
                info!(
                    "{st} {}: best {:.4} (bs {}, lr {:e})",
                    task.name(),
                    r.best.metric,
                    r.best.batch_size,
                    r.best.lr
                );
                self.summary.lock().unwrap().finetune_runs += r.runs.len() as u64;
                results.push((task.name().to_string(), r));
            }
            let file = probes_file(st);
            formats::write_atomic(&self.path(&file), formats::format_probe_results(&results).as_bytes())?;
            Ok(vec![file])
        })
    }

    fn strategy_stages(&self, st: Strategy, until: Until) -> Result<(), StageError> {
        self.pretrain_stage(st)?;
        if until >= Until::Probes {
            self.probe_stage(st)?;
        }
        Ok(())
    }

    fn report_stage(&self, strategies: &[Strategy]) -> Result<(), StageError> {
        let mut inputs = Vec::new();
        for &st in strategies {
            for f in [probes_file(st), train_log_file(&st.to_string())] {
                inputs.push(self.input_crc(&f).map_err(|source| StageError {
                    stage: "report".into(),
                    error: source,
                })?);
            }
        }
        self.stage("report", &inputs, || {
            let (tasks, rows) = collect_rows(&self.out, strategies)?;
            let notes = report_notes(&self.out, strategies)?;
            for (file, format) in [(REPORT_TSV, Format::Tsv), (REPORT_MD, Format::Markdown)] {
                let text = report::emit_report(&tasks, &rows, &notes, format)?;
                formats::write_atomic(&self.path(file), text.as_bytes())?;
            }
            Ok(vec![REPORT_TSV.to_string(), REPORT_MD.to_string()])
        })
    }
}

/// Report rows from the logs and probe results under `out_dir`.
pub fn collect_rows(out_dir: &Path, strategies: &[Strategy]) -> anyhow::Result<(Vec<String>, Vec<ReportRow>)> {
    let mut tasks: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for &st in strategies {
        let log_path = out_dir.join(train_log_file(&st.to_string()));
        let log = formats::parse_train_log(
            &fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?,
        )?;
        let probe_path = out_dir.join(probes_file(st));
        let probes = formats::parse_probe_results(
            &fs::read_to_string(&probe_path).with_context(|| format!("reading {}", probe_path.display()))?,
        )?;
        let names: Vec<String> = probes.iter().map(|p| p.0.clone()).collect();
        match &tasks {
            None => tasks = Some(names),
            Some(t) => ensure!(*t == names, "{st} was probed on {names:?}, others on {t:?}"),
        }
        rows.push(ReportRow {
            strategy: st.to_string(),
            tokens: log.total_tokens,
            metrics: probes.iter().map(|(_, r)| 100.0 * r.best.metric).collect(),
        });
    }
    Ok((tasks.unwrap_or_default(), rows))
}

fn report_notes(out_dir: &Path, strategies: &[Strategy]) -> anyhow::Result<Vec<String>> {
    let mut notes = vec![report::proxy_note()];
    let logs: Vec<(Strategy, u64)> = strategies
        .iter()
        .map(|&st| {
            let text = fs::read_to_string(out_dir.join(train_log_file(&st.to_string())))?;
            Ok((st, formats::parse_train_log(&text)?.total_tokens))
        })
        .collect::<anyhow::Result<_>>()?;
    let scratch = logs.iter().find(|l| l.0 == Strategy::Scratch).map(|l| l.1);
    if let Some(s) = scratch {
        for (st, n) in logs.iter().filter(|l| l.0 != Strategy::Scratch) {
            notes.push(format!(
                "This run: scratch/{st} token ratio {:.4}.",
                s as f64 / *n as f64
            ));
        }
    }
    for &st in strategies {
        if let Ok(text) = fs::read_to_string(out_dir.join(heldout_file(&st.to_string()))) {
            let h = HeldOut::parse(&text)?;
            notes.push(format!(
                "Held-out {} for {st}: {:.4} -> {:.4} ({:.1}% lower).",
                h.metric,
                h.initial,
                h.r#final,
                100.0 * h.reduction()
            ));
        }
    }
    if strategies.contains(&Strategy::Scratch) {
        let (_, rows) = collect_rows(out_dir, strategies)?;
        let summary = report::summarize(&rows)?;
        let base = rows
            .iter()
            .zip(&summary)
            .find(|(r, _)| r.strategy == "scratch")
            .map(|(_, s)| s.0);
        for (r, (avg, _)) in rows.iter().zip(&summary) {
            let st: Strategy = r.strategy.parse()?;
            if st.is_layer_wise() {
                let verdict = if Some(*avg) >= base { "at least" } else { "below" };
                notes.push(format!(
                    "Directional check: {st} probe average is {verdict} the scratch average."
                ));
            }
        }
    }
    Ok(notes)
}

/// Runs the pipeline up to `until` for every configured strategy.
pub fn run_experiment(cfg: &ExperimentConfig, until: Until) -> Result<RunSummary, StageError> {
    let setup = |source| StageError {
        stage: "setup".into(),
        error: source,
    };
    let strategies = cfg.strategies().map_err(setup)?;
    let run = Run::new(cfg).map_err(setup)?;
    run.data_stage()?;
    if strategies.iter().any(|s| s.needs_teacher()) || until == Until::Teacher {
        run.teacher_stage()?;
    }
    if until >= Until::Pretrain {
        if cfg.experiment.parallel && strategies.len() > 1 {
            std::thread::scope(|scope| {
                let handles: Vec<_> = strategies
                    .iter()
                    .map(|&st| {
                        let run = &run;
                        scope.spawn(move || run.strategy_stages(st, until))
                    })
                    .collect();
                handles
                    .into_iter()
                    .try_for_each(|h| h.join().expect("strategy thread panicked"))
            })?;
        } else {
            for &st in &strategies {
                run.strategy_stages(st, until)?;
            }
        }
    }
    if until == Until::Report {
        if strategies.contains(&Strategy::Scratch) {
            run.report_stage(&strategies)?;
        } else {
            log::warn!("no scratch strategy configured; skipping the report");
        }
    }
    let out = run.out.clone();
    let mut summary = run.summary.into_inner().unwrap();
    let mut collect = || -> anyhow::Result<()> {
        for name in std::iter::once("teacher".to_string()).chain(strategies.iter().map(|s| s.to_string())) {
            if let Ok(text) = fs::read_to_string(out.join(heldout_file(&name))) {
                summary.heldout.push((name, HeldOut::parse(&text)?));
            }
        }
        if until >= Until::Probes && strategies.contains(&Strategy::Scratch) {
            (summary.tasks, summary.rows) = collect_rows(&out, &strategies)?;
        }
        if until == Until::Report {
            summary.report_md = fs::read_to_string(out.join(REPORT_MD)).ok();
        }
        Ok(())
    };
    collect().map_err(|source| StageError {
        stage: "summary".into(),
        error: source,
    })?;
    Ok(summary)
}

/// Cost table for the `budget` subcommand.
pub fn budget_table(cfg: &ExperimentConfig, format: Format) -> anyhow::Result<String> {
    let run = Run::new(cfg)?;
    run.data_stage()?;
    let vocab_size = run.vocab()?.len();
    let corpus_tokens = run.corpus_tokens_for_budget()?;
    let cm = cfg.cost_model(vocab_size);
    let budget = cfg.budget(corpus_tokens)?;
    let mut rows = vec![vec![
        "strategy".to_string(),
        "flops_per_token".to_string(),
        "token_allowance".to_string(),
        "flops_charged".to_string(),
        "epochs".to_string(),
    ]];
    for st in cfg.strategies()? {
        let cost = cm.per_token(st)?;
        let n = cm.token_allowance(st, &budget)?;
        let epochs = match cfg.data.mode {
            Mode::Limited => format!("{:.2}", fairkd_core::budget::epochs_required(n, corpus_tokens)?),
            Mode::Unlimited => "-".to_string(),
        };
        rows.push(vec![
            st.to_string(),
            cost.to_string(),
            n.to_string(),
            (n as u128 * cost as u128).to_string(),
            epochs,
        ]);
    }
    let mut out = String::new();
    match format {
        Format::Tsv => {
            for r in &rows {
                out.push_str(&r.join("\t"));
                out.push('\n');
            }
            let _ = writeln!(out, "# {}", report::proxy_note());
        }
        Format::Markdown => {
            for (i, r) in rows.iter().enumerate() {
                let _ = writeln!(out, "| {} |", r.join(" | "));
                if i == 0 {
                    let _ = writeln!(out, "|{}", " --: |".repeat(r.len()));
                }
            }
            let _ = writeln!(
                out,
                "\n- flop budget {} ({} data, vocabulary {vocab_size})",
                cfg.budget.flop_budget,
                match cfg.data.mode {
                    Mode::Unlimited => "unlimited".to_string(),
                    Mode::Limited => format!("limited, corpus {corpus_tokens} tokens"),
                }
            );
            let _ = writeln!(out, "- {}", report::proxy_note());
        }
    }
    Ok(out)
}

/// Re-renders the report from the logs under the configured output directory.
pub fn render_report(cfg: &ExperimentConfig, format: Format) -> anyhow::Result<String> {
    let strategies = cfg.strategies()?;
    if !strategies.contains(&Strategy::Scratch) {
        bail!("the report compares against scratch, which is not among the configured strategies");
    }
    let (tasks, rows) = collect_rows(&cfg.experiment.out_dir, &strategies)?;
    let notes = report_notes(&cfg.experiment.out_dir, &strategies)?;
    report::emit_report(&tasks, &rows, &notes, format)
}
