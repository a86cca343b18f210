//! Plain-text file formats: vocabulary, corpus, training logs and probe results.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context};

use fairkd_core::data::{Vocab, SPECIAL_TOKENS};
use fairkd_core::distill::Strategy;
use fairkd_core::train::{GridResult, GridRun, LogRecord, TrainLog};

/// One token per line; line `i` (from 0) is id `i`. The first five lines are
/// the special tokens in id order.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> anyhow::Result<()> {
    let mut out = String::new();
    for t in SPECIAL_TOKENS
        .iter()
        .copied()
        .chain(vocab.content_tokens().iter().map(String::as_str))
    {
        out.push_str(t);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_vocab(path: &Path) -> anyhow::Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading vocabulary {}", path.display()))?;
    parse_vocab(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_vocab(text: &str) -> anyhow::Result<Vocab> {
    let lines: Vec<&str> = text.lines().collect();
    ensure!(
        lines.len() >= SPECIAL_TOKENS.len(),
        "vocabulary has fewer lines than special tokens"
    );
    for (i, (got, want)) in lines.iter().zip(SPECIAL_TOKENS).enumerate() {
        ensure!(*got == want, "line {}: expected {want}, found {got:?}", i + 1);
    }
    Ok(Vocab::from_tokens(lines[SPECIAL_TOKENS.len()..].iter().copied())?)
}

pub fn read_corpus(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))
}

/// Writes through a temporary sibling so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn header_fields(text: &str) -> impl Iterator<Item = (&str, &str)> {
    text.lines()
        .map_while(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once('='))
}

fn field<'a>(text: &'a str, key: &str) -> anyhow::Result<&'a str> {
    header_fields(text)
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v)
        .with_context(|| format!("header lacks {key}"))
}

/// Training log: `# key=value` summary lines, then a tab-separated table with
/// columns `step tokens_seen epoch lr total` followed by one column per loss
/// component.
pub fn format_train_log(log: &TrainLog) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# strategy={}", log.strategy);
    let _ = writeln!(out, "# steps={}", log.steps);
    let _ = writeln!(out, "# total_tokens={}", log.total_tokens);
    let _ = writeln!(out, "# cost_per_token={}", log.cost_per_token);
    let _ = writeln!(out, "# total_flops={}", log.total_flops);
    let _ = writeln!(out, "# epochs={}", log.epochs);
    let _ = writeln!(out, "# checkpoint={}", log.checkpoint.as_deref().unwrap_or(""));
    out.push_str("step\ttokens_seen\tepoch\tlr\ttotal");
    if let Some(r) = log.records.first() {
        for (name, _) in &r.components {
            out.push('\t');
            out.push_str(name);
        }
    }
    out.push('\n');
    for r in &log.records {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{:e}\t{}",
            r.step, r.tokens_seen, r.epoch, r.lr, r.total
        );
        for (_, v) in &r.components {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_train_log(text: &str) -> anyhow::Result<TrainLog> {
    let strategy: Strategy = field(text, "strategy")?.parse()?;
    let num = |k: &str| -> anyhow::Result<u64> { field(text, k)?.parse().with_context(|| format!("field {k}")) };
    let checkpoint = field(text, "checkpoint")?;
    let mut lines = text.lines().skip_while(|l| l.starts_with("# "));
    let header: Vec<&str> = lines.next().context("log has no column header")?.split('\t').collect();
    ensure!(
        header.len() >= 5 && header[..5] == ["step", "tokens_seen", "epoch", "lr", "total"],
        "unexpected columns {header:?}"
    );
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        ensure!(
            cols.len() == header.len(),
            "row {} has {} columns, expected {}",
            i + 1,
            cols.len(),
            header.len()
        );
        let f = |j: usize| -> anyhow::Result<f64> { Ok(cols[j].parse()?) };
        records.push(LogRecord {
            step: cols[0].parse()?,
            tokens_seen: cols[1].parse()?,
            epoch: cols[2].parse()?,
            lr: f(3)?,
            total: f(4)?,
            components: (5..cols.len())
                .map(|j| Ok((header[j].to_string(), f(j)?)))
                .collect::<anyhow::Result<_>>()?,
        });
    }
    Ok(TrainLog {
        strategy,
        records,
        steps: num("steps")?,
        total_tokens: num("total_tokens")?,
        cost_per_token: num("cost_per_token")?,
        total_flops: field(text, "total_flops")?.parse()?,
        epochs: num("epochs")?,
        checkpoint: (!checkpoint.is_empty()).then(|| checkpoint.to_string()),
    })
}

/// Grid-search results of one checkpoint: columns `task batch_size lr metric best`.
pub fn format_probe_results(results: &[(String, GridResult)]) -> String {
    let mut out = String::from("task\tbatch_size\tlr\tmetric\tbest\n");
    for (task, r) in results {
        for run in &r.runs {
            let best = run == &r.best;
            let _ = writeln!(
                out,
                "{task}\t{}\t{:e}\t{}\t{}",
                run.batch_size,
                run.lr,
                run.metric,
                u8::from(best)
            );
        }
    }
    out
}

pub fn parse_probe_results(text: &str) -> anyhow::Result<Vec<(String, GridResult)>> {
    let mut lines = text.lines();
    ensure!(
        lines.next() == Some("task\tbatch_size\tlr\tmetric\tbest"),
        "unexpected probe results header"
    );
    let mut out: Vec<(String, Vec<GridRun>, Option<GridRun>)> = Vec::new();
    for line in lines {
        let c: Vec<&str> = line.split('\t').collect();
        ensure!(c.len() == 5, "malformed probe result row {line:?}");
        let run = GridRun {
            batch_size: c[1].parse()?,
            lr: c[2].parse()?,
            metric: c[3].parse()?,
        };
        if out.last().is_none_or(|t| t.0 != c[0]) {
            out.push((c[0].to_string(), Vec::new(), None));
        }
        let entry = out.last_mut().unwrap();
        entry.1.push(run);
        if c[4] == "1" {
            entry.2 = Some(run);
        }
    }
    out.into_iter()
        .map(|(task, runs, best)| match best {
            Some(best) => Ok((task, GridResult { best, runs })),
            None => bail!("task {task} has no best run"),
        })
        .collect()
}

/// Held-out objective of a pretraining run before and after training.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOut {
    /// `mlm` or `distill` (the layer-wise distillation total).
    pub metric: String,
    pub initial: f64,
    pub r#final: f64,
}

impl HeldOut {
    /// Fractional decrease from the initial value.
    pub fn reduction(&self) -> f64 {
        1.0 - self.r#final / self.initial
    }

    pub fn format(&self) -> String {
        format!(
            "metric\tinitial\tfinal\n{}\t{}\t{}\n",
            self.metric, self.initial, self.r#final
        )
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut lines = text.lines();
        ensure!(
            lines.next() == Some("metric\tinitial\tfinal"),
            "unexpected held-out header"
        );
        let row = lines.next().context("held-out file has no row")?;
        let c: Vec<&str> = row.split('\t').collect();
        ensure!(c.len() == 3, "malformed held-out row {row:?}");
        Ok(Self {
            metric: c[0].to_string(),
            initial: c[1].parse()?,
            r#final: c[2].parse()?,
        })
    }
}
