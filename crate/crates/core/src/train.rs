//! Budgeted pretraining, AdamW with a linear schedule, and probe-task
//! finetuning with a grid search.
//!
//! The schedule position of a step is the fraction of the token allowance
//! consumed at the middle of its batch, so two runs with equal allowances
//! follow the same curve regardless of batch composition.

mod optim;
mod probe;

pub use optim::{adamw_step, grad_norm, lr_at, OptimizerConfig, OptimizerState, PEAK_LR_KD, PEAK_LR_SCRATCH};
pub use probe::{
    finetune_probe, grid_search, Example, FinetuneParams, FinetuneResult, Grid, GridResult, GridRun, ProbeData,
    ProbeKind, ProbeTask, NUM_CLASSES,
};

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::TokenStream;
use crate::distill::{total_distill_objective, DistillSpec, Projections, Strategy};
use crate::encoder::{forward_with, Batch, EncoderWeights, Param};
use crate::tensor::Graph;
use crate::{Error, Real, Result};

/// One logged interval.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub epoch: u64,
    pub lr: f64,
    pub total: f64,
    /// Named loss components of the step's objective.
    pub components: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub strategy: Strategy,
    pub records: Vec<LogRecord>,
    pub steps: u64,
    pub total_tokens: u64,
    pub cost_per_token: u64,
    /// `total_tokens · cost_per_token`.
    pub total_flops: u128,
    pub epochs: u64,
    /// Where the final weights were stored, once known.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainOptions {
    pub optimizer: OptimizerConfig,
    /// Record every `log_every` optimizer steps; the last step is always recorded.
    pub log_every: u64,
    /// Batches whose gradients are averaged per optimizer step.
    pub grad_accumulation: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            log_every: 10,
            grad_accumulation: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutput<T> {
    pub student: EncoderWeights<T>,
    pub projections: Option<Projections<T>>,
    pub log: TrainLog,
}

/// Mean objective components over a set of batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl Evaluation {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.0 == name).map(|c| c.1)
    }
}

fn check_pair<T: Real>(
    spec: &DistillSpec<T>,
    projections: Option<&Projections<T>>,
    student: &EncoderWeights<T>,
    teacher: Option<&EncoderWeights<T>>,
) -> Result<()> {
    student.validate()?;
    match (spec.strategy.needs_teacher(), teacher) {
        (true, None) => return Err(Error::MissingTeacher(spec.strategy.name())),
        (false, Some(_)) => {
            return Err(Error::InvalidArgument(String::from(
                "scratch training takes no teacher",
            )));
        }
        _ => {}
    }
    if let Some(t) = teacher {
        t.validate()?;
        let (tc, sc) = (&t.config, &student.config);
        if spec.strategy.is_layer_wise() && tc.num_heads != sc.num_heads {
            return Err(Error::HeadCountMismatch {
                teacher: tc.num_heads,
                student: sc.num_heads,
            });
        }
        if tc.vocab_size != sc.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "teacher vocabulary {} differs from student vocabulary {}",
                tc.vocab_size, sc.vocab_size
            )));
        }
        if let Some(p) = projections {
            if p.embedding.shape != [sc.hidden_size, tc.hidden_size] || p.hidden.shape != p.embedding.shape {
                return Err(Error::InvalidConfig(String::from(
                    "projection shapes do not bridge student to teacher",
                )));
            }
        }
    }
    if spec.strategy == Strategy::TinyBert && projections.is_none() {
        return Err(Error::InvalidConfig(String::from("tinybert needs projections")));
    }
    Ok(())
}

fn student_needs_logits<T>(spec: &DistillSpec<T>) -> bool {
    !spec.strategy.is_layer_wise() || spec.add_mlm_term
}

/// Objective value, component values and (optionally) gradients for one batch.
struct StepResult<T> {
    total: f64,
    components: Vec<(String, f64)>,
    grads: Option<Vec<Vec<T>>>,
}

fn run_batch<T: Real>(
    student: &EncoderWeights<T>,
    projections: Option<&Projections<T>>,
    spec: &DistillSpec<T>,
    teacher: Option<&EncoderWeights<T>>,
    batch: &Batch,
    with_grads: bool,
) -> Result<StepResult<T>> {
    let mut g = Graph::new();
    let t_out = match teacher {
        Some(t) => {
            let bound = t.bind(&mut g, false)?;
            Some(forward_with(&mut g, &bound, batch, spec.strategy == Strategy::Vanilla)?)
        }
        None => None,
    };
    let s_bound = student.bind(&mut g, with_grads)?;
    let s_out = forward_with(&mut g, &s_bound, batch, student_needs_logits(spec))?;
    let p_bound = match projections {
        Some(p) => Some(p.bind(&mut g, with_grads)?),
        None => None,
    };
    let obj = total_distill_objective(&mut g, spec, p_bound.as_ref(), t_out.as_ref(), &s_out, batch)?;
    let total = g.item(obj.total).to_f64();
    let components = obj
        .components
        .iter()
        .map(|(n, t)| (n.to_string(), g.item(*t).to_f64()))
        .collect();
    let grads = if with_grads {
        if !total.is_finite() {
            return Err(Error::NonFinite {
                op: "objective",
                index: 0,
            });
        }
        g.backward(obj.total)?;
        let mut grads = student.grads(&g, &s_bound);
        if let (Some(p), Some(b)) = (projections, p_bound) {
            for (param, t) in [(&p.embedding, b.embedding), (&p.hidden, b.hidden)] {
                grads.push(
                    g.grad(t)
                        .map(<[T]>::to_vec)
                        .unwrap_or_else(|| vec![T::zero(); param.data.len()]),
                );
            }
        }
        Some(grads)
    } else {
        None
    };
    Ok(StepResult {
        total,
        components,
        grads,
    })
}

/// Averages the objective of `spec` over `batches` without updating anything.
pub fn evaluate<T: Real>(
    student: &EncoderWeights<T>,
    projections: Option<&Projections<T>>,
    spec: &DistillSpec<T>,
    teacher: Option<&EncoderWeights<T>>,
    batches: &[Batch],
) -> Result<Evaluation> {
    check_pair(spec, projections, student, teacher)?;
    if batches.is_empty() {
        return Err(Error::InvalidArgument(String::from(
            "evaluation needs at least one batch",
        )));
    }
    let mut total = 0.0;
    let mut components: Vec<(String, f64)> = Vec::new();
    for b in batches {
        let r = run_batch(student, projections, spec, teacher, b, false)?;
        total += r.total;
        if components.is_empty() {
            components = r.components;
        } else {
            for (acc, (_, v)) in components.iter_mut().zip(r.components) {
                acc.1 += v;
            }
        }
    }
    let n = batches.len() as f64;
    for c in &mut components {
        c.1 /= n;
    }
    Ok(Evaluation {
        total: total / n,
        components,
    })
}

/// Trains `student` on `stream` until its token allowance is spent.
///
/// The teacher (required exactly for distillation strategies) only runs
/// forward and never receives gradients. Projections in `spec` are trained
/// jointly with the student and returned.
pub fn pretrain<T: Real>(
    mut student: EncoderWeights<T>,
    mut spec: DistillSpec<T>,
    teacher: Option<&EncoderWeights<T>>,
    stream: &mut TokenStream,
    cost_per_token: u64,
    opts: &PretrainOptions,
) -> Result<PretrainOutput<T>> {
    check_pair(&spec, spec.projections.as_ref(), &student, teacher)?;
    if opts.grad_accumulation == 0 || opts.log_every == 0 {
        return Err(Error::InvalidConfig(String::from(
            "grad_accumulation and log_every must be positive",
        )));
    }
    if stream.spec().seq_len > student.config.max_seq_len
        || teacher.is_some_and(|t| stream.spec().seq_len > t.config.max_seq_len)
    {
        return Err(Error::InvalidConfig(format!(
            "stream sequence length {} exceeds a model's max_seq_len",
            stream.spec().seq_len
        )));
    }
    let allowance = stream.spec().token_allowance;
    let mut projections = spec.projections.take();
    let mut state = {
        let params = student
            .params
            .iter()
            .chain(projections.iter().flat_map(|p| [&p.embedding, &p.hidden]));
        OptimizerState::new(opts.optimizer, params)?
    };
    let mut records = Vec::new();
    let mut step = 0u64;
    loop {
        let before = stream.emitted();
        let mut batches = Vec::with_capacity(opts.grad_accumulation);
        while batches.len() < opts.grad_accumulation {
            match stream.next_batch()? {
                Some(b) => batches.push(b),
                None => break,
            }
        }
        if batches.is_empty() {
            break;
        }
        let after = stream.emitted();
        let mid = (before as f64 + after as f64) / 2.0;
        let lr = lr_at(
            mid / allowance.max(1) as f64,
            opts.optimizer.peak_lr,
            opts.optimizer.warmup,
        )?;

        let k = batches.len();
        let mut grads: Option<Vec<Vec<T>>> = None;
        let mut total = 0.0;
        let mut components: Vec<(String, f64)> = Vec::new();
        for b in &batches {
            let r = run_batch(&student, projections.as_ref(), &spec, teacher, b, true)?;
            total += r.total / k as f64;
            if components.is_empty() {
                components = r.components.into_iter().map(|(n, v)| (n, v / k as f64)).collect();
            } else {
                for (acc, (_, v)) in components.iter_mut().zip(r.components) {
                    acc.1 += v / k as f64;
                }
            }
            let new = r.grads.unwrap();
            match &mut grads {
                None => grads = Some(new),
                Some(acc) => {
                    for (a, n) in acc.iter_mut().zip(new) {
                        for (x, y) in a.iter_mut().zip(n) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.unwrap();
        if k > 1 {
            let inv = T::from_f64(1.0 / k as f64);
            grads.iter_mut().flatten().for_each(|x| *x *= inv);
        }
        {
            let mut params: Vec<&mut Param<T>> = student.params.iter_mut().collect();
            if let Some(p) = projections.as_mut() {
                params.extend(p.params_mut());
            }
            adamw_step(&mut params, &grads, &mut state, lr)?;
        }
        step += 1;
        let last = stream.emitted() >= allowance;
        if step.is_multiple_of(opts.log_every) || step == 1 || last {
            log::debug!(
                "{} step {step}: tokens {} loss {total:.4} lr {lr:.2e}",
                spec.strategy,
                stream.emitted()
            );
            records.push(LogRecord {
                step,
                tokens_seen: stream.emitted(),
                epoch: stream.epoch_counter(),
                lr,
                total,
                components,
            });
        }
    }
    let total_tokens = stream.emitted();
    spec.projections = None;
    Ok(PretrainOutput {
        student,
        projections,
        log: TrainLog {
            strategy: spec.strategy,
            records,
            steps: step,
            total_tokens,
            cost_per_token,
            total_flops: total_tokens as u128 * cost_per_token as u128,
            epochs: stream.epoch_counter(),
            checkpoint: None,
        },
    })
}
