//! FLOP budget accounting.
//!
//! Compute is measured in FLOPs per processed token, from a closed form:
//!
//! ```text
//! C_fwd = L·(24d² + 4sd) + 2dV        (LM head term optional)
//! ```
//!
//! `24d²` covers the four attention projections (`8d²`) and the feed-forward
//! block (`16d²`), `4sd` the score and context products. A training step costs
//! `3·C_fwd` (backward = 2× forward); distillation adds one teacher forward.
//! Optimizer, data pipeline and loss arithmetic are not counted.

use alloc::string::String;

use crate::distill::Strategy;
use crate::encoder::EncoderConfig;
use crate::{Error, Result};

/// Backward pass cost relative to the forward pass.
pub const BACKWARD_MULTIPLIER: u64 = 2;

/// Whether the corpus may be repeated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataMode {
    /// Fresh data for every token of the allowance.
    Unlimited,
    /// A fixed corpus of `corpus_tokens` tokens, repeated as needed.
    Limited { corpus_tokens: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetSpec {
    pub flop_budget: u128,
    pub data_mode: DataMode,
    /// Count the teacher's LM head in vanilla distillation.
    pub count_teacher_lm_head: bool,
}

impl BudgetSpec {
    pub fn new(flop_budget: u128, data_mode: DataMode) -> Result<Self> {
        let spec = Self {
            flop_budget,
            data_mode,
            count_teacher_lm_head: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.flop_budget == 0 {
            return Err(Error::InvalidConfig(String::from("flop budget must be positive")));
        }
        if self.data_mode == (DataMode::Limited { corpus_tokens: 0 }) {
            return Err(Error::InvalidConfig(String::from(
                "limited data mode needs a non-empty corpus",
            )));
        }
        Ok(())
    }
}

/// Per-token forward FLOPs of an encoder at sequence length `s`.
pub fn forward_flops_per_token(config: &EncoderConfig, s: usize, include_lm_head: bool) -> u64 {
    let (l, d, s, v) = (
        config.num_layers as u64,
        config.hidden_size as u64,
        s as u64,
        config.vocab_size as u64,
    );
    let body = l * (24 * d * d + 4 * s * d);
    if include_lm_head {
        body + 2 * d * v
    } else {
        body
    }
}

/// Per-token FLOPs of one training step. The student LM head is always
/// counted; the teacher head only for vanilla distillation when
/// `count_teacher_lm_head` is set.
pub fn train_step_flops_per_token(
    strategy: Strategy,
    student: &EncoderConfig,
    teacher: Option<&EncoderConfig>,
    s: usize,
    count_teacher_lm_head: bool,
) -> Result<u64> {
    let student_cost = (1 + BACKWARD_MULTIPLIER) * forward_flops_per_token(student, s, true);
    match (strategy, teacher) {
        (Strategy::Scratch, _) => Ok(student_cost),
        (_, None) => Err(Error::MissingTeacher(strategy.name())),
        (_, Some(t)) => {
            let head = strategy == Strategy::Vanilla && count_teacher_lm_head;
            Ok(student_cost + forward_flops_per_token(t, s, head))
        }
    }
}

/// `floor(flop_budget / per_token_cost)`.
pub fn tokens_under_budget(budget: &BudgetSpec, per_token_cost: u64) -> Result<u64> {
    if per_token_cost == 0 {
        return Err(Error::InvalidArgument(String::from("per-token cost must be positive")));
    }
    u64::try_from(budget.flop_budget / per_token_cost as u128)
        .map_err(|_| Error::InvalidArgument(String::from("token allowance overflows u64")))
}

/// Passes over a corpus needed to consume `token_allowance` tokens.
pub fn epochs_required(token_allowance: u64, corpus_tokens: u64) -> Result<f64> {
    if corpus_tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(token_allowance as f64 / corpus_tokens as f64)
}

/// Training costs of one student/teacher pairing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub seq_len: usize,
    pub student_forward: u64,
    /// Teacher forward without and with its LM head.
    pub teacher_forward: Option<(u64, u64)>,
    pub count_teacher_lm_head: bool,
}

impl CostModel {
    pub fn new(
        student: &EncoderConfig,
        teacher: Option<&EncoderConfig>,
        seq_len: usize,
        count_teacher_lm_head: bool,
    ) -> Self {
        Self {
            seq_len,
            student_forward: forward_flops_per_token(student, seq_len, true),
            teacher_forward: teacher.map(|t| {
                (
                    forward_flops_per_token(t, seq_len, false),
                    forward_flops_per_token(t, seq_len, true),
                )
            }),
            count_teacher_lm_head,
        }
    }

    pub fn per_token(&self, strategy: Strategy) -> Result<u64> {
        let student = (1 + BACKWARD_MULTIPLIER) * self.student_forward;
        match (strategy, self.teacher_forward) {
            (Strategy::Scratch, _) => Ok(student),
            (_, None) => Err(Error::MissingTeacher(strategy.name())),
            (Strategy::Vanilla, Some((_, with_head))) if self.count_teacher_lm_head => Ok(student + with_head),
            (_, Some((without, _))) => Ok(student + without),
        }
    }

    pub fn token_allowance(&self, strategy: Strategy, budget: &BudgetSpec) -> Result<u64> {
        tokens_under_budget(budget, self.per_token(strategy)?)
    }
}
