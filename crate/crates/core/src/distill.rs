//! Distillation objectives.
//!
//! Every loss takes teacher and student activations living on the same
//! [`Graph`] and detaches the teacher side itself, so no gradient ever reaches
//! teacher weights. Layer-wise losses read the last layer only.
//!
//! * vanilla: `t² · CE(softmax(z_T/t), softmax(z_S/t))` at masked positions,
//!   mixed with the MLM loss as `w_ce·L_ce + w_pred·L_pred`.
//! * TinyBERT: `MSE(E_S W_e, E_T) + mean_h MSE(A_S, A_T) + MSE(H_S W_h, H_T)`.
//! * MiniLM: `KL(attn_T ‖ attn_S) + KL(VR_T ‖ VR_S)` with
//!   `VR = softmax(V Vᵀ / √d_k)` per head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::encoder::{mlm_loss, Batch, EncoderConfig, EncoderOutputs, Param};
use crate::rng;
use crate::tensor::{softmax_in_place, Graph, Tensor};
use crate::{Error, Real, Result};

/// Pretraining strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Scratch,
    Vanilla,
    TinyBert,
    MiniLm,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Scratch,
        Strategy::Vanilla,
        Strategy::TinyBert,
        Strategy::MiniLm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Scratch => "scratch",
            Strategy::Vanilla => "vanilla",
            Strategy::TinyBert => "tinybert",
            Strategy::MiniLm => "minilm",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Strategy::Scratch
    }

    /// TinyBERT and MiniLM align internal activations rather than logits.
    pub fn is_layer_wise(self) -> bool {
        matches!(self, Strategy::TinyBert | Strategy::MiniLm)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scratch" | "no-kd" => Ok(Strategy::Scratch),
            "vanilla" | "vanilla-kd" => Ok(Strategy::Vanilla),
            "tinybert" => Ok(Strategy::TinyBert),
            "minilm" => Ok(Strategy::MiniLm),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Weights of the vanilla objective `w_ce·L_ce + w_pred·L_pred`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VanillaWeights {
    pub ce: f64,
    pub pred: f64,
}

impl Default for VanillaWeights {
    fn default() -> Self {
        Self { ce: 0.5, pred: 0.5 }
    }
}

/// Trainable bridges from student width to teacher width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projections<T> {
    pub embedding: Param<T>,
    pub hidden: Param<T>,
}

impl<T: Real> Projections<T> {
    /// Identity when the widths agree, otherwise truncated normal(0, 0.02).
    pub fn new(student_width: usize, teacher_width: usize, seed: u64) -> Self {
        let make = |name: &str, stream: u64| {
            let data = if student_width == teacher_width {
                let mut d = vec![T::zero(); student_width * teacher_width];
                for i in 0..student_width {
                    d[i * teacher_width + i] = T::one();
                }
                d
            } else {
                let mut r = rng::stream(seed, &[0x7072_6f6a, stream]);
                (0..student_width * teacher_width)
                    .map(|_| T::from_f64(rng::truncated_normal(&mut r, 0.02)))
                    .collect()
            };
            Param {
                name: String::from(name),
                shape: vec![student_width, teacher_width],
                data,
                decay: true,
            }
        };
        Self {
            embedding: make("projection.embedding", 0),
            hidden: make("projection.hidden", 1),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundProjections> {
        Ok(BoundProjections {
            embedding: g.leaf(&self.embedding.shape, self.embedding.data.clone(), trainable)?,
            hidden: g.leaf(&self.hidden.shape, self.hidden.data.clone(), trainable)?,
        })
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.embedding, &mut self.hidden]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundProjections {
    pub embedding: Tensor,
    pub hidden: Tensor,
}

/// Strategy selector with its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSpec<T> {
    pub strategy: Strategy,
    pub temperature: f64,
    pub vanilla_weights: VanillaWeights,
    /// Present exactly for TinyBERT.
    pub projections: Option<Projections<T>>,
    /// Head count shared by teacher and student for attention losses.
    pub relation_heads: usize,
    /// Evaluate the vanilla soft cross-entropy at every valid position
    /// instead of masked positions only.
    pub soft_ce_all_positions: bool,
    /// Add the student's MLM loss to the TinyBERT/MiniLM objective.
    pub add_mlm_term: bool,
}

impl<T: Real> DistillSpec<T> {
    /// Defaults: `t = 1`, weights 0.5/0.5, no MLM term for layer-wise losses.
    pub fn new(
        strategy: Strategy,
        student: &EncoderConfig,
        teacher: Option<&EncoderConfig>,
        seed: u64,
    ) -> Result<Self> {
        if strategy.needs_teacher() && teacher.is_none() {
            return Err(Error::MissingTeacher(strategy.name()));
        }
        if strategy.is_layer_wise() {
            let t = teacher.unwrap();
            if t.num_heads != student.num_heads {
                return Err(Error::HeadCountMismatch {
                    teacher: t.num_heads,
                    student: student.num_heads,
                });
            }
        }
        let projections = match (strategy, teacher) {
            (Strategy::TinyBert, Some(t)) => Some(Projections::new(student.hidden_size, t.hidden_size, seed)),
            _ => None,
        };
        Ok(Self {
            strategy,
            temperature: 1.0,
            vanilla_weights: VanillaWeights::default(),
            projections,
            relation_heads: student.num_heads,
            soft_ce_all_positions: false,
            add_mlm_term: false,
        })
    }
}

fn as_rows<T: Real>(g: &mut Graph<T>, x: Tensor) -> Result<Tensor> {
    let shape = g.shape(x);
    let last = *shape.last().unwrap_or(&1);
    let n = g.value(x).len() / last;
    g.reshape(x, &[n, last])
}

/// Soft cross-entropy `t² · mean_rows −Σ_v softmax(z_T/t)_v · ln softmax(z_S/t)_v`
/// over the given flat rows (positions) of the logits.
pub fn vanilla_kd_loss<T: Real>(g: &mut Graph<T>, z_t: Tensor, z_s: Tensor, t: f64, rows: &[usize]) -> Result<Tensor> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    if g.shape(z_t) != g.shape(z_s) {
        return Err(Error::ShapeMismatch {
            op: "vanilla_kd_loss",
            lhs: g.shape(z_t).to_vec(),
            rhs: g.shape(z_s).to_vec(),
        });
    }
    if rows.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let inv_t = T::from_f64(1.0 / t);
    let v = *g.shape(z_t).last().unwrap();
    let zt = g.value(z_t);
    let mut target = Vec::with_capacity(rows.len() * v);
    for &r in rows {
        let mut row: Vec<T> = zt[r * v..(r + 1) * v].iter().map(|&x| x * inv_t).collect();
        softmax_in_place(&mut row);
        target.extend(row);
    }
    let target = g.constant(&[rows.len(), v], target)?;
    let zs = as_rows(g, z_s)?;
    let zs = g.select_rows(zs, rows)?;
    let zs = g.scale(zs, inv_t);
    let logq = g.log_softmax_rows(zs)?;
    let prod = g.mul(target, logq)?;
    let total = g.sum(prod);
    Ok(g.scale(total, T::from_f64(-t * t / rows.len() as f64)))
}

/// `w_ce·L_ce + w_pred·L_pred`.
pub fn combined_vanilla_objective<T: Real>(
    g: &mut Graph<T>,
    l_ce: Tensor,
    l_pred: Tensor,
    w: VanillaWeights,
) -> Result<Tensor> {
    if !(w.ce >= 0.0 && w.pred >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "vanilla weights must be non-negative: {w:?}"
        )));
    }
    let a = g.scale(l_ce, T::from_f64(w.ce));
    let b = g.scale(l_pred, T::from_f64(w.pred));
    g.add(a, b)
}

/// Projected-student vs teacher MSE over valid positions and all teacher channels.
fn projected_mse<T: Real>(
    op: &'static str,
    g: &mut Graph<T>,
    student: Tensor,
    teacher: Tensor,
    projection: Tensor,
    mask: &[bool],
) -> Result<Tensor> {
    let (ss, st, sp) = (
        g.shape(student).to_vec(),
        g.shape(teacher).to_vec(),
        g.shape(projection).to_vec(),
    );
    let ok =
        ss.len() == 3 && st.len() == 3 && ss[..2] == st[..2] && sp == [ss[2], st[2]] && mask.len() == ss[0] * ss[1];
    if !ok {
        return Err(Error::ShapeMismatch { op, lhs: ss, rhs: st });
    }
    let rows: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: no valid positions")));
    }
    let teacher = g.detach(teacher);
    let t2 = as_rows(g, teacher)?;
    let t2 = g.select_rows(t2, &rows)?;
    let s2 = as_rows(g, student)?;
    let s2 = g.select_rows(s2, &rows)?;
    let proj = g.matmul(s2, projection)?;
    let diff = g.sub(proj, t2)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// `MSE(E_S·W_e, E_T)` over valid positions.
pub fn tinybert_embedding_loss<T: Real>(
    g: &mut Graph<T>,
    e_s: Tensor,
    e_t: Tensor,
    w_e: Tensor,
    mask: &[bool],
) -> Result<Tensor> {
    projected_mse("tinybert_embedding_loss", g, e_s, e_t, w_e, mask)
}

/// `MSE(H_S·W_h, H_T)` over valid positions of last-layer hidden states.
pub fn tinybert_hidden_loss<T: Real>(
    g: &mut Graph<T>,
    h_s: Tensor,
    h_t: Tensor,
    w_h: Tensor,
    mask: &[bool],
) -> Result<Tensor> {
    projected_mse("tinybert_hidden_loss", g, h_s, h_t, w_h, mask)
}

fn check_heads(
    g: &Graph<impl Real>,
    op: &'static str,
    t: Tensor,
    s: Tensor,
    mask: &[bool],
) -> Result<(usize, usize, usize)> {
    let (st, ss) = (g.shape(t), g.shape(s));
    if st.len() != 4 || ss.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: st.to_vec(),
            rhs: ss.to_vec(),
        });
    }
    if st[1] != ss[1] {
        return Err(Error::HeadCountMismatch {
            teacher: st[1],
            student: ss[1],
        });
    }
    if st[0] != ss[0] || st[2] != ss[2] || mask.len() != st[0] * st[2] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: st.to_vec(),
            rhs: ss.to_vec(),
        });
    }
    Ok((st[0], st[1], st[2]))
}

/// Mean over heads of the MSE between scaled pre-softmax attention scores,
/// over (valid query, valid key) pairs. Every head has the same number of
/// valid pairs, so this equals the flat mean over all selected entries.
pub fn tinybert_attention_loss<T: Real>(g: &mut Graph<T>, a_s: Tensor, a_t: Tensor, mask: &[bool]) -> Result<Tensor> {
    let (b, heads, s) = check_heads(g, "tinybert_attention_loss", a_t, a_s, mask)?;
    if g.shape(a_t) != g.shape(a_s) {
        return Err(Error::ShapeMismatch {
            op: "tinybert_attention_loss",
            lhs: g.shape(a_t).to_vec(),
            rhs: g.shape(a_s).to_vec(),
        });
    }
    let mut idx = Vec::new();
    for bi in 0..b {
        for h in 0..heads {
            for q in 0..s {
                if !mask[bi * s + q] {
                    continue;
                }
                for k in 0..s {
                    if mask[bi * s + k] {
                        idx.push(((bi * heads + h) * s + q) * s + k);
                    }
                }
            }
        }
    }
    let teacher = g.detach(a_t);
    let t = g.gather(teacher, &idx)?;
    let st = g.gather(a_s, &idx)?;
    let diff = g.sub(st, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Flat `(b, head, query)` row indices of valid queries.
fn valid_query_rows(b: usize, heads: usize, s: usize, mask: &[bool]) -> Vec<usize> {
    let mut rows = Vec::new();
    for bi in 0..b {
        for h in 0..heads {
            for q in 0..s {
                if mask[bi * s + q] {
                    rows.push((bi * heads + h) * s + q);
                }
            }
        }
    }
    rows
}

fn row_kl<T: Real>(op: &'static str, g: &mut Graph<T>, p: Tensor, q: Tensor, rows: &[usize]) -> Result<Tensor> {
    let p = g.detach(p);
    let p = as_rows(g, p)?;
    let p = g.select_rows(p, rows)?;
    let q = as_rows(g, q)?;
    let q = g.select_rows(q, rows)?;
    let n = *g.shape(p).last().unwrap();
    for side in [p, q] {
        for (r, row) in g.value(side).chunks(n).enumerate() {
            let sum: f64 = row.iter().map(|v| Real::to_f64(*v)).sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::NotADistribution { op, row: rows[r], sum });
            }
        }
    }
    let kl = g.kl_div(p, q)?;
    Ok(g.scale(kl, T::from_f64(1.0 / rows.len() as f64)))
}

/// Mean over (batch, head, valid query) of `KL(teacher row ‖ student row)`
/// between last-layer attention distributions.
pub fn minilm_attention_kl<T: Real>(g: &mut Graph<T>, ad_t: Tensor, ad_s: Tensor, mask: &[bool]) -> Result<Tensor> {
    let (b, heads, s) = check_heads(g, "minilm_attention_kl", ad_t, ad_s, mask)?;
    let rows = valid_query_rows(b, heads, s, mask);
    row_kl("minilm_attention_kl", g, ad_t, ad_s, &rows)
}

/// Per-head `softmax(V·Vᵀ/√d_k)` with pad keys excluded, as `B·A·s × s` rows.
pub fn value_relation<T: Real>(g: &mut Graph<T>, v: Tensor, mask: &[bool]) -> Result<Tensor> {
    let shape = g.shape(v).to_vec();
    let (b, heads, s, dk) = (shape[0], shape[1], shape[2], shape[3]);
    let v3 = g.reshape(v, &[b * heads, s, dk])?;
    let rel = g.batched_matmul(v3, v3, true)?;
    let rel = g.scale(rel, T::one() / T::from_f64(dk as f64).sqrt());
    let key_mask: Vec<bool> = (0..b * heads * s * s)
        .map(|i| !mask[(i / (heads * s * s)) * s + i % s])
        .collect();
    let rel = g.mask_fill_neg_inf(rel, key_mask)?;
    let rel = g.reshape(rel, &[b * heads * s, s])?;
    g.softmax_rows(rel)
}

/// `1/(A_h·|x|) Σ_heads Σ_valid queries KL(VR_T ‖ VR_S)`; with several
/// sequences `|x|` is the total count of valid positions. Head widths of the
/// two sides may differ.
pub fn minilm_value_relation_loss<T: Real>(
    g: &mut Graph<T>,
    v_t: Tensor,
    v_s: Tensor,
    mask: &[bool],
) -> Result<Tensor> {
    let (b, heads, s) = check_heads(g, "minilm_value_relation_loss", v_t, v_s, mask)?;
    let v_t = g.detach(v_t);
    let rel_t = value_relation(g, v_t, mask)?;
    let rel_s = value_relation(g, v_s, mask)?;
    let rows = valid_query_rows(b, heads, s, mask);
    row_kl("minilm_value_relation_loss", g, rel_t, rel_s, &rows)
}

/// Total objective and its named components.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Tensor,
    pub components: Vec<(&'static str, Tensor)>,
}

/// Objective for one step. `teacher` may be `None` only for scratch training;
/// `projections` must be bound for TinyBERT.
pub fn total_distill_objective<T: Real>(
    g: &mut Graph<T>,
    spec: &DistillSpec<T>,
    projections: Option<&BoundProjections>,
    teacher: Option<&EncoderOutputs>,
    student: &EncoderOutputs,
    batch: &Batch,
) -> Result<Objective> {
    let mask = &batch.attention_mask;
    let mut components = Vec::new();
    let total = match spec.strategy {
        Strategy::Scratch => {
            let ce = mlm_loss(g, student, batch)?;
            components.push(("mlm", ce));
            ce
        }
        Strategy::Vanilla => {
            let teacher = teacher.ok_or(Error::MissingTeacher("vanilla"))?;
            let (zt, zs) = match (teacher.mlm_logits, student.mlm_logits) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::InvalidArgument(String::from(
                        "vanilla distillation needs MLM logits",
                    )))
                }
            };
            let rows = if spec.soft_ce_all_positions {
                batch.valid_rows()
            } else {
                batch.masked_rows()
            };
            let ce = mlm_loss(g, student, batch)?;
            let pred = vanilla_kd_loss(g, zt, zs, spec.temperature, &rows)?;
            components.push(("mlm", ce));
            components.push(("soft_ce", pred));
            combined_vanilla_objective(g, ce, pred, spec.vanilla_weights)?
        }
        Strategy::TinyBert => {
            let teacher = teacher.ok_or(Error::MissingTeacher("tinybert"))?;
            let proj = projections.ok_or_else(|| Error::InvalidArgument(String::from("tinybert needs projections")))?;
            let (ht, hs) = last_pair(&teacher.hidden_states, &student.hidden_states)?;
            let (at, as_) = last_pair(&teacher.attention_logits, &student.attention_logits)?;
            let embd = tinybert_embedding_loss(
                g,
                student.embedding_output,
                teacher.embedding_output,
                proj.embedding,
                mask,
            )?;
            let att = tinybert_attention_loss(g, as_, at, mask)?;
            let hid = tinybert_hidden_loss(g, hs, ht, proj.hidden, mask)?;
            components.push(("embd", embd));
            components.push(("att", att));
            components.push(("hid", hid));
            let t = g.add(embd, att)?;
            g.add(t, hid)?
        }
        Strategy::MiniLm => {
            let teacher = teacher.ok_or(Error::MissingTeacher("minilm"))?;
            let (adt, ads) = last_pair(&teacher.attention_dists, &student.attention_dists)?;
            let (vt, vs) = last_pair(&teacher.values, &student.values)?;
            let att = minilm_attention_kl(g, adt, ads, mask)?;
            let vr = minilm_value_relation_loss(g, vt, vs, mask)?;
            components.push(("attn_kl", att));
            components.push(("vr", vr));
            g.add(att, vr)?
        }
    };
    let total = if spec.strategy.is_layer_wise() && spec.add_mlm_term {
        let ce = mlm_loss(g, student, batch)?;
        components.push(("mlm", ce));
        g.add(total, ce)?
    } else {
        total
    };
    Ok(Objective { total, components })
}

fn last_pair(t: &[Tensor], s: &[Tensor]) -> Result<(Tensor, Tensor)> {
    match (t.last(), s.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => Err(Error::InvalidArgument(String::from(
            "layer-wise distillation needs at least one layer on both sides",
        ))),
    }
}
