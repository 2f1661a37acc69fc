//! Reverse-KL distillation from sampled student rollouts.
//!
//! The objective is the sequence-level `KL(q || p)` of the student `q`
//! from the teacher `p`. Its gradient along a rollout `y` splits into
//!
//! * a single-step part, the exact gradient of `KL(q_t || p_t)` at every
//!   visited position, computed over the whole vocabulary, and
//! * a long-horizon part `-w * R_{t+1} * grad log q(y_t)`, where
//!   `r_t = log p(y_t) - log q(y_t)` and `R_{t+1}` is the mean of `r` over
//!   the positions after `t` (zero at the last position).
//!
//! `w` is the clipped per-sequence importance weight between the current
//! student and the policy that produced the rollout. Both parts are
//! averaged over sampled tokens.

use crate::data::{Batch, EncodedExample, PAD};
use crate::distill::losses::sft_loss;
use crate::distill::TrainingRegime;
use crate::error::{Error, Result};
use crate::model::{bind_params, forward, sample_continuation, GenerationBudget, LanguageModel, ParamVars, TransformerParams};
use crate::numerics::tensor::log_softmax_row;
use crate::numerics::{adam_step, AdamState, Graph, Real, Rng, Var};

/// One sampled continuation, addressed by the logit rows that scored it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Row of the student logits that predicted each token.
    pub rows: Vec<usize>,
    pub tokens: Vec<u32>,
    /// Log-probability of each token under the sampling policy.
    pub behavior_logprobs: Vec<f64>,
}

/// Surrogate losses whose gradients are the two parts of the reverse-KL
/// gradient. Their values are not meaningful on their own.
#[derive(Debug, Clone, Copy)]
pub struct RkldTerms {
    pub single: Var,
    pub long: Var,
    /// Mean over rollouts of `sum_t log q(y_t) - log p(y_t)`.
    pub kl_estimate: f64,
    pub clipped: usize,
    pub tokens: usize,
}

/// Builds the single-step and long-horizon surrogates on `g`.
///
/// `teacher_logprobs` holds teacher log-probabilities laid out like
/// `student_logits`; only rows referenced by a rollout are read. Rows must
/// not be shared between rollouts.
pub fn rkld_terms<F: Real>(
    g: &mut Graph<F>,
    student_logits: Var,
    teacher_logprobs: &[F],
    rollouts: &[Rollout],
    importance_clip: f64,
) -> Result<RkldTerms> {
    let (n, v) = g.value(student_logits).dims2()?;
    if teacher_logprobs.len() != n * v {
        return Err(Error::Dimension(format!(
            "teacher log-probs of length {} for {n}x{v} logits",
            teacher_logprobs.len()
        )));
    }
    let tokens: usize = rollouts.iter().map(|r| r.tokens.len()).sum();
    if tokens == 0 {
        return Err(Error::Contract("reverse-KL step without sampled tokens".into()));
    }
    let mut single_w = vec![F::zero(); n];
    let mut long_w = vec![F::zero(); n];
    let mut targets = vec![0u32; n];
    let mut used = vec![false; n];
    let mut kl_sum = 0.0;
    let mut clipped = 0;
    let mut lq_row = vec![F::zero(); v];
    let z = g.value(student_logits).data().to_vec();
    for ro in rollouts {
        let len = ro.tokens.len();
        if ro.rows.len() != len || ro.behavior_logprobs.len() != len {
            return Err(Error::Dimension("rollout rows, tokens and log-probs differ in length".into()));
        }
        let mut rewards = Vec::with_capacity(len);
        let mut log_ratio = 0.0;
        for ((&row, &tok), &behavior) in ro.rows.iter().zip(&ro.tokens).zip(&ro.behavior_logprobs) {
            if row >= n {
                return Err(Error::Dimension(format!("rollout row {row} outside {n} logit rows")));
            }
            if tok as usize >= v {
                return Err(Error::Vocab { id: tok, vocab: v });
            }
            if std::mem::replace(&mut used[row], true) {
                return Err(Error::Contract(format!("logit row {row} used twice")));
            }
            log_softmax_row(&z[row * v..(row + 1) * v], &mut lq_row);
            let lq = lq_row[tok as usize].f64();
            let lp = teacher_logprobs[row * v + tok as usize].f64();
            rewards.push(lp - lq);
            log_ratio += lq - behavior;
        }
        kl_sum -= rewards.iter().sum::<f64>();
        let raw = log_ratio.exp();
        let w = raw.clamp(1.0 / importance_clip, importance_clip);
        if w != raw {
            clipped += 1;
        }
        let scale = w / tokens as f64;
        let mut future = 0.0;
        for t in (0..len).rev() {
            let remaining = len - 1 - t;
            let norm_return = if remaining == 0 { 0.0 } else { future / remaining as f64 };
            let row = ro.rows[t];
            single_w[row] = F::of(scale);
            // weighted_nll contributes -c * grad log q(y_t).
            long_w[row] = F::of(scale * norm_return);
            targets[row] = ro.tokens[t];
            future += rewards[t];
        }
    }
    let single = g.reverse_kl(student_logits, teacher_logprobs, &single_w)?;
    let long = g.weighted_nll(student_logits, &targets, &long_w)?;
    Ok(RkldTerms {
        single,
        long,
        kl_estimate: kl_sum / rollouts.len() as f64,
        clipped,
        tokens,
    })
}

/// What one [`rkld_step`] did.
#[derive(Debug, Clone, PartialEq)]
pub struct RkldDiagnostics {
    /// Monte-Carlo estimate of the sequence-level reverse KL.
    pub reverse_kl: f64,
    pub single_norm: f64,
    pub long_norm: f64,
    pub pt_norm: f64,
    pub pt_loss: Option<f64>,
    /// Norm of the summed gradient before clipping.
    pub grad_norm: f64,
    pub rollouts: usize,
    pub tokens: usize,
    pub clipped: usize,
}

impl RkldDiagnostics {
    pub fn all_clipped(&self) -> bool {
        self.rollouts > 0 && self.clipped == self.rollouts
    }
}

fn norm(grads: &[Vec<f32>]) -> f64 {
    grads.iter().flatten().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn param_grads(g: &Graph<f32>, root: Option<Var>, vars: &[Var], lens: &[usize]) -> Result<Vec<Vec<f32>>> {
    let Some(root) = root else {
        return Ok(lens.iter().map(|&l| vec![0.0; l]).collect());
    };
    let mut grads = g.gradients(root)?;
    Ok(vars
        .iter()
        .zip(lens)
        .map(|(&v, &l)| grads.take(v).unwrap_or_else(|| vec![0.0; l]))
        .collect())
}

/// Teacher log-probabilities for `ids` (`[batch, seq]`), filled only on
/// the requested rows.
fn teacher_logprobs(
    teacher: &TransformerParams<f32>,
    ids: &[u32],
    batch: usize,
    seq: usize,
    rows: &[usize],
) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let pv = bind_params(&mut g, teacher, false)?;
    let logits = forward(&mut g, &pv, ids, batch, seq)?;
    let z = g.value(logits).data();
    let v = teacher.config().vocab_size;
    let mut out = vec![0.0f32; z.len()];
    for &r in rows {
        log_softmax_row(&z[r * v..(r + 1) * v], &mut out[r * v..(r + 1) * v]);
    }
    Ok(out)
}

/// Language-model loss on a pretraining batch, returned as
/// `(weight * loss, loss)`.
pub fn pretrain_loss<F: Real>(g: &mut Graph<F>, pv: &ParamVars, batch: &Batch, weight: f64) -> Result<(Var, Var)> {
    let sb = batch.shifted();
    let logits = forward(g, pv, &sb.inputs, sb.batch_size, sb.seq_len)?;
    let loss = sft_loss(g, logits, &sb.targets, &sb.mask)?;
    Ok((g.scale(loss, F::of(weight))?, loss))
}

/// One reverse-KL update of `student`.
///
/// Draws `rollouts_per_prompt` samples per prompt from the current student,
/// scores them with the teacher, and applies the single-step and
/// long-horizon gradients plus `pt_loss_weight` times the language-model
/// gradient on `pretrain`.
pub fn rkld_step(
    student: &mut TransformerParams<f32>,
    teacher: &TransformerParams<f32>,
    prompts: &[&EncodedExample],
    pretrain: Option<&Batch>,
    regime: &TrainingRegime,
    optimizer: &mut AdamState<f32>,
    rng: &mut Rng,
) -> Result<RkldDiagnostics> {
    let cfg = &regime.rkld;
    if student.config().vocab_size != teacher.config().vocab_size {
        return Err(Error::Config(format!(
            "student vocabulary {} differs from teacher vocabulary {}",
            student.config().vocab_size,
            teacher.config().vocab_size
        )));
    }
    if prompts.is_empty() {
        return Err(Error::Contract("reverse-KL step without prompts".into()));
    }
    if cfg.rollouts_per_prompt == 0 {
        return Err(Error::Config("rollouts_per_prompt must be at least 1".into()));
    }
    let limit = student.context_limit().min(teacher.context_limit());

    // Sample with the current parameters.
    let mut samples = Vec::with_capacity(prompts.len() * cfg.rollouts_per_prompt);
    for p in prompts {
        let budget = GenerationBudget::new(regime.max_new_tokens.min(limit.saturating_sub(p.prompt.len())), crate::data::EOS);
        budget.check(p.prompt.len(), limit)?;
        let (state, logits) = student.prefill(&p.prompt)?;
        for _ in 0..cfg.rollouts_per_prompt {
            let s = sample_continuation(&*student, state.clone(), logits.clone(), budget, rng)?;
            samples.push((&p.prompt, s));
        }
    }

    // Pack prompt + sample (minus its last token) as model inputs.
    let seq = samples.iter().map(|(p, s)| p.len() + s.tokens.len() - 1).max().unwrap_or(1);
    let batch = samples.len();
    let mut ids = Vec::with_capacity(batch * seq);
    let mut rollouts = Vec::with_capacity(batch);
    for (b, (p, s)) in samples.iter().enumerate() {
        let start = ids.len();
        ids.extend_from_slice(p);
        ids.extend_from_slice(&s.tokens[..s.tokens.len() - 1]);
        ids.resize(start + seq, PAD);
        rollouts.push(Rollout {
            rows: (0..s.tokens.len()).map(|j| b * seq + p.len() - 1 + j).collect(),
            tokens: s.tokens.clone(),
            behavior_logprobs: s.logprobs.clone(),
        });
    }
    let rows: Vec<usize> = rollouts.iter().flat_map(|r| r.rows.iter().copied()).collect();
    let tlp = teacher_logprobs(teacher, &ids, batch, seq, &rows)?;

    let mut g = Graph::new();
    let pv = bind_params(&mut g, student, true)?;
    let logits = forward(&mut g, &pv, &ids, batch, seq)?;
    let terms = rkld_terms(&mut g, logits, &tlp, &rollouts, cfg.importance_clip)?;
    let (pt_root, pt_loss) = match pretrain {
        Some(pb) if cfg.pt_loss_weight > 0.0 => {
            let (weighted, raw) = pretrain_loss(&mut g, &pv, pb, cfg.pt_loss_weight)?;
            (Some(weighted), Some(g.value(raw).item()? as f64))
        }
        _ => (None, None),
    };

    let lens: Vec<usize> = student.tensors().iter().map(|t| t.len()).collect();
    let single = param_grads(&g, Some(terms.single), pv.vars(), &lens)?;
    let long = param_grads(&g, Some(terms.long), pv.vars(), &lens)?;
    let pt = param_grads(&g, pt_root, pv.vars(), &lens)?;
    drop(g);
    let total: Vec<Vec<f32>> = single
        .iter()
        .zip(&long)
        .zip(&pt)
        .map(|((a, b), c)| a.iter().zip(b).zip(c).map(|((x, y), z)| x + y + z).collect())
        .collect();

    let mut slices: Vec<&mut [f32]> = student.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
    let grad_refs: Vec<&[f32]> = total.iter().map(|v| v.as_slice()).collect();
    let stats = adam_step(&mut slices, &grad_refs, optimizer)?;

    let diag = RkldDiagnostics {
        reverse_kl: terms.kl_estimate,
        single_norm: norm(&single),
        long_norm: norm(&long),
        pt_norm: norm(&pt),
        pt_loss,
        grad_norm: stats.grad_norm,
        rollouts: rollouts.len(),
        tokens: terms.tokens,
        clipped: terms.clipped,
    };
    if diag.all_clipped() {
        log::warn!("every importance weight in this reverse-KL batch was clipped");
    }
    Ok(diag)
}
