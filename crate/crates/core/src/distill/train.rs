use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;

use crate::data::{encode_example, make_batches_encoded, Batch, Corpus, EncodedExample, Tokenizer};
use crate::distill::losses::{mixed_wordkd_loss, sft_loss};
use crate::distill::rkld::rkld_step;
use crate::distill::seqkd::{build_seqkd_corpus, SeqKdCorpus};
use crate::distill::{RegimeKind, TrainedModel, TrainingRegime};
use crate::error::{Error, Result};
use crate::model::{bind_params, forward, init_params, ModelConfig, TransformerParams};
use crate::numerics::{adam_step, derive_seed, rng_from_seed, AdamState, Graph};

/// Teacher-derived artifacts that several student runs can share: the
/// teacher's logits on every training sequence (word-KD) and the
/// beam-search rewrite of the corpus (SeqKD). Entries are keyed by a hash
/// of the teacher parameters and the corpus, so a stale cache is never
/// reused.
#[derive(Debug, Default)]
pub struct TeacherCache {
    logits: HashMap<u64, std::sync::Arc<Vec<Vec<f32>>>>,
    seqkd: HashMap<(u64, usize, usize), SeqKdCorpus>,
}

impl TeacherCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// SeqKD corpus for this teacher and corpus, built on first use.
    pub fn seqkd_corpus(
        &mut self,
        teacher: &TransformerParams<f32>,
        corpus: &Corpus,
        beam_width: usize,
        max_new_tokens: usize,
    ) -> Result<&SeqKdCorpus> {
        let key = (fingerprint(teacher, corpus), beam_width, max_new_tokens);
        if let Entry::Vacant(e) = self.seqkd.entry(key) {
            log::info!("building SeqKD corpus over {} examples (beam {beam_width})", corpus.len());
            let built = build_seqkd_corpus(teacher, corpus, beam_width, max_new_tokens)?;
            e.insert(built);
        }
        Ok(&self.seqkd[&key])
    }

    fn teacher_logits(
        &mut self,
        teacher: &TransformerParams<f32>,
        corpus: &Corpus,
        encoded: &[EncodedExample],
    ) -> Result<std::sync::Arc<Vec<Vec<f32>>>> {
        let key = fingerprint(teacher, corpus);
        if let Some(l) = self.logits.get(&key) {
            return Ok(l.clone());
        }
        let l = std::sync::Arc::new(compute_teacher_logits(teacher, encoded)?);
        self.logits.insert(key, l.clone());
        Ok(l)
    }
}

fn fingerprint(teacher: &TransformerParams<f32>, corpus: &Corpus) -> u64 {
    let mut h = DefaultHasher::new();
    for t in teacher.tensors() {
        for x in t.data() {
            x.to_bits().hash(&mut h);
        }
    }
    for e in &corpus.examples {
        e.instruction.hash(&mut h);
        e.context.hash(&mut h);
        e.response.hash(&mut h);
    }
    h.finish()
}

/// Teacher logits for every input position of every sequence.
fn compute_teacher_logits(teacher: &TransformerParams<f32>, encoded: &[EncodedExample]) -> Result<Vec<Vec<f32>>> {
    let v = teacher.config().vocab_size;
    let mut out = Vec::with_capacity(encoded.len());
    let idx: Vec<usize> = (0..encoded.len()).collect();
    for chunk in idx.chunks(16) {
        let items: Vec<_> = chunk.iter().map(|&i| (i, &encoded[i])).collect();
        let sb = crate::data::pack(&items).shifted();
        let mut g = Graph::new();
        let pv = bind_params(&mut g, teacher, false)?;
        let logits = forward(&mut g, &pv, &sb.inputs, sb.batch_size, sb.seq_len)?;
        let z = g.value(logits).data();
        for (b, &i) in chunk.iter().enumerate() {
            let rows = encoded[i].sequence_len() - 1;
            let start = b * sb.seq_len * v;
            out.push(z[start..start + rows * v].to_vec());
        }
    }
    Ok(out)
}

fn encode_all(corpus: &Corpus, config: &ModelConfig) -> Result<Vec<EncodedExample>> {
    corpus
        .examples
        .iter()
        .map(|e| {
            let enc = encode_example(&Tokenizer, e);
            if enc.sequence_len() > config.max_seq_len {
                return Err(Error::Length {
                    len: enc.sequence_len(),
                    limit: config.max_seq_len,
                });
            }
            Ok(enc)
        })
        .collect()
}

fn apply(params: &mut TransformerParams<f32>, grads: &[Vec<f32>], opt: &mut AdamState<f32>) -> Result<()> {
    let mut slices: Vec<&mut [f32]> = params.tensors_mut().iter_mut().map(|t| t.data_mut()).collect();
    let refs: Vec<&[f32]> = grads.iter().map(|g| g.as_slice()).collect();
    adam_step(&mut slices, &refs, opt)?;
    Ok(())
}

/// One likelihood step (SFT, or the word-KD mixture when teacher logits
/// are supplied). Returns the loss.
fn likelihood_step(
    params: &mut TransformerParams<f32>,
    batch: &Batch,
    teacher_logits: Option<&[Vec<f32>]>,
    regime: &TrainingRegime,
    opt: &mut AdamState<f32>,
) -> Result<f32> {
    let sb = batch.shifted();
    let mut g = Graph::new();
    let pv = bind_params(&mut g, params, true)?;
    let logits = forward(&mut g, &pv, &sb.inputs, sb.batch_size, sb.seq_len)?;
    let loss = match teacher_logits {
        None => sft_loss(&mut g, logits, &sb.targets, &sb.mask)?,
        Some(cache) => {
            let v = params.config().vocab_size;
            let mut t = vec![0.0f32; sb.batch_size * sb.seq_len * v];
            for (b, &e) in batch.examples.iter().enumerate() {
                let src = &cache[e];
                let start = b * sb.seq_len * v;
                t[start..start + src.len()].copy_from_slice(src);
            }
            mixed_wordkd_loss(
                &mut g,
                logits,
                &t,
                &sb.targets,
                &sb.mask,
                regime.word_kd_mix,
                regime.kd_temperature,
            )?
        }
    };
    let value = g.value(loss).item()?;
    let mut grads = g.gradients(loss)?;
    let gv: Vec<Vec<f32>> = pv
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&var, t)| grads.take(var).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);
    apply(params, &gv, opt)?;
    Ok(value)
}

#[allow(clippy::too_many_arguments)]
fn likelihood_epochs(
    params: &mut TransformerParams<f32>,
    encoded: &[EncodedExample],
    teacher_logits: Option<&[Vec<f32>]>,
    epochs: usize,
    regime: &TrainingRegime,
    stream: &str,
    curve: &mut Vec<f32>,
) -> Result<()> {
    if epochs == 0 {
        return Ok(());
    }
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamState::new(&lens, regime.optimizer);
    let base = derive_seed(regime.seed, stream);
    for epoch in 0..epochs {
        let batches = make_batches_encoded(encoded, regime.batch_size, derive_seed(base, &epoch.to_string()))?;
        let mut total = 0.0;
        for b in &batches {
            let l = likelihood_step(params, b, teacher_logits, regime, &mut opt)?;
            total += l as f64;
            curve.push(l);
        }
        log::debug!("{stream} epoch {}/{epochs}: mean loss {:.4}", epoch + 1, total / batches.len() as f64);
    }
    Ok(())
}

/// Trains a fresh student of shape `student` on `corpus` under `regime`.
///
/// SFT ignores `teacher`; every other regime requires one with the same
/// vocabulary. RKLD also needs a `pretrain` corpus. The result depends
/// only on the inputs and `regime.seed`.
pub fn train(
    student: &ModelConfig,
    teacher: Option<&TrainedModel>,
    corpus: &Corpus,
    regime: &TrainingRegime,
    pretrain: Option<&Corpus>,
) -> Result<TrainedModel> {
    train_cached(student, teacher, corpus, regime, pretrain, &mut TeacherCache::new())
}

/// [`train`] with teacher-derived artifacts shared through `cache`.
pub fn train_cached(
    student: &ModelConfig,
    teacher: Option<&TrainedModel>,
    corpus: &Corpus,
    regime: &TrainingRegime,
    pretrain: Option<&Corpus>,
    cache: &mut TeacherCache,
) -> Result<TrainedModel> {
    student.validate()?;
    regime.validate()?;
    let teacher = match (regime.kind.needs_teacher(), teacher) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(format!("{:?} training requires a teacher", regime.kind)));
        }
        (true, Some(t)) => {
            if t.config.vocab_size != student.vocab_size {
                return Err(Error::Config(format!(
                    "student vocabulary {} differs from teacher vocabulary {}",
                    student.vocab_size, t.config.vocab_size
                )));
            }
            Some(&t.params)
        }
    };
    if regime.kind == RegimeKind::Rkld && pretrain.is_none() {
        return Err(Error::Config("RKLD training requires a pretrain corpus".into()));
    }
    if corpus.is_empty() && regime.epochs > 0 {
        return Err(Error::Contract("cannot train on an empty corpus".into()));
    }

    let mut params = init_params(*student, derive_seed(regime.seed, "init"))?;
    let mut curve = Vec::new();
    match regime.kind {
        RegimeKind::Sft => {
            let enc = encode_all(corpus, student)?;
            likelihood_epochs(&mut params, &enc, None, regime.epochs, regime, "sft", &mut curve)?;
        }
        RegimeKind::WordKd => {
            let teacher = teacher.expect("checked above");
            let enc = encode_all(corpus, student)?;
            let logits = if regime.epochs > 0 {
                Some(cache.teacher_logits(teacher, corpus, &enc)?)
            } else {
                None
            };
            likelihood_epochs(&mut params, &enc, logits.as_deref().map(|v| v.as_slice()), regime.epochs, regime, "word-kd", &mut curve)?;
        }
        RegimeKind::SeqKd => {
            let teacher = teacher.expect("checked above");
            if regime.epochs > 0 {
                let max_new = regime.max_new_tokens;
                let rewritten = cache.seqkd_corpus(teacher, corpus, regime.seqkd_beam_width, max_new)?;
                let enc = encode_all(&rewritten.corpus, student)?;
                likelihood_epochs(&mut params, &enc, None, regime.epochs, regime, "seq-kd", &mut curve)?;
            }
        }
        RegimeKind::Rkld => {
            let teacher = teacher.expect("checked above");
            let pretrain = pretrain.expect("checked above");
            let enc = encode_all(corpus, student)?;
            let pre = encode_all(pretrain, student)?;
            if pre.is_empty() {
                return Err(Error::Config("pretrain corpus is empty".into()));
            }
            likelihood_epochs(&mut params, &enc, None, regime.rkld.warm_start_epochs, regime, "rkld-warm-start", &mut curve)?;
            rkld_epochs(&mut params, teacher, &enc, &pre, regime, &mut curve)?;
        }
    }
    Ok(TrainedModel {
        params,
        config: *student,
        regime: regime.clone(),
        loss_curve: curve,
    })
}

fn rkld_epochs(
    params: &mut TransformerParams<f32>,
    teacher: &TransformerParams<f32>,
    enc: &[EncodedExample],
    pre: &[EncodedExample],
    regime: &TrainingRegime,
    curve: &mut Vec<f32>,
) -> Result<()> {
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamState::new(&lens, regime.optimizer);
    let mut rollout_rng = rng_from_seed(derive_seed(regime.seed, "rollouts"));
    let mut order_rng = rng_from_seed(derive_seed(regime.seed, "prompt-order"));
    let pre_seed = derive_seed(regime.seed, "pretrain");
    let mut pre_cycle = 0u64;
    let mut pre_batches: Vec<Batch> = Vec::new();
    for epoch in 0..regime.epochs {
        let mut order: Vec<usize> = (0..enc.len()).collect();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(regime.batch_size) {
            if pre_batches.is_empty() {
                pre_batches = make_batches_encoded(pre, regime.batch_size, derive_seed(pre_seed, &pre_cycle.to_string()))?;
                pre_batches.reverse();
                pre_cycle += 1;
            }
            let pb = pre_batches.pop().expect("refilled above");
            let prompts: Vec<&EncodedExample> = chunk.iter().map(|&i| &enc[i]).collect();
            let d = rkld_step(params, teacher, &prompts, Some(&pb), regime, &mut opt, &mut rollout_rng)?;
            curve.push(d.reverse_kl as f32);
            total += d.reverse_kl;
            steps += 1;
        }
        log::debug!("rkld epoch {}/{}: mean reverse KL {:.4}", epoch + 1, regime.epochs, total / steps as f64);
    }
    Ok(())
}
