//! Training pipeline: sequence packing with EOS separators, mixed
//! biography/QA batching, AdamW with linear warmup and cosine decay, and the
//! three regimes (pretrain, mixed training, LoRA finetuning).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Scalar;
use crate::model::{
    backward, forward_full, lm_loss, lora_grads_from_dense, merge_lora, LoraAdapter, LoraConfig,
    ModelConfig, ParameterSet, TensorCollection,
};
use crate::rng::{stream, Domain};
use crate::tasks::QaExample;
use crate::tokenizer::{Vocab, EOS};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pretrain,
    Mixed,
    LoraFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr0: f64,
    pub warmup_steps: u64,
    /// Cosine floor reached exactly at total_steps.
    pub final_lr: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Probability that an emitted training sequence comes from the QA side
    /// (mixed regime only; pretrain forces 0, finetune forces 1).
    pub qa_ratio: f64,
    /// Adapter spec; required for (and only for) lora_finetune.
    pub lora: Option<LoraConfig>,
    /// Records whether QA items were packed with the loss restricted to the
    /// target text after the hint-mode marker. The mask itself is baked in
    /// by [`PackItem::from_example`]; this field documents that choice in
    /// saved configs rather than re-deriving it.
    pub answer_only_loss: bool,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Biography pretraining defaults: lr 0.001 with 1000-step linear warmup,
    /// cosine to 0.0001 over 80k steps, weight decay 0.1, batch 96.
    pub fn pretrain() -> Self {
        TrainConfig {
            regime: Regime::Pretrain,
            lr0: 0.001,
            warmup_steps: 1000,
            final_lr: 0.0001,
            weight_decay: 0.1,
            adam_eps: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 96,
            total_steps: 80_000,
            qa_ratio: 0.0,
            lora: None,
            answer_only_loss: false,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    /// Mixed biography+QA training: pretraining defaults plus a QA ratio.
    pub fn mixed(qa_ratio: f64) -> Self {
        TrainConfig { regime: Regime::Mixed, qa_ratio, ..TrainConfig::pretrain() }
    }

    /// LoRA finetuning defaults: no warmup, cosine to 10% of lr0, weight
    /// decay 0.01, batch 48, 50k steps.
    pub fn lora_finetune(lr0: f64, lora: LoraConfig) -> Self {
        TrainConfig {
            regime: Regime::LoraFinetune,
            lr0,
            warmup_steps: 0,
            final_lr: 0.1 * lr0,
            weight_decay: 0.01,
            adam_eps: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 48,
            total_steps: 50_000,
            qa_ratio: 1.0,
            lora: Some(lora),
            answer_only_loss: false,
            grad_clip: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.final_lr.is_finite() && self.final_lr >= 0.0 && self.final_lr <= self.lr0) {
            return Err(Error::Config(format!(
                "final_lr {} must lie in [0, lr0]",
                self.final_lr
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup {} must be shorter than total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::Config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.qa_ratio) {
            return Err(Error::Config(format!("qa_ratio {} outside [0, 1]", self.qa_ratio)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        match self.regime {
            Regime::LoraFinetune => {
                let lora = self
                    .lora
                    .ok_or_else(|| Error::Config("lora_finetune requires a lora spec".into()))?;
                lora.validate()?;
            }
            _ => {
                if self.lora.is_some() {
                    return Err(Error::Config(format!(
                        "regime {:?} does not take a lora spec",
                        self.regime
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at an optimizer step: linear ramp 0 -> lr0 over the warmup,
/// then cosine decay from lr0 to final_lr, reached exactly at total_steps.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    if config.warmup_steps > 0 && step < config.warmup_steps {
        return config.lr0 * step as f64 / config.warmup_steps as f64;
    }
    let span = (config.total_steps - config.warmup_steps) as f64;
    let progress = (step - config.warmup_steps) as f64 / span;
    if progress <= 0.0 {
        return config.lr0;
    }
    if progress >= 1.0 {
        return config.final_lr;
    }
    let cos = (std::f64::consts::PI * progress).cos();
    config.final_lr + (config.lr0 - config.final_lr) * 0.5 * (1.0 + cos)
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// First/second moment accumulators per tensor, plus the step counter.
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl OptimizerState {
    pub fn new<F: Scalar>(template: &dyn TensorCollection<F>) -> Self {
        let mut sizes = Vec::new();
        template.visit_tensors(&mut |_, t| sizes.push(t.len()));
        OptimizerState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step:
/// p <- p * (1 - lr * wd); moments update with (beta1, beta2); bias-corrected
/// update p <- p - lr * m_hat / (sqrt(v_hat) + eps). Moments are held in f64
/// regardless of the parameter dtype. Errors on any non-finite gradient,
/// naming the offending tensor and step.
pub fn adamw_step<F: Scalar>(
    state: &mut OptimizerState,
    params: &mut dyn TensorCollection<F>,
    grads: &dyn TensorCollection<F>,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    // Snapshot gradients (the visitor API cannot hand out two live borrows).
    let mut gs: Vec<Vec<f64>> = Vec::with_capacity(state.m.len());
    let mut bad: Option<String> = None;
    grads.visit_tensors(&mut |name, t| {
        if bad.is_none() && t.iter().any(|v| !v.to_f64_lossy().is_finite()) {
            bad = Some(name.to_string());
        }
        gs.push(t.iter().map(|v| v.to_f64_lossy()).collect());
    });
    if let Some(name) = bad {
        return Err(Error::Train(format!(
            "non-finite gradient in tensor {name} at optimizer step {}",
            state.step
        )));
    }
    if gs.len() != state.m.len() {
        return Err(Error::Train(format!(
            "gradient tensor count {} does not match optimizer state {}",
            gs.len(),
            state.m.len()
        )));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let decay = 1.0 - lr * config.weight_decay;
    let mut ti = 0usize;
    let mut err: Option<String> = None;
    params.visit_tensors_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let (g, m, v) = (&gs[ti], &mut state.m[ti], &mut state.v[ti]);
        if g.len() != p.len() {
            err = Some(format!("tensor {name}: gradient length {} vs {}", g.len(), p.len()));
            ti += 1;
            return;
        }
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let p64 = p[i].to_f64_lossy() * decay - lr * m_hat / (v_hat.sqrt() + config.adam_eps);
            p[i] = F::from_f64_lossy(p64);
        }
        ti += 1;
    });
    if let Some(e) = err {
        return Err(Error::Train(e));
    }
    state.step = t;
    Ok(())
}

/// Global L2 norm over every tensor in the collection.
pub fn global_grad_norm<F: Scalar>(grads: &dyn TensorCollection<F>) -> f64 {
    let mut sq = 0.0f64;
    grads.visit_tensors(&mut |_, t| {
        for v in t {
            let x = v.to_f64_lossy();
            sq += x * x;
        }
    });
    sq.sqrt()
}

/// Scale gradients so the global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_gradients<F: Scalar>(grads: &mut dyn TensorCollection<F>, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64_lossy(max_norm / norm);
        grads.visit_tensors_mut(&mut |_, t| {
            for v in t {
                *v *= scale;
            }
        });
    }
    norm
}

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Bio,
    Qa,
}

/// One encodable item (a biography entry or a QA text) with a per-token
/// loss-target mask (`mask[i]` = may token i be predicted as a target).
#[derive(Clone, Debug)]
pub struct PackItem {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
}

impl PackItem {
    /// Whole-text item: every token is a loss target.
    pub fn from_text(text: &str, vocab: &Vocab) -> Result<PackItem> {
        let tokens = vocab.encode(text)?;
        let mask = vec![true; tokens.len()];
        Ok(PackItem { tokens, mask })
    }

    /// QA item: question tokens, the hint-mode marker, then the target text.
    /// With `answer_only` the loss covers only the target (and the trailing
    /// EOS separator); otherwise all tokens are targets.
    pub fn from_example(ex: &QaExample, vocab: &Vocab, answer_only: bool) -> Result<PackItem> {
        let question = vocab.encode(&ex.question)?;
        let target = vocab.encode(&ex.target_text())?;
        let mut tokens = Vec::with_capacity(question.len() + 1 + target.len());
        let mut mask = Vec::with_capacity(tokens.capacity());
        let q_visible = !answer_only;
        for t in question {
            tokens.push(t);
            mask.push(q_visible);
        }
        tokens.push(ex.hint_mode_marker.token_id());
        mask.push(q_visible);
        for t in target {
            tokens.push(t);
            mask.push(true);
        }
        Ok(PackItem { tokens, mask })
    }
}

/// A fixed-window training sequence: items concatenated with an EOS after
/// each, never mixing sources. `mask[i]` says whether token i counts as a
/// prediction target (the EOS separators always do).
#[derive(Clone, Debug)]
pub struct PackedSequence {
    pub tokens: Vec<u32>,
    pub mask: Vec<bool>,
    pub kind: SourceKind,
}

/// Greedy packing: append item + EOS while it fits the window, else start a
/// new sequence. Errors if a single item (plus its separator) exceeds the
/// window.
/// Shuffle items into stream order before packing. Documents arrive grouped
/// by person (and QA examples grouped by task); packed as-is, a context
/// window would hold one person's entries back to back, so the attribute
/// sentences at the end of one entry immediately precede the name that opens
/// the next — text that effectively states the attributes before the name
/// and trains an attribute-to-name lookup the corpus ordering is supposed to
/// rule out. A seeded shuffle makes window neighbours unrelated persons.
/// `lane` separates independent shuffles under one experiment seed.
pub fn shuffle_items(items: &mut [PackItem], seed: u64, lane: u64) {
    let mut rng = stream(seed, Domain::Pack, &[lane]);
    items.shuffle(&mut rng);
}

pub fn pack_items(
    items: &[PackItem],
    kind: SourceKind,
    window: usize,
) -> Result<Vec<PackedSequence>> {
    if window < 2 {
        return Err(Error::Config(format!("window {window} too small to pack")));
    }
    let mut sequences = Vec::new();
    let mut cur = PackedSequence { tokens: Vec::new(), mask: Vec::new(), kind };
    for (i, item) in items.iter().enumerate() {
        let need = item.tokens.len() + 1;
        if need > window {
            return Err(Error::Train(format!(
                "item {i} needs {need} tokens (with separator), window is {window}"
            )));
        }
        debug_assert_eq!(item.tokens.len(), item.mask.len());
        if cur.tokens.len() + need > window {
            sequences.push(std::mem::replace(
                &mut cur,
                PackedSequence { tokens: Vec::new(), mask: Vec::new(), kind },
            ));
        }
        cur.tokens.extend_from_slice(&item.tokens);
        cur.mask.extend_from_slice(&item.mask);
        cur.tokens.push(EOS);
        cur.mask.push(true);
    }
    if !cur.tokens.is_empty() {
        sequences.push(cur);
    }
    Ok(sequences)
}

/// Convenience: encode whole-text lines and pack them.
pub fn pack_sequences<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    vocab: &Vocab,
    kind: SourceKind,
    window: usize,
) -> Result<Vec<PackedSequence>> {
    let items: Vec<PackItem> = lines
        .into_iter()
        .map(|l| PackItem::from_text(l, vocab))
        .collect::<Result<_>>()?;
    pack_items(&items, kind, window)
}

// ---------------------------------------------------------------------------
// Mixed-source sequence stream
// ---------------------------------------------------------------------------

/// Emits packed sequences: QA with probability `qa_ratio`, else biography.
/// Each side cycles through its sequences with a reshuffle per epoch.
pub struct MixedSource {
    bio: Vec<PackedSequence>,
    qa: Vec<PackedSequence>,
    qa_ratio: f64,
    rng: rand_chacha::ChaCha8Rng,
    bio_order: Vec<usize>,
    bio_pos: usize,
    qa_order: Vec<usize>,
    qa_pos: usize,
}

impl MixedSource {
    pub fn new(
        bio: Vec<PackedSequence>,
        qa: Vec<PackedSequence>,
        qa_ratio: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&qa_ratio) {
            return Err(Error::Config(format!("qa_ratio {qa_ratio} outside [0, 1]")));
        }
        if qa_ratio > 0.0 && qa.is_empty() {
            return Err(Error::Config("qa_ratio > 0 but no QA sequences supplied".into()));
        }
        if qa_ratio < 1.0 && bio.is_empty() {
            return Err(Error::Config(
                "qa_ratio < 1 but no biography sequences supplied".into(),
            ));
        }
        debug_assert!(bio.iter().all(|s| s.kind == SourceKind::Bio));
        debug_assert!(qa.iter().all(|s| s.kind == SourceKind::Qa));
        let mut src = MixedSource {
            bio_order: (0..bio.len()).collect(),
            qa_order: (0..qa.len()).collect(),
            bio,
            qa,
            qa_ratio,
            rng: stream(seed, Domain::Batch, &[]),
            bio_pos: 0,
            qa_pos: 0,
        };
        src.bio_order.shuffle(&mut src.rng);
        src.qa_order.shuffle(&mut src.rng);
        Ok(src)
    }

    /// Draw the next training sequence.
    pub fn next_sequence(&mut self) -> PackedSequence {
        let from_qa = if self.qa_ratio >= 1.0 {
            true
        } else if self.qa_ratio <= 0.0 {
            false
        } else {
            self.rng.gen_bool(self.qa_ratio)
        };
        if from_qa {
            if self.qa_pos >= self.qa_order.len() {
                self.qa_order.shuffle(&mut self.rng);
                self.qa_pos = 0;
            }
            let seq = self.qa[self.qa_order[self.qa_pos]].clone();
            self.qa_pos += 1;
            seq
        } else {
            if self.bio_pos >= self.bio_order.len() {
                self.bio_order.shuffle(&mut self.rng);
                self.bio_pos = 0;
            }
            let seq = self.bio[self.bio_order[self.bio_pos]].clone();
            self.bio_pos += 1;
            seq
        }
    }

    pub fn longest_sequence(&self) -> usize {
        self.bio
            .iter()
            .chain(&self.qa)
            .map(|s| s.tokens.len())
            .max()
            .unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// A frozen base model for LoRA finetuning, with the vocabulary hash it was
/// trained under.
pub struct BaseModel {
    pub params: ParameterSet<f32>,
    pub vocab_hash: String,
}

/// Single-writer training loop. Construct with the regime's inputs, then call
/// [`Trainer::step_once`] (or [`Trainer::run_to_end`]); the loss curve
/// accumulates internally. Deterministic for a fixed seed: batch order,
/// initialization, and numerics all derive from the config seed.
pub struct Trainer {
    config: TrainConfig,
    params: ParameterSet<f32>,
    adapter: Option<LoraAdapter<f32>>,
    /// Materialized base+adapter weights (finetune only).
    merged: Option<ParameterSet<f32>>,
    base_hash: Option<String>,
    opt: OptimizerState,
    source: MixedSource,
    grads: ParameterSet<f32>,
    lora_grads: Option<LoraAdapter<f32>>,
    curve: Vec<CurvePoint>,
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        vocab_hash: &str,
        base: Option<BaseModel>,
        bio: Vec<PackedSequence>,
        qa: Vec<PackedSequence>,
        config: TrainConfig,
    ) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        let (params, adapter, merged, base_hash, qa_ratio) = match config.regime {
            Regime::Pretrain => {
                if base.is_some() {
                    return Err(Error::Config("pretrain does not take a base model".into()));
                }
                if !qa.is_empty() {
                    return Err(Error::Config("pretrain consumes biography data only".into()));
                }
                let params = crate::model::init_params::<f32>(model_config, config.seed)?;
                (params, None, None, None, 0.0)
            }
            Regime::Mixed => {
                if base.is_some() {
                    return Err(Error::Config("mixed training starts from scratch".into()));
                }
                let params = crate::model::init_params::<f32>(model_config, config.seed)?;
                (params, None, None, None, config.qa_ratio)
            }
            Regime::LoraFinetune => {
                let base = base.ok_or_else(|| {
                    Error::Config("lora_finetune requires a base checkpoint".into())
                })?;
                if base.vocab_hash != vocab_hash {
                    return Err(Error::Checkpoint(format!(
                        "vocab hash mismatch: base model was trained with {}, data uses {}",
                        base.vocab_hash, vocab_hash
                    )));
                }
                if base.params.config != model_config {
                    return Err(Error::Config(
                        "base checkpoint config does not match model config".into(),
                    ));
                }
                if !bio.is_empty() {
                    return Err(Error::Config(
                        "lora_finetune consumes QA sequences only".into(),
                    ));
                }
                let lora = config.lora.expect("validated above");
                let adapter = crate::model::init_lora::<f32>(model_config, lora, config.seed)?;
                let merged = merge_lora(&base.params, &adapter)?;
                let hash = base.params.content_hash();
                (base.params, Some(adapter), Some(merged), Some(hash), 1.0)
            }
        };
        let source = MixedSource::new(bio, qa, qa_ratio, config.seed)?;
        if source.longest_sequence() == 0 {
            return Err(Error::Config("no training sequences supplied".into()));
        }
        if source.longest_sequence() > model_config.context_window {
            return Err(Error::Config(format!(
                "packed sequence of {} tokens exceeds context window {}",
                source.longest_sequence(),
                model_config.context_window
            )));
        }
        let opt = match &adapter {
            Some(a) => OptimizerState::new::<f32>(a),
            None => OptimizerState::new::<f32>(&params),
        };
        let lora_grads = adapter
            .as_ref()
            .map(|a| LoraAdapter::<f32>::zeros(model_config, a.config));
        Ok(Trainer {
            grads: ParameterSet::zeros(model_config),
            config,
            params,
            adapter,
            merged,
            base_hash,
            opt,
            source,
            lora_grads,
            curve: Vec::new(),
        })
    }

    /// Completed optimizer steps.
    pub fn steps_done(&self) -> u64 {
        self.opt.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Current full weights: merged base+adapter for finetuning, otherwise
    /// the trained parameters themselves.
    pub fn effective_params(&self) -> &ParameterSet<f32> {
        self.merged.as_ref().unwrap_or(&self.params)
    }

    /// The trained base parameters (frozen under finetuning).
    pub fn params(&self) -> &ParameterSet<f32> {
        &self.params
    }

    pub fn adapter(&self) -> Option<&LoraAdapter<f32>> {
        self.adapter.as_ref()
    }

    pub fn curve(&self) -> &[CurvePoint] {
        &self.curve
    }

    /// Run one optimizer step over a fresh batch; returns the recorded point.
    pub fn step_once(&mut self) -> Result<CurvePoint> {
        if self.opt.step >= self.config.total_steps {
            return Err(Error::Train(format!(
                "training already completed {} steps",
                self.config.total_steps
            )));
        }
        let batch: Vec<PackedSequence> =
            (0..self.config.batch_size).map(|_| self.source.next_sequence()).collect();
        let total_targets: usize = batch
            .iter()
            .map(|s| s.mask[1..].iter().filter(|&&m| m).count())
            .sum();
        if total_targets == 0 {
            return Err(Error::Train("batch contains no loss targets".into()));
        }

        let forward_params: &ParameterSet<f32> =
            self.merged.as_ref().unwrap_or(&self.params);
        self.grads.fill_zero();
        let mut batch_loss = 0.0f64;
        for seq in &batch {
            let inputs = &seq.tokens[..seq.tokens.len() - 1];
            let targets = &seq.tokens[1..];
            let mask = &seq.mask[1..];
            if mask.iter().all(|&m| !m) {
                continue;
            }
            let (logits, cache) = forward_full(forward_params, inputs)?;
            let (loss, mut dlogits, count) = lm_loss(logits.view(), targets, mask)?;
            let weight = count as f64 / total_targets as f64;
            batch_loss += loss * weight;
            let w = weight as f32;
            dlogits.mapv_inplace(|v| v * w);
            backward(forward_params, &cache, dlogits.view(), &mut self.grads);
        }
        if !batch_loss.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss at optimizer step {}",
                self.opt.step
            )));
        }

        let lr = lr_at(self.opt.step, &self.config);
        match (&mut self.adapter, &mut self.lora_grads) {
            (Some(adapter), Some(lg)) => {
                lg.fill_zero();
                lora_grads_from_dense(&self.grads, adapter, lg);
                clip_gradients::<f32>(lg, self.config.grad_clip);
                adamw_step::<f32>(&mut self.opt, adapter, lg, lr, &self.config)?;
                self.merged = Some(merge_lora(&self.params, adapter)?);
            }
            _ => {
                clip_gradients::<f32>(&mut self.grads, self.config.grad_clip);
                adamw_step::<f32>(&mut self.opt, &mut self.params, &self.grads, lr, &self.config)?;
            }
        }
        let point = CurvePoint { step: self.opt.step, lr, loss: batch_loss };
        self.curve.push(point);
        Ok(point)
    }

    /// Run every remaining step.
    pub fn run_to_end(&mut self) -> Result<()> {
        while self.opt.step < self.config.total_steps {
            self.step_once()?;
        }
        // Finetune isolation: the base must never move.
        if let Some(expected) = &self.base_hash {
            let now = self.params.content_hash();
            if &now != expected {
                return Err(Error::Train(
                    "base parameters changed during lora_finetune".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Write a loss curve as CSV with a `step,lr,loss` header.
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.lr, p.loss));
    }
    std::fs::write(path, out)?;
    Ok(())
}
