//! Decoder-only transformer with rotary positional attention, low-rank (LoRA)
//! adapters, a hand-written backward pass, beam-search generation with a KV
//! cache, and a self-describing binary checkpoint container.
//!
//! The whole stack is generic over [`Scalar`]: production code instantiates
//! `f32`, the gradient-check tests instantiate the identical code in `f64`.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    add_bias, bias_grad, cross_entropy, fs, gelu, gelu_backward, layer_norm,
    layer_norm_backward, matmul, softmax_rows, NormCache, Scalar,
};
use crate::rng::{stream, Domain};
use crate::tokenizer::EOS;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn default_rotary_base() -> f64 {
    10_000.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Feed-forward width; conventionally 4 * d_model.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_window: usize,
    #[serde(default = "default_rotary_base")]
    pub rotary_base: f64,
}

impl ModelConfig {
    /// Config with conventional defaults: d_ff = 4 * d_model, 512-token
    /// context window, rotary base 10000.
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size,
            context_window: 512,
            rotary_base: default_rotary_base(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.context_window == 0
        {
            return Err(Error::Config("model dimensions must be nonzero".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        if !self.rotary_base.is_finite() || self.rotary_base <= 1.0 {
            return Err(Error::Config(format!(
                "rotary base {} must be a finite number > 1",
                self.rotary_base
            )));
        }
        Ok(())
    }

    /// Total trainable scalar count (embedding + blocks + final norm + head).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let v = self.vocab_size;
        let per_layer = 2 * d            // ln1
            + 4 * (d * d + d)            // wq/wk/wv/wo with biases
            + 2 * d                      // ln2
            + (d * f + f)                // mlp up
            + (f * d + d); // mlp down
        v * d + self.n_layers * per_layer + 2 * d + d * v
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerParams<F: Scalar> {
    pub ln1_gain: Array1<F>,
    pub ln1_bias: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_gain: Array1<F>,
    pub ln2_bias: Array1<F>,
    pub w_up: Array2<F>,
    pub b_up: Array1<F>,
    pub w_down: Array2<F>,
    pub b_down: Array1<F>,
}

#[derive(Clone, Debug)]
pub struct ParameterSet<F: Scalar> {
    pub config: ModelConfig,
    /// Token embedding, vocab_size x d_model.
    pub embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_gain: Array1<F>,
    pub final_bias: Array1<F>,
    /// Output head, d_model x vocab_size (untied from the embedding).
    pub head: Array2<F>,
}

/// LayerNorm epsilon used across the model.
const LN_EPS: f64 = 1e-5;

impl<F: Scalar> ParameterSet<F> {
    /// All-zero parameter set of the config's shapes (gradient buffers).
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        let v = config.vocab_size;
        let layer = || LayerParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w_up: Array2::zeros((d, f)),
            b_up: Array1::zeros(f),
            w_down: Array2::zeros((f, d)),
            b_down: Array1::zeros(d),
        };
        ParameterSet {
            config,
            embedding: Array2::zeros((v, d)),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            final_gain: Array1::zeros(d),
            final_bias: Array1::zeros(d),
            head: Array2::zeros((d, v)),
        }
    }

    /// Reset every tensor to zero in place (reusable gradient buffer).
    pub fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, t| t.fill(F::zero()));
    }

    /// Visit every tensor as a flat slice, in the canonical checkpoint order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[F])) {
        f("embedding", self.embedding.as_slice().expect("standard layout"));
        for (l, layer) in self.layers.iter().enumerate() {
            let n = |t: &str| format!("layer{l}.{t}");
            f(&n("ln1.gain"), layer.ln1_gain.as_slice().expect("layout"));
            f(&n("ln1.bias"), layer.ln1_bias.as_slice().expect("layout"));
            f(&n("attn.wq"), layer.wq.as_slice().expect("layout"));
            f(&n("attn.bq"), layer.bq.as_slice().expect("layout"));
            f(&n("attn.wk"), layer.wk.as_slice().expect("layout"));
            f(&n("attn.bk"), layer.bk.as_slice().expect("layout"));
            f(&n("attn.wv"), layer.wv.as_slice().expect("layout"));
            f(&n("attn.bv"), layer.bv.as_slice().expect("layout"));
            f(&n("attn.wo"), layer.wo.as_slice().expect("layout"));
            f(&n("attn.bo"), layer.bo.as_slice().expect("layout"));
            f(&n("ln2.gain"), layer.ln2_gain.as_slice().expect("layout"));
            f(&n("ln2.bias"), layer.ln2_bias.as_slice().expect("layout"));
            f(&n("mlp.w_up"), layer.w_up.as_slice().expect("layout"));
            f(&n("mlp.b_up"), layer.b_up.as_slice().expect("layout"));
            f(&n("mlp.w_down"), layer.w_down.as_slice().expect("layout"));
            f(&n("mlp.b_down"), layer.b_down.as_slice().expect("layout"));
        }
        f("final_norm.gain", self.final_gain.as_slice().expect("layout"));
        f("final_norm.bias", self.final_bias.as_slice().expect("layout"));
        f("head", self.head.as_slice().expect("standard layout"));
    }

    /// Mutable tensor visit in the same canonical order as [`visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        f("embedding", self.embedding.as_slice_mut().expect("layout"));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layer{l}");
            f(&format!("{prefix}.ln1.gain"), layer.ln1_gain.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.ln1.bias"), layer.ln1_bias.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.attn.wq"), layer.wq.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.attn.bq"), layer.bq.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.attn.wk"), layer.wk.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.attn.bk"), layer.bk.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.attn.wv"), layer.wv.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.attn.bv"), layer.bv.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.attn.wo"), layer.wo.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.attn.bo"), layer.bo.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.ln2.gain"), layer.ln2_gain.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.ln2.bias"), layer.ln2_bias.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.mlp.w_up"), layer.w_up.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.mlp.b_up"), layer.b_up.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.mlp.w_down"), layer.w_down.as_slice_mut().expect("layout"));
            f(&format!("{prefix}.mlp.b_down"), layer.b_down.as_slice_mut().expect("layout"));
        }
        f("final_norm.gain", self.final_gain.as_slice_mut().expect("layout"));
        f("final_norm.bias", self.final_bias.as_slice_mut().expect("layout"));
        f("head", self.head.as_slice_mut().expect("layout"));
    }

    /// Number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// True if every scalar is finite.
    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.to_f64_lossy().is_finite()));
        ok
    }

    /// SHA-256 over the config JSON plus every tensor's little-endian f32
    /// bytes; equal hashes mean bit-identical parameters.
    pub fn content_hash(&self) -> String {
        let mut bytes =
            serde_json::to_vec(&self.config).expect("config serializes");
        self.visit(&mut |name, t| {
            bytes.extend_from_slice(name.as_bytes());
            for v in t {
                bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        });
        crate::sha256_hex(&bytes)
    }

    /// Convert every tensor to another scalar type (f32 <-> f64).
    pub fn cast<G: Scalar>(&self) -> ParameterSet<G> {
        let mut out = ParameterSet::<G>::zeros(self.config);
        let mut src: Vec<Vec<G>> = Vec::new();
        self.visit(&mut |_, t| {
            src.push(t.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect())
        });
        let mut i = 0;
        out.visit_mut(&mut |_, t| {
            t.copy_from_slice(&src[i]);
            i += 1;
        });
        out
    }
}

/// Uniform view over named parameter tensors: implemented by full parameter
/// sets, LoRA adapters, and plain vectors (for optimizer unit tests), so the
/// optimizer and checkpoint plumbing treat them identically.
pub trait TensorCollection<F: Scalar> {
    fn visit_tensors(&self, f: &mut dyn FnMut(&str, &[F]));
    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F]));
}

impl<F: Scalar> TensorCollection<F> for ParameterSet<F> {
    fn visit_tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        self.visit(f)
    }
    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        self.visit_mut(f)
    }
}

impl<F: Scalar> TensorCollection<F> for LoraAdapter<F> {
    fn visit_tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        self.visit(f)
    }
    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        self.visit_mut(f)
    }
}

impl<F: Scalar> TensorCollection<F> for Vec<Vec<F>> {
    fn visit_tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        for (i, t) in self.iter().enumerate() {
            f(&format!("t{i}"), t);
        }
    }
    fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&format!("t{i}"), t);
        }
    }
}

/// Draw a standard normal via Box-Muller (keeps `rand` usage to the uniform
/// source so the init scheme is fully spelled out here).
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn fill_normal<F: Scalar>(a: &mut Array2<F>, std: f64, rng: &mut ChaCha8Rng) {
    for v in a.iter_mut() {
        *v = fs::<F>(standard_normal(rng) * std);
    }
}

/// Deterministic initialization.
///
/// Scheme: embeddings, projections, and the head draw from N(0, 0.02^2);
/// the residual-output projections (attention output, MLP down) are further
/// scaled by 1/sqrt(2 * n_layers) so residual variance stays bounded with
/// depth; biases start at zero; norm gains at one.
pub fn init_params<F: Scalar>(config: ModelConfig, seed: u64) -> Result<ParameterSet<F>> {
    config.validate()?;
    let mut rng = stream(seed, Domain::Init, &[]);
    let base_std = 0.02;
    let resid_std = base_std / (2.0 * config.n_layers as f64).sqrt();
    let mut p = ParameterSet::<F>::zeros(config);
    fill_normal(&mut p.embedding, base_std, &mut rng);
    for layer in &mut p.layers {
        layer.ln1_gain.fill(F::one());
        fill_normal(&mut layer.wq, base_std, &mut rng);
        fill_normal(&mut layer.wk, base_std, &mut rng);
        fill_normal(&mut layer.wv, base_std, &mut rng);
        fill_normal(&mut layer.wo, resid_std, &mut rng);
        layer.ln2_gain.fill(F::one());
        fill_normal(&mut layer.w_up, base_std, &mut rng);
        fill_normal(&mut layer.w_down, resid_std, &mut rng);
    }
    p.final_gain.fill(F::one());
    fill_normal(&mut p.head, base_std, &mut rng);
    Ok(p)
}

// ---------------------------------------------------------------------------
// LoRA adapters
// ---------------------------------------------------------------------------

fn default_alpha() -> f64 {
    4.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    /// Rank of the query/value updates in every layer (0 disables them).
    pub attn_rank: usize,
    /// Rank of the token-embedding update (0 disables it).
    pub embed_rank: usize,
    /// Scale applied to every A x B product.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attn_rank == 0 && self.embed_rank == 0 {
            return Err(Error::Config("adapter must target at least one tensor".into()));
        }
        if !self.alpha.is_finite() || self.alpha == 0.0 {
            return Err(Error::Config(format!("alpha {} must be finite and nonzero", self.alpha)));
        }
        Ok(())
    }
}

/// One low-rank update: delta = alpha * a x b, where `a` starts at zero so a
/// fresh adapter is an exact no-op, and `b` starts Gaussian.
#[derive(Clone, Debug)]
pub struct LoraFactor<F: Scalar> {
    /// Left factor, rows x rank; zero at init.
    pub a: Array2<F>,
    /// Right factor, rank x cols; Gaussian at init.
    pub b: Array2<F>,
}

impl<F: Scalar> LoraFactor<F> {
    fn delta(&self, alpha: F) -> Array2<F> {
        let mut d = matmul(self.a.view(), self.b.view());
        d.mapv_inplace(|v| v * alpha);
        d
    }
}

#[derive(Clone, Debug)]
pub struct LoraLayer<F: Scalar> {
    pub q: LoraFactor<F>,
    pub v: LoraFactor<F>,
}

#[derive(Clone, Debug)]
pub struct LoraAdapter<F: Scalar> {
    pub config: LoraConfig,
    pub model_config: ModelConfig,
    /// Embedding update (vocab_size x r) x (r x d_model), when enabled.
    pub embed: Option<LoraFactor<F>>,
    /// Per-layer query/value updates, when attn_rank > 0.
    pub layers: Vec<LoraLayer<F>>,
}

impl<F: Scalar> LoraAdapter<F> {
    pub fn zeros(model_config: ModelConfig, config: LoraConfig) -> Self {
        let d = model_config.d_model;
        let v = model_config.vocab_size;
        let factor = |rows: usize, rank: usize, cols: usize| LoraFactor {
            a: Array2::zeros((rows, rank)),
            b: Array2::zeros((rank, cols)),
        };
        LoraAdapter {
            config,
            model_config,
            embed: (config.embed_rank > 0).then(|| factor(v, config.embed_rank, d)),
            layers: if config.attn_rank > 0 {
                (0..model_config.n_layers)
                    .map(|_| LoraLayer {
                        q: factor(d, config.attn_rank, d),
                        v: factor(d, config.attn_rank, d),
                    })
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    pub fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, t| t.fill(F::zero()));
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &[F])) {
        if let Some(e) = &self.embed {
            f("lora.embedding.a", e.a.as_slice().expect("layout"));
            f("lora.embedding.b", e.b.as_slice().expect("layout"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            f(&format!("lora.layer{l}.q.a"), layer.q.a.as_slice().expect("layout"));
            f(&format!("lora.layer{l}.q.b"), layer.q.b.as_slice().expect("layout"));
            f(&format!("lora.layer{l}.v.a"), layer.v.a.as_slice().expect("layout"));
            f(&format!("lora.layer{l}.v.b"), layer.v.b.as_slice().expect("layout"));
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        if let Some(e) = &mut self.embed {
            f("lora.embedding.a", e.a.as_slice_mut().expect("layout"));
            f("lora.embedding.b", e.b.as_slice_mut().expect("layout"));
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("lora.layer{l}.q.a"), layer.q.a.as_slice_mut().expect("layout"));
            f(&format!("lora.layer{l}.q.b"), layer.q.b.as_slice_mut().expect("layout"));
            f(&format!("lora.layer{l}.v.a"), layer.v.a.as_slice_mut().expect("layout"));
            f(&format!("lora.layer{l}.v.b"), layer.v.b.as_slice_mut().expect("layout"));
        }
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.to_f64_lossy().is_finite()));
        ok
    }

    pub fn content_hash(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.config).expect("config serializes");
        self.visit(&mut |name, t| {
            bytes.extend_from_slice(name.as_bytes());
            for v in t {
                bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        });
        crate::sha256_hex(&bytes)
    }

    pub fn cast<G: Scalar>(&self) -> LoraAdapter<G> {
        let mut out = LoraAdapter::<G>::zeros(self.model_config, self.config);
        let mut src: Vec<Vec<G>> = Vec::new();
        self.visit(&mut |_, t| {
            src.push(t.iter().map(|v| G::from_f64_lossy(v.to_f64_lossy())).collect())
        });
        let mut i = 0;
        out.visit_mut(&mut |_, t| {
            t.copy_from_slice(&src[i]);
            i += 1;
        });
        out
    }
}

/// Deterministic adapter init: the left factors start at zero (so the delta
/// is exactly zero), the right factors draw from N(0, 0.02^2).
pub fn init_lora<F: Scalar>(
    model_config: ModelConfig,
    config: LoraConfig,
    seed: u64,
) -> Result<LoraAdapter<F>> {
    model_config.validate()?;
    config.validate()?;
    let mut rng = stream(seed, Domain::Init, &[1]);
    let mut adapter = LoraAdapter::<F>::zeros(model_config, config);
    if let Some(e) = &mut adapter.embed {
        fill_normal(&mut e.b, 0.02, &mut rng);
    }
    for layer in &mut adapter.layers {
        fill_normal(&mut layer.q.b, 0.02, &mut rng);
        fill_normal(&mut layer.v.b, 0.02, &mut rng);
    }
    Ok(adapter)
}

fn check_adapter_shapes<F: Scalar>(
    params: &ParameterSet<F>,
    adapter: &LoraAdapter<F>,
) -> Result<()> {
    if adapter.model_config != params.config {
        return Err(Error::Config(
            "adapter model config does not match parameter set".into(),
        ));
    }
    if !adapter.layers.is_empty() && adapter.layers.len() != params.layers.len() {
        return Err(Error::Config(format!(
            "adapter has {} layers, model has {}",
            adapter.layers.len(),
            params.layers.len()
        )));
    }
    Ok(())
}

/// Fold the adapter into a fresh parameter set: W' = W + alpha * A x B for
/// every targeted tensor. Deliberately additive, so merging twice doubles the
/// delta (not idempotent).
pub fn merge_lora<F: Scalar>(
    params: &ParameterSet<F>,
    adapter: &LoraAdapter<F>,
) -> Result<ParameterSet<F>> {
    check_adapter_shapes(params, adapter)?;
    let alpha = fs::<F>(adapter.config.alpha);
    let mut merged = params.clone();
    if let Some(e) = &adapter.embed {
        merged.embedding = &merged.embedding + &e.delta(alpha);
    }
    for (layer, lora) in merged.layers.iter_mut().zip(&adapter.layers) {
        layer.wq = &layer.wq + &lora.q.delta(alpha);
        layer.wv = &layer.wv + &lora.v.delta(alpha);
    }
    Ok(merged)
}

// ---------------------------------------------------------------------------
// Rotary positional embedding
// ---------------------------------------------------------------------------

/// Per-pair inverse frequencies: theta_i = base^(-2i / head_dim).
fn rotary_freqs(config: &ModelConfig) -> Vec<f64> {
    let hd = config.head_dim();
    (0..hd / 2)
        .map(|i| config.rotary_base.powf(-2.0 * i as f64 / hd as f64))
        .collect()
}

/// Rotate each head's (2i, 2i+1) pairs of row t by angle (start_pos + t) *
/// theta_i. `sign` -1 applies the inverse rotation (used by backward).
fn apply_rotary<F: Scalar>(
    x: &mut Array2<F>,
    config: &ModelConfig,
    start_pos: usize,
    sign: f64,
) {
    let hd = config.head_dim();
    let freqs = rotary_freqs(config);
    let (t_len, d) = x.dim();
    debug_assert_eq!(d, config.d_model);
    for t in 0..t_len {
        let pos = (start_pos + t) as f64;
        let mut row = x.row_mut(t);
        for h in 0..config.n_heads {
            let off = h * hd;
            for (i, &freq) in freqs.iter().enumerate() {
                let angle = sign * pos * freq;
                let (sin, cos) = (fs::<F>(angle.sin()), fs::<F>(angle.cos()));
                let a = row[off + 2 * i];
                let b = row[off + 2 * i + 1];
                row[off + 2 * i] = a * cos - b * sin;
                row[off + 2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct LayerCache<F: Scalar> {
    ln1: NormCache<F>,
    ln1_out: Array2<F>,
    q_rot: Array2<F>,
    k_rot: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    attn_concat: Array2<F>,
    ln2: NormCache<F>,
    ln2_out: Array2<F>,
    mlp_pre: Array2<F>,
    mlp_act: Array2<F>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache<F: Scalar> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<F>>,
    final_norm: NormCache<F>,
    hidden: Array2<F>,
}

fn validate_tokens(config: &ModelConfig, tokens: &[u32], budget: usize) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Config("empty token sequence".into()));
    }
    if tokens.len() + budget > config.context_window {
        return Err(Error::Config(format!(
            "sequence length {} + {} exceeds context window {}",
            tokens.len(),
            budget,
            config.context_window
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Config(format!(
            "token id {bad} out of vocab range {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn attention_scale<F: Scalar>(config: &ModelConfig) -> F {
    fs::<F>(1.0 / (config.head_dim() as f64).sqrt())
}

/// Full-sequence forward pass returning per-position logits and the cache
/// needed by [`backward`]. Logits at position t depend only on tokens <= t.
pub fn forward_full<F: Scalar>(
    params: &ParameterSet<F>,
    tokens: &[u32],
) -> Result<(Array2<F>, ForwardCache<F>)> {
    let cfg = &params.config;
    validate_tokens(cfg, tokens, 0)?;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let eps = fs::<F>(LN_EPS);
    let scale = attention_scale::<F>(cfg);

    let mut x = Array2::<F>::zeros((t_len, d));
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).assign(&params.embedding.row(tok as usize));
    }
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let (ln1_out, ln1) = layer_norm(x.view(), &layer.ln1_gain, &layer.ln1_bias, eps);
        let mut q = matmul(ln1_out.view(), layer.wq.view());
        add_bias(&mut q, &layer.bq);
        let mut k = matmul(ln1_out.view(), layer.wk.view());
        add_bias(&mut k, &layer.bk);
        let mut v = matmul(ln1_out.view(), layer.wv.view());
        add_bias(&mut v, &layer.bv);
        apply_rotary(&mut q, cfg, 0, 1.0);
        apply_rotary(&mut k, cfg, 0, 1.0);

        let mut attn_concat = Array2::<F>::zeros((t_len, d));
        let mut probs_all = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = matmul(qh, kh.t());
            scores.mapv_inplace(|s| s * scale);
            for i in 0..t_len {
                for j in (i + 1)..t_len {
                    scores[[i, j]] = F::neg_infinity();
                }
            }
            softmax_rows(&mut scores);
            let out_h = matmul(scores.view(), vh);
            attn_concat.slice_mut(cols).assign(&out_h);
            probs_all.push(scores);
        }
        let mut attn_out = matmul(attn_concat.view(), layer.wo.view());
        add_bias(&mut attn_out, &layer.bo);
        let x_mid = &x + &attn_out;

        let (ln2_out, ln2) = layer_norm(x_mid.view(), &layer.ln2_gain, &layer.ln2_bias, eps);
        let mut mlp_pre = matmul(ln2_out.view(), layer.w_up.view());
        add_bias(&mut mlp_pre, &layer.b_up);
        let mlp_act = gelu(&mlp_pre);
        let mut mlp_out = matmul(mlp_act.view(), layer.w_down.view());
        add_bias(&mut mlp_out, &layer.b_down);
        let x_next = &x_mid + &mlp_out;

        layer_caches.push(LayerCache {
            ln1,
            ln1_out,
            q_rot: q,
            k_rot: k,
            v,
            probs: probs_all,
            attn_concat,
            ln2,
            ln2_out,
            mlp_pre,
            mlp_act,
        });
        x = x_next;
    }

    let (hidden, final_norm) =
        layer_norm(x.view(), &params.final_gain, &params.final_bias, eps);
    let logits = matmul(hidden.view(), params.head.view());
    Ok((
        logits,
        ForwardCache {
            tokens: tokens.to_vec(),
            layers: layer_caches,
            final_norm,
            hidden,
        },
    ))
}

/// Forward pass to logits, optionally through a LoRA adapter (materialized
/// via [`merge_lora`], so adapted and merged paths are the same computation).
pub fn forward<F: Scalar>(
    params: &ParameterSet<F>,
    adapter: Option<&LoraAdapter<F>>,
    tokens: &[u32],
) -> Result<Array2<F>> {
    match adapter {
        None => Ok(forward_full(params, tokens)?.0),
        Some(a) => {
            let merged = merge_lora(params, a)?;
            Ok(forward_full(&merged, tokens)?.0)
        }
    }
}

/// Mean cross-entropy of next-token predictions over masked positions.
/// Returns (loss, dlogits, masked count); errors if the mask is empty.
pub fn lm_loss<F: Scalar>(
    logits: ArrayView2<F>,
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, Array2<F>, usize)> {
    let (loss, dlogits, count) = cross_entropy(logits, targets, loss_mask);
    if count == 0 {
        return Err(Error::Train("loss mask selects no positions".into()));
    }
    Ok((loss, dlogits, count))
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Backpropagate `dlogits` through the cached forward pass, accumulating
/// parameter gradients into `grads` (shapes mirror the parameter set).
pub fn backward<F: Scalar>(
    params: &ParameterSet<F>,
    cache: &ForwardCache<F>,
    dlogits: ArrayView2<F>,
    grads: &mut ParameterSet<F>,
) {
    let cfg = &params.config;
    let t_len = cache.tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = attention_scale::<F>(cfg);

    // Head: logits = hidden @ head.
    grads.head = &grads.head + &matmul(cache.hidden.t(), dlogits);
    let dhidden = matmul(dlogits, params.head.t());

    // Final norm.
    let mut dfinal_gain = Array1::zeros(d);
    let mut dfinal_bias = Array1::zeros(d);
    let mut dx = layer_norm_backward(
        dhidden.view(),
        &params.final_gain,
        &cache.final_norm,
        &mut dfinal_gain,
        &mut dfinal_bias,
    );
    grads.final_gain = &grads.final_gain + &dfinal_gain;
    grads.final_bias = &grads.final_bias + &dfinal_bias;

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let g = &mut grads.layers[li];

        // MLP half: x_next = x_mid + (gelu(ln2_out @ w_up + b_up) @ w_down + b_down).
        let d_mlp_out = dx.clone();
        g.b_down = &g.b_down + &bias_grad(d_mlp_out.view());
        g.w_down = &g.w_down + &matmul(lc.mlp_act.t(), d_mlp_out.view());
        let d_act = matmul(d_mlp_out.view(), layer.w_down.t());
        let d_pre = gelu_backward(&d_act, &lc.mlp_pre);
        g.b_up = &g.b_up + &bias_grad(d_pre.view());
        g.w_up = &g.w_up + &matmul(lc.ln2_out.t(), d_pre.view());
        let d_ln2_out = matmul(d_pre.view(), layer.w_up.t());
        let mut dg2 = Array1::zeros(d);
        let mut db2 = Array1::zeros(d);
        let d_from_ln2 =
            layer_norm_backward(d_ln2_out.view(), &layer.ln2_gain, &lc.ln2, &mut dg2, &mut db2);
        g.ln2_gain = &g.ln2_gain + &dg2;
        g.ln2_bias = &g.ln2_bias + &db2;
        // Residual: d(x_mid) = dx (passthrough) + ln2 path.
        let dx_mid = &dx + &d_from_ln2;

        // Attention half: x_mid = x_in + (attn_concat @ wo + bo).
        let d_attn_out = dx_mid.clone();
        g.bo = &g.bo + &bias_grad(d_attn_out.view());
        g.wo = &g.wo + &matmul(lc.attn_concat.t(), d_attn_out.view());
        let d_concat = matmul(d_attn_out.view(), layer.wo.t());

        let mut dq = Array2::<F>::zeros((t_len, d));
        let mut dk = Array2::<F>::zeros((t_len, d));
        let mut dv = Array2::<F>::zeros((t_len, d));
        for h in 0..cfg.n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let probs = &lc.probs[h];
            let d_out_h = d_concat.slice(cols);
            let vh = lc.v.slice(cols);
            // dV and dProbs.
            dv.slice_mut(cols).assign(&matmul(probs.t(), d_out_h));
            let d_probs = matmul(d_out_h, vh.t());
            // Softmax backward per row: ds = p * (dp - sum(dp * p)).
            let mut d_scores = Array2::<F>::zeros((t_len, t_len));
            for i in 0..t_len {
                let p_row = probs.row(i);
                let dp_row = d_probs.row(i);
                let mut dot = F::zero();
                for j in 0..t_len {
                    dot += p_row[j] * dp_row[j];
                }
                for j in 0..t_len {
                    d_scores[[i, j]] = p_row[j] * (dp_row[j] - dot) * scale;
                }
            }
            let qh = lc.q_rot.slice(cols);
            let kh = lc.k_rot.slice(cols);
            dq.slice_mut(cols).assign(&matmul(d_scores.view(), kh));
            dk.slice_mut(cols).assign(&matmul(d_scores.t(), qh));
        }
        // Rotary backward: rotate gradients by the negative angle.
        apply_rotary(&mut dq, cfg, 0, -1.0);
        apply_rotary(&mut dk, cfg, 0, -1.0);

        g.bq = &g.bq + &bias_grad(dq.view());
        g.wq = &g.wq + &matmul(lc.ln1_out.t(), dq.view());
        g.bk = &g.bk + &bias_grad(dk.view());
        g.wk = &g.wk + &matmul(lc.ln1_out.t(), dk.view());
        g.bv = &g.bv + &bias_grad(dv.view());
        g.wv = &g.wv + &matmul(lc.ln1_out.t(), dv.view());
        let d_ln1_out = matmul(dq.view(), layer.wq.t())
            + matmul(dk.view(), layer.wk.t())
            + matmul(dv.view(), layer.wv.t());

        let mut dg1 = Array1::zeros(d);
        let mut db1 = Array1::zeros(d);
        let d_from_ln1 =
            layer_norm_backward(d_ln1_out.view(), &layer.ln1_gain, &lc.ln1, &mut dg1, &mut db1);
        g.ln1_gain = &g.ln1_gain + &dg1;
        g.ln1_bias = &g.ln1_bias + &db1;
        dx = &dx_mid + &d_from_ln1;
    }

    // Embedding rows scatter-add.
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let mut row = grads.embedding.row_mut(tok as usize);
        let dxt = dx.row(t);
        for j in 0..row.len() {
            row[j] += dxt[j];
        }
    }
}

/// Project a dense gradient for an adapted tensor onto its LoRA factors:
/// dA = alpha * dW x B^T, dB = alpha * A^T x dW.
fn project_factor_grad<F: Scalar>(
    dense: &Array2<F>,
    factor: &LoraFactor<F>,
    alpha: F,
    out: &mut LoraFactor<F>,
) {
    let mut da = matmul(dense.view(), factor.b.t());
    da.mapv_inplace(|v| v * alpha);
    out.a = &out.a + &da;
    let mut db = matmul(factor.a.t(), dense.view());
    db.mapv_inplace(|v| v * alpha);
    out.b = &out.b + &db;
}

/// Convert dense gradients (computed against merged weights) into adapter
/// factor gradients. `dense` must hold gradients for the same shapes as the
/// base parameter set.
pub fn lora_grads_from_dense<F: Scalar>(
    dense: &ParameterSet<F>,
    adapter: &LoraAdapter<F>,
    out: &mut LoraAdapter<F>,
) {
    let alpha = fs::<F>(adapter.config.alpha);
    if let (Some(e), Some(oe)) = (&adapter.embed, &mut out.embed) {
        project_factor_grad(&dense.embedding, e, alpha, oe);
    }
    for (li, (lora, o)) in adapter.layers.iter().zip(out.layers.iter_mut()).enumerate() {
        project_factor_grad(&dense.layers[li].wq, &lora.q, alpha, &mut o.q);
        project_factor_grad(&dense.layers[li].wv, &lora.v, alpha, &mut o.v);
    }
}

// ---------------------------------------------------------------------------
// Incremental decoding (KV cache) and beam search
// ---------------------------------------------------------------------------

struct LayerKv<F: Scalar> {
    k: Array2<F>,
    v: Array2<F>,
}

/// Autoregressive decoding state: rotated keys and values per layer for all
/// positions consumed so far.
pub struct DecodeState<F: Scalar> {
    pos: usize,
    layers: Vec<LayerKv<F>>,
}

impl<F: Scalar> DecodeState<F> {
    pub fn new(config: &ModelConfig) -> Self {
        let cap = config.context_window;
        DecodeState {
            pos: 0,
            layers: (0..config.n_layers)
                .map(|_| LayerKv {
                    k: Array2::zeros((cap, config.d_model)),
                    v: Array2::zeros((cap, config.d_model)),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    fn clone_state(&self) -> Self {
        DecodeState {
            pos: self.pos,
            layers: self
                .layers
                .iter()
                .map(|l| LayerKv { k: l.k.clone(), v: l.v.clone() })
                .collect(),
        }
    }
}

/// Feed one token; returns the next-token logits row. Numerically this walks
/// the same per-row operations as [`forward_full`].
pub fn decode_step<F: Scalar>(
    params: &ParameterSet<F>,
    state: &mut DecodeState<F>,
    token: u32,
) -> Result<Array1<F>> {
    let cfg = &params.config;
    if token as usize >= cfg.vocab_size {
        return Err(Error::Config(format!(
            "token id {token} out of vocab range {}",
            cfg.vocab_size
        )));
    }
    if state.pos >= cfg.context_window {
        return Err(Error::Config(format!(
            "decode position {} exceeds context window {}",
            state.pos, cfg.context_window
        )));
    }
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let eps = fs::<F>(LN_EPS);
    let scale = attention_scale::<F>(cfg);
    let pos = state.pos;

    let mut x = Array2::<F>::zeros((1, d));
    x.row_mut(0).assign(&params.embedding.row(token as usize));

    for (layer, kv) in params.layers.iter().zip(&mut state.layers) {
        let (ln1_out, _) = layer_norm(x.view(), &layer.ln1_gain, &layer.ln1_bias, eps);
        let mut q = matmul(ln1_out.view(), layer.wq.view());
        add_bias(&mut q, &layer.bq);
        let mut k = matmul(ln1_out.view(), layer.wk.view());
        add_bias(&mut k, &layer.bk);
        let mut v = matmul(ln1_out.view(), layer.wv.view());
        add_bias(&mut v, &layer.bv);
        apply_rotary(&mut q, cfg, pos, 1.0);
        apply_rotary(&mut k, cfg, pos, 1.0);
        kv.k.row_mut(pos).assign(&k.row(0));
        kv.v.row_mut(pos).assign(&v.row(0));

        let mut attn_concat = Array2::<F>::zeros((1, d));
        for h in 0..cfg.n_heads {
            let off = h * hd;
            // Scores over all cached positions 0..=pos.
            let mut scores = Array1::<F>::zeros(pos + 1);
            for j in 0..=pos {
                let mut dot = F::zero();
                for c in 0..hd {
                    dot += q[[0, off + c]] * kv.k[[j, off + c]];
                }
                scores[j] = dot * scale;
            }
            let max = scores.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for s_val in scores.iter_mut() {
                *s_val = (*s_val - max).exp();
                sum += *s_val;
            }
            let inv = F::one() / sum;
            for c in 0..hd {
                let mut acc = F::zero();
                for j in 0..=pos {
                    acc += scores[j] * inv * kv.v[[j, off + c]];
                }
                attn_concat[[0, off + c]] = acc;
            }
        }
        let mut attn_out = matmul(attn_concat.view(), layer.wo.view());
        add_bias(&mut attn_out, &layer.bo);
        let x_mid = &x + &attn_out;

        let (ln2_out, _) = layer_norm(x_mid.view(), &layer.ln2_gain, &layer.ln2_bias, eps);
        let mut mlp_pre = matmul(ln2_out.view(), layer.w_up.view());
        add_bias(&mut mlp_pre, &layer.b_up);
        let mlp_act = gelu(&mlp_pre);
        let mut mlp_out = matmul(mlp_act.view(), layer.w_down.view());
        add_bias(&mut mlp_out, &layer.b_down);
        x = &x_mid + &mlp_out;
    }

    let (hidden, _) = layer_norm(x.view(), &params.final_gain, &params.final_bias, eps);
    let logits = matmul(hidden.view(), params.head.view());
    state.pos += 1;
    Ok(logits.row(0).to_owned())
}

/// Log-softmax of a logits row in f64 (scores stay comparable across steps).
fn log_softmax_f64<F: Scalar>(logits: &Array1<F>) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.to_f64_lossy())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let vals: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy() - max).collect();
    for &v in &vals {
        sum += v.exp();
    }
    let log_z = sum.ln();
    vals.into_iter().map(|v| v - log_z).collect()
}

struct Beam<F: Scalar> {
    state: DecodeState<F>,
    generated: Vec<u32>,
    sum_logp: f64,
    finished: bool,
}

impl<F: Scalar> Beam<F> {
    /// Mean log-probability per generated token (length-normalized score).
    fn score(&self) -> f64 {
        if self.generated.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.sum_logp / self.generated.len() as f64
        }
    }
}

/// Deterministic beam search (no sampling). Candidates are ranked by mean
/// log-probability per generated token; a beam finishes when it emits EOS
/// (whose log-probability is counted, but which is not returned in the
/// output). `beam_width = 1` is exactly greedy argmax decoding. Returns the
/// generated tokens and the final normalized score.
pub fn generate_scored<F: Scalar>(
    params: &ParameterSet<F>,
    adapter: Option<&LoraAdapter<F>>,
    prompt: &[u32],
    beam_width: usize,
    max_new_tokens: usize,
) -> Result<(Vec<u32>, f64)> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if max_new_tokens == 0 {
        return Err(Error::Config("max_new_tokens must be at least 1".into()));
    }
    let merged;
    let params = match adapter {
        Some(a) => {
            merged = merge_lora(params, a)?;
            &merged
        }
        None => params,
    };
    validate_tokens(&params.config, prompt, max_new_tokens)?;

    // Prefill the prompt through one state; keep only the last logits.
    let mut state = DecodeState::new(&params.config);
    let mut last_logits = Array1::<F>::zeros(params.config.vocab_size);
    for &tok in prompt {
        last_logits = decode_step(params, &mut state, tok)?;
    }

    let mut beams = vec![Beam { state, generated: Vec::new(), sum_logp: 0.0, finished: false }];
    let mut next_logits = vec![last_logits];

    for _ in 0..max_new_tokens {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        // Candidates: (beam index, token, new sum logp).
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (bi, beam) in beams.iter().enumerate() {
            if beam.finished {
                // Carry finished beams forward unchanged.
                candidates.push((bi, u32::MAX, beam.sum_logp));
                continue;
            }
            let logp = log_softmax_f64(&next_logits[bi]);
            // Only the top beam_width tokens of a beam can survive selection.
            let mut idx: Vec<u32> = (0..logp.len() as u32).collect();
            idx.sort_by(|&a, &b| {
                logp[b as usize]
                    .partial_cmp(&logp[a as usize])
                    .expect("finite logp")
                    .then(a.cmp(&b))
            });
            for &tok in idx.iter().take(beam_width) {
                candidates.push((bi, tok, beam.sum_logp + logp[tok as usize]));
            }
        }
        // Rank by mean logp over the candidate's generated length.
        let cand_score = |c: &(usize, u32, f64)| -> f64 {
            let len = beams[c.0].generated.len() + usize::from(c.1 != u32::MAX);
            if len == 0 {
                f64::NEG_INFINITY
            } else {
                c.2 / len as f64
            }
        };
        candidates.sort_by(|a, b| {
            cand_score(b)
                .partial_cmp(&cand_score(a))
                .expect("finite scores")
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });
        candidates.truncate(beam_width);

        let mut new_beams = Vec::with_capacity(candidates.len());
        let mut new_logits = Vec::with_capacity(candidates.len());
        for (bi, tok, sum_logp) in candidates {
            if tok == u32::MAX {
                // A finished beam carried over.
                new_beams.push(Beam {
                    state: beams[bi].state.clone_state(),
                    generated: beams[bi].generated.clone(),
                    sum_logp,
                    finished: true,
                });
                new_logits.push(Array1::zeros(params.config.vocab_size));
                continue;
            }
            let mut state = beams[bi].state.clone_state();
            let mut generated = beams[bi].generated.clone();
            let finished = tok == EOS;
            let logits = if finished || state.len() >= params.config.context_window {
                Array1::zeros(params.config.vocab_size)
            } else {
                decode_step(params, &mut state, tok)?
            };
            generated.push(tok);
            new_beams.push(Beam { state, generated, sum_logp, finished });
            new_logits.push(logits);
        }
        beams = new_beams;
        next_logits = new_logits;
    }

    let best = beams
        .iter()
        .enumerate()
        .max_by(|(ai, a), (bi, b)| {
            a.score()
                .partial_cmp(&b.score())
                .expect("finite scores")
                .then(bi.cmp(ai)) // earlier beam wins ties
        })
        .map(|(_, b)| b)
        .expect("at least one beam");
    let mut tokens = best.generated.clone();
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok((tokens, best.score()))
}

/// Beam-search generation; see [`generate_scored`].
pub fn generate<F: Scalar>(
    params: &ParameterSet<F>,
    adapter: Option<&LoraAdapter<F>>,
    prompt: &[u32],
    beam_width: usize,
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    Ok(generate_scored(params, adapter, prompt, beam_width, max_new_tokens)?.0)
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"KMTCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

/// Header of a checkpoint file; `kind` is "model" or "adapter".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub kind: String,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    pub vocab_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    pub step: u64,
    tensors: Vec<TensorHeader>,
}

fn tensor_headers_for<F: Scalar>(visit: impl Fn(&mut dyn FnMut(&str, &[F]))) -> Vec<TensorHeader> {
    let mut headers = Vec::new();
    visit(&mut |name: &str, t: &[F]| {
        headers.push(TensorHeader { name: name.to_string(), rows: 1, cols: t.len() });
    });
    headers
}

fn write_container<F: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    visit: impl Fn(&mut dyn FnMut(&str, &[F])),
) -> Result<()> {
    let header = serde_json::to_vec(meta)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    let mut err = None;
    visit(&mut |_name: &str, t: &[F]| {
        if err.is_some() {
            return;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        if let Err(e) = out.write_all(&buf) {
            err = Some(e);
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    out.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(CheckpointMeta, Vec<Vec<f32>>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint file)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if meta.schema_version != 1 {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported schema version {}",
            path.display(),
            meta.schema_version
        )));
    }
    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for th in &meta.tensors {
        let n = th.rows * th.cols;
        let mut buf = vec![0u8; n * 4];
        file.read_exact(&mut buf).map_err(|_| {
            Error::Checkpoint(format!("{}: truncated tensor {}", path.display(), th.name))
        })?;
        let mut data = Vec::with_capacity(n);
        for c in buf.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        tensors.push(data);
    }
    Ok((meta, tensors))
}

/// Write a model checkpoint (float32, little-endian, byte-stable).
pub fn save_checkpoint(
    path: &Path,
    params: &ParameterSet<f32>,
    vocab_hash: &str,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        schema_version: 1,
        kind: "model".into(),
        config: params.config,
        lora: None,
        vocab_hash: vocab_hash.to_string(),
        base_hash: None,
        step,
        tensors: tensor_headers_for::<f32>(|f| params.visit(f)),
    };
    write_container::<f32>(path, &meta, |f| params.visit(f))
}

/// Read a model checkpoint back.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet<f32>, CheckpointMeta)> {
    let (meta, tensors) = read_container(path)?;
    if meta.kind != "model" {
        return Err(Error::Checkpoint(format!(
            "{}: expected a model checkpoint, found kind {:?}",
            path.display(),
            meta.kind
        )));
    }
    meta.config.validate()?;
    let mut params = ParameterSet::<f32>::zeros(meta.config);
    let mut idx = 0usize;
    let mut err: Option<String> = None;
    params.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match tensors.get(idx) {
            Some(data) if data.len() == t.len() && meta.tensors[idx].name == name => {
                t.copy_from_slice(data)
            }
            Some(data) => {
                err = Some(format!(
                    "tensor {idx} mismatch: file has {:?} ({} values), model expects {name} ({})",
                    meta.tensors[idx].name,
                    data.len(),
                    t.len()
                ))
            }
            None => err = Some(format!("missing tensor {name}")),
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(Error::Checkpoint(format!("{}: {e}", path.display())));
    }
    if idx != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{}: file has {} extra tensors",
            path.display(),
            tensors.len() - idx
        )));
    }
    Ok((params, meta))
}

/// Write an adapter checkpoint; `base_hash` ties it to its base model.
pub fn save_adapter(
    path: &Path,
    adapter: &LoraAdapter<f32>,
    vocab_hash: &str,
    base_hash: &str,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        schema_version: 1,
        kind: "adapter".into(),
        config: adapter.model_config,
        lora: Some(adapter.config),
        vocab_hash: vocab_hash.to_string(),
        base_hash: Some(base_hash.to_string()),
        step,
        tensors: tensor_headers_for::<f32>(|f| adapter.visit(f)),
    };
    write_container::<f32>(path, &meta, |f| adapter.visit(f))
}

/// Read an adapter checkpoint back.
pub fn load_adapter(path: &Path) -> Result<(LoraAdapter<f32>, CheckpointMeta)> {
    let (meta, tensors) = read_container(path)?;
    if meta.kind != "adapter" {
        return Err(Error::Checkpoint(format!(
            "{}: expected an adapter checkpoint, found kind {:?}",
            path.display(),
            meta.kind
        )));
    }
    let lora = meta.lora.ok_or_else(|| {
        Error::Checkpoint(format!("{}: adapter checkpoint missing lora config", path.display()))
    })?;
    let mut adapter = LoraAdapter::<f32>::zeros(meta.config, lora);
    let mut idx = 0usize;
    let mut err: Option<String> = None;
    adapter.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match tensors.get(idx) {
            Some(data) if data.len() == t.len() && meta.tensors[idx].name == name => {
                t.copy_from_slice(data)
            }
            _ => err = Some(format!("tensor layout mismatch at {name}")),
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(Error::Checkpoint(format!("{}: {e}", path.display())));
    }
    Ok((adapter, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig { context_window: 32, ..ModelConfig::new(2, 2, 16, 23) }
    }

    fn rand_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
        (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_config();
        let a: ParameterSet<f32> = init_params(cfg, 5).unwrap();
        let b: ParameterSet<f32> = init_params(cfg, 5).unwrap();
        let c: ParameterSet<f32> = init_params(cfg, 6).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert!(a.all_finite());
    }

    #[test]
    fn param_count_matches_allocated_scalars() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 1).unwrap();
        assert_eq!(p.scalar_count(), cfg.param_count());
        // Hand-computed for 2 layers, d=16, f=64, V=23:
        // embedding 23*16=368, per layer 2*16 + 4*(256+16) + 2*16 + (16*64+64)
        // + (64*16+16) = 32+1088+32+1088+1040 = 3280, final norm 32,
        // head 16*23=368 -> 368 + 2*3280 + 32 + 368 = 7328.
        assert_eq!(cfg.param_count(), 7328);
    }

    #[test]
    fn full_size_config_instantiates() {
        // The reference scale: 12 layers, 12 heads, 768 dims (vocab kept small
        // here so the test allocates quickly).
        let cfg = ModelConfig::new(12, 12, 768, 500);
        let p: ParameterSet<f32> = init_params(cfg, 2).unwrap();
        assert_eq!(p.layers.len(), 12);
        assert_eq!(p.scalar_count(), cfg.param_count());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.d_model = 18; // not divisible by n_heads=2? 18/2=9 odd head dim
        assert!(cfg.validate().is_err());
        cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg = tiny_config();
        cfg.vocab_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_is_causal() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 7).unwrap();
        let mut rng = stream(9, Domain::Eval, &[]);
        let tokens = rand_tokens(&mut rng, 12, cfg.vocab_size);
        let (logits, _) = forward_full(&p, &tokens).unwrap();
        let mut altered = tokens.clone();
        altered[5] = (altered[5] + 1) % cfg.vocab_size as u32;
        let (logits2, _) = forward_full(&p, &altered).unwrap();
        for t in 0..5 {
            for v in 0..cfg.vocab_size {
                assert_eq!(
                    logits[[t, v]],
                    logits2[[t, v]],
                    "position {t} saw a change at position 5"
                );
            }
        }
        // And the changed position itself must differ somewhere.
        let changed = (0..cfg.vocab_size).any(|v| logits[[5, v]] != logits2[[5, v]]);
        assert!(changed);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 7).unwrap();
        assert!(forward(&p, None, &[]).is_err());
        assert!(forward(&p, None, &vec![1; cfg.context_window + 1]).is_err());
        assert!(forward(&p, None, &[cfg.vocab_size as u32]).is_err());
    }

    #[test]
    fn logits_finite_at_all_supported_lengths() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 11).unwrap();
        let mut rng = stream(12, Domain::Eval, &[]);
        for len in 1..=cfg.context_window {
            let tokens = rand_tokens(&mut rng, len, cfg.vocab_size);
            let logits = forward(&p, None, &tokens).unwrap();
            assert!(logits.iter().all(|v| v.is_finite()), "len {len}");
        }
    }

    #[test]
    fn fresh_adapter_is_exactly_transparent() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 3).unwrap();
        let lora = LoraConfig { attn_rank: 4, embed_rank: 8, alpha: 4.0 };
        let adapter: LoraAdapter<f32> = init_lora(cfg, lora, 3).unwrap();
        let mut rng = stream(4, Domain::Eval, &[]);
        let tokens = rand_tokens(&mut rng, 10, cfg.vocab_size);
        let base = forward(&p, None, &tokens).unwrap();
        let adapted = forward(&p, Some(&adapter), &tokens).unwrap();
        assert_eq!(base, adapted, "zero-initialized adapter must be a no-op");
        // Merge with the fresh adapter leaves parameters bit-identical.
        let merged = merge_lora(&p, &adapter).unwrap();
        assert_eq!(merged.content_hash(), p.content_hash());
    }

    fn randomize_adapter(adapter: &mut LoraAdapter<f32>, seed: u64) {
        let mut rng = stream(seed, Domain::Init, &[99]);
        adapter.visit_mut(&mut |_, t| {
            for v in t {
                *v = (rng.gen::<f32>() - 0.5) * 0.2;
            }
        });
    }

    #[test]
    fn merged_and_adapted_forward_agree() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 13).unwrap();
        let lora = LoraConfig { attn_rank: 4, embed_rank: 8, alpha: 4.0 };
        let mut adapter: LoraAdapter<f32> = init_lora(cfg, lora, 13).unwrap();
        randomize_adapter(&mut adapter, 14);
        let merged = merge_lora(&p, &adapter).unwrap();
        let mut rng = stream(15, Domain::Eval, &[]);
        for _ in 0..100 {
            let len = rng.gen_range(1..=16);
            let tokens = rand_tokens(&mut rng, len, cfg.vocab_size);
            let a = forward(&p, Some(&adapter), &tokens).unwrap();
            let b = forward(&merged, None, &tokens).unwrap();
            let max_diff = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff <= 1e-5, "merged/adapted drift {max_diff}");
        }
        // Additive update: merging twice shifts the weights again.
        let twice = merge_lora(&merged, &adapter).unwrap();
        assert_ne!(twice.content_hash(), merged.content_hash());
    }

    #[test]
    fn rotary_scores_depend_only_on_relative_offset() {
        let cfg = tiny_config();
        let mut rng = stream(21, Domain::Eval, &[]);
        let d = cfg.d_model;
        let q0: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let k0: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let score = |qpos: usize, kpos: usize| -> f64 {
            let mut q = Array2::from_shape_vec((1, d), q0.clone()).unwrap();
            let mut k = Array2::from_shape_vec((1, d), k0.clone()).unwrap();
            apply_rotary(&mut q, &cfg, qpos, 1.0);
            apply_rotary(&mut k, &cfg, kpos, 1.0);
            // Score within the first head.
            let hd = cfg.head_dim();
            (0..hd).map(|c| q[[0, c]] * k[[0, c]]).sum()
        };
        for (i, j) in [(3usize, 1usize), (7, 2), (5, 5), (9, 0)] {
            for shift in [1usize, 4, 11] {
                let a = score(i, j);
                let b = score(i + shift, j + shift);
                assert!(
                    (a - b).abs() < 1e-10,
                    "scores changed under shift: {a} vs {b}"
                );
            }
        }
        // Different relative offsets generally give different scores.
        assert!((score(3, 1) - score(4, 1)).abs() > 1e-9);
    }

    #[test]
    fn lm_loss_anchors() {
        let v = 11usize;
        // Uniform logits lose ln(V).
        let logits = Array2::<f32>::zeros((3, v));
        let (loss, _, count) =
            lm_loss(logits.view(), &[0, 5, 10], &[true, true, true]).unwrap();
        assert_eq!(count, 3);
        assert!((loss - (v as f64).ln()).abs() < 1e-6);
        // Confident correct logits lose ~0.
        let mut confident = Array2::<f32>::zeros((2, v));
        confident[[0, 4]] = 50.0;
        confident[[1, 7]] = 50.0;
        let (loss, _, _) = lm_loss(confident.view(), &[4, 7], &[true, true]).unwrap();
        assert!(loss < 1e-6);
        // Empty mask is an error.
        assert!(lm_loss(logits.view(), &[0, 0, 0], &[false, false, false]).is_err());
    }

    /// Central finite differences vs analytic gradients, in f64, across every
    /// tensor class (embedding, attention, MLP, norms, head, and both LoRA
    /// factor sides), on a 2-layer/16-dim model.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_config();
        let base: ParameterSet<f64> = init_params(cfg, 31).unwrap();
        let lora = LoraConfig { attn_rank: 3, embed_rank: 4, alpha: 4.0 };
        let mut adapter: LoraAdapter<f64> = init_lora(cfg, lora, 31).unwrap();
        // Give the zero factor real values so factor gradients are nontrivial.
        {
            let mut rng = stream(32, Domain::Init, &[7]);
            adapter.visit_mut(&mut |_, t| {
                for v in t {
                    *v = (rng.gen::<f64>() - 0.5) * 0.3;
                }
            });
        }
        let mut rng = stream(33, Domain::Eval, &[]);
        let tokens = rand_tokens(&mut rng, 9, cfg.vocab_size);
        let targets: Vec<u32> = rand_tokens(&mut rng, 9, cfg.vocab_size);
        let mask: Vec<bool> = (0..9).map(|i| i % 3 != 1).collect();

        let loss_of = |p: &ParameterSet<f64>| -> f64 {
            let (logits, _) = forward_full(p, &tokens).unwrap();
            lm_loss(logits.view(), &targets, &mask).unwrap().0
        };

        // Dense gradients at the merged point.
        let merged = merge_lora(&base, &adapter).unwrap();
        let (logits, cache) = forward_full(&merged, &tokens).unwrap();
        let (_, dlogits, _) = lm_loss(logits.view(), &targets, &mask).unwrap();
        let mut dense = ParameterSet::<f64>::zeros(cfg);
        backward(&merged, &cache, dlogits.view(), &mut dense);

        // Collect analytic grads and parameter snapshots per tensor.
        let mut grad_tensors: Vec<(String, Vec<f64>)> = Vec::new();
        dense.visit(&mut |name, t| grad_tensors.push((name.to_string(), t.to_vec())));

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for (ti, (name, analytic)) in grad_tensors.iter().enumerate() {
            // Check up to 6 entries per tensor, spread deterministically.
            let len = analytic.len();
            let step = (len / 6).max(1);
            for ei in (0..len).step_by(step).take(6) {
                let probe = |delta: f64| -> f64 {
                    let mut p = merged.clone();
                    let mut idx = 0usize;
                    p.visit_mut(&mut |_, t| {
                        if idx == ti {
                            t[ei] += delta;
                        }
                        idx += 1;
                    });
                    loss_of(&p)
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let a = analytic[ei];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(
                    rel <= 1e-3,
                    "{name}[{ei}]: analytic {a} vs numeric {numeric} (rel {rel})"
                );
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-3);

        // LoRA factor gradients: project the dense grads, then finite-diff the
        // factors through the merged forward.
        let mut factor_grads = LoraAdapter::<f64>::zeros(cfg, lora);
        lora_grads_from_dense(&dense, &adapter, &mut factor_grads);
        let loss_with_adapter = |ad: &LoraAdapter<f64>| -> f64 {
            let m = merge_lora(&base, ad).unwrap();
            loss_of(&m)
        };
        let mut flat: Vec<(String, Vec<f64>)> = Vec::new();
        factor_grads.visit(&mut |name, t| flat.push((name.to_string(), t.to_vec())));
        for (ti, (name, analytic)) in flat.iter().enumerate() {
            let len = analytic.len();
            let step = (len / 4).max(1);
            for ei in (0..len).step_by(step).take(4) {
                let probe = |delta: f64| -> f64 {
                    let mut ad = adapter.clone();
                    let mut idx = 0usize;
                    ad.visit_mut(&mut |_, t| {
                        if idx == ti {
                            t[ei] += delta;
                        }
                        idx += 1;
                    });
                    loss_with_adapter(&ad)
                };
                let numeric = (probe(h) - probe(-h)) / (2.0 * h);
                let a = analytic[ei];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                assert!(
                    rel <= 1e-3,
                    "{name}[{ei}]: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 41).unwrap();
        let mut rng = stream(42, Domain::Eval, &[]);
        let tokens = rand_tokens(&mut rng, 14, cfg.vocab_size);
        let (full, _) = forward_full(&p, &tokens).unwrap();
        let mut state = DecodeState::new(&cfg);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = decode_step(&p, &mut state, tok).unwrap();
            for v in 0..cfg.vocab_size {
                let diff = (row[v] - full[[t, v]]).abs();
                assert!(diff <= 1e-3, "pos {t} vocab {v}: diff {diff}");
            }
        }
    }

    #[test]
    fn beam_one_equals_greedy_and_decoding_is_reproducible() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 51).unwrap();
        let prompt = [3u32, 9, 4];
        let (beam1, _) = generate_scored(&p, None, &prompt, 1, 8).unwrap();
        // Manual greedy reference through the same decode path.
        let mut state = DecodeState::new(&cfg);
        let mut logits = Array1::zeros(cfg.vocab_size);
        for &t in &prompt {
            logits = decode_step(&p, &mut state, t).unwrap();
        }
        let mut greedy = Vec::new();
        for _ in 0..8 {
            let lp = log_softmax_f64(&logits);
            let best = (0..lp.len())
                .max_by(|&a, &b| lp[a].partial_cmp(&lp[b]).unwrap().then(b.cmp(&a)))
                .unwrap() as u32;
            if best == EOS {
                break;
            }
            greedy.push(best);
            logits = decode_step(&p, &mut state, best).unwrap();
        }
        assert_eq!(beam1, greedy);
        // Reproducibility.
        let again = generate(&p, None, &prompt, 4, 8).unwrap();
        let again2 = generate(&p, None, &prompt, 4, 8).unwrap();
        assert_eq!(again, again2);
    }

    /// Exhaustively enumerate the decode tree at a tiny depth and compare
    /// against beam search: a full-width beam must find the optimum mean
    /// log-probability, and beam-4 must score at least as well as greedy.
    #[test]
    fn beam_search_against_exhaustive_tree() {
        let cfg = ModelConfig { context_window: 16, ..ModelConfig::new(1, 2, 8, 6) };
        let p: ParameterSet<f32> = init_params(cfg, 61).unwrap();
        let prompt = [2u32, 5];
        let depth = 4usize;

        fn best_completion(
            p: &ParameterSet<f32>,
            state: &DecodeState<f32>,
            logits: &Array1<f32>,
            so_far: Vec<u32>,
            sum_logp: f64,
            depth_left: usize,
        ) -> (f64, Vec<u32>) {
            let lp = log_softmax_f64(logits);
            let mut best = (f64::NEG_INFINITY, Vec::new());
            for tok in 0..lp.len() as u32 {
                let mut seq = so_far.clone();
                seq.push(tok);
                let sum = sum_logp + lp[tok as usize];
                let score_here = sum / seq.len() as f64;
                if tok == EOS || depth_left == 1 {
                    if score_here > best.0 {
                        best = (score_here, seq);
                    }
                    continue;
                }
                let mut st = state.clone_state();
                let next = decode_step(p, &mut st, tok).unwrap();
                let sub = best_completion(p, &st, &next, seq.clone(), sum, depth_left - 1);
                // The stop-here option also competes (sequence may end early
                // only via EOS in real decoding, so only recurse result and
                // EOS paths are valid candidates).
                if sub.0 > best.0 {
                    best = sub;
                }
            }
            best
        }

        let mut state = DecodeState::new(&cfg);
        let mut logits = Array1::zeros(cfg.vocab_size);
        for &t in &prompt {
            logits = decode_step(&p, &mut state, t).unwrap();
        }
        let (opt_score, _) =
            best_completion(&p, &state, &logits, Vec::new(), 0.0, depth);

        let (_, greedy_score) = generate_scored(&p, None, &prompt, 1, depth).unwrap();
        let (_, beam4_score) = generate_scored(&p, None, &prompt, 4, depth).unwrap();
        let (_, full_score) =
            generate_scored(&p, None, &prompt, cfg.vocab_size.pow(3), depth).unwrap();
        assert!(beam4_score >= greedy_score - 1e-12);
        assert!(full_score <= opt_score + 1e-9);
        assert!(
            (full_score - opt_score).abs() < 1e-9,
            "full-width beam {full_score} vs exhaustive {opt_score}"
        );
    }

    #[test]
    fn generation_respects_length_budget() {
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 71).unwrap();
        let long_prompt: Vec<u32> = vec![1; cfg.context_window - 2];
        assert!(generate(&p, None, &long_prompt, 4, 8).is_err());
        let ok = generate(&p, None, &[1, 2, 3], 2, 5).unwrap();
        assert!(ok.len() <= 5);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let p: ParameterSet<f32> = init_params(cfg, 81).unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &p, "vhash123", 777).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.content_hash(), p.content_hash());
        assert_eq!(meta.step, 777);
        assert_eq!(meta.vocab_hash, "vhash123");
        assert_eq!(meta.kind, "model");

        // Byte stability: saving the same parameters twice gives equal files.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &p, "vhash123", 777).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // Adapter roundtrip.
        let lora = LoraConfig { attn_rank: 4, embed_rank: 8, alpha: 4.0 };
        let mut adapter: LoraAdapter<f32> = init_lora(cfg, lora, 81).unwrap();
        randomize_adapter(&mut adapter, 82);
        let apath = dir.path().join("adapter.ckpt");
        save_adapter(&apath, &adapter, "vhash123", &p.content_hash(), 50).unwrap();
        let (aload, ameta) = load_adapter(&apath).unwrap();
        assert_eq!(aload.content_hash(), adapter.content_hash());
        assert_eq!(ameta.base_hash.as_deref(), Some(p.content_hash().as_str()));

        // Wrong-kind and corrupt files are refused.
        assert!(load_checkpoint(&apath).is_err());
        assert!(load_adapter(&path).is_err());
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&junk).is_err());
    }
}
