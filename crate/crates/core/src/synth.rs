//! Non-autoregressive VAE synthesizer with a normalizing-flow prior.
//!
//! Text tokens are encoded with self-attention and every position is
//! concatenated with the speaker embedding. During training a posterior
//! network reads the target mel (downsampled by the reduction factor) and
//! produces a diagonal Gaussian over latent frames. A sample from it is
//! decoded into all mel frames in one call. The loss is
//!
//! ```text
//! MSE(Y, Ỹ) + α·KL(Q(Z|X,Y) ‖ P(Z|X)) + β·MSE(ln L, ln L̃)
//! ```
//!
//! where `P(Z|X)` is a stack of text-conditioned affine couplings over a
//! standard normal and `L̃` comes from a length predictor that sees the text
//! encoding through a gradient stop. At inference the prior is sampled
//! instead: `Z = flow⁻¹(T·ε)` with latent length set by `L̃`.
//!
//! `Y` is the log-mel standardized with the corpus mean and standard
//! deviation stored in the config.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::{causality_mask, positional_encoding, Adam, Attention, Linear};
use crate::speaker::SpeakerEmbedding;
use crate::tensor::Tensor;
use crate::text::{TokenSequence, Vocab};

pub const CHECKPOINT_KIND: &str = "synthesizer";
pub const LOG_VARIANCE_BOUND: f64 = 10.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("speaker embedding has dimension {found}, model expects {expected}")]
    SpeakerDim { expected: usize, found: usize },
    #[error("speaker embedding is not unit-norm (norm {0})")]
    SpeakerNorm(f64),
    #[error("token id {0} outside the vocabulary")]
    TokenId(usize),
    #[error("mel has {found} bins, model expects {expected}")]
    MelBins { expected: usize, found: usize },
    #[error("the posterior needs the target mel and is only available in training mode")]
    PosteriorAtInference,
    #[error("non-finite value after flow step {step}")]
    NonFinite { step: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty training manifest")]
    EmptyManifest,
    #[error("invalid checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub mel_bins: usize,
    pub base_dim: usize,
    pub speaker_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub flow_steps: usize,
    /// Bound on per-element log-scale in each coupling.
    pub max_log_scale: f64,
    /// Causal self-attention over latent frames in the decoder; turning it
    /// off makes each output frame depend on its own latent frame only.
    pub decoder_self_attention: bool,
    pub mel_mean: f64,
    pub mel_std: f64,
    pub alpha_max: f64,
    pub alpha_warmup_steps: usize,
    pub beta: f64,
    pub reduction_factors: Vec<usize>,
    pub reduction_boundaries: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            mel_bins: 80,
            base_dim: 256,
            speaker_dim: 256,
            latent_dim: 128,
            hidden: 256,
            flow_steps: 4,
            max_log_scale: 2.0,
            decoder_self_attention: true,
            mel_mean: 0.0,
            mel_std: 1.0,
            alpha_max: 1e-3,
            alpha_warmup_steps: 1000,
            beta: 1.0,
            reduction_factors: vec![4, 3, 2, 1],
            reduction_boundaries: vec![2000, 4000, 6000],
            steps: 8000,
            batch_size: 4,
            learning_rate: 1e-3,
            temperature: 0.667,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn d_model(&self) -> usize {
        self.base_dim + self.speaker_dim
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            alpha_max: self.alpha_max,
            warmup_steps: self.alpha_warmup_steps,
            reduction_factors: self.reduction_factors.clone(),
            boundaries: self.reduction_boundaries.clone(),
        }
    }

    /// Reduction factor used at inference: the last one trained with.
    pub fn inference_reduction(&self) -> usize {
        *self.reduction_factors.last().unwrap_or(&1)
    }
}

/// KL weight warm-up and stepwise reduction-factor annealing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub alpha_max: f64,
    pub warmup_steps: usize,
    /// Descending reduction factors, e.g. `[4, 3, 2, 1]`.
    pub reduction_factors: Vec<usize>,
    /// Step at which each later factor takes over (`len = factors - 1`).
    pub boundaries: Vec<usize>,
}

impl AnnealSchedule {
    /// `(α, reduction_factor)` at a training step.
    pub fn at(&self, step: usize) -> (f64, usize) {
        let alpha = if self.warmup_steps == 0 {
            self.alpha_max
        } else {
            self.alpha_max * (step as f64 / self.warmup_steps as f64).min(1.0)
        };
        let passed = self.boundaries.iter().filter(|&&b| step >= b).count();
        let idx = passed.min(self.reduction_factors.len().saturating_sub(1));
        (alpha, self.reduction_factors.get(idx).copied().unwrap_or(1))
    }
}

/// One coupling step: a learned channel mix followed by an affine coupling
/// whose scale and shift come from attention over the fixed half (causal
/// over latent frames) and over the text encoding.
#[derive(Debug, Clone)]
struct FlowStep {
    mix: ParamId,
    input: Linear,
    self_attn: Attention,
    cross_attn: Attention,
    out: Linear,
    /// Which half is transformed: `false` → second half, `true` → first half.
    transform_first: bool,
}

/// Text-conditioned normalizing flow over latent sequences; the base
/// density is a standard normal.
#[derive(Debug, Clone)]
pub struct FlowPrior {
    steps: Vec<FlowStep>,
    pub latent_dim: usize,
    max_log_scale: f64,
}

/// Conditioning outputs of one coupling: log-scale and shift for the moving half.
struct CouplingParams {
    log_scale: Var,
    shift: Var,
}

impl FlowPrior {
    /// Identity-initialized: channel mixes start at `I` and coupling output
    /// layers at zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_steps: usize,
        latent_dim: usize,
        cond_dim: usize,
        hidden: usize,
        max_log_scale: f64,
        rng: &mut R,
    ) -> Self {
        assert!(latent_dim >= 2 && latent_dim % 2 == 0, "latent dimension must be even and >= 2");
        let half = latent_dim / 2;
        let steps = (0..n_steps)
            .map(|k| {
                let p = format!("{name}.{k}");
                FlowStep {
                    mix: store.add(format!("{p}.mix"), Tensor::identity(latent_dim)),
                    input: Linear::new(store, &format!("{p}.in"), half, hidden, 1.0, rng),
                    self_attn: Attention::new(store, &format!("{p}.self"), hidden, hidden, hidden, hidden, rng),
                    cross_attn: Attention::new(store, &format!("{p}.cross"), hidden, cond_dim, hidden, hidden, rng),
                    out: Linear::zeros(store, &format!("{p}.out"), hidden, latent_dim),
                    transform_first: k % 2 == 1,
                }
            })
            .collect();
        Self { steps, latent_dim, max_log_scale }
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    /// Parameter ids of every step, for targeted perturbation in tests.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.steps
            .iter()
            .flat_map(|s| {
                let mut v = vec![s.mix, s.input.w, s.input.b, s.out.w, s.out.b];
                for a in [&s.self_attn, &s.cross_attn] {
                    v.extend([a.q.w, a.q.b, a.k.w, a.k.b, a.v.w, a.v.b, a.o.w, a.o.b]);
                }
                v
            })
            .collect()
    }

    fn halves(&self, g: &mut Graph, x: Var, step: &FlowStep) -> (Var, Var) {
        let half = self.latent_dim / 2;
        let a = g.slice_cols(x, 0, half);
        let b = g.slice_cols(x, half, self.latent_dim);
        if step.transform_first {
            (b, a)
        } else {
            (a, b)
        }
    }

    fn join(&self, g: &mut Graph, fixed: Var, moved: Var, step: &FlowStep) -> Var {
        if step.transform_first {
            g.concat_cols(moved, fixed)
        } else {
            g.concat_cols(fixed, moved)
        }
    }

    fn coupling(&self, g: &mut Graph, store: &ParamStore, step: &FlowStep, fixed: Var, cond: Var) -> CouplingParams {
        let n = g.value(fixed).rows;
        let h = step.input.forward(g, store, fixed);
        let h = g.tanh(h);
        let hidden = g.value(h).cols;
        let pe = g.constant(positional_encoding(n, hidden));
        let h = g.add(h, pe);
        let mask = causality_mask(n);
        let a = step.self_attn.forward(g, store, h, h, Some(&mask)).out;
        let h = g.add(h, a);
        let c = step.cross_attn.forward(g, store, h, cond, None).out;
        let h = g.add(h, c);
        let raw = step.out.forward(g, store, h);
        let half = self.latent_dim / 2;
        let s = g.slice_cols(raw, 0, half);
        let shift = g.slice_cols(raw, half, self.latent_dim);
        let s = g.scale(s, 1.0 / self.max_log_scale);
        let s = g.tanh(s);
        let log_scale = g.scale(s, self.max_log_scale);
        CouplingParams { log_scale, shift }
    }

    fn check(g: &Graph, v: Var, step: usize) -> Result<(), SynthError> {
        if g.value(v).all_finite() {
            Ok(())
        } else {
            Err(SynthError::NonFinite { step })
        }
    }

    /// `z → u` with the accumulated `log|det ∂u/∂z|` as a `1 × 1` node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, cond: Var) -> Result<(Var, Var), SynthError> {
        let n = g.value(z).rows;
        let mut x = z;
        let mut log_det = g.constant(Tensor::scalar(0.0));
        for (k, step) in self.steps.iter().enumerate() {
            let w = g.param(store, step.mix);
            x = g.matmul(x, w);
            let lad = g.log_abs_det(w);
            let lad = g.scale(lad, n as f64);
            log_det = g.add(log_det, lad);
            let (fixed, moving) = self.halves(g, x, step);
            let cp = self.coupling(g, store, step, fixed, cond);
            let es = g.exp(cp.log_scale);
            let moved = g.mul(moving, es);
            let moved = g.add(moved, cp.shift);
            x = self.join(g, fixed, moved, step);
            let s = g.sum(cp.log_scale);
            log_det = g.add(log_det, s);
            Self::check(g, x, k)?;
        }
        Ok((x, log_det))
    }

    /// `u → z` with `log|det ∂z/∂u|` (the negative of the forward value).
    pub fn inverse(&self, g: &mut Graph, store: &ParamStore, u: Var, cond: Var) -> Result<(Var, Var), SynthError> {
        let n = g.value(u).rows;
        let mut x = u;
        let mut log_det = g.constant(Tensor::scalar(0.0));
        for (k, step) in self.steps.iter().enumerate().rev() {
            let (fixed, moved) = self.halves(g, x, step);
            let cp = self.coupling(g, store, step, fixed, cond);
            let unshift = g.sub(moved, cp.shift);
            let neg = g.scale(cp.log_scale, -1.0);
            let inv_s = g.exp(neg);
            let moving = g.mul(unshift, inv_s);
            x = self.join(g, fixed, moving, step);
            let s = g.sum(cp.log_scale);
            log_det = g.sub(log_det, s);
            let (lad, inv) = crate::autograd::log_abs_det_and_inverse(store.get(step.mix))
                .ok_or(SynthError::NonFinite { step: k })?;
            let inv = g.constant(inv);
            x = g.matmul(x, inv);
            log_det = g.add_const(log_det, -(n as f64) * lad);
            Self::check(g, x, k)?;
        }
        Ok((x, log_det))
    }

    /// `log P(z | cond)`: standard-normal log-density of `u` plus the forward log-det.
    pub fn log_prob(&self, g: &mut Graph, store: &ParamStore, z: Var, cond: Var) -> Result<Var, SynthError> {
        let (u, log_det) = self.forward(g, store, z, cond)?;
        let count = g.value(u).len() as f64;
        let sq = g.square(u);
        let ss = g.sum(sq);
        let base = g.scale(ss, -0.5);
        let base = g.add_const(base, -0.5 * count * LN_2PI);
        Ok(g.add(base, log_det))
    }

    /// Tensor-level forward pass.
    pub fn forward_tensor(&self, store: &ParamStore, z: &Tensor, cond: &Tensor) -> Result<(Tensor, f64), SynthError> {
        let mut g = Graph::inference();
        let (zv, cv) = (g.constant(z.clone()), g.constant(cond.clone()));
        let (u, ld) = self.forward(&mut g, store, zv, cv)?;
        Ok((g.value(u).clone(), g.scalar(ld)))
    }

    pub fn inverse_tensor(&self, store: &ParamStore, u: &Tensor, cond: &Tensor) -> Result<(Tensor, f64), SynthError> {
        let mut g = Graph::inference();
        let (uv, cv) = (g.constant(u.clone()), g.constant(cond.clone()));
        let (z, ld) = self.inverse(&mut g, store, uv, cv)?;
        Ok((g.value(z).clone(), g.scalar(ld)))
    }

    pub fn log_prob_tensor(&self, store: &ParamStore, z: &Tensor, cond: &Tensor) -> Result<f64, SynthError> {
        let mut g = Graph::inference();
        let (zv, cv) = (g.constant(z.clone()), g.constant(cond.clone()));
        let lp = self.log_prob(&mut g, store, zv, cv)?;
        Ok(g.scalar(lp))
    }
}

/// Text encoding with the speaker embedding concatenated at every position:
/// columns `[..base_dim]` are the encoder output, `[base_dim..]` the speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    pub matrix: Tensor,
    pub base_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub log_variance: Tensor,
}

impl GaussianPosterior {
    pub fn n_latent_frames(&self) -> usize {
        self.mean.rows
    }

    /// `mean + exp(½·log_variance) ⊙ ε` with `ε ~ N(0, I)`.
    pub fn reparameterize<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let eps = standard_normal(self.mean.rows, self.mean.cols, rng);
        reparameterize_with(&self.mean, &self.log_variance, &eps)
    }

    /// Closed-form `KL(N(mean, σ²) ‖ N(0, I))` summed over all elements.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mean
            .data
            .iter()
            .zip(&self.log_variance.data)
            .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
            .sum()
    }
}

pub fn reparameterize_with(mean: &Tensor, log_variance: &Tensor, eps: &Tensor) -> Tensor {
    let mut z = mean.clone();
    for ((zi, lv), e) in z.data.iter_mut().zip(&log_variance.data).zip(&eps.data) {
        *zi += (0.5 * lv).exp() * e;
    }
    z
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthPrediction {
    /// Predicted frame count `L̃ > 0`.
    pub predicted: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SynthLossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub length: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

impl SynthLossBreakdown {
    pub fn new(reconstruction: f64, kl: f64, length: f64, alpha: f64, beta: f64) -> Self {
        Self { reconstruction, kl, length, alpha, beta, total: reconstruction + alpha * kl + beta * length }
    }
}

/// How the KL term is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlEstimator {
    /// Closed form against the base normal; only valid for an identity prior.
    ClosedForm,
    /// `log Q(z) − log P(z)` at the reparameterized sample.
    SingleSample,
}

/// Graph-level pieces of one loss evaluation.
pub struct LossNodes {
    pub reconstruction: Var,
    pub kl: Var,
    pub length: Var,
    pub total: Var,
    pub attention: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Training example: tokens, log-mel target, speaker embedding.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub tokens: TokenSequence,
    pub mel: Tensor,
    pub speaker: SpeakerEmbedding,
}

#[derive(Debug)]
pub struct Synthesizer {
    pub config: SynthConfig,
    pub store: ParamStore,
    pub mode: Mode,
    embed: ParamId,
    enc_attn: Attention,
    enc_ff1: Linear,
    enc_ff2: Linear,
    len_hidden: Linear,
    len_out: Linear,
    post_in: Linear,
    post_self: Attention,
    post_cross: Attention,
    post_mean: Linear,
    post_logvar: Linear,
    dec_in: Linear,
    dec_self: Attention,
    dec_cross: Attention,
    dec_hidden: Linear,
    dec_out: Linear,
    pub prior: FlowPrior,
    decode_calls: AtomicUsize,
}

impl Clone for Synthesizer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            mode: self.mode,
            embed: self.embed,
            enc_attn: self.enc_attn.clone(),
            enc_ff1: self.enc_ff1.clone(),
            enc_ff2: self.enc_ff2.clone(),
            len_hidden: self.len_hidden.clone(),
            len_out: self.len_out.clone(),
            post_in: self.post_in.clone(),
            post_self: self.post_self.clone(),
            post_cross: self.post_cross.clone(),
            post_mean: self.post_mean.clone(),
            post_logvar: self.post_logvar.clone(),
            dec_in: self.dec_in.clone(),
            dec_self: self.dec_self.clone(),
            dec_cross: self.dec_cross.clone(),
            dec_hidden: self.dec_hidden.clone(),
            dec_out: self.dec_out.clone(),
            prior: self.prior.clone(),
            decode_calls: AtomicUsize::new(self.decode_calls()),
        }
    }
}

impl Synthesizer {
    pub fn new(config: SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let (b, h, d, l, m) = (config.base_dim, config.hidden, config.d_model(), config.latent_dim, config.mel_bins);
        let embed = s.add("text.embed", Tensor::randn(config.vocab_size, b, 0.3, &mut rng));
        let enc_attn = Attention::new(&mut s, "text.attn", b, b, h, b, &mut rng);
        let enc_ff1 = Linear::new(&mut s, "text.ff1", b, h, 1.0, &mut rng);
        let enc_ff2 = Linear::new(&mut s, "text.ff2", h, b, 0.5, &mut rng);
        let len_hidden = Linear::new(&mut s, "length.hidden", d, h, 1.0, &mut rng);
        let len_out = Linear::new(&mut s, "length.out", h, 1, 0.1, &mut rng);
        let post_in = Linear::new(&mut s, "posterior.in", m, h, 1.0, &mut rng);
        let post_self = Attention::new(&mut s, "posterior.self", h, h, h, h, &mut rng);
        let post_cross = Attention::new(&mut s, "posterior.cross", h, d, h, h, &mut rng);
        let post_mean = Linear::new(&mut s, "posterior.mean", h, l, 0.5, &mut rng);
        let post_logvar = Linear::new(&mut s, "posterior.logvar", h, l, 0.1, &mut rng);
        let dec_in = Linear::new(&mut s, "decoder.in", l, h, 1.0, &mut rng);
        let dec_self = Attention::new(&mut s, "decoder.self", h, h, h, h, &mut rng);
        let dec_cross = Attention::new(&mut s, "decoder.cross", h, d, h, h, &mut rng);
        let dec_hidden = Linear::new(&mut s, "decoder.hidden", h, h, 1.0, &mut rng);
        let dec_out = Linear::new(&mut s, "decoder.out", h, m, 1.0, &mut rng);
        let prior = FlowPrior::new(&mut s, "prior", config.flow_steps, l, d, h, config.max_log_scale, &mut rng);
        Self {
            config,
            store: s,
            mode: Mode::Training,
            embed,
            enc_attn,
            enc_ff1,
            enc_ff2,
            len_hidden,
            len_out,
            post_in,
            post_self,
            post_cross,
            post_mean,
            post_logvar,
            dec_in,
            dec_self,
            dec_cross,
            dec_hidden,
            dec_out,
            prior,
            decode_calls: AtomicUsize::new(0),
        }
    }

    /// Number of decoder invocations since construction.
    pub fn decode_calls(&self) -> usize {
        self.decode_calls.load(Ordering::SeqCst)
    }

    /// Parameters of the text encoder (embedding, attention, feed-forward).
    pub fn text_encoder_params(&self) -> Vec<ParamId> {
        let a = &self.enc_attn;
        vec![
            self.embed,
            a.q.w, a.q.b, a.k.w, a.k.b, a.v.w, a.v.b, a.o.w, a.o.b,
            self.enc_ff1.w, self.enc_ff1.b, self.enc_ff2.w, self.enc_ff2.b,
        ]
    }

    pub fn length_predictor_params(&self) -> Vec<ParamId> {
        vec![self.len_hidden.w, self.len_hidden.b, self.len_out.w, self.len_out.b]
    }

    fn validate_inputs(&self, tokens: &TokenSequence, spk: &SpeakerEmbedding) -> Result<(), SynthError> {
        if tokens.ids.is_empty() {
            return Err(SynthError::EmptyTokens);
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(SynthError::TokenId(bad));
        }
        if spk.dim() != self.config.speaker_dim {
            return Err(SynthError::SpeakerDim { expected: self.config.speaker_dim, found: spk.dim() });
        }
        let norm = spk.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(SynthError::SpeakerNorm(norm));
        }
        Ok(())
    }

    /// Self-attention text encoder followed by the speaker concat.
    pub fn encode_text_graph(
        &self,
        g: &mut Graph,
        tokens: &TokenSequence,
        spk: &SpeakerEmbedding,
    ) -> Result<Var, SynthError> {
        self.validate_inputs(tokens, spk)?;
        let s = &self.store;
        let n = tokens.ids.len();
        let table = g.param(s, self.embed);
        let e = g.embedding(table, &tokens.ids);
        let pe = g.constant(positional_encoding(n, self.config.base_dim));
        let h = g.add(e, pe);
        let a = self.enc_attn.forward(g, s, h, h, None).out;
        let h = g.add(h, a);
        let f = self.enc_ff1.forward(g, s, h);
        let f = g.tanh(f);
        let f = self.enc_ff2.forward(g, s, f);
        let h = g.add(h, f);
        let spk_row = g.constant(spk.as_row());
        let spk_rows = g.broadcast_rows(spk_row, n);
        Ok(g.concat_cols(h, spk_rows))
    }

    pub fn encode_text(&self, tokens: &TokenSequence, spk: &SpeakerEmbedding) -> Result<TextEncoding, SynthError> {
        let mut g = Graph::inference();
        let x = self.encode_text_graph(&mut g, tokens, spk)?;
        Ok(TextEncoding { matrix: g.value(x).clone(), base_dim: self.config.base_dim })
    }

    /// `Q(Z | X, Y)` over `ceil(n_frames / reduction)` latent frames; `y` is
    /// the standardized mel. Returns `(mean, log_variance)`.
    pub fn posterior_graph(&self, g: &mut Graph, x_enc: Var, y: Var, reduction: usize) -> Result<(Var, Var), SynthError> {
        if self.mode == Mode::Inference {
            return Err(SynthError::PosteriorAtInference);
        }
        let cols = g.value(y).cols;
        if cols != self.config.mel_bins {
            return Err(SynthError::MelBins { expected: self.config.mel_bins, found: cols });
        }
        let s = &self.store;
        let pooled = g.mean_pool_rows(y, reduction.max(1));
        let n = g.value(pooled).rows;
        let h = self.post_in.forward(g, s, pooled);
        let h = g.tanh(h);
        let pe = g.constant(positional_encoding(n, self.config.hidden));
        let h = g.add(h, pe);
        let mask = causality_mask(n);
        let a = self.post_self.forward(g, s, h, h, Some(&mask)).out;
        let h = g.add(h, a);
        let c = self.post_cross.forward(g, s, h, x_enc, None).out;
        let h = g.add(h, c);
        let mean = self.post_mean.forward(g, s, h);
        let lv = self.post_logvar.forward(g, s, h);
        let lv = g.clamp(lv, -LOG_VARIANCE_BOUND, LOG_VARIANCE_BOUND);
        Ok((mean, lv))
    }

    /// Tensor-level posterior on a raw log-mel.
    pub fn posterior_encode(&self, x_enc: &TextEncoding, mel: &Tensor, reduction: usize) -> Result<GaussianPosterior, SynthError> {
        let mut g = Graph::inference();
        let x = g.constant(x_enc.matrix.clone());
        let y = g.constant(self.standardize(mel));
        let (m, lv) = self.posterior_graph(&mut g, x, y, reduction)?;
        Ok(GaussianPosterior { mean: g.value(m).clone(), log_variance: g.value(lv).clone() })
    }

    /// Decodes every output frame in one call: `n_latent × reduction` frames
    /// of standardized log-mel, plus the cross-attention map (latent × tokens).
    pub fn decode_graph(&self, g: &mut Graph, z: Var, x_enc: Var, reduction: usize) -> (Var, Var) {
        self.decode_calls.fetch_add(1, Ordering::SeqCst);
        let s = &self.store;
        let n = g.value(z).rows;
        let h = self.dec_in.forward(g, s, z);
        let h = g.tanh(h);
        let pe = g.constant(positional_encoding(n, self.config.hidden));
        let mut h = g.add(h, pe);
        if self.config.decoder_self_attention {
            let mask = causality_mask(n);
            let a = self.dec_self.forward(g, s, h, h, Some(&mask)).out;
            h = g.add(h, a);
        }
        let cross = self.dec_cross.forward(g, s, h, x_enc, None);
        let h = g.add(h, cross.out);
        let r = reduction.max(1);
        let up = g.repeat_rows_each(h, r);
        let pe_out = g.constant(positional_encoding(n * r, self.config.hidden));
        let up = g.add(up, pe_out);
        let f = self.dec_hidden.forward(g, s, up);
        let f = g.tanh(f);
        (self.dec_out.forward(g, s, f), cross.weights)
    }

    /// Tensor-level decode to raw log-mel.
    pub fn decode(&self, z: &Tensor, x_enc: &TextEncoding, reduction: usize) -> Tensor {
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let x = g.constant(x_enc.matrix.clone());
        let (y, _) = self.decode_graph(&mut g, zv, x, reduction);
        self.destandardize(g.value(y))
    }

    /// Predicted `ln L̃` from a text encoding that is detached first.
    pub fn length_graph(&self, g: &mut Graph, x_enc: Var) -> Var {
        let x = g.detach(x_enc);
        let n = g.value(x).rows;
        let avg = g.constant(Tensor::filled(1, n, 1.0 / n as f64));
        let pooled = g.matmul(avg, x);
        let h = self.len_hidden.forward(g, &self.store, pooled);
        let h = g.tanh(h);
        self.len_out.forward(g, &self.store, h)
    }

    pub fn predict_length(&self, x_enc: &TextEncoding) -> LengthPrediction {
        let mut g = Graph::inference();
        let x = g.constant(x_enc.matrix.clone());
        let ll = self.length_graph(&mut g, x);
        LengthPrediction { predicted: g.scalar(ll).exp() }
    }

    pub fn standardize(&self, mel: &Tensor) -> Tensor {
        let (mu, sd) = (self.config.mel_mean, self.config.mel_std);
        mel.map(|x| (x - mu) / sd)
    }

    pub fn destandardize(&self, y: &Tensor) -> Tensor {
        let (mu, sd) = (self.config.mel_mean, self.config.mel_std);
        y.map(|x| x * sd + mu)
    }

    /// Full training loss for one item given the posterior noise `eps`.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        item: &SynthItem,
        eps: &Tensor,
        reduction: usize,
        alpha: f64,
        beta: f64,
        kl_estimator: KlEstimator,
    ) -> Result<LossNodes, SynthError> {
        let x = self.encode_text_graph(g, &item.tokens, &item.speaker)?;
        let y = g.constant(self.standardize(&item.mel));
        let (mean, lv) = self.posterior_graph(g, x, y, reduction)?;
        let (nl, dl) = g.value(mean).shape();
        if eps.shape() != (nl, dl) {
            return Err(SynthError::Shape(format!("noise {:?} vs posterior {:?}", eps.shape(), (nl, dl))));
        }
        let e = g.constant(eps.clone());
        let half = g.scale(lv, 0.5);
        let sd = g.exp(half);
        let noise = g.mul(sd, e);
        let z = g.add(mean, noise);

        let (y_hat, attention) = self.decode_graph(g, z, x, reduction);
        let frames = item.mel.rows;
        let y_hat = g.slice_rows(y_hat, 0, frames);
        let reconstruction = mse_graph(g, y, y_hat);

        let kl = match kl_estimator {
            KlEstimator::ClosedForm => {
                if !self.prior.is_identity() {
                    return Err(SynthError::Shape("closed-form KL needs an identity prior".into()));
                }
                kl_closed_form_graph(g, mean, lv)
            }
            KlEstimator::SingleSample => {
                let log_q = gaussian_log_prob_at_sample(g, lv, eps);
                let log_p = self.prior.log_prob(g, &self.store, z, x)?;
                g.sub(log_q, log_p)
            }
        };

        let log_len = self.length_graph(g, x);
        let target = g.constant(Tensor::scalar((frames as f64).ln()));
        let length = mse_graph(g, target, log_len);

        let total = combine_loss(g, reconstruction, kl, length, alpha, beta);
        Ok(LossNodes { reconstruction, kl, length, total, attention })
    }

    fn default_estimator(&self) -> KlEstimator {
        if self.prior.is_identity() {
            KlEstimator::ClosedForm
        } else {
            KlEstimator::SingleSample
        }
    }

    /// Samples a mel from the prior. `temperature = 0` is deterministic.
    pub fn synthesize<R: Rng + ?Sized>(
        &self,
        tokens: &TokenSequence,
        spk: &SpeakerEmbedding,
        rng: &mut R,
        temperature: f64,
    ) -> Result<Tensor, SynthError> {
        let mut g = Graph::inference();
        let x = self.encode_text_graph(&mut g, tokens, spk)?;
        let log_len = self.length_graph(&mut g, x);
        let frames = g.scalar(log_len).exp().max(1.0).round() as usize;
        let r = self.config.inference_reduction();
        let n_latent = frames.div_ceil(r);
        let eps = standard_normal(n_latent, self.config.latent_dim, rng).scale(temperature);
        let u = g.constant(eps);
        let (z, _) = self.prior.inverse(&mut g, &self.store, u, x)?;
        let (y, _) = self.decode_graph(&mut g, z, x, r);
        Ok(self.destandardize(g.value(y)))
    }

    pub fn checkpoint(&self, vocab: &Vocab) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, &SynthMeta { config: self.config.clone(), vocab: vocab.clone() }, self.store.clone())
    }

    /// Loads a checkpoint for inference (the posterior is disabled).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Vocab), SynthError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let meta: SynthMeta = ck.meta_as()?;
        let mut model = Self::new(meta.config);
        model.store.load_from(&ck.params).map_err(|e| SynthError::Checkpoint(CheckpointError::Meta(e)))?;
        model.mode = Mode::Inference;
        Ok((model, meta.vocab.reindexed()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMeta {
    pub config: SynthConfig,
    pub vocab: Vocab,
}

pub fn mse_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.mean(sq)
}

/// `Σ ½(σ² + m² − 1 − ln σ²)`.
pub fn kl_closed_form_graph(g: &mut Graph, mean: Var, log_var: Var) -> Var {
    let var = g.exp(log_var);
    let m2 = g.square(mean);
    let t = g.add(var, m2);
    let t = g.sub(t, log_var);
    let t = g.add_const(t, -1.0);
    let s = g.sum(t);
    g.scale(s, 0.5)
}

/// `log N(z; m, σ²)` summed, at `z = m + σ ε`: `−Σ ½(ln σ² + ε² + ln 2π)`.
fn gaussian_log_prob_at_sample(g: &mut Graph, log_var: Var, eps: &Tensor) -> Var {
    let count = eps.len() as f64;
    let eps_sq: f64 = eps.data.iter().map(|e| e * e).sum();
    let s = g.sum(log_var);
    let s = g.scale(s, -0.5);
    g.add_const(s, -0.5 * eps_sq - 0.5 * count * LN_2PI)
}

/// `reconstruction + α·kl + β·length`, evaluated in that order.
pub fn combine_loss(g: &mut Graph, reconstruction: Var, kl: Var, length: Var, alpha: f64, beta: f64) -> Var {
    let a = g.scale(kl, alpha);
    let b = g.scale(length, beta);
    let t = g.add(reconstruction, a);
    g.add(t, b)
}

/// Eq.-style loss from precomputed pieces: `MSE(Y, Ỹ) + α·KL + β·(ln L − ln L̃)²`.
pub fn synthesizer_loss(
    y: &Tensor,
    y_hat: &Tensor,
    q: &GaussianPosterior,
    kl: Option<f64>,
    true_len: usize,
    predicted_len: f64,
    alpha: f64,
    beta: f64,
) -> Result<SynthLossBreakdown, SynthError> {
    if y.shape() != y_hat.shape() {
        return Err(SynthError::Shape(format!("target {:?} vs prediction {:?}", y.shape(), y_hat.shape())));
    }
    let reconstruction = y.data.iter().zip(&y_hat.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    let kl = kl.unwrap_or_else(|| q.kl_to_standard_normal());
    let length = ((true_len as f64).ln() - predicted_len.ln()).powi(2);
    Ok(SynthLossBreakdown::new(reconstruction, kl, length, alpha, beta))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthStepLog {
    pub step: usize,
    pub reduction: usize,
    pub loss: SynthLossBreakdown,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SynthTrainLog {
    pub steps: Vec<SynthStepLog>,
}

impl SynthTrainLog {
    pub fn reconstruction(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss.reconstruction).collect()
    }
}

/// Optional training side outputs.
#[derive(Debug, Clone, Default)]
pub struct SynthTrainOptions<'a> {
    /// Write decoder attention maps as PGM images here.
    pub attention_dir: Option<&'a Path>,
    pub attention_every: usize,
}

/// Global mean and standard deviation of log-mel values.
pub fn mel_statistics(mels: &[&Tensor]) -> (f64, f64) {
    let n: usize = mels.iter().map(|m| m.len()).sum();
    let mean = mels.iter().flat_map(|m| &m.data).sum::<f64>() / n as f64;
    let var = mels.iter().flat_map(|m| &m.data).map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt().max(1e-6))
}

/// Trains from scratch. The corpus mel statistics are written into the
/// model config before the first step.
pub fn train_synthesizer(
    items: &[SynthItem],
    config: &SynthConfig,
    options: &SynthTrainOptions<'_>,
) -> Result<(Synthesizer, SynthTrainLog), SynthError> {
    if items.is_empty() {
        return Err(SynthError::EmptyManifest);
    }
    let mut config = config.clone();
    let (mean, std) = mel_statistics(&items.iter().map(|i| &i.mel).collect::<Vec<_>>());
    config.mel_mean = mean;
    config.mel_std = std;
    let mut model = Synthesizer::new(config.clone());
    let estimator = model.default_estimator();
    let schedule = config.schedule();
    let mut opt = Adam::new(&model.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let mut log = SynthTrainLog::default();
    for step in 0..config.steps {
        let (alpha, r) = schedule.at(step);
        let mut g = Graph::new();
        let mut parts = Vec::new();
        let mut acc = [0.0; 3];
        let mut first_attention = None;
        for _ in 0..config.batch_size.max(1) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let item = &items[order[cursor]];
            cursor += 1;
            let n_latent = item.mel.rows.div_ceil(r);
            let eps = standard_normal(n_latent, config.latent_dim, &mut rng);
            let nodes = model.loss_graph(&mut g, item, &eps, r, alpha, config.beta, estimator)?;
            acc[0] += g.scalar(nodes.reconstruction);
            acc[1] += g.scalar(nodes.kl);
            acc[2] += g.scalar(nodes.length);
            first_attention.get_or_insert(nodes.attention);
            parts.push(nodes.total);
        }
        let k = parts.len() as f64;
        let stacked = g.concat_rows(&parts);
        let loss = g.mean(stacked);
        let grads = g.backward(loss).params(model.store.len());
        opt.step(&mut model.store, &grads);
        let breakdown = SynthLossBreakdown::new(acc[0] / k, acc[1] / k, acc[2] / k, alpha, config.beta);
        log::debug!(
            "synth step {step}: total {:.5} recon {:.5} kl {:.3} len {:.4} alpha {alpha:.2e} r {r}",
            breakdown.total, breakdown.reconstruction, breakdown.kl, breakdown.length
        );
        if let (Some(dir), Some(att)) = (options.attention_dir, first_attention) {
            if options.attention_every > 0 && step % options.attention_every == 0 {
                write_pgm(&dir.join(format!("attention_{step:06}.pgm")), g.value(att))?;
            }
        }
        log.steps.push(SynthStepLog { step, reduction: r, loss: breakdown });
    }
    model.mode = Mode::Training;
    Ok((model, log))
}

/// 8-bit binary PGM of a matrix with values in [0, 1], row-major.
pub fn write_pgm(path: &Path, m: &Tensor) -> Result<(), SynthError> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols, m.rows).into_bytes();
    out.extend(m.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out).map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))
}

/// Monte-Carlo ELBO with a fixed-variance Gaussian decoder head:
/// `E_Q[log P(Y|Z,X)] − KL`, where the likelihood is evaluated as a density
/// with standard deviation `sigma_dec` on standardized mels.
pub fn elbo_estimate(
    model: &Synthesizer,
    item: &SynthItem,
    eps: &Tensor,
    reduction: usize,
    sigma_dec: f64,
) -> Result<f64, SynthError> {
    let mut g = Graph::inference();
    let x = model.encode_text_graph(&mut g, &item.tokens, &item.speaker)?;
    let y_std = model.standardize(&item.mel);
    let y = g.constant(y_std.clone());
    let (mean, lv) = model.posterior_graph(&mut g, x, y, reduction)?;
    let q = GaussianPosterior { mean: g.value(mean).clone(), log_variance: g.value(lv).clone() };
    let z = reparameterize_with(&q.mean, &q.log_variance, eps);
    let zv = g.constant(z.clone());
    let (y_hat, _) = model.decode_graph(&mut g, zv, x, reduction);
    let y_hat = g.value(y_hat).slice_rows(0, item.mel.rows);
    let var = sigma_dec * sigma_dec;
    let log_lik: f64 = y_std
        .data
        .iter()
        .zip(&y_hat.data)
        .map(|(a, b)| -0.5 * (2.0 * PI * var).ln() - (a - b).powi(2) / (2.0 * var))
        .sum();
    let log_q: f64 = z
        .data
        .iter()
        .zip(&q.mean.data)
        .zip(&q.log_variance.data)
        .map(|((zi, m), lv)| -0.5 * (LN_2PI + lv + (zi - m).powi(2) / lv.exp()))
        .sum();
    let log_p = if model.prior.is_identity() {
        z.data.iter().map(|zi| -0.5 * (LN_2PI + zi * zi)).sum()
    } else {
        let lp = model.prior.log_prob(&mut g, &model.store, zv, x)?;
        g.scalar(lp)
    };
    Ok(log_lik - (log_q - log_p))
}
