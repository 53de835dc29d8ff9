//! GAN vocoder: an upsampling generator from log-mel to waveform, a set of
//! convolutional discriminators, and the least-squares adversarial,
//! feature-matching and mel losses
//!
//! ```text
//! L_G = Σ_k [L_adv(G; D_k) + λ_fm·L_fm(G; D_k)] + λ_mel·L_mel(G)
//! L_D = Σ_k L_adv(D_k; G)
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::dsp::{mel_spectrogram, mel_spectrogram_graph, DspError, MelBasis, MelConfig, Waveform};
use crate::nn::{Adam, Conv1d, Linear};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "vocoder";
const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum VocoderError {
    #[error("waveforms differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("feature maps differ: {0}")]
    FeatureShape(String),
    #[error("upsampling factors multiply to {product}, hop size is {hop}")]
    Upsampling { product: usize, hop: usize },
    #[error("waveform has {samples} samples, expected {frames} frames x hop {hop}")]
    FrameMismatch { samples: usize, frames: usize, hop: usize },
    #[error("mel has {found} bins, vocoder expects {expected}")]
    MelBins { expected: usize, found: usize },
    #[error("empty training manifest")]
    EmptyManifest,
    #[error("no training pair is long enough for a {0}-frame segment")]
    TooShort(usize),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub mel: MelConfig,
    pub upsample_factors: Vec<usize>,
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Number of discriminators; `k` sees the waveform average-pooled by `2^k`.
    pub discriminators: usize,
    pub disc_channels: usize,
    pub disc_kernel: usize,
    pub lambda_fm: f64,
    pub lambda_mel: f64,
    pub segment_frames: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            mel: MelConfig::default(),
            upsample_factors: vec![8, 8, 4],
            channels: vec![64, 32, 16],
            kernel: 7,
            discriminators: 2,
            disc_channels: 16,
            disc_kernel: 5,
            lambda_fm: 2.0,
            lambda_mel: 45.0,
            segment_frames: 16,
            steps: 2000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl VocoderConfig {
    pub fn validate(&self) -> Result<(), VocoderError> {
        self.mel.validate()?;
        let product: usize = self.upsample_factors.iter().product();
        if product != self.mel.hop_size || self.upsample_factors.len() != self.channels.len() {
            return Err(VocoderError::Upsampling { product, hop: self.mel.hop_size });
        }
        Ok(())
    }
}

/// Mel frames → waveform; every frame becomes `hop_size` samples.
#[derive(Debug, Clone)]
pub struct Generator {
    input: Linear,
    stages: Vec<(usize, Conv1d)>,
    output: Conv1d,
    hop: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &VocoderConfig, rng: &mut R) -> Self {
        let c0 = cfg.channels[0];
        let input = Linear::new(store, "gen.in", cfg.mel.mel_bins, c0, 1.0, rng);
        let mut stages = Vec::new();
        let mut c_in = c0;
        for (i, (&f, &c)) in cfg.upsample_factors.iter().zip(&cfg.channels).enumerate() {
            stages.push((f, Conv1d::new(store, &format!("gen.up{i}"), c_in, c, cfg.kernel, 1, rng)));
            c_in = c;
        }
        let output = Conv1d::new(store, "gen.out", c_in, 1, cfg.kernel, 1, rng);
        Self { input, stages, output, hop: cfg.mel.hop_size }
    }

    /// `n × mel_bins` log-mel node → `(n·hop) × 1` waveform node in (−1, 1).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mel: Var) -> Var {
        let mut h = self.input.forward(g, store, mel);
        h = g.leaky_relu(h, LEAKY_SLOPE);
        for (factor, conv) in &self.stages {
            h = g.repeat_rows_each(h, *factor);
            h = conv.forward(g, store, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let y = self.output.forward(g, store, h);
        g.tanh(y)
    }

    pub fn hop(&self) -> usize {
        self.hop
    }
}

/// Per-layer activations of one discriminator; the last entry is the score map.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    pub features: Vec<Tensor>,
}

impl DiscOutput {
    pub fn score(&self) -> &Tensor {
        self.features.last().expect("discriminator has at least one layer")
    }
}

#[derive(Debug, Clone)]
struct Discriminator {
    pool: usize,
    layers: Vec<Conv1d>,
}

/// `K` three-layer convolutional discriminators at successively halved rates.
#[derive(Debug, Clone)]
pub struct DiscriminatorSet {
    discs: Vec<Discriminator>,
}

impl DiscriminatorSet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &VocoderConfig, rng: &mut R) -> Self {
        let (c, k) = (cfg.disc_channels, cfg.disc_kernel);
        let discs = (0..cfg.discriminators.max(1))
            .map(|i| Discriminator {
                pool: 1 << i,
                layers: vec![
                    Conv1d::new(store, &format!("disc{i}.l0"), 1, c, k, 2, rng),
                    Conv1d::new(store, &format!("disc{i}.l1"), c, c, k, 2, rng),
                    Conv1d::new(store, &format!("disc{i}.l2"), c, 1, 3, 1, rng),
                ],
            })
            .collect();
        Self { discs }
    }

    pub fn len(&self) -> usize {
        self.discs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discs.is_empty()
    }

    /// Feature nodes for every discriminator; the last of each is its score.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, wave: Var) -> Vec<Vec<Var>> {
        self.discs
            .iter()
            .map(|d| {
                let mut h = if d.pool > 1 { g.mean_pool_rows(wave, d.pool) } else { wave };
                let mut feats = Vec::new();
                for (i, layer) in d.layers.iter().enumerate() {
                    h = layer.forward(g, store, h);
                    if i + 1 < d.layers.len() {
                        h = g.leaky_relu(h, LEAKY_SLOPE);
                    }
                    feats.push(h);
                }
                feats
            })
            .collect()
    }

    pub fn evaluate(&self, store: &ParamStore, wave: &Waveform) -> Vec<DiscOutput> {
        let mut g = Graph::inference();
        let w = g.constant(wave.to_column());
        self.forward(&mut g, store, w)
            .into_iter()
            .map(|fs| DiscOutput { features: fs.iter().map(|&f| g.value(f).clone()).collect() })
            .collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `mean((D(x) − 1)²) + mean(D(G(s))²)`.
pub fn adv_loss_d(score_real: &[f64], score_fake: &[f64]) -> f64 {
    let r: Vec<f64> = score_real.iter().map(|s| (s - 1.0).powi(2)).collect();
    let f: Vec<f64> = score_fake.iter().map(|s| s * s).collect();
    mean(&r) + mean(&f)
}

/// `mean((D(G(s)) − 1)²)`.
pub fn adv_loss_g(score_fake: &[f64]) -> f64 {
    let f: Vec<f64> = score_fake.iter().map(|s| (s - 1.0).powi(2)).collect();
    mean(&f)
}

/// `Σ_i (1/N_i)·‖real_i − fake_i‖₁` over layers.
pub fn feature_matching_loss(real: &[Tensor], fake: &[Tensor]) -> Result<f64, VocoderError> {
    if real.len() != fake.len() {
        return Err(VocoderError::FeatureShape(format!("{} layers vs {}", real.len(), fake.len())));
    }
    let mut total = 0.0;
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.shape() != f.shape() {
            return Err(VocoderError::FeatureShape(format!("layer {i}: {:?} vs {:?}", r.shape(), f.shape())));
        }
        let l1: f64 = r.data.iter().zip(&f.data).map(|(a, b)| (a - b).abs()).sum();
        total += l1 / r.len() as f64;
    }
    Ok(total)
}

/// Mean absolute difference between the log-mels of two equal-length waveforms.
pub fn mel_loss(x: &Waveform, x_hat: &Waveform, cfg: &MelConfig) -> Result<f64, VocoderError> {
    if x.len() != x_hat.len() {
        return Err(VocoderError::LengthMismatch(x.len(), x_hat.len()));
    }
    let a = mel_spectrogram(x, cfg)?;
    let b = mel_spectrogram(x_hat, cfg)?;
    Ok(mean_abs_diff(&a.frames, &b.frames))
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Loss terms of one evaluation. Per-discriminator vectors have length `K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VocoderLossBreakdown {
    pub adv_g: Vec<f64>,
    pub adv_d: Vec<f64>,
    pub fm: Vec<f64>,
    pub mel: f64,
    pub lambda_fm: f64,
    pub lambda_mel: f64,
    pub l_g: f64,
    pub l_d: f64,
}

impl VocoderLossBreakdown {
    /// Sums the totals in a fixed order: discriminators in index order, the
    /// mel term last.
    pub fn new(adv_g: Vec<f64>, adv_d: Vec<f64>, fm: Vec<f64>, mel: f64, lambda_fm: f64, lambda_mel: f64) -> Self {
        let mut l_g = 0.0;
        for (a, f) in adv_g.iter().zip(&fm) {
            l_g += a + lambda_fm * f;
        }
        l_g += lambda_mel * mel;
        let l_d = adv_d.iter().sum();
        Self { adv_g, adv_d, fm, mel, lambda_fm, lambda_mel, l_g, l_d }
    }

    /// Totals from discriminator outputs on real and generated audio.
    pub fn from_outputs(
        real: &[DiscOutput],
        fake: &[DiscOutput],
        mel: f64,
        lambda_fm: f64,
        lambda_mel: f64,
    ) -> Result<Self, VocoderError> {
        if real.len() != fake.len() {
            return Err(VocoderError::FeatureShape(format!("{} discriminators vs {}", real.len(), fake.len())));
        }
        let mut adv_g = Vec::new();
        let mut adv_d = Vec::new();
        let mut fm = Vec::new();
        for (r, f) in real.iter().zip(fake) {
            adv_g.push(adv_loss_g(&f.score().data));
            adv_d.push(adv_loss_d(&r.score().data, &f.score().data));
            fm.push(feature_matching_loss(&r.features, &f.features)?);
        }
        Ok(Self::new(adv_g, adv_d, fm, mel, lambda_fm, lambda_mel))
    }
}

/// `mean((real − 1)²) + mean(fake²)` on graph nodes.
pub fn adv_loss_d_graph(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g.add_const(real, -1.0);
    let r = g.square(r);
    let r = g.mean(r);
    let f = g.square(fake);
    let f = g.mean(f);
    g.add(r, f)
}

pub fn adv_loss_g_graph(g: &mut Graph, fake: Var) -> Var {
    let f = g.add_const(fake, -1.0);
    let f = g.square(f);
    g.mean(f)
}

pub fn feature_matching_graph(g: &mut Graph, real: &[Var], fake: &[Var]) -> Var {
    let mut total = g.constant(Tensor::scalar(0.0));
    for (&r, &f) in real.iter().zip(fake) {
        let d = g.sub(r, f);
        let d = g.abs(d);
        let d = g.mean(d);
        total = g.add(total, d);
    }
    total
}

pub fn mel_loss_graph(g: &mut Graph, target_mel: &Tensor, wave: Var, basis: &MelBasis) -> Var {
    let m = mel_spectrogram_graph(g, wave, basis);
    let t = g.constant(target_mel.clone());
    let d = g.sub(m, t);
    let d = g.abs(d);
    g.mean(d)
}

/// Graph nodes of one full loss evaluation.
pub struct VocoderLossNodes {
    pub adv_g: Vec<Var>,
    pub adv_d: Vec<Var>,
    pub fm: Vec<Var>,
    pub mel: Var,
    pub l_g: Var,
    pub l_d: Var,
    pub wave: Var,
}

#[derive(Debug, Clone)]
pub struct Vocoder {
    pub config: VocoderConfig,
    pub store: ParamStore,
    pub generator: Generator,
    pub discriminators: DiscriminatorSet,
    basis: MelBasis,
    gen_params: usize,
}

impl Vocoder {
    pub fn new(config: VocoderConfig) -> Result<Self, VocoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let generator = Generator::new(&mut store, &config, &mut rng);
        let gen_params = store.len();
        let discriminators = DiscriminatorSet::new(&mut store, &config, &mut rng);
        let basis = MelBasis::new(&config.mel);
        Ok(Self { config, store, generator, discriminators, basis, gen_params })
    }

    /// Parameter ids belonging to the generator.
    pub fn generator_params(&self) -> Vec<ParamId> {
        (0..self.gen_params).collect()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        (self.gen_params..self.store.len()).collect()
    }

    fn check_mel(&self, mel: &Tensor) -> Result<(), VocoderError> {
        if mel.cols != self.config.mel.mel_bins {
            return Err(VocoderError::MelBins { expected: self.config.mel.mel_bins, found: mel.cols });
        }
        Ok(())
    }

    pub fn generate(&self, mel: &Tensor) -> Result<Waveform, VocoderError> {
        self.check_mel(mel)?;
        let mut g = Graph::inference();
        let m = g.constant(mel.clone());
        let w = self.generator.forward(&mut g, &self.store, m);
        Ok(Waveform::new(g.value(w).data.clone(), self.config.mel.sample_rate))
    }

    /// Builds every loss term for real audio `x` and its mel `s`.
    pub fn loss_graph(&self, g: &mut Graph, x: &Waveform, s: &Tensor) -> Result<VocoderLossNodes, VocoderError> {
        self.check_mel(s)?;
        let hop = self.config.mel.hop_size;
        if x.len() != s.rows * hop {
            return Err(VocoderError::FrameMismatch { samples: x.len(), frames: s.rows, hop });
        }
        let target_mel = mel_spectrogram(x, &self.config.mel)?.frames;
        let m = g.constant(s.clone());
        let fake = self.generator.forward(g, &self.store, m);
        let real = g.constant(x.to_column());
        let real_feats = self.discriminators.forward(g, &self.store, real);
        let fake_feats = self.discriminators.forward(g, &self.store, fake);
        let (cfg_fm, cfg_mel) = (self.config.lambda_fm, self.config.lambda_mel);
        let mut adv_g = Vec::new();
        let mut adv_d = Vec::new();
        let mut fm = Vec::new();
        let mut l_g = g.constant(Tensor::scalar(0.0));
        let mut l_d = g.constant(Tensor::scalar(0.0));
        for (rf, ff) in real_feats.iter().zip(&fake_feats) {
            let (rs, fs) = (*rf.last().unwrap(), *ff.last().unwrap());
            let ag = adv_loss_g_graph(g, fs);
            let ad = adv_loss_d_graph(g, rs, fs);
            let f = feature_matching_graph(g, rf, ff);
            let weighted = g.scale(f, cfg_fm);
            let term = g.add(ag, weighted);
            l_g = g.add(l_g, term);
            l_d = g.add(l_d, ad);
            adv_g.push(ag);
            adv_d.push(ad);
            fm.push(f);
        }
        let mel = mel_loss_graph(g, &target_mel, fake, &self.basis);
        let weighted = g.scale(mel, cfg_mel);
        let l_g = g.add(l_g, weighted);
        Ok(VocoderLossNodes { adv_g, adv_d, fm, mel, l_g, l_d, wave: fake })
    }

    pub fn losses(&self, x: &Waveform, s: &Tensor) -> Result<VocoderLossBreakdown, VocoderError> {
        let mut g = Graph::inference();
        let n = self.loss_graph(&mut g, x, s)?;
        let vals = |v: &[Var]| v.iter().map(|&x| g.scalar(x)).collect::<Vec<_>>();
        Ok(VocoderLossBreakdown::new(
            vals(&n.adv_g),
            vals(&n.adv_d),
            vals(&n.fm),
            g.scalar(n.mel),
            self.config.lambda_fm,
            self.config.lambda_mel,
        ))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VocoderError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut model = Self::new(ck.meta_as()?)?;
        model.store.load_from(&ck.params).map_err(|e| VocoderError::Checkpoint(CheckpointError::Meta(e)))?;
        Ok(model)
    }
}

/// Full-length paired audio and its log-mel.
#[derive(Debug, Clone)]
pub struct VocoderItem {
    pub waveform: Waveform,
    pub mel: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VocoderTrainLog {
    pub generator: Vec<f64>,
    pub discriminator: Vec<f64>,
    pub mel: Vec<f64>,
    /// Generated sample count on each step's segment.
    pub output_samples: Vec<usize>,
}

/// Random aligned crop: mel rows `[a, a+n)` and samples `[a·hop, (a+n)·hop)`.
fn crop<R: Rng + ?Sized>(item: &VocoderItem, frames: usize, hop: usize, rng: &mut R) -> (Waveform, Tensor) {
    let max_start = (item.mel.rows - frames).min(item.waveform.len() / hop - frames);
    let a = rng.gen_range(0..=max_start);
    let w = Waveform::new(item.waveform.samples[a * hop..(a + frames) * hop].to_vec(), item.waveform.sample_rate);
    (w, item.mel.slice_rows(a, a + frames))
}

/// Alternating discriminator and generator updates on random segments.
pub fn train_vocoder(items: &[VocoderItem], config: &VocoderConfig) -> Result<(Vocoder, VocoderTrainLog), VocoderError> {
    if items.is_empty() {
        return Err(VocoderError::EmptyManifest);
    }
    let mut model = Vocoder::new(config.clone())?;
    let hop = config.mel.hop_size;
    let frames = config.segment_frames;
    let usable: Vec<&VocoderItem> =
        items.iter().filter(|it| it.mel.rows >= frames && it.waveform.len() >= frames * hop).collect();
    if usable.is_empty() {
        return Err(VocoderError::TooShort(frames));
    }
    let gen_ids = model.generator_params();
    let disc_ids = model.discriminator_params();
    let mut opt_g = Adam::new(&model.store, config.learning_rate);
    let mut opt_d = Adam::new(&model.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(29));
    let mut log = VocoderTrainLog::default();
    let only = |grads: Vec<Option<Tensor>>, keep: &[ParamId]| -> Vec<Option<Tensor>> {
        grads.into_iter().enumerate().map(|(i, g)| if keep.contains(&i) { g } else { None }).collect()
    };
    for step in 0..config.steps {
        let item = usable[rng.gen_range(0..usable.len())];
        let (x, s) = crop(item, frames, hop, &mut rng);

        let mut g = Graph::new();
        let nodes = model.loss_graph(&mut g, &x, &s)?;
        let l_d = g.scalar(nodes.l_d);
        let grads = only(g.backward(nodes.l_d).params(model.store.len()), &disc_ids);
        opt_d.step(&mut model.store, &grads);

        let mut g = Graph::new();
        let nodes = model.loss_graph(&mut g, &x, &s)?;
        let (l_g, mel) = (g.scalar(nodes.l_g), g.scalar(nodes.mel));
        log.output_samples.push(g.value(nodes.wave).rows);
        let grads = only(g.backward(nodes.l_g).params(model.store.len()), &gen_ids);
        opt_g.step(&mut model.store, &grads);

        log::debug!("vocoder step {step}: L_G {l_g:.4} L_D {l_d:.4} mel {mel:.4}");
        log.generator.push(l_g);
        log.discriminator.push(l_d);
        log.mel.push(mel);
    }
    Ok((model, log))
}
