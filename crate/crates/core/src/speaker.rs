//! Recurrent speaker encoder and the generalized end-to-end (GE2E) softmax loss.
//!
//! An utterance's log-mel frames run through a stacked LSTM. The last layer's
//! final hidden state is projected and L2-normalized into a
//! [`SpeakerEmbedding`]. Training pulls each utterance toward the centroid of
//! its own speaker (computed without that utterance) and away from the other
//! speakers' centroids.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::{Adam, Linear, Lstm};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "speaker-encoder";
const NORM_EPS: f64 = 1e-12;
/// Lower bound kept on the similarity scale `w`.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SpeakerError {
    #[error("utterance has {frames} frames, need at least {min}")]
    TooShort { frames: usize, min: usize },
    #[error("degenerate batch: {speakers} speakers x {utterances} utterances (need at least 2 x 2)")]
    DegenerateBatch { speakers: usize, utterances: usize },
    #[error("need at least 2 speakers with 2 utterances each, found {0} usable speakers")]
    InsufficientSpeakers(usize),
    #[error("mel has {found} bins, encoder expects {expected}")]
    MelBins { expected: usize, found: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Unit-norm speaker vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    pub vector: Vec<f64>,
}

impl SpeakerEmbedding {
    /// Normalizes `v` to unit length.
    pub fn from_raw(v: Vec<f64>) -> Self {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        Self { vector: v.into_iter().map(|x| x / n).collect() }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::from_vec(1, self.vector.len(), self.vector.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEncoderConfig {
    pub mel_bins: usize,
    pub hidden: usize,
    pub layers: usize,
    pub embed_dim: usize,
    /// Frames per training crop.
    pub partial_frames: usize,
    /// Shortest utterance accepted at inference.
    pub min_frames: usize,
    pub speakers_per_batch: usize,
    pub utterances_per_speaker: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub init_bias: f64,
}

impl Default for SpeakerEncoderConfig {
    fn default() -> Self {
        Self {
            mel_bins: 80,
            hidden: 256,
            layers: 3,
            embed_dim: 256,
            partial_frames: 160,
            min_frames: 40,
            speakers_per_batch: 4,
            utterances_per_speaker: 5,
            steps: 1000,
            learning_rate: 1e-3,
            seed: 0,
            init_scale: 10.0,
            init_bias: -5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    pub config: SpeakerEncoderConfig,
    pub store: ParamStore,
    lstm: Vec<Lstm>,
    proj: Linear,
    /// GE2E similarity scale `w` (kept positive).
    pub scale: ParamId,
    /// GE2E similarity bias `b`.
    pub bias: ParamId,
}

impl SpeakerEncoder {
    pub fn new(config: SpeakerEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let lstm = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { config.mel_bins } else { config.hidden };
                Lstm::new(&mut store, &format!("lstm{l}"), input, config.hidden, &mut rng)
            })
            .collect();
        let proj = Linear::new(&mut store, "proj", config.hidden, config.embed_dim, 1.0, &mut rng);
        let scale = store.add("ge2e.w", Tensor::scalar(config.init_scale));
        let bias = store.add("ge2e.b", Tensor::scalar(config.init_bias));
        Self { config, store, lstm, proj, scale, bias }
    }

    /// Raw (un-normalized) embeddings for equal-length mels, one row each.
    fn forward_raw(&self, g: &mut Graph, mels: &[&Tensor]) -> Var {
        let frames = mels[0].rows;
        let bins = mels[0].cols;
        let mut steps: Vec<Var> = (0..frames)
            .map(|t| {
                let mut x = Tensor::zeros(mels.len(), bins);
                for (b, m) in mels.iter().enumerate() {
                    x.row_mut(b).copy_from_slice(m.row(t));
                }
                g.constant(x)
            })
            .collect();
        for layer in &self.lstm {
            steps = layer.forward(g, &self.store, &steps);
        }
        let last = *steps.last().expect("at least one frame");
        self.proj.forward(g, &self.store, last)
    }

    /// Unit-norm embeddings for equal-length mels.
    pub fn forward(&self, g: &mut Graph, mels: &[&Tensor]) -> Var {
        let raw = self.forward_raw(g, mels);
        g.normalize_rows(raw, NORM_EPS)
    }

    pub fn embed_utterance(&self, mel: &Tensor) -> Result<SpeakerEmbedding, SpeakerError> {
        if mel.cols != self.config.mel_bins {
            return Err(SpeakerError::MelBins { expected: self.config.mel_bins, found: mel.cols });
        }
        if mel.rows < self.config.min_frames {
            return Err(SpeakerError::TooShort { frames: mel.rows, min: self.config.min_frames });
        }
        let mut g = Graph::inference();
        let e = self.forward(&mut g, &[mel]);
        Ok(SpeakerEmbedding::from_raw(g.value(e).data.clone()))
    }

    /// GE2E loss of a batch under the current parameters.
    pub fn ge2e_loss(&self, batch: &SpeakerBatch) -> Result<f64, SpeakerError> {
        let mut g = Graph::inference();
        let loss = self.loss_graph(&mut g, batch)?;
        Ok(g.scalar(loss))
    }

    /// GE2E loss node for `batch`, differentiable in every parameter.
    pub fn loss_graph(&self, g: &mut Graph, batch: &SpeakerBatch) -> Result<Var, SpeakerError> {
        batch.validate()?;
        let mels: Vec<&Tensor> = batch.utterances.iter().flatten().collect();
        let e = self.forward(g, &mels);
        let w = g.param(&self.store, self.scale);
        let b = g.param(&self.store, self.bias);
        Ok(ge2e_loss_graph(g, e, batch.speakers(), batch.per_speaker(), w, b))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, self.store.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SpeakerError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut model = Self::new(ck.meta_as()?);
        model.store.load_from(&ck.params).map_err(|e| SpeakerError::Checkpoint(CheckpointError::Meta(e)))?;
        Ok(model)
    }
}

/// `N` speakers × `M` utterances, every mel cropped to the same length.
#[derive(Debug, Clone)]
pub struct SpeakerBatch {
    pub utterances: Vec<Vec<Tensor>>,
}

impl SpeakerBatch {
    pub fn speakers(&self) -> usize {
        self.utterances.len()
    }

    pub fn per_speaker(&self) -> usize {
        self.utterances.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), SpeakerError> {
        let (n, m) = (self.speakers(), self.per_speaker());
        if n < 2 || m < 2 || self.utterances.iter().any(|u| u.len() != m) {
            return Err(SpeakerError::DegenerateBatch { speakers: n, utterances: m });
        }
        Ok(())
    }
}

/// GE2E softmax loss over embeddings ordered speaker-major
/// (row `j * m + i` is utterance `i` of speaker `j`).
///
/// Similarities are `w * cos + b`; the positive similarity of an utterance
/// uses its speaker's centroid with that utterance left out. The result is
/// the mean cross-entropy over all `n * m` rows.
pub fn ge2e_loss_graph(g: &mut Graph, emb: Var, n: usize, m: usize, w: Var, b: Var) -> Var {
    assert!(n >= 2 && m >= 2, "GE2E needs at least 2 speakers x 2 utterances");
    assert_eq!(g.value(emb).rows, n * m, "embedding rows must be n*m");
    let mut avg = Tensor::zeros(n, n * m);
    let mut own = Tensor::zeros(n * m, n);
    for j in 0..n {
        for i in 0..m {
            avg.set(j, j * m + i, 1.0 / m as f64);
            own.set(j * m + i, j, 1.0);
        }
    }
    let not_own = own.map(|x| 1.0 - x);
    let avg = g.constant(avg);
    let own = g.constant(own);
    let not_own = g.constant(not_own);

    let centroids = g.matmul(avg, emb);
    let repeated = g.matmul(own, centroids);
    let scaled = g.scale(repeated, m as f64 / (m - 1) as f64);
    let self_part = g.scale(emb, 1.0 / (m - 1) as f64);
    let exclusive = g.sub(scaled, self_part);

    let e_n = g.normalize_rows(emb, NORM_EPS);
    let c_n = g.normalize_rows(centroids, NORM_EPS);
    let x_n = g.normalize_rows(exclusive, NORM_EPS);

    let c_t = g.transpose(c_n);
    let cos_all = g.matmul(e_n, c_t);
    let pos_prod = g.mul(e_n, x_n);
    let pos = g.row_sum(pos_prod);
    let pos = g.broadcast_cols(pos, n);
    let others = g.mul(cos_all, not_own);
    let pos = g.mul(pos, own);
    let cos = g.add(others, pos);

    let logits = g.scale_var(cos, w);
    let logits = g.add_scalar_var(logits, b);
    let lse = g.logsumexp_rows(logits);
    let target = g.mul(logits, own);
    let target = g.row_sum(target);
    let per_row = g.sub(lse, target);
    g.mean(per_row)
}

/// GE2E loss of fixed embeddings (`n * m × D`) with fixed `w`, `b`.
pub fn ge2e_loss_from_embeddings(emb: &Tensor, n: usize, m: usize, w: f64, b: f64) -> f64 {
    let mut g = Graph::inference();
    let e = g.constant(emb.clone());
    let w = g.constant(Tensor::scalar(w));
    let b = g.constant(Tensor::scalar(b));
    let l = ge2e_loss_graph(&mut g, e, n, m, w, b);
    g.scalar(l)
}

/// One training utterance.
#[derive(Debug, Clone)]
pub struct SpeakerUtterance {
    pub speaker: String,
    pub mel: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SpeakerTrainLog {
    pub losses: Vec<f64>,
}

/// Trains from scratch with the configured seed.
pub fn train_speaker_encoder(
    utterances: &[SpeakerUtterance],
    config: &SpeakerEncoderConfig,
) -> Result<(SpeakerEncoder, SpeakerTrainLog), SpeakerError> {
    let mut by_speaker: std::collections::BTreeMap<&str, Vec<&Tensor>> = Default::default();
    for u in utterances {
        if u.mel.cols != config.mel_bins {
            return Err(SpeakerError::MelBins { expected: config.mel_bins, found: u.mel.cols });
        }
        by_speaker.entry(u.speaker.as_str()).or_default().push(&u.mel);
    }
    let pools: Vec<Vec<&Tensor>> = by_speaker.into_values().filter(|v| v.len() >= 2).collect();
    if pools.len() < 2 {
        return Err(SpeakerError::InsufficientSpeakers(pools.len()));
    }
    let n = config.speakers_per_batch.clamp(2, pools.len());
    let m = pools.iter().map(Vec::len).min().unwrap().min(config.utterances_per_speaker).max(2);

    let mut model = SpeakerEncoder::new(config.clone());
    let mut opt = Adam::new(&model.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut log = SpeakerTrainLog::default();
    let speaker_ids: Vec<usize> = (0..pools.len()).collect();
    for step in 0..config.steps {
        let chosen: Vec<usize> = speaker_ids.choose_multiple(&mut rng, n).copied().collect();
        let picks: Vec<Vec<&Tensor>> =
            chosen.iter().map(|&s| pools[s].choose_multiple(&mut rng, m).copied().collect()).collect();
        let shortest = picks.iter().flatten().map(|t| t.rows).min().unwrap();
        let len = config.partial_frames.min(shortest);
        let batch = SpeakerBatch {
            utterances: picks
                .iter()
                .map(|us| {
                    us.iter()
                        .map(|mel| {
                            let start = rng.gen_range(0..=mel.rows - len);
                            mel.slice_rows(start, start + len)
                        })
                        .collect()
                })
                .collect(),
        };
        let mut g = Graph::new();
        let loss = model.loss_graph(&mut g, &batch)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss).params(model.store.len());
        opt.step(&mut model.store, &grads);
        let w = model.store.get_mut(model.scale);
        w.data[0] = w.data[0].max(MIN_SCALE);
        log::debug!("speaker step {step}: ge2e {value:.6}");
        log.losses.push(value);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain-loop GE2E for tiny batches.
    fn ge2e_oracle(e: &[Vec<f64>], n: usize, m: usize, w: f64, b: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let cos = |a: &[f64], b: &[f64]| dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
        let d = e[0].len();
        let mut total = 0.0;
        for j in 0..n {
            for i in 0..m {
                let eji = &e[j * m + i];
                let mut logits = Vec::new();
                for k in 0..n {
                    let mut c = vec![0.0; d];
                    let mut cnt = 0.0;
                    for l in 0..m {
                        if k == j && l == i {
                            continue;
                        }
                        for (ci, x) in c.iter_mut().zip(&e[k * m + l]) {
                            *ci += x;
                        }
                        cnt += 1.0;
                    }
                    for ci in &mut c {
                        *ci /= cnt;
                    }
                    logits.push(w * cos(eji, &c) + b);
                }
                let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
                total += lse - logits[j];
            }
        }
        total / (n * m) as f64
    }

    #[test]
    fn hand_example_two_by_two() {
        let rows = vec![vec![1.0, 0.2], vec![0.8, 0.6], vec![-0.3, 1.0], vec![0.1, 0.9]];
        let t = Tensor::from_rows(&rows);
        let got = ge2e_loss_from_embeddings(&t, 2, 2, 3.0, -1.0);
        assert!((got - ge2e_oracle(&rows, 2, 2, 3.0, -1.0)).abs() < 1e-6);
        // hand evaluation: exclusive centroids are the other utterance of the
        // same speaker; c0 = (0.9, 0.4), c1 = (-0.1, 0.95)
        let cos = |a: [f64; 2], b: [f64; 2]| {
            (a[0] * b[0] + a[1] * b[1]) / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt())
        };
        let (e00, e01, e10, e11) = ([1.0, 0.2], [0.8, 0.6], [-0.3, 1.0], [0.1, 0.9]);
        let (c0, c1) = ([0.9, 0.4], [-0.1, 0.95]);
        let row = |pos: f64, neg: f64| {
            let (sp, sn) = (3.0 * pos - 1.0, 3.0 * neg - 1.0);
            (sp.exp() + sn.exp()).ln() - sp
        };
        let hand = (row(cos(e00, e01), cos(e00, c1))
            + row(cos(e01, e00), cos(e01, c1))
            + row(cos(e10, e11), cos(e10, c0))
            + row(cos(e11, e10), cos(e11, c0)))
            / 4.0;
        assert!((got - hand).abs() < 1e-6, "{got} vs {hand}");
    }

    #[test]
    fn one_hot_batch_is_at_analytic_value_and_beats_random() {
        let (w, b) = (10.0, -5.0);
        let d = SpeakerEncoderConfig::default().embed_dim;
        let mut rows = vec![vec![0.0; d]; 4];
        rows[0][0] = 1.0;
        rows[1][0] = 1.0;
        rows[2][1] = 1.0;
        rows[3][1] = 1.0;
        let onehot = ge2e_loss_from_embeddings(&Tensor::from_rows(&rows), 2, 2, w, b);
        // every row: positive cos 1, negative cos 0
        let analytic = (1.0 + (-w as f64).exp()).ln();
        assert!((onehot - analytic).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = Tensor::randn(4, d, 1.0, &mut rng);
            let l = ge2e_loss_from_embeddings(&r, 2, 2, w, b);
            assert!(l >= 0.0);
            assert!(onehot <= l);
        }
    }

    #[test]
    fn degenerate_batches_rejected() {
        let model = SpeakerEncoder::new(SpeakerEncoderConfig { mel_bins: 4, hidden: 4, layers: 1, embed_dim: 3, ..Default::default() });
        let one = SpeakerBatch { utterances: vec![vec![Tensor::zeros(5, 4), Tensor::zeros(5, 4)]] };
        assert!(matches!(model.ge2e_loss(&one), Err(SpeakerError::DegenerateBatch { .. })));
        let thin = SpeakerBatch { utterances: vec![vec![Tensor::zeros(5, 4)], vec![Tensor::zeros(5, 4)]] };
        assert!(matches!(model.ge2e_loss(&thin), Err(SpeakerError::DegenerateBatch { .. })));
    }

    #[test]
    fn embedding_contract() {
        let cfg = SpeakerEncoderConfig { mel_bins: 6, hidden: 8, layers: 2, embed_dim: 5, min_frames: 10, ..Default::default() };
        let model = SpeakerEncoder::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let short = Tensor::randn(9, 6, 1.0, &mut rng);
        assert!(matches!(model.embed_utterance(&short), Err(SpeakerError::TooShort { frames: 9, min: 10 })));
        for len in [10, 33, 70] {
            let mel = Tensor::randn(len, 6, 1.0, &mut rng);
            let e = model.embed_utterance(&mel).unwrap();
            assert_eq!(e.dim(), 5);
            let norm = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert_eq!(model.embed_utterance(&mel).unwrap(), e);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = SpeakerEncoderConfig { mel_bins: 4, hidden: 4, layers: 1, embed_dim: 3, min_frames: 2, ..Default::default() };
        let model = SpeakerEncoder::new(cfg);
        let back = SpeakerEncoder::from_checkpoint(&Checkpoint::from_bytes(&model.checkpoint().to_bytes()).unwrap()).unwrap();
        let mel = Tensor::filled(6, 4, 0.3);
        assert_eq!(back.embed_utterance(&mel).unwrap(), model.embed_utterance(&mel).unwrap());
    }

    #[test]
    fn ge2e_passes_gradient_check() {
        let cfg = SpeakerEncoderConfig { mel_bins: 5, hidden: 6, layers: 2, embed_dim: 4, ..Default::default() };
        let model = SpeakerEncoder::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let batch = SpeakerBatch {
            utterances: (0..3).map(|_| (0..3).map(|_| Tensor::randn(7, 5, 1.0, &mut rng)).collect()).collect(),
        };
        let mut g = Graph::new();
        let loss = model.loss_graph(&mut g, &batch).unwrap();
        let grads = g.backward(loss).params_dense(&model.store);
        let coords = crate::gradcheck::sample_coords(&model.store, 120, None, &mut rng);
        let report = crate::gradcheck::check_params(&model.store, &grads, &coords, 1e-6, 1e-6, |s| {
            let mut probe = model.clone();
            probe.store = s.clone();
            probe.ge2e_loss(&batch).unwrap()
        });
        assert!(report.checked >= 100);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn needs_two_speakers() {
        let cfg = SpeakerEncoderConfig { mel_bins: 4, hidden: 4, layers: 1, embed_dim: 3, steps: 1, ..Default::default() };
        let utts: Vec<_> = (0..4).map(|_| SpeakerUtterance { speaker: "a".into(), mel: Tensor::zeros(8, 4) }).collect();
        assert!(matches!(train_speaker_encoder(&utts, &cfg), Err(SpeakerError::InsufficientSpeakers(1))));
    }
}
