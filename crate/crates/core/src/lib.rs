//! Mandarin voice cloning: a speaker encoder, a non-autoregressive VAE
//! synthesizer with a normalizing-flow prior, GAN vocoder losses, corpus
//! quality control and listening-test evaluation.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod dsp;
pub mod eval;
pub mod gradcheck;
pub mod listen;
pub mod nn;
pub mod speaker;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod toy;
pub mod vocoder;

pub use autograd::{Graph, ParamStore, Var};
pub use checkpoint::Checkpoint;
pub use dataset::{ManifestEntry, QcStatus, UtteranceRecord};
pub use dsp::{MelConfig, MelSpectrogram, Waveform};
pub use eval::{AbResult, AbVote, MosSummary, RatingRecord, RtfReport};
pub use speaker::{SpeakerEmbedding, SpeakerEncoder, SpeakerEncoderConfig};
pub use synth::{SynthConfig, Synthesizer};
pub use tensor::Tensor;
pub use text::{NormalizedText, Normalizer, TokenSequence, Vocab};
pub use vocoder::{Vocoder, VocoderConfig};
