//! `clonetts clone`: reference audio + text → WAV in the reference voice.

use std::path::Path;

use anyhow::{anyhow, Context};
use clonetts_core::dsp::{mel_spectrogram, write_waveform, Waveform};
use clonetts_core::speaker::{SpeakerEmbedding, SpeakerEncoder};
use clonetts_core::synth::Synthesizer;
use clonetts_core::text::{Normalizer, OovPolicy, Vocab, UNK};
use clonetts_core::vocoder::Vocoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Settings;
use crate::preprocess::{load_audio, normalizer};
use crate::train::{load_speaker, load_synth, load_vocoder};
use crate::{Classify, CmdResult, Failure};

/// Shortest accepted reference recording.
pub const MIN_REFERENCE_SECS: f64 = 1.0;

/// The three trained models plus the text frontend.
pub struct CloneEngine {
    pub encoder: SpeakerEncoder,
    pub synth: Synthesizer,
    pub vocab: Vocab,
    pub vocoder: Vocoder,
    pub normalizer: Normalizer,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CloneReport {
    pub frames: usize,
    pub samples: usize,
    pub duration_secs: f64,
}

impl CloneEngine {
    pub fn load(settings: &Settings) -> CmdResult<Self> {
        let encoder = load_speaker(settings)?;
        let (synth, vocab) = load_synth(settings)?;
        let vocoder = load_vocoder(settings)?;
        if synth.config.mel_bins != vocoder.config.mel.mel_bins || encoder.config.mel_bins != synth.config.mel_bins {
            return Err(Failure::Data(anyhow!("checkpoints disagree on mel bins")));
        }
        Ok(Self { encoder, synth, vocab, vocoder, normalizer: normalizer(settings)?, temperature: settings.synth.temperature })
    }

    pub fn embed_reference(&self, path: &Path) -> CmdResult<SpeakerEmbedding> {
        let (_, wave) = load_audio(path).data()?;
        if wave.duration_secs() < MIN_REFERENCE_SECS {
            return Err(Failure::Data(anyhow!(
                "reference too short: {} is {:.2} s, need at least {MIN_REFERENCE_SECS} s",
                path.display(),
                wave.duration_secs()
            )));
        }
        let mel = mel_spectrogram(&wave, &self.vocoder.config.mel).data()?;
        self.encoder.embed_utterance(&mel.frames).data()
    }

    /// Text → waveform for one utterance (batch size 1).
    pub fn synthesize(&self, text: &str, speaker: &SpeakerEmbedding, seed: u64) -> CmdResult<(Waveform, usize)> {
        let normalized = self.normalizer.normalize(text).context("text normalization").data()?;
        let tokens = self.vocab.tokenize(&normalized, OovPolicy::MapToUnk).data()?;
        if tokens.ids.contains(&UNK) {
            log::warn!("{text:?}: tokens outside the training vocabulary were mapped to <unk>");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mel = self.synth.synthesize(&tokens, speaker, &mut rng, self.temperature).data()?;
        let wave = self.vocoder.generate(&mel).data()?;
        Ok((wave, mel.rows))
    }
}

pub fn cmd_clone(reference: &Path, text: &str, out: &Path, settings: &Settings) -> CmdResult<CloneReport> {
    let engine = CloneEngine::load(settings)?;
    let speaker = engine.embed_reference(reference)?;
    let (wave, frames) = engine.synthesize(text, &speaker, settings.seed)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string()).data()?;
    }
    write_waveform(out, &wave).data()?;
    Ok(CloneReport { frames, samples: wave.len(), duration_secs: wave.duration_secs() })
}
