//! `clonetts train {speaker|synth|vocoder}`.

use std::path::Path;

use anyhow::{anyhow, Context};
use clonetts_core::checkpoint::Checkpoint;
use clonetts_core::dataset::{load_manifest, ManifestEntry};
use clonetts_core::dsp::MelSpectrogram;
use clonetts_core::speaker::{train_speaker_encoder, SpeakerEncoder, SpeakerUtterance};
use clonetts_core::synth::{train_synthesizer, SynthConfig, SynthItem, SynthTrainOptions, Synthesizer};
use clonetts_core::text::{NormalizedText, OovPolicy, Vocab};
use clonetts_core::vocoder::{train_vocoder, Vocoder, VocoderItem};
use serde::Serialize;

use crate::config::Settings;
use crate::preprocess::load_audio;
use crate::{Classify, CmdResult, Component, Failure};

/// Key under which the resolved run config is embedded in checkpoint metadata.
pub const RUN_CONFIG_KEY: &str = "run_config";

/// Manifest entries with their cached mels, in manifest order.
pub fn load_corpus(settings: &Settings) -> CmdResult<Vec<(ManifestEntry, MelSpectrogram)>> {
    let entries = load_manifest(&settings.manifest).data()?;
    if entries.is_empty() {
        return Err(Failure::Data(anyhow!("manifest {} has no entries", settings.manifest.display())));
    }
    entries
        .into_iter()
        .map(|e| {
            let path = settings.mel_dir.join(format!("{}.mel", e.id));
            let mel = MelSpectrogram::load(&path).with_context(|| format!("mel for {}", e.id)).data()?;
            Ok((e, mel))
        })
        .collect()
}

pub fn save_checkpoint(mut ck: Checkpoint, path: &Path, settings: &Settings) -> CmdResult {
    if let serde_json::Value::Object(meta) = &mut ck.meta {
        meta.insert(RUN_CONFIG_KEY.into(), settings.echo.clone().into());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string()).data()?;
    }
    ck.save(path).data()
}

fn write_log<L: Serialize>(log: &L, component: &str, settings: &Settings) -> CmdResult {
    #[derive(Serialize)]
    struct Stamped<'a, L> {
        run_config: &'a str,
        log: &'a L,
    }
    let path = settings.checkpoint_dir.join(format!("{component}.log.json"));
    let body = serde_json::to_string(&Stamped { run_config: &settings.echo, log }).expect("training log serializes");
    std::fs::write(&path, body).with_context(|| path.display().to_string()).data()
}

fn load_checkpoint(path: &Path, what: &str) -> CmdResult<Checkpoint> {
    if !path.exists() {
        return Err(Failure::Data(anyhow!("{what} checkpoint required: {} not found", path.display())));
    }
    Checkpoint::load(path).with_context(|| format!("{what} checkpoint")).data()
}

pub fn load_speaker(settings: &Settings) -> CmdResult<SpeakerEncoder> {
    SpeakerEncoder::from_checkpoint(&load_checkpoint(&settings.checkpoint("speaker"), "speaker")?).data()
}

pub fn load_synth(settings: &Settings) -> CmdResult<(Synthesizer, Vocab)> {
    Synthesizer::from_checkpoint(&load_checkpoint(&settings.checkpoint("synth"), "synth")?).data()
}

pub fn load_vocoder(settings: &Settings) -> CmdResult<Vocoder> {
    Vocoder::from_checkpoint(&load_checkpoint(&settings.checkpoint("vocoder"), "vocoder")?).data()
}

pub fn cmd_train(component: Component, settings: &Settings) -> CmdResult {
    match component {
        Component::Speaker => train_speaker(settings),
        Component::Synth => train_synth(settings),
        Component::Vocoder => train_vocoder_cmd(settings),
    }
}

fn train_speaker(settings: &Settings) -> CmdResult {
    let corpus = load_corpus(settings)?;
    let utts: Vec<SpeakerUtterance> =
        corpus.into_iter().map(|(e, mel)| SpeakerUtterance { speaker: e.speaker, mel: mel.frames }).collect();
    let (model, log) = train_speaker_encoder(&utts, &settings.speaker).data()?;
    save_checkpoint(model.checkpoint(), &settings.checkpoint("speaker"), settings)?;
    write_log(&log, "speaker", settings)?;
    println!("speaker encoder: {} steps, final GE2E {:.4}", log.losses.len(), log.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train_synth(settings: &Settings) -> CmdResult {
    let encoder = load_speaker(settings)?;
    let corpus = load_corpus(settings)?;
    let texts: Vec<NormalizedText> = corpus.iter().map(|(e, _)| NormalizedText::from_spaced(&e.text)).collect();
    let vocab = Vocab::build(&texts).data()?;
    let items = corpus
        .iter()
        .zip(&texts)
        .map(|((e, mel), text)| {
            let speaker = encoder.embed_utterance(&mel.frames).with_context(|| format!("embedding {}", e.id)).data()?;
            let tokens = vocab.tokenize(text, OovPolicy::Strict).data()?;
            Ok(SynthItem { tokens, mel: mel.frames.clone(), speaker })
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let config = SynthConfig { vocab_size: vocab.len(), speaker_dim: encoder.config.embed_dim, ..settings.synth.clone() };
    if let Some(dir) = &settings.attention_dir {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string()).data()?;
    }
    let options = SynthTrainOptions { attention_dir: settings.attention_dir.as_deref(), attention_every: settings.attention_every };
    let (model, log) = train_synthesizer(&items, &config, &options).data()?;
    save_checkpoint(model.checkpoint(&vocab), &settings.checkpoint("synth"), settings)?;
    write_log(&log, "synth", settings)?;
    let last = log.steps.last().map_or(f64::NAN, |s| s.loss.total);
    println!("synthesizer: {} steps, final loss {last:.4}", log.steps.len());
    Ok(())
}

fn train_vocoder_cmd(settings: &Settings) -> CmdResult {
    let corpus = load_corpus(settings)?;
    let items = corpus
        .into_iter()
        .map(|(e, mel)| {
            let (_, waveform) = load_audio(&settings.workdir.join(&e.audio_path)).data()?;
            Ok(VocoderItem { waveform, mel: mel.frames })
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let (model, log) = train_vocoder(&items, &settings.vocoder).data()?;
    save_checkpoint(model.checkpoint(), &settings.checkpoint("vocoder"), settings)?;
    write_log(&log, "vocoder", settings)?;
    println!("vocoder: {} steps, final mel L1 {:.4}", log.mel.len(), log.mel.last().copied().unwrap_or(f64::NAN));
    Ok(())
}
