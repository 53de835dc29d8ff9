//! `clonetts preprocess`: transcripts + WAVs → QC'd records, manifest, mel cache.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clonetts_core::dataset::{
    qc_check, records_to_jsonl, write_manifest, AsrClient, HttpAsrClient, MockAsr, QcConfig, QcStatus, UtteranceRecord,
};
use clonetts_core::dsp::{decode_wav, mel_spectrogram, resample, Waveform, PIPELINE_RATE};
use clonetts_core::text::{Lexicon, Normalizer};

use crate::config::{AsrMode, Settings};
use crate::{Classify, CmdResult, Failure};

/// Extension appended to the manifest path for its config sidecar.
pub const SIDECAR_SUFFIX: &str = ".run.cfg";

pub fn normalizer(settings: &Settings) -> CmdResult<Normalizer> {
    let lexicon = match &settings.lexicon {
        Some(p) => Lexicon::load(p).data()?,
        None => Lexicon::builtin(),
    };
    Ok(Normalizer::new(lexicon))
}

/// Parses `id<TAB>speaker<TAB>text[<TAB>scenario[<TAB>emotion]]` lines.
pub fn parse_transcripts(text: &str, audio_dir: &str) -> anyhow::Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if !(3..=5).contains(&fields.len()) {
            return Err(anyhow!("line {}: expected id, speaker, text[, scenario[, emotion]] separated by tabs", i + 1));
        }
        let mut rec = UtteranceRecord::new(fields[0], format!("{audio_dir}/{}.wav", fields[0]), fields[2], fields[1]);
        let tag = |k: usize| fields.get(k).filter(|s| !s.is_empty()).map(|s| s.to_string());
        rec.scenario = tag(3);
        rec.emotion = tag(4);
        out.push(rec);
    }
    Ok(out)
}

/// Reads a WAV of any rate and brings it to the pipeline rate.
pub fn load_audio(path: &Path) -> anyhow::Result<(Vec<u8>, Waveform)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let wave = decode_wav(Cursor::new(&bytes), &path.display().to_string())?;
    let wave = if wave.sample_rate == PIPELINE_RATE { wave } else { resample(&wave, PIPELINE_RATE) };
    Ok((bytes, wave))
}

pub fn cmd_preprocess(settings: &Settings) -> CmdResult {
    let text = std::fs::read_to_string(&settings.transcripts)
        .with_context(|| format!("reading transcripts {}", settings.transcripts.display()))
        .data()?;
    let audio_dir = settings.raw_dir.strip_prefix(&settings.workdir).unwrap_or(&settings.raw_dir).display().to_string();
    let records = parse_transcripts(&text, &audio_dir)
        .with_context(|| settings.transcripts.display().to_string())
        .data()?;
    let normalizer = normalizer(settings)?;
    std::fs::create_dir_all(&settings.mel_dir).with_context(|| settings.mel_dir.display().to_string()).data()?;

    // Decode and cache mels; unreadable audio is recorded as removed.
    let mut audio: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut staged = Vec::with_capacity(records.len());
    for rec in records {
        let path = settings.workdir.join(&rec.audio_path);
        let mel = load_audio(&path).and_then(|(bytes, wave)| {
            let mel = mel_spectrogram(&wave, &settings.mel)?;
            Ok((bytes, mel))
        });
        match mel {
            Ok((bytes, mel)) => {
                let mel_path = settings.mel_dir.join(format!("{}.mel", rec.id));
                mel.save(&mel_path).data()?;
                audio.insert(rec.id.clone(), bytes);
                staged.push(rec);
            }
            Err(e) => {
                log::warn!("{}: {e:#}", rec.id);
                staged.push(rec.removed(format!("unreadable audio: {e:#}")));
            }
        }
    }

    let asr: Box<dyn AsrClient> = match settings.asr {
        AsrMode::Transcript => {
            let mut mock = MockAsr::new();
            for rec in &staged {
                if let Some(bytes) = audio.get(&rec.id) {
                    mock = mock.with_response(bytes, Ok(rec.raw_text.clone()));
                }
            }
            Box::new(mock)
        }
        AsrMode::Http => {
            let client = match &settings.asr_url {
                Some(url) => HttpAsrClient::new(url.clone(), Duration::from_secs(settings.asr_timeout_secs)),
                None => HttpAsrClient::from_env()
                    .ok_or_else(|| anyhow!("asr = http needs asr_url or {}", clonetts_core::dataset::ASR_URL_ENV))
                    .usage()?,
            };
            Box::new(client.external()?)
        }
    };
    let qc = QcConfig { cer_threshold: settings.cer_threshold, root: settings.workdir.clone() };
    let mut checked = Vec::with_capacity(staged.len());
    for rec in &staged {
        let out = match qc_check(rec, &normalizer, asr.as_ref(), &qc) {
            Ok(out) => out,
            Err(clonetts_core::dataset::DatasetError::Text { reason, .. }) => rec.clone().removed(format!("text normalization: {reason}")),
            Err(e) => return Err(Failure::Data(e.into())),
        };
        checked.push(out);
    }

    std::fs::write(&settings.records, records_to_jsonl(&checked)).with_context(|| settings.records.display().to_string()).data()?;
    let lines = write_manifest(&checked, &settings.manifest).data()?;
    let sidecar = format!("{}{SIDECAR_SUFFIX}", settings.manifest.display());
    std::fs::write(&sidecar, &settings.echo).with_context(|| sidecar.clone()).data()?;

    let count = |s: QcStatus| checked.iter().filter(|r| r.qc_status == s).count();
    println!(
        "{} records: {} pass, {} mismatch, {} removed, {} pending; manifest has {lines} entries",
        checked.len(),
        count(QcStatus::Pass),
        count(QcStatus::Mismatch),
        count(QcStatus::Removed),
        count(QcStatus::Pending),
    );
    let stuck = checked.iter().filter(|r| r.qc_status == QcStatus::Pending && r.retry_count > 0).count();
    if stuck > 0 {
        return Err(Failure::External(anyhow!("{stuck} records left pending: speech recognizer unavailable")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcript_lines() {
        let recs = parse_transcripts("# c\na\tspk\t123\nb\tspk\tvip\tWhisper\tcalm\n", "raw").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].audio_path, "raw/a.wav");
        assert_eq!(recs[0].scenario, None);
        assert_eq!(recs[1].scenario.as_deref(), Some("Whisper"));
        assert_eq!(recs[1].emotion.as_deref(), Some("calm"));
        let err = parse_transcripts("a\tb\n", "raw").unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
