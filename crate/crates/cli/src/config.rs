//! Run configuration: a flat `key = value` table with defaults, loaded from a
//! file and overridden with `--set`, then resolved into typed settings
//! before any stage runs. The resolved table is echoed into every artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clonetts_core::dsp::MelConfig;
use clonetts_core::listen::PlanConfig;
use clonetts_core::speaker::SpeakerEncoderConfig;
use clonetts_core::synth::SynthConfig;
use clonetts_core::vocoder::VocoderConfig;

/// Every accepted key with its default.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("raw_dir", "raw"),
    ("transcripts", "transcripts.tsv"),
    ("manifest", "manifest.jsonl"),
    ("records", "records.jsonl"),
    ("mel_dir", "mels"),
    ("checkpoint_dir", "checkpoints"),
    ("lexicon", ""),
    ("asr", "transcript"),
    ("asr_url", ""),
    ("asr_timeout_secs", "30"),
    ("cer_threshold", "0.1"),
    ("mel.fft_size", "1024"),
    ("mel.hop_size", "256"),
    ("mel.win_size", "1024"),
    ("mel.bins", "80"),
    ("mel.fmin", "0"),
    ("mel.fmax", "8000"),
    ("speaker.hidden", "256"),
    ("speaker.layers", "3"),
    ("speaker.embed_dim", "256"),
    ("speaker.partial_frames", "160"),
    ("speaker.min_frames", "40"),
    ("speaker.speakers_per_batch", "4"),
    ("speaker.utterances_per_speaker", "5"),
    ("speaker.steps", "1000"),
    ("speaker.learning_rate", "0.001"),
    ("synth.base_dim", "256"),
    ("synth.latent_dim", "128"),
    ("synth.hidden", "256"),
    ("synth.flow_steps", "4"),
    ("synth.max_log_scale", "2"),
    ("synth.self_attention", "true"),
    ("synth.alpha_max", "0.001"),
    ("synth.alpha_warmup_steps", "1000"),
    ("synth.beta", "1"),
    ("synth.reduction_factors", "4,3,2,1"),
    ("synth.reduction_boundaries", "2000,4000,6000"),
    ("synth.steps", "8000"),
    ("synth.batch_size", "4"),
    ("synth.learning_rate", "0.001"),
    ("synth.temperature", "0.667"),
    ("synth.attention_dir", ""),
    ("synth.attention_every", "500"),
    ("vocoder.upsample_factors", "8,8,4"),
    ("vocoder.channels", "64,32,16"),
    ("vocoder.kernel", "7"),
    ("vocoder.discriminators", "2"),
    ("vocoder.disc_channels", "16"),
    ("vocoder.disc_kernel", "5"),
    ("vocoder.lambda_fm", "2"),
    ("vocoder.lambda_mel", "45"),
    ("vocoder.segment_frames", "16"),
    ("vocoder.steps", "2000"),
    ("vocoder.learning_rate", "0.001"),
    ("bench.runs", "10"),
    ("bench.test_set", "test_set.txt"),
    ("bench.reference", "reference.wav"),
    ("bench.stub_rtf", "0.05"),
    ("bench.output", "rtf_report.json"),
    ("listen.addr", "127.0.0.1:8080"),
    ("listen.plan", ""),
    ("listen.audio_dir", "listen/audio"),
    ("listen.data_dir", "listen/data"),
    ("listen.mos_system", "CV2TTS-VAENAR"),
    ("listen.ab_systems", "CV2TTS-VAENAR,CV2TTS"),
    ("report.ratings", "ratings.jsonl"),
    ("report.output", "report.txt"),
];

/// Unresolved key/value table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown config key {key:?}"),
        }
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("override {kv:?} is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies a config file: `key = value` lines, `#` comments.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{origin}:{}: expected key = value", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key {key} has no default"))
    }

    /// Sorted `key = value` lines.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn resolve(&self, workdir: &Path) -> Result<Settings> {
        Settings::from_config(self, workdir)
    }
}

fn parse<T: FromStr>(cfg: &RunConfig, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = cfg.get(key);
    raw.parse().map_err(|e| anyhow!("config {key} = {raw:?}: {e}"))
}

fn parse_list(cfg: &RunConfig, key: &str) -> Result<Vec<usize>> {
    let raw = cfg.get(key);
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| anyhow!("config {key} = {raw:?}: {e}")))
        .collect()
}

fn optional(cfg: &RunConfig, key: &str) -> Option<String> {
    Some(cfg.get(key).to_string()).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsrMode {
    /// Trust the corpus transcripts: the recognizer echoes each utterance's own text.
    Transcript,
    Http,
}

/// Fully resolved settings; paths are joined onto the work directory.
#[derive(Debug, Clone)]
pub struct Settings {
    pub workdir: PathBuf,
    pub seed: u64,
    pub raw_dir: PathBuf,
    pub transcripts: PathBuf,
    pub manifest: PathBuf,
    pub records: PathBuf,
    pub mel_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub asr: AsrMode,
    pub asr_url: Option<String>,
    pub asr_timeout_secs: u64,
    pub cer_threshold: f64,
    pub mel: MelConfig,
    pub speaker: SpeakerEncoderConfig,
    pub synth: SynthConfig,
    pub attention_dir: Option<PathBuf>,
    pub attention_every: usize,
    pub vocoder: VocoderConfig,
    pub bench_runs: usize,
    pub test_set: PathBuf,
    pub reference: PathBuf,
    pub stub_rtf: f64,
    pub bench_output: PathBuf,
    pub listen_addr: String,
    pub listen_plan: Option<PathBuf>,
    pub listen_audio_dir: PathBuf,
    pub listen_data_dir: PathBuf,
    pub plan: PlanConfig,
    pub ratings: PathBuf,
    pub report_output: PathBuf,
    /// The resolved table, for provenance.
    pub echo: String,
}

impl Settings {
    fn from_config(cfg: &RunConfig, workdir: &Path) -> Result<Self> {
        let path = |key: &str| workdir.join(cfg.get(key));
        let seed: u64 = parse(cfg, "seed")?;
        let asr = match cfg.get("asr") {
            "transcript" => AsrMode::Transcript,
            "http" => AsrMode::Http,
            other => bail!("config asr = {other:?}: expected transcript or http"),
        };
        let mel = MelConfig {
            fft_size: parse(cfg, "mel.fft_size")?,
            hop_size: parse(cfg, "mel.hop_size")?,
            win_size: parse(cfg, "mel.win_size")?,
            mel_bins: parse(cfg, "mel.bins")?,
            fmin: parse(cfg, "mel.fmin")?,
            fmax: parse(cfg, "mel.fmax")?,
            ..MelConfig::default()
        };
        mel.validate().context("mel settings")?;
        let speaker = SpeakerEncoderConfig {
            mel_bins: mel.mel_bins,
            hidden: parse(cfg, "speaker.hidden")?,
            layers: parse(cfg, "speaker.layers")?,
            embed_dim: parse(cfg, "speaker.embed_dim")?,
            partial_frames: parse(cfg, "speaker.partial_frames")?,
            min_frames: parse(cfg, "speaker.min_frames")?,
            speakers_per_batch: parse(cfg, "speaker.speakers_per_batch")?,
            utterances_per_speaker: parse(cfg, "speaker.utterances_per_speaker")?,
            steps: parse(cfg, "speaker.steps")?,
            learning_rate: parse(cfg, "speaker.learning_rate")?,
            seed,
            ..SpeakerEncoderConfig::default()
        };
        let synth = SynthConfig {
            mel_bins: mel.mel_bins,
            base_dim: parse(cfg, "synth.base_dim")?,
            speaker_dim: speaker.embed_dim,
            latent_dim: parse(cfg, "synth.latent_dim")?,
            hidden: parse(cfg, "synth.hidden")?,
            flow_steps: parse(cfg, "synth.flow_steps")?,
            max_log_scale: parse(cfg, "synth.max_log_scale")?,
            decoder_self_attention: parse(cfg, "synth.self_attention")?,
            alpha_max: parse(cfg, "synth.alpha_max")?,
            alpha_warmup_steps: parse(cfg, "synth.alpha_warmup_steps")?,
            beta: parse(cfg, "synth.beta")?,
            reduction_factors: parse_list(cfg, "synth.reduction_factors")?,
            reduction_boundaries: parse_list(cfg, "synth.reduction_boundaries")?,
            steps: parse(cfg, "synth.steps")?,
            batch_size: parse(cfg, "synth.batch_size")?,
            learning_rate: parse(cfg, "synth.learning_rate")?,
            temperature: parse(cfg, "synth.temperature")?,
            seed,
            ..SynthConfig::default()
        };
        if synth.reduction_factors.len() != synth.reduction_boundaries.len() + 1 {
            bail!("synth.reduction_factors needs exactly one more entry than synth.reduction_boundaries");
        }
        let vocoder = VocoderConfig {
            mel: mel.clone(),
            upsample_factors: parse_list(cfg, "vocoder.upsample_factors")?,
            channels: parse_list(cfg, "vocoder.channels")?,
            kernel: parse(cfg, "vocoder.kernel")?,
            discriminators: parse(cfg, "vocoder.discriminators")?,
            disc_channels: parse(cfg, "vocoder.disc_channels")?,
            disc_kernel: parse(cfg, "vocoder.disc_kernel")?,
            lambda_fm: parse(cfg, "vocoder.lambda_fm")?,
            lambda_mel: parse(cfg, "vocoder.lambda_mel")?,
            segment_frames: parse(cfg, "vocoder.segment_frames")?,
            steps: parse(cfg, "vocoder.steps")?,
            learning_rate: parse(cfg, "vocoder.learning_rate")?,
            seed,
        };
        vocoder.validate().context("vocoder settings")?;
        let ab: Vec<String> = cfg.get("listen.ab_systems").split(',').map(|s| s.trim().to_string()).collect();
        let [a, b] = <[String; 2]>::try_from(ab).map_err(|_| anyhow!("listen.ab_systems needs exactly two comma-separated names"))?;
        let plan = PlanConfig { mos_system: cfg.get("listen.mos_system").to_string(), ab_systems: [a, b], ..PlanConfig::default() };
        let raw_dir = path("raw_dir");
        Ok(Self {
            workdir: workdir.to_path_buf(),
            seed,
            transcripts: raw_dir.join(cfg.get("transcripts")),
            raw_dir,
            manifest: path("manifest"),
            records: path("records"),
            mel_dir: path("mel_dir"),
            checkpoint_dir: path("checkpoint_dir"),
            lexicon: optional(cfg, "lexicon").map(|p| workdir.join(p)),
            asr,
            asr_url: optional(cfg, "asr_url"),
            asr_timeout_secs: parse(cfg, "asr_timeout_secs")?,
            cer_threshold: parse(cfg, "cer_threshold")?,
            mel,
            speaker,
            synth,
            attention_dir: optional(cfg, "synth.attention_dir").map(|p| workdir.join(p)),
            attention_every: parse(cfg, "synth.attention_every")?,
            vocoder,
            bench_runs: parse(cfg, "bench.runs")?,
            test_set: path("bench.test_set"),
            reference: path("bench.reference"),
            stub_rtf: parse(cfg, "bench.stub_rtf")?,
            bench_output: path("bench.output"),
            listen_addr: cfg.get("listen.addr").to_string(),
            listen_plan: optional(cfg, "listen.plan").map(|p| workdir.join(p)),
            listen_audio_dir: path("listen.audio_dir"),
            listen_data_dir: path("listen.data_dir"),
            plan,
            ratings: path("report.ratings"),
            report_output: path("report.output"),
            echo: cfg.echo(),
        })
    }

    pub fn checkpoint(&self, component: &str) -> PathBuf {
        self.checkpoint_dir.join(format!("{component}.ckpt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let s = RunConfig::default().resolve(Path::new("/w")).unwrap();
        assert_eq!(s.manifest, Path::new("/w/manifest.jsonl"));
        assert_eq!(s.synth.speaker_dim, 256);
        assert_eq!(s.synth.reduction_factors, vec![4, 3, 2, 1]);
        assert_eq!(s.vocoder.mel, s.mel);
        assert_eq!(s.bench_runs, 10);
        assert_eq!(s.plan.scenarios.len(), 9);
    }

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# toy\nseed = 7\nspeaker.embed_dim=16\n\n", "run.cfg").unwrap();
        c.apply_override("seed=9").unwrap();
        let s = c.resolve(Path::new(".")).unwrap();
        assert_eq!((s.seed, s.synth.seed, s.synth.speaker_dim), (9, 9, 16));
        assert!(s.echo.contains("seed = 9\n"));
        let err = c.apply_text("nope = 1", "run.cfg").unwrap_err();
        assert!(format!("{err:#}").contains("run.cfg:1"), "{err:#}");
        assert!(c.apply_override("seed").is_err());
        c.set("vocoder.upsample_factors", "8,8").unwrap();
        assert!(c.resolve(Path::new(".")).is_err());
    }

    #[test]
    fn echo_is_sorted_and_complete() {
        let echo = RunConfig::default().echo();
        let keys: Vec<&str> = echo.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), DEFAULTS.len());
    }
}
