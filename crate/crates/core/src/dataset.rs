//! Corpus quality control: ASR-consistency marking, text normalization,
//! mispronunciation flags, scenario/emotion tags and manifest emission.
//!
//! Records move through explicit statuses and are never dropped; the
//! training manifest is the `pass` subset, sorted by id.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::listen::SCENARIOS;
use crate::text::{NormalizedText, Normalizer};

pub const DEFAULT_CER_THRESHOLD: f64 = 0.1;
pub const ASR_URL_ENV: &str = "CLONETTS_ASR_URL";
pub const ASR_TIMEOUT_ENV: &str = "CLONETTS_ASR_TIMEOUT_SECS";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {reason}")]
    Audio { path: String, reason: String },
    #[error("record {id}: {reason}")]
    Text { id: String, reason: String },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("record {id}: unknown scenario {scenario:?}")]
    UnknownScenario { id: String, scenario: String },
    #[error("record {id}: cannot flag a record in status {status}")]
    InvalidTransition { id: String, status: QcStatus },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsrError {
    #[error("ASR service unavailable: {0}")]
    Unavailable(String),
    #[error("ASR request timed out")]
    Timeout,
    #[error("ASR protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcStatus {
    Pending,
    Pass,
    Mismatch,
    Mispronounced,
    Removed,
}

impl fmt::Display for QcStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Pending => "pending",
            Self::Pass => "pass",
            Self::Mismatch => "mismatch",
            Self::Mispronounced => "mispronounced",
            Self::Removed => "removed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: String,
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_text: Option<String>,
    pub speaker_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<String>,
    pub qc_status: QcStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr_hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cer: Option<f64>,
    #[serde(default)]
    pub retry_count: u32,
    /// Reason for the latest failure or exclusion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl UtteranceRecord {
    pub fn new(id: impl Into<String>, audio_path: impl Into<String>, raw_text: impl Into<String>, speaker: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            audio_path: audio_path.into(),
            raw_text: raw_text.into(),
            normalized_text: None,
            speaker_id: speaker.into(),
            scenario: None,
            emotion: None,
            qc_status: QcStatus::Pending,
            asr_hypothesis: None,
            cer: None,
            retry_count: 0,
            note: None,
        }
    }

    /// Marks the record removed with a reason; it stays in the record set.
    pub fn removed(mut self, reason: impl Into<String>) -> Self {
        self.qc_status = QcStatus::Removed;
        self.note = Some(reason.into());
        self
    }
}

/// Speech recognizer used to bootstrap consistency marks. Implementations
/// must be deterministic in the audio bytes.
pub trait AsrClient {
    fn transcribe(&self, wav_bytes: &[u8]) -> Result<String, AsrError>;
}

/// Hex SHA-256 of a byte string; used to key audio by content.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// In-memory recognizer keyed by audio content hash.
#[derive(Debug, Clone, Default)]
pub struct MockAsr {
    responses: HashMap<String, Result<String, AsrError>>,
    fallback: Option<Result<String, AsrError>>,
}

impl MockAsr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_response(mut self, wav_bytes: &[u8], response: Result<String, AsrError>) -> Self {
        self.responses.insert(content_hash(wav_bytes), response);
        self
    }

    /// Answer for audio without a registered response.
    pub fn with_fallback(mut self, response: Result<String, AsrError>) -> Self {
        self.fallback = Some(response);
        self
    }
}

impl AsrClient for MockAsr {
    fn transcribe(&self, wav_bytes: &[u8]) -> Result<String, AsrError> {
        self.responses
            .get(&content_hash(wav_bytes))
            .or(self.fallback.as_ref())
            .cloned()
            .unwrap_or_else(|| Err(AsrError::Unavailable("no mock response for this audio".into())))
    }
}

#[derive(Debug, Deserialize)]
struct TranscribeResponse {
    text: String,
}

/// `POST {base_url}/transcribe` with the WAV as body; expects `{"text": ...}`.
#[derive(Debug, Clone)]
pub struct HttpAsrClient {
    pub base_url: String,
    pub timeout: Duration,
    client: reqwest::blocking::Client,
}

impl HttpAsrClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Result<Self, AsrError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| AsrError::Unavailable(e.to_string()))?;
        Ok(Self { base_url: base_url.into().trim_end_matches('/').to_string(), timeout, client })
    }

    /// Reads `CLONETTS_ASR_URL` and optional `CLONETTS_ASR_TIMEOUT_SECS` (default 30).
    pub fn from_env() -> Option<Result<Self, AsrError>> {
        let url = std::env::var(ASR_URL_ENV).ok()?;
        let secs = std::env::var(ASR_TIMEOUT_ENV).ok().and_then(|s| s.parse().ok()).unwrap_or(30.0);
        Some(Self::new(url, Duration::from_secs_f64(secs)))
    }
}

impl AsrClient for HttpAsrClient {
    fn transcribe(&self, wav_bytes: &[u8]) -> Result<String, AsrError> {
        let resp = self
            .client
            .post(format!("{}/transcribe", self.base_url))
            .header("content-type", "audio/wav")
            .body(wav_bytes.to_vec())
            .send()
            .map_err(|e| if e.is_timeout() { AsrError::Timeout } else { AsrError::Unavailable(e.to_string()) })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(if status.is_server_error() {
                AsrError::Unavailable(format!("HTTP {status}"))
            } else {
                AsrError::Protocol(format!("HTTP {status}"))
            });
        }
        let body: TranscribeResponse = resp.json().map_err(|e| {
            if e.is_timeout() {
                AsrError::Timeout
            } else {
                AsrError::Protocol(e.to_string())
            }
        })?;
        Ok(body.text)
    }
}

/// Levenshtein distance between two sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Error rate over normalized tokens: edits / reference length.
pub fn character_error_rate(reference: &NormalizedText, hypothesis: &NormalizedText) -> f64 {
    let d = edit_distance(&reference.tokens, &hypothesis.tokens);
    if reference.tokens.is_empty() {
        return if hypothesis.tokens.is_empty() { 0.0 } else { 1.0 };
    }
    d as f64 / reference.tokens.len() as f64
}

/// Resolves a record's audio path against the corpus root.
fn read_audio(root: &Path, rec: &UtteranceRecord) -> Result<Vec<u8>, DatasetError> {
    let path = root.join(&rec.audio_path);
    std::fs::read(&path).map_err(|e| DatasetError::Audio { path: path.display().to_string(), reason: e.to_string() })
}

/// Quality-control settings.
#[derive(Debug, Clone)]
pub struct QcConfig {
    pub cer_threshold: f64,
    /// Directory that record audio paths are relative to.
    pub root: PathBuf,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self { cer_threshold: DEFAULT_CER_THRESHOLD, root: PathBuf::new() }
    }
}

/// Normalizes the raw text, asks the recognizer for a hypothesis and marks
/// the record `pass` or `mismatch` by CER. Records a reviewer has already
/// excluded are returned unchanged; a recognizer failure leaves the status
/// as it was and counts a retry.
pub fn qc_check(
    rec: &UtteranceRecord,
    normalizer: &Normalizer,
    asr: &dyn AsrClient,
    cfg: &QcConfig,
) -> Result<UtteranceRecord, DatasetError> {
    let mut out = rec.clone();
    if matches!(rec.qc_status, QcStatus::Mispronounced | QcStatus::Removed) {
        return Ok(out);
    }
    let reference = normalizer
        .normalize(&rec.raw_text)
        .map_err(|e| DatasetError::Text { id: rec.id.clone(), reason: e.to_string() })?;
    out.normalized_text = Some(reference.to_string());
    let audio = read_audio(&cfg.root, rec)?;
    match asr.transcribe(&audio) {
        Err(e) => {
            out.retry_count += 1;
            out.note = Some(e.to_string());
        }
        Ok(hyp) => {
            let hyp_norm = normalizer.normalize(&hyp).unwrap_or_else(|_| NormalizedText::from_spaced(&hyp));
            let cer = character_error_rate(&reference, &hyp_norm);
            out.asr_hypothesis = Some(hyp);
            out.cer = Some(cer);
            out.note = None;
            out.qc_status = if cer <= cfg.cer_threshold { QcStatus::Pass } else { QcStatus::Mismatch };
        }
    }
    Ok(out)
}

/// Applies a reviewer's mispronunciation verdict.
pub fn flag_mispronunciation(rec: &UtteranceRecord, verdict: bool) -> Result<UtteranceRecord, DatasetError> {
    match rec.qc_status {
        QcStatus::Pass | QcStatus::Mismatch => {
            let mut out = rec.clone();
            if verdict {
                out.qc_status = QcStatus::Mispronounced;
                out.note = Some("reviewer: mispronounced".into());
            }
            Ok(out)
        }
        QcStatus::Mispronounced => Ok(rec.clone()),
        status => Err(DatasetError::InvalidTransition { id: rec.id.clone(), status }),
    }
}

/// One training-manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub audio_path: String,
    /// Normalized, space-separated tokens.
    pub text: String,
    pub speaker: String,
    pub scenario: Option<String>,
    pub emotion: Option<String>,
}

impl ManifestEntry {
    pub fn from_record(rec: &UtteranceRecord) -> Self {
        Self {
            id: rec.id.clone(),
            audio_path: rec.audio_path.clone(),
            text: rec.normalized_text.clone().unwrap_or_default(),
            speaker: rec.speaker_id.clone(),
            scenario: rec.scenario.clone(),
            emotion: rec.emotion.clone(),
        }
    }
}

pub fn is_known_scenario(name: &str) -> bool {
    SCENARIOS.iter().any(|s| s.name == name)
}

/// Checks id uniqueness and scenario tags across all records.
pub fn validate_records(records: &[UtteranceRecord]) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(DatasetError::DuplicateId(r.id.clone()));
        }
        if let Some(s) = &r.scenario {
            if !is_known_scenario(s) {
                return Err(DatasetError::UnknownScenario { id: r.id.clone(), scenario: s.clone() });
            }
        }
    }
    Ok(())
}

/// JSON-lines manifest of `pass` records with non-empty text, sorted by id.
pub fn build_manifest(records: &[UtteranceRecord]) -> Result<String, DatasetError> {
    validate_records(records)?;
    let sorted: BTreeMap<&str, &UtteranceRecord> = records
        .iter()
        .filter(|r| r.qc_status == QcStatus::Pass && r.normalized_text.as_deref().is_some_and(|t| !t.is_empty()))
        .map(|r| (r.id.as_str(), r))
        .collect();
    let mut out = String::new();
    for rec in sorted.values() {
        out.push_str(&serde_json::to_string(&ManifestEntry::from_record(rec)).expect("manifest entry serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(records: &[UtteranceRecord], path: &Path) -> Result<usize, DatasetError> {
    let text = build_manifest(records)?;
    std::fs::write(path, &text).map_err(|e| DatasetError::Io { path: path.display().to_string(), source: e })?;
    Ok(text.lines().count())
}

/// Parses JSON lines, ignoring blank lines; errors carry 1-based line numbers.
pub fn parse_jsonl<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DatasetError::Parse { line: i + 1, reason: e.to_string() }))
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, DatasetError> {
    parse_jsonl(text)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io { path: path.display().to_string(), source: e })?;
    parse_manifest(&text)
}

/// Full record set, one JSON object per line, in the given order.
pub fn records_to_jsonl(records: &[UtteranceRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn corpus(dir: &Path) -> Vec<(UtteranceRecord, Vec<u8>)> {
        (0..4)
            .map(|i| {
                let bytes = format!("RIFF-fake-audio-{i}").into_bytes();
                let name = format!("u{i}.wav");
                std::fs::write(dir.join(&name), &bytes).unwrap();
                (UtteranceRecord::new(format!("utt{i}"), name, "ni3 hao3", "spk0"), bytes)
            })
            .collect()
    }

    fn cfg(dir: &Path) -> QcConfig {
        QcConfig { root: dir.to_path_buf(), ..QcConfig::default() }
    }

    #[test]
    fn cer_examples() {
        let r = NormalizedText::from_spaced("ni3 hao3");
        assert_eq!(character_error_rate(&r, &r), 0.0);
        assert_eq!(character_error_rate(&r, &NormalizedText::from_spaced("ni3 hao3 ma5")), 0.5);
        assert_eq!(edit_distance(&["a", "b", "c"], &["a", "c"]), 1);
        assert_eq!(edit_distance::<u8>(&[], &[1, 2]), 2);
    }

    #[test]
    fn qc_pass_mismatch_and_outage() {
        let dir = tempfile::tempdir().unwrap();
        let c = corpus(dir.path());
        let asr = MockAsr::new()
            .with_response(&c[0].1, Ok("你好".into()))
            .with_response(&c[1].1, Ok("ni3 hao3 ma5".into()))
            .with_response(&c[2].1, Err(AsrError::Timeout));
        let n = Normalizer::default();
        let pass = qc_check(&c[0].0, &n, &asr, &cfg(dir.path())).unwrap();
        assert_eq!((pass.qc_status, pass.cer), (QcStatus::Pass, Some(0.0)));
        assert_eq!(pass.normalized_text.as_deref(), Some("ni3 hao3"));
        let mm = qc_check(&c[1].0, &n, &asr, &cfg(dir.path())).unwrap();
        assert_eq!((mm.qc_status, mm.cer), (QcStatus::Mismatch, Some(0.5)));
        let down = qc_check(&c[2].0, &n, &asr, &cfg(dir.path())).unwrap();
        assert_eq!((down.qc_status, down.retry_count), (QcStatus::Pending, 1));
        let again = qc_check(&down, &n, &asr, &cfg(dir.path())).unwrap();
        assert_eq!(again.retry_count, 2);
        // a passing record keeps its status through an outage
        let outage = MockAsr::new().with_fallback(Err(AsrError::Unavailable("down".into())));
        assert_eq!(qc_check(&pass, &n, &outage, &cfg(dir.path())).unwrap().qc_status, QcStatus::Pass);
        let missing = UtteranceRecord::new("x", "missing.wav", "ni3", "s");
        assert!(matches!(qc_check(&missing, &n, &asr, &cfg(dir.path())), Err(DatasetError::Audio { .. })));
    }

    #[test]
    fn mispronunciation_flow() {
        let mut r = UtteranceRecord::new("a", "a.wav", "ni3", "s");
        r.qc_status = QcStatus::Pass;
        r.normalized_text = Some("ni3".into());
        assert_eq!(flag_mispronunciation(&r, false).unwrap(), r);
        let flagged = flag_mispronunciation(&r, true).unwrap();
        assert_eq!(flagged.qc_status, QcStatus::Mispronounced);
        assert_eq!(flag_mispronunciation(&flagged, true).unwrap(), flagged);
        assert_eq!(build_manifest(&[flagged]).unwrap(), "");
        assert!(flag_mispronunciation(&UtteranceRecord::new("p", "p", "x", "s"), true).is_err());
    }

    fn passed(id: &str) -> UtteranceRecord {
        let mut r = UtteranceRecord::new(id, format!("{id}.wav"), "ni3 hao3", "spk0");
        r.qc_status = QcStatus::Pass;
        r.normalized_text = Some("ni3 hao3".into());
        r.scenario = Some("Whisper".into());
        r
    }

    #[test]
    fn manifest_filter_order_and_roundtrip() {
        let mut recs = vec![passed("c"), passed("a"), passed("b"), passed("d")];
        recs[3].qc_status = QcStatus::Mispronounced;
        let m = build_manifest(&recs).unwrap();
        assert_eq!(m.lines().count(), 3);
        let parsed = parse_manifest(&m).unwrap();
        assert_eq!(parsed.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(parsed[0], ManifestEntry::from_record(&recs[1]));
        recs.reverse();
        assert_eq!(build_manifest(&recs).unwrap(), m);
        recs.push(passed("a"));
        match build_manifest(&recs) {
            Err(DatasetError::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("{other:?}"),
        }
        let mut bad = passed("z");
        bad.scenario = Some("Karaoke".into());
        assert!(matches!(build_manifest(&[bad]), Err(DatasetError::UnknownScenario { .. })));
        assert!(matches!(parse_manifest("{}\n"), Err(DatasetError::Parse { line: 1, .. })));
    }

    /// Serves `responses.len()` requests, returning each response in order.
    fn serve(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<Vec<u8>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for resp in responses {
                let (mut s, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let body_len = loop {
                    let n = s.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        let head = String::from_utf8_lossy(&buf[..pos]).to_lowercase();
                        let len: usize = head
                            .lines()
                            .find_map(|l| l.strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= pos + 4 + len {
                            break (pos + 4, len);
                        }
                    }
                };
                bodies.push(buf[body_len.0..body_len.0 + body_len.1].to_vec());
                s.write_all(resp.as_bytes()).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn http(status: &str, body: &str) -> String {
        format!("HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}", body.len())
    }

    #[test]
    fn http_client_roundtrip_and_failures() {
        let (url, handle) = serve(vec![http("200 OK", r#"{"text":"ni3 hao3"}"#), http("503 Service Unavailable", "{}")]);
        let client = HttpAsrClient::new(&url, Duration::from_secs(5)).unwrap();
        assert_eq!(client.transcribe(b"wav-bytes").unwrap(), "ni3 hao3");
        assert!(matches!(client.transcribe(b"x"), Err(AsrError::Unavailable(_))));
        assert_eq!(handle.join().unwrap()[0], b"wav-bytes");
        // nothing listening
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let dead = HttpAsrClient::new(format!("http://127.0.0.1:{port}"), Duration::from_secs(2)).unwrap();
        assert!(matches!(dead.transcribe(b"x"), Err(AsrError::Unavailable(_))));
    }
}
