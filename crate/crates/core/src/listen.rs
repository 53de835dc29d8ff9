//! Scenario-based listening-test backend: plans built from the scenario
//! table, seeded per-listener sessions, and an append-only rating log that
//! is flushed to disk before a submission is acknowledged and replayed on
//! restart.
//!
//! This module is transport-agnostic; the HTTP routes live in the CLI.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::content_hash;
use crate::eval::{shuffle_samples, AbVote, RatingKind, RatingRecord, RatingValue};

/// One row of the scenario table: name, overview, sentence count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scenario {
    pub name: &'static str,
    pub overview: &'static str,
    pub count: usize,
}

pub const SCENARIOS: [Scenario; 9] = [
    Scenario { name: "Daily Conversations", overview: "Dating, Current Affairs and Memories", count: 4 },
    Scenario { name: "News Broadcast", overview: "Earthquake and Epidemic", count: 2 },
    Scenario { name: "Public Broadcast", overview: "Lost & Found and Train Terminus", count: 2 },
    Scenario { name: "Human Customer Service", overview: "Welcome and Response", count: 2 },
    Scenario { name: "Phrase Read", overview: "Book Quotes", count: 2 },
    Scenario { name: "Game Voiceover", overview: "Genshin Impact Copywriting", count: 2 },
    Scenario { name: "Guided Tour", overview: "Kong Mansion and Forbidden City", count: 2 },
    Scenario { name: "Faculty Teaching", overview: "Marxism and Linear Algebra", count: 2 },
    Scenario { name: "Whisper", overview: "Comforting", count: 2 },
];

/// Default prompt sentences, keyed by scenario, in table order.
const DEFAULT_SENTENCES: [(&str, &[&str]); 9] = [
    ("Daily Conversations", &["周末一起去看电影吧", "你看今天的新闻了吗", "还记得我们小时候的那条小河吗", "晚饭想吃点什么"]),
    ("News Broadcast", &["今天凌晨发生三级地震暂无人员伤亡", "本市新增病例均已得到妥善安置"]),
    ("Public Broadcast", &["请丢失钱包的旅客到服务台认领", "本次列车终点站到了请带好随身物品"]),
    ("Human Customer Service", &["您好欢迎致电客户服务中心", "您反馈的问题我们已经记录"]),
    ("Phrase Read", &["学而不思则罔思而不学则殆", "千里之行始于足下"]),
    ("Game Voiceover", &["旅行者欢迎来到蒙德城", "风会带来故事的种子"]),
    ("Guided Tour", &["孔府是孔子后代居住的地方", "故宫是明清两代的皇家宫殿"]),
    ("Faculty Teaching", &["实践是检验真理的唯一标准", "矩阵的秩等于线性无关列的个数"]),
    ("Whisper", &["别担心一切都会好起来的", "闭上眼睛好好休息一下"]),
];

#[derive(Debug, Error)]
pub enum ListenError {
    #[error("plan has no scenarios")]
    EmptyPlan,
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("missing audio asset {0}")]
    MissingAsset(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is complete")]
    SessionComplete(String),
    #[error("item {submitted} is not the current item (expected {expected})")]
    WrongItem { expected: usize, submitted: usize },
    #[error("item {0} already answered in this session")]
    Duplicate(usize),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt log {path} line {line}: {reason}")]
    CorruptLog { path: String, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ListenError + '_ {
    move |source| ListenError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioRef {
    /// Hex SHA-256 of the WAV bytes.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanItem {
    /// Canonical id: position in the unshuffled plan.
    pub id: usize,
    pub sentence: String,
    pub scenario: String,
    pub overview: String,
    pub kind: RatingKind,
    pub audio: Vec<AudioRef>,
    /// Systems behind each audio ref, in the same order. Never sent to listeners.
    pub systems: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPlan {
    pub items: Vec<PlanItem>,
}

impl TestPlan {
    pub fn validate(&self) -> Result<(), ListenError> {
        if self.items.is_empty() {
            return Err(ListenError::EmptyPlan);
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.id != i {
                return Err(ListenError::InvalidPlan(format!("item at position {i} has id {}", item.id)));
            }
            if !SCENARIOS.iter().any(|s| s.name == item.scenario) {
                return Err(ListenError::UnknownScenario(item.scenario.clone()));
            }
            let want = match item.kind {
                RatingKind::Mos => 1,
                RatingKind::Ab => 2,
            };
            if item.audio.len() != want || item.systems.len() != want {
                return Err(ListenError::InvalidPlan(format!("item {i}: {:?} needs {want} audio refs", item.kind)));
            }
            if want == 2 && item.audio[0] == item.audio[1] {
                return Err(ListenError::InvalidPlan(format!("item {i}: A/B refs must differ")));
            }
        }
        Ok(())
    }

    pub fn audio_hashes(&self) -> BTreeSet<String> {
        self.items.iter().flat_map(|i| i.audio.iter().map(|a| a.hash.clone())).collect()
    }
}

/// Scenario counts and systems for plan construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanConfig {
    /// `(scenario name, number of sentences)`.
    pub scenarios: Vec<(String, usize)>,
    /// System rated in MOS items.
    pub mos_system: String,
    /// Systems compared in A/B items.
    pub ab_systems: [String; 2],
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            scenarios: SCENARIOS.iter().map(|s| (s.name.to_string(), s.count)).collect(),
            mos_system: "CV2TTS-VAENAR".into(),
            ab_systems: ["CV2TTS-VAENAR".into(), "CV2TTS".into()],
        }
    }
}

/// Parses a plan file: one `Scenario | Overview | Number` row per line,
/// `#` comments and blank lines ignored. The overview must match the table
/// entry for that scenario; a header row starting with `Scenario` is skipped.
pub fn parse_plan_config(text: &str, base: &PlanConfig) -> Result<PlanConfig, ListenError> {
    let mut scenarios = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        if fields.first() == Some(&"Scenario") {
            continue;
        }
        let [name, overview, count] = fields[..] else {
            return Err(ListenError::InvalidPlan(format!("line {}: expected `Scenario | Overview | Number`", i + 1)));
        };
        let row = SCENARIOS.iter().find(|s| s.name == name).ok_or_else(|| ListenError::UnknownScenario(name.to_string()))?;
        if row.overview != overview {
            return Err(ListenError::InvalidPlan(format!("line {}: overview of {name:?} is {:?}", i + 1, row.overview)));
        }
        let count = count.parse().map_err(|_| ListenError::InvalidPlan(format!("line {}: bad number {count:?}", i + 1)))?;
        scenarios.push((name.to_string(), count));
    }
    if scenarios.is_empty() {
        return Err(ListenError::EmptyPlan);
    }
    Ok(PlanConfig { scenarios, ..base.clone() })
}

/// The default table as plan-file text.
pub fn default_plan_text() -> String {
    let mut out = String::from("Scenario | Overview | Number\n");
    for s in &SCENARIOS {
        out.push_str(&format!("{} | {} | {}\n", s.name, s.overview, s.count));
    }
    out
}

/// Lowercase alphanumerics joined by `-`: `"Human Customer Service"` → `"human-customer-service"`.
pub fn slug(s: &str) -> String {
    s.split(|c: char| !c.is_ascii_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect::<Vec<_>>().join("-")
}

/// Asset file expected for sentence `k` of a scenario rendered by `system`.
pub fn asset_name(scenario: &str, k: usize, system: &str) -> String {
    format!("{}-{k}-{}.wav", slug(scenario), slug(system))
}

/// Builds a plan over `audio_dir`. Within each scenario, even-numbered
/// sentences become MOS items and odd-numbered ones A/B items. Returns the
/// plan and the `hash → file` map of every referenced asset.
pub fn create_plan(cfg: &PlanConfig, audio_dir: &Path) -> Result<(TestPlan, HashMap<String, PathBuf>), ListenError> {
    if cfg.scenarios.is_empty() {
        return Err(ListenError::EmptyPlan);
    }
    let mut items = Vec::new();
    let mut assets = HashMap::new();
    let mut load = |scenario: &str, k: usize, system: &str| -> Result<AudioRef, ListenError> {
        let path = audio_dir.join(asset_name(scenario, k, system));
        let bytes = std::fs::read(&path).map_err(|_| ListenError::MissingAsset(path.display().to_string()))?;
        let hash = content_hash(&bytes);
        assets.insert(hash.clone(), path);
        Ok(AudioRef { hash })
    };
    for (name, count) in &cfg.scenarios {
        let row = SCENARIOS.iter().find(|s| s.name == name).ok_or_else(|| ListenError::UnknownScenario(name.clone()))?;
        let sentences = DEFAULT_SENTENCES.iter().find(|(n, _)| n == name).map(|(_, s)| *s).unwrap_or(&[]);
        for k in 0..*count {
            let sentence = sentences.get(k).map_or_else(|| format!("{name} #{k}"), |s| s.to_string());
            let (kind, systems) = if k % 2 == 0 {
                (RatingKind::Mos, vec![cfg.mos_system.clone()])
            } else {
                (RatingKind::Ab, cfg.ab_systems.to_vec())
            };
            let audio = systems.iter().map(|s| load(name, k, s)).collect::<Result<Vec<_>, _>>()?;
            items.push(PlanItem {
                id: items.len(),
                sentence,
                scenario: row.name.to_string(),
                overview: row.overview.to_string(),
                kind,
                audio,
                systems,
            });
        }
    }
    let plan = TestPlan { items };
    plan.validate()?;
    Ok((plan, assets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TestSession {
    pub session_id: String,
    pub listener_id: String,
    pub seed: u64,
    /// Canonical item ids in presentation order.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub status: SessionStatus,
}

pub fn create_session(plan: &TestPlan, session_id: &str, listener_id: &str, seed: u64) -> TestSession {
    let ids: Vec<usize> = (0..plan.items.len()).collect();
    TestSession {
        session_id: session_id.to_string(),
        listener_id: listener_id.to_string(),
        seed,
        order: shuffle_samples(&ids, seed),
        cursor: 0,
        status: SessionStatus::Open,
    }
}

/// What a listener sees: no system names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: usize,
    pub position: usize,
    pub total: usize,
    pub scenario: String,
    pub overview: String,
    pub sentence: String,
    pub kind: RatingKind,
    pub audio: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum NextItem {
    Item(ItemView),
    Complete { answered: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    pub item_id: usize,
    /// Cursor after this submission.
    pub cursor: usize,
    pub complete: bool,
}

/// Raw submitted value: an integer score or `"A" | "B" | "Same"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubmittedValue {
    Score(i64),
    Choice(String),
}

/// Log lines, in append order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum LogEvent {
    Session { session_id: String, listener_id: String, seed: u64 },
    Rating { record: RatingRecord, idempotency_key: Option<String> },
}

#[derive(Debug)]
struct Inner {
    sessions: HashMap<String, TestSession>,
    /// Per session: (canonical item, idempotency key) of every answer.
    answered: HashMap<String, HashMap<usize, Option<String>>>,
    records: Vec<RatingRecord>,
    log: File,
    next_session: u64,
}

/// Thread-safe service over a plan and a data directory.
#[derive(Debug)]
pub struct ListenService {
    plan: TestPlan,
    log_path: PathBuf,
    inner: Mutex<Inner>,
}

pub const LOG_FILE: &str = "ratings.log.jsonl";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExportFilter {
    pub scenario: Option<String>,
    pub kind: Option<RatingKind>,
    pub session: Option<String>,
}

impl ListenService {
    /// Opens (or creates) the log in `data_dir` and replays it. A final line
    /// without a trailing newline was never acknowledged and is dropped.
    pub fn open(plan: TestPlan, data_dir: &Path) -> Result<Self, ListenError> {
        plan.validate()?;
        std::fs::create_dir_all(data_dir).map_err(io_err(data_dir))?;
        let log_path = data_dir.join(LOG_FILE);
        let text = match std::fs::read_to_string(&log_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(&log_path)(e)),
        };
        let complete_len = text.rfind('\n').map_or(0, |i| i + 1);
        if complete_len < text.len() {
            log::warn!("dropping unacknowledged partial line at end of {}", log_path.display());
            let f = OpenOptions::new().write(true).open(&log_path).map_err(io_err(&log_path))?;
            f.set_len(complete_len as u64).map_err(io_err(&log_path))?;
            f.sync_all().map_err(io_err(&log_path))?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
        let mut inner = Inner { sessions: HashMap::new(), answered: HashMap::new(), records: Vec::new(), log, next_session: 0 };
        for (i, line) in text[..complete_len].lines().enumerate() {
            let corrupt = |reason: String| ListenError::CorruptLog { path: log_path.display().to_string(), line: i + 1, reason };
            let event: LogEvent = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            Self::apply(&plan, &mut inner, event).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(Self { plan, log_path, inner: Mutex::new(inner) })
    }

    fn apply(plan: &TestPlan, inner: &mut Inner, event: LogEvent) -> Result<(), ListenError> {
        match event {
            LogEvent::Session { session_id, listener_id, seed } => {
                inner.next_session = inner.next_session.max(session_number(&session_id).map_or(0, |n| n + 1));
                inner.answered.insert(session_id.clone(), HashMap::new());
                inner.sessions.insert(session_id.clone(), create_session(plan, &session_id, &listener_id, seed));
            }
            LogEvent::Rating { record, idempotency_key } => {
                let s = inner.sessions.get_mut(&record.session).ok_or_else(|| ListenError::UnknownSession(record.session.clone()))?;
                s.cursor += 1;
                if s.cursor == s.order.len() {
                    s.status = SessionStatus::Complete;
                }
                inner.answered.get_mut(&record.session).expect("session map").insert(record.item, idempotency_key);
                inner.records.push(record);
            }
        }
        Ok(())
    }

    fn append(&self, inner: &mut Inner, event: &LogEvent) -> Result<(), ListenError> {
        let mut line = serde_json::to_string(event).expect("log event serializes");
        line.push('\n');
        inner.log.write_all(line.as_bytes()).map_err(io_err(&self.log_path))?;
        inner.log.sync_data().map_err(io_err(&self.log_path))
    }

    pub fn plan(&self) -> &TestPlan {
        &self.plan
    }

    pub fn create_session(&self, listener_id: &str, seed: u64) -> Result<TestSession, ListenError> {
        let mut inner = self.inner.lock().expect("listen state lock");
        let session_id = format!("s{:06}", inner.next_session);
        let event = LogEvent::Session { session_id: session_id.clone(), listener_id: listener_id.to_string(), seed };
        self.append(&mut inner, &event)?;
        Self::apply(&self.plan, &mut inner, event)?;
        Ok(inner.sessions[&session_id].clone())
    }

    pub fn session(&self, session_id: &str) -> Result<TestSession, ListenError> {
        let inner = self.inner.lock().expect("listen state lock");
        inner.sessions.get(session_id).cloned().ok_or_else(|| ListenError::UnknownSession(session_id.to_string()))
    }

    /// Current item without advancing; the completion marker once all are answered.
    pub fn next_item(&self, session_id: &str) -> Result<NextItem, ListenError> {
        let s = self.session(session_id)?;
        if s.status == SessionStatus::Complete {
            return Ok(NextItem::Complete { answered: s.cursor });
        }
        let item = &self.plan.items[s.order[s.cursor]];
        Ok(NextItem::Item(ItemView {
            item_id: item.id,
            position: s.cursor,
            total: s.order.len(),
            scenario: item.scenario.clone(),
            overview: item.overview.clone(),
            sentence: item.sentence.clone(),
            kind: item.kind,
            audio: item.audio.iter().map(|a| a.hash.clone()).collect(),
        }))
    }

    /// Validates and durably records a rating for the current item. A retry
    /// carrying the idempotency key of an already-recorded answer returns the
    /// original acknowledgment.
    pub fn submit_rating(
        &self,
        session_id: &str,
        item_id: usize,
        value: &SubmittedValue,
        idempotency_key: Option<&str>,
    ) -> Result<Ack, ListenError> {
        let mut inner = self.inner.lock().expect("listen state lock");
        let s = inner.sessions.get(session_id).ok_or_else(|| ListenError::UnknownSession(session_id.to_string()))?.clone();
        if let Some(prev) = inner.answered[session_id].get(&item_id) {
            if idempotency_key.is_some() && prev.as_deref() == idempotency_key {
                let pos = s.order.iter().position(|&i| i == item_id).expect("answered item is in the order");
                return Ok(Ack {
                    session_id: session_id.to_string(),
                    item_id,
                    cursor: pos + 1,
                    complete: s.status == SessionStatus::Complete,
                });
            }
            return Err(ListenError::Duplicate(item_id));
        }
        if s.status == SessionStatus::Complete {
            return Err(ListenError::SessionComplete(session_id.to_string()));
        }
        let expected = s.order[s.cursor];
        if item_id != expected {
            return Err(ListenError::WrongItem { expected, submitted: item_id });
        }
        let item = &self.plan.items[item_id];
        let value = match (item.kind, value) {
            (RatingKind::Mos, SubmittedValue::Score(v)) if (1..=5).contains(v) => RatingValue::Score(*v),
            (RatingKind::Mos, SubmittedValue::Score(v)) => return Err(ListenError::InvalidValue(format!("MOS score {v} outside 1..=5"))),
            (RatingKind::Ab, SubmittedValue::Choice(c)) => {
                RatingValue::Choice(AbVote::parse(c).ok_or_else(|| ListenError::InvalidValue(format!("choice {c:?}")))?)
            }
            (kind, v) => return Err(ListenError::InvalidValue(format!("{v:?} for a {kind:?} item"))),
        };
        let record = RatingRecord {
            session: session_id.to_string(),
            listener: s.listener_id.clone(),
            item: item_id,
            kind: item.kind,
            value,
            system: (item.kind == RatingKind::Mos).then(|| item.systems[0].clone()),
            systems: (item.kind == RatingKind::Ab).then(|| [item.systems[0].clone(), item.systems[1].clone()]),
            scenario: Some(item.scenario.clone()),
            timestamp: Some(SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())),
        };
        let event = LogEvent::Rating { record, idempotency_key: idempotency_key.map(str::to_string) };
        self.append(&mut inner, &event)?;
        Self::apply(&self.plan, &mut inner, event)?;
        let s = &inner.sessions[session_id];
        Ok(Ack { session_id: session_id.to_string(), item_id, cursor: s.cursor, complete: s.status == SessionStatus::Complete })
    }

    /// Persisted ratings in log order, restricted by `filter`.
    pub fn export(&self, filter: &ExportFilter) -> Vec<RatingRecord> {
        let inner = self.inner.lock().expect("listen state lock");
        inner
            .records
            .iter()
            .filter(|r| filter.scenario.as_ref().is_none_or(|s| r.scenario.as_ref() == Some(s)))
            .filter(|r| filter.kind.is_none_or(|k| r.kind == k))
            .filter(|r| filter.session.as_ref().is_none_or(|s| &r.session == s))
            .cloned()
            .collect()
    }
}

fn session_number(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}
