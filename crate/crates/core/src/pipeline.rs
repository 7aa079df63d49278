//! Three-stage annotation pipeline: captions, reviewed refinement with one
//! retry and manual escalation, then grounded multi-round conversations.
//!
//! Every record lives in its own JSON state file under `<out>/state/`, written
//! atomically. All state changes go through [`apply`], driven by the same
//! audit entries that are persisted, so the audit trail alone replays to the
//! final state.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread::sleep;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, image_from_png, mask_from_png, read_manifest, resolve, ManifestRecord};
use crate::error::{Error, Result};
use crate::protocol::{validate_sample, Conversation, GroundedText, Sample, Turn, TurnRecord};
use crate::synth::{known_classes, NEGATIVE_RESPONSE, REASONING_QUESTION};

pub const COVID_CT_PREFIX: &str = "Imagine you are a professional AI chest CT imaging assistant. The doctor needs to diagnose COVID-19, and you are tasked with analyzing the image to provide detailed, effective, and accurate diagnostic advice.";
pub const GENERIC_PREFIX: &str = "Imagine you are a professional AI medical imaging assistant. You are tasked with analyzing the image and describing every visible abnormality accurately.";
pub const DEFAULT_PROMPT: &str = "Describe the abnormal findings in this image.";

const STATE_DIR: &str = "state";
const RUN_FILE: &str = "run.json";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const PENDING_FILE: &str = "pending_reviews.jsonl";
pub const VERDICT_FILE: &str = "verdicts.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Caption,
    Refine,
    Conversation,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Generated,
    Approved,
    RejectedOnce,
    Regenerated,
    ManualRequired,
    ManualDone,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AuditEvent {
    Created,
    CaptionGenerated { prompt: String, caption: String },
    AnnotatorFailed { stage: Stage, error: String },
    Approved { attempt: u32 },
    Rejected { attempt: u32, reason: String },
    Regenerated { prompt: String, caption: String },
    ManualCaption { caption: String },
    ConversationGenerated { turns: Vec<TurnRecord> },
    ValidationFailed { violations: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub timestamp: String,
    pub actor: String,
    #[serde(flatten)]
    pub event: AuditEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub dataset: String,
    pub image: String,
    pub masks: Vec<String>,
    pub class_names: Vec<String>,
    pub stage: Stage,
    pub status: Status,
    pub caption: String,
    pub attempts: u32,
    pub conversation: Option<Vec<TurnRecord>>,
    pub audit: Vec<AuditEntry>,
}

impl AnnotationRecord {
    /// Fresh record for a manifest entry, before any event.
    pub fn initial(rec: &ManifestRecord, default_dataset: &str) -> Self {
        Self {
            image_id: rec.image_id.clone(),
            dataset: rec.dataset.clone().unwrap_or_else(|| default_dataset.to_string()),
            image: rec.image.clone(),
            masks: rec.masks.clone(),
            class_names: rec.class_names.clone(),
            stage: Stage::Caption,
            status: Status::Pending,
            caption: String::new(),
            attempts: 0,
            conversation: None,
            audit: Vec::new(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.stage == Stage::Done || self.status == Status::ManualRequired
    }

    /// Number of review decisions recorded so far.
    pub fn reviews(&self) -> usize {
        self.audit
            .iter()
            .filter(|e| matches!(e.event, AuditEvent::Approved { .. } | AuditEvent::Rejected { .. }))
            .count()
    }
}

fn illegal(rec: &AnnotationRecord, event: &AuditEvent) -> Error {
    Error::InvalidArgument(format!(
        "{}: event {:?} not allowed in stage {} with status {}",
        rec.image_id, event, rec.stage, rec.status
    ))
}

/// The state machine. Rejects any event that is not a legal transition from
/// the record's current state; on success the entry is appended to the audit.
pub fn apply(rec: &mut AnnotationRecord, entry: AuditEntry) -> Result<()> {
    use AuditEvent as E;
    use Stage as S;
    use Status as St;
    match (&entry.event, rec.stage, rec.status) {
        (E::Created, S::Caption, St::Pending) if rec.audit.is_empty() => {}
        (E::CaptionGenerated { caption, .. }, S::Caption, St::Pending) => {
            rec.caption = caption.clone();
            rec.attempts = 1;
            rec.status = St::Generated;
            rec.stage = S::Refine;
        }
        (E::AnnotatorFailed { stage, .. }, s, _) if *stage == s => {}
        (E::Approved { attempt }, S::Refine, St::Generated | St::Regenerated) if *attempt == rec.attempts => {
            rec.status = St::Approved;
            rec.stage = S::Conversation;
        }
        (E::Rejected { attempt, .. }, ..) if *attempt != rec.attempts => return Err(illegal(rec, &entry.event)),
        (E::Rejected { .. }, S::Refine, St::Generated) => rec.status = St::RejectedOnce,
        (E::Rejected { .. }, S::Refine, St::Regenerated) => rec.status = St::ManualRequired,
        (E::Regenerated { caption, .. }, S::Refine, St::RejectedOnce) => {
            rec.caption = caption.clone();
            rec.attempts = 2;
            rec.status = St::Regenerated;
        }
        (E::ManualCaption { caption }, S::Refine | S::Conversation, St::ManualRequired) => {
            rec.caption = caption.clone();
            rec.status = St::ManualDone;
            rec.stage = S::Conversation;
        }
        (E::ConversationGenerated { turns }, S::Conversation, St::Approved | St::ManualDone) => {
            rec.conversation = Some(turns.clone());
            rec.stage = S::Done;
        }
        (E::ValidationFailed { .. }, S::Conversation, St::Approved | St::ManualDone) => {
            rec.status = St::ManualRequired;
        }
        _ => return Err(illegal(rec, &entry.event)),
    }
    rec.audit.push(entry);
    Ok(())
}

/// Rebuilds a record from its manifest entry and audit trail.
pub fn replay(rec: &ManifestRecord, default_dataset: &str, audit: &[AuditEntry]) -> Result<AnnotationRecord> {
    let mut out = AnnotationRecord::initial(rec, default_dataset);
    for e in audit {
        apply(&mut out, e.clone())?;
    }
    Ok(out)
}

pub trait Clock {
    fn now(&self) -> String;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()
    }
}

/// Always the same timestamp; makes whole runs byte-reproducible.
pub struct FixedClock(pub String);

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.0.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRef {
    pub image_id: String,
    pub path: PathBuf,
    pub class_names: Vec<String>,
}

pub trait Annotator {
    fn name(&self) -> String;
    fn generate_caption(&self, prefix: &str, prompt: &str, image: &ImageRef) -> Result<String>;
    fn generate_conversation(&self, questions: &[String], caption: &str) -> Result<Conversation>;
}

/// Deterministic template annotator. Captions list the record's classes;
/// conversations ground every known class name the caption mentions, in
/// order of mention, in the answer to the first question.
pub struct MockAnnotator {
    classes: Vec<String>,
}

impl MockAnnotator {
    pub fn new<S: AsRef<str>>(extra_classes: &[S]) -> Self {
        let mut classes: Vec<String> = known_classes().map(String::from).collect();
        for c in extra_classes {
            if !classes.iter().any(|k| k == c.as_ref()) {
                classes.push(c.as_ref().to_string());
            }
        }
        Self { classes }
    }

    fn mentions(&self, caption: &str) -> Vec<String> {
        let lower = caption.to_lowercase();
        let mut found: Vec<(usize, String)> = Vec::new();
        for c in &self.classes {
            let mut from = 0;
            while let Some(i) = lower[from..].find(c.as_str()) {
                let at = from + i;
                let end = at + c.len();
                let boundary = |ch: Option<char>| ch.is_none_or(|ch| !ch.is_alphanumeric());
                if boundary(lower[..at].chars().last()) && boundary(lower[end..].chars().next()) {
                    found.push((at, c.clone()));
                }
                from = end;
            }
        }
        found.sort();
        found.into_iter().map(|(_, c)| c).collect()
    }
}

fn list_phrase(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Caption the mock annotator writes for a set of classes.
pub fn mock_caption(class_names: &[String], revised: bool) -> String {
    if class_names.is_empty() {
        return NEGATIVE_RESPONSE.to_string();
    }
    let lead = if revised { "On closer review, the image shows" } else { "The image shows" };
    format!("{lead} {}.", list_phrase(class_names))
}

impl Annotator for MockAnnotator {
    fn name(&self) -> String {
        "annotator:mock".into()
    }

    fn generate_caption(&self, _prefix: &str, prompt: &str, image: &ImageRef) -> Result<String> {
        Ok(mock_caption(&image.class_names, prompt.contains("Reviewer feedback")))
    }

    fn generate_conversation(&self, questions: &[String], caption: &str) -> Result<Conversation> {
        let mut turns = Vec::new();
        let mentioned = self.mentions(caption);
        for (i, q) in questions.iter().enumerate() {
            turns.push(Turn::user(q.clone()));
            let answer = if i > 0 {
                GroundedText::plain(format!("According to the findings: {}", caption.trim()))
            } else if mentioned.is_empty() {
                GroundedText::plain(NEGATIVE_RESPONSE)
            } else {
                let mut a = GroundedText::new().with_text("The image shows ");
                for (k, c) in mentioned.iter().enumerate() {
                    if k > 0 {
                        a.push_text(if k + 1 == mentioned.len() { " and " } else { ", " });
                    }
                    a.push_seg(c.clone());
                }
                a.with_text(".")
            };
            turns.push(Turn::assistant(answer));
        }
        Conversation::new(turns)
    }
}

/// Annotator backed by an HTTP endpoint.
///
/// `POST {endpoint}/caption` with `{prefix, prompt, image_id, image_png_base64}`
/// answers `{caption}`; `POST {endpoint}/conversation` with
/// `{questions, caption}` answers `{turns: [{role, text}]}`.
pub struct HttpAnnotator {
    endpoint: String,
    agent: ureq::Agent,
    retries: usize,
    backoff: Duration,
}

impl HttpAnnotator {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            agent,
            retries: 3,
            backoff: Duration::from_millis(200),
        }
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: &serde_json::Value) -> Result<T> {
        let url = format!("{}/{path}", self.endpoint);
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                sleep(self.backoff * 2u32.pow(attempt as u32 - 1));
            }
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => match resp.body_mut().read_json::<T>() {
                    Ok(v) => return Ok(v),
                    Err(e) => last = format!("bad response from {url}: {e}"),
                },
                Err(e) => last = format!("{url}: {e}"),
            }
            log::warn!("annotator attempt {} failed: {last}", attempt + 1);
        }
        Err(Error::AnnotatorUnavailable(last))
    }
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Deserialize)]
struct ConversationResponse {
    turns: Vec<TurnRecord>,
}

impl Annotator for HttpAnnotator {
    fn name(&self) -> String {
        format!("annotator:http:{}", self.endpoint)
    }

    fn generate_caption(&self, prefix: &str, prompt: &str, image: &ImageRef) -> Result<String> {
        let bytes = fs::read(&image.path).map_err(|e| Error::io(&image.path, e))?;
        let body = serde_json::json!({
            "prefix": prefix,
            "prompt": prompt,
            "image_id": image.image_id,
            "image_png_base64": base64::engine::general_purpose::STANDARD.encode(bytes),
        });
        let r: CaptionResponse = self.post("caption", &body)?;
        if r.caption.trim().is_empty() {
            return Err(Error::AnnotatorUnavailable("annotator returned an empty caption".into()));
        }
        Ok(r.caption)
    }

    fn generate_conversation(&self, questions: &[String], caption: &str) -> Result<Conversation> {
        let body = serde_json::json!({ "questions": questions, "caption": caption });
        let r: ConversationResponse = self.post("conversation", &body)?;
        Conversation::from_records(&r.turns)
            .map_err(|e| Error::AnnotatorUnavailable(format!("annotator returned an invalid conversation: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Approve,
    Reject(String),
    /// No decision yet; the record waits.
    Pending,
    /// A physician-written caption for a record needing manual work.
    Manual(String),
}

pub trait Reviewer {
    fn name(&self) -> String;
    fn review(&mut self, rec: &AnnotationRecord) -> Result<Verdict>;
}

fn unit_hash(parts: &[&str]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / 2f64.powi(64)
}

/// Approves each attempt independently with probability `accept_rate`,
/// decided by a hash of (seed, image id, attempt).
pub struct AutoReviewer {
    pub accept_rate: f64,
    pub seed: u64,
}

impl Reviewer for AutoReviewer {
    fn name(&self) -> String {
        "reviewer:auto".into()
    }

    fn review(&mut self, rec: &AnnotationRecord) -> Result<Verdict> {
        if rec.status == Status::ManualRequired {
            return Ok(Verdict::Pending);
        }
        let u = unit_hash(&[&self.seed.to_string(), &rec.image_id, &rec.attempts.to_string()]);
        Ok(if u < self.accept_rate {
            Verdict::Approve
        } else {
            Verdict::Reject("caption does not match the findings".into())
        })
    }
}

/// Rejects the first attempt of exactly `round(reject_first * n)` records and
/// both attempts of `round(reject_both * n)` of those; which records is
/// decided by a seeded hash ranking.
pub struct MockReviewer {
    plan: HashMap<String, u32>,
}

impl MockReviewer {
    pub fn new<S: AsRef<str>>(image_ids: &[S], reject_first: f64, reject_both: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&reject_first) || !(0.0..=reject_first).contains(&reject_both) {
            return Err(Error::Config(
                "mock reviewer needs 0 <= reject_both <= reject_first <= 1".into(),
            ));
        }
        let mut ranked: Vec<(f64, &str)> = image_ids
            .iter()
            .map(|id| (unit_hash(&[&seed.to_string(), id.as_ref()]), id.as_ref()))
            .collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let n = ranked.len() as f64;
        let both = (reject_both * n).round() as usize;
        let first = ((reject_first * n).round() as usize).max(both);
        let plan = ranked
            .iter()
            .enumerate()
            .map(|(i, (_, id))| {
                let rejections = if i < both {
                    2
                } else if i < first {
                    1
                } else {
                    0
                };
                (id.to_string(), rejections)
            })
            .collect();
        Ok(Self { plan })
    }

    pub fn planned_rejections(&self, image_id: &str) -> u32 {
        self.plan.get(image_id).copied().unwrap_or(0)
    }
}

impl Reviewer for MockReviewer {
    fn name(&self) -> String {
        "reviewer:mock".into()
    }

    fn review(&mut self, rec: &AnnotationRecord) -> Result<Verdict> {
        if rec.status == Status::ManualRequired {
            return Ok(Verdict::Pending);
        }
        Ok(if rec.attempts <= self.planned_rejections(&rec.image_id) {
            Verdict::Reject(format!("attempt {} misses or misnames a finding", rec.attempts))
        } else {
            Verdict::Approve
        })
    }
}

/// Replays a fixed verdict list per record; anything beyond it is pending.
#[derive(Default)]
pub struct ScriptedReviewer {
    pub script: HashMap<String, Vec<Verdict>>,
    pub unavailable: bool,
}

impl Reviewer for ScriptedReviewer {
    fn name(&self) -> String {
        "reviewer:scripted".into()
    }

    fn review(&mut self, rec: &AnnotationRecord) -> Result<Verdict> {
        if self.unavailable {
            return Err(Error::ReviewerUnavailable("scripted outage".into()));
        }
        let script = self.script.get(&rec.image_id).map(Vec::as_slice).unwrap_or_default();
        if rec.status == Status::ManualRequired {
            return Ok(script
                .iter()
                .find(|v| matches!(v, Verdict::Manual(_)))
                .cloned()
                .unwrap_or(Verdict::Pending));
        }
        let decisions: Vec<&Verdict> = script.iter().filter(|v| !matches!(v, Verdict::Manual(_))).collect();
        Ok(decisions.get(rec.reviews()).map(|v| (*v).clone()).unwrap_or(Verdict::Pending))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub image_id: String,
    /// `approve`, `reject` or `manual`.
    pub verdict: String,
    #[serde(default)]
    pub reason: String,
    /// Physician caption, for `manual`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// Human review through files: records awaiting a decision are exported to
/// `pending_reviews.jsonl`; decisions are read from `verdicts.jsonl`, where
/// the n-th approve/reject line for an image applies to its n-th review.
pub struct FileQueueReviewer {
    verdicts: HashMap<String, Vec<VerdictLine>>,
}

impl FileQueueReviewer {
    pub fn load(path: &Path) -> Result<Self> {
        let mut verdicts: HashMap<String, Vec<VerdictLine>> = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let v: VerdictLine = serde_json::from_str(line)
                    .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
                if !matches!(v.verdict.as_str(), "approve" | "reject" | "manual") {
                    return Err(Error::Config(format!(
                        "{}:{}: unknown verdict `{}`",
                        path.display(),
                        i + 1,
                        v.verdict
                    )));
                }
                verdicts.entry(v.image_id.clone()).or_default().push(v);
            }
        }
        Ok(Self { verdicts })
    }
}

impl Reviewer for FileQueueReviewer {
    fn name(&self) -> String {
        "reviewer:file_queue".into()
    }

    fn review(&mut self, rec: &AnnotationRecord) -> Result<Verdict> {
        let lines = self.verdicts.get(&rec.image_id).map(Vec::as_slice).unwrap_or_default();
        if rec.status == Status::ManualRequired {
            return Ok(lines
                .iter()
                .rev()
                .find(|v| v.verdict == "manual")
                .and_then(|v| v.caption.clone())
                .filter(|c| !c.trim().is_empty())
                .map_or(Verdict::Pending, Verdict::Manual));
        }
        let decisions: Vec<&VerdictLine> = lines.iter().filter(|v| v.verdict != "manual").collect();
        Ok(match decisions.get(rec.reviews()) {
            Some(v) if v.verdict == "approve" => Verdict::Approve,
            Some(v) => Verdict::Reject(v.reason.clone()),
            None => Verdict::Pending,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    /// `mock` or `http`.
    pub kind: String,
    pub endpoint: Option<String>,
    pub timeout_s: f64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            kind: "mock".into(),
            endpoint: None,
            timeout_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewerConfig {
    /// `auto`, `mock` or `file_queue`.
    pub kind: String,
    pub accept_rate: f64,
    pub reject_first: f64,
    pub reject_both: f64,
    pub seed: u64,
    /// Verdict file for `file_queue`; relative paths resolve against the
    /// output directory.
    pub verdicts: Option<PathBuf>,
}

impl Default for ReviewerConfig {
    fn default() -> Self {
        Self {
            kind: "auto".into(),
            accept_rate: 1.0,
            reject_first: 0.0,
            reject_both: 0.0,
            seed: 0,
            verdicts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub annotator: AnnotatorConfig,
    pub reviewer: ReviewerConfig,
    /// Dataset name to caption prefix; merged over the built-in table.
    pub prefixes: BTreeMap<String, String>,
    pub question_list: Vec<String>,
    pub prompt: String,
    pub default_dataset: String,
    /// Use this instead of wall-clock time in audit entries.
    pub fixed_timestamp: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            annotator: AnnotatorConfig::default(),
            reviewer: ReviewerConfig::default(),
            prefixes: BTreeMap::new(),
            question_list: vec![
                REASONING_QUESTION.to_string(),
                "What should the doctor pay attention to?".to_string(),
            ],
            prompt: DEFAULT_PROMPT.to_string(),
            default_dataset: "synthetic".into(),
            fixed_timestamp: None,
        }
    }
}

impl PipelineConfig {
    /// TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.question_list.is_empty() {
            return Err(Error::Config("question_list must not be empty".into()));
        }
        match self.annotator.kind.as_str() {
            "mock" => {}
            "http" if self.annotator.endpoint.is_some() => {}
            "http" => return Err(Error::Config("http annotator needs an endpoint".into())),
            other => return Err(Error::Config(format!("unknown annotator kind `{other}`"))),
        }
        if !(self.annotator.timeout_s > 0.0) {
            return Err(Error::Config("annotator timeout_s must be positive".into()));
        }
        match self.reviewer.kind.as_str() {
            "auto" if (0.0..=1.0).contains(&self.reviewer.accept_rate) => Ok(()),
            "auto" => Err(Error::Config("accept_rate must lie in [0, 1]".into())),
            "mock" | "file_queue" => Ok(()),
            other => Err(Error::Config(format!("unknown reviewer kind `{other}`"))),
        }
    }

    pub fn prefix_for(&self, dataset: &str) -> String {
        if let Some(p) = self.prefixes.get(dataset) {
            return p.clone();
        }
        match dataset {
            "covid-ct" => COVID_CT_PREFIX.to_string(),
            _ => GENERIC_PREFIX.to_string(),
        }
    }

    pub fn clock(&self) -> Box<dyn Clock> {
        match &self.fixed_timestamp {
            Some(t) => Box::new(FixedClock(t.clone())),
            None => Box::new(SystemClock),
        }
    }

    pub fn build_annotator(&self, classes: &[String]) -> Box<dyn Annotator> {
        match self.annotator.kind.as_str() {
            "http" => Box::new(HttpAnnotator::new(
                self.annotator.endpoint.clone().unwrap_or_default(),
                Duration::from_secs_f64(self.annotator.timeout_s),
            )),
            _ => Box::new(MockAnnotator::new(classes)),
        }
    }

    pub fn build_reviewer(&self, image_ids: &[String], out_dir: &Path) -> Result<Box<dyn Reviewer>> {
        let r = &self.reviewer;
        Ok(match r.kind.as_str() {
            "mock" => Box::new(MockReviewer::new(image_ids, r.reject_first, r.reject_both, r.seed)?),
            "file_queue" => {
                let path = r.verdicts.clone().unwrap_or_else(|| PathBuf::from(VERDICT_FILE));
                Box::new(FileQueueReviewer::load(&out_dir.join(path))?)
            }
            _ => Box::new(AutoReviewer {
                accept_rate: r.accept_rate,
                seed: r.seed,
            }),
        })
    }
}

/// Adjusted prompt for the second caption round.
pub fn adjusted_prompt(prompt: &str, reason: &str) -> String {
    format!("{prompt}\nReviewer feedback on the previous caption: {reason}")
}

fn entry(clock: &dyn Clock, actor: &str, event: AuditEvent) -> AuditEntry {
    AuditEntry {
        timestamp: clock.now(),
        actor: actor.to_string(),
        event,
    }
}

/// What the stage operations need besides the record itself.
pub struct StageContext<'a> {
    pub in_dir: &'a Path,
    pub cfg: &'a PipelineConfig,
    pub annotator: &'a dyn Annotator,
    pub clock: &'a dyn Clock,
}

impl StageContext<'_> {
    fn image_ref(&self, rec: &AnnotationRecord) -> Result<ImageRef> {
        Ok(ImageRef {
            image_id: rec.image_id.clone(),
            path: resolve(self.in_dir, &rec.image)?,
            class_names: rec.class_names.clone(),
        })
    }

    fn push(&self, rec: &mut AnnotationRecord, actor: &str, event: AuditEvent) -> Result<()> {
        apply(rec, entry(self.clock, actor, event))
    }
}

/// Stage 1: a caption for every pending record. An unavailable annotator
/// leaves the record pending.
pub fn stage1_caption(rec: &mut AnnotationRecord, ctx: &StageContext) -> Result<()> {
    if rec.stage != Stage::Caption {
        return Ok(());
    }
    let actor = ctx.annotator.name();
    let prefix = ctx.cfg.prefix_for(&rec.dataset);
    match ctx.annotator.generate_caption(&prefix, &ctx.cfg.prompt, &ctx.image_ref(rec)?) {
        Ok(caption) => ctx.push(
            rec,
            &actor,
            AuditEvent::CaptionGenerated {
                prompt: ctx.cfg.prompt.clone(),
                caption,
            },
        ),
        Err(Error::AnnotatorUnavailable(e)) => {
            log::warn!("{}: caption generation failed: {e}", rec.image_id);
            ctx.push(rec, &actor, AuditEvent::AnnotatorFailed { stage: Stage::Caption, error: e })
        }
        Err(e) => Err(e),
    }
}

/// Stage 2: review, one regeneration on rejection, manual escalation on a
/// second rejection. Returns `false` when the reviewer is unavailable.
pub fn stage2_refine(rec: &mut AnnotationRecord, ctx: &StageContext, reviewer: &mut dyn Reviewer) -> Result<bool> {
    loop {
        let awaiting_manual = rec.status == Status::ManualRequired && rec.conversation.is_none();
        if rec.stage != Stage::Refine && !(awaiting_manual && rec.stage == Stage::Conversation) {
            return Ok(true);
        }
        if rec.status == Status::RejectedOnce {
            let reason = rec
                .audit
                .iter()
                .rev()
                .find_map(|e| match &e.event {
                    AuditEvent::Rejected { reason, .. } => Some(reason.clone()),
                    _ => None,
                })
                .unwrap_or_default();
            let prompt = adjusted_prompt(&ctx.cfg.prompt, &reason);
            let prefix = ctx.cfg.prefix_for(&rec.dataset);
            let actor = ctx.annotator.name();
            match ctx.annotator.generate_caption(&prefix, &prompt, &ctx.image_ref(rec)?) {
                Ok(caption) => ctx.push(rec, &actor, AuditEvent::Regenerated { prompt, caption })?,
                Err(Error::AnnotatorUnavailable(e)) => {
                    ctx.push(rec, &actor, AuditEvent::AnnotatorFailed { stage: Stage::Refine, error: e })?;
                    return Ok(true);
                }
                Err(e) => return Err(e),
            }
            continue;
        }
        let verdict = match reviewer.review(rec) {
            Ok(v) => v,
            Err(Error::ReviewerUnavailable(e)) => {
                log::warn!("review suspended: {e}");
                return Ok(false);
            }
            Err(e) => return Err(e),
        };
        let actor = reviewer.name();
        let attempt = rec.attempts;
        match (verdict, rec.status) {
            (Verdict::Pending, _) => return Ok(true),
            (Verdict::Manual(caption), Status::ManualRequired) => {
                ctx.push(rec, "physician", AuditEvent::ManualCaption { caption })?;
            }
            (_, Status::ManualRequired) | (Verdict::Manual(_), _) => return Ok(true),
            (Verdict::Approve, _) => ctx.push(rec, &actor, AuditEvent::Approved { attempt })?,
            (Verdict::Reject(reason), _) => ctx.push(rec, &actor, AuditEvent::Rejected { attempt, reason })?,
        }
    }
}

fn load_sample(in_dir: &Path, rec: &AnnotationRecord, conversation: Conversation) -> Result<Sample> {
    let read = |rel: &str| -> Result<Vec<u8>> {
        let p = resolve(in_dir, rel)?;
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    Ok(Sample {
        image_id: rec.image_id.clone(),
        image: image_from_png(&read(&rec.image)?)?,
        masks: rec
            .masks
            .iter()
            .map(|m| mask_from_png(&read(m)?))
            .collect::<Result<Vec<_>>>()?,
        conversation,
        class_names: rec.class_names.clone(),
    })
}

/// Stage 3: grounded conversation from the refined caption, validated against
/// the record's masks.
pub fn stage3_conversation(rec: &mut AnnotationRecord, ctx: &StageContext) -> Result<()> {
    if rec.stage != Stage::Conversation || rec.status == Status::ManualRequired {
        return Ok(());
    }
    let actor = ctx.annotator.name();
    let conv = match ctx.annotator.generate_conversation(&ctx.cfg.question_list, &rec.caption) {
        Ok(c) => c,
        Err(Error::AnnotatorUnavailable(e)) => {
            return ctx.push(rec, &actor, AuditEvent::AnnotatorFailed { stage: Stage::Conversation, error: e });
        }
        Err(e) => return Err(e),
    };
    let turns = conv.to_records();
    let violations: Vec<String> = validate_sample(&load_sample(ctx.in_dir, rec, conv)?)
        .iter()
        .map(ToString::to_string)
        .collect();
    if violations.is_empty() {
        ctx.push(rec, &actor, AuditEvent::ConversationGenerated { turns })
    } else {
        log::warn!("{}: generated conversation rejected: {violations:?}", rec.image_id);
        ctx.push(rec, "pipeline", AuditEvent::ValidationFailed { violations })
    }
}

fn state_path(out_dir: &Path, image_id: &str) -> PathBuf {
    out_dir.join(STATE_DIR).join(format!("{image_id}.json"))
}

/// Temp file then rename, so a crash never leaves a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("state");
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn save_record(out_dir: &Path, rec: &AnnotationRecord) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(rec)?;
    bytes.push(b'\n');
    write_atomic(&state_path(out_dir, &rec.image_id), &bytes)
}

pub fn load_record_state(path: &Path) -> Result<AnnotationRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rec: AnnotationRecord = serde_json::from_slice(&bytes).map_err(|e| Error::CorruptState {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if rec.attempts > 2 {
        return Err(Error::CorruptState {
            path: path.to_path_buf(),
            reason: format!("attempts = {}", rec.attempts),
        });
    }
    Ok(rec)
}

fn validate_image_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        return Err(Error::Dataset(format!("image_id `{id}` is not a safe file name")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub total: usize,
    pub done: usize,
    pub manual_required: usize,
    pub in_progress: usize,
    pub by_status: BTreeMap<String, usize>,
    pub review_suspended: bool,
}

fn summarize(records: &[AnnotationRecord], suspended: bool) -> PipelineSummary {
    let mut by_status = BTreeMap::new();
    for r in records {
        *by_status.entry(format!("{}/{}", r.stage, r.status)).or_insert(0) += 1;
    }
    let done = records.iter().filter(|r| r.stage == Stage::Done).count();
    let manual = records.iter().filter(|r| r.status == Status::ManualRequired).count();
    PipelineSummary {
        total: records.len(),
        done,
        manual_required: manual,
        in_progress: records.len() - done - manual,
        by_status,
        review_suspended: suspended,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunInfo {
    in_dir: PathBuf,
    config: PipelineConfig,
}

#[derive(Serialize)]
struct AuditLine<'a> {
    image_id: &'a str,
    #[serde(flatten)]
    entry: &'a AuditEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecordLine {
    pub image_id: String,
    #[serde(flatten)]
    pub entry: AuditEntry,
}

#[derive(Serialize)]
struct PendingLine<'a> {
    image_id: &'a str,
    /// `review` for a caption decision, `manual` for a physician caption.
    kind: &'a str,
    attempt: u32,
    caption: &'a str,
    image: &'a str,
}

fn write_outputs(in_dir: &Path, out_dir: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut manifest = Vec::new();
    let mut audit = Vec::new();
    let mut pending = Vec::new();
    for r in records {
        for e in &r.audit {
            serde_json::to_writer(&mut audit, &AuditLine { image_id: &r.image_id, entry: e })?;
            audit.push(b'\n');
        }
        let kind = match (r.stage, r.status) {
            (Stage::Refine, Status::Generated | Status::Regenerated) => Some("review"),
            (_, Status::ManualRequired) => Some("manual"),
            _ => None,
        };
        if let Some(kind) = kind {
            let line = PendingLine {
                image_id: &r.image_id,
                kind,
                attempt: r.attempts,
                caption: &r.caption,
                image: &r.image,
            };
            serde_json::to_writer(&mut pending, &line)?;
            pending.push(b'\n');
        }
        let Some(turns) = r.conversation.as_ref().filter(|_| r.stage == Stage::Done) else {
            continue;
        };
        let rec = ManifestRecord {
            image_id: r.image_id.clone(),
            dataset: Some(r.dataset.clone()),
            image: r.image.clone(),
            masks: r.masks.clone(),
            class_names: r.class_names.clone(),
            conversation: turns.clone(),
        };
        for rel in std::iter::once(&rec.image).chain(&rec.masks) {
            let src = resolve(in_dir, rel)?;
            let bytes = fs::read(&src).map_err(|e| Error::io(&src, e))?;
            let dst = resolve(out_dir, rel)?;
            if fs::read(&dst).ok().as_deref() != Some(&bytes[..]) {
                dataset::write_file(&dst, &bytes)?;
            }
        }
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.push(b'\n');
    }
    write_atomic(&out_dir.join(dataset::MANIFEST), &manifest)?;
    write_atomic(&out_dir.join(AUDIT_FILE), &audit)?;
    write_atomic(&out_dir.join(PENDING_FILE), &pending)
}

/// Drives every record as far as the annotator and reviewer allow, then
/// writes `manifest.jsonl` (finished records, dataset format), `audit.jsonl`
/// and `pending_reviews.jsonl`. Existing state in `out_dir` is resumed;
/// a finished directory is left byte-identical.
pub fn run_with(
    in_dir: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
    annotator: &dyn Annotator,
    reviewer: &mut dyn Reviewer,
    clock: &dyn Clock,
) -> Result<PipelineSummary> {
    cfg.validate()?;
    let manifest = read_manifest(in_dir)?;
    let ctx = StageContext {
        in_dir,
        cfg,
        annotator,
        clock,
    };
    // Load everything first so a corrupt state file fails before any write.
    let mut records = Vec::with_capacity(manifest.len());
    for m in &manifest {
        validate_image_id(&m.image_id)?;
        let path = state_path(out_dir, &m.image_id);
        let rec = if path.exists() {
            let r = load_record_state(&path)?;
            if r.image_id != m.image_id {
                return Err(Error::CorruptState {
                    path,
                    reason: format!("holds record `{}`", r.image_id),
                });
            }
            r
        } else {
            AnnotationRecord::initial(m, &cfg.default_dataset)
        };
        records.push(rec);
    }
    let mut suspended = false;
    for rec in &mut records {
        let before = rec.clone();
        if rec.audit.is_empty() {
            ctx.push(rec, "pipeline", AuditEvent::Created)?;
        }
        stage1_caption(rec, &ctx)?;
        if !suspended && !stage2_refine(rec, &ctx, reviewer)? {
            suspended = true;
        }
        stage3_conversation(rec, &ctx)?;
        if *rec != before {
            save_record(out_dir, rec)?;
        }
    }
    let info = RunInfo {
        in_dir: in_dir.to_path_buf(),
        config: cfg.clone(),
    };
    write_atomic(&out_dir.join(RUN_FILE), &serde_json::to_vec_pretty(&info)?)?;
    write_outputs(in_dir, out_dir, &records)?;
    Ok(summarize(&records, suspended))
}

/// [`run_with`] using the annotator, reviewer and clock the config selects.
pub fn run_pipeline(in_dir: &Path, out_dir: &Path, cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    let manifest = read_manifest(in_dir)?;
    let ids: Vec<String> = manifest.iter().map(|m| m.image_id.clone()).collect();
    let mut classes: Vec<String> = manifest.iter().flat_map(|m| m.class_names.clone()).collect();
    classes.sort();
    classes.dedup();
    let annotator = cfg.build_annotator(&classes);
    let mut reviewer = cfg.build_reviewer(&ids, out_dir)?;
    let clock = cfg.clock();
    run_with(in_dir, out_dir, cfg, annotator.as_ref(), reviewer.as_mut(), clock.as_ref())
}

/// Continues a previous run using the input directory and config it recorded.
pub fn resume_pipeline(out_dir: &Path) -> Result<PipelineSummary> {
    let path = out_dir.join(RUN_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let info: RunInfo = serde_json::from_slice(&bytes).map_err(|e| Error::CorruptState {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    run_pipeline(&info.in_dir, out_dir, &info.config)
}

/// Every record state in `out_dir`, sorted by image id.
pub fn load_states(out_dir: &Path) -> Result<Vec<AnnotationRecord>> {
    let dir = out_dir.join(STATE_DIR);
    let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&dir, e)),
    };
    paths.sort();
    paths.iter().map(|p| load_record_state(p)).collect()
}

pub fn pipeline_status(out_dir: &Path) -> Result<PipelineSummary> {
    Ok(summarize(&load_states(out_dir)?, false))
}

/// Reads `audit.jsonl` grouped by image id, in file order.
pub fn read_audit(out_dir: &Path) -> Result<BTreeMap<String, Vec<AuditEntry>>> {
    let path = out_dir.join(AUDIT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out: BTreeMap<String, Vec<AuditEntry>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: AuditRecordLine = serde_json::from_str(line).map_err(|e| Error::CorruptState {
            path: path.clone(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.entry(l.image_id).or_default().push(l.entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_rec(id: &str, classes: &[&str]) -> ManifestRecord {
        ManifestRecord {
            image_id: id.into(),
            dataset: None,
            image: format!("images/{id}.png"),
            masks: (0..classes.len()).map(|k| format!("masks/{id}_{k}.png")).collect(),
            class_names: classes.iter().map(|s| s.to_string()).collect(),
            conversation: vec![],
        }
    }

    fn e(event: AuditEvent) -> AuditEntry {
        AuditEntry {
            timestamp: "t".into(),
            actor: "test".into(),
            event,
        }
    }

    fn gen(c: &str) -> AuditEvent {
        AuditEvent::CaptionGenerated {
            prompt: "p".into(),
            caption: c.into(),
        }
    }

    #[test]
    fn reject_then_approve() {
        let mut r = AnnotationRecord::initial(&manifest_rec("a", &["nodule"]), "synthetic");
        for ev in [
            AuditEvent::Created,
            gen("x"),
            AuditEvent::Rejected { attempt: 1, reason: "no".into() },
        ] {
            apply(&mut r, e(ev)).unwrap();
        }
        assert_eq!(r.status, Status::RejectedOnce);
        apply(&mut r, e(AuditEvent::Regenerated { prompt: "p2".into(), caption: "y".into() })).unwrap();
        apply(&mut r, e(AuditEvent::Approved { attempt: 2 })).unwrap();
        assert_eq!((r.stage, r.status, r.attempts), (Stage::Conversation, Status::Approved, 2));
    }

    #[test]
    fn illegal_transitions_are_refused() {
        let mut r = AnnotationRecord::initial(&manifest_rec("a", &[]), "synthetic");
        assert!(apply(&mut r, e(AuditEvent::Approved { attempt: 0 })).is_err());
        apply(&mut r, e(AuditEvent::Created)).unwrap();
        assert!(apply(&mut r, e(AuditEvent::Created)).is_err());
        apply(&mut r, e(gen("x"))).unwrap();
        assert!(apply(&mut r, e(AuditEvent::Regenerated { prompt: "p".into(), caption: "c".into() })).is_err());
        assert!(apply(&mut r, e(AuditEvent::Approved { attempt: 2 })).is_err());
        assert!(apply(&mut r, e(AuditEvent::ConversationGenerated { turns: vec![] })).is_err());
    }

    #[test]
    fn mock_caption_and_conversation() {
        let a = MockAnnotator::new::<&str>(&[]);
        let img = ImageRef {
            image_id: "x".into(),
            path: PathBuf::from("x.png"),
            class_names: vec!["nodule".into(), "cyst".into()],
        };
        let cap = a.generate_caption(GENERIC_PREFIX, DEFAULT_PROMPT, &img).unwrap();
        assert_eq!(cap, "The image shows nodule and cyst.");
        let conv = a.generate_conversation(&PipelineConfig::default().question_list, &cap).unwrap();
        assert_eq!(conv.turns().len(), 4);
        assert_eq!(
            conv.turns()[1].text(),
            "The image shows <p> nodule </p> [SEG] and <p> cyst </p> [SEG]."
        );
        assert_eq!(conv.turns()[3].content.slot_count(), 0);
        let none = a.generate_conversation(&[REASONING_QUESTION.into()], NEGATIVE_RESPONSE).unwrap();
        assert_eq!(crate::protocol::count_seg_slots(&none), 0);
    }

    #[test]
    fn prefix_table() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.prefix_for("covid-ct"), COVID_CT_PREFIX);
        assert_eq!(cfg.prefix_for("elsewhere"), GENERIC_PREFIX);
    }

    #[test]
    fn mock_reviewer_quotas_are_exact() {
        let ids: Vec<String> = (0..50).map(|i| format!("r{i}")).collect();
        let m = MockReviewer::new(&ids, 0.3, 0.1, 4).unwrap();
        let first = ids.iter().filter(|i| m.planned_rejections(i) >= 1).count();
        let both = ids.iter().filter(|i| m.planned_rejections(i) == 2).count();
        assert_eq!((first, both), (15, 5));
    }

    #[test]
    fn config_parses_toml() {
        let cfg: PipelineConfig = toml::from_str(
            r#"
            question_list = ["Q?"]
            [annotator]
            kind = "http"
            endpoint = "http://localhost:1"
            timeout_s = 2
            [reviewer]
            kind = "auto"
            accept_rate = 0.5
            [prefixes]
            my-set = "Imagine"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.prefix_for("my-set"), "Imagine");
        assert_eq!(cfg.annotator.kind, "http");
        let bad: PipelineConfig = toml::from_str("[reviewer]\nkind = \"oracle\"").unwrap();
        assert!(bad.validate().is_err());
    }
}
