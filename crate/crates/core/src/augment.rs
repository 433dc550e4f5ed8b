//! Synthesis of similar-but-incorrect variants through a teacher model.
//!
//! Each `(instruction, correct)` record is rendered into a two-part prompt and
//! sent to a chat-completions endpoint. The first fenced code block of the
//! reply is the candidate variant; it is accepted only when it differs from
//! the correct code and its normalized edit similarity clears a threshold.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::align::text_sha256;
use crate::dataset::{PairMeta, PairRecord, SourceRecord};
use crate::diff;

pub const DEFAULT_API_KEY_ENV: &str = "FAFT_API_KEY";
pub const DEFAULT_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
const EXCERPT_CHARS: usize = 200;

/// Prompt sent to the teacher. `{problem}` and `{solution}` are replaced
/// verbatim; everything else is fixed.
pub const PROMPT_TEMPLATE: &str = "\
You will be given a programming problem and a correct solution to it. \
Write an incorrect solution to the same problem.

Requirements:
- The incorrect solution must be similar to the correct solution. Keep its \
structure, names and style, and change only a small part so that the program \
no longer solves the problem correctly.
- Do not explain the change and do not add comments that reveal it.
- Your output is constrained to markdown formatting: reply with the complete \
incorrect solution inside a single fenced code block and nothing else.

### Problem
{problem}

### Correct Solution
{solution}
";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid teacher config: {0}")]
    InvalidConfig(String),
    #[error("progress journal {path}: {source}")]
    Journal { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    /// Total attempts per record, counting the first.
    pub max_retries: u32,
    #[serde(with = "secs")]
    pub request_timeout: Duration,
    pub parallelism: usize,
    pub api_key_env: String,
    /// Delay before the second attempt; doubles on each further attempt.
    #[serde(with = "secs")]
    pub retry_backoff: Duration,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            endpoint_url: "http://localhost:8000/v1".into(),
            model_name: "teacher".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_retries: 3,
            request_timeout: Duration::from_secs(120),
            parallelism: 1,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            retry_backoff: Duration::from_millis(500),
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(AugmentError::InvalidConfig(format!("temperature {} outside [0,2]", self.temperature)));
        }
        if self.parallelism == 0 {
            return Err(AugmentError::InvalidConfig("parallelism must be at least 1".into()));
        }
        if self.max_retries == 0 {
            return Err(AugmentError::InvalidConfig("max_retries must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fills `{name}` placeholders in one pass, so placeholder-like text inside
/// the substituted values is left alone.
fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open..];
        for (name, value) in values {
            let placeholder = format!("{{{name}}}");
            if after.starts_with(&placeholder) {
                out.push_str(value);
                rest = &after[placeholder.len()..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &after[1..];
    }
    out.push_str(rest);
    out
}

pub fn render_prompt(instruction: &str, correct: &str) -> Result<String, AugmentError> {
    if instruction.is_empty() {
        return Err(AugmentError::EmptyInput("instruction"));
    }
    if correct.is_empty() {
        return Err(AugmentError::EmptyInput("correct solution"));
    }
    Ok(fill_template(PROMPT_TEMPLATE, &[("problem", instruction), ("solution", correct)]))
}

/// Contents of the first fenced code block (opening fence may carry a
/// language tag). The terminator of the block's last line is dropped, so at
/// most one trailing newline survives.
pub fn extract_code_block(raw: &str) -> Option<String> {
    let mut lines = raw.split_inclusive('\n');
    let fence = loop {
        let line = lines.next()?;
        let trimmed = line.trim_start();
        if trimmed.starts_with("```") {
            break trimmed.chars().take_while(|&c| c == '`').count();
        }
    };
    let mut body = String::new();
    for line in lines {
        let trimmed = line.trim();
        if trimmed.len() >= fence && trimmed.chars().all(|c| c == '`') {
            return Some(trim_block(body));
        }
        body.push_str(line);
    }
    None
}

fn trim_block(mut body: String) -> String {
    if body.ends_with('\n') {
        body.pop();
        if body.ends_with('\r') {
            body.pop();
        }
    }
    body
}

/// `1 - levenshtein / max_len`, over chars. Two empty strings score 1.
pub fn similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - diff::levenshtein(a, b) as f64 / max_len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantStatus {
    Accepted,
    RejectedIdentical,
    RejectedDissimilar,
    ExtractionFailed,
    RequestFailed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutcome {
    pub similarity: f64,
    pub status: VariantStatus,
}

pub fn similarity_gate(correct: &str, candidate: &str, threshold: f64) -> GateOutcome {
    let sim = similarity(correct, candidate);
    let status = if candidate == correct {
        VariantStatus::RejectedIdentical
    } else if sim >= threshold {
        VariantStatus::Accepted
    } else {
        VariantStatus::RejectedDissimilar
    };
    GateOutcome { similarity: sim, status }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub code: Option<String>,
    pub similarity: f64,
    pub status: VariantStatus,
    pub attempts: u32,
    pub raw_excerpt: String,
}

fn excerpt(raw: &str) -> String {
    raw.chars().take(EXCERPT_CHARS).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestFailure {
    pub attempts: u32,
    pub last_error: String,
}

/// Blocking chat-completions client.
pub struct TeacherClient {
    cfg: TeacherConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl TeacherClient {
    /// Resolves the API key; fails before any request when it is unset.
    pub fn new(cfg: TeacherConfig) -> Result<Self, AugmentError> {
        cfg.validate()?;
        let api_key =
            std::env::var(&cfg.api_key_env).map_err(|_| AugmentError::MissingApiKey(cfg.api_key_env.clone()))?;
        Ok(Self::with_key(cfg, api_key))
    }

    pub fn with_key(cfg: TeacherConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        TeacherClient { cfg, api_key, agent }
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.endpoint_url.trim_end_matches('/'))
    }

    fn request_once(&self, prompt: &str) -> Result<String, String> {
        let body = json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
        });
        let mut resp = self
            .agent
            .post(&self.url())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(format!("HTTP {}: {}", status.as_u16(), excerpt(&text)));
        }
        let value: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }

    fn backoff(&self, attempt: u32) {
        if attempt > 1 && !self.cfg.retry_backoff.is_zero() {
            std::thread::sleep(self.cfg.retry_backoff * 2u32.saturating_pow(attempt - 2));
        }
    }

    /// One assistant message, retrying transport and status failures.
    pub fn request_variant(&self, prompt: &str) -> Result<String, RequestFailure> {
        let mut last_error = String::new();
        for attempt in 1..=self.cfg.max_retries {
            self.backoff(attempt);
            match self.request_once(prompt) {
                Ok(content) => return Ok(content),
                Err(e) => {
                    log::warn!("teacher request attempt {attempt} failed: {e}");
                    last_error = e;
                }
            }
        }
        Err(RequestFailure { attempts: self.cfg.max_retries, last_error })
    }

    /// Requests until a fenced block is extracted or attempts run out, then
    /// applies the similarity gate.
    pub fn generate_variant(
        &self,
        instruction: &str,
        correct: &str,
        threshold: f64,
    ) -> Result<VariantResult, AugmentError> {
        let prompt = render_prompt(instruction, correct)?;
        let mut last_raw = String::new();
        let mut last_status = VariantStatus::RequestFailed;
        for attempt in 1..=self.cfg.max_retries {
            self.backoff(attempt);
            let raw = match self.request_once(&prompt) {
                Ok(raw) => raw,
                Err(e) => {
                    log::warn!("teacher request attempt {attempt} failed: {e}");
                    last_status = VariantStatus::RequestFailed;
                    last_raw = e;
                    continue;
                }
            };
            let Some(code) = extract_code_block(&raw) else {
                last_status = VariantStatus::ExtractionFailed;
                last_raw = raw;
                continue;
            };
            let gate = similarity_gate(correct, &code, threshold);
            return Ok(VariantResult {
                code: Some(code),
                similarity: gate.similarity,
                status: gate.status,
                attempts: attempt,
                raw_excerpt: excerpt(&raw),
            });
        }
        Ok(VariantResult {
            code: None,
            similarity: 0.0,
            status: last_status,
            attempts: self.cfg.max_retries,
            raw_excerpt: excerpt(&last_raw),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub accepted: usize,
    pub rejected_identical: usize,
    pub rejected_dissimilar: usize,
    pub extraction_failed: usize,
    pub request_failed: usize,
    /// Accepted records restored from the journal without a request.
    pub resumed: usize,
}

impl AugmentStats {
    fn count(&mut self, status: VariantStatus) {
        match status {
            VariantStatus::Accepted => self.accepted += 1,
            VariantStatus::RejectedIdentical => self.rejected_identical += 1,
            VariantStatus::RejectedDissimilar => self.rejected_dissimilar += 1,
            VariantStatus::ExtractionFailed => self.extraction_failed += 1,
            VariantStatus::RequestFailed => self.request_failed += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.accepted
            + self.rejected_identical
            + self.rejected_dissimilar
            + self.extraction_failed
            + self.request_failed
    }
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub id: String,
    pub status: VariantStatus,
    pub variant_sha256: Option<String>,
    pub similarity: f64,
    pub attempts: u32,
    pub code: Option<String>,
}

impl JournalEntry {
    fn new(id: &str, r: &VariantResult) -> Self {
        JournalEntry {
            id: id.to_string(),
            status: r.status,
            variant_sha256: r.code.as_deref().map(text_sha256),
            similarity: r.similarity,
            attempts: r.attempts,
            code: r.code.clone(),
        }
    }

    fn restore(&self) -> Option<VariantResult> {
        let code = self.code.as_ref()?;
        if self.status != VariantStatus::Accepted || self.variant_sha256.as_deref() != Some(&text_sha256(code)) {
            return None;
        }
        Some(VariantResult {
            code: Some(code.clone()),
            similarity: self.similarity,
            status: VariantStatus::Accepted,
            attempts: 0,
            raw_excerpt: String::new(),
        })
    }
}

/// Accepted entries from a journal, keyed by record id. A torn final line is
/// skipped.
pub fn load_journal(path: &Path) -> Result<HashMap<String, JournalEntry>, AugmentError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(source) => return Err(AugmentError::Journal { path: path.to_path_buf(), source }),
    };
    let mut entries = HashMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| AugmentError::Journal { path: path.to_path_buf(), source })?;
        match serde_json::from_str::<JournalEntry>(&line) {
            Ok(entry) if entry.status == VariantStatus::Accepted => {
                entries.insert(entry.id.clone(), entry);
            }
            Ok(entry) => {
                entries.remove(&entry.id);
            }
            Err(e) if !line.trim().is_empty() => log::warn!("journal line {} unreadable, ignored: {e}", n + 1),
            Err(_) => {}
        }
    }
    Ok(entries)
}

/// Opens the journal for appending. A torn final line left by an interrupted
/// run is terminated first so the next entry starts on a line of its own.
fn open_journal(path: &Path) -> std::io::Result<File> {
    let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
    let len = file.metadata()?.len();
    if len > 0 {
        let mut last = [0u8];
        file.seek(SeekFrom::Start(len - 1))?;
        file.read_exact(&mut last)?;
        if last[0] != b'\n' {
            file.write_all(b"\n")?;
        }
    }
    Ok(file)
}

#[derive(Debug, Clone)]
pub struct AugmentOutcome {
    pub pairs: Vec<PairRecord>,
    pub results: Vec<VariantResult>,
    pub stats: AugmentStats,
}

#[derive(Debug, Clone)]
pub struct AugmentOptions<'a> {
    pub threshold: f64,
    pub journal: Option<&'a Path>,
    /// Timestamp recorded in every produced pair's metadata.
    pub created_at: String,
}

/// Generates one variant per record under a bounded worker pool.
///
/// Output order follows input order. With a journal, accepted records from
/// an earlier run are restored without contacting the teacher and new
/// outcomes are appended as they complete.
pub fn augment_dataset(
    records: &[SourceRecord],
    client: &TeacherClient,
    opts: &AugmentOptions<'_>,
) -> Result<AugmentOutcome, AugmentError> {
    let journal_err =
        |source| AugmentError::Journal { path: opts.journal.map(Path::to_path_buf).unwrap_or_default(), source };
    let done = match opts.journal {
        Some(p) => load_journal(p)?,
        None => HashMap::new(),
    };
    let mut journal = match opts.journal {
        Some(p) => Some(open_journal(p).map_err(journal_err)?),
        None => None,
    };

    let mut results: Vec<Option<VariantResult>> = vec![None; records.len()];
    let mut pending = Vec::new();
    let mut resumed = 0;
    for (i, rec) in records.iter().enumerate() {
        match done.get(&rec.id).and_then(JournalEntry::restore) {
            Some(r) => {
                results[i] = Some(r);
                resumed += 1;
            }
            _ => pending.push(i),
        }
    }

    let next = AtomicUsize::new(0);
    let workers = client.config().parallelism.min(pending.len()).max(1);
    let (tx, rx) = mpsc::channel::<(usize, VariantResult)>();
    std::thread::scope(|scope| -> Result<(), AugmentError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending) = (&next, &pending);
            scope.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(slot) else { break };
                let rec = &records[i];
                let result =
                    client.generate_variant(&rec.instruction, &rec.correct, opts.threshold).unwrap_or_else(|e| {
                        VariantResult {
                            code: None,
                            similarity: 0.0,
                            status: VariantStatus::RequestFailed,
                            attempts: 0,
                            raw_excerpt: e.to_string(),
                        }
                    });
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            if let Some(file) = journal.as_mut() {
                let line = serde_json::to_string(&JournalEntry::new(&records[i].id, &result)).expect("journal entry");
                writeln!(file, "{line}").and_then(|_| file.flush()).map_err(journal_err)?;
            }
            results[i] = Some(result);
        }
        Ok(())
    })?;

    let mut stats = AugmentStats { resumed, ..Default::default() };
    let mut pairs = Vec::new();
    let results: Vec<VariantResult> = results.into_iter().map(|r| r.expect("every record processed")).collect();
    for (rec, result) in records.iter().zip(&results) {
        stats.count(result.status);
        if result.status == VariantStatus::Accepted {
            pairs.push(PairRecord {
                id: rec.id.clone(),
                instruction: rec.instruction.clone(),
                correct: rec.correct.clone(),
                incorrect: result.code.clone().expect("accepted variant has code"),
                meta: Some(PairMeta {
                    teacher_model: client.config().model_name.clone(),
                    similarity: result.similarity,
                    created_at: opts.created_at.clone(),
                }),
            });
        }
    }
    Ok(AugmentOutcome { pairs, results, stats })
}
