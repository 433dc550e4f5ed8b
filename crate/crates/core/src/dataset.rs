//! Line-delimited JSON record formats shared by every pipeline stage.
//!
//! Each file holds one JSON object per line. Files written by the `faft`
//! tool start with a header object `{"faft_header": {...}}`; readers accept
//! files with or without it. Keys are always written in declaration order.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::align::{self, MaskSet};
use crate::diff;

pub const HEADER_KEY: &str = "faft_header";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: field `{field}`: {reason}")]
    SchemaViolation { line: usize, field: String, reason: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.display().to_string(), source }
    }

    fn violation(line: usize, field: impl Into<String>, reason: impl Into<String>) -> Self {
        DatasetError::SchemaViolation { line, field: field.into(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    Source,
    Pair,
    Masked,
    Trace,
    Report,
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Source => "source",
            Schema::Pair => "pair",
            Schema::Masked => "masked",
            Schema::Trace => "trace",
            Schema::Report => "report",
        })
    }
}

/// A record type stored in a line-delimited JSON file.
pub trait Record: Serialize + DeserializeOwned {
    const SCHEMA: Schema;
    /// Top-level keys every line must carry.
    const REQUIRED: &'static [&'static str];

    fn id(&self) -> &str;

    /// Semantic checks beyond the JSON shape, as `(field, reason)`.
    fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.id().is_empty() {
            return Err(("id", "must be non-empty".into()));
        }
        Ok(())
    }
}

/// Provenance header written as the first line of every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: Value,
}

impl Header {
    pub fn new(subcommand: &str, config: Value) -> Self {
        Header { tool: "faft".into(), version: env!("CARGO_PKG_VERSION").into(), subcommand: subcommand.into(), config }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    faft_header: Header,
}

/// Input to augmentation: an instruction and its correct solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRecord {
    pub id: String,
    pub instruction: String,
    pub correct: String,
}

impl Record for SourceRecord {
    const SCHEMA: Schema = Schema::Source;
    const REQUIRED: &'static [&'static str] = &["id", "instruction", "correct"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        non_empty("id", &self.id)?;
        non_empty("instruction", &self.instruction)?;
        non_empty("correct", &self.correct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMeta {
    pub teacher_model: String,
    pub similarity: f64,
    pub created_at: String,
}

/// One instruction with its correct solution and a similar incorrect variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub instruction: String,
    pub correct: String,
    pub incorrect: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<PairMeta>,
}

impl Record for PairRecord {
    const SCHEMA: Schema = Schema::Pair;
    const REQUIRED: &'static [&'static str] = &["id", "instruction", "correct", "incorrect"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        non_empty("id", &self.id)?;
        non_empty("correct", &self.correct)?;
        non_empty("incorrect", &self.incorrect)?;
        if self.correct == self.incorrect {
            return Err(("incorrect", "identical to correct".into()));
        }
        if let Some(meta) = &self.meta {
            if !(0.0..=1.0).contains(&meta.similarity) {
                return Err(("meta", format!("similarity {} outside [0,1]", meta.similarity)));
            }
        }
        Ok(())
    }
}

/// A pair together with its token spans and masks.
///
/// Spans are char offsets into the CRLF-normalized code stored alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedRecord {
    pub id: String,
    pub instruction: String,
    pub correct: String,
    pub incorrect: String,
    pub tokenizer_id: String,
    pub spans_correct: Vec<[usize; 2]>,
    pub spans_incorrect: Vec<[usize; 2]>,
    pub hybrid_correct: Vec<u8>,
    pub hybrid_incorrect: Vec<u8>,
    pub line_mask_correct: Vec<u8>,
    pub line_mask_incorrect: Vec<u8>,
}

impl MaskedRecord {
    pub fn from_masks(pair: &PairRecord, masks: &MaskSet) -> Self {
        let spans = |s: &align::TokenSpans| s.spans.iter().map(|&(a, b)| [a, b]).collect();
        let bits = |m: &[bool]| m.iter().map(|&b| u8::from(b)).collect();
        MaskedRecord {
            id: pair.id.clone(),
            instruction: pair.instruction.clone(),
            correct: diff::normalize_newlines(&pair.correct).into_owned(),
            incorrect: diff::normalize_newlines(&pair.incorrect).into_owned(),
            tokenizer_id: masks.spans_correct.tokenizer_id.clone(),
            spans_correct: spans(&masks.spans_correct),
            spans_incorrect: spans(&masks.spans_incorrect),
            hybrid_correct: masks.hybrid_correct.clone(),
            hybrid_incorrect: masks.hybrid_incorrect.clone(),
            line_mask_correct: bits(&masks.line_correct),
            line_mask_incorrect: bits(&masks.line_incorrect),
        }
    }
}

impl Record for MaskedRecord {
    const SCHEMA: Schema = Schema::Masked;
    const REQUIRED: &'static [&'static str] = &[
        "id",
        "instruction",
        "correct",
        "incorrect",
        "tokenizer_id",
        "spans_correct",
        "spans_incorrect",
        "hybrid_correct",
        "hybrid_incorrect",
        "line_mask_correct",
        "line_mask_incorrect",
    ];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        non_empty("id", &self.id)?;
        if self.correct == self.incorrect {
            return Err(("incorrect", "identical to correct".into()));
        }
        validate_side(
            &self.correct,
            &self.spans_correct,
            &self.hybrid_correct,
            &self.line_mask_correct,
            ("spans_correct", "hybrid_correct", "line_mask_correct"),
        )?;
        validate_side(
            &self.incorrect,
            &self.spans_incorrect,
            &self.hybrid_incorrect,
            &self.line_mask_incorrect,
            ("spans_incorrect", "hybrid_incorrect", "line_mask_incorrect"),
        )
    }
}

fn validate_side(
    text: &str,
    spans: &[[usize; 2]],
    hybrid: &[u8],
    line_mask: &[u8],
    (spans_field, hybrid_field, line_field): (&'static str, &'static str, &'static str),
) -> Result<(), (&'static str, String)> {
    let pairs: Vec<(usize, usize)> = spans.iter().map(|&[a, b]| (a, b)).collect();
    let token_spans = align::TokenSpans { tokenizer_id: String::new(), spans: pairs };
    token_spans.validate(text.chars().count()).map_err(|e| (spans_field, e))?;
    if hybrid.len() != spans.len() {
        return Err((hybrid_field, format!("length {} but {} spans", hybrid.len(), spans.len())));
    }
    if let Some(v) = hybrid.iter().find(|&&v| v > 2) {
        return Err((hybrid_field, format!("value {v} outside {{0,1,2}}")));
    }
    if let Some(v) = line_mask.iter().find(|&&v| v > 1) {
        return Err((line_field, format!("value {v} outside {{0,1}}")));
    }
    let line_bits: Vec<bool> = line_mask.iter().map(|&v| v == 1).collect();
    let expanded =
        align::line_mask_to_token_mask(&line_bits, text, &token_spans).map_err(|e| (line_field, e.to_string()))?;
    if let Some(k) = hybrid.iter().zip(&expanded).position(|(&h, &l)| (h >= 1) != l) {
        return Err((hybrid_field, format!("token {k} disagrees with the line mask")));
    }
    Ok(())
}

/// Per-token ground-truth probabilities for both sides of a masked record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub id: String,
    pub probs_correct: Vec<f64>,
    pub probs_incorrect: Vec<f64>,
}

impl Record for TraceRecord {
    const SCHEMA: Schema = Schema::Trace;
    const REQUIRED: &'static [&'static str] = &["id", "probs_correct", "probs_incorrect"];

    fn id(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        non_empty("id", &self.id)?;
        for (field, probs) in [("probs_correct", &self.probs_correct), ("probs_incorrect", &self.probs_incorrect)] {
            if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
                return Err((field, format!("probability {p} outside (0,1]")));
            }
        }
        Ok(())
    }
}

fn non_empty(field: &'static str, value: &str) -> Result<(), (&'static str, String)> {
    if value.is_empty() {
        Err((field, "must be non-empty".into()))
    } else {
        Ok(())
    }
}

/// Parses one line as a `T`, reporting violations against `line_no`.
pub fn parse_record<T: Record>(line: &str, line_no: usize) -> Result<T, DatasetError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| DatasetError::violation(line_no, "<line>", e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| DatasetError::violation(line_no, "<line>", "not a JSON object"))?;
    for &field in T::REQUIRED {
        if !obj.contains_key(field) {
            return Err(DatasetError::violation(line_no, field, format!("missing under {} schema", T::SCHEMA)));
        }
    }
    let record: T = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let field = msg.split('`').nth(1).unwrap_or("<record>").to_string();
        DatasetError::violation(line_no, field, msg)
    })?;
    record.validate().map_err(|(field, reason)| DatasetError::violation(line_no, field, reason))?;
    Ok(record)
}

/// Streaming reader over one record file.
///
/// Blank lines are skipped. A leading header line is captured in
/// [`RecordReader::header`].
pub struct RecordReader<T, R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    seen: HashSet<String>,
    header: Option<Header>,
    pending: Option<(usize, String)>,
    path: String,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Record> RecordReader<T, BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path).map_err(|e| DatasetError::io(path, e))?;
        Self::new(BufReader::new(file), &path.display().to_string())
    }
}

impl<T: Record, R: BufRead> RecordReader<T, R> {
    pub fn new(reader: R, path: &str) -> Result<Self, DatasetError> {
        let mut this = RecordReader {
            lines: reader.lines(),
            line_no: 0,
            seen: HashSet::new(),
            header: None,
            pending: None,
            path: path.to_string(),
            _marker: std::marker::PhantomData,
        };
        if let Some((no, line)) = this.next_line()? {
            match header_from_line(&line) {
                Some(h) => this.header = Some(h),
                None => this.pending = Some((no, line)),
            }
        }
        Ok(this)
    }

    pub fn header(&self) -> Option<&Header> {
        self.header.as_ref()
    }

    fn next_line(&mut self) -> Result<Option<(usize, String)>, DatasetError> {
        for line in self.lines.by_ref() {
            self.line_no += 1;
            let line = line.map_err(|e| DatasetError::Io { path: self.path.clone(), source: e })?;
            if !line.trim().is_empty() {
                return Ok(Some((self.line_no, line)));
            }
        }
        Ok(None)
    }
}

fn header_from_line(line: &str) -> Option<Header> {
    let value: Value = serde_json::from_str(line).ok()?;
    value.get(HEADER_KEY)?;
    serde_json::from_value::<HeaderLine>(value).ok().map(|h| h.faft_header)
}

impl<T: Record, R: BufRead> Iterator for RecordReader<T, R> {
    type Item = Result<T, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        let (no, line) = match self.pending.take() {
            Some(p) => p,
            None => match self.next_line() {
                Ok(Some(p)) => p,
                Ok(None) => return None,
                Err(e) => return Some(Err(e)),
            },
        };
        let record = match parse_record::<T>(&line, no) {
            Ok(r) => r,
            Err(e) => return Some(Err(e)),
        };
        if !self.seen.insert(record.id().to_string()) {
            return Some(Err(DatasetError::DuplicateId { line: no, id: record.id().to_string() }));
        }
        Some(Ok(record))
    }
}

/// Reads and validates every record in `path`.
pub fn read_records<T: Record>(path: &Path) -> Result<(Option<Header>, Vec<T>), DatasetError> {
    let reader = RecordReader::<T, _>::open(path)?;
    let header = reader.header().cloned();
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}

/// Serializes one record as a single line (no trailing newline).
pub fn to_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("record types serialize infallibly")
}

/// Writes `records` to `path` atomically, optionally preceded by `header`.
///
/// Output goes to a temporary file in the destination directory and is
/// renamed into place only after every line is flushed; on any failure no
/// partial file remains.
pub fn write_records<'a, T, I>(records: I, path: &Path, header: Option<&Header>) -> Result<usize, DatasetError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| DatasetError::io(path, e))?;
    let mut out = BufWriter::new(tmp);
    let mut count = 0;
    let io = |e| DatasetError::io(path, e);
    if let Some(h) = header {
        let line = to_line(&HeaderLine { faft_header: h.clone() });
        writeln!(out, "{line}").map_err(io)?;
    }
    for record in records {
        writeln!(out, "{}", to_line(record)).map_err(io)?;
        count += 1;
    }
    let tmp = out.into_inner().map_err(|e| DatasetError::io(path, e.into_error()))?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| DatasetError::io(path, e.error))?;
    Ok(count)
}
