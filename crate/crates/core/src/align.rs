//! Tokenization into contiguous spans and projection of line and character
//! edits onto tokens.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::PairRecord;
use crate::diff::{self, DiffError};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("external offsets invalid: {0}")]
    ExternalOffsetsInvalid(String),
    #[error("line mask has {got} entries but the text has {expected} lines")]
    LineCountMismatch { expected: usize, got: usize },
    #[error("vector lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("{0} code is empty")]
    EmptyCode(&'static str),
    #[error("failed to read tokenization sidecar: {0}")]
    Io(#[from] std::io::Error),
}

/// Half-open char ranges partitioning a text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpans {
    pub tokenizer_id: String,
    pub spans: Vec<(usize, usize)>,
}

impl TokenSpans {
    pub fn count(&self) -> usize {
        self.spans.len()
    }

    /// Checks that the spans exactly partition a text of `text_len` chars.
    pub fn validate(&self, text_len: usize) -> Result<(), String> {
        check_partition(&self.spans, text_len)
    }
}

fn check_partition(spans: &[(usize, usize)], text_len: usize) -> Result<(), String> {
    let mut expected = 0;
    for (k, &(start, end)) in spans.iter().enumerate() {
        if start != expected {
            return Err(format!("span {k} starts at {start}, expected {expected}"));
        }
        if end <= start {
            return Err(format!("span {k} is empty or reversed ({start},{end})"));
        }
        expected = end;
    }
    if expected != text_len {
        return Err(format!("spans end at {expected} but text has {text_len} chars"));
    }
    Ok(())
}

/// One sidecar line: byte-offset spans for the text with the given digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarRecord {
    pub text_sha256: String,
    pub spans: Vec<[usize; 2]>,
}

pub fn text_sha256(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Tokenizations supplied by an external tokenizer, keyed by text digest.
#[derive(Debug, Clone, Default)]
pub struct ExternalOffsets {
    by_digest: HashMap<String, Vec<[usize; 2]>>,
}

impl ExternalOffsets {
    pub fn load(path: &Path) -> Result<Self, AlignError> {
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SidecarRecord = serde_json::from_str(&line)
                .map_err(|e| AlignError::ExternalOffsetsInvalid(format!("line {}: {e}", n + 1)))?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn from_records(records: impl IntoIterator<Item = SidecarRecord>) -> Self {
        let by_digest = records.into_iter().map(|r| (r.text_sha256, r.spans)).collect();
        ExternalOffsets { by_digest }
    }

    pub fn len(&self) -> usize {
        self.by_digest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_digest.is_empty()
    }

    fn spans_for(&self, text: &str) -> Result<Vec<(usize, usize)>, AlignError> {
        let digest = text_sha256(text);
        let byte_spans = self
            .by_digest
            .get(&digest)
            .ok_or_else(|| AlignError::ExternalOffsetsInvalid(format!("no sidecar entry for text {digest}")))?;
        byte_spans_to_char_spans(text, byte_spans).map_err(AlignError::ExternalOffsetsInvalid)
    }
}

/// Converts byte-offset spans to char-offset spans and checks the partition.
pub fn byte_spans_to_char_spans(text: &str, byte_spans: &[[usize; 2]]) -> Result<Vec<(usize, usize)>, String> {
    let offsets = diff::char_byte_offsets(text);
    let to_char = |byte: usize| -> Result<usize, String> {
        offsets.binary_search(&byte).map_err(|_| format!("byte offset {byte} is not on a char boundary"))
    };
    let spans = byte_spans.iter().map(|&[s, e]| Ok((to_char(s)?, to_char(e)?))).collect::<Result<Vec<_>, String>>()?;
    check_partition(&spans, offsets.len() - 1)?;
    Ok(spans)
}

#[derive(Debug, Clone)]
pub enum Tokenizer {
    /// Every Unicode scalar value is a token.
    Char,
    /// Maximal runs of word chars, punctuation or horizontal whitespace;
    /// each LF is a token of its own.
    WordPunct,
    External(ExternalOffsets),
}

impl Tokenizer {
    pub fn id(&self) -> &'static str {
        match self {
            Tokenizer::Char => "char",
            Tokenizer::WordPunct => "wordpunct",
            Tokenizer::External(_) => "external",
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSpans, AlignError> {
        let spans = match self {
            Tokenizer::Char => (0..text.chars().count()).map(|i| (i, i + 1)).collect(),
            Tokenizer::WordPunct => word_punct_spans(text),
            Tokenizer::External(offsets) => offsets.spans_for(text)?,
        };
        Ok(TokenSpans { tokenizer_id: self.id().to_string(), spans })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    Space,
    Newline,
    Punct,
}

fn classify(ch: char) -> CharClass {
    if ch == '\n' {
        CharClass::Newline
    } else if ch.is_alphanumeric() || ch == '_' {
        CharClass::Word
    } else if ch.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Punct
    }
}

fn word_punct_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    let mut prev: Option<CharClass> = None;
    for (i, ch) in text.chars().enumerate() {
        let class = classify(ch);
        if let Some(p) = prev {
            if p != class || class == CharClass::Newline {
                spans.push((start, i));
                start = i;
            }
        }
        prev = Some(class);
    }
    if prev.is_some() {
        spans.push((start, text.chars().count()));
    }
    spans
}

/// Marks every token whose span contains one of `positions`.
///
/// A position equal to the text length attaches to the final token.
pub fn char_to_token_mask(positions: &[usize], spans: &TokenSpans) -> Vec<bool> {
    let mut mask = vec![false; spans.count()];
    if mask.is_empty() {
        return mask;
    }
    for &pos in positions {
        let k = spans.spans.partition_point(|&(_, end)| end <= pos).min(mask.len() - 1);
        mask[k] = true;
    }
    mask
}

/// Expands a per-line mask to tokens.
///
/// A token overlapping several lines is marked when any of them is marked.
pub fn line_mask_to_token_mask(line_mask: &[bool], text: &str, spans: &TokenSpans) -> Result<Vec<bool>, AlignError> {
    let lines = diff::line_char_ranges(text);
    if lines.len() != line_mask.len() {
        return Err(AlignError::LineCountMismatch { expected: lines.len(), got: line_mask.len() });
    }
    let mut out = Vec::with_capacity(spans.count());
    let mut line = 0;
    for &(start, end) in &spans.spans {
        while line < lines.len() && lines[line].1 <= start {
            line += 1;
        }
        let mut marked = false;
        let mut l = line;
        while l < lines.len() && lines[l].0 < end {
            marked |= line_mask[l];
            l += 1;
        }
        out.push(marked);
    }
    Ok(out)
}

/// Element-wise sum of a line-derived and a token-level mask.
pub fn hybrid_combine(line_to_token: &[bool], token: &[bool]) -> Result<Vec<u8>, AlignError> {
    if line_to_token.len() != token.len() {
        return Err(AlignError::LengthMismatch { left: line_to_token.len(), right: token.len() });
    }
    Ok(line_to_token.iter().zip(token).map(|(&l, &t)| u8::from(l) + u8::from(t)).collect())
}

/// All masks for one correct/incorrect pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub line_correct: Vec<bool>,
    pub line_incorrect: Vec<bool>,
    pub line_to_token_correct: Vec<bool>,
    pub line_to_token_incorrect: Vec<bool>,
    pub token_correct: Vec<bool>,
    pub token_incorrect: Vec<bool>,
    pub hybrid_correct: Vec<u8>,
    pub hybrid_incorrect: Vec<u8>,
    pub spans_correct: TokenSpans,
    pub spans_incorrect: TokenSpans,
}

/// Masks for an incorrect (pre-change) and correct (post-change) text.
///
/// Both texts are CRLF-normalized first; spans index the normalized texts.
pub fn build_masks(incorrect: &str, correct: &str, tokenizer: &Tokenizer, cap: usize) -> Result<MaskSet, AlignError> {
    if correct.is_empty() {
        return Err(AlignError::EmptyCode("correct"));
    }
    if incorrect.is_empty() {
        return Err(AlignError::EmptyCode("incorrect"));
    }
    let incorrect = diff::normalize_newlines(incorrect);
    let correct = diff::normalize_newlines(correct);

    let line_diff = diff::line_diff(&incorrect, &correct);
    let lines = diff::line_masks(&line_diff);
    let script = diff::anchored_edit_script(&incorrect, &correct, &line_diff, cap)?;
    let (pre_positions, post_positions) = diff::edit_positions(&script);

    let spans_correct = tokenizer.tokenize(&correct)?;
    let spans_incorrect = tokenizer.tokenize(&incorrect)?;

    let line_to_token_correct = line_mask_to_token_mask(&lines.mask_correct, &correct, &spans_correct)?;
    let line_to_token_incorrect = line_mask_to_token_mask(&lines.mask_incorrect, &incorrect, &spans_incorrect)?;
    let token_correct = char_to_token_mask(&post_positions, &spans_correct);
    let token_incorrect = char_to_token_mask(&pre_positions, &spans_incorrect);

    let hybrid_correct = hybrid_combine(&line_to_token_correct, &token_correct)?;
    let hybrid_incorrect = hybrid_combine(&line_to_token_incorrect, &token_incorrect)?;

    for (side, tok, line) in
        [("correct", &token_correct, &line_to_token_correct), ("incorrect", &token_incorrect, &line_to_token_incorrect)]
    {
        if let Some(k) = tok.iter().zip(line.iter()).position(|(&t, &l)| t && !l) {
            log::error!("{side} token {k} is edited but lies outside every changed line");
        }
    }

    Ok(MaskSet {
        line_correct: lines.mask_correct,
        line_incorrect: lines.mask_incorrect,
        line_to_token_correct,
        line_to_token_incorrect,
        token_correct,
        token_incorrect,
        hybrid_correct,
        hybrid_incorrect,
        spans_correct,
        spans_incorrect,
    })
}

pub fn build_pair_masks(pair: &PairRecord, tokenizer: &Tokenizer, cap: usize) -> Result<MaskSet, AlignError> {
    build_masks(&pair.incorrect, &pair.correct, tokenizer, cap)
}
