//! Line alignment and character-level edit scripts.
//!
//! The incorrect variant is always the pre-change text and the correct
//! implementation the post-change text. Line matching follows the
//! longest-matching-block recursion of a sequence matcher with every junk
//! heuristic switched off, so opcodes depend only on the two inputs.

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the length (in Unicode scalar values) of either side of a
/// character diff.
pub const DEFAULT_CHAR_CAP: usize = 65_536;

/// Matrices up to this many cells are solved directly; larger middles are
/// split with Hirschberg's recursion.
const FULL_DP_CELLS: usize = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiffError {
    #[error("{side} text has {len} chars, exceeding the cap of {cap}")]
    LengthCapExceeded { side: Side, len: usize, cap: usize },
    #[error("edit script does not replay onto the given text: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Pre,
    Post,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Pre => "pre-change",
            Side::Post => "post-change",
        })
    }
}

/// Replaces every CRLF pair with LF.
pub fn normalize_newlines(text: &str) -> Cow<'_, str> {
    if text.contains("\r\n") {
        Cow::Owned(text.replace("\r\n", "\n"))
    } else {
        Cow::Borrowed(text)
    }
}

/// Splits after every LF, keeping the terminator on each line.
///
/// `""` has no lines, `"a\n"` has one and `"a\nb"` has two.
pub fn split_lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

/// Half-open char ranges of each line, terminator included.
pub fn line_char_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0;
    let mut pos = 0;
    for ch in text.chars() {
        pos += 1;
        if ch == '\n' {
            ranges.push((start, pos));
            start = pos;
        }
    }
    if pos > start {
        ranges.push((start, pos));
    }
    ranges
}

/// Byte offset of every char index, plus a final entry for the text length.
pub fn char_byte_offsets(text: &str) -> Vec<usize> {
    let mut offsets: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    offsets.push(text.len());
    offsets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpTag {
    Equal,
    Delete,
    Insert,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opcode {
    pub tag: OpTag,
    pub pre: (usize, usize),
    pub post: (usize, usize),
}

impl Opcode {
    fn new(tag: OpTag, pre: (usize, usize), post: (usize, usize)) -> Self {
        Opcode { tag, pre, post }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineDiff {
    pub opcodes: Vec<Opcode>,
    pub pre_lines: usize,
    pub post_lines: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    pre: usize,
    post: usize,
    len: usize,
}

/// Longest-matching-block recursion over two sequences of hashable items.
struct SequenceMatcher<'a, T> {
    a: &'a [T],
    b: &'a [T],
    b_index: HashMap<&'a T, Vec<usize>>,
}

impl<'a, T: Eq + std::hash::Hash> SequenceMatcher<'a, T> {
    fn new(a: &'a [T], b: &'a [T]) -> Self {
        let mut b_index: HashMap<&T, Vec<usize>> = HashMap::new();
        for (j, item) in b.iter().enumerate() {
            b_index.entry(item).or_default().push(j);
        }
        SequenceMatcher { a, b, b_index }
    }

    /// Longest block in `a[alo..ahi]` x `b[blo..bhi]`; ties go to the
    /// earliest start in `a`, then the earliest start in `b`.
    fn longest_match(&self, alo: usize, ahi: usize, blo: usize, bhi: usize) -> Block {
        let mut best = Block { pre: alo, post: blo, len: 0 };
        let mut run_len: HashMap<usize, usize> = HashMap::new();
        for i in alo..ahi {
            let mut next: HashMap<usize, usize> = HashMap::new();
            if let Some(js) = self.b_index.get(&self.a[i]) {
                for &j in js {
                    if j < blo {
                        continue;
                    }
                    if j >= bhi {
                        break;
                    }
                    let k = if j == 0 { 0 } else { run_len.get(&(j - 1)).copied().unwrap_or(0) } + 1;
                    next.insert(j, k);
                    if k > best.len {
                        best = Block { pre: i + 1 - k, post: j + 1 - k, len: k };
                    }
                }
            }
            run_len = next;
        }
        best
    }

    fn matching_blocks(&self) -> Vec<Block> {
        let mut stack = vec![(0, self.a.len(), 0, self.b.len())];
        let mut blocks = Vec::new();
        while let Some((alo, ahi, blo, bhi)) = stack.pop() {
            let m = self.longest_match(alo, ahi, blo, bhi);
            if m.len == 0 {
                continue;
            }
            if alo < m.pre && blo < m.post {
                stack.push((alo, m.pre, blo, m.post));
            }
            if m.pre + m.len < ahi && m.post + m.len < bhi {
                stack.push((m.pre + m.len, ahi, m.post + m.len, bhi));
            }
            blocks.push(m);
        }
        blocks.sort_by_key(|b| (b.pre, b.post));

        let mut merged: Vec<Block> = Vec::with_capacity(blocks.len() + 1);
        for b in blocks {
            match merged.last_mut() {
                Some(last) if last.pre + last.len == b.pre && last.post + last.len == b.post => {
                    last.len += b.len;
                }
                _ => merged.push(b),
            }
        }
        merged.push(Block { pre: self.a.len(), post: self.b.len(), len: 0 });
        merged
    }

    fn opcodes(&self) -> Vec<Opcode> {
        let (mut i, mut j) = (0, 0);
        let mut ops = Vec::new();
        for block in self.matching_blocks() {
            let tag = match (i < block.pre, j < block.post) {
                (true, true) => Some(OpTag::Replace),
                (true, false) => Some(OpTag::Delete),
                (false, true) => Some(OpTag::Insert),
                (false, false) => None,
            };
            if let Some(tag) = tag {
                ops.push(Opcode::new(tag, (i, block.pre), (j, block.post)));
            }
            i = block.pre + block.len;
            j = block.post + block.len;
            if block.len > 0 {
                ops.push(Opcode::new(OpTag::Equal, (block.pre, i), (block.post, j)));
            }
        }
        if ops.is_empty() {
            ops.push(Opcode::new(OpTag::Equal, (0, 0), (0, 0)));
        }
        ops
    }
}

/// Line-level opcodes turning `pre_text` into `post_text`.
pub fn line_diff(pre_text: &str, post_text: &str) -> LineDiff {
    let pre = normalize_newlines(pre_text);
    let post = normalize_newlines(post_text);
    let a = split_lines(&pre);
    let b = split_lines(&post);
    let opcodes = SequenceMatcher::new(&a, &b).opcodes();
    LineDiff { opcodes, pre_lines: a.len(), post_lines: b.len() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineMaskPair {
    pub mask_correct: Vec<bool>,
    pub mask_incorrect: Vec<bool>,
}

/// Marks deleted lines of the pre-change side and added lines of the
/// post-change side.
pub fn line_masks(diff: &LineDiff) -> LineMaskPair {
    let mut mask_incorrect = vec![false; diff.pre_lines];
    let mut mask_correct = vec![false; diff.post_lines];
    for op in &diff.opcodes {
        if matches!(op.tag, OpTag::Delete | OpTag::Replace) {
            mask_incorrect[op.pre.0..op.pre.1].iter_mut().for_each(|m| *m = true);
        }
        if matches!(op.tag, OpTag::Insert | OpTag::Replace) {
            mask_correct[op.post.0..op.post.1].iter_mut().for_each(|m| *m = true);
        }
    }
    LineMaskPair { mask_correct, mask_incorrect }
}

/// One single-character edit. Positions are char indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EditOp {
    Insert { post_pos: usize, ch: char },
    Delete { pre_pos: usize },
    Substitute { pre_pos: usize, post_pos: usize, ch: char },
}

impl EditOp {
    pub fn pre_pos(&self) -> Option<usize> {
        match *self {
            EditOp::Insert { .. } => None,
            EditOp::Delete { pre_pos } | EditOp::Substitute { pre_pos, .. } => Some(pre_pos),
        }
    }

    pub fn post_pos(&self) -> Option<usize> {
        match *self {
            EditOp::Delete { .. } => None,
            EditOp::Insert { post_pos, .. } | EditOp::Substitute { post_pos, .. } => Some(post_pos),
        }
    }

    fn shifted(self, pre_off: usize, post_off: usize) -> Self {
        match self {
            EditOp::Insert { post_pos, ch } => EditOp::Insert { post_pos: post_pos + post_off, ch },
            EditOp::Delete { pre_pos } => EditOp::Delete { pre_pos: pre_pos + pre_off },
            EditOp::Substitute { pre_pos, post_pos, ch } => {
                EditOp::Substitute { pre_pos: pre_pos + pre_off, post_pos: post_pos + post_off, ch }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    /// Number of operations, i.e. the Levenshtein distance.
    pub fn distance(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Replays the script onto `pre_text`.
    pub fn apply(&self, pre_text: &str) -> Result<String, DiffError> {
        let pre: Vec<char> = pre_text.chars().collect();
        let mut out: Vec<char> = Vec::with_capacity(pre.len() + self.ops.len());
        let mut cursor = 0usize;

        let copy_to = |out: &mut Vec<char>, cursor: &mut usize, end: usize| -> Result<(), DiffError> {
            if end < *cursor || end > pre.len() {
                return Err(DiffError::Replay(format!("pre position {end} out of order")));
            }
            out.extend_from_slice(&pre[*cursor..end]);
            *cursor = end;
            Ok(())
        };

        for op in &self.ops {
            match *op {
                EditOp::Delete { pre_pos } => {
                    copy_to(&mut out, &mut cursor, pre_pos)?;
                    if pre_pos >= pre.len() {
                        return Err(DiffError::Replay(format!("delete past end at {pre_pos}")));
                    }
                    cursor += 1;
                }
                EditOp::Substitute { pre_pos, post_pos, ch } => {
                    copy_to(&mut out, &mut cursor, pre_pos)?;
                    if pre_pos >= pre.len() || out.len() != post_pos {
                        return Err(DiffError::Replay(format!("substitute misaligned at {pre_pos}/{post_pos}")));
                    }
                    out.push(ch);
                    cursor += 1;
                }
                EditOp::Insert { post_pos, ch } => {
                    if out.len() > post_pos {
                        return Err(DiffError::Replay(format!("insert at {post_pos} out of order")));
                    }
                    let need = post_pos - out.len();
                    let end = cursor + need;
                    copy_to(&mut out, &mut cursor, end)?;
                    out.push(ch);
                }
            }
        }
        out.extend_from_slice(&pre[cursor..]);
        Ok(out.into_iter().collect())
    }
}

/// Minimal edit script turning `pre_text` into `post_text`.
///
/// Ties in the backtrace prefer substitute, then delete, then insert.
pub fn char_edit_script(pre_text: &str, post_text: &str, cap: usize) -> Result<EditScript, DiffError> {
    let a: Vec<char> = pre_text.chars().collect();
    let b: Vec<char> = post_text.chars().collect();
    if a.len() > cap {
        return Err(DiffError::LengthCapExceeded { side: Side::Pre, len: a.len(), cap });
    }
    if b.len() > cap {
        return Err(DiffError::LengthCapExceeded { side: Side::Post, len: b.len(), cap });
    }
    Ok(EditScript { ops: edit_ops(&a, &b) })
}

/// Edit operations between two char slices. No length cap.
pub(crate) fn edit_ops(a: &[char], b: &[char]) -> Vec<EditOp> {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    let suffix = a[prefix..].iter().rev().zip(b[prefix..].iter().rev()).take_while(|(x, y)| x == y).count();
    let a_mid = &a[prefix..a.len() - suffix];
    let b_mid = &b[prefix..b.len() - suffix];

    let mut ops = Vec::new();
    hirschberg(a_mid, b_mid, prefix, prefix, &mut ops);
    ops
}

fn hirschberg(a: &[char], b: &[char], pre_off: usize, post_off: usize, ops: &mut Vec<EditOp>) {
    if (a.len() + 1).saturating_mul(b.len() + 1) <= FULL_DP_CELLS || a.len() < 2 {
        ops.extend(full_backtrace(a, b).into_iter().map(|op| op.shifted(pre_off, post_off)));
        return;
    }
    let mid = a.len() / 2;
    let forward = last_row(&a[..mid], b, false);
    let backward = last_row(&a[mid..], b, true);
    let split = (0..=b.len()).min_by_key(|&j| forward[j] + backward[b.len() - j]).unwrap_or(0);
    hirschberg(&a[..mid], &b[..split], pre_off, post_off, ops);
    hirschberg(&a[mid..], &b[split..], pre_off + mid, post_off + split, ops);
}

/// Final DP row of `a` against every prefix of `b` (or suffix, when reversed).
fn last_row(a: &[char], b: &[char], reversed: bool) -> Vec<usize> {
    let bn = b.len();
    let at = |s: &[char], i: usize| if reversed { s[s.len() - 1 - i] } else { s[i] };
    let mut prev: Vec<usize> = (0..=bn).collect();
    let mut cur = vec![0; bn + 1];
    for i in 0..a.len() {
        cur[0] = i + 1;
        let ai = at(a, i);
        for j in 0..bn {
            let sub = prev[j] + usize::from(ai != at(b, j));
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev
}

fn full_backtrace(a: &[char], b: &[char]) -> Vec<EditOp> {
    let (n, m) = (a.len(), b.len());
    let width = m + 1;
    let mut d = vec![0u32; (n + 1) * width];
    for (j, cell) in d.iter_mut().take(width).enumerate() {
        *cell = j as u32;
    }
    for i in 1..=n {
        d[i * width] = i as u32;
        for j in 1..=m {
            let sub = d[(i - 1) * width + j - 1] + u32::from(a[i - 1] != b[j - 1]);
            let del = d[(i - 1) * width + j] + 1;
            let ins = d[i * width + j - 1] + 1;
            d[i * width + j] = sub.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(d[n * width + m] as usize);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * width + j];
        if i > 0 && j > 0 {
            let diag = d[(i - 1) * width + j - 1];
            if a[i - 1] == b[j - 1] && here == diag {
                i -= 1;
                j -= 1;
                continue;
            }
            if here == diag + 1 {
                ops.push(EditOp::Substitute { pre_pos: i - 1, post_pos: j - 1, ch: b[j - 1] });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * width + j] + 1 {
            ops.push(EditOp::Delete { pre_pos: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Insert { post_pos: j - 1, ch: b[j - 1] });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Edit script restricted to the non-equal line blocks of `diff`.
///
/// Each delete/insert/replace block is aligned on its own and its ops are
/// shifted to whole-text positions, so every edit lands in a line that the
/// line diff marks. Equal blocks contribute nothing. Texts are normalized
/// before use; positions index the normalized texts.
pub fn anchored_edit_script(
    pre_text: &str,
    post_text: &str,
    diff: &LineDiff,
    cap: usize,
) -> Result<EditScript, DiffError> {
    let pre = normalize_newlines(pre_text);
    let post = normalize_newlines(post_text);
    let a: Vec<char> = pre.chars().collect();
    let b: Vec<char> = post.chars().collect();
    if a.len() > cap {
        return Err(DiffError::LengthCapExceeded { side: Side::Pre, len: a.len(), cap });
    }
    if b.len() > cap {
        return Err(DiffError::LengthCapExceeded { side: Side::Post, len: b.len(), cap });
    }
    let pre_lines = line_char_ranges(&pre);
    let post_lines = line_char_ranges(&post);
    let span = |lines: &[(usize, usize)], (lo, hi): (usize, usize), total: usize| -> (usize, usize) {
        let start = lines.get(lo).map_or(total, |r| r.0);
        let end = if hi > lo { lines[hi - 1].1 } else { start };
        (start, end)
    };

    let mut ops = Vec::new();
    for op in diff.opcodes.iter().filter(|op| op.tag != OpTag::Equal) {
        let (ps, pe) = span(&pre_lines, op.pre, a.len());
        let (qs, qe) = span(&post_lines, op.post, b.len());
        ops.extend(edit_ops(&a[ps..pe], &b[qs..qe]).into_iter().map(|e| e.shifted(ps, qs)));
    }
    Ok(EditScript { ops })
}

/// Char positions touched on each side: deletes and substitutes on the
/// pre-change side, inserts and substitutes on the post-change side.
pub fn edit_positions(script: &EditScript) -> (Vec<usize>, Vec<usize>) {
    let pre = script.ops.iter().filter_map(EditOp::pre_pos).collect();
    let post = script.ops.iter().filter_map(EditOp::post_pos).collect();
    (pre, post)
}

/// Plain Levenshtein distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    last_row(&a, &b, false)[b.len()]
}
