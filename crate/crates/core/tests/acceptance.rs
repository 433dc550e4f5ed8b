//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use faft_core::align::{self, Tokenizer};
use faft_core::augment::{self, AugmentOptions, TeacherClient, TeacherConfig, VariantStatus};
use faft_core::dataset::{self, Header, MaskedRecord, PairMeta, PairRecord, SourceRecord};
use faft_core::diff::{self, DEFAULT_CHAR_CAP};
use faft_core::toy::{self, Mode, TrainConfig};
use faft_core::weighting::{self, WeightConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::{fenced, MockServer, Reply};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure(elapsed < budget, || format!("took {elapsed:.2?}, budget {budget:?}"))
}

/// Wagner-Fischer distance over chars, kept independent of the library.
fn dp_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in table.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in table[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = table[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            table[i][j] = sub.min(table[i - 1][j] + 1).min(table[i][j - 1] + 1);
        }
    }
    table[a.len()][b.len()]
}

fn random_string(rng: &mut StdRng, alphabet: &[char], max_len: usize) -> String {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

const WORDS: &[&str] =
    &["x", "total", "for", "in", "range", "return", "if", "i", "n", "0", "1", "42", "val_2", "λ", "é"];
const PUNCT: &[&str] = &["(", ")", ":", "=", "+", "-", "==", "[", "]", ",", "->", "#"];

fn random_line(rng: &mut StdRng) -> String {
    let mut line = " ".repeat(4 * rng.random_range(0..3));
    for _ in 0..rng.random_range(0..8) {
        match rng.random_range(0..3) {
            0 => line.push_str(WORDS[rng.random_range(0..WORDS.len())]),
            1 => line.push_str(PUNCT[rng.random_range(0..PUNCT.len())]),
            _ => line.push(' '),
        }
    }
    line
}

fn random_text(rng: &mut StdRng) -> String {
    let lines: Vec<String> = (0..rng.random_range(1..10)).map(|_| random_line(rng)).collect();
    let mut text = lines.join("\n");
    if rng.random_bool(0.7) {
        text.push('\n');
    }
    if text.is_empty() {
        text.push('x');
    }
    text
}

/// A nearby variant: whole-line edits plus a few character edits.
fn mutate(rng: &mut StdRng, text: &str) -> String {
    let mut lines: Vec<String> = text.split('\n').map(str::to_string).collect();
    for _ in 0..rng.random_range(0..3) {
        let at = rng.random_range(0..lines.len());
        match rng.random_range(0..3) {
            0 => lines.insert(at, random_line(rng)),
            1 if lines.len() > 1 => {
                lines.remove(at);
            }
            _ => lines[at] = random_line(rng),
        }
    }
    let mut chars: Vec<char> = lines.join("\n").chars().collect();
    for _ in 0..rng.random_range(0..3) {
        let at = rng.random_range(0..=chars.len());
        let ch = ['a', '1', '(', ' ', '\n', 'ß'][rng.random_range(0..6)];
        if at < chars.len() && rng.random_bool(0.5) {
            chars[at] = ch;
        } else {
            chars.insert(at, ch);
        }
    }
    let out: String = chars.into_iter().collect();
    if out.is_empty() {
        "y".into()
    } else {
        out
    }
}

fn edit_script_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let alphabet: Vec<char> = "abcdefgh".chars().collect();
    for case in 0..1000 {
        let (pre, post) = (random_string(&mut rng, &alphabet, 20), random_string(&mut rng, &alphabet, 20));
        let script = diff::char_edit_script(&pre, &post, DEFAULT_CHAR_CAP).map_err(|e| e.to_string())?;
        let expected = dp_distance(&pre, &post);
        ensure(script.ops.len() == expected, || {
            format!("case {case} {pre:?}->{post:?}: {} ops, distance {expected}", script.ops.len())
        })?;
        let replayed = script.apply(&pre).map_err(|e| format!("case {case}: {e}"))?;
        ensure(replayed == post, || format!("case {case}: replay gave {replayed:?}, want {post:?}"))?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000/1000 pairs, {:.2?}", start.elapsed()))
}

/// Tokenizes each line on its own and repeats that line's mask value once
/// per token.
fn literal_expansion(text: &str, mask: &[bool], tokenizer: &Tokenizer) -> Vec<bool> {
    let mut out = Vec::new();
    for (line, &marked) in diff::split_lines(text).iter().zip(mask) {
        let n = tokenizer.tokenize(line).unwrap().count();
        out.extend(std::iter::repeat_n(marked, n));
    }
    out
}

fn line_expansion_conformance() -> Outcome {
    let mut rng = StdRng::seed_from_u64(2);
    let mut checked = 0;
    for case in 0..500 {
        let text = random_text(&mut rng);
        let n_lines = diff::split_lines(&text).len();
        let mask: Vec<bool> = (0..n_lines).map(|_| rng.random_bool(0.4)).collect();
        for tokenizer in [Tokenizer::Char, Tokenizer::WordPunct] {
            let spans = tokenizer.tokenize(&text).map_err(|e| e.to_string())?;
            let got = align::line_mask_to_token_mask(&mask, &text, &spans).map_err(|e| e.to_string())?;
            ensure(got.len() == spans.count(), || format!("case {case}: length {} != T {}", got.len(), spans.count()))?;
            let want = literal_expansion(&text, &mask, &tokenizer);
            ensure(got == want, || format!("case {case} ({}): {text:?} mask {mask:?}", tokenizer.id()))?;
            checked += 1;
        }
    }
    Ok(format!("{checked}/1000 expansions (500 texts x 2 tokenizers)"))
}

fn hybrid_invariants() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut checked = 0;
    for case in 0..500 {
        let correct = random_text(&mut rng);
        let incorrect = mutate(&mut rng, &correct);
        for tokenizer in [Tokenizer::Char, Tokenizer::WordPunct] {
            let m =
                align::build_masks(&incorrect, &correct, &tokenizer, DEFAULT_CHAR_CAP).map_err(|e| e.to_string())?;
            for (side, text, line_mask, tokens, hybrid, spans) in [
                ("correct", &correct, &m.line_correct, &m.token_correct, &m.hybrid_correct, &m.spans_correct),
                (
                    "incorrect",
                    &incorrect,
                    &m.line_incorrect,
                    &m.token_incorrect,
                    &m.hybrid_incorrect,
                    &m.spans_incorrect,
                ),
            ] {
                let ctx = || format!("case {case} {side} ({}): {incorrect:?} -> {correct:?}", tokenizer.id());
                ensure(hybrid.iter().all(|&h| h <= 2), ctx)?;
                ensure(hybrid.len() == spans.count(), ctx)?;
                let marked_ranges: Vec<(usize, usize)> = diff::line_char_ranges(text)
                    .into_iter()
                    .zip(line_mask.iter())
                    .filter(|(_, &m)| m)
                    .map(|(r, _)| r)
                    .collect();
                for (k, &(s, e)) in spans.spans.iter().enumerate() {
                    let inside = marked_ranges.iter().any(|&(ls, le)| s < le && ls < e);
                    if tokens[k] {
                        ensure(inside, ctx)?;
                    }
                    ensure((hybrid[k] >= 1) == inside, ctx)?;
                    ensure(hybrid[k] == u8::from(inside) + u8::from(tokens[k]), ctx)?;
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked}/1000 mask sets"))
}

fn weight_bounds() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(4);
    let mut samples = 0;
    for alpha in [1.0, 1.5, 2.0, 3.0, 5.0] {
        let cfg = WeightConfig::with_alpha(alpha).map_err(|e| e.to_string())?;
        for _ in 0..10_000 {
            let hc = if rng.random_bool(0.05) { 0.0 } else { rng.random::<f64>() };
            let ha = if rng.random_bool(0.05) { 0.0 } else { rng.random::<f64>() };
            let w = weighting::dynamic_weight(Some(hc), Some(ha), &cfg);
            ensure(w >= alpha - 1.0 && w <= alpha, || format!("alpha {alpha}: W({hc}, {ha}) = {w}"))?;
            samples += 1;
        }
        for h in [1e-6, 0.25, 0.5, 1.0] {
            let equal = weighting::dynamic_weight(Some(h), Some(h), &cfg);
            ensure(equal == alpha, || format!("alpha {alpha}: W({h}, {h}) = {equal}"))?;
            let left = weighting::dynamic_weight(Some(0.0), Some(h), &cfg);
            let right = weighting::dynamic_weight(Some(h), Some(0.0), &cfg);
            ensure(left == alpha - 1.0 && right == alpha - 1.0, || {
                format!("alpha {alpha}: one-sided zero gave {left}, {right}")
            })?;
        }
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{samples} samples over 5 alphas plus exact equality cases, {:.2?}", start.elapsed()))
}

fn loss_reduction() -> Outcome {
    let mut rng = StdRng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for batch in 0..100 {
        let logprobs: Vec<Vec<f64>> = (0..rng.random_range(1..8))
            .map(|_| (0..rng.random_range(1..40)).map(|_| rng.random_range(1e-8f64..=1.0).ln()).collect())
            .collect();
        let ones: Vec<Vec<f64>> = logprobs.iter().map(|s| vec![1.0; s.len()]).collect();
        let faft = weighting::faft_loss(&logprobs, &ones).map_err(|e| e.to_string())?;
        let sft = weighting::sft_loss(&logprobs).map_err(|e| e.to_string())?;
        worst = worst.max((faft - sft).abs());
        ensure((faft - sft).abs() <= 1e-12, || format!("batch {batch}: faft {faft} vs sft {sft}"))?;
    }
    Ok(format!("100/100 batches, max |diff| {worst:.1e}"))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let examples = toy::prepare(&toy::gen_corpus(6, 40)).map_err(|e| e.to_string())?;
    let batch: Vec<&toy::TrainExample> = examples.iter().take(4).collect();
    let fresh = toy::train::initial_model::<f64>(&TrainConfig::default());
    let (trained, _) =
        toy::train::<f64>(&examples, &TrainConfig { epochs: 5, ..Default::default() }).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (name, model) in [("initial", &fresh), ("trained", &trained)] {
        for mode in [Mode::Sft, Mode::Faft] {
            let err = toy::grad_check(model, &batch, mode, 2.0, 7);
            ensure(err < 1e-4, || format!("{name} model, {mode:?}: max relative error {err:.3e}"))?;
            worst = worst.max(err);
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("max relative error {worst:.2e} over 50 parameters x 2 losses x 2 models, {:.2?}", start.elapsed()))
}

fn behavioral() -> Outcome {
    let start = Instant::now();
    let rows = toy::compare(&[1, 2, 3, 4, 5], 200, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let wins = rows.iter().filter(|r| r.faft_wins()).count();
    let worst = rows.iter().map(|r| r.noncritical_degradation()).fold(f64::NEG_INFINITY, f64::max);
    print!("{}", toy::summary_table(&rows));
    ensure(wins >= 4, || format!("faft wins only {wins} of 5 seeds"))?;
    ensure(worst < 0.10, || format!("noncritical probability degrades by {:.1}%", worst * 100.0))?;
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "faft wins {wins}/5 seeds, worst noncritical degradation {:+.1}%, {:.2?}",
        worst * 100.0,
        start.elapsed()
    ))
}

fn source_records(n: usize) -> Vec<SourceRecord> {
    (0..n)
        .map(|i| SourceRecord {
            id: format!("rec-{i}"),
            instruction: format!("record#{i}: return the sum of the values scaled by {i}"),
            correct: correct_code(i),
        })
        .collect()
}

fn correct_code(i: usize) -> String {
    format!("def solve_{i}(values):\n    total = 0\n    for v in values:\n        total += v * {i}\n    return total\n")
}

/// Reply policy keyed on the record number found in the prompt.
fn teacher_reply(prompt: &str) -> Reply {
    let i: usize = prompt
        .split("record#")
        .nth(1)
        .and_then(|rest| rest.split(':').next())
        .and_then(|n| n.parse().ok())
        .expect("prompt carries the record number");
    match i % 10 {
        3 => Reply::Content(fenced(&correct_code(i))),
        5 => Reply::Status(500),
        7 => Reply::Content(fenced("print('unrelated')\n")),
        _ => Reply::Content(fenced(&correct_code(i).replace("+=", "-="))),
    }
}

fn teacher(server: &MockServer, parallelism: usize) -> TeacherClient {
    let cfg = TeacherConfig {
        endpoint_url: server.url.clone(),
        model_name: "mock-teacher".into(),
        parallelism,
        max_retries: 3,
        request_timeout: Duration::from_secs(10),
        retry_backoff: Duration::ZERO,
        ..Default::default()
    };
    TeacherClient::with_key(cfg, "test-key".into())
}

fn pairs_bytes(pairs: &[PairRecord], dir: &Path, name: &str) -> Result<Vec<u8>, String> {
    let path = dir.join(name);
    dataset::write_records(pairs, &path, None).map_err(|e| e.to_string())?;
    std::fs::read(&path).map_err(|e| e.to_string())
}

fn augmentation_pipeline() -> Outcome {
    let records = source_records(100);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = AugmentOptions { threshold: 0.5, journal: None, created_at: "2024-01-01T00:00:00Z".into() };

    let serial_server = MockServer::start(teacher_reply);
    let serial = augment::augment_dataset(&records, &teacher(&serial_server, 1), &opts).map_err(|e| e.to_string())?;
    let s = &serial.stats;
    ensure(
        s.accepted == 70
            && s.rejected_identical == 10
            && s.rejected_dissimilar == 10
            && s.request_failed == 10
            && s.total() == 100,
        || format!("unexpected stats {s:?}"),
    )?;
    for (i, (rec, result)) in records.iter().zip(&serial.results).enumerate() {
        let want = match i % 10 {
            3 => VariantStatus::RejectedIdentical,
            5 => VariantStatus::RequestFailed,
            7 => VariantStatus::RejectedDissimilar,
            _ => VariantStatus::Accepted,
        };
        ensure(result.status == want, || format!("{}: status {:?}, want {want:?}", rec.id, result.status))?;
        if i % 10 == 5 {
            ensure(result.attempts == 3, || format!("{}: {} attempts on a failing endpoint", rec.id, result.attempts))?;
        }
    }
    for pair in &serial.pairs {
        let i: usize = pair.id.trim_start_matches("rec-").parse().unwrap();
        ensure(pair.incorrect == correct_code(i).replace("+=", "-="), || {
            format!("{}: extracted {:?}", pair.id, pair.incorrect)
        })?;
        ensure(pair.meta.as_ref().is_some_and(|m| m.similarity >= 0.5), || {
            format!("{}: similarity below gate", pair.id)
        })?;
    }
    let reference = pairs_bytes(&serial.pairs, dir.path(), "serial.jsonl")?;

    let parallel_server = MockServer::start(teacher_reply);
    let parallel =
        augment::augment_dataset(&records, &teacher(&parallel_server, 8), &opts).map_err(|e| e.to_string())?;
    ensure(pairs_bytes(&parallel.pairs, dir.path(), "parallel.jsonl")? == reference, || {
        "parallel output differs from serial".into()
    })?;

    // Interrupted run: the first 50 records complete, then the process dies
    // while writing the next journal line.
    let journal = dir.path().join("journal.jsonl");
    let jopts = AugmentOptions { journal: Some(&journal), ..opts.clone() };
    let first_server = MockServer::start(teacher_reply);
    let first =
        augment::augment_dataset(&records[..50], &teacher(&first_server, 4), &jopts).map_err(|e| e.to_string())?;
    let done_before: HashSet<String> = first.pairs.iter().map(|p| p.id.clone()).collect();
    {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&journal).map_err(|e| e.to_string())?;
        f.write_all(br#"{"id":"rec-50","status":"acc"#).map_err(|e| e.to_string())?;
    }
    let resume_server = MockServer::start(teacher_reply);
    let resumed = augment::augment_dataset(&records, &teacher(&resume_server, 4), &jopts).map_err(|e| e.to_string())?;
    for prompt in resume_server.prompts() {
        let id = format!("rec-{}", prompt.split("record#").nth(1).unwrap().split(':').next().unwrap());
        ensure(!done_before.contains(&id), || format!("{id} was accepted before the kill but requested again"))?;
    }
    ensure(resumed.stats.resumed == done_before.len(), || {
        format!("resumed {} of {}", resumed.stats.resumed, done_before.len())
    })?;
    ensure(pairs_bytes(&resumed.pairs, dir.path(), "resumed.jsonl")? == reference, || {
        "resumed output differs from uninterrupted run".into()
    })?;
    let restored = augment::load_journal(&journal).map_err(|e| e.to_string())?;
    ensure(restored.len() == 70, || format!("journal holds {} accepted entries after resume", restored.len()))?;

    Ok(format!(
        "100 records: {} accepted, {} identical, {} dissimilar, {} failed; serial == parallel(8); resume skipped {} ids",
        s.accepted, s.rejected_identical, s.rejected_dissimilar, s.request_failed, done_before.len()
    ))
}

fn random_field(rng: &mut StdRng) -> String {
    const PIECES: &[&str] = &[
        "a", "Z", "0", " ", "\n", "\r\n", "\t", "\"", "\\", "/", "é", "漢字", "🦀", "\u{0}", "\u{1f}", "\u{2028}",
        "{}", "```",
    ];
    let n = rng.random_range(1..12);
    (0..n).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect()
}

fn random_pair(rng: &mut StdRng, i: usize) -> PairRecord {
    let correct = random_field(rng);
    let mut incorrect = random_field(rng);
    if incorrect == correct {
        incorrect.push('x');
    }
    PairRecord {
        id: format!("id-{i}-{}", random_field(rng)),
        instruction: random_field(rng),
        correct,
        incorrect,
        meta: rng.random_bool(0.7).then(|| PairMeta {
            teacher_model: random_field(rng),
            similarity: rng.random::<f64>(),
            created_at: "2024-05-06T07:08:09.123456789+00:00".into(),
        }),
    }
}

fn round_trip<T: dataset::Record + PartialEq + std::fmt::Debug>(
    records: &[T],
    dir: &Path,
    name: &str,
) -> Result<(), String> {
    let header = Header::new("acceptance", serde_json::json!({"name": name}));
    let path = dir.join(format!("{name}.jsonl"));
    dataset::write_records(records, &path, Some(&header)).map_err(|e| e.to_string())?;
    let first = std::fs::read(&path).map_err(|e| e.to_string())?;
    let (read_header, back) = dataset::read_records::<T>(&path).map_err(|e| e.to_string())?;
    ensure(read_header.as_ref() == Some(&header), || format!("{name}: header changed"))?;
    ensure(back.len() == records.len(), || format!("{name}: {} of {} records read back", back.len(), records.len()))?;
    if let Some(k) = (0..records.len()).find(|&k| back[k] != records[k]) {
        return Err(format!("{name}: record {k} changed: {:?} vs {:?}", records[k], back[k]));
    }
    dataset::write_records(&back, &path, read_header.as_ref()).map_err(|e| e.to_string())?;
    ensure(std::fs::read(&path).map_err(|e| e.to_string())? == first, || {
        format!("{name}: rewrite is not byte-identical")
    })
}

fn format_round_trip() -> Outcome {
    let mut rng = StdRng::seed_from_u64(9);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pairs: Vec<PairRecord> = (0..1000).map(|i| random_pair(&mut rng, i)).collect();
    let masked: Vec<MaskedRecord> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let tokenizer = if i % 2 == 0 { Tokenizer::Char } else { Tokenizer::WordPunct };
            let masks =
                align::build_pair_masks(p, &tokenizer, DEFAULT_CHAR_CAP).map_err(|e| format!("{}: {e}", p.id))?;
            Ok(MaskedRecord::from_masks(p, &masks))
        })
        .collect::<Result<_, String>>()?;
    round_trip(&pairs, dir.path(), "pairs")?;
    round_trip(&masked, dir.path(), "masked")?;
    Ok("1000 pair records and 1000 masked records, byte-identical rewrite".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("edit-script oracle equivalence", edit_script_oracle),
        ("line-mask expansion conformance", line_expansion_conformance),
        ("hybrid-mask invariants", hybrid_invariants),
        ("dynamic weight bounds", weight_bounds),
        ("loss reduction with unit weights", loss_reduction),
        ("toy-model gradient correctness", gradient_check),
        ("critical-token behavior on synthetic corpus", behavioral),
        ("augmentation pipeline against mock teacher", augmentation_pipeline),
        ("record format round-trip", format_round_trip),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("[PASS] {}. {name}: {detail}", n + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {}. {name}: {detail}", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
