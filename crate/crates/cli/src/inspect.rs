use std::io::IsTerminal;
use std::path::PathBuf;

use anyhow::anyhow;
use faft_core::dataset::{MaskedRecord, RecordReader};
use faft_core::diff;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{self, required};
use crate::{CmdResult, Failure};

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    /// Masked records.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Record to show.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Resolved {
    input: Option<PathBuf>,
    id: Option<String>,
}

pub fn run(args: &Args, config: &Map<String, Value>) -> CmdResult {
    let (cfg, _): (Resolved, _) = config::resolve(args, config).map_err(Failure::usage)?;
    let input = required(&cfg.input, "input").map_err(Failure::usage)?;
    let id = required(&cfg.id, "id").map_err(Failure::usage)?;
    let reader = RecordReader::<MaskedRecord, _>::open(input).map_err(Failure::data)?;
    let mut found = None;
    for record in reader {
        let record = record.map_err(Failure::data)?;
        if &record.id == id {
            found = Some(record);
            break;
        }
    }
    let record = found.ok_or_else(|| Failure::usage(anyhow!("unknown id `{id}` in {}", input.display())))?;
    let color = std::io::stdout().is_terminal() && std::env::var_os("NO_COLOR").is_none();
    print!("{}", render(&record, color));
    Ok(())
}

fn render(record: &MaskedRecord, color: bool) -> String {
    let mut out = format!("id: {}\ntokenizer: {}\n", record.id, record.tokenizer_id);
    for (label, text, spans, hybrid, lines) in [
        ("correct", &record.correct, &record.spans_correct, &record.hybrid_correct, &record.line_mask_correct),
        (
            "incorrect",
            &record.incorrect,
            &record.spans_incorrect,
            &record.hybrid_incorrect,
            &record.line_mask_incorrect,
        ),
    ] {
        let marked = hybrid.iter().filter(|&&h| h > 0).count();
        out.push_str(&format!(
            "\n{label}: {} lines ({} changed), {} tokens ({marked} marked)\n",
            lines.len(),
            lines.iter().filter(|&&m| m == 1).count(),
            spans.len()
        ));
        out.push_str(&annotate(text, spans, hybrid, color));
    }
    out
}

/// How a token is shown: whitespace and control characters get visible
/// stand-ins so every token occupies at least one column.
fn visible(token: &str) -> String {
    token
        .chars()
        .map(|c| match c {
            ' ' => "·".to_string(),
            '\t' => "→".to_string(),
            '\n' => "⏎".to_string(),
            c if c.is_control() => c.escape_unicode().to_string(),
            c => c.to_string(),
        })
        .collect()
}

fn paint(text: &str, value: u8, color: bool) -> String {
    match (color, value) {
        (true, 2) => format!("\x1b[1;31m{text}\x1b[0m"),
        (true, 1) => format!("\x1b[33m{text}\x1b[0m"),
        _ => text.to_string(),
    }
}

/// Two rows per source line: the tokens, then each token's hybrid value
/// under its first column.
fn annotate(text: &str, spans: &[[usize; 2]], hybrid: &[u8], color: bool) -> String {
    let chars: Vec<char> = text.chars().collect();
    let line_ranges = diff::line_char_ranges(text);
    let mut out = String::new();
    let mut k = 0;
    for (n, &(_, line_end)) in line_ranges.iter().enumerate() {
        let mut tokens_row = format!("{:>5} | ", n + 1);
        let mut values_row = format!("{:>5} | ", "");
        let mut first = true;
        while k < spans.len() && spans[k][0] < line_end {
            let shown = visible(&chars[spans[k][0]..spans[k][1]].iter().collect::<String>());
            let width = shown.chars().count();
            if !first {
                tokens_row.push(' ');
                values_row.push(' ');
            }
            first = false;
            tokens_row.push_str(&paint(&shown, hybrid[k], color));
            values_row.push_str(&format!("{:<width$}", hybrid[k]));
            k += 1;
        }
        out.push_str(tokens_row.trim_end());
        out.push('\n');
        out.push_str(values_row.trim_end());
        out.push('\n');
    }
    out
}
