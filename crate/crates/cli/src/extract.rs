use std::path::PathBuf;

use anyhow::{anyhow, Context};
use faft_core::align::{self, AlignError, ExternalOffsets, Tokenizer};
use faft_core::dataset::{self, Header, MaskedRecord, PairRecord};
use faft_core::diff::{DiffError, DEFAULT_CHAR_CAP};
use faft_core::MaskSet;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{self, required};
use crate::{CmdResult, Failure};

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    /// Pair records.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output masked records.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_parser = ["char", "wordpunct", "external"])]
    tokenizer: Option<String>,
    /// Token offsets for the external tokenizer: {text_sha256, spans} per line.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// Longest code, in chars, for which character edits are computed.
    #[arg(long)]
    max_chars: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Resolved {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    tokenizer: String,
    sidecar: Option<PathBuf>,
    max_chars: usize,
    jobs: usize,
}

impl Default for Resolved {
    fn default() -> Self {
        Resolved {
            input: None,
            output: None,
            tokenizer: "wordpunct".into(),
            sidecar: None,
            max_chars: DEFAULT_CHAR_CAP,
            jobs: 1,
        }
    }
}

fn tokenizer(cfg: &Resolved) -> Result<Tokenizer, Failure> {
    match (cfg.tokenizer.as_str(), &cfg.sidecar) {
        ("char", _) => Ok(Tokenizer::Char),
        ("wordpunct", _) => Ok(Tokenizer::WordPunct),
        ("external", Some(path)) => ExternalOffsets::load(path).map(Tokenizer::External).map_err(Failure::data),
        ("external", None) => Err(Failure::usage(anyhow!("--tokenizer external needs --sidecar"))),
        (other, _) => {
            Err(Failure::usage(anyhow!("unknown tokenizer `{other}` (expected char, wordpunct or external)")))
        }
    }
}

/// Masks for every pair, computed on up to `jobs` threads; order is preserved.
fn build_all(pairs: &[PairRecord], tok: &Tokenizer, cap: usize, jobs: usize) -> Vec<Result<MaskSet, AlignError>> {
    let chunk = pairs.len().div_ceil(jobs.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| align::build_pair_masks(p, tok, cap)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("mask worker panicked")).collect()
    })
}

pub fn run(args: &Args, config: &Map<String, Value>) -> CmdResult {
    let (cfg, resolved): (Resolved, _) = config::resolve(args, config).map_err(Failure::usage)?;
    let input = required(&cfg.input, "input").map_err(Failure::usage)?;
    let output = required(&cfg.output, "output").map_err(Failure::usage)?;
    if cfg.jobs == 0 {
        return Err(Failure::usage(anyhow!("--jobs must be at least 1")));
    }
    let tok = tokenizer(&cfg)?;
    let (_, pairs) = dataset::read_records::<PairRecord>(input).map_err(Failure::data)?;

    let mut masked = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (pair, masks) in pairs.iter().zip(build_all(&pairs, &tok, cfg.max_chars, cfg.jobs)) {
        match masks {
            Ok(m) => masked.push(MaskedRecord::from_masks(pair, &m)),
            Err(AlignError::Diff(e @ DiffError::LengthCapExceeded { .. })) => {
                skipped += 1;
                eprintln!("skipped {}: {e}", pair.id);
            }
            Err(e) => return Err(Failure::data(anyhow!(e).context(format!("record {}", pair.id)))),
        }
    }
    let header = Header::new("extract", resolved);
    dataset::write_records(&masked, output, Some(&header))
        .with_context(|| format!("writing {}", output.display()))
        .map_err(Failure::data)?;
    eprintln!("masked {} of {} records, skipped {skipped}", masked.len(), pairs.len());
    Ok(())
}
