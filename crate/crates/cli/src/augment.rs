use std::path::PathBuf;
use std::time::Duration;

use anyhow::anyhow;
use faft_core::augment::{self, AugmentError, AugmentOptions, TeacherClient, TeacherConfig};
use faft_core::dataset::{self, Header, SourceRecord};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{self, required};
use crate::{CmdResult, Failure};

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    /// Source records: {id, instruction, correct} per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output pair records.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Progress journal; records accepted in an earlier run are not requested again.
    #[arg(long)]
    journal: Option<PathBuf>,
    /// Minimum normalized edit similarity for a variant to be kept.
    #[arg(long)]
    threshold: Option<f64>,
    /// Base URL of the chat-completions API (`/chat/completions` is appended).
    #[arg(long)]
    endpoint_url: Option<String>,
    #[arg(long)]
    model_name: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Total attempts per record.
    #[arg(long)]
    max_retries: Option<u32>,
    /// Per-request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    /// Delay before the first retry in seconds; doubles after each retry.
    #[arg(long)]
    retry_backoff: Option<f64>,
    /// Concurrent requests.
    #[arg(long)]
    jobs: Option<usize>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Resolved {
    input: Option<PathBuf>,
    output: Option<PathBuf>,
    journal: Option<PathBuf>,
    threshold: f64,
    endpoint_url: String,
    model_name: String,
    temperature: f64,
    max_retries: u32,
    timeout: f64,
    retry_backoff: f64,
    jobs: usize,
    api_key_env: String,
}

impl Default for Resolved {
    fn default() -> Self {
        let t = TeacherConfig::default();
        Resolved {
            input: None,
            output: None,
            journal: None,
            threshold: augment::DEFAULT_THRESHOLD,
            endpoint_url: t.endpoint_url,
            model_name: t.model_name,
            temperature: t.temperature,
            max_retries: t.max_retries,
            timeout: t.request_timeout.as_secs_f64(),
            retry_backoff: t.retry_backoff.as_secs_f64(),
            jobs: t.parallelism,
            api_key_env: t.api_key_env,
        }
    }
}

fn seconds(value: f64, name: &str) -> Result<Duration, Failure> {
    Duration::try_from_secs_f64(value)
        .map_err(|_| Failure::usage(anyhow!("--{name} must be a non-negative number of seconds")))
}

pub fn run(args: &Args, config: &Map<String, Value>) -> CmdResult {
    let (cfg, resolved): (Resolved, _) = config::resolve(args, config).map_err(Failure::usage)?;
    let input = required(&cfg.input, "input").map_err(Failure::usage)?;
    let output = required(&cfg.output, "output").map_err(Failure::usage)?;
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Failure::usage(anyhow!("--threshold must lie in [0, 1]")));
    }
    let teacher = TeacherConfig {
        endpoint_url: cfg.endpoint_url.clone(),
        model_name: cfg.model_name.clone(),
        temperature: cfg.temperature,
        max_retries: cfg.max_retries,
        request_timeout: seconds(cfg.timeout, "timeout")?,
        parallelism: cfg.jobs,
        api_key_env: cfg.api_key_env.clone(),
        retry_backoff: seconds(cfg.retry_backoff, "retry-backoff")?,
    };
    let client = TeacherClient::new(teacher).map_err(|e| match e {
        AugmentError::MissingApiKey(var) => {
            Failure::usage(anyhow!("API key not found: set the {var} environment variable"))
        }
        other => Failure::usage(other),
    })?;

    let (_, records) = dataset::read_records::<SourceRecord>(input).map_err(Failure::data)?;
    let opts = AugmentOptions {
        threshold: cfg.threshold,
        journal: cfg.journal.as_deref(),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let outcome = augment::augment_dataset(&records, &client, &opts).map_err(Failure::data)?;

    for (rec, result) in records.iter().zip(&outcome.results) {
        if result.status != augment::VariantStatus::Accepted {
            let status = serde_json::to_value(result.status).unwrap_or_default();
            eprintln!(
                "{}: {} after {} attempt(s) {}",
                rec.id,
                status.as_str().unwrap_or("?"),
                result.attempts,
                result.raw_excerpt.replace('\n', " ")
            );
        }
    }
    let s = &outcome.stats;
    eprintln!(
        "records: {}  accepted: {} (resumed {})  rejected_identical: {}  rejected_dissimilar: {}  extraction_failed: {}  request_failed: {}",
        s.total(),
        s.accepted,
        s.resumed,
        s.rejected_identical,
        s.rejected_dissimilar,
        s.extraction_failed,
        s.request_failed
    );

    let header = Header::new("augment", resolved);
    dataset::write_records(&outcome.pairs, output, Some(&header)).map_err(Failure::data)?;
    if s.accepted == 0 {
        return Err(Failure::data(anyhow!("no variant was accepted")));
    }
    Ok(())
}
