use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::anyhow;
use faft_core::dataset::{self, Header, MaskedRecord, TraceRecord};
use faft_core::weighting::{self, MeanMode, WeightConfig, WeightError, WeightedLossReport};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::{self, required};
use crate::{CmdResult, Failure};

#[derive(clap::Args, Debug, Serialize)]
pub struct Args {
    /// Masked records.
    #[arg(long)]
    masked: Option<PathBuf>,
    /// Probability traces: {id, probs_correct, probs_incorrect} per line.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Output reports.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Probability floor and guard on the weight denominator.
    #[arg(long)]
    epsilon: Option<f64>,
    /// How doubly-marked tokens enter the masked mean.
    #[arg(long, value_parser = ["hybrid-weighted", "plain"])]
    mean_mode: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Resolved {
    masked: Option<PathBuf>,
    traces: Option<PathBuf>,
    output: Option<PathBuf>,
    alpha: f64,
    epsilon: f64,
    mean_mode: MeanMode,
}

impl Default for Resolved {
    fn default() -> Self {
        let w = WeightConfig::<f64>::default();
        Resolved {
            masked: None,
            traces: None,
            output: None,
            alpha: w.alpha,
            epsilon: w.epsilon,
            mean_mode: w.mean_mode,
        }
    }
}

pub fn run(args: &Args, config: &Map<String, Value>) -> CmdResult {
    let (cfg, resolved): (Resolved, _) = config::resolve(args, config).map_err(Failure::usage)?;
    let masked_path = required(&cfg.masked, "masked").map_err(Failure::usage)?;
    let traces_path = required(&cfg.traces, "traces").map_err(Failure::usage)?;
    let output = required(&cfg.output, "output").map_err(Failure::usage)?;
    let mut wcfg = WeightConfig::with_alpha(cfg.alpha).map_err(Failure::usage)?;
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(Failure::usage(anyhow!("--epsilon must lie in (0, 1)")));
    }
    wcfg.epsilon = cfg.epsilon;
    wcfg.mean_mode = cfg.mean_mode;

    let (_, masked) = dataset::read_records::<MaskedRecord>(masked_path).map_err(Failure::data)?;
    let (_, traces) = dataset::read_records::<TraceRecord>(traces_path).map_err(Failure::data)?;
    let mut by_id: HashMap<&str, &TraceRecord> = traces.iter().map(|t| (t.id.as_str(), t)).collect();

    let mut reports = Vec::with_capacity(masked.len());
    let mut unmatched = Vec::new();
    for rec in &masked {
        let Some(trace) = by_id.remove(rec.id.as_str()) else {
            unmatched.push(format!("{} (no trace)", rec.id));
            continue;
        };
        let sample = weighting::weigh_sample(
            &trace.probs_correct,
            &trace.probs_incorrect,
            &rec.hybrid_correct,
            &rec.hybrid_incorrect,
            &wcfg,
        )
        .map_err(|e| match e {
            WeightError::LengthMismatch { .. } => Failure::data(anyhow!(
                "record {}: {e} (probs_correct {} vs {} tokens, probs_incorrect {} vs {} tokens)",
                rec.id,
                trace.probs_correct.len(),
                rec.hybrid_correct.len(),
                trace.probs_incorrect.len(),
                rec.hybrid_incorrect.len()
            )),
            other => Failure::numeric(anyhow!("record {}: {other}", rec.id)),
        })?;
        if !sample.faft_loss.is_finite() || !sample.weight.is_finite() {
            return Err(Failure::numeric(anyhow!("record {}: non-finite loss", rec.id)));
        }
        reports.push(WeightedLossReport::new(&rec.id, &sample));
    }
    let mut orphans: Vec<&str> = by_id.into_keys().collect();
    orphans.sort_unstable();
    unmatched.extend(orphans.into_iter().map(|id| format!("{id} (no masked record)")));

    let header = Header::new("weigh", resolved);
    dataset::write_records(&reports, output, Some(&header)).map_err(Failure::data)?;
    if !unmatched.is_empty() {
        for id in &unmatched {
            eprintln!("unmatched: {id}");
        }
        return Err(Failure::data(anyhow!("{} unmatched id(s)", unmatched.len())));
    }
    Ok(())
}
