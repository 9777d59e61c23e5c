use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use rar_core::eval::{EvalReport, FrequencyBuckets, LabeledPrediction};
use rar_core::rank::PredictionSource;

use crate::error::{CliError, Context};
use crate::runlog::{read_log, LogHeader, QueryRecord};

pub struct EvalOptions<'a> {
    pub log: &'a Path,
    pub expect_fingerprint: Option<String>,
    pub buckets: Option<&'a Path>,
    pub max_k: Option<usize>,
    pub out: Option<&'a Path>,
}

pub fn labeled(records: &[QueryRecord]) -> Vec<LabeledPrediction> {
    let mut preds: Vec<LabeledPrediction> = records
        .iter()
        .filter_map(|r| {
            let p = r.prediction.as_ref()?;
            Some(LabeledPrediction {
                query_id: r.query_id,
                ground_truth: r.ground_truth.clone()?,
                predicted_ordering: p.ordering.clone(),
                confidence: p.confidence(),
            })
        })
        .collect();
    preds.sort_by_key(|p| p.query_id);
    preds
}

fn check_fingerprint(header: &LogHeader, expected: Option<&str>) -> Result<(), CliError> {
    match expected {
        Some(e) if e != header.fingerprint => Err(CliError::data(format!(
            "log fingerprint {} does not match the expected configuration {e}",
            header.fingerprint
        ))),
        _ => Ok(()),
    }
}

pub fn run_eval(opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let f = File::open(opts.log).context(opts.log.display())?;
    let (header, records) = read_log(BufReader::new(f))?;
    check_fingerprint(&header, opts.expect_fingerprint.as_deref())?;
    let buckets = match opts.buckets {
        Some(p) => Some(FrequencyBuckets::parse(&fs::read_to_string(p).context(p.display())?).context(p.display())?),
        None => None,
    };
    let preds = labeled(&records);
    let max_k = opts.max_k.unwrap_or(header.config.k);
    let mut report = EvalReport::compute(&preds, max_k, buckets.as_ref()).context(opts.log.display())?;
    report.fallbacks = records
        .iter()
        .filter_map(|r| r.prediction.as_ref())
        .filter(|p| p.source == PredictionSource::Fallback)
        .count();
    let skipped = records.len() - preds.len();
    if skipped > 0 {
        eprintln!("{skipped} log records without a prediction or ground truth were skipped");
    }
    if let Some(out) = opts.out {
        let json = serde_json::to_string_pretty(&report).map_err(CliError::data)?;
        fs::write(out, json + "\n").context(out.display())?;
    }
    Ok(report)
}
