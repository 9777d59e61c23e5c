use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rar_core::index::{read_index_file, AnnIndex};
use rar_core::rank::{
    rerank, BackendError, FallbackPolicy, IdentityRanker, OracleRanker, PredictionSource, QueryContext,
    RankerBackend, RemoteRanker,
};
use rar_core::retrieve::{
    retrieve_categories_i2i, retrieve_categories_i2i_exact, retrieve_categories_i2t, CandidateList, RetrieveError,
    TextBank,
};
use rar_core::store::{read_interchange, read_memory_file, MemoryStore, Modality};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{fingerprint, Backend, Mode, RunConfig};
use crate::error::{CliError, Context};
use crate::runlog::{write_log, LogHeader, QueryRecord, Timing};

pub enum Retriever {
    Ann(AnnIndex),
    Exact(Arc<MemoryStore>),
    Text(TextBank),
}

impl Retriever {
    pub fn open(
        memory: &Path,
        index: Option<&Path>,
        mode: Mode,
        exact: bool,
        template: &str,
    ) -> Result<Self, CliError> {
        let store = Arc::new(read_memory_file(memory).context(memory.display())?);
        Ok(match (mode, index) {
            (Mode::I2t, _) => Retriever::Text(TextBank::from_store(&store, template).context(memory.display())?),
            (Mode::I2i, Some(path)) if !exact => Retriever::Ann(read_index_file(path, store).context(path.display())?),
            (Mode::I2i, _) => Retriever::Exact(store),
        })
    }

    pub fn retrieve(&self, query: &[f32], k: usize) -> Result<CandidateList, RetrieveError> {
        match self {
            Retriever::Ann(index) => retrieve_categories_i2i(index, query, k),
            Retriever::Exact(store) => retrieve_categories_i2i_exact(store, query, k),
            Retriever::Text(bank) => retrieve_categories_i2t(bank, query, k),
        }
    }
}

pub fn load_queries(path: &Path) -> Result<MemoryStore, CliError> {
    let f = File::open(path).context(path.display())?;
    read_interchange(BufReader::new(f)).context(path.display())
}

/// `(id, ground truth, vector)` for every image record, ordered by id.
fn query_rows(queries: &MemoryStore) -> Vec<(u64, String, &[f32])> {
    let mut rows: Vec<_> = queries
        .records()
        .iter()
        .filter(|r| r.modality == Modality::Image)
        .map(|r| (r.id, queries.label_name(r).to_string(), r.vector.as_slice()))
        .collect();
    rows.sort_by_key(|r| r.0);
    rows
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).context(p.display())?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

#[derive(Serialize)]
struct RetrievalLine<'a> {
    query_id: u64,
    ground_truth: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidates: Option<CandidateList>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn run_retrieve(config: &RunConfig, out: Option<&Path>) -> Result<(), CliError> {
    let retriever = Retriever::open(
        &config.memory,
        config.index.as_deref(),
        config.mode,
        config.exact,
        &config.template,
    )?;
    let queries = load_queries(&config.queries)?;
    let rows = query_rows(&queries);
    let lines: Vec<RetrievalLine> = rows
        .par_iter()
        .map(|(id, gt, v)| match retriever.retrieve(v, config.k) {
            Ok(c) => RetrievalLine {
                query_id: *id,
                ground_truth: gt,
                candidates: Some(c),
                error: None,
            },
            Err(e) => RetrievalLine {
                query_id: *id,
                ground_truth: gt,
                candidates: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut w = open_output(out)?;
    for l in &lines {
        serde_json::to_writer(&mut w, l).map_err(CliError::data)?;
        w.write_all(b"\n").map_err(CliError::data)?;
    }
    w.flush().map_err(CliError::data)
}

fn backend_for(config: &RunConfig, truth: HashMap<u64, String>) -> Result<Box<dyn RankerBackend>, CliError> {
    Ok(match config.ranker.backend {
        Backend::Identity => Box::new(IdentityRanker),
        Backend::Oracle => Box::new(OracleRanker::new(truth)),
        Backend::Remote => Box::new(RemoteRanker::new(config.ranker.remote_config()?)),
    })
}

fn millis(since: Instant) -> f64 {
    (since.elapsed().as_secs_f64() * 1e6).round() / 1e3
}

pub struct PredictOptions<'a> {
    pub out: Option<&'a Path>,
    pub workers: Option<usize>,
    pub timing: bool,
}

pub fn run_predict(config: &RunConfig, opts: &PredictOptions) -> Result<(), CliError> {
    let retriever = Retriever::open(
        &config.memory,
        config.index.as_deref(),
        config.mode,
        config.exact,
        &config.template,
    )?;
    let queries = load_queries(&config.queries)?;
    let rows = query_rows(&queries);
    let truth = rows.iter().map(|(id, gt, _)| (*id, gt.clone())).collect();
    let backend = backend_for(config, truth)?;
    let policy = FallbackPolicy::default();

    let run_one = |(id, gt, v): &(u64, String, &[f32])| -> QueryRecord {
        let t0 = Instant::now();
        let mut record = QueryRecord {
            query_id: *id,
            ground_truth: Some(gt.clone()),
            prediction: None,
            error: None,
            timing: None,
        };
        let candidates = match retriever.retrieve(v, config.k) {
            Ok(c) => c,
            Err(e) => {
                record.error = Some(format!("retrieval: {e}"));
                return record;
            }
        };
        let retrieve_ms = millis(t0);
        let t1 = Instant::now();
        let ctx = QueryContext {
            query_id: *id,
            image_ref: config.image_ref_template.replace("{id}", &id.to_string()),
            style: config.style,
        };
        match rerank(&candidates, &ctx, backend.as_ref(), &policy) {
            Ok(p) => record.prediction = Some(p),
            Err(e) => record.error = Some(format!("ranking: {e}")),
        }
        if opts.timing {
            record.timing = Some(Timing {
                retrieve_ms,
                rank_ms: millis(t1),
            });
        }
        record
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.unwrap_or(0))
        .build()
        .map_err(CliError::usage)?;
    // records are collected in query order, so logs are reproducible
    let records: Vec<QueryRecord> = pool.install(|| rows.par_iter().map(run_one).collect());

    let header = LogHeader {
        fingerprint: fingerprint(config),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
    };
    let out = open_output(opts.out)?;
    write_log(&header, &records, out).map_err(CliError::data)?;

    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let fell_back = records
        .iter()
        .filter_map(|r| r.prediction.as_ref())
        .filter(|p| p.source == PredictionSource::Fallback)
        .count();
    eprintln!(
        "{} queries, {} fell back to retrieval order, {} failed",
        records.len(),
        fell_back,
        failed
    );
    let unreachable = records
        .iter()
        .filter(|r| {
            r.prediction
                .as_ref()
                .is_some_and(|p| matches!(p.error, Some(BackendError::Unreachable(_))))
        })
        .count();
    if !records.is_empty() && unreachable == records.len() {
        return Err(CliError::BackendUnreachable(records.len()));
    }
    Ok(())
}
