use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use rar_core::datagen::{generate_ranking_dataset_with_stats, write_entries, DatagenParams};
use rar_core::index::{build_hnsw, write_index_file, HnswParams, Projection, NO_PROJECTION_MAX_DIM};
use rar_core::store::{read_interchange, read_memory_file, write_memory_file};

use crate::error::{CliError, Context};

pub fn build_memory(input: &Path, out: &Path) -> Result<(), CliError> {
    let f = File::open(input).context(input.display())?;
    let store = read_interchange(BufReader::new(f)).context(input.display())?;
    let bytes = write_memory_file(&store, out).context(out.display())?;
    eprintln!(
        "wrote {} records, dimension {}, {} labels ({bytes} bytes) to {}",
        store.len(),
        store.dimension(),
        store.catalog().len(),
        out.display()
    );
    Ok(())
}

/// `auto` projects only above the no-projection dimension limit.
pub fn parse_projection(spec: &str, dim: usize) -> Result<Option<usize>, CliError> {
    match spec {
        "none" => Ok(None),
        "auto" if dim > NO_PROJECTION_MAX_DIM => Ok(Some(Projection::default_out_dim(dim))),
        "auto" => Ok(None),
        n => n
            .parse::<usize>()
            .map(Some)
            .map_err(|_| CliError::usage(format!("--projection must be auto, none or a dimension, got {n:?}"))),
    }
}

pub fn build_index(
    memory: &Path,
    out: &Path,
    params: HnswParams,
    projection: &str,
    projection_seed: u64,
) -> Result<(), CliError> {
    let store = Arc::new(read_memory_file(memory).context(memory.display())?);
    let proj = match parse_projection(projection, store.dimension())? {
        Some(out_dim) => Some(Projection::random(store.dimension(), out_dim, projection_seed).map_err(CliError::usage)?),
        None => None,
    };
    let index = build_hnsw(store.clone(), params, proj).map_err(|e| match e {
        rar_core::index::IndexError::BadParams(_) => CliError::usage(e),
        e => CliError::data(e),
    })?;
    let bytes = write_index_file(&index, out).context(out.display())?;
    eprintln!(
        "indexed {} records in {} layers, graph dimension {} ({bytes} bytes) to {}",
        store.len(),
        index.layer_count(),
        index.projection().map_or(store.dimension(), |p| p.out_dim()),
        out.display()
    );
    Ok(())
}

pub fn gen_finetune(memory_a: &Path, memory_b: &Path, params: &DatagenParams, out: &Path) -> Result<(), CliError> {
    params.validate().map_err(CliError::usage)?;
    let a = read_memory_file(memory_a).context(memory_a.display())?;
    let b = read_memory_file(memory_b).context(memory_b.display())?;
    let (entries, stats) = generate_ranking_dataset_with_stats(&a, &b, params).map_err(CliError::data)?;
    let w = BufWriter::new(File::create(out).context(out.display())?);
    write_entries(&entries, w).context(out.display())?;
    eprintln!(
        "{} queries, {} subsets sampled, {} retained, {} duplicates dropped, {} entries written to {}",
        stats.queries,
        stats.subsets_sampled,
        stats.retained,
        stats.duplicates_dropped,
        stats.entries,
        out.display()
    );
    Ok(())
}
