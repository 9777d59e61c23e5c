//! `rar`: batch runner over the retrieve-and-rank engine.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 every query fell back because the ranker was unreachable.

mod build;
mod config;
mod crop;
mod error;
mod evaluate;
mod predict;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rar_core::datagen::{DatagenParams, TargetOrder};
use rar_core::index::HnswParams;

use config::{env_ranker_url, fingerprint, resolve, ConfigFile, RunFlags, Style};
use error::CliError;

#[derive(Parser)]
#[command(name = "rar", version, about = "Retrieve candidate categories from an embedding memory and rank them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TargetOrderArg {
    Similarity,
    GroundTruthFirst,
}

#[derive(Subcommand)]
enum Command {
    /// Convert line-delimited JSON records into a memory file
    BuildMemory {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an HNSW index over the image and text records of a memory file
    BuildIndex {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = HnswParams::default().m)]
        m: usize,
        #[arg(long, default_value_t = HnswParams::default().ef_construction)]
        ef_construction: usize,
        #[arg(long, default_value_t = HnswParams::default().ef_search)]
        ef_search: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `auto`, `none`, or an output dimension
        #[arg(long, default_value = "auto")]
        projection: String,
        #[arg(long, default_value_t = 0)]
        projection_seed: u64,
    },
    /// Write the top-k candidate categories per query
    Retrieve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrieve, rank and write a run log
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
        /// Run log path (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Leave timings out so logs compare byte for byte
        #[arg(long)]
        no_timing: bool,
        /// Print the configuration fingerprint and exit
        #[arg(long)]
        print_fingerprint: bool,
    },
    /// Score a run log
    Eval {
        #[arg(long)]
        log: PathBuf,
        /// Refuse the log unless it was produced under this configuration
        #[arg(long)]
        config: Option<PathBuf>,
        /// Refuse the log unless its fingerprint matches
        #[arg(long)]
        fingerprint: Option<String>,
        /// `name<TAB>rare|common|frequent` per line
        #[arg(long)]
        buckets: Option<PathBuf>,
        #[arg(long)]
        max_k: Option<usize>,
        /// Structured report path
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate ranking fine-tuning entries from two memory files
    GenFinetune {
        #[arg(long)]
        memory_a: PathBuf,
        #[arg(long)]
        memory_b: PathBuf,
        #[arg(long, default_value_t = 20)]
        pool: usize,
        #[arg(long, default_value_t = 16)]
        sets: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "similarity")]
        target_order: TargetOrderArg,
        #[arg(long, value_enum, default_value = "plain")]
        style: Style,
        #[arg(long, default_value = "{id}")]
        image_ref_template: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blur, crop and letterbox detection proposals listed in a CSV file
    CropRegions {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        crop_scale: Option<f64>,
        #[arg(long)]
        no_blur: bool,
        #[arg(long)]
        blur_sigma: Option<f64>,
        #[arg(long)]
        size: Option<u32>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildMemory { input, out } => build::build_memory(&input, &out),
        Command::BuildIndex {
            memory,
            out,
            m,
            ef_construction,
            ef_search,
            seed,
            projection,
            projection_seed,
        } => {
            let params = HnswParams {
                m,
                ef_construction,
                ef_search,
                seed,
            };
            params.validate().map_err(CliError::usage)?;
            build::build_index(&memory, &out, params, &projection, projection_seed)
        }
        Command::Retrieve { config, flags, out } => {
            let file = ConfigFile::load_optional(config.as_deref())?;
            let cfg = resolve(&flags, &file, env_ranker_url())?;
            predict::run_retrieve(&cfg, out.as_deref())
        }
        Command::Predict {
            config,
            flags,
            out,
            workers,
            no_timing,
            print_fingerprint,
        } => {
            let file = ConfigFile::load_optional(config.as_deref())?;
            let cfg = resolve(&flags, &file, env_ranker_url())?;
            if print_fingerprint {
                println!("{}", fingerprint(&cfg));
                return Ok(());
            }
            let opts = predict::PredictOptions {
                out: out.as_deref(),
                workers,
                timing: !no_timing,
            };
            predict::run_predict(&cfg, &opts)
        }
        Command::Eval {
            log,
            config,
            fingerprint: expected,
            buckets,
            max_k,
            out,
        } => {
            let expected = match (config, expected) {
                (Some(_), Some(_)) => return Err(CliError::usage("give --config or --fingerprint, not both")),
                (Some(path), None) => {
                    let file = ConfigFile::load(&path)?;
                    Some(fingerprint(&resolve(&RunFlags::default(), &file, env_ranker_url())?))
                }
                (None, f) => f,
            };
            let report = evaluate::run_eval(&evaluate::EvalOptions {
                log: &log,
                expect_fingerprint: expected,
                buckets: buckets.as_deref(),
                max_k,
                out: out.as_deref(),
            })?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::GenFinetune {
            memory_a,
            memory_b,
            pool,
            sets,
            k,
            seed,
            target_order,
            style,
            image_ref_template,
            out,
        } => {
            let params = DatagenParams {
                pool,
                sets_per_query: sets,
                k,
                seed,
                target_order: match target_order {
                    TargetOrderArg::Similarity => TargetOrder::Similarity,
                    TargetOrderArg::GroundTruthFirst => TargetOrder::GroundTruthFirst,
                },
                style: style.into(),
                image_ref_template,
            };
            build::gen_finetune(&memory_a, &memory_b, &params, &out)
        }
        Command::CropRegions {
            proposals,
            out_dir,
            config,
            crop_scale,
            no_blur,
            blur_sigma,
            size,
        } => {
            let file = ConfigFile::load_optional(config.as_deref())?;
            let mut params = file.region_params();
            params.crop_scale = crop_scale.unwrap_or(params.crop_scale);
            params.blur = params.blur && !no_blur;
            params.blur_sigma = blur_sigma.unwrap_or(params.blur_sigma);
            params.out_size = size.unwrap_or(params.out_size);
            let failed = crop::crop_regions(&proposals, &out_dir, &params)?;
            if failed > 0 {
                return Err(CliError::data(format!("{failed} proposals failed; see the manifest")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rar: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
