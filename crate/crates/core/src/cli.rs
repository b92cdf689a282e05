//! The `rvssdh` command line: `train`, `run`, `hash`, `search`, `eval` and
//! `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::gradcheck::{self, GradCheckConfig};
use crate::pipeline::{self, Embeddings};
use crate::real::Real;
use crate::retrieval::VectorMetric;
use crate::rvssdh::Model;
use crate::train::EpochLog;

#[derive(Parser, Debug)]
#[command(name = "rvssdh", version, about = "Deep supervised hashing with a random-VLAD layer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by commands that read a run config.
#[derive(clap::Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Database,
    Queries,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for VectorMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => VectorMetric::Cosine,
            MetricArg::Euclidean => VectorMetric::Euclidean,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes model.rvck, train_log.tsv and config.txt.
    Train(RunArgs),
    /// Train, hash the database split, query it and score the result.
    Run(RunArgs),
    /// Hash (or embed) one split of the configured data with a checkpoint.
    Hash {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "database")]
        split: SplitArg,
        /// Output file; RVHC for hashing variants, RVF1 otherwise.
        #[arg(long = "codes")]
        codes: PathBuf,
    },
    /// Rank a database for one query and print the top hits.
    Search {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// Position of the query in the query file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, value_enum, default_value = "cosine")]
        metric: MetricArg,
        #[arg(long)]
        include_self: bool,
    },
    /// Score every query against a database; writes pr_curve.tsv and map.tsv.
    Eval {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Distance for real-valued (RVF1) files.
        #[arg(long, value_enum, default_value = "cosine")]
        metric: MetricArg,
        #[arg(long)]
        include_self: bool,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// Only `seed` is read from the config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Only layers whose name starts with this.
        #[arg(long)]
        only: Option<String>,
        /// Fault injection: perturb gradients of groups containing this.
        #[arg(long)]
        corrupt: Option<String>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        Error::Shape(_) | Error::Invalid(_) | Error::Format { .. } | Error::Io(_) => 2,
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_epoch(row: &EpochLog) {
    let val = row.val_top1.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
    println!("epoch {:>3}  objective {:.5}  E1 {:.5}  E2 {:.5}  val_top1 {val}", row.epoch, row.objective, row.e1, row.e2);
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let prep = pipeline::prepare(&cfg)?;
    let ck = match cfg.precision {
        Precision::F32 => pipeline::train_run::<f32>(&cfg, &prep, print_epoch)?.checkpoint,
        Precision::F64 => pipeline::train_run::<f64>(&cfg, &prep, print_epoch)?.checkpoint,
    };
    println!("checkpoint {}", ck.display());
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let s = pipeline::run(&cfg, print_epoch)?;
    s.write_tsv(&mut io::stdout().lock())?;
    Ok(())
}

fn hash_with<T: Real>(ck: &Checkpoint, prep: &pipeline::Prepared, split: SplitArg, out: &Path) -> Result<usize> {
    let model = Model::<T> { config: ck.model.clone(), params: ck.params.cast() };
    let (ds, ids) = match split {
        SplitArg::Train => (prep.train.clone(), prep.split.train.iter().map(|&i| i as u64).collect()),
        SplitArg::Database => (prep.database.clone(), prep.database_ids.clone()),
        SplitArg::Queries => (prep.queries(), prep.query_ids()),
    };
    let e = pipeline::embed(&model, &ds, &ids)?;
    e.save(out, model.config.classes)?;
    Ok(e.len())
}

fn cmd_hash(args: &RunArgs, checkpoint: &Path, split: SplitArg, out: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let prep = pipeline::prepare(&cfg)?;
    let expected = cfg.model_config(prep.data.shape(), prep.data.classes(), prep.images)?;
    let stored = Checkpoint::load(checkpoint, None)?;
    if stored.model.bits != expected.bits {
        return Err(Error::Config(format!(
            "checkpoint codes have L = {} bits, config asks for {}",
            stored.model.bits, expected.bits
        )));
    }
    let ck = Checkpoint::load(checkpoint, Some(&expected))?;
    let n = match cfg.precision {
        Precision::F32 => hash_with::<f32>(&ck, &prep, split, out)?,
        Precision::F64 => hash_with::<f64>(&ck, &prep, split, out)?,
    };
    println!("wrote {n} entries to {}", out.display());
    Ok(())
}

fn load_pair(db: &Path, queries: &Path) -> Result<(Embeddings, Embeddings)> {
    let db = Embeddings::load(db)?;
    let mut q = Embeddings::load(queries)?;
    if let (Embeddings::Vectors(d), Embeddings::Vectors(qv)) = (&db, &mut q) {
        pipeline::match_query_ids(d, qv);
    }
    Ok((db, q))
}

fn cmd_search(
    db: &Path,
    queries: &Path,
    index: usize,
    top: usize,
    metric: MetricArg,
    include_self: bool,
) -> Result<()> {
    let (db, q) = load_pair(db, queries)?;
    if index >= q.len() {
        return Err(Error::invalid(format!("query index {index} outside a file of {} queries", q.len())));
    }
    let one = q.subset(&[index])?;
    let (results, _) = pipeline::search_all(&db, &one, metric.into(), include_self)?;
    let mut out = io::stdout().lock();
    writeln!(out, "rank\tid\tdistance\trelevant")?;
    for (r, h) in results[0].hits.iter().take(top).enumerate() {
        writeln!(out, "{}\t{}\t{}\t{}", r + 1, h.id, h.distance, h.relevant as u8)?;
    }
    Ok(())
}

fn cmd_eval(db: &Path, queries: &Path, out: &Path, metric: MetricArg, include_self: bool) -> Result<()> {
    let (db, q) = load_pair(db, queries)?;
    let (results, _) = pipeline::search_all(&db, &q, metric.into(), include_self)?;
    let report = eval::evaluate(&results)?;
    fs::create_dir_all(out)?;
    pipeline::write_retrieval(out, &report)?;
    if !report.excluded.is_empty() {
        println!("excluded {} queries with no relevant database item", report.excluded.len());
    }
    println!("mAP\t{}", report.map);
    Ok(())
}

/// Returns whether every layer passed.
fn cmd_gradcheck(
    config: Option<&Path>,
    seed: Option<u64>,
    seeds: u64,
    only: Option<&str>,
    corrupt: Option<String>,
    out: Option<&Path>,
) -> Result<bool> {
    let base = match config {
        Some(p) => RunConfig::load(p)?.train.seed,
        None => 0,
    };
    let cfg = GradCheckConfig { seeds, base_seed: seed.unwrap_or(base), corrupt, ..Default::default() };
    if cfg.seeds == 0 {
        return Err(Error::Config("seeds must be >= 1".into()));
    }
    let report = gradcheck::run(&cfg, only)?;
    if report.layers.is_empty() {
        return Err(Error::Config(format!("no layer matches `{}`", only.unwrap_or(""))));
    }
    report.write_to(&mut io::stdout().lock())?;
    if let Some(p) = out {
        let mut f = fs::File::create(p)?;
        report.write_to(&mut f)?;
    }
    Ok(report.passed())
}

/// Runs a parsed command and maps the outcome to an exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Run(a) => cmd_run(a),
        Command::Hash { run, checkpoint, split, codes } => cmd_hash(run, checkpoint, *split, codes),
        Command::Search { db, queries, index, top, metric, include_self } => {
            cmd_search(db, queries, *index, *top, *metric, *include_self)
        }
        Command::Eval { db, queries, out, metric, include_self } => {
            cmd_eval(db, queries, out, *metric, *include_self)
        }
        Command::Gradcheck { config, seed, seeds, only, corrupt, out } => {
            match cmd_gradcheck(config.as_deref(), *seed, *seeds, only.as_deref(), corrupt.clone(), out.as_deref()) {
                Ok(true) => Ok(()),
                Ok(false) => Err(Error::Numeric("gradient check failed".into())),
                Err(e) => Err(e),
            }
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses arguments and runs. Usage errors exit with 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
