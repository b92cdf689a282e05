//! End-to-end runs: load, split, train, hash or embed, retrieve, score.
//!
//! Hashing variants store binary codes as RVHC files and rank by Hamming
//! distance. The real-valued variants store embeddings as RVF1 files with
//! a `1 x 1 x dim` sample shape and rank by cosine or Euclidean distance.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, Precision, RunConfig};
use crate::data::{read_idx, read_rvf, write_rvf, LabeledDataset, Split, RVF_MAGIC};
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalReport};
use crate::real::Real;
use crate::retrieval::{
    binarize_rows, rank_all, rank_vectors, CodeDatabase, CodeRecord, Query, RetrievalResult, ScanStats, VectorDatabase,
    VectorMetric, CODE_MAGIC,
};
use crate::rvssdh::{Metric, Model};
use crate::train::{self, embed_dataset, EpochLog};

pub const LOG_HEADER: &str = "epoch\tobjective\tE1\tE2\tval_top1";

/// The loaded dataset and its seeded split.
pub struct Prepared {
    pub data: LabeledDataset,
    /// Image input (IDX) rather than precomputed feature maps.
    pub images: bool,
    pub split: Split,
    pub train: LabeledDataset,
    pub database: LabeledDataset,
    /// Ids of the database samples: their indices in `data`.
    pub database_ids: Vec<u64>,
}

impl Prepared {
    pub fn queries(&self) -> LabeledDataset {
        self.database.subset(&self.split.queries)
    }

    pub fn query_ids(&self) -> Vec<u64> {
        self.split.queries.iter().map(|&p| self.database_ids[p]).collect()
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset, bool)> {
    match cfg.data_source()? {
        DataSource::Idx { images, labels } => Ok((read_idx(&images, &labels)?, true)),
        DataSource::Features(path) => Ok((read_rvf(&path)?, false)),
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (data, images) = load_data(cfg)?;
    let split = crate::data::split_and_sample(data.len(), &cfg.split_spec())?;
    let train = data.subset(&split.train);
    let database = data.subset(&split.database);
    let database_ids = split.database.iter().map(|&i| i as u64).collect();
    Ok(Prepared { data, images, split, train, database, database_ids })
}

/// Codes or real-valued embeddings of a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub enum Embeddings {
    Codes(CodeDatabase),
    Vectors(VectorDatabase),
}

impl Embeddings {
    pub fn len(&self) -> usize {
        match self {
            Embeddings::Codes(c) => c.len(),
            Embeddings::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the entries at the given positions.
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        Ok(match self {
            Embeddings::Codes(c) => Embeddings::Codes(CodeDatabase::from_records(
                c.bits(),
                positions.iter().map(|&p| c.records()[p].clone()).collect(),
            )?),
            Embeddings::Vectors(v) => Embeddings::Vectors(VectorDatabase {
                dim: v.dim,
                ids: positions.iter().map(|&p| v.ids[p]).collect(),
                labels: positions.iter().map(|&p| v.labels[p]).collect(),
                vectors: positions.iter().flat_map(|&p| v.vector(p).to_vec()).collect(),
            }),
        })
    }

    /// Writes RVHC for codes and RVF1 for vectors. Vector files do not
    /// store ids.
    pub fn save(&self, path: &Path, classes: usize) -> Result<()> {
        match self {
            Embeddings::Codes(c) => c.save(path),
            Embeddings::Vectors(v) => {
                let samples = v.vectors.iter().map(|&x| x as f32).collect();
                let ds = LabeledDataset::new([1, 1, v.dim], samples, v.labels.clone(), classes, "embeddings")?;
                write_rvf(path, &ds)
            }
        }
    }

    /// Reads either format, told apart by magic. Vector ids are record
    /// positions.
    pub fn load(path: &Path) -> Result<Self> {
        let mut magic = [0u8; 4];
        File::open(path)?.read_exact(&mut magic).map_err(|_| Error::format("embedding", "file shorter than a magic"))?;
        if &magic == CODE_MAGIC {
            Ok(Embeddings::Codes(CodeDatabase::load(path)?))
        } else if &magic == RVF_MAGIC {
            let ds = read_rvf(path)?;
            Ok(Embeddings::Vectors(VectorDatabase {
                dim: ds.sample_len(),
                ids: (0..ds.len() as u64).collect(),
                labels: ds.labels().to_vec(),
                vectors: ds.samples().iter().map(|&x| x as f64).collect(),
            }))
        } else {
            Err(Error::format("embedding", format!("unknown magic {magic:?}; expected RVHC or RVF1")))
        }
    }
}

/// Codes for hashing variants, otherwise embeddings rounded to `f32` (the
/// precision they are stored in).
pub fn embed<T: Real>(model: &Model<T>, ds: &LabeledDataset, ids: &[u64]) -> Result<Embeddings> {
    if ids.len() != ds.len() {
        return Err(Error::shape(format!("{} ids for {} samples", ids.len(), ds.len())));
    }
    let e = embed_dataset(model, ds)?;
    if model.config.variant.hashes() {
        let codes = binarize_rows(&e)?;
        let records = codes
            .into_iter()
            .zip(ids)
            .zip(ds.labels())
            .map(|((code, &id), &label)| CodeRecord { id, label, code })
            .collect();
        Ok(Embeddings::Codes(CodeDatabase::from_records(model.config.bits, records)?))
    } else {
        Ok(Embeddings::Vectors(VectorDatabase {
            dim: model.config.embedding_len(),
            ids: ids.to_vec(),
            labels: ds.labels().to_vec(),
            vectors: e.data().iter().map(|x| x.as_f64() as f32 as f64).collect(),
        }))
    }
}

/// Gives each query the id of the database record it duplicates (same
/// label, identical vector), so self-matches can be skipped when ids were
/// not stored. Unmatched queries get ids no database record uses.
pub fn match_query_ids(db: &VectorDatabase, queries: &mut VectorDatabase) {
    for q in 0..queries.len() {
        let hit = (0..db.len()).find(|&i| db.labels[i] == queries.labels[q] && db.vector(i) == queries.vector(q));
        queries.ids[q] = match hit {
            Some(i) => db.ids[i],
            None => u64::MAX - q as u64,
        };
    }
}

pub fn vector_metric(metric: Metric) -> Option<VectorMetric> {
    match metric {
        Metric::Hamming => None,
        Metric::Cosine => Some(VectorMetric::Cosine),
        Metric::Euclidean => Some(VectorMetric::Euclidean),
    }
}

/// Ranks the whole database for every query.
pub fn search_all(
    db: &Embeddings,
    queries: &Embeddings,
    metric: VectorMetric,
    include_self: bool,
) -> Result<(Vec<RetrievalResult>, ScanStats)> {
    let mut total = ScanStats::default();
    let mut out = Vec::with_capacity(queries.len());
    match (db, queries) {
        (Embeddings::Codes(d), Embeddings::Codes(q)) => {
            if d.bits() != q.bits() {
                return Err(Error::invalid(format!("database codes have {} bits, queries {}", d.bits(), q.bits())));
            }
            for r in q.records() {
                let (res, s) = rank_all(Query { id: r.id, label: r.label, code: &r.code }, d, include_self)?;
                total.codes_scanned += s.codes_scanned;
                total.word_ops += s.word_ops;
                out.push(res);
            }
        }
        (Embeddings::Vectors(d), Embeddings::Vectors(q)) => {
            for i in 0..q.len() {
                out.push(rank_vectors(q.ids[i], q.labels[i], q.vector(i), d, metric, include_self)?);
                total.codes_scanned += d.len() as u64;
            }
        }
        _ => return Err(Error::invalid("database and queries hold different kinds of embeddings")),
    }
    Ok((out, total))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes `pr_curve.tsv` and `map.tsv` into `dir`.
pub fn write_retrieval(dir: &Path, report: &RetrievalReport) -> Result<()> {
    let mut w = create(&dir.join("pr_curve.tsv"))?;
    eval::write_pr_curve_tsv(&mut w, &report.curve)?;
    w.flush()?;
    let mut w = create(&dir.join("map.tsv"))?;
    eval::write_map_tsv(&mut w, report)?;
    w.flush()?;
    Ok(())
}

/// What a training run leaves behind.
pub struct TrainArtifacts<T> {
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    pub checkpoint: PathBuf,
}

/// Trains on the training split, validating on the database split, and
/// writes `config.txt`, `train_log.tsv` and `model.rvck` into the output
/// directory.
pub fn train_run<T: Real>(
    cfg: &RunConfig,
    prep: &Prepared,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainArtifacts<T>> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    let echo = cfg.echo();
    fs::write(out.join("config.txt"), &echo)?;
    let model_cfg = cfg.model_config(prep.data.shape(), prep.data.classes(), prep.images)?;
    let mut log_file = create(&out.join("train_log.tsv"))?;
    writeln!(log_file, "{LOG_HEADER}")?;
    let mut write_err = None;
    let outcome = train::train::<T>(
        model_cfg,
        &prep.train,
        Some(&prep.database),
        cfg.train.clone(),
        cfg.loss.clone(),
        |row| {
            if let Err(e) = row.write_tsv(&mut log_file).and_then(|_| Ok(log_file.flush()?)) {
                write_err.get_or_insert(e);
            }
            on_epoch(row);
        },
    )?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let checkpoint = out.join("model.rvck");
    outcome.trainer.checkpoint(&echo).save(&checkpoint)?;
    Ok(TrainArtifacts { model: outcome.trainer.model, log: outcome.log, checkpoint })
}

/// Headline numbers of a complete run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub variant: String,
    pub map: f64,
    pub excluded_queries: usize,
    pub top1_train: f64,
    pub top1_validation: f64,
    /// Mean `|h - 0.5|` of the continuous database codes.
    pub saturation: Option<f64>,
    /// mAP when ranking by cosine distance between centered continuous
    /// codes `h - 0.5` instead of Hamming distance between binary codes.
    pub continuous_map: Option<f64>,
    pub epochs: usize,
    pub steps_per_epoch: u64,
    pub scan: ScanStats,
}

impl RunSummary {
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        writeln!(w, "key\tvalue")?;
        writeln!(w, "variant\t{}", self.variant)?;
        writeln!(w, "mAP\t{}", self.map)?;
        writeln!(w, "excluded_queries\t{}", self.excluded_queries)?;
        writeln!(w, "top1_train\t{}", self.top1_train)?;
        writeln!(w, "top1_validation\t{}", self.top1_validation)?;
        writeln!(w, "saturation\t{}", opt(self.saturation))?;
        writeln!(w, "continuous_mAP\t{}", opt(self.continuous_map))?;
        writeln!(w, "epochs\t{}", self.epochs)?;
        writeln!(w, "steps_per_epoch\t{}", self.steps_per_epoch)?;
        writeln!(w, "codes_scanned\t{}", self.scan.codes_scanned)?;
        writeln!(w, "word_ops\t{}", self.scan.word_ops)?;
        Ok(())
    }
}

/// Continuous codes centered at 0.5, for the binarization-loss comparison.
fn centered_codes<T: Real>(model: &Model<T>, ds: &LabeledDataset, ids: &[u64]) -> Result<VectorDatabase> {
    let e = embed_dataset(model, ds)?;
    Ok(VectorDatabase {
        dim: model.config.embedding_len(),
        ids: ids.to_vec(),
        labels: ds.labels().to_vec(),
        vectors: e.data().iter().map(|x| x.as_f64() - 0.5).collect(),
    })
}

fn run_with<T: Real>(cfg: &RunConfig, prep: &Prepared, on_epoch: impl FnMut(&EpochLog)) -> Result<RunSummary> {
    let out = cfg.out_dir.clone();
    let art = train_run::<T>(cfg, prep, on_epoch)?;
    let model = &art.model;
    let variant = model.config.variant;

    let db = embed(model, &prep.database, &prep.database_ids)?;
    let queries = db.subset(&prep.split.queries)?;
    let ext = if variant.hashes() { "rvhc" } else { "rvf" };
    db.save(&out.join(format!("db.{ext}")), model.config.classes)?;
    queries.save(&out.join(format!("queries.{ext}")), model.config.classes)?;

    let metric = vector_metric(variant.metric()).unwrap_or(VectorMetric::Cosine);
    let (results, scan) = search_all(&db, &queries, metric, cfg.include_self)?;
    let report = eval::evaluate(&results)?;
    write_retrieval(&out, &report)?;

    let (saturation, continuous_map) = if variant.hashes() {
        let cont = centered_codes(model, &prep.database, &prep.database_ids)?;
        let sat = cont.vectors.iter().map(|v| v.abs()).sum::<f64>() / cont.vectors.len().max(1) as f64;
        let cdb = Embeddings::Vectors(cont);
        let cq = cdb.subset(&prep.split.queries)?;
        let (res, _) = search_all(&cdb, &cq, VectorMetric::Cosine, cfg.include_self)?;
        (Some(sat), Some(eval::evaluate(&res)?.map))
    } else {
        (None, None)
    };

    let top1_train = train::top1_error(model, &prep.train)?;
    let top1_validation = train::top1_error(model, &prep.database)?;
    let mut w = create(&out.join("top1.tsv"))?;
    eval::write_top1_tsv(
        &mut w,
        &[("train", prep.train.len(), top1_train), ("validation", prep.database.len(), top1_validation)],
    )?;
    w.flush()?;

    let summary = RunSummary {
        variant: variant.name().to_string(),
        map: report.map,
        excluded_queries: report.excluded.len(),
        top1_train,
        top1_validation,
        saturation,
        continuous_map,
        epochs: art.log.len(),
        steps_per_epoch: art.log.first().map_or(0, |l| l.steps),
        scan,
    };
    let mut w = create(&out.join("summary.tsv"))?;
    summary.write_tsv(&mut w)?;
    w.flush()?;
    Ok(summary)
}

/// The full experiment: split, train, embed the database, query it, and
/// write every artifact into `cfg.out_dir`.
pub fn run(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<RunSummary> {
    let prep = prepare(cfg)?;
    match cfg.precision {
        Precision::F32 => run_with::<f32>(cfg, &prep, on_epoch),
        Precision::F64 => run_with::<f64>(cfg, &prep, on_epoch),
    }
}

/// Loads a checkpoint as a model in the configured precision.
pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let ck = Checkpoint::load(path, None)?;
    Ok(Model { config: ck.model, params: ck.params.cast() })
}
