//! Labeled datasets: MNIST IDX files, RVF1 feature-map files, and seeded
//! train/database/query splits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const RVF_MAGIC: &[u8; 4] = b"RVF1";
pub const RVF_VERSION: u32 = 1;

/// Samples of uniform `H x W x C` shape with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    shape: [usize; 3],
    samples: Vec<f32>,
    labels: Vec<u32>,
    classes: usize,
    /// Free-form note on where the samples came from.
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        shape: [usize; 3],
        samples: Vec<f32>,
        labels: Vec<u32>,
        classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::invalid(format!("sample shape {shape:?} has a zero dimension")));
        }
        if samples.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} values do not hold {} samples of shape {shape:?}",
                samples.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::invalid(format!("sample {i} has label {l}, expected < {classes}")));
        }
        Ok(LabeledDataset { shape, samples, labels, classes, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.samples[i * n..(i + 1) * n]
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// New dataset made of the given samples, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut samples = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
        }
        LabeledDataset {
            shape: self.shape,
            samples,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            provenance: format!("{} (subset of {})", self.provenance, indices.len()),
        }
    }

    /// Samples as a `B x H x W x C` tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let [h, w, c] = self.shape;
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(&[indices.len(), h, w, c], data).expect("batch size matches by construction")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

fn idx_err(detail: impl Into<String>) -> Error {
    Error::format("IDX", detail)
}

fn read_u32_be<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    r.read_u32::<BigEndian>().map_err(|e| idx_err(format!("truncated while reading {what}: {e}")))
}

/// Reads an image/label pair of IDX streams. Pixels are scaled by `1/255`.
pub fn read_idx_from<R1: Read, R2: Read>(images: &mut R1, labels: &mut R2) -> Result<LabeledDataset> {
    let magic = read_u32_be(images, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(format!("image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = read_u32_be(images, "image count")? as usize;
    let rows = read_u32_be(images, "row count")? as usize;
    let cols = read_u32_be(images, "column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(idx_err(format!("image size {rows}x{cols}")));
    }
    let magic = read_u32_be(labels, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(format!("label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let nl = read_u32_be(labels, "label count")? as usize;
    if nl != n {
        return Err(idx_err(format!("{n} images but {nl} labels")));
    }

    let mut label_bytes = Vec::new();
    labels.take(n as u64).read_to_end(&mut label_bytes)?;
    if label_bytes.len() != n {
        return Err(idx_err(format!("label file truncated: {} of {n} labels", label_bytes.len())));
    }
    let per = rows * cols;
    let total = (n as u64).checked_mul(per as u64).ok_or_else(|| idx_err("image dimensions overflow"))?;
    let mut pixels = Vec::new();
    images.take(total).read_to_end(&mut pixels)?;
    if pixels.len() as u64 != total {
        return Err(idx_err(format!("image file truncated: {} of {total} pixel bytes", pixels.len())));
    }
    let labels: Vec<u32> = label_bytes.into_iter().map(u32::from).collect();
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let samples = pixels.into_iter().map(|p| p as f32 / 255.0).collect();
    LabeledDataset::new([rows, cols, 1], samples, labels, classes, "idx")
}

pub fn read_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let mut i = BufReader::new(File::open(images)?);
    let mut l = BufReader::new(File::open(labels)?);
    let mut ds = read_idx_from(&mut i, &mut l)?;
    ds.provenance = format!("idx:{}", images.display());
    Ok(ds)
}

fn rvf_err(detail: impl Into<String>) -> Error {
    Error::format("RVF1", detail)
}

pub fn write_rvf_to<W: Write>(w: &mut W, ds: &LabeledDataset) -> Result<()> {
    let [h, wd, d] = ds.shape;
    w.write_all(RVF_MAGIC)?;
    w.write_u32::<LittleEndian>(RVF_VERSION)?;
    w.write_u64::<LittleEndian>(ds.len() as u64)?;
    for v in [h, wd, d, ds.classes] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    for i in 0..ds.len() {
        w.write_u32::<LittleEndian>(ds.labels[i])?;
        for &v in ds.sample(i) {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_rvf_from<R: Read>(r: &mut R) -> Result<LabeledDataset> {
    let eof = |e: std::io::Error, what: &str| rvf_err(format!("truncated while reading {what}: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| eof(e, "magic"))?;
    if &magic != RVF_MAGIC {
        return Err(rvf_err(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| eof(e, "version"))?;
    if version != RVF_VERSION {
        return Err(rvf_err(format!("unsupported version {version}")));
    }
    let count = r.read_u64::<LittleEndian>().map_err(|e| eof(e, "count"))?;
    let mut dims = [0usize; 4];
    for (slot, name) in dims.iter_mut().zip(["H", "W", "D", "M"]) {
        *slot = r.read_u32::<LittleEndian>().map_err(|e| eof(e, name))? as usize;
    }
    let [h, w, d, m] = dims;
    if h == 0 || w == 0 || d == 0 {
        return Err(rvf_err(format!("feature shape {h}x{w}x{d} has a zero dimension")));
    }
    if m == 0 {
        return Err(rvf_err("class count is zero"));
    }
    let per = [h, w, d]
        .iter()
        .try_fold(1u64, |a, &v| a.checked_mul(v as u64))
        .filter(|&p| p <= u64::MAX / 4)
        .ok_or_else(|| rvf_err(format!("feature shape {h}x{w}x{d} overflows")))?;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    // Grown by the reads, so a corrupt header cannot force a huge allocation.
    let mut buf = Vec::new();
    for i in 0..count {
        let label = r.read_u32::<LittleEndian>().map_err(|e| eof(e, &format!("record {i}")))?;
        if label as usize >= m {
            return Err(rvf_err(format!("record {i} has label {label}, expected < {m}")));
        }
        buf.clear();
        r.by_ref().take(per * 4).read_to_end(&mut buf)?;
        if buf.len() as u64 != per * 4 {
            return Err(rvf_err(format!("truncated while reading record {i}")));
        }
        samples.extend(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
        labels.push(label);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(rvf_err(format!("trailing bytes after {count} records")));
    }
    LabeledDataset::new([h, w, d], samples, labels, m, "rvf")
}

pub fn write_rvf(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_rvf_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_rvf(path: &Path) -> Result<LabeledDataset> {
    let mut ds = read_rvf_from(&mut BufReader::new(File::open(path)?))?;
    ds.provenance = format!("rvf:{}", path.display());
    Ok(ds)
}

/// Where the retrieval database comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatabaseSource {
    Validation,
    /// Only accepted to be rejected: querying the training set measures
    /// memorization.
    Train,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    /// Fraction of the shuffled samples assigned to training; the rest is
    /// the validation set.
    pub train_fraction: f64,
    /// Keep only the first `n` shuffled training samples.
    pub train_limit: Option<usize>,
    /// Keep only the first `n` shuffled validation samples.
    pub database_limit: Option<usize>,
    pub database: DatabaseSource,
    pub queries: usize,
}

/// Indices into the source dataset, plus query positions within the
/// database.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub database: Vec<usize>,
    /// Positions into `database`, sampled without replacement.
    pub queries: Vec<usize>,
}

/// Seeded shuffle, train/validation cut, database = validation, queries
/// drawn from the database.
pub fn split_and_sample(n: usize, spec: &SplitSpec) -> Result<Split> {
    if !(0.0..=1.0).contains(&spec.train_fraction) {
        return Err(Error::Config(format!("train fraction {} outside [0, 1]", spec.train_fraction)));
    }
    if spec.database == DatabaseSource::Train {
        return Err(Error::Config(
            "the database must be the validation split; querying training samples is degenerate".into(),
        ));
    }
    let mut rng = Rng::seed_from_u64(spec.seed);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let n_train = (n as f64 * spec.train_fraction).round() as usize;
    let (train, validation) = perm.split_at(n_train);
    let mut train = train.to_vec();
    let mut database = validation.to_vec();
    if let Some(l) = spec.train_limit {
        train.truncate(l);
    }
    if let Some(l) = spec.database_limit {
        database.truncate(l);
    }
    if database.is_empty() && spec.queries > 0 {
        return Err(Error::Config("validation split is empty; nothing to query".into()));
    }
    if spec.queries > database.len() {
        return Err(Error::Config(format!(
            "{} queries requested from a database of {}",
            spec.queries,
            database.len()
        )));
    }
    let mut pos: Vec<usize> = (0..database.len()).collect();
    // Partial Fisher-Yates: the first `queries` slots are a uniform sample.
    for i in 0..spec.queries {
        let j = i + rng.below(pos.len() - i);
        pos.swap(i, j);
    }
    pos.truncate(spec.queries);
    Ok(Split { train, database, queries: pos })
}
