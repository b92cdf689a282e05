//! Binarization, bit-packed hash codes and exhaustive ranking.
//!
//! A code of `L` bits is stored in `ceil(L/64)` words; bit `j` lives in
//! word `j / 64` at position `j % 64` and unused high bits are zero.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CODE_MAGIC: &[u8; 4] = b"RVHC";
pub const CODE_VERSION: u32 = 1;

/// Number of 64-bit words holding `bits` bits.
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn padding_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => 0,
        r => !0u64 << r,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HashCode {
    bits: usize,
    words: Vec<u64>,
}

impl HashCode {
    /// Wraps packed words, rejecting a wrong word count or set padding bits.
    pub fn new(bits: usize, words: Vec<u64>) -> Result<Self> {
        if bits == 0 {
            return Err(Error::invalid("hash codes need at least one bit"));
        }
        if words.len() != words_for(bits) {
            return Err(Error::invalid(format!(
                "{bits}-bit code needs {} words, got {}",
                words_for(bits),
                words.len()
            )));
        }
        if words.last().unwrap() & padding_mask(bits) != 0 {
            return Err(Error::invalid(format!("padding bits above bit {bits} are set")));
        }
        Ok(HashCode { bits, words })
    }

    pub fn zeros(bits: usize) -> Self {
        HashCode { bits, words: vec![0; words_for(bits)] }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut c = HashCode::zeros(bits.len());
        for (j, &b) in bits.iter().enumerate() {
            if b {
                c.words[j / 64] |= 1 << (j % 64);
            }
        }
        c
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, j: usize) -> bool {
        assert!(j < self.bits, "bit {j} out of range for a {}-bit code", self.bits);
        self.words[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.bits).map(|j| self.bit(j)).collect()
    }

    /// Bitwise complement within the `L` valid bits.
    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        *words.last_mut().unwrap() &= !padding_mask(self.bits);
        HashCode { bits: self.bits, words }
    }
}

/// Bit `j` is 1 iff `h_hat[j] >= 0.5`.
pub fn binarize<T: Real>(h_hat: &[T]) -> HashCode {
    let half = T::from_f64_lossy(0.5);
    let mut c = HashCode::zeros(h_hat.len());
    for (j, &v) in h_hat.iter().enumerate() {
        if v >= half {
            c.words[j / 64] |= 1 << (j % 64);
        }
    }
    c
}

/// Binarizes every row of a `B x L` batch.
pub fn binarize_rows<T: Real>(h_hat: &Tensor<T>) -> Result<Vec<HashCode>> {
    if h_hat.ndim() != 2 {
        return Err(Error::shape(format!("expected a B x L batch, got {:?}", h_hat.shape())));
    }
    Ok((0..h_hat.shape()[0]).map(|i| binarize(h_hat.row(i))).collect())
}

/// Number of differing bits.
pub fn hamming(a: &HashCode, b: &HashCode) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::invalid(format!("cannot compare {}-bit and {}-bit codes", a.bits, b.bits)));
    }
    Ok(hamming_words(&a.words, &b.words))
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeRecord {
    pub id: u64,
    pub label: u32,
    pub code: HashCode,
}

/// Codes of uniform length with unique ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeDatabase {
    bits: usize,
    records: Vec<CodeRecord>,
    ids: HashSet<u64>,
}

impl CodeDatabase {
    pub fn new(bits: usize) -> Self {
        CodeDatabase { bits, records: Vec::new(), ids: HashSet::new() }
    }

    pub fn from_records(bits: usize, records: Vec<CodeRecord>) -> Result<Self> {
        let mut db = CodeDatabase::new(bits);
        for r in records {
            db.push(r)?;
        }
        Ok(db)
    }

    pub fn push(&mut self, record: CodeRecord) -> Result<()> {
        if record.code.len() != self.bits {
            return Err(Error::invalid(format!(
                "record {} has a {}-bit code, database holds {}-bit codes",
                record.id,
                record.code.len(),
                self.bits
            )));
        }
        if !self.ids.insert(record.id) {
            return Err(Error::invalid(format!("duplicate id {}", record.id)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CodeRecord] {
        &self.records
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CODE_MAGIC)?;
        w.write_u32::<LittleEndian>(CODE_VERSION)?;
        w.write_u32::<LittleEndian>(self.bits as u32)?;
        w.write_u64::<LittleEndian>(self.records.len() as u64)?;
        for r in &self.records {
            w.write_u64::<LittleEndian>(r.id)?;
            w.write_u32::<LittleEndian>(r.label)?;
            for &word in r.code.words() {
                w.write_u64::<LittleEndian>(word)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |d: String| Error::format("RVHC", d);
        let eof = |e: std::io::Error, what: &str| fmt(format!("truncated while reading {what}: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| eof(e, "magic"))?;
        if &magic != CODE_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| eof(e, "version"))?;
        if version != CODE_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let bits = r.read_u32::<LittleEndian>().map_err(|e| eof(e, "code length"))? as usize;
        if bits == 0 {
            return Err(fmt("code length is zero".into()));
        }
        let count = r.read_u64::<LittleEndian>().map_err(|e| eof(e, "record count"))?;
        let nwords = words_for(bits);
        let mut db = CodeDatabase::new(bits);
        for i in 0..count {
            let id = r.read_u64::<LittleEndian>().map_err(|e| eof(e, &format!("record {i}")))?;
            let label = r.read_u32::<LittleEndian>().map_err(|e| eof(e, &format!("record {i}")))?;
            let mut words = Vec::with_capacity(nwords.min(1 << 10));
            for _ in 0..nwords {
                words.push(r.read_u64::<LittleEndian>().map_err(|e| eof(e, &format!("record {i}")))?);
            }
            let code = HashCode::new(bits, words).map_err(|e| fmt(format!("record {i}: {e}")))?;
            db.push(CodeRecord { id, label, code }).map_err(|e| fmt(format!("record {i}: {e}")))?;
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(fmt(format!("trailing bytes after {count} records")));
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        CodeDatabase::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub distance: f64,
    pub relevant: bool,
}

/// One query's ranked database, nearest first, ties by ascending id.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: u64,
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn relevant_count(&self) -> usize {
        self.hits.iter().filter(|h| h.relevant).count()
    }

    fn sorted(query_id: u64, mut hits: Vec<Hit>) -> Self {
        hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
        RetrievalResult { query_id, hits }
    }
}

/// Work done by a scan, for cost accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub codes_scanned: u64,
    /// XOR + popcount operations, one per word per code.
    pub word_ops: u64,
}

/// A query as seen by the ranker.
#[derive(Clone, Copy, Debug)]
pub struct Query<'a> {
    pub id: u64,
    pub label: u32,
    pub code: &'a HashCode,
}

/// Ranks every database code by Hamming distance to the query. Relevance
/// is label equality. With `include_self` unset, the record whose id equals
/// the query id is skipped.
pub fn rank_all(query: Query<'_>, db: &CodeDatabase, include_self: bool) -> Result<(RetrievalResult, ScanStats)> {
    if query.code.len() != db.bits() {
        return Err(Error::invalid(format!(
            "query has {} bits, database has {}",
            query.code.len(),
            db.bits()
        )));
    }
    let mut stats = ScanStats::default();
    let q = query.code.words();
    let mut hits = Vec::with_capacity(db.len());
    for r in db.records() {
        if !include_self && r.id == query.id {
            continue;
        }
        stats.codes_scanned += 1;
        stats.word_ops += q.len() as u64;
        let d = hamming_words(q, r.code.words());
        hits.push(Hit { id: r.id, distance: d as f64, relevant: r.label == query.label });
    }
    Ok((RetrievalResult::sorted(query.id, hits), stats))
}

/// Distance for real-valued embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VectorMetric {
    /// `1 - cos(a, b)`; a zero vector has cosine 0 to everything.
    Cosine,
    Euclidean,
}

pub fn vector_distance(a: &[f64], b: &[f64], metric: VectorMetric) -> f64 {
    match metric {
        VectorMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        VectorMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// Real-valued embeddings with ids and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorDatabase {
    pub dim: usize,
    pub ids: Vec<u64>,
    pub labels: Vec<u32>,
    pub vectors: Vec<f64>,
}

impl VectorDatabase {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// Real-valued counterpart of [`rank_all`].
pub fn rank_vectors(
    query_id: u64,
    query_label: u32,
    query: &[f64],
    db: &VectorDatabase,
    metric: VectorMetric,
    include_self: bool,
) -> Result<RetrievalResult> {
    if query.len() != db.dim {
        return Err(Error::invalid(format!("query has dimension {}, database has {}", query.len(), db.dim)));
    }
    let hits = (0..db.len())
        .filter(|&i| include_self || db.ids[i] != query_id)
        .map(|i| Hit {
            id: db.ids[i],
            distance: vector_distance(query, db.vector(i), metric),
            relevant: db.labels[i] == query_label,
        })
        .collect();
    Ok(RetrievalResult::sorted(query_id, hits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> HashCode {
        HashCode::from_bits(&s.chars().map(|c| c == '1').collect::<Vec<_>>())
    }

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize(&[0.2, 0.5, 0.9]).to_bits(), vec![false, true, true]);
        assert!(binarize(&[0.5f64; 70]).to_bits().iter().all(|&b| b));
    }

    #[test]
    fn binarize_follows_logit_sign() {
        let logits = [-40.0, 12.0, -3.0, 25.0];
        let h: Vec<f64> = logits.iter().map(|&z| crate::tensor::sigmoid(z)).collect();
        let bits = binarize(&h).to_bits();
        assert_eq!(bits, logits.iter().map(|&z| z > 0.0).collect::<Vec<_>>());
    }

    #[test]
    fn hamming_cases() {
        let a = code("1010");
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        assert_eq!(hamming(&a, &a.complement()).unwrap(), 4);
        assert_eq!(hamming(&a, &code("0110")).unwrap(), 2);
        let long = HashCode::from_bits(&[true; 100]);
        assert_eq!(hamming(&long, &long.complement()).unwrap(), 100);
        assert!(hamming(&a, &long).is_err());
    }

    #[test]
    fn padding_is_checked() {
        assert!(HashCode::new(4, vec![0b1_0000]).is_err());
        assert!(HashCode::new(64, vec![!0]).is_ok());
        assert!(HashCode::new(65, vec![0]).is_err());
    }

    #[test]
    fn rank_order() {
        let q = code("00000000");
        let db = CodeDatabase::from_records(
            8,
            vec![
                CodeRecord { id: 7, label: 1, code: code("11100000") },
                CodeRecord { id: 3, label: 0, code: code("00000001") },
            ],
        )
        .unwrap();
        let (r, stats) = rank_all(Query { id: 99, label: 0, code: &q }, &db, false).unwrap();
        assert_eq!(r.hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![3, 7]);
        assert_eq!(r.hits.iter().map(|h| h.relevant).collect::<Vec<_>>(), vec![true, false]);
        assert_eq!(stats, ScanStats { codes_scanned: 2, word_ops: 2 });
    }

    #[test]
    fn self_match_exclusion() {
        let c = code("0101");
        let db = CodeDatabase::from_records(4, vec![CodeRecord { id: 1, label: 2, code: c.clone() }]).unwrap();
        let q = Query { id: 1, label: 2, code: &c };
        assert!(rank_all(q, &db, false).unwrap().0.hits.is_empty());
        let (r, _) = rank_all(q, &db, true).unwrap();
        assert_eq!(r.hits, vec![Hit { id: 1, distance: 0.0, relevant: true }]);
    }

    #[test]
    fn empty_database() {
        let q = code("1");
        let (r, _) = rank_all(Query { id: 0, label: 0, code: &q }, &CodeDatabase::new(1), false).unwrap();
        assert!(r.hits.is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut db = CodeDatabase::new(2);
        db.push(CodeRecord { id: 1, label: 0, code: code("01") }).unwrap();
        assert!(db.push(CodeRecord { id: 1, label: 0, code: code("10") }).is_err());
    }

    #[test]
    fn rvhc_round_trip() {
        let db = CodeDatabase::from_records(
            70,
            vec![CodeRecord { id: 5, label: 3, code: HashCode::from_bits(&[true; 70]) }],
        )
        .unwrap();
        let mut buf = Vec::new();
        db.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + (8 + 4 + 16));
        assert_eq!(CodeDatabase::read_from(&mut buf.as_slice()).unwrap(), db);
    }

    #[test]
    fn cosine_and_euclidean() {
        assert!((vector_distance(&[1.0, 0.0], &[0.0, 2.0], VectorMetric::Cosine) - 1.0).abs() < 1e-15);
        assert!(vector_distance(&[1.0, 1.0], &[3.0, 3.0], VectorMetric::Cosine).abs() < 1e-15);
        assert_eq!(vector_distance(&[0.0, 0.0], &[3.0, 4.0], VectorMetric::Euclidean), 5.0);
    }
}
