//! Retrieval and classification metrics.
//!
//! AP is the mean of precision@r over the ranks `r` holding relevant items.
//! The precision-recall curve is reported on a 101-point recall grid: for
//! each query the interpolated precision at recall `r` is the best
//! precision reached at any cutoff with recall `>= r`, and the curve is the
//! per-point mean over queries. The curve is for reporting only.

use std::io::Write;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::retrieval::RetrievalResult;
use crate::tensor::Tensor;

pub const CURVE_POINTS: usize = 101;

/// `(precision, recall)` over the top `k` hits.
pub fn precision_recall_at_k(result: &RetrievalResult, k: usize) -> Result<(f64, f64)> {
    let n = result.hits.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cutoff {k} outside 1..={n}")));
    }
    let total = result.relevant_count();
    if total == 0 {
        return Err(Error::invalid(format!("query {} has no relevant items; recall is undefined", result.query_id)));
    }
    let hit = result.hits[..k].iter().filter(|h| h.relevant).count();
    Ok((hit as f64 / k as f64, hit as f64 / total as f64))
}

/// Mean precision at the ranks of relevant items.
pub fn average_precision(result: &RetrievalResult) -> Result<f64> {
    average_precision_flags(result.hits.iter().map(|h| h.relevant))
        .ok_or_else(|| Error::invalid(format!("query {} has no relevant items", result.query_id)))
}

/// AP of a bare relevance sequence; `None` when nothing is relevant.
pub fn average_precision_flags(flags: impl IntoIterator<Item = bool>) -> Option<f64> {
    let (mut seen, mut sum) = (0usize, 0.0);
    for (i, rel) in flags.into_iter().enumerate() {
        if rel {
            seen += 1;
            sum += seen as f64 / (i + 1) as f64;
        }
    }
    (seen > 0).then(|| sum / seen as f64)
}

/// Arithmetic mean of per-query AP.
pub fn mean_ap(results: &[RetrievalResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::invalid("mAP over an empty query set"));
    }
    let mut sum = 0.0;
    for r in results {
        sum += average_precision(r)?;
    }
    Ok(sum / results.len() as f64)
}

/// Interpolated precision of one query on the recall grid.
fn query_curve(result: &RetrievalResult) -> Option<[f64; CURVE_POINTS]> {
    let total = result.relevant_count();
    if total == 0 {
        return None;
    }
    // best[j]: max precision among cutoffs whose recall is >= j/100.
    let mut best = [0.0f64; CURVE_POINTS];
    let mut hit = 0usize;
    for (i, h) in result.hits.iter().enumerate() {
        if !h.relevant {
            continue;
        }
        hit += 1;
        let precision = hit as f64 / (i + 1) as f64;
        let top = (hit * (CURVE_POINTS - 1)) / total;
        for b in best.iter_mut().take(top + 1) {
            *b = b.max(precision);
        }
    }
    Some(best)
}

/// Mean interpolated P-R curve as `(recall, precision)` pairs.
pub fn pr_curve(results: &[RetrievalResult]) -> Result<Vec<(f64, f64)>> {
    let curves: Vec<_> = results.iter().filter_map(query_curve).collect();
    if curves.is_empty() {
        return Err(Error::invalid("no query with relevant items"));
    }
    Ok((0..CURVE_POINTS)
        .map(|j| {
            let p = curves.iter().map(|c| c[j]).sum::<f64>() / curves.len() as f64;
            (j as f64 / (CURVE_POINTS - 1) as f64, p)
        })
        .collect())
}

/// Per-query AP with zero-relevant queries set aside.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub per_query: Vec<(u64, f64)>,
    pub excluded: Vec<u64>,
    pub map: f64,
    pub curve: Vec<(f64, f64)>,
}

pub fn evaluate(results: &[RetrievalResult]) -> Result<RetrievalReport> {
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    for r in results {
        match average_precision_flags(r.hits.iter().map(|h| h.relevant)) {
            Some(ap) => {
                per_query.push((r.query_id, ap));
                kept.push(r.clone());
            }
            None => excluded.push(r.query_id),
        }
    }
    if per_query.is_empty() {
        return Err(Error::invalid(format!(
            "mAP is undefined: none of the {} queries has a relevant database item",
            results.len()
        )));
    }
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    let curve = pr_curve(&kept)?;
    Ok(RetrievalReport { per_query, excluded, map, curve })
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows<T: Real>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    if scores.ndim() != 2 || scores.shape()[1] == 0 {
        return Err(Error::shape(format!("expected a B x M score matrix, got {:?}", scores.shape())));
    }
    Ok((0..scores.shape()[0])
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose argmax differs from the label.
pub fn top1_error<T: Real>(scores: &Tensor<T>, labels: &[u32]) -> Result<f64> {
    let pred = argmax_rows(scores)?;
    if pred.len() != labels.len() {
        return Err(Error::shape(format!("{} score rows for {} labels", pred.len(), labels.len())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let wrong = pred.iter().zip(labels).filter(|(&p, &l)| p != l as usize).count();
    Ok(wrong as f64 / pred.len() as f64)
}

pub fn write_pr_curve_tsv<W: Write>(w: &mut W, curve: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "recall\tprecision")?;
    for (r, p) in curve {
        writeln!(w, "{r}\t{p}")?;
    }
    Ok(())
}

/// One line per query (`excluded` for zero-relevant ones), then the mAP.
pub fn write_map_tsv<W: Write>(w: &mut W, report: &RetrievalReport) -> Result<()> {
    writeln!(w, "query\tap")?;
    for (q, ap) in &report.per_query {
        writeln!(w, "{q}\t{ap}")?;
    }
    for q in &report.excluded {
        writeln!(w, "{q}\texcluded")?;
    }
    writeln!(w, "mAP\t{}", report.map)?;
    Ok(())
}

pub fn write_top1_tsv<W: Write>(w: &mut W, rows: &[(&str, usize, f64)]) -> Result<()> {
    writeln!(w, "split\tsamples\ttop1_error")?;
    for (name, n, e) in rows {
        writeln!(w, "{name}\t{n}\t{e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Hit;

    fn result(flags: &[u8]) -> RetrievalResult {
        RetrievalResult {
            query_id: 0,
            hits: flags
                .iter()
                .enumerate()
                .map(|(i, &f)| Hit { id: i as u64, distance: i as f64, relevant: f == 1 })
                .collect(),
        }
    }

    #[test]
    fn precision_recall_cases() {
        let mut flags = vec![1, 0, 1, 0, 1, 0, 1, 0, 1, 0];
        flags.extend(std::iter::repeat_n(1, 15));
        let r = result(&flags);
        assert_eq!(precision_recall_at_k(&r, 10).unwrap(), (0.5, 0.25));
        assert_eq!(precision_recall_at_k(&r, 25).unwrap().1, 1.0);
        assert_eq!(precision_recall_at_k(&result(&[0, 0, 1]), 2).unwrap().0, 0.0);
        assert!(precision_recall_at_k(&result(&[0, 0]), 1).is_err());
        assert!(precision_recall_at_k(&r, 0).is_err());
    }

    #[test]
    fn ap_cases() {
        assert!((average_precision(&result(&[1, 0, 1])).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&result(&[1, 1, 1])).unwrap(), 1.0);
        assert_eq!(average_precision(&result(&[0, 0, 0, 1, 0])).unwrap(), 0.25);
        assert!(average_precision(&result(&[0, 0])).is_err());
    }

    #[test]
    fn map_cases() {
        let a = result(&[1, 0, 1]);
        assert_eq!(mean_ap(&[a.clone(), a.clone()]).unwrap(), average_precision(&a).unwrap());
        assert_eq!(mean_ap(&[result(&[0, 1]), result(&[1])]).unwrap(), 0.75);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn curve_shape() {
        let c = pr_curve(&[result(&[1, 0, 1, 0])]).unwrap();
        assert_eq!(c.len(), CURVE_POINTS);
        assert_eq!(c[0], (0.0, 1.0));
        assert_eq!(c[50].1, 1.0);
        assert!((c[51].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((c[100].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_excludes_zero_relevant() {
        let mut none = result(&[0, 0]);
        none.query_id = 9;
        let rep = evaluate(&[result(&[1, 0]), none.clone()]).unwrap();
        assert_eq!(rep.excluded, vec![9]);
        assert_eq!(rep.map, 1.0);
        assert!(evaluate(&[none]).is_err());
    }

    #[test]
    fn top1_cases() {
        let onehot = Tensor::<f64>::new(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(top1_error(&onehot, &[1, 0]).unwrap(), 0.0);
        let scores = Tensor::<f64>::from_fn(&[10, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let mut labels = vec![0u32; 10];
        labels[3] = 1;
        assert!((top1_error(&scores, &labels).unwrap() - 0.1).abs() < 1e-15);
        let tie = Tensor::<f64>::new(&[1, 3], vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(argmax_rows(&tie).unwrap(), vec![0]);
    }
}
