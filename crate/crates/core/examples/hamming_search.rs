//! Packs random codes into a database, ranks it for a few queries and
//! scores the rankings.

use rvssdh::eval;
use rvssdh::retrieval::{rank_all, CodeDatabase, CodeRecord, HashCode, Query};
use rvssdh::Rng;

const BITS: usize = 48;

fn noisy(proto: &[bool], flips: usize, rng: &mut Rng) -> HashCode {
    let mut bits = proto.to_vec();
    for _ in 0..flips {
        let j = rng.below(BITS);
        bits[j] = !bits[j];
    }
    HashCode::from_bits(&bits)
}

fn main() -> rvssdh::Result<()> {
    let mut rng = Rng::seed_from_u64(3);
    // Five classes, each a prototype code; members are noisy copies.
    let protos: Vec<Vec<bool>> = (0..5).map(|_| (0..BITS).map(|_| rng.below(2) == 1).collect()).collect();
    let mut db = CodeDatabase::new(BITS);
    for id in 0..500u64 {
        let label = (id % 5) as u32;
        db.push(CodeRecord { id, label, code: noisy(&protos[label as usize], 8, &mut rng) })?;
    }

    let mut results = Vec::new();
    for qid in 0..20u64 {
        let rec = &db.records()[qid as usize];
        let (r, stats) = rank_all(Query { id: rec.id, label: rec.label, code: &rec.code }, &db, false)?;
        if qid == 0 {
            let top: Vec<_> = r.hits.iter().take(5).map(|h| (h.id, h.distance as u32, h.relevant)).collect();
            println!("query 0 top 5 (id, distance, relevant): {top:?}");
            println!("scanned {} codes with {} word ops", stats.codes_scanned, stats.word_ops);
        }
        results.push(r);
    }
    let report = eval::evaluate(&results)?;
    println!("mAP over {} queries: {:.4}", report.per_query.len(), report.map);
    let (p, r) = eval::precision_recall_at_k(&results[0], 50)?;
    println!("query 0: precision@50 {p:.3}, recall@50 {r:.3}");
    Ok(())
}
