//! Scores the committed five-item code fixture; the expected mAP is 34/45.

use std::path::Path;

use rvssdh::eval;
use rvssdh::pipeline::{self, Embeddings};
use rvssdh::retrieval::VectorMetric;

fn main() -> rvssdh::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let db = Embeddings::load(&dir.join("db.rvhc"))?;
    let queries = Embeddings::load(&dir.join("queries.rvhc"))?;
    let (results, _) = pipeline::search_all(&db, &queries, VectorMetric::Cosine, false)?;
    for h in &results[0].hits {
        println!("id {}\tdistance {}\trelevant {}", h.id, h.distance, h.relevant);
    }
    let report = eval::evaluate(&results)?;
    println!("mAP {:.6} (34/45 = {:.6})", report.map, 34.0 / 45.0);
    Ok(())
}
