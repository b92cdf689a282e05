//! The desk-scale MNIST experiment: trains RV-SSDH on 10000 images, hashes
//! a 2000-image database and queries it 200 times.
//!
//! `cargo run --release --example mnist_desk [mnist-dir] [variant]`
//!
//! Fetch the data first with `scripts/fetch_mnist.sh`.

use std::path::{Path, PathBuf};

use rvssdh::config::RunConfig;
use rvssdh::pipeline;

fn main() -> rvssdh::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut args = std::env::args().skip(1);
    let mnist = args.next().map(PathBuf::from).unwrap_or_else(|| root.join("data/mnist"));
    let mut cfg = RunConfig::load(&root.join("configs/mnist_desk.conf"))?;
    cfg.images = Some(mnist.join("train-images-idx3-ubyte"));
    cfg.labels = Some(mnist.join("train-labels-idx1-ubyte"));
    if let Some(v) = args.next() {
        cfg.set("variant", &v).map_err(rvssdh::Error::Config)?;
        cfg.out_dir = root.join("runs/mnist_desk").join(&v);
    } else {
        cfg.out_dir = root.join(&cfg.out_dir);
    }
    let summary = pipeline::run(&cfg, |row| {
        println!("epoch {:>2}  objective {:.4}  val_top1 {:?}", row.epoch, row.objective, row.val_top1)
    })?;
    summary.write_tsv(&mut std::io::stdout().lock())?;
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}
