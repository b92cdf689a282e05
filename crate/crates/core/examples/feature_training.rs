//! Trains on precomputed feature maps read from an RVF1 file instead of
//! images, the path used for features exported from another network.

use rvssdh::config::RunConfig;
use rvssdh::data::{write_rvf, LabeledDataset};
use rvssdh::pipeline;
use rvssdh::Rng;

fn main() -> rvssdh::Result<()> {
    let dir = std::env::temp_dir().join("rvssdh-feature-example");
    std::fs::create_dir_all(&dir)?;

    // 600 feature maps of shape 3 x 3 x 16 in four classes.
    let mut rng = Rng::seed_from_u64(5);
    let centers: Vec<Vec<f32>> = (0..4).map(|_| (0..16).map(|_| rng.normal() as f32).collect()).collect();
    let (mut samples, mut labels) = (Vec::new(), Vec::new());
    for i in 0..600 {
        let c = i % 4;
        for _ in 0..9 {
            samples.extend(centers[c].iter().map(|&v| v + 0.7 * rng.normal() as f32));
        }
        labels.push(c as u32);
    }
    let ds = LabeledDataset::new([3, 3, 16], samples, labels, 4, "synthetic")?;
    let features = dir.join("features.rvf");
    write_rvf(&features, &ds)?;

    let text = format!(
        "features = {}\nout_dir = {}\nvariant = random_vlad\nclusters = 4\nbits = 16\n\
         epochs = 10\nbatch_size = 32\nqueries = 50\nseed = 1\n",
        features.display(),
        dir.join("run").display()
    );
    let cfg = RunConfig::parse(&text)?;
    let summary = pipeline::run(&cfg, |row| println!("epoch {:>2}  objective {:.4}", row.epoch, row.objective))?;
    println!("mAP {:.4}, validation Top-1 error {:.4}", summary.map, summary.top1_validation);
    Ok(())
}
