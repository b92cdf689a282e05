//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when
//! any criterion fails.
//!
//! The MNIST criteria read the IDX training files from `$RVSSDH_MNIST_DIR`,
//! falling back to `<workspace>/data/mnist` (see `scripts/fetch_mnist.sh`).
//! They train eight desk-scale models, so a full pass takes over an hour on
//! one core.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rvssdh::config::{Precision, RunConfig};
use rvssdh::eval::{average_precision_flags, evaluate};
use rvssdh::gradcheck::{self, GradCheckConfig};
use rvssdh::loss::LossConfig;
use rvssdh::pipeline::{self, Embeddings, RunSummary};
use rvssdh::retrieval::{hamming, rank_all, CodeDatabase, CodeRecord, HashCode, Query};
use rvssdh::rvssdh::vlad::{self, VladKind, VladParams};
use rvssdh::rvssdh::{ModelConfig, Variant};
use rvssdh::train::{self, TrainConfig};
use rvssdh::{Rng, Tensor};

type Outcome = Result<String, String>;

struct Report {
    failed: Vec<&'static str>,
}

impl Report {
    fn record(&mut self, name: &'static str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                self.failed.push(name);
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(&GradCheckConfig::default(), None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = report
        .layers
        .iter()
        .map(|l| (l.layer, l.max_rel_error()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let failing: Vec<_> = report.layers.iter().filter(|l| l.max_rel_error() >= report.tolerance).map(|l| l.layer).collect();
    check(
        report.passed() && failing.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} layers x {} seeds, worst {} at {:.2e}, failing {failing:?}, {:.1}s (limit 120s)",
            report.layers.len(),
            report.seeds,
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn hard_assignment_limit() -> Outcome {
    let mut rng = Rng::seed_from_u64(100);
    let (mut worst, mut cases) = (0.0f64, 0);
    while cases < 50 {
        let (k, d, n) = (2 + cases % 7, 2 + cases % 5, 40);
        let anchors = Tensor::from_fn(&[k, d], |_| 3.0 * rng.normal());
        if (0..k).any(|a| (0..a).any(|b| sq_dist(anchors.row(a), anchors.row(b)) < 4.0)) {
            continue;
        }
        let x = Tensor::from_fn(&[n, d], |i| anchors.row((i / d) % k)[i % d] + 0.1 * rng.normal());
        let p = VladParams::from_anchors(anchors.clone(), 50.0, VladKind::Random).map_err(|e| e.to_string())?;
        let (y, _) = vlad::forward(&p, &x.clone().reshape(&[1, n, 1, d]).unwrap()).map_err(|e| e.to_string())?;
        let mut want = vec![0.0; k * d];
        for i in 0..n {
            let xi = x.row(i);
            let q = (0..k).min_by(|&a, &b| sq_dist(xi, anchors.row(a)).total_cmp(&sq_dist(xi, anchors.row(b)))).unwrap();
            for j in 0..d {
                want[q * d + j] += xi[j] - anchors.row(q)[j];
            }
        }
        let scale = want.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(sq_dist(y.data(), &want).sqrt() / scale);
        cases += 1;
    }
    check(worst <= 1e-6, format!("{cases} instances, worst relative error {worst:.2e} (limit 1e-6)"))
}

fn random_bits(n: usize, rng: &mut Rng) -> Vec<bool> {
    (0..n).map(|_| rng.below(2) == 1).collect()
}

fn hamming_and_ranking() -> Outcome {
    let mut rng = Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for bits in [8, 16, 32, 64, 128] {
        for _ in 0..1000 {
            let (a, b) = (random_bits(bits, &mut rng), random_bits(bits, &mut rng));
            let naive = a.iter().zip(&b).filter(|(x, y)| x != y).count() as u32;
            if hamming(&HashCode::from_bits(&a), &HashCode::from_bits(&b)).unwrap() != naive {
                mismatches += 1;
            }
        }
    }
    let mut rank_mismatches = 0;
    for trial in 0..20u64 {
        let bits = [8, 32, 64, 100, 128][trial as usize % 5];
        let raw: Vec<(u64, u32, Vec<bool>)> =
            (0..100).map(|i| (500 - i, rng.below(5) as u32, random_bits(bits, &mut rng))).collect();
        let db = CodeDatabase::from_records(
            bits,
            raw.iter().map(|(id, l, b)| CodeRecord { id: *id, label: *l, code: HashCode::from_bits(b) }).collect(),
        )
        .unwrap();
        let qb = random_bits(bits, &mut rng);
        let qc = HashCode::from_bits(&qb);
        let (got, _) = rank_all(Query { id: 9999, label: 1, code: &qc }, &db, false).unwrap();
        let mut want: Vec<(u32, u64, bool)> = raw
            .iter()
            .map(|(id, l, b)| (b.iter().zip(&qb).filter(|(x, y)| x != y).count() as u32, *id, *l == 1))
            .collect();
        want.sort();
        let got: Vec<(u32, u64, bool)> = got.hits.iter().map(|h| (h.distance as u32, h.id, h.relevant)).collect();
        if got != want {
            rank_mismatches += 1;
        }
    }
    check(
        mismatches == 0 && rank_mismatches == 0,
        format!("{mismatches} Hamming mismatches in 5000 pairs, {rank_mismatches} ranking mismatches in 20 databases of 100"),
    )
}

fn map_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut patterns = 0;
    for n in 1..=8usize {
        for m in 0..1u32 << n {
            let flags: Vec<bool> = (0..n).map(|i| m >> i & 1 == 1).collect();
            let total = flags.iter().filter(|&&f| f).count();
            let oracle = (total > 0).then(|| {
                (1..=n)
                    .filter(|&k| flags[k - 1])
                    .map(|k| flags[..k].iter().filter(|&&f| f).count() as f64 / k as f64)
                    .sum::<f64>()
                    / total as f64
            });
            if average_precision_flags(flags.iter().copied()) != oracle {
                mismatches += 1;
            }
            patterns += 1;
        }
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let db = Embeddings::load(&dir.join("db.rvhc")).map_err(|e| e.to_string())?;
    let q = Embeddings::load(&dir.join("queries.rvhc")).map_err(|e| e.to_string())?;
    let (results, _) =
        pipeline::search_all(&db, &q, rvssdh::retrieval::VectorMetric::Cosine, false).map_err(|e| e.to_string())?;
    let fixture = evaluate(&results).map_err(|e| e.to_string())?.map;
    let err = (fixture - 34.0 / 45.0).abs();
    check(
        mismatches == 0 && err <= 1e-12,
        format!("{mismatches} mismatches over {patterns} patterns; fixture mAP {fixture:.6} vs 34/45 (|diff| {err:.1e})"),
    )
}

fn linearity() -> Outcome {
    let batch = 32;
    let mut steps = Vec::new();
    for n in [320usize, 640, 1280, 2560] {
        let samples: Vec<f32> = (0..n * 8).map(|i| (i % 13) as f32 / 13.0).collect();
        let labels: Vec<u32> = (0..n as u32).map(|i| i % 2).collect();
        let ds = rvssdh::data::LabeledDataset::new([2, 1, 4], samples, labels, 2, "linear").unwrap();
        let mut cfg = ModelConfig::new(Variant::RandomVlad, [2, 1, 4], 2);
        cfg.backbone = None;
        cfg.clusters = 2;
        cfg.bits = 8;
        let tc = TrainConfig { epochs: 1, batch_size: batch, ..Default::default() };
        let out = train::train::<f32>(cfg, &ds, None, tc, LossConfig::default(), |_| {}).map_err(|e| e.to_string())?;
        steps.push((n, out.log[0].steps));
    }
    let steps_ok = steps.iter().all(|&(n, s)| s * batch as u64 == n as u64)
        && steps.windows(2).all(|w| w[1].1 == 2 * w[0].1);

    let mut rng = Rng::seed_from_u64(102);
    let mut ops = Vec::new();
    for bits in [16, 64, 65, 128, 192, 256] {
        let db = CodeDatabase::from_records(
            bits,
            (0..200).map(|i| CodeRecord { id: i, label: 0, code: HashCode::from_bits(&random_bits(bits, &mut rng)) }).collect(),
        )
        .unwrap();
        let q = HashCode::from_bits(&random_bits(bits, &mut rng));
        let (_, stats) = rank_all(Query { id: 1_000, label: 0, code: &q }, &db, false).unwrap();
        ops.push((bits, stats.word_ops));
    }
    let ops_ok = ops.iter().all(|&(bits, w)| w == 200 * bits.div_ceil(64) as u64);
    check(steps_ok && ops_ok, format!("steps per epoch (N, steps) {steps:?}; scan word ops (L, ops) {ops:?}"))
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("RVSSDH_MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("data/mnist"));
    dir.join("train-images-idx3-ubyte").is_file().then_some(dir)
}

struct Desk {
    mnist: PathBuf,
    base: RunConfig,
    root: PathBuf,
    runs: BTreeMap<&'static str, Result<(RunSummary, Duration), String>>,
}

impl Desk {
    fn new(mnist: PathBuf) -> Result<Self, String> {
        let base = RunConfig::load(&workspace().join("configs/mnist_desk.conf")).map_err(|e| e.to_string())?;
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        Ok(Desk { mnist, base, root, runs: BTreeMap::new() })
    }

    fn config(&self, name: &str, overrides: &[(&str, &str)]) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.images = Some(self.mnist.join("train-images-idx3-ubyte"));
        cfg.labels = Some(self.mnist.join("train-labels-idx1-ubyte"));
        cfg.out_dir = self.root.join(name);
        for (k, v) in overrides {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    fn run(&mut self, name: &'static str, overrides: &[(&str, &str)]) -> Result<(RunSummary, Duration), String> {
        if let Some(r) = self.runs.get(name) {
            return r.clone();
        }
        let cfg = self.config(name, overrides);
        eprintln!("desk run {name}: {}", cfg.out_dir.display());
        let start = Instant::now();
        let r = pipeline::run(&cfg, |row| eprintln!("  {name} epoch {:>2} val_top1 {:?}", row.epoch, row.val_top1))
            .map(|s| (s, start.elapsed()))
            .map_err(|e| format!("{name}: {e}"));
        self.runs.insert(name, r.clone());
        r
    }
}

fn desk_map(desk: &mut Desk) -> Outcome {
    let (rv, t) = desk.run("random_vlad", &[])?;
    check(
        rv.map >= 0.75 && t < Duration::from_secs(30 * 60),
        format!("RV-SSDH mAP {:.4} (need >= 0.75), run time {:.1} min (target < 30)", rv.map, t.as_secs_f64() / 60.0),
    )
}

fn desk_ordering(desk: &mut Desk) -> Outcome {
    let rv = desk.run("random_vlad", &[])?.0;
    let ssdh = desk.run("ssdh_only", &[("variant", "ssdh_only")])?.0;
    let bb = desk.run("backbone_only", &[("variant", "backbone_only")])?.0;
    let nv = desk.run("netvlad", &[("variant", "netvlad")]).map(|r| format!("{:.4}", r.0.map)).unwrap_or_else(|e| e);
    check(
        rv.map > ssdh.map && ssdh.map > bb.map,
        format!(
            "mAP RV-SSDH {:.4} > ssdh_only {:.4} > backbone_only {:.4} (netvlad {nv}, not gated)",
            rv.map, ssdh.map, bb.map
        ),
    )
}

fn desk_top1(desk: &mut Desk) -> Outcome {
    let rv = desk.run("random_vlad", &[])?.0;
    let bb = desk.run("backbone_only", &[("variant", "backbone_only")])?.0;
    check(
        rv.top1_validation < bb.top1_validation,
        format!("validation Top-1 error RV-SSDH {:.4} < backbone_only {:.4}", rv.top1_validation, bb.top1_validation),
    )
}

fn quantization(desk: &mut Desk) -> Outcome {
    let b1 = desk.run("random_vlad", &[])?.0;
    let b0 = desk.run("random_vlad_beta0", &[("loss_beta", "0")])?.0;
    let (s1, s0) = (b1.saturation.unwrap(), b0.saturation.unwrap());
    let d1 = b1.continuous_map.unwrap() - b1.map;
    let d0 = b0.continuous_map.unwrap() - b0.map;
    check(
        s1 - s0 >= 0.05 && d1 < d0,
        format!(
            "mean |h-0.5| beta=1 {s1:.4} vs beta=0 {s0:.4} (diff {:.4}, need >= 0.05); \
             binarization mAP loss beta=1 {d1:.4} vs beta=0 {d0:.4}",
            s1 - s0
        ),
    )
}

fn transform_ablation(desk: &mut Desk) -> Outcome {
    let with = desk.run("random_vlad", &[])?.0;
    let without = desk.run("random_vlad_no_transform", &[("transform", "false")])?.0;
    let delta = with.map - without.map;
    check(
        delta >= -0.02,
        format!("mAP with transform {:.4}, without {:.4}, change {delta:+.4} (need >= -0.02)", with.map, without.map),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap_or_default()))
                .collect()
        })
        .unwrap_or_default()
}

fn determinism(desk: &mut Desk) -> Outcome {
    // Both runs write to the same directory so the echoed config, which
    // records out_dir, is identical too.
    let mut cfg = desk.config("determinism", &[]);
    cfg.precision = Precision::F64;
    let mut snaps = Vec::new();
    for i in 0..2 {
        eprintln!("desk run determinism #{}", i + 1);
        pipeline::run(&cfg, |_| {}).map_err(|e| e.to_string())?;
        snaps.push(snapshot(&cfg.out_dir));
    }
    let names: Vec<&String> = snaps[0].keys().collect();
    let differing: Vec<&String> = names.iter().copied().filter(|n| snaps[1].get(*n) != Some(&snaps[0][*n])).collect();
    let required = ["model.rvck", "db.rvhc", "queries.rvhc", "map.tsv", "pr_curve.tsv", "top1.tsv", "train_log.tsv"];
    let missing: Vec<_> = required.iter().filter(|r| !snaps[0].contains_key(**r)).collect();
    check(
        differing.is_empty() && missing.is_empty() && snaps[0].len() == snaps[1].len(),
        format!("{} files compared, differing {differing:?}, missing {missing:?}", names.len()),
    )
}

fn main() {
    let mut report = Report { failed: Vec::new() };
    report.record("gradient suite", gradient_suite());
    report.record("hard-assignment limit", hard_assignment_limit());
    report.record("Hamming/ranking oracle", hamming_and_ranking());
    report.record("mAP oracle", map_oracle());
    report.record("linearity of cost", linearity());

    let desk_criteria: [(&'static str, fn(&mut Desk) -> Outcome); 6] = [
        ("desk MNIST (a) mAP", desk_map),
        ("desk MNIST (b) ordering", desk_ordering),
        ("desk MNIST (c) Top-1", desk_top1),
        ("quantization-loss effect", quantization),
        ("transform-layer ablation", transform_ablation),
        ("determinism", determinism),
    ];
    match mnist_dir().ok_or_else(|| "MNIST IDX files not found; run scripts/fetch_mnist.sh".to_string()) {
        Ok(dir) => match Desk::new(dir) {
            Ok(mut desk) => {
                for (name, f) in desk_criteria {
                    report.record(name, f(&mut desk));
                }
            }
            Err(e) => desk_criteria.iter().for_each(|(name, _)| report.record(name, Err(e.clone()))),
        },
        Err(e) => desk_criteria.iter().for_each(|(name, _)| report.record(name, Err(e.clone()))),
    }

    if report.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: {} failed: {:?}", report.failed.len(), report.failed);
        std::process::exit(1);
    }
}
