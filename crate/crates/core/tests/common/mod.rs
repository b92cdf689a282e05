//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, WriteBytesExt};
use rvssdh::Rng;

pub const SIDE: usize = 12;

/// Writes `n` synthetic 12 x 12 IDX images in `classes` classes: class `c`
/// lights row band `c` and column band `c`, plus noise.
pub fn write_idx(dir: &Path, n: usize, classes: usize, seed: u64) -> (PathBuf, PathBuf) {
    let mut rng = Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    for v in [0x0000_0803u32, n as u32, SIDE as u32, SIDE as u32] {
        images.write_u32::<BigEndian>(v).unwrap();
    }
    let mut labels = Vec::new();
    for v in [0x0000_0801u32, n as u32] {
        labels.write_u32::<BigEndian>(v).unwrap();
    }
    let band = SIDE / classes;
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u8);
        for r in 0..SIDE {
            for col in 0..SIDE {
                let on = r / band == c || col / band == c;
                let base = if on { 200.0 } else { 20.0 };
                images.push((base + 30.0 * rng.normal()).clamp(0.0, 255.0) as u8);
            }
        }
    }
    let (ip, lp) = (dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"));
    fs::write(&ip, images).unwrap();
    fs::write(&lp, labels).unwrap();
    (ip, lp)
}

/// A small, fast run over a synthetic IDX set.
pub fn small_config(images: &Path, labels: &Path, out: &Path, extra: &str) -> String {
    format!(
        "images = {}\nlabels = {}\nout_dir = {}\nclusters = 3\nbits = 16\nepochs = 2\nbatch_size = 16\n\
         kmeans_samples = 20\ntrain_fraction = 0.75\nqueries = 10\nseed = 7\n{extra}",
        images.display(),
        labels.display(),
        out.display()
    )
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}
