//! Finite-difference check of the VLAD and hash layers over three seeds.
//!
//! `cargo run --release --example gradcheck [layer-prefix]`

use rvssdh::gradcheck::{self, GradCheckConfig};

fn main() -> rvssdh::Result<()> {
    let only = std::env::args().nth(1);
    let cfg = GradCheckConfig { seeds: 3, ..Default::default() };
    let report = match only.as_deref() {
        Some(prefix) => gradcheck::run(&cfg, Some(prefix))?,
        None => {
            let mut r = gradcheck::run(&cfg, Some("vlad"))?;
            r.layers.extend(gradcheck::run(&cfg, Some("hash"))?.layers);
            r
        }
    };
    report.write_to(&mut std::io::stdout().lock())?;
    println!("passed: {}", report.passed());
    Ok(())
}
