//! Sharpening the soft assignment turns random-VLAD pooling into classic
//! hard-assignment VLAD. Prints the gap to the hard oracle as the scale
//! grows.

use rvssdh::rvssdh::vlad::{self, VladKind, VladParams};
use rvssdh::{Rng, Tensor};

fn main() -> rvssdh::Result<()> {
    let mut rng = Rng::seed_from_u64(1);
    let (k, d, n) = (4, 3, 64);
    let anchors = Tensor::from_fn(&[k, d], |i| if i % (d + 1) == 0 { 4.0 } else { 0.0 });
    let x = Tensor::from_fn(&[n, d], |i| anchors.row((i / d) % k)[i % d] + 0.5 * rng.normal());

    let mut hard = vec![0.0; k * d];
    for i in 0..n {
        let dist = |c: usize| -> f64 { x.row(i).iter().zip(anchors.row(c)).map(|(a, b)| (a - b) * (a - b)).sum() };
        let q = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        for j in 0..d {
            hard[q * d + j] += x.row(i)[j] - anchors.row(q)[j];
        }
    }
    let norm = hard.iter().map(|v| v * v).sum::<f64>().sqrt();

    println!("scale\trelative_gap");
    for scale in [0.1, 1.0, 5.0, 20.0, 50.0] {
        let p = VladParams::from_anchors(anchors.clone(), scale, VladKind::Random)?;
        let (y, _) = vlad::forward(&p, &x.clone().reshape(&[1, n, 1, d])?)?;
        let gap = y.data().iter().zip(&hard).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / norm;
        println!("{scale}\t{gap:.3e}");
    }
    Ok(())
}
