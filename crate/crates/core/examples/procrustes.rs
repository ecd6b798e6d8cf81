//! Closed-form weighted alignment: recover a random rigid motion from noisy
//! correspondences, with a fifth of them replaced by zero-weighted outliers.

use rand::Rng as _;

use ptta::geometry::{rotation_error, sample_random_transform, translation_error, Point};
use ptta::registration::weighted_procrustes;
use ptta::rng::substream;

fn main() -> ptta::Result<()> {
    let mut rng = substream(0, "example/procrustes");
    let gt = sample_random_transform(&mut rng, 360.0, 0.6);
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    let mut w = Vec::new();
    for i in 0..50 {
        let p: Point = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        src.push(p);
        if i % 5 == 0 {
            tgt.push([rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
            w.push(0.0);
        } else {
            let q = gt.apply_point(&p);
            tgt.push([q[0] + 1e-3 * rng.random_range(-1.0..1.0), q[1], q[2]]);
            w.push(1.0);
        }
    }
    let est = weighted_procrustes(&src, &tgt, &w)?;
    println!("RE {:.5} deg TE {:.6} m", rotation_error(&est, &gt), translation_error(&est, &gt));
    let uniform = weighted_procrustes(&src, &tgt, &vec![1.0; src.len()])?;
    println!("unweighted: RE {:.3} deg TE {:.4} m", rotation_error(&uniform, &gt), translation_error(&uniform, &gt));
    Ok(())
}
