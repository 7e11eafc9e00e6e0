//! Geometric properties of the overlap estimator.

use ncdlab_core::separability::{counterexample_surface, estimate_tau, SampleSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intervals(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> SampleSet {
    let mut pts: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    pts.extend((0..n).map(|_| rng.gen_range(shift..shift + 1.0)));
    SampleSet::new(1, pts, (0..2 * n).map(|i| i / n).collect()).unwrap()
}

#[test]
fn overlap_shrinks_as_supports_separate() {
    let mut last = f64::INFINITY;
    for shift in [0.0, 0.25, 0.5, 0.75, 1.5] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tau = estimate_tau(&intervals(&mut rng, 800, shift), 5).unwrap().tau_hat;
        assert!(tau <= last + 1e-12, "shift {shift}: {tau} > {last}");
        last = tau;
    }
    assert!(last < 0.01);
}

#[test]
fn surface_projection_loses_separability() {
    for seed in 0..3 {
        let r = counterexample_surface(10_000, 5, seed).unwrap();
        assert!(r.tau_xz < 0.05, "seed {seed}: tau_xz {}", r.tau_xz);
        assert!(r.tau_x > 0.95, "seed {seed}: tau_x {}", r.tau_x);
        assert!(r.tau_x > r.tau_xz);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn overlap_is_isometry_invariant(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU, tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 300;
        let mut pts = Vec::new();
        for c in 0..2 {
            let cx = c as f64 * 0.8;
            for _ in 0..n {
                pts.push(rng.gen_range(cx..cx + 1.0));
                pts.push(rng.gen_range(0.0..1.0));
            }
        }
        let labels: Vec<usize> = (0..2 * n).map(|i| i / n).collect();
        let (s, c) = angle.sin_cos();
        let moved: Vec<f64> = pts
            .chunks(2)
            .flat_map(|p| [c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty])
            .collect();
        let a = estimate_tau(&SampleSet::new(2, pts, labels.clone()).unwrap(), 5).unwrap().tau_hat;
        let b = estimate_tau(&SampleSet::new(2, moved, labels).unwrap(), 5).unwrap().tau_hat;
        prop_assert!((a - b).abs() <= 0.02, "{} vs {}", a, b);
    }
}
