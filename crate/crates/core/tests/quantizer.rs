use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdpc_core::quantizer::*;
use rdpc_core::QuantizerSpec;

fn spec(dim: usize, levels: usize) -> QuantizerSpec {
    QuantizerSpec::new(dim, levels).unwrap()
}

fn on_grid(v: f64, levels: usize) -> bool {
    grid(levels).unwrap().iter().any(|&g| g == v)
}

#[test]
fn grid_endpoints_and_spacing_are_exact() {
    for levels in 2..=8 {
        let g = grid(levels).unwrap();
        assert_eq!(g.len(), levels);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[levels - 1], 1.0);
        for w in g.windows(2) {
            assert!((w[1] - w[0] - spacing(levels)).abs() < 1e-15);
        }
    }
    assert_eq!(spacing(3), 1.0);
    assert_eq!(spacing(2), 2.0);
}

#[test]
fn exhaustive_round_trip_error_scan() {
    // y over [-1, 1] at step 1e-3, dither over its full range at a coarser step.
    for levels in [2, 3, 4] {
        let b = dither_bound(levels);
        let s = spec(1, levels);
        let mut worst: f64 = 0.0;
        for i in 0..=2000 {
            let y = -1.0 + i as f64 * 1e-3;
            for k in 0..=40 {
                let u = -b + 2.0 * b * k as f64 / 40.0;
                let z = quantize(&[y + u], s);
                let u = DitherVector::new(vec![u], s).unwrap();
                let r = dequantize(&z, &u).unwrap()[0];
                worst = worst.max((r - y).abs());
            }
        }
        assert!(worst <= b + 1e-12, "L={levels}: {worst}");
    }
}

#[test]
fn soft_gradient_matches_central_difference() {
    for &(y, levels, t) in &[(0.3, 3, 1.0), (-0.7, 4, 0.5), (0.1, 2, 2.0), (0.9, 5, 0.2)] {
        let h = 1e-5;
        let fd = (soft_quantize_scalar(y + h, levels, t) - soft_quantize_scalar(y - h, levels, t)) / (2.0 * h);
        let an = soft_quantize_derivative(y, levels, t);
        assert!(((an - fd) / fd).abs() < 1e-4, "y={y} L={levels} T={t}: {an} vs {fd}");
    }
}

proptest! {
    #[test]
    fn dithered_round_trip_is_bounded(
        levels in 2usize..=6,
        y in prop::collection::vec(-1.0f64..=1.0, 1..6),
        seed in any::<u64>(),
    ) {
        let s = spec(y.len(), levels);
        let u = sample_dither(s, &mut ChaCha8Rng::seed_from_u64(seed));
        let shifted: Vec<f64> = y.iter().zip(u.as_slice()).map(|(a, b)| a + b).collect();
        let z = quantize(&shifted, s);
        for &c in z.as_slice() {
            prop_assert!(on_grid(c, levels));
        }
        let r = dequantize(&z, &u).unwrap();
        for (a, b) in r.iter().zip(&y) {
            prop_assert!((a - b).abs() <= dither_bound(levels) + 1e-12);
        }
    }

    #[test]
    fn grid_points_survive_without_dither(levels in 2usize..=8, i in 0usize..8) {
        let i = i % levels;
        let g = grid(levels).unwrap()[i];
        let s = spec(1, levels);
        let z = quantize(&[g], s);
        prop_assert_eq!(dequantize(&z, &DitherVector::zeros(s)).unwrap()[0], g);
    }

    #[test]
    fn outputs_are_always_on_grid(levels in 2usize..=8, y in -10.0f64..10.0) {
        prop_assert!(on_grid(quantize_scalar(y, levels), levels));
    }

    #[test]
    fn straight_through_value_is_hard_quantize(
        levels in 2usize..=6,
        y in prop::collection::vec(-1.5f64..=1.5, 1..6),
        t in 0.01f64..5.0,
    ) {
        let s = spec(y.len(), levels);
        let (code, grads) = straight_through(&y, s, t).unwrap();
        prop_assert_eq!(code, quantize(&y, s));
        prop_assert!(grads.iter().all(|g| *g >= 0.0));
    }

    #[test]
    fn low_temperature_soft_matches_hard_off_ties(levels in 2usize..=6, y in -1.0f64..=1.0) {
        let frac = ((y + 1.0) / spacing(levels)).fract();
        prop_assume!((frac - 0.5).abs() > 0.05);
        let soft = soft_quantize_scalar(y, levels, 1e-3);
        prop_assert!((soft - quantize_scalar(y, levels)).abs() < 1e-6);
    }
}
