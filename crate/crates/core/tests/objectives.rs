use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdpc_core::objectives::*;
use rdpc_core::{Mode, Objective, TradeoffParams};

#[test]
fn distortion_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (batch, pixels) = (7, 13);
    let x: Vec<f64> = (0..batch * pixels).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
    let y: Vec<f64> = (0..batch * pixels).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
    let mut per_sample = Vec::new();
    for b in 0..batch {
        let mut acc = 0.0;
        for p in 0..pixels {
            let d = x[b * pixels + p] - y[b * pixels + p];
            acc += d * d;
        }
        per_sample.push(acc / pixels as f64);
    }
    let naive = per_sample.iter().sum::<f64>() / batch as f64;
    assert!((distortion(&x, &y).unwrap() - naive).abs() < 1e-10);
}

/// Builds a batch whose empirical `(s, x^)` frequencies equal a known joint exactly.
fn batch_from_joint(joint: &[[u32; 3]; 2]) -> (Vec<usize>, Vec<usize>) {
    let mut s = Vec::new();
    let mut xh = Vec::new();
    for (si, row) in joint.iter().enumerate() {
        for (b, &count) in row.iter().enumerate() {
            for _ in 0..count {
                s.push(si);
                xh.push(b);
            }
        }
    }
    (s, xh)
}

#[test]
fn cross_entropy_upper_bounds_conditional_entropy() {
    let joint = [[30u32, 5, 15], [10, 25, 15]];
    let total: u32 = joint.iter().flatten().sum();
    let (labels, symbols) = batch_from_joint(&joint);

    // Analytic H(S | X^) in nats from the joint table.
    let mut h = 0.0;
    for b in 0..3 {
        let col = (joint[0][b] + joint[1][b]) as f64;
        for row in &joint {
            let p = row[b] as f64 / total as f64;
            if p > 0.0 {
                h -= p * (row[b] as f64 / col).ln();
            }
        }
    }

    let posterior = |b: usize| {
        let col = (joint[0][b] + joint[1][b]) as f64;
        [joint[0][b] as f64 / col, joint[1][b] as f64 / col]
    };
    let exact: Vec<f64> = symbols.iter().flat_map(|&b| posterior(b)).collect();
    let ce = ce_loss(&labels, &exact, 2).unwrap();
    assert!((ce.value - h).abs() < 1e-12);

    for skew in [0.1, 0.3, 0.6] {
        let probs: Vec<f64> = symbols
            .iter()
            .flat_map(|&b| {
                let p = posterior(b);
                let a = (1.0 - skew) * p[0] + skew * 0.5;
                [a, 1.0 - a]
            })
            .collect();
        assert!(ce_loss(&labels, &probs, 2).unwrap().value >= h - 1e-12);
    }
}

struct Affine {
    scale: f64,
    shift: f64,
}

impl Critic for Affine {
    fn score(&self, x: &[f64]) -> f64 {
        self.scale * x.iter().map(|v| v * v).sum::<f64>() + self.shift
    }
    fn input_gradient(&self, x: &[f64], g: &mut [f64]) {
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = 2.0 * self.scale * xi;
        }
    }
}

proptest! {
    #[test]
    fn composite_loss_is_affine_in_lambda(
        mse in 0.0f64..1.0,
        ce in 0.0f64..5.0,
        w1 in -1.0f64..1.0,
        l in prop::array::uniform3(0.0f64..1.0),
    ) {
        let terms = LossTerms { mse, ce, w1_term: w1 };
        for (objective, slope) in [(Objective::Rdc, ce), (Objective::Rdp, w1)] {
            let totals: Vec<f64> = l
                .iter()
                .map(|&lam| {
                    let t = match objective {
                        Objective::Rdc => TradeoffParams::classification(lam),
                        Objective::Rdp => TradeoffParams::perception(lam),
                    };
                    composite_loss(objective, Mode::EndToEnd, terms, t).unwrap().total
                })
                .collect();
            for (lam, total) in l.iter().zip(&totals) {
                prop_assert!((total - (mse + lam * slope)).abs() < 1e-9);
            }
            if (l[1] - l[0]).abs() > 1e-6 && (l[2] - l[0]).abs() > 1e-6 {
                let s1 = (totals[1] - totals[0]) / (l[1] - l[0]);
                let s2 = (totals[2] - totals[0]) / (l[2] - l[0]);
                prop_assert!((s1 - s2).abs() < 1e-6 * (1.0 + slope.abs()));
            }
        }
    }

    #[test]
    fn gradient_penalty_ignores_constant_shift(
        real in prop::collection::vec(0.0f64..1.0, 8),
        fake in prop::collection::vec(0.0f64..1.0, 8),
        shift in -100.0f64..100.0,
        seed in any::<u64>(),
    ) {
        let a = Affine { scale: 0.7, shift: 0.0 };
        let b = Affine { scale: 0.7, shift };
        let la = critic_loss(&a, &real, &fake, 2, 10.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let lb = critic_loss(&b, &real, &fake, 2, 10.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(la.penalty, lb.penalty);
        prop_assert!((la.score_gap - lb.score_gap).abs() < 1e-9);
    }

    #[test]
    fn shifting_fake_scores_moves_w1_by_minus_delta(
        real in prop::collection::vec(-5.0f64..5.0, 1..20),
        fake in prop::collection::vec(-5.0f64..5.0, 1..20),
        delta in -3.0f64..3.0,
    ) {
        let base = w1_proxy_from_scores(&real, &fake);
        let shifted: Vec<f64> = fake.iter().map(|f| f + delta).collect();
        prop_assert!((w1_proxy_from_scores(&real, &shifted) - (base - delta)).abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonnegative(
        x in prop::collection::vec(0.0f64..=1.0, 12),
        y in prop::collection::vec(0.0f64..=1.0, 12),
        logits in prop::collection::vec(-5.0f64..5.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        prop_assert!(distortion(&x, &y).unwrap() >= 0.0);
        prop_assert_eq!(distortion(&x, &x).unwrap(), 0.0);
        let mut probs = Vec::new();
        for row in logits.chunks(4) {
            let m = row.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / s));
        }
        prop_assert!(ce_loss(&labels, &probs, 4).unwrap().value >= 0.0);
    }
}
