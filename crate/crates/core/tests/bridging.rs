use opr_core::bridging::{plan_bridges, BridgeConfig, BridgedSample};
use opr_core::labels::{AnchorKind, LabelScheme, Organization, StrategyKind};
use opr_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn organization() -> impl Strategy<Value = Organization> {
    prop_oneof![Just(Organization::R2B2D), Just(Organization::R2D2B), Just(Organization::Surround)]
}

fn strategy() -> impl Strategy<Value = StrategyKind> {
    prop_oneof![Just(StrategyKind::TripletBinary), Just(StrategyKind::MultiLabel), Just(StrategyKind::MultiClass)]
}

proptest! {
    #[test]
    fn bridges_exist_exactly_for_adjacent_pairs(
        org in organization(),
        strat in strategy(),
        a in 0usize..4,
        b in 0usize..4,
        alpha in 0.0f64..=1.0,
        fa in prop::collection::vec(-5.0f64..5.0, 6),
        fb in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let s = LabelScheme::new(strat, org);
        let (ka, kb) = (AnchorKind::ALL[a], AnchorKind::ALL[b]);
        let ta = Tensor::new(vec![1, 2, 3], fa).unwrap();
        let tb = Tensor::new(vec![1, 2, 3], fb).unwrap();
        let res = BridgedSample::new((&ta, &s.label(ka)), (&tb, &s.label(kb)), (ka, kb), alpha, org);
        prop_assert_eq!(res.is_ok(), s.adjacent(ka, kb));
        if let Ok(sample) = res {
            let (la, lb) = (s.label(ka), s.label(kb));
            for ((x, p), q) in sample.label().as_slice().iter().zip(la.as_slice()).zip(lb.as_slice()) {
                prop_assert!((x - (alpha * p + (1.0 - alpha) * q)).abs() < 1e-12);
            }
            for ((x, p), q) in sample.feature().data().iter().zip(ta.data()).zip(tb.data()) {
                prop_assert!(*x >= p.min(*q) - 1e-12 && *x <= p.max(*q) + 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_ratios_are_rejected(alpha in prop_oneof![-3.0f64..-1e-9, 1.0 + 1e-9..3.0]) {
        let s = LabelScheme::new(StrategyKind::TripletBinary, Organization::R2B2D);
        let t = Tensor::zeros(&[1, 1, 1]);
        let res = BridgedSample::new(
            (&t, &s.label(AnchorKind::Real)),
            (&t, &s.label(AnchorKind::Sbi)),
            (AnchorKind::Real, AnchorKind::Sbi),
            alpha,
            s.organization,
        );
        prop_assert!(res.is_err());
    }
}

/// Kolmogorov-Smirnov statistic against U[0, 1].
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn ratios_are_uniform_and_pairs_balanced() {
    for org in [Organization::R2B2D, Organization::Surround] {
        let s = LabelScheme::new(StrategyKind::TripletBinary, org);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let plans = plan_bridges(2000, &s, &BridgeConfig::default(), &mut rng);
        assert_eq!(plans.len(), 6000);
        let d = ks_uniform(plans.iter().map(|p| p.alpha()).collect());
        // 1% critical value.
        assert!(d < 1.63 / (plans.len() as f64).sqrt(), "KS {d}");
        let pairs = s.adjacent_pairs();
        for pair in &pairs {
            let share = plans.iter().filter(|p| p.pair() == *pair).count() as f64 / plans.len() as f64;
            assert!((share - 1.0 / pairs.len() as f64).abs() < 0.03, "{pair:?}: {share}");
        }
        for (i, p) in plans.iter().enumerate() {
            assert_eq!(p.quad(), i / 3);
        }
    }
}
