use opr_core::eval::{auc, eer, roc_points, video_auc, ScoreSet, ScoredItem};
use opr_core::Error;
use proptest::prelude::*;

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut s, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    s / pairs
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..20).prop_map(|v| f64::from(v) / 20.0), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = 0;
                l[1] = 1;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auc_matches_pair_count((s, l) in scored()) {
        let got = auc(&ScoreSet::from_pairs(&s, &l)).unwrap();
        prop_assert!((got - brute_auc(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_rescaling((s, l) in scored()) {
        let warped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        let a = auc(&ScoreSet::from_pairs(&s, &l)).unwrap();
        let b = auc(&ScoreSet::from_pairs(&warped, &l)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn negated_scores_mirror_auc((s, l) in scored()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let a = auc(&ScoreSet::from_pairs(&s, &l)).unwrap();
        let b = auc(&ScoreSet::from_pairs(&neg, &l)).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eer_lies_on_the_roc_hull((s, l) in scored()) {
        let set = ScoreSet::from_pairs(&s, &l);
        let e = eer(&set).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        let pts = roc_points(&set).unwrap();
        prop_assert_eq!(pts[0], (0.0, 1.0));
        prop_assert_eq!(*pts.last().unwrap(), (1.0, 0.0));
        // Somewhere between consecutive points fpr - fnr changes sign at e.
        let lo = pts.iter().map(|p| p.0.max(p.1)).fold(f64::MAX, f64::min);
        prop_assert!(e <= lo + 1e-12);
    }

    #[test]
    fn one_frame_videos_equal_frame_auc((s, l) in scored()) {
        let set = ScoreSet::from_pairs(&s, &l);
        prop_assert_eq!(video_auc(&set).unwrap(), auc(&set).unwrap());
    }
}

#[test]
fn fully_inverted_scores() {
    let set = ScoreSet::from_pairs(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]);
    assert_eq!(auc(&set).unwrap(), 0.0);
    assert_eq!(eer(&set).unwrap(), 1.0);
    let tied = ScoreSet::from_pairs(&[0.5; 6], &[0, 1, 0, 1, 0, 1]);
    assert_eq!(auc(&tied).unwrap(), 0.5);
    assert_eq!(eer(&tied).unwrap(), 0.5);
}

#[test]
fn video_auc_averages_frames_first() {
    let item = |v: &str, score: f64, label: u8| ScoredItem {
        item_id: format!("{v}-{score}"),
        video_id: v.into(),
        score,
        label,
    };
    // Frame level the fake video's 0.1 frame loses to a real 0.3 frame; the
    // video means (0.55 vs 0.3) separate perfectly.
    let set = ScoreSet::new(vec![
        item("r", 0.3, 0),
        item("r", 0.3, 0),
        item("f", 0.1, 1),
        item("f", 1.0, 1),
    ]);
    assert_eq!(auc(&set).unwrap(), 0.5);
    assert_eq!(video_auc(&set).unwrap(), 1.0);
    let mixed = ScoreSet::new(vec![item("a", 0.1, 0), item("a", 0.2, 1), item("b", 0.3, 1)]);
    assert!(matches!(video_auc(&mixed), Err(Error::Metric(_))));
    assert!(matches!(auc(&ScoreSet::from_pairs(&[0.1, 0.2], &[1, 1])), Err(Error::Metric(_))));
}
