use image::{Rgb, RgbImage};
use opr_core::blendfake::{
    find_landmark_match, generate_cbi, generate_sbi, plan_cbi, plan_sbi, BlendConfig, CbiFailurePolicy, CbiPool,
    FrameInput, LandmarkSet, Mask, QuadBuilder,
};
use opr_core::ingestion::{DeskDataset, DeskSpec, Split};
use opr_core::labels::AttributeLabel;
use opr_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> DeskDataset {
    DeskDataset::generate(&DeskSpec {
        train_identities: 6,
        test_identities: 2,
        videos_per_identity: 2,
        frames_per_video: 3,
        ..Default::default()
    })
}

fn input(f: &opr_core::ingestion::LoadedFrame) -> FrameInput<'_> {
    FrameInput {
        frame_id: &f.record.frame_id,
        video_id: &f.record.video_id,
        identity_id: &f.record.identity_id,
        image: &f.real,
        landmarks: &f.landmarks,
    }
}

#[test]
fn zero_mask_reproduces_base() {
    let ds = desk();
    let a = &ds.frames[0];
    let b = &ds.frames[8];
    let mut plan = plan_sbi(&a.real, &a.landmarks, 3, &BlendConfig::default()).unwrap();
    plan.recipe.mask = Mask::zeros(a.real.width(), a.real.height());
    assert_eq!(plan.render(&a.real), a.real);

    let mut plan = plan_cbi(&a.real, &a.landmarks, &b.real, &b.landmarks, 3, &BlendConfig::default()).unwrap();
    plan.recipe.mask = Mask::zeros(a.real.width(), a.real.height());
    assert_eq!(plan.render(&a.real), a.real);
}

#[test]
fn generation_is_deterministic() {
    let ds = desk();
    let a = &ds.frames[1];
    let b = &ds.frames[9];
    let cfg = BlendConfig::default();
    let s1 = generate_sbi(&a.real, &a.landmarks, "a", 11, &cfg).unwrap();
    let s2 = generate_sbi(&a.real, &a.landmarks, "a", 11, &cfg).unwrap();
    assert_eq!(s1.image.as_raw(), s2.image.as_raw());
    let s3 = generate_sbi(&a.real, &a.landmarks, "a", 12, &cfg).unwrap();
    assert_ne!(s1.image.as_raw(), s3.image.as_raw());
    let c1 = generate_cbi(&a.real, &a.landmarks, &b.real, &b.landmarks, "b", 5, &cfg).unwrap();
    let c2 = generate_cbi(&a.real, &a.landmarks, &b.real, &b.landmarks, "b", 5, &cfg).unwrap();
    assert_eq!(c1.image.as_raw(), c2.image.as_raw());
}

#[test]
fn sbi_changes_only_inside_mask() {
    let ds = desk();
    for f in ds.frames.iter().take(10) {
        let plan = plan_sbi(&f.real, &f.landmarks, 7, &BlendConfig::default()).unwrap();
        let out = plan.render(&f.real);
        let (mut inside_diff, mut outside_diff) = (0, 0);
        for (x, y, px) in out.enumerate_pixels() {
            let differs = px != f.real.get_pixel(x, y);
            if plan.recipe.mask.get(x, y) > 0.0 {
                inside_diff += usize::from(differs);
            } else {
                outside_diff += usize::from(differs);
            }
        }
        assert_eq!(outside_diff, 0);
        assert!(inside_diff > 0, "blend left the face untouched");
    }
}

#[test]
fn mask_support_stays_inside_landmark_hull() {
    let ds = desk();
    // Independent hull oracle: gift wrapping plus all-cross-products test.
    fn hull_oracle(pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let start = *pts
            .iter()
            .min_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])))
            .unwrap();
        let mut hull = vec![start];
        let mut cur = start;
        loop {
            let mut next = pts[0];
            for &p in pts {
                if next == cur {
                    next = p;
                    continue;
                }
                let c = (next[0] - cur[0]) * (p[1] - cur[1]) - (next[1] - cur[1]) * (p[0] - cur[0]);
                let d = |q: [f64; 2]| (q[0] - cur[0]).powi(2) + (q[1] - cur[1]).powi(2);
                if c < 0.0 || (c == 0.0 && d(p) > d(next)) {
                    next = p;
                }
            }
            if next == start {
                break;
            }
            hull.push(next);
            cur = next;
        }
        hull
    }
    fn inside(p: [f64; 2], hull: &[[f64; 2]]) -> bool {
        let n = hull.len();
        let s: Vec<f64> = (0..n)
            .map(|i| {
                let a = hull[i];
                let b = hull[(i + 1) % n];
                (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
            })
            .collect();
        s.iter().all(|&v| v >= -1e-9) || s.iter().all(|&v| v <= 1e-9)
    }
    for (seed, f) in ds.frames.iter().enumerate().take(12) {
        let hull = hull_oracle(f.landmarks.points());
        let plan = plan_sbi(&f.real, &f.landmarks, seed as u64, &BlendConfig::default()).unwrap();
        for y in 0..f.real.height() {
            for x in 0..f.real.width() {
                let m = plan.recipe.mask.get(x, y);
                assert!((0.0..=1.0).contains(&m));
                if m > 0.0 {
                    assert!(inside([x as f64, y as f64], &hull), "mask leaks at ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn degenerate_hull_is_rejected() {
    let img = RgbImage::new(16, 16);
    let line = LandmarkSet::new((0..10).map(|i| [i as f64, i as f64]).collect()).unwrap();
    assert!(matches!(
        generate_sbi(&img, &line, "x", 0, &BlendConfig::default()),
        Err(Error::DegenerateHull(_))
    ));
    let oob = LandmarkSet::new(vec![[0.0, 0.0], [20.0, 0.0], [0.0, 5.0]]).unwrap();
    assert!(matches!(generate_sbi(&img, &oob, "x", 0, &BlendConfig::default()), Err(Error::Landmarks(_))));
}

fn random_set(rng: &mut ChaCha8Rng, n: usize) -> LandmarkSet {
    LandmarkSet::new((0..n).map(|_| [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)]).collect()).unwrap()
}

/// Brute-force oracle: explicit centroid subtraction then mean distance.
fn oracle_distance(a: &LandmarkSet, b: &LandmarkSet) -> f64 {
    let n = a.count() as f64;
    let ca = a.points().iter().fold([0.0, 0.0], |s, p| [s[0] + p[0] / n, s[1] + p[1] / n]);
    let cb = b.points().iter().fold([0.0, 0.0], |s, p| [s[0] + p[0] / n, s[1] + p[1] / n]);
    let mut tot = 0.0;
    for i in 0..a.count() {
        let pa = a.points()[i];
        let pb = b.points()[i];
        tot += ((pa[0] - ca[0] - pb[0] + cb[0]).powi(2) + (pa[1] - ca[1] - pb[1] + cb[1]).powi(2)).sqrt();
    }
    tot / n
}

#[test]
fn landmark_match_identical_entry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random_set(&mut rng, 10);
    let other = random_set(&mut rng, 10);
    let pool = vec![("b".to_string(), &other), ("a".to_string(), &q)];
    let m = find_landmark_match(&q, &pool).unwrap();
    assert_eq!(m.frame_id, "a");
    assert_eq!(m.distance, 0.0);
}

#[test]
fn landmark_match_hand_built_distances() {
    // Two-point sets: query at ±(0,0); entries offset so the mean aligned
    // distance is exactly 5, 2 and 9.
    let q = LandmarkSet::new(vec![[10.0, 10.0], [20.0, 10.0]]).unwrap();
    let make = |d: f64| LandmarkSet::new(vec![[10.0, 10.0 - d], [20.0, 10.0 + d]]).unwrap();
    let (a, b, c) = (make(5.0), make(2.0), make(9.0));
    let pool = vec![("f0".to_string(), &a), ("f1".to_string(), &b), ("f2".to_string(), &c)];
    let m = find_landmark_match(&q, &pool).unwrap();
    assert_eq!(m.frame_id, "f1");
    assert!((m.distance - 2.0).abs() < 1e-12);
}

#[test]
fn landmark_match_ties_prefer_lowest_id() {
    let q = LandmarkSet::new(vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]]).unwrap();
    let same = q.clone();
    let pool = vec![("z".to_string(), &same), ("m".to_string(), &same), ("q".to_string(), &same)];
    assert_eq!(find_landmark_match(&q, &pool).unwrap().frame_id, "m");
    assert!(matches!(find_landmark_match(&q, &[]), Err(Error::EmptyPool(_))));
}

#[test]
fn landmark_match_equals_brute_force_on_random_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..100 {
        let size = if trial == 0 { 1000 } else if trial < 10 { 50 } else { rng.gen_range(1..200) };
        let q = random_set(&mut rng, 12);
        let sets: Vec<LandmarkSet> = (0..size).map(|_| random_set(&mut rng, 12)).collect();
        let pool: Vec<(String, &LandmarkSet)> = sets.iter().enumerate().map(|(i, s)| (format!("{i:05}"), s)).collect();
        let got = find_landmark_match(&q, &pool).unwrap();
        let mut best = (f64::INFINITY, String::new());
        for (id, s) in &pool {
            let d = oracle_distance(&q, s);
            if d < best.0 {
                best = (d, id.clone());
            }
        }
        assert_eq!(got.frame_id, best.1);
        assert!((got.distance - best.0).abs() < 1e-9);
    }
}

#[test]
fn cbi_self_blend_with_identity_recipe_is_base() {
    let ds = desk();
    let f = &ds.frames[2];
    let plain = BlendConfig::plain();
    let out = generate_cbi(&f.real, &f.landmarks, &f.real, &f.landmarks, "self", 4, &plain).unwrap();
    assert_eq!(out.image, f.real);
    let ct = BlendConfig {
        cbi_color_transfer: true,
        ..BlendConfig::plain()
    };
    let out = generate_cbi(&f.real, &f.landmarks, &f.real, &f.landmarks, "self", 4, &ct).unwrap();
    assert_eq!(out.image, f.real);
}

#[test]
fn cbi_two_tone_compositing_oracle() {
    let n = 32;
    let base = RgbImage::from_pixel(n, n, Rgb([100, 100, 100]));
    let source = RgbImage::from_pixel(n, n, Rgb([200, 200, 200]));
    let lm = LandmarkSet::new(vec![[8.0, 6.0], [24.0, 7.0], [26.0, 20.0], [16.0, 27.0], [6.0, 19.0], [15.0, 15.0]]).unwrap();
    let out = generate_cbi(&base, &lm, &source, &lm, "src", 0, &BlendConfig::plain()).unwrap();
    // Closed form: inside the convex pentagon (boundary included) → 200, else 100.
    let hull = [[8.0, 6.0], [24.0, 7.0], [26.0, 20.0], [16.0, 27.0], [6.0, 19.0]];
    let inside = |x: f64, y: f64| {
        (0..5).all(|i| {
            let a: [f64; 2] = hull[i];
            let b: [f64; 2] = hull[(i + 1) % 5];
            (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) >= -1e-9
        })
    };
    let mut n_in = 0;
    for (x, y, px) in out.image.enumerate_pixels() {
        let want = if inside(x as f64, y as f64) {
            n_in += 1;
            200
        } else {
            100
        };
        assert_eq!(px.0, [want; 3], "pixel ({x},{y})");
    }
    assert!(n_in > 100);
}

#[test]
fn cbi_warp_out_of_bounds_is_rejected() {
    let n = 32;
    let base = RgbImage::from_pixel(n, n, Rgb([100, 100, 100]));
    // Inner points spread far more in the source than in the base, so the
    // least-squares warp magnifies and the base outline lands off-image.
    let base_lm = LandmarkSet::new(vec![
        [2.0, 2.0], [29.0, 2.0], [29.0, 29.0], [2.0, 29.0],
        [13.0, 13.0], [18.0, 13.0], [18.0, 18.0], [13.0, 18.0],
    ])
    .unwrap();
    let src_lm = LandmarkSet::new(vec![
        [0.0, 0.0], [31.0, 0.0], [31.0, 31.0], [0.0, 31.0],
        [1.0, 1.0], [30.0, 1.0], [30.0, 30.0], [1.0, 30.0],
    ])
    .unwrap();
    let res = generate_cbi(&base, &base_lm, &base, &src_lm, "src", 0, &BlendConfig::plain());
    assert!(matches!(res, Err(Error::WarpOutOfBounds(_))), "{res:?}");
}

#[test]
fn quad_labels_and_alignment() {
    let ds = desk();
    let train: Vec<_> = ds.split(Split::Train).collect();
    let pool = CbiPool::new(train.iter().map(|f| input(f)).collect());
    let mut qb = QuadBuilder::new(BlendConfig::default(), CbiFailurePolicy::Drop);
    let want = [
        AttributeLabel::new(0.0, 0.0, 0.0),
        AttributeLabel::new(1.0, 0.0, 0.0),
        AttributeLabel::new(1.0, 1.0, 0.0),
        AttributeLabel::new(1.0, 1.0, 1.0),
    ];
    let mut built = 0;
    for (i, f) in train.iter().enumerate() {
        let q = qb.build(&input(f), &f.deepfake, &pool, i as u64).unwrap().expect("quad");
        assert_eq!(q.labels, want);
        assert_eq!(q.frame_id, f.record.frame_id);
        assert_eq!(q.images[0], f.real);
        assert_eq!(q.images[3], f.deepfake);
        let src = q.meta.cbi_source.as_deref().unwrap();
        let src_identity = &pool.get(src).unwrap().identity_id;
        assert_ne!(*src_identity, f.record.identity_id.as_str());
        built += 1;
    }
    assert_eq!(built, train.len());
    assert_eq!(qb.dropped, 0);
}

#[test]
fn quad_without_match_pool_is_dropped() {
    let ds = desk();
    let f = &ds.frames[0];
    let own_identity: Vec<_> = ds.frames.iter().filter(|g| g.record.identity_id == f.record.identity_id).collect();
    let pool = CbiPool::new(own_identity.iter().map(|g| input(g)).collect());
    let mut qb = QuadBuilder::new(BlendConfig::default(), CbiFailurePolicy::Drop);
    assert!(qb.build(&input(f), &f.deepfake, &pool, 0).unwrap().is_none());
    assert_eq!(qb.dropped, 1);

    let mut sub = QuadBuilder::new(BlendConfig::default(), CbiFailurePolicy::SubstituteSbi);
    let q = sub.build(&input(f), &f.deepfake, &pool, 0).unwrap().unwrap();
    assert!(q.meta.cbi_substituted);
    assert_eq!(q.meta.cbi_source, None);
    assert_eq!(sub.substituted, 1);
    assert_eq!(sub.dropped, 0);
}

#[test]
fn hundred_frames_give_consistent_quads() {
    let ds = DeskDataset::generate(&DeskSpec {
        train_identities: 10,
        test_identities: 0,
        videos_per_identity: 2,
        frames_per_video: 5,
        ..Default::default()
    });
    assert_eq!(ds.frames.len(), 100);
    let pool = CbiPool::new(ds.frames.iter().map(input).collect());
    let mut qb = QuadBuilder::new(BlendConfig::default(), CbiFailurePolicy::Drop);
    for (i, f) in ds.frames.iter().enumerate() {
        if let Some(q) = qb.build(&input(f), &f.deepfake, &pool, i as u64).unwrap() {
            assert_eq!(q.images.len(), 4);
            assert_eq!(q.labels.len(), 4);
            assert_eq!(q.frame_id, f.record.frame_id);
            assert_eq!(q.video_id, f.record.video_id);
            assert!(q.images.iter().all(|im| im.dimensions() == f.real.dimensions()));
        }
    }
    assert_eq!(qb.dropped, 0);
}
