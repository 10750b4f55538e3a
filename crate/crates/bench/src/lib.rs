//! Shared fixtures for the benchmarks.

use opr_core::blendfake::{AlignedQuad, BlendConfig, CbiFailurePolicy};
use opr_core::eval::ScoreSet;
use opr_core::ingestion::{DeskDataset, DeskSpec, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A few dozen desk quads.
pub fn desk_quads(identities: usize) -> Vec<AlignedQuad> {
    let ds = DeskDataset::generate(&DeskSpec {
        train_identities: identities,
        test_identities: 0,
        videos_per_identity: 2,
        frames_per_video: 3,
        ..Default::default()
    });
    ds.quads(Split::Train, &BlendConfig::default(), CbiFailurePolicy::SubstituteSbi, 0)
        .expect("desk quads")
        .0
}

/// `n` scores with a mild label signal and frequent ties.
pub fn score_set(n: usize, seed: u64) -> ScoreSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| ((rng.gen::<f64>() + 0.2 * f64::from(l)) * 100.0).round() / 100.0)
        .collect();
    ScoreSet::from_pairs(&scores, &labels)
}
