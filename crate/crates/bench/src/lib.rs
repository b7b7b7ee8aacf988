//! Seeded inputs for the criterion benchmarks under `benches/`.

use advshift::evaluator::ErrorProfile;
use advshift::simplex::normalize;
use advshift::{AdversaryState, LabelDistribution};
use rand::Rng;

pub fn random_distribution(rng: &mut impl Rng, l: usize) -> LabelDistribution {
    let w: Vec<f64> = (0..l).map(|_| rng.gen_range(0.05..1.0)).collect();
    normalize(&w).expect("positive weights")
}

/// Adversary state and a clipped-loss gradient on `l` classes.
pub fn adversary_instance(l: usize, seed: u64) -> (AdversaryState, Vec<f64>) {
    let mut rng = advshift::rng::stream(seed, "bench", l as u64);
    let state =
        AdversaryState { pi: random_distribution(&mut rng, l), p_emp: random_distribution(&mut rng, l), step: 0 };
    let g = (0..l).map(|_| rng.gen_range(0.0..2.0)).collect();
    (state, g)
}

pub fn error_profile(l: usize, seed: u64) -> ErrorProfile {
    let mut rng = advshift::rng::stream(seed, "bench-profile", l as u64);
    let values = (0..l).map(|_| rng.gen_range(0.0..1.0)).collect();
    ErrorProfile::new(values, random_distribution(&mut rng, l), vec![100; l]).expect("consistent lengths")
}
