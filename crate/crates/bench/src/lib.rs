//! Fixtures shared by the benchmarks.

use molscale_core::model::{make_noised_sample, Batch, NoiseConfig};
use molscale_core::molgraph::synthetic::random_dataset;
use molscale_core::molgraph::MolecularGraph;
use molscale_core::scaling::{evaluate, ScalingLawFit, ScalingObservation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn molecules(count: usize, max_atoms: usize, seed: u64) -> Vec<MolecularGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_dataset(&mut rng, count, count.div_ceil(4), 4, max_atoms)
}

pub fn batch(count: usize, max_atoms: usize, seed: u64) -> Batch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<_> = molecules(count, max_atoms, seed)
        .iter()
        .map(|m| {
            make_noised_sample(m, &mut rng, &NoiseConfig::default()).expect("non-empty molecule")
        })
        .collect();
    Batch::new(&samples)
}

/// Noiseless observations of a three-term law over four sizes and 61 steps.
pub fn scaling_grid() -> Vec<ScalingObservation> {
    let law = ScalingLawFit::from_coefficients([2.660, 1.848, 0.588], [-1.137, -0.225, -1.479]);
    [42.0, 84.0, 164.0, 310.0]
        .into_iter()
        .flat_map(|m| {
            (200_000..=800_000).step_by(10_000).map(move |s| {
                let s = s as f64;
                ScalingObservation::new(m, s, evaluate(&law, m, s).expect("positive inputs"))
                    .expect("positive inputs")
            })
        })
        .collect()
}
