use super::{ModelError, MASK_TOKEN};
use crate::molgraph::{
    compute_spd, kabsch_align, pair_distances, Coord, MolecularGraph, SpdMatrix,
};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub mask_rate: f64,
    pub sigma: f64,
    pub feature_mask_p: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mask_rate: 0.15,
            sigma: 0.2,
            feature_mask_p: 0.5,
        }
    }
}

/// Which feature groups are replaced by their learned mask vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FeatureMask {
    pub atomic: bool,
    pub bond: bool,
    pub spd: bool,
}

/// One molecule prepared for the denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    /// Raw molecule; its coordinates are the coordinate targets.
    pub graph: MolecularGraph,
    pub spd: SpdMatrix,
    pub masked_tokens: Vec<u8>,
    pub masked_positions: Vec<usize>,
    pub feature_mask: FeatureMask,
    /// Noised and aligned onto `graph.coords`.
    pub noised_coords: Vec<Coord>,
    /// Raw pairwise distances, `n * n`.
    pub distances: Vec<f64>,
}

pub fn masked_count(n: usize, rate: f64) -> usize {
    ((rate * n as f64).floor() as usize).max(1).min(n)
}

pub fn make_noised_sample<R: Rng + ?Sized>(
    g: &MolecularGraph,
    rng: &mut R,
    cfg: &NoiseConfig,
) -> Result<NoisedSample, ModelError> {
    let n = g.num_atoms();
    if n == 0 {
        return Err(ModelError::EmptyMolecule(g.mol_id.clone()));
    }
    let mut masked_positions = index::sample(rng, n, masked_count(n, cfg.mask_rate)).into_vec();
    masked_positions.sort_unstable();
    let mut masked_tokens = g.atom_token.clone();
    for &i in &masked_positions {
        masked_tokens[i] = MASK_TOKEN;
    }
    let feature_mask = FeatureMask {
        atomic: rng.random_bool(cfg.feature_mask_p),
        bond: rng.random_bool(cfg.feature_mask_p),
        spd: rng.random_bool(cfg.feature_mask_p),
    };
    let noised_coords = if cfg.sigma == 0.0 {
        g.coords.clone()
    } else {
        let normal =
            Normal::new(0.0, cfg.sigma).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let noised: Vec<Coord> = g
            .coords
            .iter()
            .map(|c| {
                [
                    c[0] + normal.sample(rng),
                    c[1] + normal.sample(rng),
                    c[2] + normal.sample(rng),
                ]
            })
            .collect();
        kabsch_align(&noised, &g.coords)?.aligned
    };
    Ok(NoisedSample {
        spd: compute_spd(g),
        distances: pair_distances(&g.coords),
        graph: g.clone(),
        masked_tokens,
        masked_positions,
        feature_mask,
        noised_coords,
    })
}

impl NoisedSample {
    pub fn num_atoms(&self) -> usize {
        self.graph.num_atoms()
    }

    /// Same sample with atoms relabelled so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> NoisedSample {
        let n = self.num_atoms();
        let graph = self.graph.permuted(perm);
        let mut inverse = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let mut masked_positions: Vec<usize> =
            self.masked_positions.iter().map(|&p| inverse[p]).collect();
        masked_positions.sort_unstable();
        NoisedSample {
            spd: compute_spd(&graph),
            distances: pair_distances(&graph.coords),
            graph,
            masked_tokens: perm.iter().map(|&p| self.masked_tokens[p]).collect(),
            masked_positions,
            feature_mask: self.feature_mask,
            noised_coords: perm.iter().map(|&p| self.noised_coords[p]).collect(),
        }
    }

    /// Shifts raw and noised coordinates by `t`.
    pub fn translated(&self, t: Coord) -> NoisedSample {
        let mut s = self.clone();
        s.graph = self.graph.translated(t);
        for c in &mut s.noised_coords {
            for k in 0..3 {
                c[k] += t[k];
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::synthetic::random_molecule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mol(n: usize, seed: u64) -> MolecularGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_molecule(&mut rng, "m", "s", n)
    }

    #[test]
    fn masking_counts() {
        assert_eq!(masked_count(20, 0.15), 3);
        assert_eq!(masked_count(4, 0.15), 1);
        assert_eq!(masked_count(1, 0.15), 1);
        assert_eq!(masked_count(7, 0.15), 1);
        assert_eq!(masked_count(40, 0.15), 6);
    }

    #[test]
    fn twenty_atoms_mask_three() {
        let g = mol(20, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = make_noised_sample(&g, &mut rng, &NoiseConfig::default()).unwrap();
        assert_eq!(s.masked_positions.len(), 3);
        let masked = s.masked_tokens.iter().filter(|&&t| t == MASK_TOKEN).count();
        assert_eq!(masked, 3);
        for i in 0..20 {
            if !s.masked_positions.contains(&i) {
                assert_eq!(s.masked_tokens[i], g.atom_token[i]);
            }
        }
    }

    #[test]
    fn four_atoms_mask_one() {
        let g = mol(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = make_noised_sample(&g, &mut rng, &NoiseConfig::default()).unwrap();
        assert_eq!(s.masked_positions.len(), 1);
    }

    #[test]
    fn zero_noise_keeps_coordinates() {
        let g = mol(9, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = NoiseConfig {
            sigma: 0.0,
            ..NoiseConfig::default()
        };
        let s = make_noised_sample(&g, &mut rng, &cfg).unwrap();
        assert_eq!(s.noised_coords, g.coords);
    }

    #[test]
    fn noise_is_aligned_and_sized() {
        let g = mol(16, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = make_noised_sample(&g, &mut rng, &NoiseConfig::default()).unwrap();
        let n = g.num_atoms() as f64;
        let mut centroid_shift = [0.0; 3];
        let mut sq = 0.0;
        for (a, b) in s.noised_coords.iter().zip(&g.coords) {
            for k in 0..3 {
                centroid_shift[k] += (a[k] - b[k]) / n;
                sq += (a[k] - b[k]).powi(2);
            }
        }
        // aligned centroids coincide
        assert!(centroid_shift.iter().all(|c| c.abs() < 1e-9));
        let rms = (sq / (3.0 * n)).sqrt();
        assert!(rms > 0.05 && rms < 0.4, "rms {rms}");
    }

    #[test]
    fn feature_masks_follow_probability() {
        let g = mol(6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let trials = 4000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let s = make_noised_sample(&g, &mut rng, &NoiseConfig::default()).unwrap();
            counts[0] += s.feature_mask.atomic as usize;
            counts[1] += s.feature_mask.bond as usize;
            counts[2] += s.feature_mask.spd as usize;
        }
        for c in counts {
            assert!((c as f64 / trials as f64 - 0.5).abs() < 0.03);
        }
    }

    #[test]
    fn permutation_round_trip() {
        let g = mol(7, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = make_noised_sample(&g, &mut rng, &NoiseConfig::default()).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let p = s.permuted(&perm);
        for (k, &old) in perm.iter().enumerate() {
            assert_eq!(p.masked_tokens[k], s.masked_tokens[old]);
            assert_eq!(p.noised_coords[k], s.noised_coords[old]);
            assert_eq!(
                p.masked_positions.contains(&k),
                s.masked_positions.contains(&old)
            );
        }
    }
}
