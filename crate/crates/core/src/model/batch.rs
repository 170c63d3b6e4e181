use super::{pair_type, NoisedSample, IGNORE_INDEX, PAD_TOKEN};
use crate::diffcore::{Real, Tensor};
use crate::molgraph::UNREACHABLE_CODE;

/// Samples padded to a common atom count `n`, with every constant the
/// forward pass and losses need.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub size: usize,
    pub max_atoms: usize,
    pub num_atoms: Vec<usize>,
    /// `[B, n]` id arrays.
    pub tokens: Vec<usize>,
    pub degree: Vec<usize>,
    pub atomic: [Vec<usize>; 7],
    /// `[B, n, n]` id arrays.
    pub bond_type: Vec<usize>,
    pub bond_stereo: Vec<usize>,
    pub bond_conj: Vec<usize>,
    pub spd: Vec<usize>,
    pub pair_type: Vec<usize>,
    /// `[B, 1, 1]`: 1 where the group is kept / masked.
    pub atomic_keep: Tensor<T>,
    pub atomic_masked: Tensor<T>,
    /// `[B, 1, 1, 1]`
    pub bond_keep: Tensor<T>,
    pub bond_masked: Tensor<T>,
    pub spd_keep: Tensor<T>,
    pub spd_masked: Tensor<T>,
    /// `[B, n, 3]` noised, aligned coordinates.
    pub noised: Tensor<T>,
    /// `[B, n, n]` distances between noised coordinates.
    pub noised_dist: Tensor<T>,
    /// `[B, n, n, 3]`: `noised[i] - noised[j]`.
    pub delta_pos: Tensor<T>,
    /// `[B, 1, 1, n]`: 0 for real atoms, -inf for padding.
    pub key_bias: Tensor<T>,
    /// `[B, n, n, 1]`: 1 where both atoms are real.
    pub pair_valid: Tensor<T>,
    /// `[B * n]`: true token at masked positions, `IGNORE_INDEX` elsewhere.
    pub targets: Vec<usize>,
    /// `[B, n, 3]` raw coordinates and validity.
    pub coords: Tensor<T>,
    pub coord_mask: Tensor<T>,
    /// `[B, n, n]` raw distances and off-diagonal validity.
    pub distances: Tensor<T>,
    pub dist_mask: Tensor<T>,
}

fn flag<T: Real>(v: bool) -> T {
    if v {
        T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Batch<T> {
    pub fn new(samples: &[NoisedSample]) -> Batch<T> {
        let b = samples.len();
        let n = samples.iter().map(|s| s.num_atoms()).max().unwrap_or(0);
        let (bn, bnn) = (b * n, b * n * n);
        let mut batch = Batch {
            size: b,
            max_atoms: n,
            num_atoms: samples.iter().map(|s| s.num_atoms()).collect(),
            tokens: vec![PAD_TOKEN as usize; bn],
            degree: vec![0; bn],
            atomic: std::array::from_fn(|_| vec![0; bn]),
            bond_type: vec![0; bnn],
            bond_stereo: vec![0; bnn],
            bond_conj: vec![0; bnn],
            spd: vec![UNREACHABLE_CODE as usize; bnn],
            pair_type: vec![pair_type(PAD_TOKEN, PAD_TOKEN); bnn],
            atomic_keep: Tensor::zeros(&[b, 1, 1]),
            atomic_masked: Tensor::zeros(&[b, 1, 1]),
            bond_keep: Tensor::zeros(&[b, 1, 1, 1]),
            bond_masked: Tensor::zeros(&[b, 1, 1, 1]),
            spd_keep: Tensor::zeros(&[b, 1, 1, 1]),
            spd_masked: Tensor::zeros(&[b, 1, 1, 1]),
            noised: Tensor::zeros(&[b, n, 3]),
            noised_dist: Tensor::zeros(&[b, n, n]),
            delta_pos: Tensor::zeros(&[b, n, n, 3]),
            key_bias: Tensor::full(&[b, 1, 1, n], T::neg_infinity()),
            pair_valid: Tensor::zeros(&[b, n, n, 1]),
            targets: vec![IGNORE_INDEX; bn],
            coords: Tensor::zeros(&[b, n, 3]),
            coord_mask: Tensor::zeros(&[b, n, 3]),
            distances: Tensor::zeros(&[b, n, n]),
            dist_mask: Tensor::zeros(&[b, n, n]),
        };
        for (s_idx, s) in samples.iter().enumerate() {
            batch.fill(s_idx, s);
        }
        batch
    }

    fn fill(&mut self, b: usize, s: &NoisedSample) {
        let n = self.max_atoms;
        let m = s.num_atoms();
        let g = &s.graph;
        let fm = s.feature_mask;
        self.atomic_keep.data_mut()[b] = flag(!fm.atomic);
        self.atomic_masked.data_mut()[b] = flag(fm.atomic);
        self.bond_keep.data_mut()[b] = flag(!fm.bond);
        self.bond_masked.data_mut()[b] = flag(fm.bond);
        self.spd_keep.data_mut()[b] = flag(!fm.spd);
        self.spd_masked.data_mut()[b] = flag(fm.spd);

        let features = g.atomic_features();
        for i in 0..m {
            let a = b * n + i;
            self.tokens[a] = s.masked_tokens[i] as usize;
            self.degree[a] = g.degree[i] as usize;
            for (f, values) in features.iter().enumerate() {
                self.atomic[f][a] = values[i] as usize;
            }
            self.key_bias.data_mut()[a] = T::zero();
            for k in 0..3 {
                self.noised.data_mut()[a * 3 + k] = T::of(s.noised_coords[i][k]);
                self.coords.data_mut()[a * 3 + k] = T::of(g.coords[i][k]);
                self.coord_mask.data_mut()[a * 3 + k] = T::one();
            }
        }
        for &p in &s.masked_positions {
            self.targets[b * n + p] = g.atom_token[p] as usize;
        }
        for i in 0..m {
            for j in 0..m {
                let src = i * m + j;
                let dst = (b * n + i) * n + j;
                self.bond_type[dst] = g.bond_type[src] as usize;
                self.bond_stereo[dst] = g.bond_stereo[src] as usize;
                self.bond_conj[dst] = g.bond_conj[src] as usize;
                self.spd[dst] = s.spd.spd[src] as usize;
                self.pair_type[dst] = pair_type(s.masked_tokens[i], s.masked_tokens[j]);
                self.pair_valid.data_mut()[dst] = T::one();
                self.distances.data_mut()[dst] = T::of(s.distances[src]);
                self.dist_mask.data_mut()[dst] = flag(i != j);
                let (ri, rj) = (s.noised_coords[i], s.noised_coords[j]);
                let mut sq = 0.0;
                for k in 0..3 {
                    let d = ri[k] - rj[k];
                    self.delta_pos.data_mut()[dst * 3 + k] = T::of(d);
                    sq += d * d;
                }
                self.noised_dist.data_mut()[dst] = T::of(sq.sqrt());
            }
        }
    }
}
