use super::gradcheck::{check_config, END_TO_END_TOLERANCE};
use super::*;
use crate::diffcore::Graph;
use crate::molgraph::synthetic::{chain, random_molecule};
use crate::molgraph::MolecularGraph;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn molecule(seed: u64, n: usize) -> MolecularGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_molecule(&mut rng, &format!("m{seed}"), "s", n)
}

fn sample(seed: u64, n: usize) -> NoisedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    make_noised_sample(&molecule(seed, n), &mut rng, &NoiseConfig::default()).unwrap()
}

fn tiny<T: crate::diffcore::Real>(seed: u64) -> Model<T> {
    let mut m = Model::<T>::init(ModelConfig::tiny(), seed).unwrap();
    // give the coordinate head a non-trivial output
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = m.params.id("pos_head.fc2.weight").unwrap();
    for v in m.params.get_mut(id).value.data_mut() {
        *v = T::of(rng.random_range(-0.5..0.5));
    }
    m
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[test]
fn zero_tables_give_zero_atom_embedding() {
    let mut m = tiny::<f64>(1);
    m.zero_params("embed.");
    let batch = Batch::new(&[sample(1, 6)]);
    let g = Graph::new();
    let x = m.embed_atoms(&g, &batch).unwrap();
    assert!(g.value(x).data().iter().all(|&v| v == 0.0));
    let p = m.embed_pairs(&g, &batch).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn atom_embedding_matches_table_sum() {
    let m = tiny::<f64>(2);
    let s = sample(2, 7);
    let batch = Batch::new(std::slice::from_ref(&s));
    let g = Graph::new();
    let x = m.embed_atoms(&g, &batch).unwrap();
    let d = m.config.embed_dim;
    let row = |name: &str, id: usize| {
        let t = &m.params.get(m.params.id(name).unwrap()).value;
        t.data()[id * d..(id + 1) * d].to_vec()
    };
    let names = [
        "chirality",
        "formal_charge",
        "num_h",
        "radical",
        "hybridization",
        "aromatic",
        "in_ring",
    ];
    let features = s.graph.atomic_features();
    for i in 0..7 {
        let mut expected = row("embed.token", s.masked_tokens[i] as usize);
        for (k, v) in row("embed.degree", s.graph.degree[i] as usize)
            .iter()
            .enumerate()
        {
            expected[k] += v;
        }
        let atomic: Vec<f64> = if s.feature_mask.atomic {
            m.params
                .get(m.params.id("embed.atomic_mask").unwrap())
                .value
                .data()
                .to_vec()
        } else {
            let mut acc = vec![0.0; d];
            for (name, values) in names.iter().zip(features) {
                for (k, v) in row(&format!("embed.atomic.{name}"), values[i] as usize)
                    .iter()
                    .enumerate()
                {
                    acc[k] += v;
                }
            }
            acc
        };
        for k in 0..d {
            let got = g.value(x).data()[i * d + k];
            assert!((got - (expected[k] + atomic[k])).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_atoms_embed_identically() {
    let m = tiny::<f64>(3);
    let mut s = sample(3, 5);
    s.masked_positions = vec![];
    s.masked_tokens = vec![6; 5];
    let g0 = chain(5);
    s.graph.degree = g0.degree.clone();
    for f in [
        &mut s.graph.chirality,
        &mut s.graph.formal_charge,
        &mut s.graph.num_h,
        &mut s.graph.radical_e,
        &mut s.graph.hybridization,
        &mut s.graph.aromatic,
        &mut s.graph.in_ring,
    ] {
        f.iter_mut().for_each(|v| *v = 0);
    }
    let batch = Batch::new(&[s]);
    let g = Graph::new();
    let x = m.embed_atoms(&g, &batch).unwrap();
    let d = m.config.embed_dim;
    let v = g.value(x);
    // chain interior atoms share degree 2
    assert_eq!(v.data()[d..2 * d], v.data()[2 * d..3 * d]);
}

#[test]
fn pair_embedding_swaps_with_atoms() {
    let m = tiny::<f64>(4);
    let s = sample(4, 6);
    let mut perm: Vec<usize> = (0..6).collect();
    perm.swap(1, 4);
    let sp = s.permuted(&perm);
    let g = Graph::new();
    let p = m.embed_pairs(&g, &Batch::new(&[s])).unwrap();
    let pp = m.embed_pairs(&g, &Batch::new(&[sp])).unwrap();
    let dp = m.config.pair_dim;
    let (a, b) = (g.value(p), g.value(pp));
    for i in 0..6 {
        for j in 0..6 {
            let (pi, pj) = (perm[i], perm[j]);
            for c in 0..dp {
                let x = b.data()[(i * 6 + j) * dp + c];
                let y = a.data()[(pi * 6 + pj) * dp + c];
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_block_is_identity() {
    let mut m = tiny::<f32>(5);
    m.zero_params("blocks.");
    let batch = Batch::new(&[sample(5, 8), sample(6, 5)]);
    let g = Graph::new();
    let x = m.embed_atoms(&g, &batch).unwrap();
    let p = m.embed_pairs(&g, &batch).unwrap();
    let mut out = (x, p);
    for layer in 0..m.config.layers {
        let b = m.forward_block(&g, &batch, layer, out.0, out.1).unwrap();
        out = (b.atom, b.pair);
    }
    assert_eq!(g.value(out.0).data(), g.value(x).data());
    assert_eq!(g.value(out.1).data(), g.value(p).data());
}

#[test]
fn attention_rows_sum_to_one_over_real_atoms() {
    let m = tiny::<f64>(7);
    let batch = Batch::new(&[sample(7, 8), sample(8, 4)]);
    let g = Graph::new();
    let x = m.embed_atoms(&g, &batch).unwrap();
    let p = m.embed_pairs(&g, &batch).unwrap();
    let b = m.forward_block(&g, &batch, 0, x, p).unwrap();
    let attn = g.value(b.attention);
    let (heads, n) = (m.config.heads, 8);
    for (bi, &len) in batch.num_atoms.iter().enumerate() {
        for h in 0..heads {
            for i in 0..len {
                let row = &attn.data()[((bi * heads + h) * n + i) * n..][..n];
                let sum: f64 = row[..len].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row[len..].iter().all(|&w| w == 0.0));
            }
        }
    }
}

#[test]
fn zero_head_keeps_noised_coordinates() {
    let mut m = tiny::<f64>(9);
    m.zero_params("pos_head.");
    let batch = Batch::new(&[sample(9, 7)]);
    let g = Graph::new();
    let out = m.forward(&g, &batch).unwrap();
    assert_eq!(g.value(out.coords).data(), batch.noised.data());
}

#[test]
fn single_atom_does_not_move() {
    let m = tiny::<f64>(10);
    let batch = Batch::new(&[sample(10, 1)]);
    let g = Graph::new();
    let out = m.forward(&g, &batch).unwrap();
    assert_eq!(g.value(out.coords).data(), batch.noised.data());
}

#[test]
fn padding_does_not_change_results() {
    let m = tiny::<f32>(11);
    let (a, b) = (sample(11, 5), sample(12, 8));
    let g = Graph::new();
    let alone = m
        .forward(&g, &Batch::new(std::slice::from_ref(&a)))
        .unwrap();
    let padded = m.forward(&g, &Batch::new(&[a, b])).unwrap();
    let c1 = g.value(alone.coords);
    let c2 = g.value(padded.coords);
    assert!(max_abs_diff(c1.data(), &c2.data()[..15]) < 1e-5);
    let l1 = g.value(alone.logits);
    let l2 = g.value(padded.logits);
    assert!(max_abs_diff(l1.data(), &l2.data()[..5 * TOKEN_VOCAB]) < 1e-5);
}

#[test]
fn uniform_logits_give_log_vocab() {
    let mut m = tiny::<f64>(12);
    m.zero_params("lm_head.out");
    let batch = Batch::new(&[sample(12, 9), sample(13, 6)]);
    let l = m.evaluate(&batch).unwrap();
    assert!((l.loss_atom - (TOKEN_VOCAB as f64).ln()).abs() < 1e-12);
    assert!((l.loss_atom - 4.8520).abs() < 5e-5);
}

#[test]
fn perfect_prediction_has_zero_geometry_loss() {
    let mut m = tiny::<f64>(13);
    m.zero_params("pos_head.");
    let mut s = sample(13, 7);
    s.noised_coords = s.graph.coords.clone();
    let l = m.evaluate(&Batch::new(&[s])).unwrap();
    assert_eq!(l.loss_coor, 0.0);
    assert!(l.loss_distance < 1e-12);
}

#[test]
fn confident_logits_drive_atom_loss_to_zero() {
    let mut m = tiny::<f64>(14);
    m.zero_params("lm_head.out");
    let s = sample(14, 6);
    let target = s.graph.atom_token[s.masked_positions[0]] as usize;
    // a huge bias on the single masked atom's true class
    let id = m.params.id("lm_head.out.bias").unwrap();
    m.params.get_mut(id).value.data_mut()[target] = 60.0;
    let l = m.evaluate(&Batch::new(&[s])).unwrap();
    assert!(l.loss_atom < 1e-20);
}

#[test]
fn losses_match_loop_oracle() {
    let m = tiny::<f64>(15);
    let samples = [sample(15, 6), sample(16, 4)];
    let batch = Batch::new(&samples);
    let g = Graph::new();
    let out = m.forward(&g, &batch).unwrap();
    let l = bundle(&g, &m.losses(&g, &batch, &out).unwrap());
    let logits = g.value(out.logits);
    let coords = g.value(out.coords);
    let n = batch.max_atoms;

    let (mut ce, mut masked) = (0.0, 0);
    let (mut coor, mut atoms) = (0.0, 0);
    let (mut dist, mut pairs) = (0.0, 0);
    for (b, s) in samples.iter().enumerate() {
        for &i in &s.masked_positions {
            let row = &logits.data()[(b * n + i) * TOKEN_VOCAB..][..TOKEN_VOCAB];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce += lse - row[s.graph.atom_token[i] as usize];
            masked += 1;
        }
        let pc = |i: usize, k: usize| coords.data()[(b * n + i) * 3 + k];
        for i in 0..s.num_atoms() {
            for k in 0..3 {
                coor += (pc(i, k) - s.graph.coords[i][k]).abs();
            }
            atoms += 1;
            for j in 0..s.num_atoms() {
                if i == j {
                    continue;
                }
                let d = (0..3)
                    .map(|k| (pc(i, k) - pc(j, k)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dist += (d - s.distances[i * s.num_atoms() + j]).abs();
                pairs += 1;
            }
        }
    }
    assert!((l.loss_atom - ce / masked as f64).abs() < 1e-12);
    assert!((l.loss_coor - coor / (3 * atoms) as f64).abs() < 1e-12);
    assert!((l.loss_distance - dist / pairs as f64).abs() < 1e-12);
}

#[test]
fn total_is_exact_sum_of_parts() {
    let m = tiny::<f32>(16);
    let batch = Batch::new(&[sample(16, 8), sample(17, 5)]);
    let g = Graph::new();
    let out = m.forward(&g, &batch).unwrap();
    let l = m.losses(&g, &batch, &out).unwrap();
    let (a, c, d) = (g.scalar(l.atom), g.scalar(l.coor), g.scalar(l.distance));
    assert_eq!(g.scalar(l.total).to_bits(), (a + c + d).to_bits());
    let b = bundle(&g, &l);
    assert_eq!(
        b.loss_total.to_bits(),
        (b.loss_atom + b.loss_coor + b.loss_distance).to_bits()
    );
}

fn permutation_case(seed: u64) -> (f32, f32, f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let m = tiny::<f32>(seed);
    let s = sample(seed, n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let sp = s.permuted(&perm);
    let g = Graph::new();
    let (b0, b1) = (Batch::new(&[s]), Batch::new(&[sp]));
    let o0 = m.forward(&g, &b0).unwrap();
    let o1 = m.forward(&g, &b1).unwrap();
    let l0 = bundle(&g, &m.losses(&g, &b0, &o0).unwrap());
    let l1 = bundle(&g, &m.losses(&g, &b1, &o1).unwrap());
    let (lg0, lg1) = (g.value(o0.logits), g.value(o1.logits));
    let (c0, c1) = (g.value(o0.coords), g.value(o1.coords));
    let mut logit_err = 0.0f32;
    let mut coord_err = 0.0f32;
    for (k, &p) in perm.iter().enumerate() {
        logit_err = logit_err.max(max_abs_diff(
            &lg1.data()[k * TOKEN_VOCAB..(k + 1) * TOKEN_VOCAB],
            &lg0.data()[p * TOKEN_VOCAB..(p + 1) * TOKEN_VOCAB],
        ));
        coord_err = coord_err.max(max_abs_diff(
            &c1.data()[k * 3..k * 3 + 3],
            &c0.data()[p * 3..p * 3 + 3],
        ));
    }
    (
        logit_err,
        coord_err,
        (l0.loss_total - l1.loss_total).abs() as f32,
    )
}

#[test]
fn permutation_equivariance() {
    for seed in 0..20 {
        let (logits, coords, loss) = permutation_case(seed);
        assert!(
            logits < 1e-5 && coords < 1e-5 && loss < 1e-5,
            "seed {seed}: {logits} {coords} {loss}"
        );
    }
}

#[test]
fn translation_equivariance() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let n = rng.random_range(2..=8);
        let m = tiny::<f32>(seed);
        let s = sample(seed + 50, n);
        let t = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ];
        let st = s.translated(t);
        let g = Graph::new();
        let (b0, b1) = (Batch::new(&[s]), Batch::new(&[st]));
        let o0 = m.forward(&g, &b0).unwrap();
        let o1 = m.forward(&g, &b1).unwrap();
        let (c0, c1) = (g.value(o0.coords).clone(), g.value(o1.coords).clone());
        for i in 0..n * 3 {
            let shifted = c0.data()[i] + t[i % 3] as f32;
            assert!((c1.data()[i] - shifted).abs() < 1e-5, "seed {seed}");
        }
        let l0 = bundle(&g, &m.losses(&g, &b0, &o0).unwrap());
        let l1 = bundle(&g, &m.losses(&g, &b1, &o1).unwrap());
        assert!((l0.loss_atom - l1.loss_atom).abs() < 1e-5);
        assert!((l0.loss_coor - l1.loss_coor).abs() < 1e-5);
        assert!((l0.loss_distance - l1.loss_distance).abs() < 1e-5);
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let checks = check_config(&ModelConfig::tiny(), 50, 21, None).unwrap();
    assert_eq!(checks.len(), 50);
    for c in &checks {
        assert!(c.rel_err < END_TO_END_TOLERANCE, "{c:?}");
    }
}

#[test]
fn built_store_matches_analytic_count() {
    let m = Model::<f32>::init(ModelConfig::tiny(), 0).unwrap();
    assert_eq!(m.params.num_scalars(), m.config.num_params());
    let specs = m.config.param_specs();
    for (spec, p) in specs.iter().zip(m.params.iter()) {
        assert_eq!(spec.name, p.name);
        assert_eq!(spec.shape, p.value.shape());
    }
}

#[test]
fn from_params_rejects_mismatched_shapes() {
    let m = Model::<f32>::init(ModelConfig::tiny(), 0).unwrap();
    let mut bigger = ModelConfig::tiny();
    bigger.embed_dim = 32;
    assert!(matches!(
        Model::from_params(bigger, m.params.clone()),
        Err(ModelError::ConfigMismatch(_))
    ));
}
