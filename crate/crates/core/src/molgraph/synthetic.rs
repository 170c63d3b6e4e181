//! Random but structurally valid molecules for tests, benchmarks and smoke runs.

use super::{Coord, MolecularGraph, DEGREE_VOCAB};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// (atomic number, max valence, relative frequency)
const ELEMENTS: [(u8, u8, u32); 6] = [
    (6, 4, 60),
    (7, 3, 15),
    (8, 2, 15),
    (9, 1, 4),
    (16, 2, 4),
    (17, 1, 2),
];

const BOND_LENGTH: f64 = 1.5;

fn empty(n: usize) -> MolecularGraph {
    MolecularGraph {
        mol_id: String::new(),
        scaffold_id: String::new(),
        atom_token: vec![6; n],
        chirality: vec![0; n],
        degree: vec![0; n],
        formal_charge: vec![5; n],
        num_h: vec![0; n],
        radical_e: vec![0; n],
        hybridization: vec![2; n],
        aromatic: vec![0; n],
        in_ring: vec![0; n],
        bond_type: vec![0; n * n],
        bond_stereo: vec![0; n * n],
        bond_conj: vec![0; n * n],
        coords: (0..n).map(|i| [i as f64 * BOND_LENGTH, 0.0, 0.0]).collect(),
    }
}

fn set_bond(g: &mut MolecularGraph, i: usize, j: usize, kind: u8) {
    let n = g.num_atoms();
    g.bond_type[i * n + j] = kind;
    g.bond_type[j * n + i] = kind;
}

fn refresh_degree(g: &mut MolecularGraph) {
    for i in 0..g.num_atoms() {
        g.degree[i] = g.neighbors(i).count().min(DEGREE_VOCAB - 1) as u8;
    }
}

/// All-carbon molecule with the given single bonds, atoms laid out on a line.
pub fn from_bonds(n: usize, bonds: &[(usize, usize, u8)]) -> MolecularGraph {
    let mut g = empty(n);
    for &(i, j, kind) in bonds {
        set_bond(&mut g, i, j, kind);
    }
    refresh_degree(&mut g);
    g
}

/// Linear chain `0 - 1 - ... - (n-1)`.
pub fn chain(n: usize) -> MolecularGraph {
    let bonds: Vec<_> = (1..n).map(|i| (i - 1, i, 1)).collect();
    from_bonds(n, &bonds)
}

fn pick_element<R: Rng + ?Sized>(rng: &mut R) -> (u8, u8) {
    let total: u32 = ELEMENTS.iter().map(|e| e.2).sum();
    let mut x = rng.random_range(0..total);
    for &(z, valence, w) in &ELEMENTS {
        if x < w {
            return (z, valence);
        }
        x -= w;
    }
    unreachable!()
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Coord {
    loop {
        let v: Coord = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

/// A connected molecule with `n` atoms: a random tree respecting valences,
/// optionally closed into one ring, with a random-walk conformation.
pub fn random_molecule<R: Rng + ?Sized>(
    rng: &mut R,
    mol_id: &str,
    scaffold_id: &str,
    n: usize,
) -> MolecularGraph {
    assert!(n >= 1);
    let mut g = empty(n);
    g.mol_id = mol_id.to_string();
    g.scaffold_id = scaffold_id.to_string();
    let mut valence = vec![0u8; n];
    for (i, (tok, val)) in g.atom_token.iter_mut().zip(valence.iter_mut()).enumerate() {
        let (z, v) = if i == 0 { (6, 4) } else { pick_element(rng) };
        *tok = z;
        *val = v;
    }
    let mut used = vec![0u8; n];
    g.coords[0] = [0.0; 3];
    for i in 1..n {
        let open: Vec<usize> = (0..i).filter(|&p| used[p] < valence[p]).collect();
        let parent = if open.is_empty() {
            // every earlier atom is saturated; promote this atom's partner to carbon
            g.atom_token[i - 1] = 6;
            valence[i - 1] = 4;
            i - 1
        } else {
            open[rng.random_range(0..open.len())]
        };
        let kind =
            if used[parent] + 2 <= valence[parent] && valence[i] >= 2 && rng.random_bool(0.15) {
                2
            } else {
                1
            };
        set_bond(&mut g, parent, i, kind);
        used[parent] += kind;
        used[i] += kind;
        let mut best = g.coords[parent];
        let mut best_clearance = f64::NEG_INFINITY;
        for _ in 0..8 {
            let u = random_unit(rng);
            let cand = [
                g.coords[parent][0] + BOND_LENGTH * u[0],
                g.coords[parent][1] + BOND_LENGTH * u[1],
                g.coords[parent][2] + BOND_LENGTH * u[2],
            ];
            let clearance = (0..i)
                .filter(|&k| k != parent)
                .map(|k| {
                    let d: f64 = (0..3).map(|a| (cand[a] - g.coords[k][a]).powi(2)).sum();
                    d.sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            if clearance > best_clearance {
                best_clearance = clearance;
                best = cand;
            }
        }
        g.coords[i] = best;
    }
    // ring closure between two unsaturated, non-adjacent atoms
    if n >= 5 && rng.random_bool(0.5) {
        let cands: Vec<usize> = (0..n).filter(|&i| used[i] < valence[i]).collect();
        if cands.len() >= 2 {
            let a = cands[rng.random_range(0..cands.len())];
            let b = cands[rng.random_range(0..cands.len())];
            if a != b && g.bond(a, b) == 0 {
                set_bond(&mut g, a, b, 1);
                used[a] += 1;
                used[b] += 1;
                mark_ring(&mut g, a, b);
            }
        }
    }
    refresh_degree(&mut g);
    for i in 0..n {
        g.num_h[i] = valence[i].saturating_sub(used[i]).min(8);
        // codes: 0 SP, 1 SP2, 2 SP3
        g.hybridization[i] = if used[i] > g.degree[i] { 1 } else { 2 };
        if g.in_ring[i] == 1 && g.atom_token[i] == 6 && rng.random_bool(0.3) {
            g.chirality[i] = 1;
        }
    }
    for i in 0..n {
        for j in 0..n {
            if g.bond(i, j) == 2 {
                g.bond_conj[i * n + j] = 1;
            }
        }
    }
    g
}

/// Marks atoms on the tree path between `a` and `b` (now closed into a ring).
fn mark_ring(g: &mut MolecularGraph, a: usize, b: usize) {
    let n = g.num_atoms();
    let mut prev = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([a]);
    prev[a] = a;
    while let Some(u) = queue.pop_front() {
        for v in g.neighbors(u).collect::<Vec<_>>() {
            if prev[v] == usize::MAX && !(u == a && v == b) {
                prev[v] = u;
                queue.push_back(v);
            }
        }
    }
    if prev[b] == usize::MAX {
        return;
    }
    let mut cur = b;
    loop {
        g.in_ring[cur] = 1;
        if cur == a {
            break;
        }
        cur = prev[cur];
    }
}

/// `count` molecules with atom counts in `[min_atoms, max_atoms]`, spread over
/// `num_scaffolds` scaffold ids round-robin.
pub fn random_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    num_scaffolds: usize,
    min_atoms: usize,
    max_atoms: usize,
) -> Vec<MolecularGraph> {
    (0..count)
        .map(|i| {
            let n = rng.random_range(min_atoms..=max_atoms);
            random_molecule(
                rng,
                &format!("mol{i:05}"),
                &format!("scaf{:03}", i % num_scaffolds.max(1)),
                n,
            )
        })
        .collect()
}
