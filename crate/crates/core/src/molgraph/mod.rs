//! Molecular data model: per-atom feature codes, bond matrices, coordinates.
//!
//! Feature vocabularies follow the RDKit-derived atom and bond descriptors:
//! atom type by atomic number, chirality, degree, formal charge, hydrogen
//! count, radical electrons, hybridization, aromaticity and ring membership
//! per atom; bond type, stereo and conjugation per bond.

mod geometry;
mod io;
mod kabsch;
mod spd;
pub mod synthetic;

pub use geometry::pair_distances;
pub use io::{read_dataset, write_dataset, DatasetReader, DatasetRecord};
pub use kabsch::{kabsch_align, KabschResult};
pub use spd::{compute_spd, SpdMatrix, SPD_CAP, SPD_VOCAB, UNREACHABLE_CODE};

use thiserror::Error;

/// Atom-type vocabulary (codes are atomic numbers, 0 = unknown).
pub const ATOM_TYPE_VOCAB: usize = 119;
pub const CHIRALITY_VOCAB: usize = 6;
pub const DEGREE_VOCAB: usize = 11;
pub const FORMAL_CHARGE_VOCAB: usize = 11;
pub const NUM_H_VOCAB: usize = 9;
pub const RADICAL_VOCAB: usize = 5;
pub const HYBRIDIZATION_VOCAB: usize = 5;
pub const BINARY_VOCAB: usize = 2;
/// 0 = no bond, then SINGLE, DOUBLE, TRIPLE, AROMATIC.
pub const BOND_TYPE_VOCAB: usize = 5;
/// NONE, Z, E, CIS, TRANS, ANY.
pub const BOND_STEREO_VOCAB: usize = 6;

pub type Coord = [f64; 3];

#[derive(Debug, Error)]
pub enum MolError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {field} code {value} outside vocabulary [0, {vocab})")]
    Range {
        line: usize,
        field: &'static str,
        value: i64,
        vocab: usize,
    },
    #[error("line {line}: inconsistent molecule: {message}")]
    Inconsistent { line: usize, message: String },
    #[error("coordinates must be finite")]
    NonFinite,
    #[error("point sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One molecule with its 2D features and a 3D conformation.
///
/// Pairwise matrices are stored row-major as `n * n` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MolecularGraph {
    pub mol_id: String,
    pub scaffold_id: String,
    pub atom_token: Vec<u8>,
    pub chirality: Vec<u8>,
    pub degree: Vec<u8>,
    pub formal_charge: Vec<u8>,
    pub num_h: Vec<u8>,
    pub radical_e: Vec<u8>,
    pub hybridization: Vec<u8>,
    pub aromatic: Vec<u8>,
    pub in_ring: Vec<u8>,
    pub bond_type: Vec<u8>,
    pub bond_stereo: Vec<u8>,
    pub bond_conj: Vec<u8>,
    pub coords: Vec<Coord>,
}

impl MolecularGraph {
    pub fn num_atoms(&self) -> usize {
        self.atom_token.len()
    }

    #[inline]
    pub fn bond(&self, i: usize, j: usize) -> u8 {
        self.bond_type[i * self.num_atoms() + j]
    }

    /// Neighbours of atom `i` over bonds of any type.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.num_atoms();
        (0..n).filter(move |&j| self.bond_type[i * n + j] != 0)
    }

    /// The seven atomic sub-features in embedding order.
    pub fn atomic_features(&self) -> [&[u8]; 7] {
        [
            &self.chirality,
            &self.formal_charge,
            &self.num_h,
            &self.radical_e,
            &self.hybridization,
            &self.aromatic,
            &self.in_ring,
        ]
    }

    /// Checks every structural invariant; `line` is used for error reporting.
    pub fn validate(&self, line: usize) -> Result<(), MolError> {
        let n = self.num_atoms();
        if n == 0 {
            return Err(MolError::Inconsistent {
                line,
                message: "molecule has no atoms".into(),
            });
        }
        let per_atom: [(&'static str, &[u8], usize); 9] = [
            ("atom_token", &self.atom_token, ATOM_TYPE_VOCAB),
            ("chirality", &self.chirality, CHIRALITY_VOCAB),
            ("degree", &self.degree, DEGREE_VOCAB),
            ("formal_charge", &self.formal_charge, FORMAL_CHARGE_VOCAB),
            ("num_h", &self.num_h, NUM_H_VOCAB),
            ("radical_e", &self.radical_e, RADICAL_VOCAB),
            ("hybridization", &self.hybridization, HYBRIDIZATION_VOCAB),
            ("aromatic", &self.aromatic, BINARY_VOCAB),
            ("in_ring", &self.in_ring, BINARY_VOCAB),
        ];
        for (field, values, vocab) in per_atom {
            if values.len() != n {
                return Err(MolError::Inconsistent {
                    line,
                    message: format!("{field} has {} entries, expected {n}", values.len()),
                });
            }
            if let Some(&v) = values.iter().find(|&&v| v as usize >= vocab) {
                return Err(MolError::Range {
                    line,
                    field,
                    value: v as i64,
                    vocab,
                });
            }
        }
        if self.coords.len() != n {
            return Err(MolError::Inconsistent {
                line,
                message: format!("coords has {} entries, expected {n}", self.coords.len()),
            });
        }
        if self.coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(MolError::NonFinite);
        }
        let pair: [(&'static str, &[u8], usize); 3] = [
            ("bond_type", &self.bond_type, BOND_TYPE_VOCAB),
            ("bond_stereo", &self.bond_stereo, BOND_STEREO_VOCAB),
            ("bond_conj", &self.bond_conj, BINARY_VOCAB),
        ];
        for (field, values, vocab) in pair {
            if values.len() != n * n {
                return Err(MolError::Inconsistent {
                    line,
                    message: format!("{field} is not {n}x{n}"),
                });
            }
            for i in 0..n {
                for j in 0..n {
                    let v = values[i * n + j];
                    if v as usize >= vocab {
                        return Err(MolError::Range {
                            line,
                            field,
                            value: v as i64,
                            vocab,
                        });
                    }
                    if v != values[j * n + i] {
                        return Err(MolError::Inconsistent {
                            line,
                            message: format!("{field} not symmetric at ({i}, {j})"),
                        });
                    }
                }
            }
        }
        for i in 0..n {
            if self.bond(i, i) != 0 {
                return Err(MolError::Inconsistent {
                    line,
                    message: format!("self bond on atom {i}"),
                });
            }
            let bonded = self.neighbors(i).count().min(DEGREE_VOCAB - 1);
            if self.degree[i] as usize != bonded {
                return Err(MolError::Inconsistent {
                    line,
                    message: format!(
                        "degree of atom {i} is {} but bond matrix gives {bonded}",
                        self.degree[i]
                    ),
                });
            }
        }
        Ok(())
    }

    /// Relabels atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> MolecularGraph {
        let n = self.num_atoms();
        assert_eq!(perm.len(), n, "permutation length");
        let atoms = |v: &[u8]| perm.iter().map(|&p| v[p]).collect::<Vec<_>>();
        let pairs = |v: &[u8]| {
            let mut out = vec![0u8; n * n];
            for a in 0..n {
                for b in 0..n {
                    out[a * n + b] = v[perm[a] * n + perm[b]];
                }
            }
            out
        };
        MolecularGraph {
            mol_id: self.mol_id.clone(),
            scaffold_id: self.scaffold_id.clone(),
            atom_token: atoms(&self.atom_token),
            chirality: atoms(&self.chirality),
            degree: atoms(&self.degree),
            formal_charge: atoms(&self.formal_charge),
            num_h: atoms(&self.num_h),
            radical_e: atoms(&self.radical_e),
            hybridization: atoms(&self.hybridization),
            aromatic: atoms(&self.aromatic),
            in_ring: atoms(&self.in_ring),
            bond_type: pairs(&self.bond_type),
            bond_stereo: pairs(&self.bond_stereo),
            bond_conj: pairs(&self.bond_conj),
            coords: perm.iter().map(|&p| self.coords[p]).collect(),
        }
    }

    /// Same molecule with every coordinate shifted by `t`.
    pub fn translated(&self, t: Coord) -> MolecularGraph {
        let mut g = self.clone();
        for c in &mut g.coords {
            for k in 0..3 {
                c[k] += t[k];
            }
        }
        g
    }
}
