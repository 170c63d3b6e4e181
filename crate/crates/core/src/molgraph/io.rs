//! Line-delimited JSON dataset files, one molecule per line.

use super::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// On-disk form of a molecule. Bonds are listed once as
/// `[i, j, bond_type, stereo, conj]` with `i < j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub mol_id: String,
    pub scaffold_id: String,
    pub atom_token: Vec<i64>,
    pub chirality: Vec<i64>,
    pub degree: Vec<i64>,
    pub formal_charge: Vec<i64>,
    pub num_h: Vec<i64>,
    pub radical_e: Vec<i64>,
    pub hybridization: Vec<i64>,
    pub aromatic: Vec<i64>,
    pub in_ring: Vec<i64>,
    pub bonds: Vec<[i64; 5]>,
    pub coords: Vec<[f64; 3]>,
}

fn codes(
    line: usize,
    field: &'static str,
    values: &[i64],
    vocab: usize,
) -> Result<Vec<u8>, MolError> {
    values
        .iter()
        .map(|&v| {
            if v < 0 || v as usize >= vocab {
                Err(MolError::Range {
                    line,
                    field,
                    value: v,
                    vocab,
                })
            } else {
                Ok(v as u8)
            }
        })
        .collect()
}

impl DatasetRecord {
    pub fn from_graph(g: &MolecularGraph) -> Self {
        let n = g.num_atoms();
        let wide = |v: &[u8]| v.iter().map(|&c| c as i64).collect::<Vec<_>>();
        let mut bonds = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let k = i * n + j;
                if g.bond_type[k] != 0 || g.bond_stereo[k] != 0 || g.bond_conj[k] != 0 {
                    bonds.push([
                        i as i64,
                        j as i64,
                        g.bond_type[k] as i64,
                        g.bond_stereo[k] as i64,
                        g.bond_conj[k] as i64,
                    ]);
                }
            }
        }
        DatasetRecord {
            mol_id: g.mol_id.clone(),
            scaffold_id: g.scaffold_id.clone(),
            atom_token: wide(&g.atom_token),
            chirality: wide(&g.chirality),
            degree: wide(&g.degree),
            formal_charge: wide(&g.formal_charge),
            num_h: wide(&g.num_h),
            radical_e: wide(&g.radical_e),
            hybridization: wide(&g.hybridization),
            aromatic: wide(&g.aromatic),
            in_ring: wide(&g.in_ring),
            bonds,
            coords: g.coords.clone(),
        }
    }

    /// Converts to a validated graph; `line` is used in error messages.
    pub fn into_graph(self, line: usize) -> Result<MolecularGraph, MolError> {
        let n = self.atom_token.len();
        let mut g = MolecularGraph {
            mol_id: self.mol_id,
            scaffold_id: self.scaffold_id,
            atom_token: codes(line, "atom_token", &self.atom_token, ATOM_TYPE_VOCAB)?,
            chirality: codes(line, "chirality", &self.chirality, CHIRALITY_VOCAB)?,
            degree: codes(line, "degree", &self.degree, DEGREE_VOCAB)?,
            formal_charge: codes(
                line,
                "formal_charge",
                &self.formal_charge,
                FORMAL_CHARGE_VOCAB,
            )?,
            num_h: codes(line, "num_h", &self.num_h, NUM_H_VOCAB)?,
            radical_e: codes(line, "radical_e", &self.radical_e, RADICAL_VOCAB)?,
            hybridization: codes(
                line,
                "hybridization",
                &self.hybridization,
                HYBRIDIZATION_VOCAB,
            )?,
            aromatic: codes(line, "aromatic", &self.aromatic, BINARY_VOCAB)?,
            in_ring: codes(line, "in_ring", &self.in_ring, BINARY_VOCAB)?,
            bond_type: vec![0; n * n],
            bond_stereo: vec![0; n * n],
            bond_conj: vec![0; n * n],
            coords: self.coords,
        };
        for [i, j, kind, stereo, conj] in self.bonds {
            if i < 0 || j < 0 || i >= j || j as usize >= n {
                return Err(MolError::Inconsistent {
                    line,
                    message: format!("bond [{i}, {j}] needs 0 <= i < j < {n}"),
                });
            }
            let kind = codes(line, "bond_type", &[kind], BOND_TYPE_VOCAB)?[0];
            let stereo = codes(line, "bond_stereo", &[stereo], BOND_STEREO_VOCAB)?[0];
            let conj = codes(line, "bond_conj", &[conj], BINARY_VOCAB)?[0];
            let (i, j) = (i as usize, j as usize);
            for (a, b) in [(i, j), (j, i)] {
                g.bond_type[a * n + b] = kind;
                g.bond_stereo[a * n + b] = stereo;
                g.bond_conj[a * n + b] = conj;
            }
        }
        g.validate(line)?;
        Ok(g)
    }
}

/// Streaming reader; yields one result per non-blank line.
pub struct DatasetReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    path: String,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R, path: impl Into<String>) -> Self {
        DatasetReader {
            lines: reader.lines(),
            line_no: 0,
            path: path.into(),
        }
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<MolecularGraph, MolError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(source) => {
                    return Some(Err(MolError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line_no;
            return Some(
                serde_json::from_str::<DatasetRecord>(&line)
                    .map_err(|e| MolError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })
                    .and_then(|r| r.into_graph(line_no)),
            );
        }
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetReader<BufReader<File>>, MolError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| MolError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(DatasetReader::new(
        BufReader::new(file),
        path.display().to_string(),
    ))
}

pub fn write_dataset<'a, I>(molecules: I, path: impl AsRef<Path>) -> Result<(), MolError>
where
    I: IntoIterator<Item = &'a MolecularGraph>,
{
    let path = path.as_ref();
    let io_err = |source| MolError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for g in molecules {
        let line = serde_json::to_string(&DatasetRecord::from_graph(g)).expect("record serialises");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
