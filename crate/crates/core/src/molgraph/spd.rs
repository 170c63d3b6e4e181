//! Shortest-path (hop count) matrix over the bond graph.

use super::MolecularGraph;

/// Hop counts above this are clamped.
pub const SPD_CAP: u8 = 20;
/// Bucket for atom pairs in different connected components.
pub const UNREACHABLE_CODE: u8 = SPD_CAP + 1;
/// Embedding rows needed for SPD codes: `0..=SPD_CAP` plus the unreachable bucket.
pub const SPD_VOCAB: usize = SPD_CAP as usize + 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpdMatrix {
    pub n: usize,
    pub spd: Vec<u8>,
}

impl SpdMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.spd[i * self.n + j]
    }
}

/// All-pairs hop distances by Floyd-Warshall over unit-weight bonds.
pub fn compute_spd(g: &MolecularGraph) -> SpdMatrix {
    let n = g.num_atoms();
    const INF: u32 = u32::MAX / 2;
    let mut d = vec![INF; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
        for j in g.neighbors(i) {
            d[i * n + j] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[i * n + k];
            if dik == INF {
                continue;
            }
            for j in 0..n {
                let through = dik + d[k * n + j];
                if through < d[i * n + j] {
                    d[i * n + j] = through;
                }
            }
        }
    }
    let spd = d
        .into_iter()
        .map(|h| {
            if h == INF {
                UNREACHABLE_CODE
            } else {
                h.min(SPD_CAP as u32) as u8
            }
        })
        .collect();
    SpdMatrix { n, spd }
}
