//! Scaffold-balanced molecule sampling and padded-token dynamic batching.
//!
//! Scaffold `i` with `N_i` member molecules gets frequency `P_i = N_i / sum N`
//! and sampling probability `softmax(P / tau)_i`. Small `tau` sharpens toward
//! frequent scaffolds, large `tau` flattens toward uniform.

mod batching;
mod table;

pub use batching::{plan_batches, BatchPlan};
pub use table::{ScaffoldEntry, ScaffoldTable};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("scaffold table is empty")]
    EmptyTable,
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("duplicate scaffold id {0}")]
    DuplicateScaffold(String),
    #[error("scaffold {id}: count {count} but {members} member ids")]
    CountMismatch {
        id: String,
        count: usize,
        members: usize,
    },
    #[error("molecule {index} has {len} atoms, above the token budget {budget}")]
    MoleculeTooLarge {
        index: usize,
        len: usize,
        budget: usize,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-scaffold sampling probabilities for one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub probs: Vec<f64>,
    pub tau: f64,
    pub seed: u64,
}

pub fn build_plan(
    table: &ScaffoldTable,
    tau: f64,
    seed: u64,
) -> Result<SamplingPlan, SamplerError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(SamplerError::InvalidTau(tau));
    }
    if table.is_empty() {
        return Err(SamplerError::EmptyTable);
    }
    let total: f64 = table.entries().iter().map(|e| e.count as f64).sum();
    let logits: Vec<f64> = table
        .entries()
        .iter()
        .map(|e| (e.count as f64 / total) / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(SamplingPlan {
        probs: exps.into_iter().map(|e| e / z).collect(),
        tau,
        seed,
    })
}

#[derive(Serialize)]
struct PlanExport<'a> {
    tau: f64,
    seed: u64,
    probabilities: Vec<ScaffoldProb<'a>>,
}

#[derive(Serialize)]
struct ScaffoldProb<'a> {
    scaffold_id: &'a str,
    probability: f64,
}

impl SamplingPlan {
    /// JSON export: `{"tau", "seed", "probabilities": [{"scaffold_id", "probability"}]}`.
    pub fn to_json(&self, table: &ScaffoldTable) -> String {
        let export = PlanExport {
            tau: self.tau,
            seed: self.seed,
            probabilities: table
                .entries()
                .iter()
                .zip(&self.probs)
                .map(|(e, &p)| ScaffoldProb {
                    scaffold_id: &e.scaffold_id,
                    probability: p,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&export).expect("plan serialises")
    }
}

/// Seeded two-stage sampler: scaffold by plan probability (with replacement),
/// then a member molecule uniformly within it.
pub struct MoleculeSampler<'a> {
    table: &'a ScaffoldTable,
    scaffold_dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl<'a> MoleculeSampler<'a> {
    pub fn new(plan: &SamplingPlan, table: &'a ScaffoldTable) -> Result<Self, SamplerError> {
        if table.is_empty() || plan.probs.len() != table.len() {
            return Err(SamplerError::EmptyTable);
        }
        let scaffold_dist =
            WeightedIndex::new(&plan.probs).map_err(|_| SamplerError::EmptyTable)?;
        Ok(MoleculeSampler {
            table,
            scaffold_dist,
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
        })
    }

    /// One draw as `(scaffold index, member index)`.
    pub fn draw(&mut self) -> (usize, usize) {
        let s = self.scaffold_dist.sample(&mut self.rng);
        let members = &self.table.entries()[s].members;
        (s, self.rng.random_range(0..members.len()))
    }

    pub fn sample(&mut self, k: usize) -> Vec<&'a str> {
        (0..k)
            .map(|_| {
                let (s, m) = self.draw();
                self.table.entries()[s].members[m].as_str()
            })
            .collect()
    }
}

pub fn sample_molecules(
    plan: &SamplingPlan,
    table: &ScaffoldTable,
    k: usize,
) -> Result<Vec<String>, SamplerError> {
    let mut sampler = MoleculeSampler::new(plan, table)?;
    Ok(sampler.sample(k).into_iter().map(str::to_string).collect())
}
