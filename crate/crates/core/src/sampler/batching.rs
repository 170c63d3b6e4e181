//! Dynamic batching: pack molecules so that `count * padded_length` stays
//! within a token budget.

use super::SamplerError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    /// Molecule indices per batch.
    pub batches: Vec<Vec<usize>>,
    pub token_budget: usize,
    /// Longest molecule in each batch.
    pub max_len: Vec<usize>,
}

/// Shuffles indices, orders them by length (ties keep the shuffled order),
/// greedily fills batches under the budget, then shuffles batch order.
pub fn plan_batches(
    lengths: &[usize],
    token_budget: usize,
    seed: u64,
) -> Result<BatchPlan, SamplerError> {
    if let Some((index, &len)) = lengths.iter().enumerate().find(|(_, &l)| l > token_budget) {
        return Err(SamplerError::MoleculeTooLarge {
            index,
            len,
            budget: token_budget,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i]);

    let mut batches: Vec<(Vec<usize>, usize)> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_max = 0;
    for i in order {
        let len = lengths[i];
        let new_max = current_max.max(len);
        if !current.is_empty() && (current.len() + 1) * new_max > token_budget {
            batches.push((std::mem::take(&mut current), current_max));
            current_max = 0;
        }
        current_max = current_max.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push((current, current_max));
    }
    batches.shuffle(&mut rng);
    let (batches, max_len) = batches.into_iter().unzip();
    Ok(BatchPlan {
        batches,
        token_budget,
        max_len,
    })
}
