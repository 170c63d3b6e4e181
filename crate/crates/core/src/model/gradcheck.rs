use super::{make_noised_sample, Batch, Model, ModelConfig, ModelError, NoiseConfig};
use crate::diffcore::gradcheck::{central_difference, rel_err, STEP};
use crate::diffcore::{Graph, OpKind};
use crate::molgraph::synthetic::random_dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// A small padded batch of synthetic molecules for verification runs.
pub fn verification_batch(
    seed: u64,
    molecules: usize,
    max_atoms: usize,
) -> Result<Batch<f64>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mols = random_dataset(&mut rng, molecules, molecules, 3.min(max_atoms), max_atoms);
    let samples = mols
        .iter()
        .map(|m| make_noised_sample(m, &mut rng, &NoiseConfig::default()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Batch::new(&samples))
}

/// Compares d(loss_total)/d(theta) with central differences on `samples`
/// scalars: a random tensor, then a random element of it.
pub fn check_model_gradients(
    model: &Model<f64>,
    batch: &Batch<f64>,
    samples: usize,
    seed: u64,
    corrupt: Option<OpKind>,
) -> Result<Vec<ParamCheck>, ModelError> {
    let mut g = Graph::new();
    if let Some(kind) = corrupt {
        g = g.with_corrupted_backward(kind);
    }
    let out = model.forward(&g, batch)?;
    let loss = model.losses(&g, batch, &out)?;
    let mut store = model.params.clone();
    store.zero_grad();
    g.backward(loss.total)?.accumulate_into(&mut store);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let mut checks = Vec::with_capacity(samples);
    for _ in 0..samples {
        let t = rng.random_range(0..names.len());
        let id = store.id(&names[t]).expect("known name");
        let index = rng.random_range(0..store.get(id).value.numel());
        let analytic = store.get(id).grad.data()[index];
        let original = model.params.get(id).value.data()[index];
        let mut probe = model.clone();
        let numeric = central_difference(
            |v| {
                probe.params.get_mut(id).value.data_mut()[index] = v;
                probe
                    .evaluate(batch)
                    .map(|b| b.loss_total)
                    .unwrap_or(f64::NAN)
            },
            original,
            STEP,
        );
        let err = rel_err(analytic, numeric);
        checks.push(ParamCheck {
            name: names[t].clone(),
            index,
            analytic,
            numeric,
            rel_err: if err.is_nan() { f64::INFINITY } else { err },
        });
    }
    Ok(checks)
}

/// Initialises `config` in f64 and runs [`check_model_gradients`] on a fresh batch.
pub fn check_config(
    config: &ModelConfig,
    samples: usize,
    seed: u64,
    corrupt: Option<OpKind>,
) -> Result<Vec<ParamCheck>, ModelError> {
    let mut model = Model::<f64>::init(config.clone(), seed)?;
    // Non-zero final head so every parameter receives gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    if let Some(id) = model.params.id("pos_head.fc2.weight") {
        for v in model.params.get_mut(id).value.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let batch = verification_batch(seed, 3, 7)?;
    check_model_gradients(&model, &batch, samples, seed, corrupt)
}
