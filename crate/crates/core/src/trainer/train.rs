use super::{
    clip_gradients, lr_at, read_loss_log, AdamW, LossLog, LossLogRow, TrainConfig, TrainError,
};
use crate::diffcore::Graph;
use crate::model::{
    bundle, make_noised_sample, Batch, Checkpoint, Model, ModelConfig, ModelError, NoiseConfig,
    OPT_FIRST_MOMENT, OPT_SECOND_MOMENT,
};
use crate::molgraph::MolecularGraph;
use crate::sampler::{build_plan, plan_batches, sample_molecules, ScaffoldTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const LOSS_LOG_FILE: &str = "loss_log.csv";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where the loss log and checkpoints go; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    /// Rows produced by this call only.
    pub log: Vec<LossLogRow>,
    pub start_step: u64,
    pub final_step: u64,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step}.ckpt"))
}

/// `step_<N>.ckpt` files in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, TrainError> {
    let entries = fs::read_dir(dir).map_err(|e| ckpt_err(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| ckpt_err(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            found.push((step, path));
        }
    }
    found.sort();
    Ok(found)
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::CheckpointIo {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// FNV-1a over the seed, epoch and a tag; stable across platforms and releases.
pub fn stream_seed(seed: u64, epoch: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed
        .to_le_bytes()
        .iter()
        .chain(&epoch.to_le_bytes())
        .chain(tag.as_bytes())
    {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Endless sequence of batches: each epoch draws `dataset.len()` molecules
/// through the scaffold sampler and packs them under the token budget.
struct BatchStream<'a> {
    dataset: &'a [MolecularGraph],
    table: ScaffoldTable,
    index: HashMap<&'a str, usize>,
    cfg: &'a TrainConfig,
    epoch: u64,
    queue: VecDeque<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    fn new(dataset: &'a [MolecularGraph], cfg: &'a TrainConfig) -> Self {
        BatchStream {
            dataset,
            table: ScaffoldTable::from_molecules(dataset),
            index: dataset
                .iter()
                .enumerate()
                .map(|(i, m)| (m.mol_id.as_str(), i))
                .collect(),
            cfg,
            epoch: 0,
            queue: VecDeque::new(),
        }
    }

    fn next_batch(&mut self) -> Result<(u64, Vec<usize>), TrainError> {
        while self.queue.is_empty() {
            self.epoch += 1;
            let (seed, epoch) = (self.cfg.seed, self.epoch);
            let plan = build_plan(
                &self.table,
                self.cfg.tau,
                stream_seed(seed, epoch, "sample"),
            )?;
            let picked: Vec<usize> = sample_molecules(&plan, &self.table, self.dataset.len())?
                .iter()
                .map(|id| self.index[id.as_str()])
                .collect();
            let lengths: Vec<usize> = picked
                .iter()
                .map(|&i| self.dataset[i].num_atoms())
                .collect();
            let batches = plan_batches(
                &lengths,
                self.cfg.token_budget,
                stream_seed(seed, epoch, "batch"),
            )?;
            self.queue = batches
                .batches
                .into_iter()
                .map(|b| b.into_iter().map(|k| picked[k]).collect())
                .collect();
        }
        Ok((self.epoch, self.queue.pop_front().expect("non-empty queue")))
    }
}

fn save_checkpoint(
    dir: &Path,
    step: u64,
    model: &Model<f32>,
    opt: &AdamW<f32>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let meta = serde_json::json!({ "step": step, "adam_t": opt.t, "train": cfg });
    let mut ckpt = model.to_checkpoint(meta);
    for (p, (m, v)) in model.params.iter().zip(opt.m.iter().zip(&opt.v)) {
        ckpt.tensors
            .push((format!("{OPT_FIRST_MOMENT}{}", p.name), m.clone()));
        ckpt.tensors
            .push((format!("{OPT_SECOND_MOMENT}{}", p.name), v.clone()));
    }
    let path = checkpoint_path(dir, step);
    ckpt.save(&path).map_err(|e| ckpt_err(&path, e))?;
    let existing = list_checkpoints(dir)?;
    let excess = existing.len().saturating_sub(cfg.checkpoint_keep);
    for (_, old) in &existing[..excess] {
        fs::remove_file(old).map_err(|e| ckpt_err(old, e))?;
    }
    Ok(())
}

fn restore(
    path: &Path,
    model_cfg: &ModelConfig,
) -> Result<(u64, Model<f32>, AdamW<f32>), TrainError> {
    let ckpt = Checkpoint::load(path).map_err(|e| ckpt_err(path, e))?;
    if &ckpt.config != model_cfg {
        return Err(ModelError::ConfigMismatch(format!(
            "{} was written with a different model config",
            path.display()
        ))
        .into());
    }
    let field = |key: &str| {
        ckpt.meta
            .get(key)
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| ckpt_err(path, format!("metadata lacks {key}")))
    };
    let (step, t) = (field("step")?, field("adam_t")?);
    let model = Model::from_checkpoint(&ckpt)?;
    let moment = |prefix: &str, name: &str| {
        ckpt.tensor(&format!("{prefix}{name}"))
            .cloned()
            .ok_or_else(|| ckpt_err(path, format!("missing optimizer state for {name}")))
    };
    let mut opt = AdamW::new(&model.params);
    for (i, p) in model.params.iter().enumerate() {
        opt.m[i] = moment(OPT_FIRST_MOMENT, &p.name)?;
        opt.v[i] = moment(OPT_SECOND_MOMENT, &p.name)?;
    }
    opt.t = t;
    Ok((step, model, opt))
}

/// Runs steps `start + 1 ..= total_steps`, where `start` is 0 or the resumed
/// checkpoint's step. Deterministic for a given seed.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[MolecularGraph],
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(m) = dataset.iter().find(|m| m.num_atoms() == 0) {
        return Err(ModelError::EmptyMolecule(m.mol_id.clone()).into());
    }
    let (start, mut model, mut opt) = match &opts.resume {
        Some(path) => restore(path, model_cfg)?,
        None => {
            let model = Model::<f32>::init(model_cfg.clone(), cfg.seed)?;
            let opt = AdamW::new(&model.params);
            (0, model, opt)
        }
    };
    let mut outcome_log = Vec::new();
    if start >= cfg.total_steps {
        return Ok(TrainOutcome {
            model,
            optimizer: opt,
            log: outcome_log,
            start_step: start,
            final_step: start,
        });
    }

    let mut log = match &opts.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| ckpt_err(dir, e))?;
            let path = dir.join(LOSS_LOG_FILE);
            let prior: Vec<LossLogRow> = if start > 0 && path.exists() {
                read_loss_log(&path)?
                    .into_iter()
                    .filter(|r| r.step <= start)
                    .collect()
            } else {
                Vec::new()
            };
            Some(LossLog::create(&path, &prior)?)
        }
        None => None,
    };

    let mut stream = BatchStream::new(dataset, cfg);
    for _ in 0..start {
        stream.next_batch()?;
    }
    let params_millions = model.params.num_scalars() as f64 / 1e6;
    let clock = Instant::now();
    for step in start + 1..=cfg.total_steps {
        let (epoch, members) = stream.next_batch()?;
        let samples = members
            .iter()
            .map(|&i| {
                let mol = &dataset[i];
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch, &mol.mol_id));
                make_noised_sample(mol, &mut rng, &opts.noise)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let batch = Batch::<f32>::new(&samples);

        model.params.zero_grad();
        let losses = {
            let g = Graph::new();
            let out = model.forward(&g, &batch)?;
            let vars = model.losses(&g, &batch, &out)?;
            let grads = g.backward(vars.total).map_err(ModelError::from)?;
            grads.accumulate_into(&mut model.params);
            bundle(&g, &vars)
        };
        clip_gradients(&mut model.params, cfg.clip_norm);
        let lr = lr_at(step, cfg);
        opt.step(&mut model.params, lr, cfg)?;

        if step % cfg.log_every == 0 {
            let row = LossLogRow {
                step,
                loss_total: losses.loss_total,
                loss_atom: losses.loss_atom,
                loss_coor: losses.loss_coor,
                loss_distance: losses.loss_distance,
                lr,
                params_millions,
                wall_ms: clock.elapsed().as_millis() as u64,
            };
            if let Some(log) = log.as_mut() {
                log.push(&row)?;
            }
            outcome_log.push(row);
        }
        if let Some(dir) = &opts.run_dir {
            if step % cfg.checkpoint_every == 0 || step == cfg.total_steps {
                save_checkpoint(dir, step, &model, &opt, cfg)?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        log: outcome_log,
        start_step: start,
        final_step: cfg.total_steps,
    })
}
