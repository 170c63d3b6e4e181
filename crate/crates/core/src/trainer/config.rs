use super::TrainError;
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Upper bound on `molecules * padded_atoms` per batch.
    pub token_budget: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub checkpoint_keep: usize,
    pub log_every: u64,
    /// Scaffold sampling temperature.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
            betas: (0.9, 0.99),
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            token_budget: 512,
            seed: 0,
            checkpoint_every: 1000,
            checkpoint_keep: 10,
            log_every: 10,
            tau: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be below total_steps");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.eps)
            || self.weight_decay < 0.0
            || !positive(self.clip_norm)
            || !positive(self.tau)
        {
            return bad("eps, clip_norm and tau must be positive; weight_decay non-negative");
        }
        if self.token_budget == 0
            || self.checkpoint_every == 0
            || self.checkpoint_keep == 0
            || self.log_every == 0
        {
            return bad(
                "token_budget, checkpoint_every, checkpoint_keep and log_every must be positive",
            );
        }
        Ok(())
    }
}

/// Model and training settings read from one `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, TrainError> {
    raw.parse().map_err(|_| TrainError::BadValue {
        key: key.to_string(),
        value: raw.to_string(),
    })
}

impl RunConfig {
    /// `#` starts a comment. `preset` (default `tiny`) is applied first, then
    /// every other key overrides one field. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig, TrainError> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Syntax {
                line: lineno + 1,
                text: line.to_string(),
            })?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(TrainError::DuplicateKey(k));
            }
        }
        let mut model =
            ModelConfig::preset(entries.get("preset").map(String::as_str).unwrap_or("tiny"))?;
        let mut train = TrainConfig::default();
        for (k, raw) in &entries {
            let raw = raw.as_str();
            match k.as_str() {
                "preset" => {}
                "layers" => model.layers = value(k, raw)?,
                "embed_dim" => model.embed_dim = value(k, raw)?,
                "heads" => model.heads = value(k, raw)?,
                "pair_dim" => model.pair_dim = value(k, raw)?,
                "pair_hidden" => model.pair_hidden = value(k, raw)?,
                "ffn_dim" => model.ffn_dim = value(k, raw)?,
                "gaussian_kernels" => model.gaussian_kernels = value(k, raw)?,
                "peak_lr" => train.peak_lr = value(k, raw)?,
                "warmup_steps" => train.warmup_steps = value(k, raw)?,
                "total_steps" => train.total_steps = value(k, raw)?,
                "betas" => {
                    let (a, b) = raw.split_once(',').ok_or_else(|| TrainError::BadValue {
                        key: k.clone(),
                        value: raw.to_string(),
                    })?;
                    train.betas = (value(k, a.trim())?, value(k, b.trim())?);
                }
                "eps" => train.eps = value(k, raw)?,
                "weight_decay" => train.weight_decay = value(k, raw)?,
                "clip_norm" => train.clip_norm = value(k, raw)?,
                "token_budget" => train.token_budget = value(k, raw)?,
                "seed" => train.seed = value(k, raw)?,
                "checkpoint_every" => train.checkpoint_every = value(k, raw)?,
                "checkpoint_keep" => train.checkpoint_keep = value(k, raw)?,
                "log_every" => train.log_every = value(k, raw)?,
                "tau" => train.tau = value(k, raw)?,
                _ => return Err(TrainError::UnknownKey(k.clone())),
            }
        }
        model.learning_rate = train.peak_lr;
        model.validate()?;
        train.validate()?;
        Ok(RunConfig { model, train })
    }

    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        format!(
            "layers = {}\nembed_dim = {}\nheads = {}\npair_dim = {}\npair_hidden = {}\nffn_dim = {}\n\
             gaussian_kernels = {}\npeak_lr = {}\nwarmup_steps = {}\ntotal_steps = {}\nbetas = {}, {}\n\
             eps = {}\nweight_decay = {}\nclip_norm = {}\ntoken_budget = {}\nseed = {}\n\
             checkpoint_every = {}\ncheckpoint_keep = {}\nlog_every = {}\ntau = {}\n",
            m.layers,
            m.embed_dim,
            m.heads,
            m.pair_dim,
            m.pair_hidden,
            m.ffn_dim,
            m.gaussian_kernels,
            t.peak_lr,
            t.warmup_steps,
            t.total_steps,
            t.betas.0,
            t.betas.1,
            t.eps,
            t.weight_decay,
            t.clip_norm,
            t.token_budget,
            t.seed,
            t.checkpoint_every,
            t.checkpoint_keep,
            t.log_every,
            t.tau
        )
    }
}
