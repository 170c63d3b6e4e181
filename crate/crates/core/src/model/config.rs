use super::{ModelError, PAIR_TYPE_BUCKETS, TOKEN_VOCAB};
use crate::molgraph::{
    BINARY_VOCAB, BOND_STEREO_VOCAB, BOND_TYPE_VOCAB, CHIRALITY_VOCAB, DEGREE_VOCAB,
    FORMAL_CHARGE_VOCAB, HYBRIDIZATION_VOCAB, NUM_H_VOCAB, RADICAL_VOCAB, SPD_VOCAB,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub pair_dim: usize,
    pub pair_hidden: usize,
    pub ffn_dim: usize,
    pub gaussian_kernels: usize,
    pub spd_vocab: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// Named presets with their nominal parameter counts.
pub const PRESETS: &[(&str, f64)] = &[
    ("42M", 42e6),
    ("84M", 84e6),
    ("164M", 164e6),
    ("310M", 310e6),
    ("570M", 570e6),
    ("1.1B", 1.1e9),
];

impl ModelConfig {
    fn sized(layers: usize, embed_dim: usize, heads: usize, ffn_dim: usize) -> Self {
        ModelConfig {
            layers,
            embed_dim,
            heads,
            pair_dim: 512,
            pair_hidden: 64,
            ffn_dim,
            gaussian_kernels: 16,
            spd_vocab: SPD_VOCAB,
            learning_rate: 1e-4,
            batch_size: 1024,
        }
    }

    /// Two layers, d = 16; small enough for finite differences and smoke runs.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            embed_dim: 16,
            heads: 2,
            pair_dim: 8,
            pair_hidden: 4,
            ffn_dim: 16,
            gaussian_kernels: 16,
            spd_vocab: SPD_VOCAB,
            learning_rate: 1e-4,
            batch_size: 1024,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        Ok(match name.to_ascii_uppercase().as_str() {
            "TINY" => Self::tiny(),
            "42M" => Self::sized(6, 768, 48, 768),
            "84M" => Self::sized(12, 768, 48, 768),
            "164M" => Self::sized(24, 768, 48, 768),
            "310M" => Self::sized(32, 1024, 64, 1024),
            "570M" => Self::sized(32, 1536, 96, 1536),
            "1.1B" => Self::sized(64, 1536, 96, 1536),
            _ => return Err(ModelError::UnknownPreset(name.to_string())),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("pair_dim", self.pair_dim),
            ("pair_hidden", self.pair_hidden),
            ("ffn_dim", self.ffn_dim),
            ("gaussian_kernels", self.gaussian_kernels),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!(
                "{name} must be at least 1"
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.spd_vocab != SPD_VOCAB {
            return Err(ModelError::InvalidConfig(format!(
                "spd_vocab must be {SPD_VOCAB}"
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Every learnable tensor: name, shape and initialiser, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, h, dp, dt, ff, k) = (
            self.embed_dim,
            self.heads,
            self.pair_dim,
            self.pair_hidden,
            self.ffn_dim,
            self.gaussian_kernels,
        );
        let mut s = SpecList(Vec::new());

        s.table("embed.token", TOKEN_VOCAB, d);
        s.table("embed.degree", DEGREE_VOCAB, d);
        for (name, vocab) in ATOMIC_TABLES {
            s.table(&format!("embed.atomic.{name}"), vocab, d);
        }
        s.push("embed.atomic_mask", vec![d], Init::Normal(1.0));
        s.table("embed.bond.type", BOND_TYPE_VOCAB, dp);
        s.table("embed.bond.stereo", BOND_STEREO_VOCAB, dp);
        s.table("embed.bond.conj", BINARY_VOCAB, dp);
        s.push("embed.bond_mask", vec![dp], Init::Normal(1.0));
        s.table("embed.spd", self.spd_vocab, dp);
        s.push("embed.spd_mask", vec![dp], Init::Normal(1.0));
        s.push(
            "embed.gauss.mul",
            vec![PAIR_TYPE_BUCKETS, 1],
            Init::Const(1.0),
        );
        s.push(
            "embed.gauss.bias",
            vec![PAIR_TYPE_BUCKETS, 1],
            Init::Const(0.0),
        );
        s.push("embed.gauss.mu", vec![k], Init::Uniform(0.0, 6.0));
        s.push("embed.gauss.sigma", vec![k], Init::Uniform(0.5, 3.0));
        s.linear("embed.gauss.proj", k, dp, true);

        for l in 0..self.layers {
            let b = format!("blocks.{l}");
            s.norm(&format!("{b}.attn_ln"), d);
            for proj in ["q", "k", "v", "o"] {
                s.linear(&format!("{b}.attn.{proj}"), d, d, true);
            }
            s.norm(&format!("{b}.attn.pair_ln"), dp);
            s.linear(&format!("{b}.attn.pair_bias"), dp, h, true);
            s.norm(&format!("{b}.ffn_ln"), d);
            s.linear(&format!("{b}.ffn.fc1"), d, ff, true);
            s.linear(&format!("{b}.ffn.fc2"), ff, d, true);

            s.norm(&format!("{b}.opm_ln"), d);
            s.linear(&format!("{b}.opm.a"), d, dt, true);
            s.linear(&format!("{b}.opm.b"), d, dt, true);
            s.linear(&format!("{b}.opm.out"), dt * dt, dp, true);

            s.norm(&format!("{b}.tri_ln"), dp);
            for dir in ["out", "in"] {
                for proj in ["w1", "g1", "w2", "g2"] {
                    s.linear(&format!("{b}.tri.{dir}_{proj}"), dp, dt, true);
                }
            }
            s.norm(&format!("{b}.tri.out_ln"), dt);
            s.linear(&format!("{b}.tri.w3"), dt, dp, true);
            s.linear(&format!("{b}.tri.g3"), dp, dp, true);

            s.norm(&format!("{b}.pair_ffn_ln"), dp);
            s.linear(&format!("{b}.pair_ffn.fc1"), dp, dp, true);
            s.linear(&format!("{b}.pair_ffn.fc2"), dp, dp, true);
        }

        s.norm("lm_head.ln", d);
        s.linear("lm_head.out", d, TOKEN_VOCAB, true);

        s.norm("pos_head.x_ln", d);
        s.norm("pos_head.p_ln", dp);
        for proj in ["q", "k", "v"] {
            s.linear(&format!("pos_head.{proj}"), d, d, true);
        }
        s.linear("pos_head.pair_bias", dp, h, true);
        s.linear("pos_head.fc1", d, d, false);
        s.push("pos_head.fc2.weight", vec![d, 1], Init::Const(0.0));
        s.0
    }

    /// Scalar parameter count, without allocating.
    pub fn num_params(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }
}

pub(crate) const ATOMIC_TABLES: [(&str, usize); 7] = [
    ("chirality", CHIRALITY_VOCAB),
    ("formal_charge", FORMAL_CHARGE_VOCAB),
    ("num_h", NUM_H_VOCAB),
    ("radical", RADICAL_VOCAB),
    ("hybridization", HYBRIDIZATION_VOCAB),
    ("aromatic", BINARY_VOCAB),
    ("in_ring", BINARY_VOCAB),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Uniform(f64, f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct SpecList(Vec<ParamSpec>);

impl SpecList {
    fn push(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        self.0.push(ParamSpec {
            name: name.to_string(),
            shape,
            init,
        });
    }

    fn table(&mut self, name: &str, rows: usize, dim: usize) {
        self.push(name, vec![rows, dim], Init::Normal(1.0));
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.push(&format!("{name}.gain"), vec![dim], Init::Const(1.0));
        self.push(&format!("{name}.bias"), vec![dim], Init::Const(0.0));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.push(
            &format!("{name}.weight"),
            vec![fan_in, fan_out],
            Init::Normal(1.0 / (fan_in as f64).sqrt()),
        );
        if bias {
            self.push(&format!("{name}.bias"), vec![fan_out], Init::Const(0.0));
        }
    }
}
