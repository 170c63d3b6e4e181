use super::config::{Init, ATOMIC_TABLES};
use super::{Batch, ModelConfig, ModelError, IGNORE_INDEX, TOKEN_VOCAB};
use crate::diffcore::{Graph, ParamStore, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

const LN_EPS: f64 = 1e-5;
const SIGMA_FLOOR: f64 = 0.01;

/// Parameters plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub atom: Var,
    pub pair: Var,
    /// `[B * n, TOKEN_VOCAB]`
    pub logits: Var,
    /// `[B, n, 3]`
    pub coords: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub atom: Var,
    pub pair: Var,
    /// `[B, heads, n, n]`
    pub attention: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub atom: Var,
    pub coor: Var,
    pub distance: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub loss_atom: f64,
    pub loss_coor: f64,
    pub loss_distance: f64,
    pub loss_total: f64,
}

impl LossBundle {
    pub fn new(loss_atom: f64, loss_coor: f64, loss_distance: f64) -> Self {
        LossBundle {
            loss_atom,
            loss_coor,
            loss_distance,
            loss_total: loss_atom + loss_coor + loss_distance,
        }
    }
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in config.param_specs() {
            let value = Tensor::from_fn(&spec.shape, |_| {
                T::of(match spec.init {
                    Init::Normal(std) => std * rng.sample::<f64, _>(StandardNormal),
                    Init::Uniform(lo, hi) => rng.random_range(lo..hi),
                    Init::Const(v) => v,
                })
            });
            params.add(spec.name, value)?;
        }
        Ok(Model { config, params })
    }

    /// Wraps an existing store after checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let id = params.id(&spec.name).ok_or_else(|| {
                ModelError::ConfigMismatch(format!("missing parameter {}", spec.name))
            })?;
            let found = params.get(id).value.shape();
            if found != spec.shape.as_slice() {
                return Err(ModelError::ConfigMismatch(format!(
                    "{}: expected shape {:?}, found {:?}",
                    spec.name, spec.shape, found
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Sets every parameter under `prefix` to zero.
    pub fn zero_params(&mut self, prefix: &str) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.name.starts_with(prefix))
        {
            p.value.fill(T::zero());
        }
    }

    fn ctx<'a>(&'a self, g: &'a Graph<T>) -> Ctx<'a, T> {
        Ctx {
            g,
            store: &self.params,
        }
    }

    /// Token, degree and atomic-feature embeddings: `[B, n, d]`.
    pub fn embed_atoms(&self, g: &Graph<T>, batch: &Batch<T>) -> Result<Var, ModelError> {
        let c = self.ctx(g);
        let shape = [batch.size, batch.max_atoms];
        let token = c.lookup("embed.token", &batch.tokens, &shape)?;
        let degree = c.lookup("embed.degree", &batch.degree, &shape)?;
        let mut atomic: Option<Var> = None;
        for ((name, _), ids) in ATOMIC_TABLES.iter().zip(&batch.atomic) {
            let e = c.lookup(&format!("embed.atomic.{name}"), ids, &shape)?;
            atomic = Some(match atomic {
                None => e,
                Some(acc) => g.add(acc, e)?,
            });
        }
        let atomic = atomic.expect("seven atomic tables");
        let atomic = c.masked_group(
            atomic,
            "embed.atomic_mask",
            &batch.atomic_keep,
            &batch.atomic_masked,
        )?;
        let x = g.add(token, degree)?;
        Ok(g.add(x, atomic)?)
    }

    /// Bond, hop-distance and Gaussian distance embeddings: `[B, n, n, d_p]`.
    pub fn embed_pairs(&self, g: &Graph<T>, batch: &Batch<T>) -> Result<Var, ModelError> {
        let c = self.ctx(g);
        let (b, n) = (batch.size, batch.max_atoms);
        let shape = [b, n, n];
        let bond = g.add(
            g.add(
                c.lookup("embed.bond.type", &batch.bond_type, &shape)?,
                c.lookup("embed.bond.stereo", &batch.bond_stereo, &shape)?,
            )?,
            c.lookup("embed.bond.conj", &batch.bond_conj, &shape)?,
        )?;
        let bond = c.masked_group(
            bond,
            "embed.bond_mask",
            &batch.bond_keep,
            &batch.bond_masked,
        )?;
        let spd = c.lookup("embed.spd", &batch.spd, &shape)?;
        let spd = c.masked_group(spd, "embed.spd_mask", &batch.spd_keep, &batch.spd_masked)?;

        let mul = g.reshape(
            c.lookup("embed.gauss.mul", &batch.pair_type, &shape)?,
            &shape,
        )?;
        let bias = g.reshape(
            c.lookup("embed.gauss.bias", &batch.pair_type, &shape)?,
            &shape,
        )?;
        let dist = g.constant(batch.noised_dist.clone());
        let scaled = g.add(g.mul(dist, mul)?, bias)?;
        let sigma = g.add(
            g.abs(c.p("embed.gauss.sigma")?)?,
            g.constant(Tensor::scalar(T::of(SIGMA_FLOOR))),
        )?;
        let basis = g.gaussian_basis(scaled, c.p("embed.gauss.mu")?, sigma)?;
        let psi = c.linear(basis, "embed.gauss.proj")?;
        Ok(g.add(g.add(bond, spd)?, psi)?)
    }

    /// One two-track block with pre-norm residuals.
    pub fn forward_block(
        &self,
        g: &Graph<T>,
        batch: &Batch<T>,
        layer: usize,
        x: Var,
        p: Var,
    ) -> Result<BlockOutput, ModelError> {
        let c = self.ctx(g);
        let pre = format!("blocks.{layer}");
        let cfg = &self.config;
        let key_bias = g.constant(batch.key_bias.clone());

        let xn = c.layer_norm(x, &format!("{pre}.attn_ln"))?;
        let pn = c.layer_norm(p, &format!("{pre}.attn.pair_ln"))?;
        let bias = c.linear(pn, &format!("{pre}.attn.pair_bias"))?;
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let (ctx, attention) = c.attention(
            xn,
            &format!("{pre}.attn"),
            bias,
            key_bias,
            Some(scale),
            cfg.heads,
            None,
        )?;
        let x = g.add(x, c.linear(ctx, &format!("{pre}.attn.o"))?)?;
        let x = g.add(
            x,
            c.ffn(
                c.layer_norm(x, &format!("{pre}.ffn_ln"))?,
                &format!("{pre}.ffn"),
            )?,
        )?;

        let p = g.add(p, c.outer_product(x, &pre, cfg.pair_hidden)?)?;
        let valid = g.constant(batch.pair_valid.clone());
        let p = g.add(p, c.triangular(p, &pre, valid)?)?;
        let p = g.add(
            p,
            c.ffn(
                c.layer_norm(p, &format!("{pre}.pair_ffn_ln"))?,
                &format!("{pre}.pair_ffn"),
            )?,
        )?;
        Ok(BlockOutput {
            atom: x,
            pair: p,
            attention,
        })
    }

    /// Predicted coordinates `[B, n, 3]` from final representations.
    pub fn position_head(
        &self,
        g: &Graph<T>,
        batch: &Batch<T>,
        x: Var,
        p: Var,
    ) -> Result<Var, ModelError> {
        let c = self.ctx(g);
        let (b, n, d) = (batch.size, batch.max_atoms, self.config.embed_dim);
        let key_bias = g.constant(batch.key_bias.clone());
        let xn = c.layer_norm(x, "pos_head.x_ln")?;
        let pn = c.layer_norm(p, "pos_head.p_ln")?;
        let bias = c.linear(pn, "pos_head.pair_bias")?;
        let delta = g.constant(batch.delta_pos.clone());
        let (ctx, _) = c.attention(
            xn,
            "pos_head",
            bias,
            key_bias,
            None,
            self.config.heads,
            Some(delta),
        )?;
        // ctx: [B, n, 3, d]
        let hidden = g.gelu(g.matmul(ctx, c.p("pos_head.fc1.weight")?)?)?;
        let shift = g.matmul(hidden, c.p("pos_head.fc2.weight")?)?;
        let shift = g.reshape(shift, &[b, n, 3])?;
        debug_assert_eq!(g.shape(ctx), vec![b, n, 3, d]);
        Ok(g.add(g.constant(batch.noised.clone()), shift)?)
    }

    pub fn forward(&self, g: &Graph<T>, batch: &Batch<T>) -> Result<ForwardOutput, ModelError> {
        let mut x = self.embed_atoms(g, batch)?;
        let mut p = self.embed_pairs(g, batch)?;
        for layer in 0..self.config.layers {
            let out = self.forward_block(g, batch, layer, x, p)?;
            x = out.atom;
            p = out.pair;
        }
        let c = self.ctx(g);
        let logits = c.linear(c.layer_norm(x, "lm_head.ln")?, "lm_head.out")?;
        let logits = g.reshape(logits, &[batch.size * batch.max_atoms, TOKEN_VOCAB])?;
        let coords = self.position_head(g, batch, x, p)?;
        Ok(ForwardOutput {
            atom: x,
            pair: p,
            logits,
            coords,
        })
    }

    pub fn losses(
        &self,
        g: &Graph<T>,
        batch: &Batch<T>,
        out: &ForwardOutput,
    ) -> Result<LossVars, ModelError> {
        if batch.targets.iter().all(|&t| t == IGNORE_INDEX) {
            return Err(ModelError::NoMaskedAtoms);
        }
        let atom = g.cross_entropy(out.logits, &batch.targets, IGNORE_INDEX)?;
        let coor = g.l1_loss(out.coords, &batch.coords, &batch.coord_mask)?;
        let predicted = g.pair_distance(out.coords)?;
        let distance = g.l1_loss(predicted, &batch.distances, &batch.dist_mask)?;
        let total = g.add(g.add(atom, coor)?, distance)?;
        Ok(LossVars {
            atom,
            coor,
            distance,
            total,
        })
    }

    /// Forward pass plus losses on a fresh tape.
    pub fn evaluate(&self, batch: &Batch<T>) -> Result<LossBundle, ModelError> {
        let g = Graph::new();
        let out = self.forward(&g, batch)?;
        let l = self.losses(&g, batch, &out)?;
        Ok(bundle(&g, &l))
    }
}

/// Reads loss values off the tape, summing in the tape's own order.
pub fn bundle<T: Real>(g: &Graph<T>, l: &LossVars) -> LossBundle {
    LossBundle::new(
        g.scalar(l.atom).f64(),
        g.scalar(l.coor).f64(),
        g.scalar(l.distance).f64(),
    )
}

struct Ctx<'a, T> {
    g: &'a Graph<T>,
    store: &'a ParamStore<T>,
}

impl<T: Real> Ctx<'_, T> {
    fn p(&self, name: &str) -> Result<Var, ModelError> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| ModelError::ConfigMismatch(format!("missing parameter {name}")))?;
        Ok(self.g.param(self.store, id))
    }

    fn has(&self, name: &str) -> bool {
        self.store.id(name).is_some()
    }

    fn lookup(&self, table: &str, ids: &[usize], shape: &[usize]) -> Result<Var, ModelError> {
        Ok(self.g.embedding(self.p(table)?, ids, shape)?)
    }

    /// `x * keep + mask_vector * masked`, per molecule.
    fn masked_group(
        &self,
        x: Var,
        mask: &str,
        keep: &Tensor<T>,
        masked: &Tensor<T>,
    ) -> Result<Var, ModelError> {
        let g = self.g;
        let kept = g.mul(x, g.constant(keep.clone()))?;
        let sub = g.mul(self.p(mask)?, g.constant(masked.clone()))?;
        Ok(g.add(kept, sub)?)
    }

    fn linear(&self, x: Var, name: &str) -> Result<Var, ModelError> {
        let y = self.g.matmul(x, self.p(&format!("{name}.weight"))?)?;
        let bias = format!("{name}.bias");
        if self.has(&bias) {
            Ok(self.g.add(y, self.p(&bias)?)?)
        } else {
            Ok(y)
        }
    }

    fn layer_norm(&self, x: Var, name: &str) -> Result<Var, ModelError> {
        let axis = self.g.shape(x).len() - 1;
        let y = self.g.layer_norm(x, axis, LN_EPS)?;
        let y = self.g.mul(y, self.p(&format!("{name}.gain"))?)?;
        Ok(self.g.add(y, self.p(&format!("{name}.bias"))?)?)
    }

    fn ffn(&self, x: Var, name: &str) -> Result<Var, ModelError> {
        let h = self.g.gelu(self.linear(x, &format!("{name}.fc1"))?)?;
        self.linear(h, &format!("{name}.fc2"))
    }

    /// `[B, n, d]` to `[B, h, n, d/h]`.
    fn split_heads(&self, x: Var, heads: usize) -> Result<Var, ModelError> {
        let s = self.g.shape(x);
        let (b, n, d) = (s[0], s[1], s[2]);
        let x = self.g.reshape(x, &[b, n, heads, d / heads])?;
        Ok(self.g.permute(x, &[0, 2, 1, 3])?)
    }

    /// Multi-head attention with a per-head additive pair bias `[B, n, n, h]`.
    ///
    /// Without `delta` the result is the usual context `[B, n, d]`. With
    /// `delta: [B, n, n, 3]` each weight is multiplied by the displacement
    /// along every axis first, giving `[B, n, 3, d]`.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        xn: Var,
        name: &str,
        pair_bias: Var,
        key_bias: Var,
        scale: Option<f64>,
        heads: usize,
        delta: Option<Var>,
    ) -> Result<(Var, Var), ModelError> {
        let g = self.g;
        let s = g.shape(xn);
        let (b, n, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let q = self.split_heads(self.linear(xn, &format!("{name}.q"))?, heads)?;
        let k = self.split_heads(self.linear(xn, &format!("{name}.k"))?, heads)?;
        let v = self.split_heads(self.linear(xn, &format!("{name}.v"))?, heads)?;
        let mut logits = g.matmul(q, g.transpose(k)?)?;
        if let Some(scale) = scale {
            logits = g.scale(logits, T::of(scale))?;
        }
        logits = g.add(logits, g.permute(pair_bias, &[0, 3, 1, 2])?)?;
        logits = g.add(logits, key_bias)?;
        let attn = g.softmax(logits, 3)?;
        let ctx = match delta {
            None => {
                let ctx = g.matmul(attn, v)?;
                let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
                g.reshape(ctx, &[b, n, d])?
            }
            Some(delta) => {
                let a = g.reshape(attn, &[b, heads, n, n, 1])?;
                let dpos = g.reshape(delta, &[b, 1, n, n, 3])?;
                let w = g.permute(g.mul(a, dpos)?, &[0, 1, 2, 4, 3])?;
                let w = g.reshape(w, &[b, heads, n * 3, n])?;
                let ctx = g.reshape(g.matmul(w, v)?, &[b, heads, n, 3, dh])?;
                let ctx = g.permute(ctx, &[0, 2, 3, 1, 4])?;
                g.reshape(ctx, &[b, n, 3, d])?
            }
        };
        Ok((ctx, attn))
    }

    /// `W vec(a_i (x) b_j)` from the normalised atom track.
    fn outer_product(&self, x: Var, pre: &str, dt: usize) -> Result<Var, ModelError> {
        let g = self.g;
        let s = g.shape(x);
        let (b, n) = (s[0], s[1]);
        let xn = self.layer_norm(x, &format!("{pre}.opm_ln"))?;
        let a = g.reshape(self.linear(xn, &format!("{pre}.opm.a"))?, &[b, n, 1, dt, 1])?;
        let bb = g.reshape(self.linear(xn, &format!("{pre}.opm.b"))?, &[b, 1, n, 1, dt])?;
        let outer = g.reshape(g.mul(a, bb)?, &[b, n, n, dt * dt])?;
        self.linear(outer, &format!("{pre}.opm.out"))
    }

    /// Outgoing plus incoming multiplicative update over the third atom.
    fn triangular(&self, p: Var, pre: &str, valid: Var) -> Result<Var, ModelError> {
        let g = self.g;
        let pn = self.layer_norm(p, &format!("{pre}.tri_ln"))?;
        let gate = |w: &str, gt: &str| -> Result<Var, ModelError> {
            let value = self.linear(pn, &format!("{pre}.tri.{w}"))?;
            let gate = g.sigmoid(self.linear(pn, &format!("{pre}.tri.{gt}"))?)?;
            Ok(g.mul(g.mul(gate, value)?, valid)?)
        };
        let outgoing = g.pair_contract(gate("out_w1", "out_g1")?, gate("out_w2", "out_g2")?)?;
        let swap = [0, 2, 1, 3];
        let incoming = g.pair_contract(
            g.permute(gate("in_w1", "in_g1")?, &swap)?,
            g.permute(gate("in_w2", "in_g2")?, &swap)?,
        )?;
        let mixed = self.layer_norm(g.add(outgoing, incoming)?, &format!("{pre}.tri.out_ln"))?;
        let update = self.linear(mixed, &format!("{pre}.tri.w3"))?;
        let gate3 = g.sigmoid(self.linear(pn, &format!("{pre}.tri.g3"))?)?;
        Ok(g.mul(gate3, update)?)
    }
}
