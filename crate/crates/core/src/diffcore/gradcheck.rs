//! Central finite-difference verification of the tape, in `f64`.

use super::{DiffError, Graph, OpKind, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// `(f(x + h) - f(x - h)) / 2h`
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

type Build = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var, DiffError> + Send + Sync>;

/// One primitive applied to random inputs.
pub struct PrimitiveCase {
    pub kind: OpKind,
    pub label: String,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub kind: OpKind,
    pub label: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl CheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

impl PrimitiveCase {
    fn new(
        kind: OpKind,
        label: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&Graph<f64>, &[Var]) -> Result<Var, DiffError> + Send + Sync + 'static,
    ) -> Self {
        PrimitiveCase {
            kind,
            label: label.into(),
            inputs,
            build: Box::new(build),
        }
    }

    fn forward(
        &self,
        inputs: &[Tensor<f64>],
        weights: Option<&Tensor<f64>>,
    ) -> Result<Tensor<f64>, DiffError> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = (self.build)(&g, &vars)?;
        let value = g.value(out).clone();
        if let Some(w) = weights {
            if w.shape() != value.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "gradcheck",
                    lhs: value.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
        }
        Ok(value)
    }

    /// Compares a random vector-Jacobian product against central differences
    /// of the same projection, element by element over every input.
    pub fn check(&self, seed: u64, corrupt: Option<OpKind>) -> Result<CheckReport, DiffError> {
        let probe = self.forward(&self.inputs, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Tensor::from_fn(probe.shape(), |_| rng.sample(StandardNormal));
        let project = |t: &Tensor<f64>| {
            t.data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };

        let mut g = Graph::new();
        if let Some(kind) = corrupt {
            g = g.with_corrupted_backward(kind);
        }
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (self.build)(&g, &vars)?;
        let grads = g.backward_seeded(out, weights.clone())?;

        let mut max_rel_err = 0.0f64;
        let mut checked = 0;
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.inputs[i].shape()));
            for e in 0..self.inputs[i].numel() {
                let mut perturbed = self.inputs.clone();
                let numeric = central_difference(
                    |x| {
                        perturbed[i].data_mut()[e] = x;
                        self.forward(&perturbed, Some(&weights))
                            .map(|t| project(&t))
                            .unwrap_or(f64::NAN)
                    },
                    self.inputs[i].data()[e],
                    STEP,
                );
                let err = rel_err(analytic.data()[e], numeric);
                max_rel_err = if err.is_nan() {
                    f64::INFINITY
                } else {
                    max_rel_err.max(err)
                };
                checked += 1;
            }
        }
        Ok(CheckReport {
            kind: self.kind,
            label: self.label.clone(),
            max_rel_err,
            checked,
        })
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(gap..2.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Random small-shape cases covering every [`OpKind`].
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    use OpKind::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (m, k, n, b) = (dim(1, 4), dim(1, 4), dim(1, 4), dim(2, 3));
    let (r, c) = (dim(2, 4), dim(2, 5));
    let (nn, kk, ch) = (dim(2, 4), dim(1, 3), dim(1, 3));
    let (vocab, width, basis) = (dim(3, 6), dim(1, 4), dim(2, 5));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut cases = Vec::new();

    cases.push(PrimitiveCase::new(
        MatMul,
        "matmul",
        vec![normal(&mut rng, &[m, k]), normal(&mut rng, &[k, n])],
        |g, v| g.matmul(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        MatMul,
        "matmul shared rhs",
        vec![normal(&mut rng, &[b, m, k]), normal(&mut rng, &[k, n])],
        |g, v| g.matmul(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        MatMul,
        "batched matmul",
        vec![normal(&mut rng, &[b, m, k]), normal(&mut rng, &[b, k, n])],
        |g, v| g.matmul(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        Add,
        "add",
        vec![normal(&mut rng, &[r, c]), normal(&mut rng, &[r, c])],
        |g, v| g.add(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        Add,
        "add broadcast",
        vec![normal(&mut rng, &[b, r, c]), normal(&mut rng, &[c])],
        |g, v| g.add(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        Sub,
        "sub broadcast",
        vec![normal(&mut rng, &[r, 1]), normal(&mut rng, &[r, c])],
        |g, v| g.sub(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        Mul,
        "mul",
        vec![normal(&mut rng, &[r, c]), normal(&mut rng, &[r, c])],
        |g, v| g.mul(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        Mul,
        "mul broadcast",
        vec![normal(&mut rng, &[b, r, c]), normal(&mut rng, &[r, 1])],
        |g, v| g.mul(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        Scale,
        "scale",
        vec![normal(&mut rng, &[r, c])],
        |g, v| g.scale(v[0], -1.7),
    ));
    cases.push(PrimitiveCase::new(
        Permute,
        "permute",
        vec![normal(&mut rng, &[b, r, c])],
        |g, v| g.permute(v[0], &[2, 0, 1]),
    ));
    cases.push(PrimitiveCase::new(
        Permute,
        "transpose",
        vec![normal(&mut rng, &[b, r, c])],
        |g, v| g.transpose(v[0]),
    ));
    cases.push(PrimitiveCase::new(
        Reshape,
        "reshape",
        vec![normal(&mut rng, &[b, r, c])],
        move |g, v| g.reshape(v[0], &[b * r, c]),
    ));
    cases.push(PrimitiveCase::new(
        Concat,
        "concat",
        vec![
            normal(&mut rng, &[r, 1, c]),
            normal(&mut rng, &[r, 2, c]),
            normal(&mut rng, &[r, 3, c]),
        ],
        |g, v| g.concat(v, 1),
    ));
    cases.push(PrimitiveCase::new(
        Softmax,
        "softmax last axis",
        vec![normal(&mut rng, &[r, c])],
        |g, v| g.softmax(v[0], 1),
    ));
    cases.push(PrimitiveCase::new(
        Softmax,
        "softmax inner axis",
        vec![normal(&mut rng, &[b, r, c])],
        |g, v| g.softmax(v[0], 1),
    ));
    cases.push(PrimitiveCase::new(
        LayerNorm,
        "layer_norm",
        vec![normal(&mut rng, &[r, c + 1])],
        |g, v| g.layer_norm(v[0], 1, 1e-5),
    ));
    cases.push(PrimitiveCase::new(
        LayerNorm,
        "layer_norm inner axis",
        vec![normal(&mut rng, &[b, r + 1, c])],
        |g, v| g.layer_norm(v[0], 1, 1e-5),
    ));
    cases.push(PrimitiveCase::new(
        Gelu,
        "gelu",
        vec![normal(&mut rng, &[r, c])],
        |g, v| g.gelu(v[0]),
    ));
    cases.push(PrimitiveCase::new(
        Sigmoid,
        "sigmoid",
        vec![normal(&mut rng, &[r, c])],
        |g, v| g.sigmoid(v[0]),
    ));
    cases.push(PrimitiveCase::new(
        Abs,
        "abs",
        vec![away_from_zero(&mut rng, &[r, c], 0.1)],
        |g, v| g.abs(v[0]),
    ));

    let ids: Vec<usize> = (0..r * 2).map(|_| rng.random_range(0..vocab)).collect();
    cases.push(PrimitiveCase::new(
        Embedding,
        "embedding",
        vec![normal(&mut rng, &[vocab, width])],
        move |g, v| g.embedding(v[0], &ids, &[r, 2]),
    ));

    let mut targets: Vec<usize> = (0..r + 1).map(|_| rng.random_range(0..c)).collect();
    targets[0] = usize::MAX;
    cases.push(PrimitiveCase::new(
        CrossEntropy,
        "cross_entropy",
        vec![normal(&mut rng, &[r + 1, c])],
        move |g, v| g.cross_entropy(v[0], &targets, usize::MAX),
    ));

    let pred = normal(&mut rng, &[r, c]);
    let offset = away_from_zero(&mut rng, &[r, c], 0.1);
    let target = Tensor::new(
        pred.shape().to_vec(),
        pred.data()
            .iter()
            .zip(offset.data())
            .map(|(p, o)| p + o)
            .collect(),
    )
    .expect("same shape");
    let mask = Tensor::from_fn(&[r, c], |i| if i % 3 == 2 { 0.0 } else { 1.0 });
    cases.push(PrimitiveCase::new(
        L1Loss,
        "l1_loss",
        vec![pred],
        move |g, v| g.l1_loss(v[0], &target, &mask),
    ));

    cases.push(PrimitiveCase::new(
        Sum,
        "sum axis",
        vec![normal(&mut rng, &[b, r, c])],
        |g, v| g.sum(v[0], 1),
    ));
    cases.push(PrimitiveCase::new(
        Sum,
        "sum all",
        vec![normal(&mut rng, &[r, c])],
        |g, v| g.sum_all(v[0]),
    ));
    cases.push(PrimitiveCase::new(
        Mean,
        "mean axis",
        vec![normal(&mut rng, &[b, r, c])],
        |g, v| g.mean(v[0], 2),
    ));
    cases.push(PrimitiveCase::new(
        Mean,
        "mean all",
        vec![normal(&mut rng, &[r, c])],
        |g, v| g.mean_all(v[0]),
    ));
    cases.push(PrimitiveCase::new(
        PairContract,
        "pair_contract",
        vec![
            normal(&mut rng, &[b, nn, kk, ch]),
            normal(&mut rng, &[b, nn + 1, kk, ch]),
        ],
        |g, v| g.pair_contract(v[0], v[1]),
    ));
    cases.push(PrimitiveCase::new(
        GaussianBasis,
        "gaussian_basis",
        vec![
            uniform(&mut rng, &[r, c], 0.0, 4.0),
            uniform(&mut rng, &[basis], 0.0, 4.0),
            uniform(&mut rng, &[basis], 0.6, 1.5),
        ],
        |g, v| g.gaussian_basis(v[0], v[1], v[2]),
    ));
    cases.push(PrimitiveCase::new(
        PairDistance,
        "pair_distance",
        vec![Tensor::from_fn(&[b, nn, 3], |i| {
            i as f64 * 0.7 + rng.random_range(-0.2..0.2)
        })],
        |g, v| g.pair_distance(v[0]),
    ));
    cases
}

/// Runs every primitive case.
pub fn run_primitive_suite(
    seed: u64,
    corrupt: Option<OpKind>,
) -> Result<Vec<CheckReport>, DiffError> {
    primitive_cases(seed)
        .iter()
        .enumerate()
        .map(|(i, case)| case.check(seed.wrapping_add(i as u64), corrupt))
        .collect()
}
