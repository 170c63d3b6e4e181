use super::kernels::{self, broadcast_index, broadcast_shape, split_at_axis};
use super::{DiffError, ParamId, ParamStore, Real, Tensor};
use std::cell::{Ref, RefCell};
use std::collections::HashMap;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

macro_rules! op_kinds {
    ($($kind:ident => $name:literal),* $(,)?) => {
        /// Every differentiable primitive the tape knows.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum OpKind { $($kind),* }

        impl OpKind {
            pub const ALL: &'static [OpKind] = &[$(OpKind::$kind),*];

            pub fn name(self) -> &'static str {
                match self { $(OpKind::$kind => $name),* }
            }

            pub fn from_name(name: &str) -> Option<OpKind> {
                match name { $($name => Some(OpKind::$kind),)* _ => None }
            }
        }
    };
}

op_kinds! {
    MatMul => "matmul",
    Add => "add",
    Sub => "sub",
    Mul => "mul",
    Scale => "scale",
    Permute => "permute",
    Reshape => "reshape",
    Concat => "concat",
    Softmax => "softmax",
    LayerNorm => "layer_norm",
    Gelu => "gelu",
    Sigmoid => "sigmoid",
    Abs => "abs",
    Embedding => "embedding",
    CrossEntropy => "cross_entropy",
    L1Loss => "l1_loss",
    Sum => "sum",
    Mean => "mean",
    PairContract => "pair_contract",
    GaussianBasis => "gaussian_basis",
    PairDistance => "pair_distance",
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        axis: usize,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        count: usize,
    },
    L1Loss {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        count: T,
    },
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    PairContract(Var, Var),
    GaussianBasis {
        x: Var,
        mu: Var,
        sigma: Var,
    },
    PairDistance(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf | Op::Param(_) => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Permute(..) => OpKind::Permute,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Abs(..) => OpKind::Abs,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::L1Loss { .. } => OpKind::L1Loss,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::PairContract(..) => OpKind::PairContract,
            Op::GaussianBasis { .. } => OpKind::GaussianBasis,
            Op::PairDistance(..) => OpKind::PairDistance,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape for one forward/backward pass. Not shareable across threads.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    corrupt: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Adds parameter gradients into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), DiffError> {
    if axis >= shape.len() {
        return Err(DiffError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            corrupt: None,
        }
    }

    /// Test hook: scales the backward output of one primitive by 1.5 so a
    /// gradient check must catch it.
    pub fn with_corrupted_backward(mut self, kind: OpKind) -> Self {
        self.corrupt = Some(kind);
        self
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| nodes[v.0].requires_grad),
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Primitive kinds recorded so far.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        let mut kinds: Vec<OpKind> = self
            .nodes
            .borrow()
            .iter()
            .filter_map(|n| n.op.kind())
            .collect();
        kinds.sort();
        kinds.dedup();
        kinds
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn input(&self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes.borrow_mut()[v.0].requires_grad = true;
        v
    }

    /// Pulls a parameter onto the tape once; later calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), &[]);
        self.params.borrow_mut().insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- forward primitives -------------------------------------------------

    /// `[..., m, k] x [..., k, n]` with equal batch dims, or a rank-2 right
    /// operand shared across all leading dims of the left.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
                return Err(mismatch("matmul", sa, sb));
            }
            let k = sa[sa.len() - 1];
            let n = sb[sb.len() - 1];
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            let mut out = vec![T::zero(); shape.iter().product()];
            if sb.len() == 2 {
                let m = ta.numel() / k.max(1);
                if k > 0 {
                    kernels::gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
                }
            } else {
                if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                    return Err(mismatch("matmul", sa, sb));
                }
                let m = sa[sa.len() - 2];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                for bi in 0..batch {
                    kernels::gemm_acc(
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            Tensor::new(shape, out)?
        };
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast_binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, DiffError> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        let shape = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| mismatch(name, ta.shape(), tb.shape()))?;
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ia = broadcast_index(&shape, ta.shape());
            let ib = broadcast_index(&shape, tb.shape());
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Tensor::new(shape, data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var, DiffError> {
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::Scale(x, c), &[x]))
    }

    /// Output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var, DiffError> {
        let out = {
            let t = self.value(x);
            let mut seen = axes.to_vec();
            seen.sort_unstable();
            if seen != (0..t.rank()).collect::<Vec<_>>() {
                return Err(mismatch("permute", t.shape(), axes));
            }
            let (data, shape) = kernels::permute(t.data(), t.shape(), axes);
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var, DiffError> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(mismatch("transpose", &self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[xs
                .first()
                .ok_or(DiffError::EmptyReduction { op: "concat" })?
                .0]
                .value
                .shape()
                .to_vec();
            check_axis("concat", &first, axis)?;
            let mut shape = first.clone();
            shape[axis] = 0;
            for v in xs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(k, (a, b))| k == axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", &first, s));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_at_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in xs {
                    let t = &nodes[v.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let out = {
            let t = self.value(x);
            check_axis("softmax", t.shape(), axis)?;
            let (outer, len, inner) = split_at_axis(t.shape(), axis);
            let mut data = t.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| o * len * inner + l * inner + i;
                    let max = (0..len)
                        .map(|l| data[at(l)])
                        .fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for l in 0..len {
                        let e = (data[at(l)] - max).exp();
                        data[at(l)] = e;
                        z = z + e;
                    }
                    for l in 0..len {
                        data[at(l)] = data[at(l)] / z;
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Normalises to zero mean and unit (biased) variance along `axis`; no affine.
    pub fn layer_norm(&self, x: Var, axis: usize, eps: f64) -> Result<Var, DiffError> {
        let (out, inv_std) = {
            let t = self.value(x);
            check_axis("layer_norm", t.shape(), axis)?;
            let (outer, len, inner) = split_at_axis(t.shape(), axis);
            let mut data = t.data().to_vec();
            let mut inv_std = Vec::with_capacity(outer * inner);
            let n = T::of(len as f64);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| o * len * inner + l * inner + i;
                    let mean = (0..len).map(|l| data[at(l)]).sum::<T>() / n;
                    let var = (0..len).map(|l| (data[at(l)] - mean).powi(2)).sum::<T>() / n;
                    let s = T::one() / (var + T::of(eps)).sqrt();
                    for l in 0..len {
                        data[at(l)] = (data[at(l)] - mean) * s;
                    }
                    inv_std.push(s);
                }
            }
            (Tensor::new(t.shape().to_vec(), data)?, inv_std)
        };
        Ok(self.push(out, Op::LayerNorm { x, axis, inv_std }, &[x]))
    }

    pub fn gelu(&self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(|v| kernels::gelu(v).0);
        Ok(self.push(out, Op::Gelu(x), &[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(kernels::sigmoid);
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    pub fn abs(&self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(|v| v.abs());
        Ok(self.push(out, Op::Abs(x), &[x]))
    }

    /// Rows of a `[vocab, dim]` table; output shape is `ids_shape + [dim]`.
    pub fn embedding(
        &self,
        table: Var,
        ids: &[usize],
        ids_shape: &[usize],
    ) -> Result<Var, DiffError> {
        let out = {
            let t = self.value(table);
            if t.rank() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
                return Err(mismatch("embedding", t.shape(), ids_shape));
            }
            let (vocab, dim) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(DiffError::IndexOutOfRange {
                        op: "embedding",
                        index: id,
                        size: vocab,
                    });
                }
                data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
            }
            let mut shape = ids_shape.to_vec();
            shape.push(dim);
            Tensor::new(shape, data)?
        };
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean cross entropy over rows of `[rows, classes]` logits whose target
    /// is not `ignore_index`.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var, DiffError> {
        let (out, probs, count) = {
            let t = self.value(logits);
            if t.rank() != 2 || t.shape()[0] != targets.len() {
                return Err(mismatch("cross_entropy", t.shape(), &[targets.len()]));
            }
            let (rows, classes) = (t.shape()[0], t.shape()[1]);
            let mut probs = vec![T::zero(); rows * classes];
            let mut total = T::zero();
            let mut count = 0;
            for r in 0..rows {
                let target = targets[r];
                if target == ignore_index {
                    continue;
                }
                if target >= classes {
                    return Err(DiffError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: target,
                        size: classes,
                    });
                }
                let row = &t.data()[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + z.ln();
                for c in 0..classes {
                    probs[r * classes + c] = (row[c] - lse).exp();
                }
                total = total + lse - row[target];
                count += 1;
            }
            if count == 0 {
                return Err(DiffError::EmptyReduction {
                    op: "cross_entropy",
                });
            }
            (Tensor::scalar(total / T::of(count as f64)), probs, count)
        };
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore_index,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// `sum(mask * |pred - target|) / sum(mask)` with constant target and mask.
    pub fn l1_loss(
        &self,
        pred: Var,
        target: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<Var, DiffError> {
        let (out, count) = {
            let p = self.value(pred);
            if p.shape() != target.shape() {
                return Err(mismatch("l1_loss", p.shape(), target.shape()));
            }
            if p.shape() != mask.shape() {
                return Err(mismatch("l1_loss", p.shape(), mask.shape()));
            }
            let count: T = mask.data().iter().copied().sum();
            if count <= T::zero() {
                return Err(DiffError::EmptyReduction { op: "l1_loss" });
            }
            let total: T = p
                .data()
                .iter()
                .zip(target.data())
                .zip(mask.data())
                .map(|((&x, &y), &m)| m * (x - y).abs())
                .sum();
            (Tensor::scalar(total / count), count)
        };
        Ok(self.push(
            out,
            Op::L1Loss {
                pred,
                target: target.data().to_vec(),
                mask: mask.data().to_vec(),
                count,
            },
            &[pred],
        ))
    }

    fn reduce(&self, x: Var, axis: Option<usize>, mean: bool) -> Result<Tensor<T>, DiffError> {
        let t = self.value(x);
        match axis {
            None => {
                let s: T = t.data().iter().copied().sum();
                let n = T::of(t.numel().max(1) as f64);
                Ok(Tensor::scalar(if mean { s / n } else { s }))
            }
            Some(axis) => {
                check_axis(if mean { "mean" } else { "sum" }, t.shape(), axis)?;
                let (outer, len, inner) = split_at_axis(t.shape(), axis);
                let mut data = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            data[o * inner + i] =
                                data[o * inner + i] + t.data()[o * len * inner + l * inner + i];
                        }
                    }
                }
                if mean {
                    let n = T::of(len as f64);
                    data.iter_mut().for_each(|v| *v = *v / n);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, data)
            }
        }
    }

    /// Sum over one axis (removed from the shape).
    pub fn sum(&self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let out = self.reduce(x, Some(axis), false)?;
        Ok(self.push(out, Op::Sum(x, Some(axis)), &[x]))
    }

    pub fn mean(&self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let out = self.reduce(x, Some(axis), true)?;
        Ok(self.push(out, Op::Mean(x, Some(axis)), &[x]))
    }

    pub fn sum_all(&self, x: Var) -> Result<Var, DiffError> {
        let out = self.reduce(x, None, false)?;
        Ok(self.push(out, Op::Sum(x, None), &[x]))
    }

    pub fn mean_all(&self, x: Var) -> Result<Var, DiffError> {
        let out = self.reduce(x, None, true)?;
        Ok(self.push(out, Op::Mean(x, None), &[x]))
    }

    /// `out[.., i, j, c] = sum_k a[.., i, k, c] * b[.., j, k, c]`
    pub fn pair_contract(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            let r = sa.len();
            if r < 3 || sb.len() != r || sa[..r - 3] != sb[..r - 3] || sa[r - 2..] != sb[r - 2..] {
                return Err(mismatch("pair_contract", sa, sb));
            }
            let (n, m, k, c) = (sa[r - 3], sb[r - 3], sa[r - 2], sa[r - 1]);
            let batch: usize = sa[..r - 3].iter().product();
            let mut data = vec![T::zero(); batch * n * m * c];
            for bi in 0..batch {
                let ad = &ta.data()[bi * n * k * c..];
                let bd = &tb.data()[bi * m * k * c..];
                let od = &mut data[bi * n * m * c..(bi + 1) * n * m * c];
                for i in 0..n {
                    for j in 0..m {
                        let o = &mut od[(i * m + j) * c..(i * m + j + 1) * c];
                        for kk in 0..k {
                            let ar = &ad[(i * k + kk) * c..(i * k + kk + 1) * c];
                            let br = &bd[(j * k + kk) * c..(j * k + kk + 1) * c];
                            for ch in 0..c {
                                o[ch] = o[ch] + ar[ch] * br[ch];
                            }
                        }
                    }
                }
            }
            let mut shape = sa[..r - 3].to_vec();
            shape.extend_from_slice(&[n, m, c]);
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::PairContract(a, b), &[a, b]))
    }

    /// Normal densities `exp(-z^2 / 2) / (sigma sqrt(2 pi))`, `z = (x - mu) / sigma`,
    /// for every element of `x` against `K` kernels: output `x.shape + [K]`.
    pub fn gaussian_basis(&self, x: Var, mu: Var, sigma: Var) -> Result<Var, DiffError> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tx, tm, ts) = (&nodes[x.0].value, &nodes[mu.0].value, &nodes[sigma.0].value);
            if tm.rank() != 1 || tm.shape() != ts.shape() {
                return Err(mismatch("gaussian_basis", tm.shape(), ts.shape()));
            }
            let k = tm.numel();
            let norm = T::of((2.0 * std::f64::consts::PI).sqrt());
            let mut data = Vec::with_capacity(tx.numel() * k);
            for &v in tx.data() {
                for (&m, &s) in tm.data().iter().zip(ts.data()) {
                    let z = (v - m) / s;
                    data.push((-(z * z) / T::of(2.0)).exp() / (s * norm));
                }
            }
            let mut shape = tx.shape().to_vec();
            shape.push(k);
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::GaussianBasis { x, mu, sigma }, &[x, mu, sigma]))
    }

    /// Euclidean distance matrix `[.., n, n]` of points `[.., n, 3]`.
    pub fn pair_distance(&self, x: Var) -> Result<Var, DiffError> {
        let out = {
            let t = self.value(x);
            let s = t.shape();
            if s.len() < 2 || s[s.len() - 1] != 3 {
                return Err(mismatch("pair_distance", s, &[3]));
            }
            let n = s[s.len() - 2];
            let batch: usize = s[..s.len() - 2].iter().product();
            let mut data = vec![T::zero(); batch * n * n];
            for bi in 0..batch {
                let p = &t.data()[bi * n * 3..(bi + 1) * n * 3];
                for i in 0..n {
                    for j in (i + 1)..n {
                        let d = (0..3)
                            .map(|a| (p[i * 3 + a] - p[j * 3 + a]).powi(2))
                            .sum::<T>()
                            .sqrt();
                        data[bi * n * n + i * n + j] = d;
                        data[bi * n * n + j * n + i] = d;
                    }
                }
            }
            let mut shape = s[..s.len() - 1].to_vec();
            shape.push(n);
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::PairDistance(x), &[x]))
    }

    // ---- reverse pass -------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NotScalar(shape));
        }
        self.backward_seeded(loss, Tensor::full(&shape, T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back to the leaves.
    pub fn backward_seeded(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>, DiffError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[out.0];
        if root.value.shape() != seed.shape() {
            return Err(mismatch("backward", root.value.shape(), seed.shape()));
        }
        let loss = out;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(seed);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            let mut contributions = input_grads(&nodes, node, &g);
            if node.op.kind() == self.corrupt {
                for (_, t) in &mut contributions {
                    t.data_mut().iter_mut().for_each(|v| *v = *v * T::of(1.5));
                }
            }
            for (v, t) in contributions {
                if !nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        }
        let mut leaves = HashMap::new();
        let mut params = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match nodes[i].op {
                Op::Param(id) => params.push((id, g)),
                Op::Leaf => {
                    leaves.insert(Var(i), g);
                }
                _ => {}
            }
        }
        Ok(Gradients { leaves, params })
    }
}

/// Gradient of the node's output w.r.t. each input that requires one.
fn input_grads<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
    let val = |v: Var| &nodes[v.0].value;
    let need = |v: Var| nodes[v.0].requires_grad;
    let gd = g.data();
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (sa, sb) = (ta.shape(), tb.shape());
            let k = sa[sa.len() - 1];
            let n = sb[sb.len() - 1];
            if sb.len() == 2 {
                let m = ta.numel() / k.max(1);
                if need(*a) {
                    let mut ga = vec![T::zero(); ta.numel()];
                    kernels::gemm_nt_acc(gd, tb.data(), &mut ga, m, k, n);
                    out.push((*a, Tensor::new(sa.to_vec(), ga).unwrap()));
                }
                if need(*b) {
                    let mut gb = vec![T::zero(); tb.numel()];
                    kernels::gemm_tn_acc(ta.data(), gd, &mut gb, m, k, n);
                    out.push((*b, Tensor::new(sb.to_vec(), gb).unwrap()));
                }
            } else {
                let m = sa[sa.len() - 2];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let mut ga = vec![T::zero(); ta.numel()];
                let mut gb = vec![T::zero(); tb.numel()];
                for bi in 0..batch {
                    let gs = &gd[bi * m * n..(bi + 1) * m * n];
                    if need(*a) {
                        kernels::gemm_nt_acc(
                            gs,
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                    if need(*b) {
                        kernels::gemm_tn_acc(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            gs,
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                out.push((*a, Tensor::new(sa.to_vec(), ga).unwrap()));
                out.push((*b, Tensor::new(sb.to_vec(), gb).unwrap()));
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let shape = g.shape();
            let ia = broadcast_index(shape, ta.shape());
            let ib = broadcast_index(shape, tb.shape());
            let mut ga = vec![T::zero(); ta.numel()];
            let mut gb = vec![T::zero(); tb.numel()];
            match &node.op {
                Op::Add(..) => {
                    for (o, &gv) in gd.iter().enumerate() {
                        ga[ia[o]] = ga[ia[o]] + gv;
                        gb[ib[o]] = gb[ib[o]] + gv;
                    }
                }
                Op::Sub(..) => {
                    for (o, &gv) in gd.iter().enumerate() {
                        ga[ia[o]] = ga[ia[o]] + gv;
                        gb[ib[o]] = gb[ib[o]] - gv;
                    }
                }
                _ => {
                    for (o, &gv) in gd.iter().enumerate() {
                        ga[ia[o]] = ga[ia[o]] + gv * tb.data()[ib[o]];
                        gb[ib[o]] = gb[ib[o]] + gv * ta.data()[ia[o]];
                    }
                }
            }
            out.push((*a, Tensor::new(ta.shape().to_vec(), ga).unwrap()));
            out.push((*b, Tensor::new(tb.shape().to_vec(), gb).unwrap()));
        }
        Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
        Op::Permute(x, axes) => {
            let (data, shape) = kernels::permute(gd, g.shape(), &kernels::inverse_axes(axes));
            out.push((*x, Tensor::new(shape, data).unwrap()));
        }
        Op::Reshape(x) => out.push((*x, g.clone().reshaped(val(*x).shape()).unwrap())),
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = split_at_axis(g.shape(), *axis);
            let total = g.shape()[*axis] * inner;
            let mut offset = 0;
            for v in xs {
                let t = val(*v);
                let chunk = t.shape()[*axis] * inner;
                let mut data = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    data.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                }
                offset += chunk;
                out.push((*v, Tensor::new(t.shape().to_vec(), data).unwrap()));
            }
        }
        Op::Softmax(x, axis) => {
            let y = node.value.data();
            let (outer, len, inner) = split_at_axis(g.shape(), *axis);
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| o * len * inner + l * inner + i;
                    let dot: T = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        dx[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            out.push((*x, Tensor::new(g.shape().to_vec(), dx).unwrap()));
        }
        Op::LayerNorm { x, axis, inv_std } => {
            let y = node.value.data();
            let (outer, len, inner) = split_at_axis(g.shape(), *axis);
            let n = T::of(len as f64);
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| o * len * inner + l * inner + i;
                    let mean_g = (0..len).map(|l| gd[at(l)]).sum::<T>() / n;
                    let mean_gy = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum::<T>() / n;
                    let s = inv_std[o * inner + i];
                    for l in 0..len {
                        dx[at(l)] = s * (gd[at(l)] - mean_g - y[at(l)] * mean_gy);
                    }
                }
            }
            out.push((*x, Tensor::new(g.shape().to_vec(), dx).unwrap()));
        }
        Op::Gelu(x) => {
            let tx = val(*x);
            let data = tx
                .data()
                .iter()
                .zip(gd)
                .map(|(&v, &gv)| gv * kernels::gelu(v).1)
                .collect();
            out.push((*x, Tensor::new(tx.shape().to_vec(), data).unwrap()));
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            let data = y
                .iter()
                .zip(gd)
                .map(|(&s, &gv)| gv * s * (T::one() - s))
                .collect();
            out.push((*x, Tensor::new(g.shape().to_vec(), data).unwrap()));
        }
        Op::Abs(x) => {
            let tx = val(*x);
            let data = tx
                .data()
                .iter()
                .zip(gd)
                .map(|(&v, &gv)| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            out.push((*x, Tensor::new(tx.shape().to_vec(), data).unwrap()));
        }
        Op::Embedding { table, ids } => {
            let t = val(*table);
            let dim = t.shape()[1];
            let mut gt = vec![T::zero(); t.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..dim {
                    gt[id * dim + c] = gt[id * dim + c] + gd[r * dim + c];
                }
            }
            out.push((*table, Tensor::new(t.shape().to_vec(), gt).unwrap()));
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            probs,
            count,
        } => {
            let t = val(*logits);
            let classes = t.shape()[1];
            let scale = gd[0] / T::of(*count as f64);
            let mut gl = vec![T::zero(); t.numel()];
            for (r, &target) in targets.iter().enumerate() {
                if target == *ignore {
                    continue;
                }
                for c in 0..classes {
                    let onehot = if c == target { T::one() } else { T::zero() };
                    gl[r * classes + c] = (probs[r * classes + c] - onehot) * scale;
                }
            }
            out.push((*logits, Tensor::new(t.shape().to_vec(), gl).unwrap()));
        }
        Op::L1Loss {
            pred,
            target,
            mask,
            count,
        } => {
            let p = val(*pred);
            let scale = gd[0] / *count;
            let data = p
                .data()
                .iter()
                .zip(target)
                .zip(mask)
                .map(|((&x, &y), &m)| {
                    let d = x - y;
                    let sign = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    m * sign * scale
                })
                .collect();
            out.push((*pred, Tensor::new(p.shape().to_vec(), data).unwrap()));
        }
        Op::Sum(x, axis) | Op::Mean(x, axis) => {
            let tx = val(*x);
            let is_mean = matches!(node.op, Op::Mean(..));
            let data = match axis {
                None => {
                    let n = if is_mean {
                        T::of(tx.numel().max(1) as f64)
                    } else {
                        T::one()
                    };
                    vec![gd[0] / n; tx.numel()]
                }
                Some(axis) => {
                    let (outer, len, inner) = split_at_axis(tx.shape(), *axis);
                    let n = if is_mean { T::of(len as f64) } else { T::one() };
                    let mut d = vec![T::zero(); tx.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                d[o * len * inner + l * inner + i] = gd[o * inner + i] / n;
                            }
                        }
                    }
                    d
                }
            };
            out.push((*x, Tensor::new(tx.shape().to_vec(), data).unwrap()));
        }
        Op::PairContract(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (sa, sb) = (ta.shape(), tb.shape());
            let r = sa.len();
            let (n, m, k, c) = (sa[r - 3], sb[r - 3], sa[r - 2], sa[r - 1]);
            let batch: usize = sa[..r - 3].iter().product();
            let mut ga = vec![T::zero(); ta.numel()];
            let mut gb = vec![T::zero(); tb.numel()];
            for bi in 0..batch {
                let ad = &ta.data()[bi * n * k * c..(bi + 1) * n * k * c];
                let bd = &tb.data()[bi * m * k * c..(bi + 1) * m * k * c];
                let gs = &gd[bi * n * m * c..(bi + 1) * n * m * c];
                let gab = &mut ga[bi * n * k * c..(bi + 1) * n * k * c];
                let gbb = &mut gb[bi * m * k * c..(bi + 1) * m * k * c];
                for i in 0..n {
                    for j in 0..m {
                        let go = &gs[(i * m + j) * c..(i * m + j + 1) * c];
                        for kk in 0..k {
                            for (ch, &g) in go.iter().enumerate() {
                                let ia = (i * k + kk) * c + ch;
                                let ib = (j * k + kk) * c + ch;
                                gab[ia] = gab[ia] + g * bd[ib];
                                gbb[ib] = gbb[ib] + g * ad[ia];
                            }
                        }
                    }
                }
            }
            out.push((*a, Tensor::new(sa.to_vec(), ga).unwrap()));
            out.push((*b, Tensor::new(sb.to_vec(), gb).unwrap()));
        }
        Op::GaussianBasis { x, mu, sigma } => {
            let (tx, tm, ts) = (val(*x), val(*mu), val(*sigma));
            let k = tm.numel();
            let phi = node.value.data();
            let mut gx = vec![T::zero(); tx.numel()];
            let mut gm = vec![T::zero(); k];
            let mut gs = vec![T::zero(); k];
            for (e, &v) in tx.data().iter().enumerate() {
                for q in 0..k {
                    let (m, s) = (tm.data()[q], ts.data()[q]);
                    let z = (v - m) / s;
                    let o = e * k + q;
                    let gp = gd[o] * phi[o];
                    gx[e] = gx[e] - gp * z / s;
                    gm[q] = gm[q] + gp * z / s;
                    gs[q] = gs[q] + gp * (z * z - T::one()) / s;
                }
            }
            out.push((*x, Tensor::new(tx.shape().to_vec(), gx).unwrap()));
            out.push((*mu, Tensor::new(tm.shape().to_vec(), gm).unwrap()));
            out.push((*sigma, Tensor::new(ts.shape().to_vec(), gs).unwrap()));
        }
        Op::PairDistance(x) => {
            let tx = val(*x);
            let s = tx.shape();
            let n = s[s.len() - 2];
            let batch: usize = s[..s.len() - 2].iter().product();
            let dist = node.value.data();
            let mut gx = vec![T::zero(); tx.numel()];
            for bi in 0..batch {
                let p = &tx.data()[bi * n * 3..(bi + 1) * n * 3];
                for i in 0..n {
                    for j in 0..n {
                        let d = dist[bi * n * n + i * n + j];
                        if i == j || d <= T::zero() {
                            continue;
                        }
                        let w = gd[bi * n * n + i * n + j] / d;
                        for a in 0..3 {
                            let delta = w * (p[i * 3 + a] - p[j * 3 + a]);
                            gx[bi * n * 3 + i * 3 + a] = gx[bi * n * 3 + i * 3 + a] + delta;
                            gx[bi * n * 3 + j * 3 + a] = gx[bi * n * 3 + j * 3 + a] - delta;
                        }
                    }
                }
            }
            out.push((*x, Tensor::new(s.to_vec(), gx).unwrap()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 128]));
        let loss = g.cross_entropy(x, &[5, 127, 0], usize::MAX).unwrap();
        assert!((g.scalar(loss) - 128f64.ln()).abs() < 1e-12);
        assert!((g.scalar(loss) - 4.8520).abs() < 5e-5);
    }

    #[test]
    fn cross_entropy_ignores_marked_rows() {
        let g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2], &[0.0, 0.0, 50.0, -50.0]));
        let loss = g.cross_entropy(x, &[0, 9], 9).unwrap();
        assert!((g.scalar(loss) - 2f64.ln()).abs() < 1e-12);
        let grads = g.backward(loss).unwrap();
        assert_eq!(&grads.wrt(x).unwrap().data()[2..], &[0.0, 0.0]);
        let all_ignored = g.cross_entropy(x, &[9, 9], 9);
        assert!(matches!(all_ignored, Err(DiffError::EmptyReduction { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f64>::new();
        let w = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let loss = g.sum_all(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient_is_twice_input() {
        let g = Graph::<f64>::new();
        let vals = [1.0, -2.0, 3.0, 0.5];
        let w = g.input(t(&[4], &vals));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let expected: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.wrt(w).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let w = g.input(Tensor::zeros(&[2, 2]));
        assert_eq!(g.backward(w).err(), Some(DiffError::NotScalar(vec![2, 2])));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::full(&[2], 1.0));
        let b = g.input(Tensor::full(&[2], 1.0));
        let loss = g.sum_all(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(b).is_none());
    }

    #[test]
    fn params_accumulate_across_steps() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2], &[1.0, 3.0])).unwrap();
        for _ in 0..2 {
            let g = Graph::new();
            let w = g.param(&store, id);
            assert_eq!(g.param(&store, id), w);
            let sq = g.mul(w, w).unwrap();
            let loss = g.sum_all(sq).unwrap();
            g.backward(loss).unwrap().accumulate_into(&mut store);
        }
        assert_eq!(store.get(id).grad.data(), &[4.0, 12.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn gaussian_basis_matches_density() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[1.0]));
        let mu = g.constant(t(&[2], &[0.0, 1.0]));
        let sigma = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.gaussian_basis(x, mu, sigma).unwrap();
        let root = (2.0 * std::f64::consts::PI).sqrt();
        let expected = [(-0.5f64).exp() / root, 1.0 / (2.0 * root)];
        for (a, b) in g.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_distance_is_euclidean() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 3], &[0.0, 0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 0.0, 1.0]));
        let d = g.pair_distance(x).unwrap();
        let v = g.value(d);
        assert_eq!(v.shape(), &[3, 3]);
        assert_eq!(v.data()[1], 5.0);
        assert_eq!(v.data()[3], 5.0);
        assert_eq!(v.data()[2], 1.0);
        assert_eq!(v.data()[4], 0.0);
    }

    #[test]
    fn pair_contract_matches_loops() {
        let g = Graph::<f64>::new();
        let a = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2, 1], &[5.0, 6.0]);
        let (va, vb) = (g.constant(a), g.constant(b));
        let out = g.pair_contract(va, vb).unwrap();
        assert_eq!(g.shape(out), vec![2, 1, 1]);
        assert_eq!(
            g.value(out).data(),
            &[1.0 * 5.0 + 2.0 * 6.0, 3.0 * 5.0 + 4.0 * 6.0]
        );
    }

    #[test]
    fn mlp_matches_finite_differences() {
        use crate::diffcore::gradcheck::{central_difference, rel_err, STEP};
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let dims = [5, 7, 6, 3];
        for l in 0..3 {
            let w = Tensor::from_fn(&[dims[l], dims[l + 1]], |_| rng.random_range(-0.8..0.8));
            let b = Tensor::from_fn(&[dims[l + 1]], |_| rng.random_range(-0.2..0.2));
            store.add(format!("l{l}.w"), w).unwrap();
            store.add(format!("l{l}.b"), b).unwrap();
        }
        let x = Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0));
        let loss_of = |store: &ParamStore<f64>, g: &Graph<f64>| -> Var {
            let mut h = g.constant(x.clone());
            for l in 0..3 {
                let w = g.param(store, store.id(&format!("l{l}.w")).unwrap());
                let b = g.param(store, store.id(&format!("l{l}.b")).unwrap());
                h = g.add(g.matmul(h, w).unwrap(), b).unwrap();
                if l < 2 {
                    h = g.gelu(h).unwrap();
                }
            }
            g.cross_entropy(h, &[0, 2, 1, 2], usize::MAX).unwrap()
        };
        let g = Graph::new();
        let loss = loss_of(&store, &g);
        g.backward(loss).unwrap().accumulate_into(&mut store);
        let analytic: Vec<Tensor<f64>> = store.iter().map(|p| p.grad.clone()).collect();
        for (pi, grad) in analytic.iter().enumerate() {
            for e in 0..grad.numel() {
                let orig = store.iter().nth(pi).unwrap().value.data()[e];
                let numeric = central_difference(
                    |v| {
                        let mut s = store.clone();
                        s.iter_mut().nth(pi).unwrap().value.data_mut()[e] = v;
                        let g = Graph::new();
                        let l = loss_of(&s, &g);
                        g.scalar(l)
                    },
                    orig,
                    STEP,
                );
                assert!(rel_err(grad.data()[e], numeric) < 1e-4);
            }
        }
    }

    proptest! {
        #[test]
        fn layer_norm_normalises(rows in 1usize..5, vals in proptest::collection::vec(-10.0f64..10.0, 8..40)) {
            let len = vals.len() / rows;
            prop_assume!(len >= 2);
            let data = &vals[..rows * len];
                        let g = Graph::<f64>::new();
            let x = g.constant(t(&[rows, len], data));
            let y = g.layer_norm(x, 1, 1e-5).unwrap();
            for r in 0..rows {
                let src = &data[r * len..(r + 1) * len];
                let src_mean = src.iter().sum::<f64>() / len as f64;
                let src_var = src.iter().map(|v| (v - src_mean).powi(2)).sum::<f64>() / len as f64;
                prop_assume!(src_var > 1.0);
                let out = g.value(y);
                let row = &out.data()[r * len..(r + 1) * len];
                let mean = row.iter().sum::<f64>() / len as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 6),
            shift in -100.0f64..100.0,
        ) {
            let g = Graph::<f64>::new();
            let x = g.constant(t(&[2, 3], &vals));
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let xs = g.constant(t(&[2, 3], &shifted));
            let y = g.softmax(x, 1).unwrap();
            let ys = g.softmax(xs, 1).unwrap();
            for r in 0..2 {
                let s: f64 = g.value(y).data()[r * 3..r * 3 + 3].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
