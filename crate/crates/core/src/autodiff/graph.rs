use rand::Rng;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use super::AutodiffError;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    GatherRows { src: Var, idx: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { src: Var, inv_std: Vec<T> },
    Gelu(Var),
    Dropout { src: Var, keep: Vec<T> },
    Mse(Var, Var),
    Cosine { a: Var, b: Var, na: Vec<T>, nb: Vec<T> },
    NormalizeRows { src: Var, norms: Vec<T> },
    StopGradient,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner reverse-mode computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer for `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::Rank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        v: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, AutodiffError> {
        let vx = self.value(x);
        let vv = self.value(v);
        let c = vx.last_dim();
        if vv.len() != c || vx.shape().is_empty() {
            return Err(mismatch(op, vx.shape(), vv.shape()));
        }
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(vv.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(vx.shape().to_vec(), data)
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.row_broadcast("add_bias", x, b, |a, b| a + b)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x * g` with `g` broadcast over the rows of `x`.
    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var, AutodiffError> {
        let out = self.row_broadcast("mul_bias", x, g, |a, b| a * b)?;
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, Op::MulBias(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&a| a * c).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(
            vx.shape().to_vec(),
            vx.data().iter().map(|&a| a + c).collect(),
        )
        .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(AutodiffError::Empty { op: "mean" });
        }
        let s: T = vx.data().iter().copied().sum();
        let m = s / T::of(vx.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Sum over the last dimension; `[r, c] -> [r]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let data: Vec<T> = vx.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let n = data.len();
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n], data).expect("row count"),
            Op::RowSum(x),
            rg,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = dims2("transpose", self.value(x))?;
        let out = transpose_raw(self.value(x).data(), r, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::Empty { op: "concat" })?;
        let (r0, c0) = dims2("concat", self.value(first))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = dims2("concat", self.value(p))?;
            match axis {
                0 if c == c0 => total += r,
                1 if r == r0 => total += c,
                0 | 1 => {
                    return Err(mismatch("concat", self.value(first).shape(), self.value(p).shape()))
                }
                _ => return Err(AutodiffError::Axis { op: "concat", axis }),
            }
        }
        let (shape, data) = if axis == 0 {
            let mut data = Vec::with_capacity(total * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            (vec![total, c0], data)
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            (vec![r0, total], data)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[start..end]` along `axis` of a 2-D tensor.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (r, c) = dims2("slice", self.value(x))?;
        let limit = match axis {
            0 => r,
            1 => c,
            _ => return Err(AutodiffError::Axis { op: "slice", axis }),
        };
        if start > end || end > limit {
            return Err(AutodiffError::Range {
                op: "slice",
                start,
                end,
                limit,
            });
        }
        let vx = self.value(x);
        let (shape, data) = if axis == 0 {
            (vec![end - start, c], vx.data()[start * c..end * c].to_vec())
        } else {
            let mut data = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                data.extend_from_slice(&vx.row(i)[start..end]);
            }
            (vec![r, end - start], data)
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { src: x, axis, start }, rg))
    }

    /// Select rows of a 2-D tensor; repeated indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (r, c) = dims2("gather_rows", self.value(x))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::Index {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let vx = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(vx.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows {
                src: x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        self.gather_rows(table, ids)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                s += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= s;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Normalize each row to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let vx = self.value(x);
        let c = vx.last_dim();
        let n = T::of(c as f64);
        let mut data = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.n_rows());
        for row in vx.data().chunks(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|&v| (v - mu) * is));
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { src: x, inv_std }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let data = vx
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let vx = self.value(x);
        let scale = T::of(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..vx.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let data = vx.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout { src: x, keep }, rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mse", a, b)?;
        let va = self.value(a);
        if va.is_empty() {
            return Err(AutodiffError::Empty { op: "mse" });
        }
        let s: T = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let m = s / T::of(va.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(m), Op::Mse(a, b), rg))
    }

    /// Row-wise cosine similarity; `[r, c] x [r, c] -> [r]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("cosine_similarity", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let c = va.last_dim();
        let mut na = Vec::new();
        let mut nb = Vec::new();
        let mut out = Vec::new();
        for (ra, rb) in va.data().chunks(c).zip(vb.data().chunks(c)) {
            let x = ra.iter().map(|&v| v * v).sum::<T>().sqrt();
            let y = rb.iter().map(|&v| v * v).sum::<T>().sqrt();
            if x == T::zero() || y == T::zero() {
                return Err(AutodiffError::ZeroNorm {
                    op: "cosine_similarity",
                });
            }
            let dot: T = ra.iter().zip(rb).map(|(&p, &q)| p * q).sum();
            out.push(dot / (x * y));
            na.push(x);
            nb.push(y);
        }
        let n = out.len();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![n], out)?,
            Op::Cosine { a, b, na, nb },
            rg,
        ))
    }

    /// Scale every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nrm == T::zero() {
                return Err(AutodiffError::ZeroNorm {
                    op: "normalize_rows",
                });
            }
            norms.push(nrm);
            data.extend(row.iter().map(|&v| v / nrm));
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows { src: x, norms }, rg))
    }

    /// Forward the value of `x` and block every gradient through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, delta: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.rg(*a) {
                    let bt = transpose_raw(vb.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    acc(*a, &mut |s| add_into(s, &da));
                }
                if self.rg(*b) {
                    let at = transpose_raw(va.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    acc(*b, &mut |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (x, &d) in s.iter_mut().zip(g) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, &mut |s| {
                    for ((x, &d), &o) in s.iter_mut().zip(g).zip(vb) {
                        *x += d * o;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, &d), &o) in s.iter_mut().zip(g).zip(va) {
                        *x += d * o;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let c = self.value(*b).len();
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulBias(x, gm) => {
                let vg = self.value(*gm).data();
                let vx = self.value(*x).data();
                let c = vg.len();
                acc(*x, &mut |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                        for ((x, &d), &w) in srow.iter_mut().zip(grow).zip(vg) {
                            *x += d * w;
                        }
                    }
                });
                acc(*gm, &mut |s| {
                    for (xrow, grow) in vx.chunks(c).zip(g.chunks(c)) {
                        for ((x, &d), &v) in s.iter_mut().zip(grow).zip(xrow) {
                            *x += d * v;
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                for (x, &d) in s.iter_mut().zip(g) {
                    *x += d * *c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Sum(x) => acc(*x, &mut |s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                acc(*x, &mut |s| {
                    let d = g[0] / n;
                    for x in s.iter_mut() {
                        *x += d;
                    }
                })
            }
            Op::RowSum(x) => {
                let c = self.value(*x).last_dim();
                acc(*x, &mut |s| {
                    for (row, &d) in s.chunks_mut(c).zip(g) {
                        for x in row {
                            *x += d;
                        }
                    }
                })
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let t = transpose_raw(g, r, c);
                acc(*x, &mut |s| add_into(s, &t));
            }
            Op::Concat { parts, axis } => {
                let total_c = out.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let (pr, pc) = (vp.shape()[0], vp.shape()[1]);
                    if *axis == 0 {
                        let seg = &g[offset * total_c..(offset + pr) * total_c];
                        acc(p, &mut |s| add_into(s, seg));
                        offset += pr;
                    } else {
                        acc(p, &mut |s| {
                            for i in 0..pr {
                                let src = &g[i * total_c + offset..i * total_c + offset + pc];
                                add_into(&mut s[i * pc..(i + 1) * pc], src);
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let c_src = self.value(*src).last_dim();
                let (r, c) = (out.shape()[0], out.shape()[1]);
                acc(*src, &mut |s| {
                    if *axis == 0 {
                        add_into(&mut s[start * c_src..(start + r) * c_src], g);
                    } else {
                        for i in 0..r {
                            add_into(
                                &mut s[i * c_src + start..i * c_src + start + c],
                                &g[i * c..(i + 1) * c],
                            );
                        }
                    }
                });
            }
            Op::GatherRows { src, idx } => {
                let c = out.last_dim();
                acc(*src, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                acc(*x, &mut |s| {
                    for ((srow, yrow), grow) in
                        s.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c))
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&y, &d)| y * d).sum();
                        for ((x, &y), &d) in srow.iter_mut().zip(yrow).zip(grow) {
                            *x += y * (d - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = out.last_dim();
                acc(*x, &mut |s| {
                    for ((srow, yrow), grow) in
                        s.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c))
                    {
                        let gs: T = grow.iter().copied().sum();
                        for ((x, &y), &d) in srow.iter_mut().zip(yrow).zip(grow) {
                            *x += d - y.exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { src, inv_std } => {
                let c = out.last_dim();
                let n = T::of(c as f64);
                acc(*src, &mut |s| {
                    for (((srow, yrow), grow), &is) in s
                        .chunks_mut(c)
                        .zip(out.data().chunks(c))
                        .zip(g.chunks(c))
                        .zip(inv_std)
                    {
                        let mg = grow.iter().copied().sum::<T>() / n;
                        let mgy = grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum::<T>() / n;
                        for ((x, &y), &d) in srow.iter_mut().zip(yrow).zip(grow) {
                            *x += is * (d - mg - y * mgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three = T::of(3.0);
                acc(*x, &mut |s| {
                    for ((x, &v), &d) in s.iter_mut().zip(vx).zip(g) {
                        let u = c * (v + a * v * v * v);
                        let t = u.tanh();
                        let du = c * (T::one() + three * a * v * v);
                        let dg = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                        *x += d * dg;
                    }
                });
            }
            Op::Dropout { src, keep } => acc(*src, &mut |s| {
                for ((x, &d), &k) in s.iter_mut().zip(g).zip(keep) {
                    *x += d * k;
                }
            }),
            Op::Mse(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let coef = T::of(2.0) * g[0] / T::of(va.len() as f64);
                acc(*a, &mut |s| {
                    for ((x, &p), &q) in s.iter_mut().zip(va).zip(vb) {
                        *x += coef * (p - q);
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, &p), &q) in s.iter_mut().zip(va).zip(vb) {
                        *x -= coef * (p - q);
                    }
                });
            }
            Op::Cosine { a, b, na, nb } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let c = va.last_dim();
                let cos = out.data();
                let mut side = |me: Var, mine: &Tensor<T>, other: &Tensor<T>, nm: &[T], no: &[T]| {
                    acc(me, &mut |s| {
                        for r in 0..cos.len() {
                            let inv = T::one() / (nm[r] * no[r]);
                            let k = cos[r] / (nm[r] * nm[r]);
                            let (xr, yr) = (mine.row(r), other.row(r));
                            for j in 0..c {
                                s[r * c + j] += g[r] * (yr[j] * inv - k * xr[j]);
                            }
                        }
                    });
                };
                side(*a, va, vb, na, nb);
                side(*b, vb, va, nb, na);
            }
            Op::NormalizeRows { src, norms } => {
                let c = out.last_dim();
                acc(*src, &mut |s| {
                    for (((srow, yrow), grow), &nrm) in s
                        .chunks_mut(c)
                        .zip(out.data().chunks(c))
                        .zip(g.chunks(c))
                        .zip(norms)
                    {
                        let dot: T = yrow.iter().zip(grow).map(|(&y, &d)| y * d).sum();
                        for ((x, &y), &d) in srow.iter_mut().zip(yrow).zip(grow) {
                            *x += (d - y * dot) / nrm;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
