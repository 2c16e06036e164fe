//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied, so many tapes can run
//! against the same store on different threads. Consuming the tape with
//! [`Tape::backward`] yields a [`Gradients`] value which the caller folds into
//! the store with [`ParamStore::accumulate`]; folding in a fixed order keeps
//! training bit-reproducible.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a [`Tape::custom`] operation: receives the input values,
/// the output value and the output gradient, and adds into the input
/// gradients (pre-sized and zeroed).
pub type CustomBackward<T> = dyn Fn(&[&[T]], &[T], &[T], &mut [Vec<T>]) + Send + Sync;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    /// Keeps the tanh term for the backward pass.
    Gelu(Var, Vec<T>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<T>,
    },
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        backward: Arc<CustomBackward<T>>,
    },
}

struct Node<'p, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'p, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation recorder for one forward pass.
pub struct Tape<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
}

/// Result of a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Vec<T>)>,
    inputs: Vec<(Var, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Parameter gradients in ascending [`ParamId`] order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|k| self.params[k].1.as_slice())
    }

    /// Gradient with respect to a leaf created by [`Tape::input`].
    pub fn input(&self, var: Var) -> Option<&[T]> {
        self.inputs
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, g)| g.as_slice())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            *shape.last().unwrap(),
        ),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        self.nodes.push(Node {
            shape: p.value.shape().to_vec(),
            value: Cow::Borrowed(p.value.data()),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    fn mat2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// a[m×k] · b[k×n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat2(a, "matmul")?;
        let (k2, n) = self.mat2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// a[m×k] · b[n×k]ᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat2(a, "matmul_bt")?;
        let (n, k2) = self.mat2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_bt(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMulBt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-C vector to every row of a […×C] tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(a));
        if self.value(bias).len() != c {
            return Err(Error::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| *x + *y))
            .collect();
        let ng = self.ng(a) || self.ng(bias);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * s).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, s), ng)
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s)[0];
        let out = self.value(a).iter().map(|x| *x * sv).collect();
        let ng = self.ng(a) || self.ng(s);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MulScalar(a, s), ng))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.exp()).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Exp(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, x| acc + *x);
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize_lossy(self.value(a).len());
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var has same shape")
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        self.softmax_impl(logits, None)
    }

    /// Row-wise softmax of `logits + mask`. The mask is either one row of
    /// length L (broadcast) or has the logits' full shape. Entries at or below
    /// the sentinel are blocked and come out as exact zeros.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[T]) -> Result<Var> {
        self.softmax_impl(logits, Some(mask))
    }

    fn softmax_impl(&mut self, logits: Var, mask: Option<&[T]>) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(logits));
        let full = match mask {
            None => false,
            Some(m) if m.len() == cols => false,
            Some(m) if m.len() == rows * cols => true,
            Some(m) => return Err(Error::dim("masked_softmax", self.shape(logits), &[m.len()])),
        };
        let thr = T::mask_threshold();
        let x = self.value(logits);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mr = mask.map(|m| if full { &m[r * cols..(r + 1) * cols] } else { m });
            let allowed = |j: usize| mr.is_none_or(|m| m[j] > thr);
            let mut mx = T::neg_infinity();
            let mut open = false;
            for j in 0..cols {
                if allowed(j) {
                    open = true;
                    let v = xr[j] + mr.map_or(T::zero(), |m| m[j]);
                    if v.is_nan() {
                        mx = v;
                        break;
                    }
                    if v > mx {
                        mx = v;
                    }
                }
            }
            if !open {
                return Err(Error::DegenerateRow { row: r });
            }
            if !mx.is_finite() {
                return Err(Error::Numeric(format!("softmax row {r} has non-finite logits")));
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut z = T::zero();
            for j in 0..cols {
                if allowed(j) {
                    let e = (xr[j] + mr.map_or(T::zero(), |m| m[j]) - mx).exp();
                    orow[j] = e;
                    z = z + e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / z;
            }
        }
        let ng = self.ng(logits);
        let shape = self.shape(logits).to_vec();
        Ok(self.push(shape, out, Op::Softmax(logits), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, c) = rows_cols(self.shape(x));
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let cn = T::from_usize_lossy(c);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, v| a + *v) / cn;
            let var = row
                .iter()
                .fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean))
                / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::c((2.0 / std::f64::consts::PI).sqrt());
        let c = T::c(0.044715);
        let half = T::c(0.5);
        let x = self.value(a);
        let t: Vec<T> = x.iter().map(|&x| (k * (x + c * x * x * x)).act_tanh()).collect();
        let out = x.iter().zip(&t).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu(a, if ng { t } else { Vec::new() }), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat2(a, "slice_rows")?;
        if start + len > rows {
            return Err(Error::Index {
                index: start + len,
                extent: rows,
            });
        }
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(a);
        Ok(self.push(vec![len, cols], out, Op::SliceRows(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, cols) = self.mat2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.mat2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat2(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::Index {
                index: start + len,
                extent: cols,
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![rows, len], out, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (rows, _) = self.mat2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Selects rows of a [V×C] table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.mat2(table, "gather")?;
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(&self.value(table)[id * c..(id + 1) * c]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![ids.len(), c], out, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Mean over rows of −log softmax(logits[r])[targets[r]].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, v) = rows_cols(self.shape(logits));
        if rows != targets.len() || rows == 0 {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); rows * v];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    index: t,
                    extent: v,
                });
            }
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().fold(T::neg_infinity(), |m, a| m.max(*a));
            let mut z = T::zero();
            for (j, &a) in row.iter().enumerate() {
                let e = (a - mx).exp();
                probs[r * v + j] = e;
                z = z + e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p = *p / z;
            }
            // −log p_t = log z − (x_t − mx)
            loss = loss + (z.ln() - (row[t] - mx));
        }
        let loss = loss / T::from_usize_lossy(rows);
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Scales each row to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, c) = rows_cols(self.shape(x));
        let xs = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * c);
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let n = row.iter().fold(T::zero(), |a, v| a + *v * *v).sqrt();
            if n == T::zero() || !n.is_finite() {
                return Err(Error::DegenerateSimilarity { row: r });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| *v / n));
        }
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::RowNormalize { x, norms }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), ng))
    }

    /// Records an operation with a caller-supplied forward value and backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<T>,
        backward: Arc<CustomBackward<T>>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::dim("custom", shape, &[value.len()]));
        }
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            shape.to_vec(),
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            ng,
        ))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward called on non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![T::one()])])
    }

    /// Backpropagates from arbitrary nodes with the given upstream gradients.
    pub fn backward_seeded(self, seeds: &[(Var, Vec<T>)]) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::dim("backward seed", self.shape(*v), &[g.len()]));
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        let mut out = Gradients::default();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Param(id) => out.params.push((*id, g)),
                Op::Leaf => out.inputs.push((Var(i), g)),
                _ => self.backprop_node(i, &g, &mut grads),
            }
        }
        // Several leaves can refer to the same parameter.
        out.params.sort_by_key(|(id, _)| *id);
        let mut merged: Vec<(ParamId, Vec<T>)> = Vec::with_capacity(out.params.len());
        for (id, g) in out.params {
            match merged.last_mut() {
                Some((last, acc)) if *last == id => add_into(acc, &g),
                _ => merged.push((id, g)),
            }
        }
        out.params = merged;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        // Lazily allocates the gradient slot of `v` and hands it to `f`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| kernels::matmul_bt(g, bv, da, m, nn, k));
                acc(*b, &mut |db| kernels::matmul_at(av, g, db, m, k, nn));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| kernels::matmul(g, bv, da, m, nn, k));
                acc(*b, &mut |db| kernels::matmul_at(g, av, db, m, nn, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x = *x - *y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(bv) {
                        *x = *x + *gy * *y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gy), y) in d.iter_mut().zip(g).zip(av) {
                        *x = *x + *gy * *y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |d| add_into(d, g));
                let c = self.value(*bias).len();
                acc(*bias, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                for (x, gy) in d.iter_mut().zip(g) {
                    *x = *x + *gy * *s;
                }
            }),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s)[0];
                let av = self.value(*a);
                acc(*a, &mut |d| {
                    for (x, gy) in d.iter_mut().zip(g) {
                        *x = *x + *gy * sv;
                    }
                });
                acc(*s, &mut |d| {
                    let dot = g.iter().zip(av).fold(T::zero(), |t, (gy, x)| t + *gy * *x);
                    d[0] = d[0] + dot;
                });
            }
            Op::Exp(a) => acc(*a, &mut |d| {
                for ((x, gy), y) in d.iter_mut().zip(g).zip(out.iter()) {
                    *x = *x + *gy * *y;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |d| {
                for x in d.iter_mut() {
                    *x = *x + g[0];
                }
            }),
            Op::Softmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                acc(*a, &mut |d| {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let dot = y.iter().zip(gy).fold(T::zero(), |t, (p, q)| t + *p * *q);
                        for j in 0..cols {
                            d[r * cols + j] = d[r * cols + j] + y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, c) = rows_cols(&node.shape);
                let gv = self.value(*gain);
                let cn = T::from_usize_lossy(c);
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        let gy = &g[r * c..(r + 1) * c];
                        let h = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gy[j] * gv[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * h[j];
                        }
                        m1 = m1 / cn;
                        m2 = m2 / cn;
                        for j in 0..c {
                            let dh = gy[j] * gv[j];
                            d[r * c + j] = d[r * c + j] + rstd[r] * (dh - m1 - h[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for r in 0..rows {
                        for j in 0..c {
                            d[j] = d[j] + g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Gelu(a, tv) => {
                let k = T::c((2.0 / std::f64::consts::PI).sqrt());
                let c = T::c(0.044715);
                let half = T::c(0.5);
                let three = T::c(3.0);
                let av = self.value(*a);
                acc(*a, &mut |d| {
                    for (((dx, gy), &x), &t) in d.iter_mut().zip(g).zip(av).zip(tv) {
                        let dt = (T::one() - t * t) * k * (T::one() + three * c * x * x);
                        *dx = *dx + *gy * (half * (T::one() + t) + half * x * dt);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let cols = node.shape[1];
                acc(*a, &mut |d| add_into(&mut d[start * cols..start * cols + g.len()], g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = (node.shape[0], node.shape[1]);
                let cols = self.shape(*a)[1];
                acc(*a, &mut |d| {
                    for r in 0..rows {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    acc(*p, &mut |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Gather(table, ids) => {
                let c = node.shape[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let v = probs.len() / rows;
                let s = g[0] / T::from_usize_lossy(rows);
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[r * v + j] = d[r * v + j] + s * (probs[r * v + j] - onehot);
                        }
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                let (rows, c) = rows_cols(&node.shape);
                acc(*x, &mut |d| {
                    for r in 0..rows {
                        let y = &out[r * c..(r + 1) * c];
                        let gy = &g[r * c..(r + 1) * c];
                        let dot = y.iter().zip(gy).fold(T::zero(), |t, (p, q)| t + *p * *q);
                        for j in 0..c {
                            d[r * c + j] = d[r * c + j] + (gy[j] - y[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Custom { inputs, backward } => {
                let vals: Vec<&[T]> = inputs.iter().map(|v| self.value(*v)).collect();
                let mut dins: Vec<Vec<T>> = vals.iter().map(|v| vec![T::zero(); v.len()]).collect();
                backward(&vals, out, g, &mut dins);
                for (v, dv) in inputs.iter().zip(&dins) {
                    acc(*v, &mut |d| add_into(d, dv));
                }
            }
        }
    }
}

/// Single-row convenience: −log softmax(logits)[target] for a length-V vector.
pub fn cross_entropy_logits<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.constant(Tensor::new(&[1, logits.len()], logits.to_vec())?);
    let ce = tape.cross_entropy(l, &[target])?;
    Ok(tape.scalar_value(ce))
}

/// Untaped `softmax(logits + mask_row)` for one or more rows.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, mask_row: &[T]) -> Result<Tensor<T>> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.constant(logits.clone());
    let s = tape.masked_softmax(l, mask_row)?;
    Ok(tape.tensor(s))
}

/// Untaped layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &[T], bias: &[T], eps: T) -> Result<Tensor<T>> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::new(&[gain.len()], gain.to_vec())?);
    let b = tape.constant(Tensor::new(&[bias.len()], bias.to_vec())?);
    let y = tape.layer_norm(xv, g, b, eps)?;
    Ok(tape.tensor(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let i2 = tape.constant(Tensor::<f64>::eye(2));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c), &[3., 4., 5., 6.]);
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19., 22., 43., 50.]);
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let c = tape.matmul(z, b).unwrap();
        assert_eq!(tape.value(c), &[0.; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn masked_softmax_examples() {
        let ninf = f64::NEG_INFINITY;
        let out = masked_softmax(&t(&[2], &[1., 1.]), &[0., ninf]).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
        let out = masked_softmax(&t(&[3], &[0., 0., 0.]), &[0., 0., 0.]).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let out = masked_softmax(&t(&[2], &[2., 1.]), &[0., 0.]).unwrap();
        // e/(e+1) and 1/(e+1)
        let e = std::f64::consts::E;
        assert!((out.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((out.data()[0] - 0.7311).abs() < 1e-4);
        assert!((out.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn sentinel_mask_gives_exact_zero_in_f32() {
        let s = f32::mask_sentinel();
        let out = masked_softmax(&Tensor::<f32>::from_f64(&[3], &[5., 50., -3.]).unwrap(), &[0., s, 0.])
            .unwrap();
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let ninf = f64::NEG_INFINITY;
        let err = masked_softmax(&t(&[2], &[1., 1.]), &[ninf, ninf]).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 0 }));
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&t(&[3], &[1., 1., 1.]), &[1.; 3], &[0.; 3], 1e-5).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);
        let y = layer_norm(&t(&[2], &[-1., 1.]), &[1.; 2], &[0.; 2], 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        // mean 1, var 1 → xhat = [-1, 1]/sqrt(1+eps); ·2 + 1
        let y = layer_norm(&t(&[2], &[0., 2.]), &[2.; 2], &[1.; 2], 1e-5).unwrap();
        let h = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - (1.0 - 2.0 * h)).abs() < 1e-12);
        assert!((y.data()[0] + 1.0).abs() < 1e-3 && (y.data()[1] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy_logits(&[0.0f64, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy_logits(&[30.0f64, -30.0], 0).unwrap() <= 1e-9);
        // log(e + 2) - 0
        let expect = (std::f64::consts::E + 2.0).ln();
        let got = cross_entropy_logits(&[1.0f64, 0.0, 0.0], 1).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 1.5514).abs() < 1e-3);
        assert!(matches!(
            cross_entropy_logits(&[0.0f64, 0.0], 2),
            Err(Error::Index { index: 2, extent: 2 })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("p", t(&[3], &[1., -2., 3.])).unwrap();
        let mut tape = Tape::new(&store);
        let v = tape.param(p);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(p).unwrap(), &[1., 1., 1.]);

        let mut tape = Tape::new(&store);
        let v = tape.param(p);
        let sq = tape.square(v);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(p).unwrap(), &[2., -4., 6.]);

        // repeat calls accumulate into the store
        store.accumulate(&g);
        store.accumulate(&g);
        assert_eq!(store.grad(p).data(), &[4., -8., 12.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let v = tape.input(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn param_used_twice_gets_merged_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("p", t(&[2], &[1., 2.])).unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.param(p);
        let b = tape.param(p);
        let m = tape.mul(a, b).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param(p).unwrap(), &[2., 4.]);
        assert_eq!(g.params().count(), 1);
    }
}
