//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its backward rule. Nodes only ever reference earlier nodes, so
//! the tape is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnOp {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Ln,
}

/// Batch-normalisation statistics source.
#[derive(Clone, Debug)]
pub enum NormMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinOp, Var, Var),
    Affine(Var, T),
    Unary(UnOp, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Conv2d(Var, Var),
    AvgPool2d(Var, usize, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward sweep, indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf that requires grad; `None` if it did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable input.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data: Vec<T> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let (ra, rb) = (Runs::new(&out_shape, va.shape()), Runs::new(&out_shape, vb.shape()));
            let (da, db) = (va.data(), vb.data());
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for (&sa, &sb) in ra.starts.iter().zip(&rb.starts) {
                for j in 0..ra.len {
                    out.push(f(da[sa + j * ra.step], db[sb + j * rb.step]));
                }
            }
            out
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(op, a, b), ng))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let ng = self.ng(&[x]);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    fn unary(&mut self, op: UnOp, x: Var) -> Var {
        let out = self.value(x).map(|v| match op {
            UnOp::Relu => v.max(T::zero()),
            UnOp::Tanh => v.tanh(),
            UnOp::Sigmoid => sigmoid(v),
            UnOp::Exp => v.exp(),
            UnOp::Ln => v.ln(),
        });
        let ng = self.ng(&[x]);
        self.push(out, Op::Unary(op, x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnOp::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnOp::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnOp::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnOp::Ln, x)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        let mut out = vec![T::zero(); outer * inner];
        let d = v.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(x, axis), ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::arg(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::of(n as f64)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let map = permute_index(v.shape(), perm);
        let d = v.data();
        let data = map.iter().map(|&i| d[i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::arg("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::arg(format!("axis {axis} out of range for rank {}", base.len())));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: shape {s:?} incompatible with {base:?}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.ng(xs);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        if len == 0 || start + len > n {
            return Err(Error::arg(format!(
                "slice {start}..{} out of range for axis {axis} of size {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice(x, axis, start), ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                softmax_in_place(&mut out, o * n * inner + i, n, inner, n);
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), ng))
    }

    /// Softmax over the last axis where row `r` only spans its first `valid[r]`
    /// entries; the remaining positions get probability zero.
    pub fn masked_softmax(&mut self, x: Var, valid: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        if rank == 0 {
            return Err(Error::arg("masked softmax of a scalar"));
        }
        let n = v.shape()[rank - 1];
        let rows = v.len() / n;
        if valid.len() != rows || valid.iter().any(|&l| l == 0 || l > n) {
            return Err(Error::arg(format!(
                "masked softmax: {} row lengths for {rows} rows of width {n}",
                valid.len()
            )));
        }
        let mut out = v.data().to_vec();
        for (r, &l) in valid.iter().enumerate() {
            softmax_in_place(&mut out, r * n, n, 1, l);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x, rank - 1), ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let lse = log_sum_exp((0..n).map(|k| d[at(k)]));
                for k in 0..n {
                    out[at(k)] = d[at(k)] - lse;
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x, axis), ng))
    }

    /// Mean over rows of `-log_softmax(logits)[target]`.
    ///
    /// `logits` is `[V]` or `[N, V]`; rows whose target is `None` (padding) are
    /// excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let v = self.value(logits);
        let vocab = *v
            .shape()
            .last()
            .ok_or_else(|| Error::arg("cross entropy of a scalar"))?;
        let rows = v.len() / vocab;
        if v.rank() > 2 || targets.len() != rows {
            return Err(Error::dim(format!(
                "cross entropy: logits {:?} with {} targets",
                v.shape(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::Range(format!("target id {t} >= class count {vocab}")));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross entropy with no unmasked targets".into()));
        }
        let mut probs = v.data().to_vec();
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(row.iter().copied());
            if let Some(t) = *t {
                total += lse - row[t];
            }
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let loss = total / T::of(count as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean over all elements of the logistic loss, in the overflow-free form
    /// `max(l, 0) - l·y + ln(1 + e^{-|l|})`.
    pub fn binary_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let v = self.value(logits);
        if v.shape() != targets.shape() {
            return Err(Error::dim(format!(
                "binary cross entropy: logits {:?} vs targets {:?}",
                v.shape(),
                targets.shape()
            )));
        }
        let total: T = v
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &y)| l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::of(v.len() as f64);
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            ng,
        ))
    }

    /// Same-padded, unit-stride 3×3 cross-correlation.
    ///
    /// `x` is `[C, H, W]` or `[N, C, H, W]`; `k` is `[C', C, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let (xs, ks) = (self.value(x), self.value(k));
        let (n, c, h, w) = image_dims(xs.shape())?;
        let (co, ci) = match ks.shape()[..] {
            [co, ci, 3, 3] => (co, ci),
            _ => return Err(Error::dim(format!("conv kernel must be [C', C, 3, 3], got {:?}", ks.shape()))),
        };
        if ci != c {
            return Err(Error::dim(format!(
                "conv channel mismatch: input {:?}, kernel {:?}",
                xs.shape(),
                ks.shape()
            )));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); n * co * hw];
        let mut col = vec![T::zero(); c * 9 * hw];
        for b in 0..n {
            im2col(&xs.data()[b * c * hw..(b + 1) * c * hw], c, h, w, &mut col);
            T::gemm(
                co, c * 9, hw, T::one(), ks.data(), (c * 9) as isize, 1, &col, hw as isize, 1,
                T::zero(), &mut out[b * co * hw..(b + 1) * co * hw], hw as isize, 1,
            );
        }
        let mut shape = xs.shape().to_vec();
        let rank = shape.len();
        shape[rank - 3] = co;
        let ng = self.ng(&[x, k]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d(x, k), ng))
    }

    /// Mean pooling over `ph × pw` windows of the last two axes; ragged edge
    /// windows average over the elements they actually cover.
    pub fn avgpool2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        if ph == 0 || pw == 0 {
            return Err(Error::arg(format!("pool size must be positive, got {ph}x{pw}")));
        }
        let v = self.value(x);
        let rank = v.rank();
        if rank < 2 {
            return Err(Error::dim(format!("avgpool2d needs rank >= 2, got {:?}", v.shape())));
        }
        let (h, w) = (v.shape()[rank - 2], v.shape()[rank - 1]);
        let (oh, ow) = (h.div_ceil(ph), w.div_ceil(pw));
        let planes = v.len() / (h * w);
        let d = v.data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            for i in 0..oh {
                let (r0, r1) = (i * ph, ((i + 1) * ph).min(h));
                for j in 0..ow {
                    let (c0, c1) = (j * pw, ((j + 1) * pw).min(w));
                    let mut s = T::zero();
                    for r in r0..r1 {
                        for c in c0..c1 {
                            s += src[r * w + c];
                        }
                    }
                    out[p * oh * ow + i * ow + j] = s / T::of(((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[rank - 2] = oh;
        shape[rank - 1] = ow;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AvgPool2d(x, ph, pw), ng))
    }

    /// Per-channel normalisation followed by `gamma·x̂ + beta`.
    ///
    /// Layouts: `[N, C, H, W]`, `[C, H, W]` (single example) or `[N, C]`.
    /// Training mode returns the batch statistics (biased variance) so the
    /// caller can update its running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let v = self.value(x);
        let (n, c, s) = norm_dims(v.shape())?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::dim(format!(
                    "batchnorm affine parameter {:?} for {c} channels",
                    self.shape(p)
                )));
            }
        }
        let d = v.data();
        let eps = T::of(BN_EPS);
        let m = T::of((n * s) as f64);
        let (mean, var, train) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..n {
                        acc += d[(b * c + ch) * s..(b * c + ch + 1) * s].iter().copied().sum();
                    }
                    mean[ch] = acc / m;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &e in &d[(b * c + ch) * s..(b * c + ch + 1) * s] {
                            sq += (e - mean[ch]) * (e - mean[ch]);
                        }
                    }
                    var[ch] = sq / m;
                }
                (mean, var, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim(format!("running statistics for {} channels, input has {c}", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); d.len()];
        let mut out = vec![T::zero(); d.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        let y = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        );
        Ok((y, train.then_some(BatchStats { mean, var })))
    }

    /// Row lookup: `table: [V, d]`, result `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = super::tensor::dims2(t)?;
        if ids.is_empty() {
            return Err(Error::arg("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Range(format!("token id {bad} >= vocabulary size {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss; returns gradients of every leaf
    /// created with [`Tape::variable`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad matches shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |ga| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, vb.data(), 1, n as isize, T::one(), ga, k as isize, 1)
                });
                acc(*b, &mut |gb| {
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1)
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let out_shape = node.value.shape();
                let (ra, rb) = if va.shape() == vb.shape() {
                    (Runs::flat(va.len()), Runs::flat(vb.len()))
                } else {
                    (Runs::new(out_shape, va.shape()), Runs::new(out_shape, vb.shape()))
                };
                let (da, db) = (va.data(), vb.data());
                let len = ra.len;
                acc(*a, &mut |ga| {
                    for (r, (&sa, &sb)) in ra.starts.iter().zip(&rb.starts).enumerate() {
                        let gr = &g[r * len..(r + 1) * len];
                        for (j, &gi) in gr.iter().enumerate() {
                            let jb = sb + j * rb.step;
                            ga[sa + j * ra.step] += match op {
                                BinOp::Add | BinOp::Sub => gi,
                                BinOp::Mul => gi * db[jb],
                                BinOp::Div => gi / db[jb],
                            };
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (r, (&sa, &sb)) in ra.starts.iter().zip(&rb.starts).enumerate() {
                        let gr = &g[r * len..(r + 1) * len];
                        for (j, &gi) in gr.iter().enumerate() {
                            let (ja, jb) = (sa + j * ra.step, sb + j * rb.step);
                            gb[jb] += match op {
                                BinOp::Add => gi,
                                BinOp::Sub => -gi,
                                BinOp::Mul => gi * da[ja],
                                BinOp::Div => -gi * da[ja] / (db[jb] * db[jb]),
                            };
                        }
                    }
                });
            }
            Op::Affine(x, s) => acc(*x, &mut |gx| {
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o += gi * *s;
                }
            }),
            Op::Unary(op, x) => {
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i]
                            * match op {
                                UnOp::Relu => {
                                    if xd[i] > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnOp::Tanh => T::one() - y[i] * y[i],
                                UnOp::Sigmoid => y[i] * (T::one() - y[i]),
                                UnOp::Exp => y[i],
                                UnOp::Ln => T::one() / xd[i],
                            };
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis).expect("checked in forward");
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| {
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o += gi;
                }
            }),
            Op::Permute(x, perm) => {
                let map = permute_index(val(*x).shape(), perm);
                acc(*x, &mut |gx| {
                    for (&src, &gi) in map.iter().zip(g) {
                        gx[src] += gi;
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let out_shape = node.value.shape();
                let total = out_shape[*axis];
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    acc(x, &mut |gx| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, &s) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice(x, axis, start) => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis).expect("checked in forward");
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        for (d, &s) in gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("checked in forward");
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("checked in forward");
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * n * inner + k * inner + i;
                            let gsum: T = (0..n).map(|k| g[at(k)]).sum();
                            for k in 0..n {
                                gx[at(k)] += g[at(k)] - y[at(k)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = probs.len() / targets.len();
                let scale = g[0] / T::of(*count as f64);
                acc(*logits, &mut |gx| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for k in 0..vocab {
                            gx[r * vocab + k] += scale * probs[r * vocab + k];
                        }
                        gx[r * vocab + t] -= scale;
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let l = val(*logits).data();
                let scale = g[0] / T::of(l.len() as f64);
                acc(*logits, &mut |gx| {
                    for i in 0..l.len() {
                        gx[i] += scale * (sigmoid(l[i]) - targets[i]);
                    }
                });
            }
            Op::Conv2d(x, k) => {
                let (xs, ks) = (val(*x), val(*k));
                let (n, c, h, w) = image_dims(xs.shape()).expect("checked in forward");
                let co = ks.shape()[0];
                let hw = h * w;
                let ck = c * 9;
                let mut col = vec![T::zero(); ck * hw];
                let mut dcol = vec![T::zero(); ck * hw];
                let (need_x, need_k) = (self.nodes[x.0].needs_grad, self.nodes[k.0].needs_grad);
                for b in 0..n {
                    let gy = &g[b * co * hw..(b + 1) * co * hw];
                    if need_k {
                        im2col(&xs.data()[b * c * hw..(b + 1) * c * hw], c, h, w, &mut col);
                        // dK += dY · colᵀ
                        acc(*k, &mut |gk| {
                            T::gemm(co, hw, ck, T::one(), gy, hw as isize, 1, &col, 1, hw as isize, T::one(), gk, ck as isize, 1)
                        });
                    }
                    if need_x {
                        // dcol = Kᵀ · dY
                        T::gemm(ck, co, hw, T::one(), ks.data(), 1, ck as isize, gy, hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
                        acc(*x, &mut |gx| col2im_add(&dcol, c, h, w, &mut gx[b * c * hw..(b + 1) * c * hw]));
                    }
                }
            }
            Op::AvgPool2d(x, ph, pw) => {
                let xs = val(*x).shape();
                let rank = xs.len();
                let (h, w) = (xs[rank - 2], xs[rank - 1]);
                let (oh, ow) = (h.div_ceil(*ph), w.div_ceil(*pw));
                let planes = val(*x).len() / (h * w);
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        for i in 0..oh {
                            let (r0, r1) = (i * ph, ((i + 1) * ph).min(h));
                            for j in 0..ow {
                                let (c0, c1) = (j * pw, ((j + 1) * pw).min(w));
                                let share = g[p * oh * ow + i * ow + j] / T::of(((r1 - r0) * (c1 - c0)) as f64);
                                for r in r0..r1 {
                                    for c in c0..c1 {
                                        gx[p * h * w + r * w + c] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, s) = norm_dims(val(*x).shape()).expect("checked in forward");
                let gm = val(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for i in base..base + s {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*gamma, &mut |gg| {
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch];
                    }
                });
                acc(*beta, &mut |gb| {
                    for ch in 0..c {
                        gb[ch] += sum_g[ch];
                    }
                });
                let m = T::of((n * s) as f64);
                acc(*x, &mut |gx| {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            let k = gm[ch] * inv_std[ch];
                            for i in base..base + s {
                                gx[i] += if *train {
                                    k * (g[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<T>().ln()
}

/// Softmax over `len` strided entries starting at `start`; entries `valid..n` are zeroed.
fn softmax_in_place<T: Scalar>(buf: &mut [T], start: usize, n: usize, stride: usize, valid: usize) {
    let at = |k: usize| start + k * stride;
    let m = (0..valid).map(|k| buf[at(k)]).fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for k in 0..valid {
        let e = (buf[at(k)] - m).exp();
        buf[at(k)] = e;
        z += e;
    }
    for k in 0..valid {
        buf[at(k)] /= z;
    }
    for k in valid..n {
        buf[at(k)] = T::zero();
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::arg(format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape[..] {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"))),
    }
}

fn norm_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape[..] {
        [n, c] => Ok((n, c, 1)),
        [c, h, w] => Ok((1, c, h * w)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::dim(format!("batchnorm expects rank 2, 3 or 4, got {shape:?}"))),
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// A broadcast read pattern: output row `r` (of length `len`, the last
/// output axis) reads `inp[starts[r] + j * step]`.
struct Runs {
    starts: Vec<usize>,
    len: usize,
    step: usize,
}

impl Runs {
    fn flat(n: usize) -> Self {
        Runs {
            starts: vec![0],
            len: n,
            step: 1,
        }
    }

    fn new(out: &[usize], inp: &[usize]) -> Self {
        let rank = out.len();
        if rank == 0 {
            return Runs::flat(1);
        }
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..inp.len()).rev() {
            let oi = i + rank - inp.len();
            strides[oi] = if inp[i] == 1 { 0 } else { s };
            s *= inp[i];
        }
        let outer = &out[..rank - 1];
        let rows: usize = outer.iter().product();
        let mut idx = vec![0usize; rank - 1];
        let mut starts = Vec::with_capacity(rows);
        let mut cur = 0usize;
        for _ in 0..rows {
            starts.push(cur);
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                cur += strides[d];
                if idx[d] < outer[d] {
                    break;
                }
                cur -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        Runs {
            starts,
            len: out[rank - 1],
            step: strides[rank - 1],
        }
    }
}

/// For every flat output index of a permutation, the flat source index.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(total);
    let mut cur = 0usize;
    for _ in 0..total {
        res.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    res
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &mut col[((ch * 3 + ki) * 3 + kj) * hw..((ch * 3 + ki) * 3 + kj + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ki as isize - 1;
                    let dst = &mut row[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    match kj {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = &col[((ch * 3 + ki) * 3 + kj) * hw..((ch * 3 + ki) * 3 + kj + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ki as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &row[i * w..(i + 1) * w];
                    let dst = &mut x[ch * hw + si as usize * w..ch * hw + (si as usize + 1) * w];
                    match kj {
                        0 => {
                            for j in 1..w {
                                dst[j - 1] += src[j];
                            }
                        }
                        1 => {
                            for j in 0..w {
                                dst[j] += src[j];
                            }
                        }
                        _ => {
                            for j in 0..w - 1 {
                                dst[j + 1] += src[j];
                            }
                        }
                    }
                }
            }
        }
    }
}
