//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep. A tape is
//! single-use: calling `backward` twice is a contract error.
//!
//! All activations are 2-D (`[rows, cols]`); batched sequence data is kept
//! flattened as `[batch * seq, features]` and the attention helpers
//! ([`Tape::split_heads`], [`Tape::batched_matmul`]) carry the extra
//! structure explicitly.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        groups: usize,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Mul {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    KlDistill {
        student: Var,
        student_probs: Vec<T>,
        teacher_probs: Vec<T>,
        temperature: T,
    },
    Sum(Var),
    Reshape(Var),
    SplitHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        a: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    SteMask {
        scores: Var,
        block: (usize, usize),
        grid_cols: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    checked: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rows_cols<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn ensure_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    if t.ndim() != 2 {
        return Err(TensorError::dim(op, format!("expected 2-D, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    // exp-based tanh; saturates correctly at both ends and is cheaper than libm tanh
    let th = T::one() - (T::one() + T::one()) / ((u + u).exp() + T::one());
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x);
    (y, dy)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of `x / temperature` written into `out`.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize, temperature: T, out: &mut [T]) {
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / temperature).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
}

/// Row-wise log-softmax of `x / temperature`.
fn log_softmax_rows<T: Scalar>(x: &[T], cols: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row
            .iter()
            .map(|&v| ((v - max) / temperature).exp())
            .sum::<T>()
            .ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max) / temperature - lse;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            checked: false,
            consumed: false,
        }
    }

    /// A tape for inference: values only, nothing saved for backward.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// In checked mode every operation fails with
    /// [`TensorError::NonFinite`] if its output contains NaN or ±inf.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `op(a) · op(b)` for 2-D operands, optionally transposed.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var, TensorError> {
        let (ar, ac) = ensure_2d("matmul", self.value(a))?;
        let (br, bc) = ensure_2d("matmul", self.value(b))?;
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("inner extents {k} vs {k2}"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    /// `groups` independent products. `a` holds `groups` contiguous
    /// matrices stacked along rows, likewise `b`.
    pub fn batched_matmul(
        &mut self,
        a: Var,
        b: Var,
        groups: usize,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<Var, TensorError> {
        let (ar, ac) = ensure_2d("batched_matmul", self.value(a))?;
        let (br, bc) = ensure_2d("batched_matmul", self.value(b))?;
        if groups == 0 || ar % groups != 0 || br % groups != 0 {
            return Err(TensorError::dim("batched_matmul", format!("{groups} groups")));
        }
        let (ar, br) = (ar / groups, br / groups);
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::dim(
                "batched_matmul",
                format!("inner extents {k} vs {k2}"),
            ));
        }
        let mut out = vec![T::zero(); groups * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for g in 0..groups {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    trans_a,
                    &bv[g * k * n..(g + 1) * k * n],
                    trans_b,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(vec![groups * m, n], out)?;
        self.push(
            "batched_matmul",
            value,
            Op::BatchedMatMul {
                a,
                b,
                groups,
                trans_a,
                trans_b,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(false)
        } else if tb.ndim() == 1 && tb.len() == ta.cols() {
            Ok(true)
        } else {
            Err(TensorError::dim(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ))
        }
    }

    fn binary(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let data: Vec<T> = if broadcast {
            let c = bd.len();
            let mut out = Vec::with_capacity(ta.len());
            for row in ta.data().chunks_exact(c) {
                out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    /// Elementwise sum; `b` may also be a vector broadcast over the trailing axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let value = self.binary(a, b, broadcast, |x, y| x + y);
        self.push("add", value, Op::Add { a, b, broadcast }, &[a, b])
    }

    /// Elementwise product; `b` may also be a vector broadcast over the trailing axis.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let broadcast = self.broadcast_kind("mul", a, b)?;
        let value = self.binary(a, b, broadcast, |x, y| x * y);
        self.push("mul", value, Op::Mul { a, b, broadcast }, &[a, b])
    }

    /// `W ⊙ mask`. Upstream gradient reaching `w` is `upstream ⊙ mask`.
    pub fn masked_weight(&mut self, w: Var, mask: Var) -> Result<Var, TensorError> {
        if self.value(w).shape() != self.value(mask).shape() {
            return Err(TensorError::dim(
                "masked_weight",
                format!("{:?} vs {:?}", self.value(w).shape(), self.value(mask).shape()),
            ));
        }
        self.mul(w, mask)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale { a, factor }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", value, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| gelu_parts(x).0);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    /// Softmax along the trailing axis, stabilised by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let mut out = vec![T::zero(); t.len()];
        softmax_rows(t.data(), t.cols(), T::one(), &mut out);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be > 0".into()));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = rows_cols(tx);
        if tg.len() != d || tb.len() != d {
            return Err(TensorError::dim(
                "layer_norm",
                format!("features {d}, gain {}, bias {}", tg.len(), tb.len()),
            ));
        }
        let eps = T::from_f64_lossy(eps);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Row gather: output row `r` is `table[ids[r]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let (v, _) = ensure_2d("embedding", t)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Index {
                op: "embedding",
                index: bad,
                bound: v,
            });
        }
        if ids.is_empty() {
            return Err(TensorError::dim("embedding", "no ids"));
        }
        let value = t.select_rows(ids);
        self.push(
            "embedding",
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Batch-mean of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(logits);
        let (b, c) = ensure_2d("cross_entropy", t)?;
        if labels.len() != b {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("{b} rows, {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let logp = log_softmax_rows(t.data(), c, T::one());
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -logp[i * c + l])
            .sum::<T>()
            / T::from_usize(b).unwrap();
        let probs = logp.iter().map(|&x| x.exp()).collect();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`, batch-averaged.
    /// The teacher enters as a plain tensor and receives no gradient.
    pub fn kl_distill(
        &mut self,
        student: Var,
        teacher_logits: &Tensor<T>,
        temperature: f64,
    ) -> Result<Var, TensorError> {
        if temperature <= 0.0 {
            return Err(TensorError::Contract("temperature must be > 0".into()));
        }
        let s = self.value(student);
        let (b, c) = ensure_2d("kl_distill", s)?;
        if s.shape() != teacher_logits.shape() {
            return Err(TensorError::dim(
                "kl_distill",
                format!("{:?} vs {:?}", s.shape(), teacher_logits.shape()),
            ));
        }
        let temp = T::from_f64_lossy(temperature);
        let log_s = log_softmax_rows(s.data(), c, temp);
        let log_t = log_softmax_rows(teacher_logits.data(), c, temp);
        let mut kl = T::zero();
        for (&lt, &ls) in log_t.iter().zip(&log_s) {
            let pt = lt.exp();
            if pt > T::zero() {
                kl = kl + pt * (lt - ls);
            }
        }
        let loss = temp * temp * kl / T::from_usize(b).unwrap();
        let student_probs = log_s.iter().map(|&x| x.exp()).collect();
        let teacher_probs = log_t.iter().map(|&x| x.exp()).collect();
        self.push(
            "kl_distill",
            Tensor::scalar(loss),
            Op::KlDistill {
                student,
                student_probs,
                teacher_probs,
                temperature: temp,
            },
            &[student],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// `[batch*seq, heads*hd]` → `[batch*heads*seq, hd]` (head-major per example).
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, c) = ensure_2d("split_heads", t)?;
        if r != batch * seq || heads == 0 || c % heads != 0 {
            return Err(TensorError::dim(
                "split_heads",
                format!("{:?} with batch {batch}, seq {seq}, heads {heads}", t.shape()),
            ));
        }
        let hd = c / heads;
        let value = Tensor::new(
            vec![batch * heads * seq, hd],
            permute_heads(t.data(), batch, seq, heads, hd, true),
        )?;
        self.push(
            "split_heads",
            value,
            Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            },
            &[a],
        )
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        let (r, hd) = ensure_2d("merge_heads", t)?;
        if r != batch * heads * seq {
            return Err(TensorError::dim(
                "merge_heads",
                format!("{:?} with batch {batch}, seq {seq}, heads {heads}", t.shape()),
            ));
        }
        let value = Tensor::new(
            vec![batch * seq, heads * hd],
            permute_heads(t.data(), batch, seq, heads, hd, false),
        )?;
        self.push(
            "merge_heads",
            value,
            Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            },
            &[a],
        )
    }

    /// Binary block mask `[rows, cols]` from a flat score vector.
    ///
    /// Entry `(i, j)` is 1 iff `scores[(i / bm) * (cols / bn) + j / bn] > threshold`.
    /// Backward is the straight-through estimator: the threshold is treated
    /// as identity, so each score receives the sum of the upstream gradient
    /// over its block.
    pub fn ste_mask(
        &mut self,
        scores: Var,
        target: (usize, usize),
        block: (usize, usize),
        threshold: f64,
    ) -> Result<Var, TensorError> {
        let value = crate::pruning::expand_mask(self.value(scores), threshold, target, block)?;
        let grid_cols = target.1 / block.1;
        self.push(
            "ste_mask",
            value,
            Op::SteMask {
                scores,
                block,
                grid_cols,
            },
            &[scores],
        )
    }

    /// Reverse sweep from the scalar `loss`. Gradients for every node that
    /// depends on a trainable leaf are returned, intermediate nodes included.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let k = if trans_a { va.shape()[0] } else { va.shape()[1] };
                if self.needs(a) {
                    let mut ga = vec![T::zero(); va.len()];
                    if trans_a {
                        // a stored k×m: ga = op(b) · gᵀ
                        T::gemm(k, n, m, vb.data(), trans_b, g.data(), true, &mut ga, false);
                    } else {
                        T::gemm(m, n, k, g.data(), false, vb.data(), !trans_b, &mut ga, false);
                    }
                    self.accumulate(grads, a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.needs(b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    if trans_b {
                        // b stored n×k: gb = gᵀ · op(a)
                        T::gemm(n, m, k, g.data(), true, va.data(), trans_a, &mut gb, false);
                    } else {
                        T::gemm(k, m, n, va.data(), !trans_a, g.data(), false, &mut gb, false);
                    }
                    self.accumulate(grads, b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            &Op::BatchedMatMul {
                a,
                b,
                groups,
                trans_a,
                trans_b,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                let gd = g.data();
                if self.needs(a) {
                    let mut ga = vec![T::zero(); va.len()];
                    for gi in 0..groups {
                        let gg = &gd[gi * m * n..(gi + 1) * m * n];
                        let bb = &vb.data()[gi * k * n..(gi + 1) * k * n];
                        let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if trans_a {
                            T::gemm(k, n, m, bb, trans_b, gg, true, out, false);
                        } else {
                            T::gemm(m, n, k, gg, false, bb, !trans_b, out, false);
                        }
                    }
                    self.accumulate(grads, a, Tensor::new(va.shape().to_vec(), ga)?);
                }
                if self.needs(b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    for gi in 0..groups {
                        let gg = &gd[gi * m * n..(gi + 1) * m * n];
                        let aa = &va.data()[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            T::gemm(n, m, k, gg, true, aa, trans_a, out, false);
                        } else {
                            T::gemm(k, m, n, aa, !trans_a, gg, false, out, false);
                        }
                    }
                    self.accumulate(grads, b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            &Op::Add { a, b, broadcast } => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.clone());
                }
                if self.needs(b) {
                    let gb = if broadcast { column_sums(g) } else { g.clone() };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Mul { a, b, broadcast } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let ga = if broadcast {
                        let c = vb.len();
                        let data = g
                            .data()
                            .chunks_exact(c)
                            .flat_map(|row| row.iter().zip(vb.data()).map(|(&x, &y)| x * y))
                            .collect();
                        Tensor::new(g.shape().to_vec(), data)?
                    } else {
                        g.zip_map(vb, |x, y| x * y)?
                    };
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let prod = g.zip_map(va, |x, y| x * y)?;
                    let gb = if broadcast { column_sums(&prod) } else { prod };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Scale { a, factor } => {
                self.accumulate(grads, a, g.map(|x| x * factor));
            }
            &Op::Relu(a) => {
                let ga = g.zip_map(self.value(a), |gy, x| if x > T::zero() { gy } else { T::zero() })?;
                self.accumulate(grads, a, ga);
            }
            &Op::Gelu(a) => {
                let ga = g.zip_map(self.value(a), |gy, x| gy * gelu_parts(x).1)?;
                self.accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gy, y| gy * y * (T::one() - y))?;
                self.accumulate(grads, a, ga);
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut ga = vec![T::zero(); y.len()];
                for ((yr, gr), out) in y
                    .data()
                    .chunks_exact(c)
                    .zip(g.data().chunks_exact(c))
                    .zip(ga.chunks_exact_mut(c))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, a, Tensor::new(y.shape().to_vec(), ga)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = g.cols();
                let rows = g.rows();
                let gd = g.data();
                let gain_v = self.value(*gain).data();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut gg = vec![T::zero(); d];
                    let mut gbias = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + gd[r * d + j] * xhat[r * d + j];
                            gbias[j] = gbias[j] + gd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(vec![d], gg)?);
                    self.accumulate(grads, *bias, Tensor::new(vec![d], gbias)?);
                }
                if self.needs(*x) {
                    let inv_d = T::one() / T::from_usize(d).unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gd[r * d + j] * gain_v[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gain_v[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut gt = vec![T::zero(); t.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
                }
                self.accumulate(grads, *table, Tensor::new(t.shape().to_vec(), gt)?);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let t = self.value(*logits);
                let (b, c) = (t.shape()[0], t.shape()[1]);
                let scale = g.data()[0] / T::from_usize(b).unwrap();
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] = gl[i * c + l] - scale;
                }
                self.accumulate(grads, *logits, Tensor::new(t.shape().to_vec(), gl)?);
            }
            Op::KlDistill {
                student,
                student_probs,
                teacher_probs,
                temperature,
            } => {
                let t = self.value(*student);
                let b = t.shape()[0];
                let scale = g.data()[0] * *temperature / T::from_usize(b).unwrap();
                let gs = student_probs
                    .iter()
                    .zip(teacher_probs)
                    .map(|(&ps, &pt)| scale * (ps - pt))
                    .collect();
                self.accumulate(grads, *student, Tensor::new(t.shape().to_vec(), gs)?);
            }
            &Op::Sum(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.data()[0]));
            }
            &Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, g.clone().reshape(&shape)?);
            }
            &Op::SplitHeads {
                a,
                batch,
                seq,
                heads,
            } => {
                let hd = g.cols();
                let data = permute_heads(g.data(), batch, seq, heads, hd, false);
                self.accumulate(grads, a, Tensor::new(vec![batch * seq, heads * hd], data)?);
            }
            &Op::MergeHeads {
                a,
                batch,
                seq,
                heads,
            } => {
                let hd = g.cols() / heads;
                let data = permute_heads(g.data(), batch, seq, heads, hd, true);
                self.accumulate(grads, a, Tensor::new(vec![batch * heads * seq, hd], data)?);
            }
            &Op::SteMask {
                scores,
                block,
                grid_cols,
            } => {
                let s = self.value(scores);
                let gs = crate::pruning::block_sums(g, block, grid_cols, s.len());
                self.accumulate(grads, scores, Tensor::new(s.shape().to_vec(), gs)?);
            }
        }
        Ok(())
    }
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.cols();
    let mut out = vec![T::zero(); c];
    for row in g.data().chunks_exact(c) {
        out.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
    }
    Tensor::new(vec![c], out).expect("non-empty")
}

/// Moves data between `[batch*seq, heads*hd]` and `[batch*heads*seq, hd]`.
fn permute_heads<T: Scalar>(src: &[T], batch: usize, seq: usize, heads: usize, hd: usize, split: bool) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for l in 0..seq {
            let merged_row = (b * seq + l) * heads * hd;
            for h in 0..heads {
                let split_row = ((b * heads + h) * seq + l) * hd;
                let m = merged_row + h * hd;
                if split {
                    out[split_row..split_row + hd].copy_from_slice(&src[m..m + hd]);
                } else {
                    out[m..m + hd].copy_from_slice(&src[split_row..split_row + hd]);
                }
            }
        }
    }
    out
}
