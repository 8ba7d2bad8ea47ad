use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{check_shape, numel};
use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    /// Leaf value or an op none of whose inputs need gradients.
    Constant,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        a: usize,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: usize,
    },
    Relu {
        a: usize,
    },
    Softplus {
        a: usize,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        chunk: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        src: Vec<usize>,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Persistent gradient accumulator; only leaves that require grad own one.
    grad: Option<Vec<f64>>,
}

/// Ordered record of differentiable operations.
///
/// Every op appends one node whose inputs were appended earlier, so the node
/// list is always in topological order and [`Tape::backward`] is a single
/// reverse sweep.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// `c = op(a) * op(b)` where `op` optionally transposes; `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        let i = self.check(v)?;
        Ok(&self.nodes[i])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn needs_grad(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf holding a copy of `tensor`; it tracks gradients iff the
    /// tensor requires them.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Constant,
            tensor.requires_grad(),
        )
    }

    pub fn param(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        check_shape(&shape, value.len())?;
        Ok(self.push(shape, value, Op::Constant, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var, TensorError> {
        self.param(shape, value, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.check(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.check(v).expect("var from another tape")].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v).expect("var from another tape");
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well formed")
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).ok().and_then(|n| n.grad.as_deref())
    }

    /// Adds the accumulated gradient of leaf `v` into `target.grad`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<(), TensorError> {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- operations -------------------------------------------------------

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(sa) / k;
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[ia].value,
            false,
            &self.nodes[ib].value,
            false,
            &mut out,
            false,
        );
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(shape, out, Op::MatMul { a: ia, b: ib, m, k, n }, rg))
    }

    /// Batched product `a[B, m, k] @ b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
            for t in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[t * m * k..(t + 1) * m * k],
                    false,
                    &bv[t * k * n..(t + 1) * k * n],
                    false,
                    &mut out[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.needs_grad(&[ia, ib]);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a: ia,
                b: ib,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Vec<f64>), TensorError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if !is_suffix(sa, sb) {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let nb = bv.len();
        let out = av
            .chunks_exact(nb)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok((ia, ib, out))
    }

    /// Elementwise sum; `b` broadcasts over leading axes when its shape is a
    /// suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib, out) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let rg = self.needs_grad(&[ia, ib]);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, Op::Add { a: ia, b: ib }, rg))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib, out) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs_grad(&[ia, ib]);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, Op::Mul { a: ia, b: ib }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.iter().map(|v| v * factor).collect();
        let rg = self.needs_grad(&[ia]);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, Op::Scale { a: ia, factor }, rg))
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.iter().map(|&v| f(v)).collect();
        let rg = self.needs_grad(&[ia]);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, op(ia), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, gelu, |a| Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |v| v.max(0.0), |a| Op::Relu { a })
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, softplus, |a| Op::Softplus { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let d = *shape.last().unwrap();
        let mut out = self.nodes[ia].value.clone();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(shape, out, Op::Softmax { a: ia }, rg))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (biased variance, `eps` added before the square root). No affine part.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let d = *shape.last().unwrap();
        let mut out = self.nodes[ia].value.clone();
        let mut inv_std = Vec::with_capacity(out.len() / d);
        for row in out.chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(shape, out, Op::LayerNorm { a: ia, inv_std }, rg))
    }

    /// Gathers rows of a `[rows, dim]` table: output shape `[indices.len(), dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let it = self.check(table)?;
        let shape = &self.nodes[it].shape;
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: shape.clone(),
                rhs: vec![indices.len()],
            });
        }
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: "no indices".into(),
            });
        }
        let (rows, dim) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfBounds {
                op: "embedding",
                index: bad,
                size: rows,
            });
        }
        let tv = &self.nodes[it].value;
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let rg = self.needs_grad(&[it]);
        Ok(self.push(
            vec![indices.len(), dim],
            out,
            Op::Embedding {
                table: it,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        let first = self.nodes[idx[0]].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", first.len()),
            });
        }
        let mut total = 0;
        for &i in &idx {
            let s = &self.nodes[i].shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let chunks: Vec<usize> = idx
            .iter()
            .map(|&i| self.nodes[i].shape[axis] * inner)
            .collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &c) in idx.iter().zip(&chunks) {
                out.extend_from_slice(&self.nodes[i].value[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.needs_grad(&idx);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: idx,
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_chunk = shape[axis] * inner;
        let chunk = (end - start) * inner;
        let offset = start * inner;
        let av = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let base = o * src_chunk + offset;
            out.extend_from_slice(&av[base..base + chunk]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(
            new_shape,
            out,
            Op::Slice {
                a: ia,
                outer,
                src_chunk,
                offset,
                chunk,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let len = self.nodes[ia].value.len();
        if check_shape(shape, len).is_err() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[ia].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.nodes[ia].value.clone();
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a: ia }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {rank}"),
            });
        }
        let mut in_strides = vec![1; rank];
        for ax in (0..rank.saturating_sub(1)).rev() {
            in_strides[ax] = in_strides[ax + 1] * shape[ax + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&shape);
        let mut src = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            src.push(offset);
            for ax in (0..rank).rev() {
                counter[ax] += 1;
                offset += strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        let av = &self.nodes[ia].value;
        let out = src.iter().map(|&s| av[s]).collect();
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(out_shape, out, Op::Permute { a: ia, src }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.iter().sum();
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(vec![1], vec![s], Op::Sum { a: ia }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs_grad(&[ia]);
        Ok(self.push(vec![1], vec![m], Op::Mean { a: ia }, rg))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// `logits` is viewed as `[rows, classes]` over its last axis; rows whose
    /// target is `None` contribute zero loss and zero gradient. Output shape
    /// is `[rows]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, TensorError> {
        let il = self.check(logits)?;
        let shape = &self.nodes[il].shape;
        let classes = *shape.last().unwrap();
        let rows = self.nodes[il].value.len() / classes;
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(TensorError::IndexOutOfBounds {
                op: "cross_entropy",
                index: bad,
                size: classes,
            });
        }
        let lv = &self.nodes[il].value;
        let mut probs = vec![0.0; lv.len()];
        let mut out = vec![0.0; rows];
        for (r, (row, prow)) in lv.chunks_exact(classes).zip(probs.chunks_exact_mut(classes)).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            prow.iter_mut().for_each(|p| *p /= sum);
            if let Some(t) = targets[r] {
                out[r] = -(row[t] - max - sum.ln());
            }
        }
        let rg = self.needs_grad(&[il]);
        Ok(self.push(
            vec![rows],
            out,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ----- reverse sweep ----------------------------------------------------

    /// Back-propagates from scalar `loss`; leaves that require gradients add
    /// `d loss / d leaf` into their accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[il].shape.clone()));
        }
        if !self.nodes[il].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(il + 1, || None);
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let mut send = |target: usize, delta: &[f64]| {
                if before[target].requires_grad {
                    add_into(&mut grads[target], delta);
                }
            };
            match &node.op {
                Op::Constant => {
                    add_into(&mut node.grad, &g);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    if before[a].requires_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, &before[b].value, true, &mut da, false);
                        send(a, &da);
                    }
                    if before[b].requires_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, &before[a].value, true, &g, false, &mut db, false);
                        send(b, &db);
                    }
                }
                Op::BatchMatMul { a, b, batch, m, k, n } => {
                    let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                    if before[a].requires_grad {
                        let mut da = vec![0.0; batch * m * k];
                        let bv = &before[b].value;
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &bv[t * k * n..(t + 1) * k * n],
                                true,
                                &mut da[t * m * k..(t + 1) * m * k],
                                false,
                            );
                        }
                        send(a, &da);
                    }
                    if before[b].requires_grad {
                        let mut db = vec![0.0; batch * k * n];
                        let av = &before[a].value;
                        for t in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &mut db[t * k * n..(t + 1) * k * n],
                                false,
                            );
                        }
                        send(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if before[a].requires_grad {
                        send(a, &g);
                    }
                    if before[b].requires_grad {
                        let nb = before[b].value.len();
                        let mut db = vec![0.0; nb];
                        for row in g.chunks_exact(nb) {
                            db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                        send(b, &db);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let nb = before[b].value.len();
                    if before[a].requires_grad {
                        let bv = &before[b].value;
                        let da: Vec<f64> = g
                            .chunks_exact(nb)
                            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x * y))
                            .collect();
                        send(a, &da);
                    }
                    if before[b].requires_grad {
                        let mut db = vec![0.0; nb];
                        for (grow, arow) in g.chunks_exact(nb).zip(before[a].value.chunks_exact(nb)) {
                            for ((d, x), y) in db.iter_mut().zip(grow).zip(arow) {
                                *d += x * y;
                            }
                        }
                        send(b, &db);
                    }
                }
                Op::Scale { a, factor } => {
                    let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                    send(*a, &da);
                }
                Op::Softmax { a } => {
                    let d = *node.shape.last().unwrap();
                    let mut da = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in da
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(node.value.chunks_exact(d))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((dx, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx = y * (gy - dot);
                        }
                    }
                    send(*a, &da);
                }
                Op::LayerNorm { a, inv_std } => {
                    let d = *node.shape.last().unwrap();
                    let df = d as f64;
                    let mut da = vec![0.0; g.len()];
                    for (((drow, grow), yrow), inv) in da
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(node.value.chunks_exact(d))
                        .zip(inv_std)
                    {
                        let gsum: f64 = grow.iter().sum();
                        let gysum: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((dx, gy), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx = inv / df * (df * gy - gsum - y * gysum);
                        }
                    }
                    send(*a, &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&before[*a].value)
                        .map(|(x, &v)| x * gelu_grad(v))
                        .collect();
                    send(*a, &da);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&before[*a].value)
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    send(*a, &da);
                }
                Op::Softplus { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&before[*a].value)
                        .map(|(x, &v)| x * sigmoid(v))
                        .collect();
                    send(*a, &da);
                }
                Op::Embedding { table, indices } => {
                    let dim = before[*table].shape[1];
                    let mut dt = vec![0.0; before[*table].value.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, x) in dt[i * dim..(i + 1) * dim]
                            .iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                        {
                            *d += x;
                        }
                    }
                    send(*table, &dt);
                }
                Op::Concat {
                    inputs,
                    outer,
                    chunks,
                } => {
                    let row: usize = chunks.iter().sum();
                    let mut offset = 0;
                    for (&inp, &c) in inputs.iter().zip(chunks) {
                        if before[inp].requires_grad {
                            let mut di = Vec::with_capacity(outer * c);
                            for o in 0..*outer {
                                let base = o * row + offset;
                                di.extend_from_slice(&g[base..base + c]);
                            }
                            send(inp, &di);
                        }
                        offset += c;
                    }
                }
                Op::Slice {
                    a,
                    outer,
                    src_chunk,
                    offset,
                    chunk,
                } => {
                    let mut da = vec![0.0; outer * src_chunk];
                    for o in 0..*outer {
                        let base = o * src_chunk + offset;
                        da[base..base + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                    }
                    send(*a, &da);
                }
                Op::Reshape { a } => send(*a, &g),
                Op::Permute { a, src } => {
                    let mut da = vec![0.0; g.len()];
                    for (x, &s) in g.iter().zip(src) {
                        da[s] += x;
                    }
                    send(*a, &da);
                }
                Op::Sum { a } => {
                    let da = vec![g[0]; before[*a].value.len()];
                    send(*a, &da);
                }
                Op::Mean { a } => {
                    let n = before[*a].value.len();
                    let da = vec![g[0] / n as f64; n];
                    send(*a, &da);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let classes = *before[*logits].shape.last().unwrap();
                    let mut dl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut dl[r * classes..(r + 1) * classes];
                        for (d, p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *d = p * g[r];
                        }
                        row[t] -= g[r];
                    }
                    send(*logits, &dl);
                }
            }
        }
        Ok(())
    }
}
