use super::element::gemm;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use std::borrow::Cow;
use std::collections::HashMap;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    AddRow {
        x: usize,
        bias: usize,
        cols: usize,
    },
    Mul(usize, usize),
    Scale(usize, T),
    Gelu(usize),
    Relu(usize),
    Tanh(usize),
    Softmax {
        x: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cols: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        classes: usize,
        probs: Vec<T>,
    },
    Reshape(usize),
    Permute {
        x: usize,
        in_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Narrow {
        x: usize,
        outer: usize,
        in_chunk: usize,
        offset: usize,
        len: usize,
    },
    ExpandLeading {
        x: usize,
        count: usize,
    },
    Sum(usize),
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    key: Option<usize>,
}

/// Gradients produced by one backward pass, keyed by parameter identity.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_param: HashMap<usize, Vec<T>>,
}

fn param_key<T>(t: &Tensor<T>) -> usize {
    t as *const Tensor<T> as usize
}

impl<T: Element> Gradients<T> {
    /// Gradient for a parameter that was bound with [`Graph::param`].
    pub fn get(&self, param: &Tensor<T>) -> Option<&[T]> {
        self.by_param.get(&param_key(param)).map(|v| v.as_slice())
    }

    /// Moves the gradient for `param` into its grad slot. Returns `false` when
    /// the parameter took no part in the graph.
    pub fn write_into(&mut self, param: &mut Tensor<T>) -> Result<bool> {
        match self.by_param.remove(&param_key(param)) {
            Some(g) => {
                param.set_grad(g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Recorded computation. Single-owner: build it, run one backward, drop it.
pub struct Graph<'a, T: Element> {
    nodes: Vec<Node<'a, T>>,
    recording: bool,
    backward_done: bool,
    grads: Vec<Option<Vec<T>>>,
}

impl<'a, T: Element> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(s) => {
            for (a, b) in s.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_K: f64 = 0.044_715;

/// `-2u` where `u = c·(x + k·x³)`; GELU is `x / (1 + exp(-2u))`.
#[inline]
fn gelu_neg_2u<T: Element>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_K) * x * x * x);
    -(u + u)
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let one = T::one();
    let x3 = x * x * x;
    let u = c * (x + k * x3);
    // ½(1 + tanh u) = σ(2u), which costs one exp.
    let s = one / (one + (-(u + u)).exp());
    let y = x * s;
    let du = c * (one + T::from_f64(3.0) * k * x * x);
    let dy = s + (x + x) * s * (one - s) * du;
    (y, dy)
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Applies `out[i0, i1, ...] = x[idx permuted]` where output axis `j` is input
/// axis `perm[j]`.
fn permute_buffer<T: Copy>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permuted_shape(shape, perm);
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], strides[last]);
    let outer_count = x.len() / inner_len;
    for _ in 0..outer_count {
        let base: usize = idx[..last].iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|j| x[base + j * inner_stride]));
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

impl<'a, T: Element> Graph<'a, T> {
    /// A graph that records operations for a later backward pass.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            backward_done: false,
            grads: Vec::new(),
        }
    }

    /// A graph that evaluates values only. Nothing requires grad, no caches
    /// are kept, and [`Graph::backward`] fails.
    pub fn no_grad() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: requires_grad && self.recording,
            key: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        self.recording && ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Binds a parameter tensor by reference. Gradients flow to it iff it has
    /// `requires_grad` set.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        let v = self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.nodes[v.0].key = Some(param_key(t));
        v
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || numel == 0 {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} with {} elements", data.len()),
            ));
        }
        Ok(self.push(Cow::Owned(data), shape.to_vec(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    /// Gradient of the last backward pass with respect to any recorded value.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if trans_b { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(out),
            vec![m, n],
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    /// Batched product over the leading dimension:
    /// `a[B×m×k] · b[B×k×n]` (or `b[B×n×k]ᵀ` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([ba, m, k], [bb, r, c]) if ba == bb => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if kb != *k {
                    return Err(Error::shape(
                        "batch_matmul",
                        format!("inner dimensions disagree: {sa:?} x {sb:?}"),
                    ));
                }
                (*ba, *m, *k, n)
            }
            _ => {
                return Err(Error::shape(
                    "batch_matmul",
                    format!("expected matching 3-D operands, got {sa:?} and {sb:?}"),
                ))
            }
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Cow::Owned(out),
            vec![batch, m, n],
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a.0, b.0), rg))
    }

    /// Adds a vector along the last dimension.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.shape(bias) != [cols] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(&[x.0, bias.0]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::AddRow {
                x: x.0,
                bias: bias.0,
                cols,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale(x.0, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let mut e: Vec<T> = xs.iter().map(|&v| gelu_neg_2u(v)).collect();
        T::exp_slice(&mut e);
        let out: Vec<T> = xs.iter().zip(&e).map(|(&v, &e)| v / (T::one() + e)).collect();
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Gelu(x.0), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Relu(x.0), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).iter().map(|&v| v.tanh()).collect();
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Tanh(x.0), rg)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            for v in row.iter_mut() {
                *v = *v - mx;
            }
            T::exp_slice(row);
            let s: T = row.iter().copied().sum();
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Softmax { x: x.0, cols }, rg)
    }

    /// Layer normalisation over the last dimension followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for input {:?}",
                    self.shape(gain),
                    self.shape(bias),
                    self.shape(x)
                ),
            ));
        }
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / cols;
        let n = T::from_f64(cols as f64);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = if rg { vec![T::zero(); xv.len()] } else { Vec::new() };
        let mut rstd = if rg { vec![T::zero(); rows] } else { Vec::new() };
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                out[r * cols + j] = h * gv[j] + bv[j];
                if rg {
                    xhat[r * cols + j] = h;
                }
            }
            if rg {
                rstd[r] = rs;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                cols,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits[batch×C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != batch {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {batch} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                bound: classes,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            loss = loss + (lse - row[label]);
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        loss = loss / T::from_f64(batch as f64);
        let rg = self.rg(&[logits.0]);
        if !rg {
            probs = Vec::new();
        }
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                classes,
                probs,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(x.0), rg))
    }

    /// Axis permutation: output axis `j` is input axis `perm[j]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("permutation {perm:?} for shape {shape:?}"),
            ));
        }
        let out = permute_buffer(self.value(x), &shape, perm);
        let rg = self.rg(&[x.0]);
        let out_shape = permuted_shape(&shape, perm);
        Ok(self.push(
            Cow::Owned(out),
            out_shape,
            Op::Permute {
                x: x.0,
                in_shape: shape,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut axis_len = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not fit {first:?} along axis {axis}"),
                ));
            }
            axis_len += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|p| self.shape(*p)[axis] * inner).collect();
        let total: usize = chunks.iter().sum::<usize>() * outer;
        let mut out = Vec::with_capacity(total);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(*p)[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = axis_len;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::Concat {
                parts: ids,
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_chunk = shape[axis] * inner;
        let (offset, chunk) = (start * inner, len * inner);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            out.extend_from_slice(&xv[o * in_chunk + offset..o * in_chunk + offset + chunk]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Cow::Owned(out),
            out_shape,
            Op::Narrow {
                x: x.0,
                outer,
                in_chunk,
                offset,
                len: chunk,
            },
            rg,
        ))
    }

    /// Repeats `x` `count` times along a new leading axis.
    pub fn expand_leading(&mut self, x: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::shape("expand_leading", "count must be positive"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * count);
        for _ in 0..count {
            out.extend_from_slice(xv);
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape(x));
        let rg = self.rg(&[x.0]);
        Ok(self.push(Cow::Owned(out), shape, Op::ExpandLeading { x: x.0, count }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x.0]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Runs reverse-mode differentiation from the scalar `loss`.
    ///
    /// Each graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Contract("backward on a no-grad graph".into()));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; gradient accumulation is rejected".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "loss is detached: no parameter with requires_grad feeds it".into(),
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(key), Some(g)) = (node.key, grads[id].as_ref()) {
                match out.by_param.get_mut(&key) {
                    Some(s) => {
                        for (a, &b) in s.iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    }
                    None => {
                        out.by_param.insert(key, g.clone());
                    }
                }
            }
        }
        self.grads = grads;
        Ok(out)
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| -> &[T] { &self.nodes[i].value };
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC·B (trans_b) or dC·Bᵀ
                    gemm(m, n, k, g, false, val(b), !trans_b, &mut da, false);
                    acc(&mut grads[a], da);
                }
                if needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    if trans_b {
                        gemm(n, m, k, g, true, val(a), false, &mut db, false);
                    } else {
                        gemm(k, m, n, val(a), true, g, false, &mut db, false);
                    }
                    acc(&mut grads[b], db);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                if needs(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    let bv = val(b);
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    acc(&mut grads[a], da);
                }
                if needs(b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    let av = val(a);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut db[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gi, true, ai, false, di, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, di, false);
                        }
                    }
                    acc(&mut grads[b], db);
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    acc(&mut grads[a], g.to_vec());
                }
                if needs(b) {
                    acc(&mut grads[b], g.to_vec());
                }
            }
            &Op::AddRow { x, bias, cols } => {
                if needs(x) {
                    acc(&mut grads[x], g.to_vec());
                }
                if needs(bias) {
                    let mut db = vec![T::zero(); cols];
                    for row in g.chunks(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(&mut grads[bias], db);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let d = g.iter().zip(val(b)).map(|(&u, &v)| u * v).collect();
                    acc(&mut grads[a], d);
                }
                if needs(b) {
                    let d = g.iter().zip(val(a)).map(|(&u, &v)| u * v).collect();
                    acc(&mut grads[b], d);
                }
            }
            &Op::Scale(x, c) => {
                acc(&mut grads[x], g.iter().map(|&u| u * c).collect());
            }
            &Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(val(x))
                    .map(|(&u, &v)| u * gelu_parts(v).1)
                    .collect();
                acc(&mut grads[x], d);
            }
            &Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(x))
                    .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                    .collect();
                acc(&mut grads[x], d);
            }
            &Op::Tanh(x) => {
                let y = val(id);
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&u, &t)| u * (T::one() - t * t))
                    .collect();
                acc(&mut grads[x], d);
            }
            &Op::Softmax { x, cols } => {
                let y = val(id);
                let mut d = vec![T::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(&mut grads[x], d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            } => {
                let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
                let gv = val(gain);
                if needs(gain) {
                    let mut dg = vec![T::zero(); cols];
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                        }
                    }
                    acc(&mut grads[gain], dg);
                }
                if needs(bias) {
                    let mut db = vec![T::zero(); cols];
                    for grow in g.chunks(cols) {
                        for j in 0..cols {
                            db[j] = db[j] + grow[j];
                        }
                    }
                    acc(&mut grads[bias], db);
                }
                if needs(x) {
                    let n = T::from_f64(cols as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((drow, grow), hrow)) in dx
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..cols {
                            let dh = grow[j] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hrow[j];
                        }
                        let (m1, m2) = (sum_dh / n, sum_dh_h / n);
                        for j in 0..cols {
                            let dh = grow[j] * gv[j];
                            drow[j] = rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                    acc(&mut grads[x], dx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                classes,
                probs,
            } => {
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] = d[r * classes + l] - scale;
                }
                acc(&mut grads[*logits], d);
            }
            &Op::Reshape(x) => acc(&mut grads[x], g.to_vec()),
            Op::Permute { x, in_shape, perm } => {
                let out_shape = permuted_shape(in_shape, perm);
                let mut inv = vec![0usize; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                acc(&mut grads[*x], permute_buffer(g, &out_shape, &inv));
            }
            Op::Concat {
                parts,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    if needs(p) {
                        let mut d = Vec::with_capacity(outer * c);
                        for o in 0..*outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + c]);
                        }
                        acc(&mut grads[p], d);
                    }
                    offset += c;
                }
            }
            &Op::Narrow {
                x,
                outer,
                in_chunk,
                offset,
                len,
            } => {
                let mut d = vec![T::zero(); outer * in_chunk];
                for o in 0..outer {
                    d[o * in_chunk + offset..o * in_chunk + offset + len]
                        .copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                acc(&mut grads[x], d);
            }
            &Op::ExpandLeading { x, count } => {
                let n = g.len() / count;
                let mut d = vec![T::zero(); n];
                for chunk in g.chunks(n) {
                    for (a, &b) in d.iter_mut().zip(chunk) {
                        *a = *a + b;
                    }
                }
                acc(&mut grads[x], d);
            }
            &Op::Sum(x) => {
                let n = val(x).len();
                acc(&mut grads[x], vec![g[0]; n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let mut g = Graph::no_grad();
        let (va, vb) = (g.param(&a), g.param(&b));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = t(&[2, 2], &[0.3, -1.5, 2.25, 7.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let z = Tensor::<f64>::zeros(&[2, 2]);
        let mut g = Graph::no_grad();
        let (vm, vi, vz) = (g.param(&m), g.param(&id), g.param(&z));
        let c = g.matmul(vi, vm).unwrap();
        assert_eq!(g.value(c), m.data());
        let c = g.matmul(vz, vm).unwrap();
        assert!(g.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let mut g = Graph::no_grad();
        let (va, vb) = (g.param(&a), g.param(&b));
        let msg = g.matmul(va, vb).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::<f64>::no_grad();
        let u = g.constant(&[1, 10], vec![0.7; 10]).unwrap();
        let l = g.cross_entropy(u, &[3]).unwrap();
        assert_abs_diff_eq!(g.value(l)[0], 10f64.ln(), epsilon = 1e-12);

        let two = g.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let l = g.cross_entropy(two, &[0]).unwrap();
        assert_abs_diff_eq!(g.value(l)[0], 2f64.ln(), epsilon = 1e-12);

        let mut big = vec![0.0; 10];
        big[4] = 1e4;
        let sat = g.constant(&[1, 10], big).unwrap();
        let l = g.cross_entropy(sat, &[4]).unwrap();
        assert!(g.value(l)[0].abs() < 1e-12);

        assert!(matches!(
            g.cross_entropy(sat, &[10]),
            Err(Error::Index { what: "label", .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::no_grad();
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = Tensor::<f64>::zeros(&[2]);
        let bias = t(&[2], &[0.25, -3.0]);
        let (vg, vz, vb) = (g.param(&ones), g.param(&zeros), g.param(&bias));

        let x = g.constant(&[1, 2], vec![1.0, 3.0]).unwrap();
        let y = g.layer_norm(x, vg, vz, 1e-12).unwrap();
        assert_abs_diff_eq!(g.value(y)[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.value(y)[1], 1.0, epsilon = 1e-9);

        let c = g.constant(&[1, 2], vec![5.0, 5.0]).unwrap();
        let y = g.layer_norm(c, vg, vz, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0]);

        let y = g.layer_norm(x, vz, vb, 1e-5).unwrap();
        assert_eq!(g.value(y), bias.data());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        // loss = sum(W·x) with x fixed: dW[i][j] = x[j]
        let w = t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).with_requires_grad(true);
        let x = t(&[3, 1], &[2.0, -1.0, 0.5]);
        let mut g = Graph::new();
        let (vw, vx) = (g.param(&w), g.param(&x));
        let y = g.matmul(vw, vx).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(&w).unwrap(), &[2.0, -1.0, 0.5, 2.0, -1.0, 0.5]);
        assert!(grads.get(&x).is_none());

        // loss = ||W||^2: dW = 2W
        let mut g = Graph::new();
        let vw = g.param(&w);
        let sq = g.mul(vw, vw).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let want: Vec<f64> = w.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(&w).unwrap(), want.as_slice());
    }

    #[test]
    fn backward_independent_leaf_gets_zero() {
        let w = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let u = t(&[2], &[3.0, 4.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let (vw, vu) = (g.param(&w), g.param(&u));
        let s = g.sum(vw);
        let z = g.scale(vu, 0.0);
        let zs = g.sum(z);
        let loss = g.add(s, zs).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(&u).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_identity_chain_is_one() {
        let x = t(&[1], &[4.2]).with_requires_grad(true);
        let mut g = Graph::new();
        let vx = g.param(&x);
        let r = g.reshape(vx, &[1]).unwrap();
        let grads = g.backward(r).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0]);

        let mut g = Graph::new();
        let vx = g.param(&x);
        let grads = g.backward(vx).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let w = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        let c = t(&[2], &[1.0, 2.0]);

        let mut g = Graph::new();
        let vw = g.param(&w);
        assert!(matches!(g.backward(vw), Err(Error::Contract(_))), "non-scalar");

        let mut g = Graph::new();
        let vc = g.param(&c);
        let s = g.sum(vc);
        assert!(matches!(g.backward(s), Err(Error::Contract(_))), "detached");

        let mut g = Graph::new();
        let vw = g.param(&w);
        let s = g.sum(vw);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))), "second pass");

        let mut g = Graph::no_grad();
        let vw = g.param(&w);
        let s = g.sum(vw);
        assert!(matches!(g.backward(s), Err(Error::Contract(_))), "no-grad");
    }

    #[test]
    fn gradient_write_rejects_accumulation() {
        let mut w = t(&[2], &[1.0, 2.0]).with_requires_grad(true);
        for round in 0..2 {
            let mut grads = {
                let mut g = Graph::new();
                let vw = g.param(&w);
                let s = g.sum(vw);
                g.backward(s).unwrap()
            };
            let res = grads.write_into(&mut w);
            if round == 0 {
                assert!(res.unwrap());
            } else {
                assert!(res.is_err());
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::no_grad();
        let x = g
            .constant(&[2, 3], vec![1.0, 2.0, 3.0, -1e3, 0.0, 1e3])
            .unwrap();
        let y = g.softmax(x);
        for row in g.value(y).chunks(3) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn permute_concat_narrow_shapes() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.constant(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let p = g.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(g.shape(p), &[3, 2, 4]);
        assert_eq!(&g.value(p)[..8], &[0., 1., 2., 3., 12., 13., 14., 15.]);
        let c = g.concat(&[x, x], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 6, 4]);
        let n = g.narrow(c, 1, 3, 3).unwrap();
        assert_eq!(g.value(n), g.value(x));
        let e = g.expand_leading(x, 3).unwrap();
        assert_eq!(g.shape(e), &[3, 2, 3, 4]);
    }
}
