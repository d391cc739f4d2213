use std::borrow::Cow;

use super::{dropout_mask, AffineBlock, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Tape variables for one affine block.
#[derive(Debug, Clone, Copy)]
pub struct BoundAffine {
    pub weight: Var,
    pub bias: Var,
}

/// One weighted row transfer `out[target] += weight * sources[source][row]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixEntry {
    pub target: usize,
    pub source: usize,
    pub row: usize,
    pub weight: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    MatMulT { a: Var, b: Var },
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sum(Var),
    Concat { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Mean(Vec<Var>),
    RepeatRows(Var),
    Rows { x: Var, idx: Vec<usize> },
    GroupMax { x: Var, argmax: Vec<Option<usize>> },
    Mix { sources: Vec<Var>, entries: Vec<MixEntry> },
    ComplementSum { x: Var, excluded: Vec<Vec<usize>>, weights: Vec<f64> },
    MaskedNll { logits: Var, include: Vec<bool>, gold: usize, probs: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Parameters are borrowed, never copied; one tape is
/// built per sample and dropped after its backward pass.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    params: Vec<Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, expected: &[usize], found: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

/// `y[n,m] = a[n,k] * b[m,k]^T`
fn gemm_nt(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        let yr = &mut y[i * m..(i + 1) * m];
        for (j, out) in yr.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *out = ar.iter().zip(br).map(|(p, q)| p * q).sum();
        }
    }
    y
}

/// `y[n,m] += a[n,k] * b[k,m]`
fn gemm_nn_acc(y: &mut [f64], a: &[f64], n: usize, k: usize, b: &[f64], m: usize) {
    for i in 0..n {
        let yr = &mut y[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            for (o, v) in yr.iter_mut().zip(br) {
                *o += s * v;
            }
        }
    }
}

/// `y[n,m] += a[k,n]^T * b[k,m]`
fn gemm_tn_acc(y: &mut [f64], a: &[f64], k: usize, n: usize, b: &[f64], m: usize) {
    for p in 0..k {
        let ar = &a[p * n..(p + 1) * n];
        let br = &b[p * m..(p + 1) * m];
        for (i, &s) in ar.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            let yr = &mut y[i * m..(i + 1) * m];
            for (o, v) in yr.iter_mut().zip(br) {
                *o += s * v;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a borrowed trainable tensor.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    /// Records an owned trainable tensor (for gradient checks on free inputs).
    pub fn param_owned(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    pub fn bind_affine(&mut self, block: &'p AffineBlock) -> BoundAffine {
        BoundAffine {
            weight: self.param(&block.weight),
            bias: self.param(&block.bias),
        }
    }

    /// Parameter leaves in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `x W^T + b` for `x` of shape `[in]` or `[n, in]`.
    pub fn affine(&mut self, x: Var, block: BoundAffine) -> Result<Var> {
        let (xv, wv, bv) = (self.val(x), self.val(block.weight), self.val(block.bias));
        let (out, inp) = wv.dims2();
        let (n, k) = xv.dims2();
        if k != inp || bv.shape() != [out] || xv.shape().is_empty() {
            return Err(shape_err("affine", &[inp], xv.shape()));
        }
        let mut y = gemm_nt(xv.data(), n, k, wv.data(), out);
        for row in y.chunks_mut(out) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let shape = if xv.shape().len() == 1 {
            vec![out]
        } else {
            vec![n, out]
        };
        let t = Tensor::new(shape, y)?;
        self.push(
            t,
            Op::Affine {
                x,
                w: block.weight,
                b: block.bias,
            },
            &[x, block.weight, block.bias],
            "affine",
        )
    }

    /// Matrix product `[n,k] x [k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.dims2().1 != bv.dims2().0 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let ((n, k), (_, m)) = (av.dims2(), bv.dims2());
        let mut y = vec![0.0; n * m];
        gemm_nn_acc(&mut y, av.data(), n, k, bv.data(), m);
        let t = Tensor::matrix(n, m, y)?;
        self.push(t, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// Matrix product with transposed right operand, `[n,k] x [m,k]^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.dims2().1 != bv.dims2().1 {
            return Err(shape_err("matmul_t", av.shape(), bv.shape()));
        }
        let ((n, k), (m, _)) = (av.dims2(), bv.dims2());
        let y = gemm_nt(av.data(), n, k, bv.data(), m);
        let t = Tensor::matrix(n, m, y)?;
        self.push(t, Op::MatMulT { a, b }, &[a, b], "matmul_t")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let xv = self.val(x);
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(t, op, &[x], name)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c), "scale")
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| 1.0 - v, Op::OneMinus(x), "one_minus")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect(),
        };
        self.push(t, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b), "mul")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    /// Concatenation along the last axis. Vectors concatenate into a vector;
    /// matrices must agree on row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let rank = self.val(*first).shape().len();
        let rows = self.val(*first).dims2().0;
        let mut width = 0;
        for p in parts {
            let v = self.val(*p);
            if v.shape().len() != rank || v.dims2().0 != rows || rank == 0 {
                return Err(shape_err("concat", self.val(*first).shape(), v.shape()));
            }
            width += v.dims2().1;
        }
        let mut data = vec![0.0; rows * width];
        let mut offset = 0;
        for p in parts {
            let v = self.val(*p);
            let c = v.dims2().1;
            for r in 0..rows {
                data[r * width + offset..r * width + offset + c].copy_from_slice(v.row(r));
            }
            offset += c;
        }
        let shape = if rank == 1 { vec![width] } else { vec![rows, width] };
        let t = Tensor::new(shape, data)?;
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
            "concat",
        )
    }

    /// Columns `start..end` along the last axis; the inverse of [`Tape::concat`].
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.val(x);
        let (rows, cols) = xv.dims2();
        if start > end || end > cols || xv.shape().is_empty() {
            return Err(shape_err("slice_cols", &[start, end], xv.shape()));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let shape = if xv.shape().len() == 1 {
            vec![w]
        } else {
            vec![rows, w]
        };
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("mean of nothing".into()))?;
        let shape = self.val(*first).shape().to_vec();
        let mut acc = vec![0.0; self.val(*first).len()];
        for x in xs {
            let v = self.val(*x);
            if v.shape() != shape.as_slice() {
                return Err(shape_err("mean", &shape, v.shape()));
            }
            for (a, b) in acc.iter_mut().zip(v.data()) {
                *a += b;
            }
        }
        let n = xs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let t = Tensor::new(shape, acc)?;
        self.push(t, Op::Mean(xs.to_vec()), xs, "mean")
    }

    /// Stacks `n` copies of a vector into an `n x k` matrix.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.val(x);
        if xv.shape().len() != 1 {
            return Err(shape_err("repeat_rows", &[xv.len()], xv.shape()));
        }
        let k = xv.len();
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let t = Tensor::matrix(n, k, data)?;
        self.push(t, Op::RepeatRows(x), &[x], "repeat_rows")
    }

    /// Gathers rows of a matrix (repeats allowed).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.val(x);
        let (r, c) = xv.dims2();
        if xv.shape().len() != 2 || idx.iter().any(|&i| i >= r) {
            return Err(shape_err("rows", &[r, c], &[idx.len()]));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, data)?;
        self.push(
            t,
            Op::Rows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
            "rows",
        )
    }

    /// Per-group maximum over the elements of `x` (a vector or an `n x 1`
    /// column). Empty groups yield the constant `fill` with no gradient.
    /// Ties go to the lowest index. Returns the argmax of every group too.
    pub fn group_max(
        &mut self,
        x: Var,
        groups: &[Vec<usize>],
        fill: f64,
    ) -> Result<(Var, Vec<Option<usize>>)> {
        let xv = self.val(x);
        let (r, c) = xv.dims2();
        let n = if xv.shape().len() == 2 {
            if c != 1 {
                return Err(shape_err("group_max", &[r, 1], xv.shape()));
            }
            r
        } else {
            xv.len()
        };
        let mut out = Vec::with_capacity(groups.len());
        let mut argmax = Vec::with_capacity(groups.len());
        for g in groups {
            let mut best: Option<usize> = None;
            for &i in g {
                if i >= n {
                    return Err(shape_err("group_max", &[n], &[i]));
                }
                best = match best {
                    Some(b) if xv.data()[b] > xv.data()[i] || (xv.data()[b] == xv.data()[i] && b < i) => {
                        Some(b)
                    }
                    _ => Some(i),
                };
            }
            out.push(best.map_or(fill, |b| xv.data()[b]));
            argmax.push(best);
        }
        let t = Tensor::vector(out);
        let v = self.push(
            t,
            Op::GroupMax {
                x,
                argmax: argmax.clone(),
            },
            &[x],
            "group_max",
        )?;
        Ok((v, argmax))
    }

    /// Maximum of a vector and its (lowest) argmax.
    pub fn max(&mut self, x: Var) -> Result<(Var, usize)> {
        let n = self.val(x).len();
        if n == 0 {
            return Err(TensorError::Invalid("max of empty tensor".into()));
        }
        let (v, arg) = self.group_max(x, &[(0..n).collect()], 0.0)?;
        let s = self.slice_cols(v, 0, 1)?;
        let scalar = self.sum(s)?;
        Ok((scalar, arg[0].expect("non-empty group")))
    }

    /// Sparse row mixing into an `rows x d` output:
    /// `out[e.target] += e.weight * sources[e.source][e.row]`.
    pub fn mix(&mut self, sources: &[Var], entries: Vec<MixEntry>, rows: usize) -> Result<Var> {
        let d = self.val(sources[0]).dims2().1;
        for s in sources {
            let v = self.val(*s);
            if v.shape().len() != 2 || v.dims2().1 != d {
                return Err(shape_err("mix", &[d], v.shape()));
            }
        }
        let mut out = vec![0.0; rows * d];
        for e in &entries {
            let src = self.val(sources[e.source]);
            if e.target >= rows || e.row >= src.dims2().0 {
                return Err(shape_err("mix", &[rows], &[e.target, e.row]));
            }
            let o = &mut out[e.target * d..(e.target + 1) * d];
            for (a, b) in o.iter_mut().zip(src.row(e.row)) {
                *a += e.weight * b;
            }
        }
        let t = Tensor::matrix(rows, d, out)?;
        self.push(
            t,
            Op::Mix {
                sources: sources.to_vec(),
                entries,
            },
            sources,
            "mix",
        )
    }

    /// For each row `i`: `weights[i] * (sum_j x_j - x_i - sum_{j in excluded[i]} x_j)`.
    /// Sums over the complement of a neighbourhood without enumerating it.
    pub fn complement_sum(&mut self, x: Var, excluded: Vec<Vec<usize>>, weights: Vec<f64>) -> Result<Var> {
        let xv = self.val(x);
        let (n, d) = xv.dims2();
        if xv.shape().len() != 2 || excluded.len() != n || weights.len() != n {
            return Err(shape_err("complement_sum", &[n, d], &[excluded.len()]));
        }
        let mut total = vec![0.0; d];
        for r in 0..n {
            for (t, v) in total.iter_mut().zip(xv.row(r)) {
                *t += v;
            }
        }
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let o = &mut out[i * d..(i + 1) * d];
            o.copy_from_slice(&total);
            for (a, b) in o.iter_mut().zip(xv.row(i)) {
                *a -= b;
            }
            for &j in &excluded[i] {
                if j >= n || j == i {
                    return Err(TensorError::Invalid(format!("complement_sum: bad exclusion {j} for row {i}")));
                }
                for (a, b) in o.iter_mut().zip(xv.row(j)) {
                    *a -= b;
                }
            }
            o.iter_mut().for_each(|a| *a *= weights[i]);
        }
        let t = Tensor::matrix(n, d, out)?;
        self.push(
            t,
            Op::ComplementSum {
                x,
                excluded,
                weights,
            },
            &[x],
            "complement_sum",
        )
    }

    /// `-log softmax(logits)[gold]` with the softmax restricted to `include`.
    pub fn masked_nll(&mut self, logits: Var, include: &[bool], gold: usize) -> Result<Var> {
        let lv = self.val(logits);
        if lv.shape().len() != 1 || include.len() != lv.len() || gold >= lv.len() || !include[gold] {
            return Err(TensorError::Invalid(
                "masked_nll: gold must be an included entry of a logit vector".into(),
            ));
        }
        let max = lv
            .data()
            .iter()
            .zip(include)
            .filter(|(_, &inc)| inc)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv
            .data()
            .iter()
            .zip(include)
            .map(|(v, &inc)| if inc { (v - max).exp() } else { 0.0 })
            .collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(lv.data()[gold] - max - z.ln());
        self.push(
            Tensor::scalar(loss),
            Op::MaskedNll {
                logits,
                include: include.to_vec(),
                gold,
                probs,
            },
            &[logits],
            "masked_nll",
        )
    }

    /// Inverted dropout with a seeded mask; `training == false` is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.val(x).len(), rate, seed)?;
        let xv = self.val(x);
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        self.push(t, Op::Dropout { x, mask }, &[x], "dropout")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let g = g.map(|data| Tensor {
                shape: node.value.shape().to_vec(),
                data,
            });
            if let Some(t) = &g {
                if !t.is_finite() {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
            out.push(g);
        }
        Ok(Gradients { grads: out })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (out, inp) = wv.dims2();
                let n = xv.dims2().0;
                if let Some(gx) = self.acc(grads, *x) {
                    gemm_nn_acc(gx, g, n, out, wv.data(), inp);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm_tn_acc(gw, g, n, out, xv.data(), inp);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(out) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let ((n, k), (_, m)) = (av.dims2(), bv.dims2());
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dY B^T
                    let t = gemm_nt(g, n, m, bv.data(), k);
                    ga.iter_mut().zip(t).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn_acc(gb, av.data(), n, k, g, m);
                }
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let ((n, k), (m, _)) = (av.dims2(), bv.dims2());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nn_acc(ga, g, n, m, bv.data(), k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn_acc(gb, g, n, m, av.data(), k);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gy), s) in gx.iter_mut().zip(g).zip(y.data()) {
                        *a += gy * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gy), t) in gx.iter_mut().zip(g).zip(y.data()) {
                        *a += gy * (1.0 - t * t);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(p, q)| *p -= q);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.val(*b).data();
                    for ((p, q), r) in ga.iter_mut().zip(g).zip(bv) {
                        *p += q * r;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.val(*a).data();
                    for ((p, q), r) in gb.iter_mut().zip(g).zip(av) {
                        *p += q * r;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += c * q);
                }
            }
            Op::OneMinus(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p -= q);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|p| *p += g[0]);
                }
            }
            Op::Concat { parts } => {
                let (rows, width) = y.dims2();
                let mut offset = 0;
                for p in parts {
                    let c = self.val(*p).dims2().1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..rows {
                            let src = &g[r * width + offset..r * width + offset + c];
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, w) = y.dims2();
                let cols = self.val(*x).dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mean(xs) => {
                let n = xs.len() as f64;
                for x in xs {
                    if let Some(gx) = self.acc(grads, *x) {
                        gx.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
                    }
                }
            }
            Op::RepeatRows(x) => {
                let k = self.val(*x).len();
                if let Some(gx) = self.acc(grads, *x) {
                    for row in g.chunks(k) {
                        gx.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Rows { x, idx } => {
                let c = self.val(*x).dims2().1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::GroupMax { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (gi, am) in argmax.iter().enumerate() {
                        if let Some(i) = am {
                            gx[*i] += g[gi];
                        }
                    }
                }
            }
            Op::Mix { sources, entries } => {
                let d = y.dims2().1;
                for (si, s) in sources.iter().enumerate() {
                    if let Some(gs) = self.acc(grads, *s) {
                        for e in entries.iter().filter(|e| e.source == si) {
                            gs[e.row * d..(e.row + 1) * d]
                                .iter_mut()
                                .zip(&g[e.target * d..(e.target + 1) * d])
                                .for_each(|(a, b)| *a += e.weight * b);
                        }
                    }
                }
            }
            Op::ComplementSum {
                x,
                excluded,
                weights,
            } => {
                let (n, d) = y.dims2();
                if let Some(gx) = self.acc(grads, *x) {
                    // d out_i / d x_j = w_i for j outside {i} U excluded[i].
                    let mut total = vec![0.0; d];
                    for i in 0..n {
                        for (t, v) in total.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *t += weights[i] * v;
                        }
                    }
                    for j in 0..n {
                        let gj = &mut gx[j * d..(j + 1) * d];
                        gj.iter_mut().zip(&total).for_each(|(a, b)| *a += b);
                        gj.iter_mut()
                            .zip(&g[j * d..(j + 1) * d])
                            .for_each(|(a, b)| *a -= weights[j] * b);
                    }
                    for (i, ex) in excluded.iter().enumerate() {
                        for &j in ex {
                            let (gi, w) = (&g[i * d..(i + 1) * d], weights[i]);
                            gx[j * d..(j + 1) * d]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(a, b)| *a -= w * b);
                        }
                    }
                }
            }
            Op::MaskedNll {
                logits,
                include,
                gold,
                probs,
            } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, (p, inc)) in probs.iter().zip(include).enumerate() {
                        if *inc {
                            let target = if i == *gold { 1.0 } else { 0.0 };
                            gl[i] += g[0] * (p - target);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += b * m;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients of one backward pass, indexed by tape variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every parameter leaf of `tape`, in registration order.
    /// Parameters the loss never reached get zeros.
    pub fn param_grads(&self, tape: &Tape<'_>) -> Vec<Tensor> {
        tape.params()
            .iter()
            .map(|&v| {
                self.get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tv(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn affine_examples() {
        let eye = AffineBlock::new(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), tv(&[0.0, 0.0])).unwrap();
        let zero_w = AffineBlock::new(Tensor::zeros(&[2, 2]), tv(&[1.0, 1.0])).unwrap();
        let hand = AffineBlock::new(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), tv(&[0.5, -0.5])).unwrap();
        let cases = [
            (&eye, [3.0, 4.0], [3.0, 4.0]),
            (&zero_w, [9.0, 9.0], [1.0, 1.0]),
            (&hand, [1.0, 1.0], [3.5, 6.5]),
        ];
        for (block, x, want) in cases {
            let mut tape = Tape::new();
            let b = tape.bind_affine(block);
            let xv = tape.constant(tv(&x));
            let y = tape.affine(xv, b).unwrap();
            assert_eq!(tape.value(y).data(), &want);
        }
    }

    #[test]
    fn affine_rejects_dim_mismatch() {
        let block = AffineBlock::zeros(3, 2);
        let mut tape = Tape::new();
        let b = tape.bind_affine(&block);
        let x = tape.constant(tv(&[1.0, 2.0]));
        assert!(matches!(tape.affine(x, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(t).item(), 0.0);
        let a = tape.constant(tv(&[2.0, 3.0]));
        let b = tape.constant(tv(&[4.0, 5.0]));
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[8.0, 15.0]);
        let c = tape.constant(tv(&[1.0]));
        assert!(tape.mul(a, c).is_err());
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn max_returns_argmax_with_lowest_index_ties() {
        let mut tape = Tape::new();
        let x = tape.constant(tv(&[1.0, 5.0, 5.0, -2.0]));
        let (m, arg) = tape.max(x).unwrap();
        assert_eq!(tape.value(m).item(), 5.0);
        assert_eq!(arg, 1);
        let single = tape.constant(tv(&[7.5]));
        let (m, arg) = tape.max(single).unwrap();
        assert_eq!((tape.value(m).item(), arg), (7.5, 0));
    }

    #[test]
    fn concat_then_slice_is_identity_and_mean_of_equals() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let a2 = tape.slice_cols(c, 0, 2).unwrap();
        let b2 = tape.slice_cols(c, 2, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
        let v = tape.constant(tv(&[0.3, -1.2]));
        let m = tape.mean(&[v, v, v]).unwrap();
        assert!(tape.value(m).max_abs_diff(tape.value(v)) < 1e-15);
    }

    #[test]
    fn backward_quadratic_and_sigmoid() {
        let mut tape = Tape::new();
        let x = tape.param_owned(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
        assert_eq!(g.get(sq).unwrap().item(), 1.0);

        let mut tape = Tape::new();
        let x = tape.param_owned(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param_owned(tv(&[1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn non_finite_values_abort() {
        let mut tape = Tape::new();
        let x = tape.constant(tv(&[1e308]));
        assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn complement_sum_equals_naive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 7;
        let d = 3;
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let excluded: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && (i + j) % 3 == 0).collect())
            .collect();
        let weights: Vec<f64> = (0..n).map(|i| 1.0 / (i + 1) as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(n, d, data.clone()).unwrap());
        let fast = tape.complement_sum(x, excluded.clone(), weights.clone()).unwrap();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if j != i && !excluded[i].contains(&j) {
                    entries.push(MixEntry {
                        target: i,
                        source: 0,
                        row: j,
                        weight: weights[i],
                    });
                }
            }
        }
        let naive = tape.mix(&[x], entries, n).unwrap();
        assert!(tape.value(fast).max_abs_diff(tape.value(naive)) < 1e-12);
    }

    #[test]
    fn masked_nll_excludes_masked_entries() {
        let mut tape = Tape::new();
        let l = tape.param_owned(tv(&[0.0, 0.0, 50.0, 0.0]));
        let loss = tape.masked_nll(l, &[true, true, false, true], 0).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        let gl = g.get(l).unwrap().data();
        assert_eq!(gl[2], 0.0);
        assert!((gl[0] + 2.0 / 3.0).abs() < 1e-12);
        assert!(tape.masked_nll(l, &[true, true, false, true], 2).is_err());
    }
}
