use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::rmsnorm_rows;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    RepeatRows { x: Var, times: usize },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    RmsNorm { x: Var, gain: Option<Var>, inv_rms: Vec<T> },
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    RotatePairs { x: Var, table: Arc<RotationTable<T>> },
    Attention(Box<AttentionSaved<T>>),
    MoeMix(Box<MoeSaved<T>>),
    ColMean(Var),
    Sum(Var),
    Mean(Var),
    MseConst { x: Var, target: Vec<T> },
    DotConst { x: Var, weights: Vec<T> },
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    heads: usize,
    seq: usize,
    probs: Vec<T>,
}

struct MoeSaved<T> {
    x: Var,
    a: Var,
    b: Var,
    gates: Var,
    selection: Vec<usize>,
    top_k: usize,
    scale: T,
    hidden: Vec<T>,
}

/// Per-row cosine/sine table for pairwise channel rotation.
///
/// Row `r` of the rotated input uses table row `r % period`; pair `p` of a
/// row uses table column `p % pairs`, so one table serves every head.
#[derive(Clone, Debug)]
pub struct RotationTable<T> {
    pub period: usize,
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Deliberate backward corruption, used to prove gradient checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scale the left-operand gradient of every matmul by 1.01.
    MatmulLhs,
}

/// An eager reverse-mode tape. Nodes are appended in evaluation order, which
/// is a valid topological order for the backward sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            fault: None,
        }
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
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
        self.nodes[v.0].requires_grad
    }

    /// Registered parameters, in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf. Its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.into(), v));
        v
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let out = Tensor::from_fn(src.shape(), |i| f(src.data()[i]));
        self.push(out, op, &[x])
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor::from_fn(ta.shape(), |i| f(ta.data()[i], tb.data()[i]));
        self.push(out, op, &[a, b])
    }

    /// `a[m x k] * b[k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m x k] * b[n x k]^T`, the layout of a `[out, in]` weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 2
            && sb.len() == 2
            && if trans_b { sa[1] == sb[1] } else { sa[1] == sb[0] };
        if !ok {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if trans_b { sb[0] } else { sb[1] };
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `row` (length = last extent of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.rows_cols(x);
        if self.value(row).numel() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let (tx, tr) = (self.value(x), self.value(row));
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + tr.data()[i % d]);
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64_lossy(factor);
        self.map_unary(x, Op::Scale(x, f), |v| v * f)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.map_unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `[b, d] -> [b * times, d]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (rows, d) = self.rows_cols(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * times * d);
        for row in src.chunks_exact(d) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![rows * times, d], out).expect("consistent shape");
        self.push(value, Op::RepeatRows { x, times }, &[x])
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, d) = self.rows_cols(x);
        if len == 0 || start + len > d {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for row in src.chunks_exact(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Gathers rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("select_rows", self.shape(x), &[rows.len()]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(value, Op::SelectRows { x, rows }, &[x]))
    }

    /// RMS normalization over the last axis, with an optional gain vector.
    pub fn rmsnorm(&mut self, x: Var, gain: Option<Var>) -> Result<Var> {
        let d = self.value(x).cols();
        if let Some(g) = gain {
            if self.value(g).numel() != d {
                return Err(Error::shape("rmsnorm", self.shape(x), self.shape(g)));
            }
        }
        let ones;
        let gain_data = match gain {
            Some(g) => self.value(g).data(),
            None => {
                ones = vec![T::one(); d];
                &ones
            }
        };
        let src = self.value(x);
        let mut out = vec![T::zero(); src.numel()];
        let mut inv_rms = Vec::with_capacity(src.rows());
        rmsnorm_rows(src.data(), gain_data, d, &mut out, Some(&mut inv_rms));
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(gain).collect();
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, &inputs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let axis = src.shape().len() - 1;
        let value = super::softmax(src, axis).expect("valid axis");
        self.push(value, Op::Softmax(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Gelu(x), gelu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Silu(x), |v| v / (T::one() + (-v).exp()))
    }

    /// Rotates channel pairs `(2p, 2p + 1)` of every row by the table angle.
    pub fn rotate_pairs(&mut self, x: Var, table: Arc<RotationTable<T>>) -> Result<Var> {
        let (rows, width) = self.rows_cols(x);
        if width % (2 * table.pairs) != 0 || rows % table.period != 0 {
            return Err(Error::shape(
                "rotate_pairs",
                self.shape(x),
                &[table.period, table.pairs],
            ));
        }
        let mut out = self.value(x).data().to_vec();
        rotate_rows(&mut out, width, &table, false);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::RotatePairs { x, table }, &[x]))
    }

    /// Full bidirectional multi-head attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, heads * head_dim]`; head `h` owns
    /// columns `h * head_dim .. (h + 1) * head_dim`. Logits are scaled by
    /// `1 / sqrt(head_dim)`. Returns the mixed values and keeps the attention
    /// probabilities for the backward pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, width) = self.rows_cols(q);
        if heads == 0 || width % heads != 0 || batch == 0 || rows % batch != 0 {
            return Err(Error::shape("attention", self.shape(q), &[batch, heads]));
        }
        let seq = rows / batch;
        let dh = width / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                T::gemm(
                    seq, dh, seq, scale, &qd[off..], width, 1, &kd[off..], 1, width, T::zero(), p,
                    seq, 1,
                );
                softmax_rows_in_place(p, seq);
                T::gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    p,
                    seq,
                    1,
                    &vd[off..],
                    width,
                    1,
                    T::zero(),
                    &mut out[off..],
                    width,
                    1,
                );
            }
        }
        let value = Tensor::new(self.shape(q).to_vec(), out)?;
        let saved = AttentionSaved {
            q,
            k,
            v,
            batch,
            heads,
            seq,
            probs,
        };
        Ok(self.push(value, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Attention probabilities recorded by an [`attention`](Self::attention)
    /// node, laid out `[batch, heads, seq, seq]`.
    pub fn attention_probs(&self, node: Var) -> Option<&[T]> {
        match &self.nodes[node.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }

    /// Sparse mixture of low-rank experts.
    ///
    /// `x` is `[n, d_in]`, `a` stacks expert down-projections `[experts, r, d_in]`,
    /// `b` stacks up-projections `[experts, d_out, r]`, `gates` is `[n, experts]`
    /// and `selection` holds `top_k` expert indices per row. Row `t` of the
    /// result is `sum_j gates[t, e_j] * scale * B_{e_j} A_{e_j} x_t`.
    #[allow(clippy::too_many_arguments)]
    pub fn moe_mix(
        &mut self,
        x: Var,
        a: Var,
        b: Var,
        gates: Var,
        selection: Vec<usize>,
        top_k: usize,
        scale: f64,
    ) -> Result<Var> {
        let (n, d_in) = self.rows_cols(x);
        let (sa, sb, sg) = (self.shape(a), self.shape(b), self.shape(gates));
        if sa.len() != 3 || sb.len() != 3 || sa[2] != d_in || sb[0] != sa[0] || sb[2] != sa[1] {
            return Err(Error::shape("moe_mix", sa, sb));
        }
        let (experts, rank, d_out) = (sa[0], sa[1], sb[1]);
        if sg != [n, experts] || selection.len() != n * top_k {
            return Err(Error::shape("moe_mix", sg, &[n, experts, top_k]));
        }
        if selection.iter().any(|&e| e >= experts) {
            return Err(Error::Contract("expert index out of range".into()));
        }
        let scale = T::from_f64_lossy(scale);
        let (xd, ad, bd, gd) = (
            self.value(x).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(gates).data(),
        );
        let mut hidden = vec![T::zero(); n * top_k * rank];
        let mut out = vec![T::zero(); n * d_out];
        for t in 0..n {
            let xt = &xd[t * d_in..(t + 1) * d_in];
            let ot = &mut out[t * d_out..(t + 1) * d_out];
            for j in 0..top_k {
                let e = selection[t * top_k + j];
                let u = &mut hidden[(t * top_k + j) * rank..][..rank];
                let ae = &ad[e * rank * d_in..(e + 1) * rank * d_in];
                for (ui, arow) in u.iter_mut().zip(ae.chunks_exact(d_in)) {
                    *ui = dot(arow, xt);
                }
                let w = gd[t * experts + e] * scale;
                let be = &bd[e * d_out * rank..(e + 1) * d_out * rank];
                for (o, brow) in ot.iter_mut().zip(be.chunks_exact(rank)) {
                    *o = *o + w * dot(brow, u);
                }
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        let saved = MoeSaved {
            x,
            a,
            b,
            gates,
            selection,
            top_k,
            scale,
            hidden,
        };
        Ok(self.push(value, Op::MoeMix(Box::new(saved)), &[x, a, b, gates]))
    }

    /// Mean over rows: `[n, d] -> [d]`.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let (n, d) = self.rows_cols(x);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); d];
        for row in src.chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let nn = T::from_usize(n).unwrap();
        out.iter_mut().for_each(|o| *o = *o / nn);
        let value = Tensor::new(vec![d], out).expect("consistent shape");
        self.push(value, Op::ColMean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared difference between `x` and a constant target.
    pub fn mse_const(&mut self, x: Var, target: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if target.len() != t.numel() {
            return Err(Error::shape("mse", t.shape(), &[target.len()]));
        }
        let s = t
            .data()
            .iter()
            .zip(&target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::from_usize(t.numel()).unwrap();
        Ok(self.push(Tensor::scalar(s), Op::MseConst { x, target }, &[x]))
    }

    /// `sum_i x_i * weights_i` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.numel() {
            return Err(Error::shape("dot", t.shape(), &[weights.len()]));
        }
        let s = dot(t.data(), &weights);
        Ok(self.push(Tensor::scalar(s), Op::DotConst { x, weights }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let t = match grads[v.0].take() {
                    Some(data) => Tensor::new(self.shape(*v).to_vec(), data)?,
                    None => Tensor::zeros(self.shape(*v)),
                };
                Ok((name.clone(), t))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Gradients { params })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let alpha = match self.fault {
                        Some(BackwardFault::MatmulLhs) => T::from_f64_lossy(1.01),
                        None => T::one(),
                    };
                    // dA = G * op(B)^T
                    let (rsb, csb) = if *trans_b { (k, 1) } else { (1, n) };
                    let da = acc(grads, *a, m * k);
                    T::gemm(m, n, k, alpha, g, n, 1, bd, rsb, csb, T::one(), da, k, 1);
                }
                if self.requires_grad(*b) {
                    let db = acc(grads, *b, k * n);
                    if *trans_b {
                        // dB[n x k] = G^T * A
                        T::gemm(n, m, k, T::one(), g, 1, n, ad, k, 1, T::one(), db, k, 1);
                    } else {
                        // dB[k x n] = A^T * G
                        T::gemm(k, m, n, T::one(), ad, 1, k, g, n, 1, T::one(), db, n, 1);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, |j| g[j]);
                self.acc_map(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, |j| g[j]);
                self.acc_map(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, |j| g[j] * bd[j]);
                self.acc_map(grads, *b, |j| g[j] * ad[j]);
            }
            Op::AddRow(x, row) => {
                self.acc_map(grads, *x, |j| g[j]);
                if self.requires_grad(*row) {
                    let d = self.value(*row).numel();
                    let dr = acc(grads, *row, d);
                    for grow in g.chunks_exact(d) {
                        add_into(dr, grow);
                    }
                }
            }
            Op::Scale(x, f) => self.acc_map(grads, *x, |j| g[j] * *f),
            Op::AddScalar(x) => self.acc_map(grads, *x, |j| g[j]),
            Op::RepeatRows { x, times } => {
                if self.requires_grad(*x) {
                    let (rows, d) = self.rows_cols(*x);
                    let dx = acc(grads, *x, rows * d);
                    for (r, drow) in dx.chunks_exact_mut(d).enumerate() {
                        for t in 0..*times {
                            let src = (r * times + t) * d;
                            add_into(drow, &g[src..src + d]);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let (rows, d) = self.rows_cols(*x);
                    let len = node.value.cols();
                    let dx = acc(grads, *x, rows * d);
                    for (drow, grow) in dx.chunks_exact_mut(d).zip(g.chunks_exact(len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if self.requires_grad(*x) {
                    let (n, d) = self.rows_cols(*x);
                    let dx = acc(grads, *x, n * d);
                    for (&r, grow) in rows.iter().zip(g.chunks_exact(d)) {
                        add_into(&mut dx[r * d..(r + 1) * d], grow);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (n, d) = self.rows_cols(*x);
                let xd = self.value(*x).data();
                let gain_data = gain.map(|gv| self.value(gv).data());
                let dn = T::from_usize(d).unwrap();
                if let Some(gv) = gain.filter(|gv| self.requires_grad(*gv)) {
                    let dg = acc(grads, gv, d);
                    for r in 0..n {
                        let inv = inv_rms[r];
                        for c in 0..d {
                            dg[c] = dg[c] + g[r * d + c] * xd[r * d + c] * inv;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let dx = acc(grads, *x, n * d);
                    let mut dz = vec![T::zero(); d];
                    for r in 0..n {
                        let inv = inv_rms[r];
                        let xr = &xd[r * d..(r + 1) * d];
                        for c in 0..d {
                            let gc = gain_data.map_or(T::one(), |gd| gd[c]);
                            dz[c] = g[r * d + c] * gc;
                        }
                        let proj = (0..d).map(|c| dz[c] * xr[c] * inv).sum::<T>() / dn;
                        for c in 0..d {
                            let z = xr[c] * inv;
                            dx[r * d + c] = dx[r * d + c] + inv * (dz[c] - z * proj);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.requires_grad(*x) {
                    let d = node.value.cols();
                    let dx = acc(grads, *x, val.len());
                    for ((drow, yrow), grow) in dx
                        .chunks_exact_mut(d)
                        .zip(val.chunks_exact(d))
                        .zip(g.chunks_exact(d))
                    {
                        let s = dot(grow, yrow);
                        for c in 0..d {
                            drow[c] = drow[c] + yrow[c] * (grow[c] - s);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                self.acc_map(grads, *x, |j| g[j] * gelu_grad(xd[j]));
            }
            Op::Silu(x) => {
                let xd = self.value(*x).data();
                self.acc_map(grads, *x, |j| {
                    let s = (T::one() + (-xd[j]).exp()).recip();
                    g[j] * s * (T::one() + xd[j] * (T::one() - s))
                });
            }
            Op::RotatePairs { x, table } => {
                if self.requires_grad(*x) {
                    let width = node.value.cols();
                    let mut back = g.to_vec();
                    rotate_rows(&mut back, width, table, true);
                    let dx = acc(grads, *x, back.len());
                    add_into(dx, &back);
                }
            }
            Op::Attention(s) => self.attention_backward(s, g, grads),
            Op::MoeMix(s) => self.moe_backward(s, g, grads),
            Op::ColMean(x) => {
                let (n, d) = self.rows_cols(*x);
                let nn = T::from_usize(n).unwrap();
                self.acc_map(grads, *x, |j| g[j % d] / nn);
            }
            Op::Sum(x) => self.acc_map(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let nn = T::from_usize(self.value(*x).numel()).unwrap();
                self.acc_map(grads, *x, |_| g[0] / nn);
            }
            Op::MseConst { x, target } => {
                let xd = self.value(*x).data();
                let nn = T::from_usize(xd.len()).unwrap();
                let two = T::from_f64_lossy(2.0);
                self.acc_map(grads, *x, |j| g[0] * two * (xd[j] - target[j]) / nn);
            }
            Op::DotConst { x, weights } => self.acc_map(grads, *x, |j| g[0] * weights[j]),
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<T>>], x: Var, f: impl Fn(usize) -> T) {
        if !self.requires_grad(x) {
            return;
        }
        let dx = acc(grads, x, self.value(x).numel());
        for (j, d) in dx.iter_mut().enumerate() {
            *d = *d + f(j);
        }
    }

    fn attention_backward(&self, s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rows, width) = self.rows_cols(s.q);
        let (seq, heads) = (s.seq, s.heads);
        let dh = width / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(s.q).data(),
            self.value(s.k).data(),
            self.value(s.v).data(),
        );
        let mut dq = vec![T::zero(); rows * width];
        let mut dk = vec![T::zero(); rows * width];
        let mut dv = vec![T::zero(); rows * width];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..s.batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                let p = &s.probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dP = G V^T
                T::gemm(
                    seq, dh, seq, T::one(), &g[off..], width, 1, &vd[off..], 1, width, T::zero(),
                    &mut dp, seq, 1,
                );
                // dV = P^T G
                T::gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    p,
                    1,
                    seq,
                    &g[off..],
                    width,
                    1,
                    T::one(),
                    &mut dv[off..],
                    width,
                    1,
                );
                for (dprow, prow) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                    let rowdot = dot(dprow, prow);
                    for (d, &pv) in dprow.iter_mut().zip(prow) {
                        *d = pv * (*d - rowdot) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                T::gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    &dp,
                    seq,
                    1,
                    &kd[off..],
                    width,
                    1,
                    T::one(),
                    &mut dq[off..],
                    width,
                    1,
                );
                T::gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    &dp,
                    1,
                    seq,
                    &qd[off..],
                    width,
                    1,
                    T::one(),
                    &mut dk[off..],
                    width,
                    1,
                );
            }
        }
        for (var, d) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if self.requires_grad(var) {
                add_into(acc(grads, var, rows * width), &d);
            }
        }
    }

    fn moe_backward(&self, s: &MoeSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (n, d_in) = self.rows_cols(s.x);
        let sa = self.shape(s.a);
        let (experts, rank) = (sa[0], sa[1]);
        let d_out = self.shape(s.b)[1];
        let (xd, ad, bd, gd) = (
            self.value(s.x).data(),
            self.value(s.a).data(),
            self.value(s.b).data(),
            self.value(s.gates).data(),
        );
        let mut dx = vec![T::zero(); n * d_in];
        let mut da = vec![T::zero(); ad.len()];
        let mut db = vec![T::zero(); bd.len()];
        let mut dgates = vec![T::zero(); gd.len()];
        let mut du = vec![T::zero(); rank];
        for t in 0..n {
            let xt = &xd[t * d_in..(t + 1) * d_in];
            let gt = &g[t * d_out..(t + 1) * d_out];
            for j in 0..s.top_k {
                let e = s.selection[t * s.top_k + j];
                let u = &s.hidden[(t * s.top_k + j) * rank..][..rank];
                let be = &bd[e * d_out * rank..(e + 1) * d_out * rank];
                let w = gd[t * experts + e] * s.scale;
                // d gate = scale * <G, B u>
                let mut gdot = T::zero();
                for (o, brow) in be.chunks_exact(rank).enumerate() {
                    gdot = gdot + gt[o] * dot(brow, u);
                }
                dgates[t * experts + e] = dgates[t * experts + e] + gdot * s.scale;
                let dbe = &mut db[e * d_out * rank..(e + 1) * d_out * rank];
                du.iter_mut().for_each(|v| *v = T::zero());
                for (o, (dbrow, brow)) in dbe
                    .chunks_exact_mut(rank)
                    .zip(be.chunks_exact(rank))
                    .enumerate()
                {
                    let go = gt[o] * w;
                    for r in 0..rank {
                        dbrow[r] = dbrow[r] + go * u[r];
                        du[r] = du[r] + go * brow[r];
                    }
                }
                let ae = &ad[e * rank * d_in..(e + 1) * rank * d_in];
                let dae = &mut da[e * rank * d_in..(e + 1) * rank * d_in];
                let dxt = &mut dx[t * d_in..(t + 1) * d_in];
                for r in 0..rank {
                    let arow = &ae[r * d_in..(r + 1) * d_in];
                    let darow = &mut dae[r * d_in..(r + 1) * d_in];
                    for c in 0..d_in {
                        darow[c] = darow[c] + du[r] * xt[c];
                        dxt[c] = dxt[c] + du[r] * arow[c];
                    }
                }
            }
        }
        for (var, d) in [(s.x, dx), (s.a, da), (s.b, db), (s.gates, dgates)] {
            if self.requires_grad(var) {
                let len = d.len();
                add_into(acc(grads, var, len), &d);
            }
        }
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn softmax_rows_in_place<T: Real>(buf: &mut [T], d: usize) {
    for row in buf.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

fn rotate_rows<T: Real>(buf: &mut [T], width: usize, table: &RotationTable<T>, inverse: bool) {
    for (r, row) in buf.chunks_exact_mut(width).enumerate() {
        let tr = (r % table.period) * table.pairs;
        for (p, pair) in row.chunks_exact_mut(2).enumerate() {
            let c = table.cos[tr + p % table.pairs];
            let mut s = table.sin[tr + p % table.pairs];
            if inverse {
                s = -s;
            }
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let (k, c, half) = (
        T::from_f64_lossy(GELU_K),
        T::from_f64_lossy(GELU_C),
        T::from_f64_lossy(0.5),
    );
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (k, c, half) = (
        T::from_f64_lossy(GELU_K),
        T::from_f64_lossy(GELU_C),
        T::from_f64_lossy(0.5),
    );
    let three = T::from_f64_lossy(3.0);
    let th = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + three * c * x * x)
}
