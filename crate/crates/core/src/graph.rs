//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward evaluation; calling
//! [`Graph::backward`] walks the record in reverse and returns gradients for
//! every parameter and every gradient-tracking input that influenced the
//! seed. Parameters are read from a borrowed [`ParamStore`], so building a
//! graph never copies weights.
//!
//! Operations that the transformer stacks need in bulk (layer norm,
//! segment-wise multi-head attention, softmax cross-entropy) are fused into
//! single nodes with hand-written backward passes; everything is verified
//! against central finite differences in the tests at the bottom of this
//! file.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a batched attention call.
///
/// Rows of the query/key/value matrices are split into consecutive segments;
/// attention never crosses a segment boundary.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Row count of each consecutive segment; must sum to the row count.
    pub segments: Vec<usize>,
    /// Per-row key validity (false = padding, never attended to).
    pub key_mask: Option<Vec<bool>>,
    /// When set, a row never attends to itself. A row left without any valid
    /// key produces a zero output.
    pub exclude_self: bool,
}

impl AttentionSpec {
    pub fn new(heads: usize, segments: Vec<usize>) -> Self {
        Self {
            heads,
            segments,
            key_mask: None,
            exclude_self: false,
        }
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        self.key_mask = Some(mask);
        self
    }

    pub fn excluding_self(mut self) -> Self {
        self.exclude_self = true;
        self
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    AddAtRows {
        x: Var,
        y: Var,
        idx: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        weights: Tensor,
        probs: Tensor,
    },
    LinComb(Vec<(Var, f64)>),
    Sum(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is reported by [`Grads::grad`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul inner dimension");
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(1.0, av, false, bv, false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt inner dimension");
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(1.0, av, false, bv, true, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape");
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds the `1 x cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let mut out = self.value(a).clone();
        let rv = self.value(r);
        assert_eq!((1, out.cols()), rv.shape(), "add_row shape");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(out, Op::AddRow(a, r), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = gelu(*x);
        }
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with `1 x cols` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, m));
        assert_eq!(b.shape(), (1, m));
        let mut xhat = Tensor::zeros(n, m);
        let mut out = Tensor::zeros(n, m);
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for j in 0..m {
                xh[j] = (row[j] - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..m {
                o[j] = xh[j] * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Segment-wise scaled dot-product attention over already projected
    /// queries, keys and values (all `rows x (heads * head_dim)`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = qv.shape();
        assert_eq!(kv.shape(), (n, dm));
        assert_eq!(vv.shape(), (n, dm));
        assert_eq!(spec.segments.iter().sum::<usize>(), n, "segments must cover all rows");
        assert_eq!(dm % spec.heads, 0, "model width must divide into heads");
        if let Some(mask) = &spec.key_mask {
            assert_eq!(mask.len(), n);
        }
        let dh = dm / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, dm);
        let mut probs =
            Vec::with_capacity(spec.segments.iter().map(|l| l * l * spec.heads).sum());
        let mut scores = Vec::new();
        let mut offset = 0;
        for &len in &spec.segments {
            for h in 0..spec.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let qi = &qv.row(offset + i)[cols.clone()];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        let allowed = spec.key_mask.as_ref().map_or(true, |m| m[offset + j])
                            && !(spec.exclude_self && i == j);
                        let s = if allowed {
                            dot(qi, &kv.row(offset + j)[cols.clone()]) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(s);
                        scores.push(s);
                    }
                    if max == f64::NEG_INFINITY {
                        probs.extend(std::iter::repeat(0.0).take(len));
                        continue;
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let orow = &mut out.row_mut(offset + i)[cols.clone()];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs.push(p);
                        if p != 0.0 {
                            for (o, x) in orow.iter_mut().zip(&vv.row(offset + j)[cols.clone()]) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
            offset += len;
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
        )
    }

    /// Row `r` of the output is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        self.push(out, Op::GatherRows { x, idx }, rg)
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        self.gather_rows(x, (start..start + len).collect())
    }

    /// Copy of `x` with row `r` of `y` added onto row `idx[r]`.
    pub fn add_at_rows(&mut self, x: Var, y: Var, idx: Vec<usize>) -> Var {
        let mut out = self.value(x).clone();
        let yv = self.value(y);
        assert_eq!(yv.rows(), idx.len());
        for (r, &i) in idx.iter().enumerate() {
            for (o, a) in out.row_mut(i).iter_mut().zip(yv.row(r)) {
                *o += a;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(out, Op::AddAtRows { x, y, idx }, rg)
    }

    /// Mean of each consecutive segment of rows.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<usize>) -> Var {
        let xv = self.value(x);
        assert_eq!(segments.iter().sum::<usize>(), xv.rows());
        let mut out = Tensor::zeros(segments.len(), xv.cols());
        let mut offset = 0;
        for (s, &len) in segments.iter().enumerate() {
            let o = out.row_mut(s);
            for i in offset..offset + len {
                for (a, b) in o.iter_mut().zip(xv.row(i)) {
                    *a += b;
                }
            }
            for a in o.iter_mut() {
                *a /= len as f64;
            }
            offset += len;
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentMean { x, segments }, rg)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in &parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let out = Tensor::from_vec(rows, cols, data).expect("consistent shape");
        self.push(out, Op::ConcatRows(parts), rg)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = dot(row, row).sqrt().max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Weighted softmax cross-entropy, returned as a `1 x 1` scalar:
    /// `sum_ij w_ij * (logsumexp_j(x_i) - x_ij)`.
    ///
    /// Columns whose logit is `-inf` are excluded from the partition sum
    /// (their weight must be zero).
    pub fn softmax_xent(&mut self, logits: Var, weights: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), weights.shape());
        let mut probs = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for i in 0..lv.rows() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            let pr = probs.row_mut(i);
            for j in 0..row.len() {
                pr[j] = (row[j] - lse).exp();
                let w = weights.get(i, j);
                if w != 0.0 {
                    total += w * (lse - row[j]);
                }
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::row_vector(&[total]),
            Op::SoftmaxXent {
                logits,
                weights,
                probs,
            },
            rg,
        )
    }

    /// `sum_i c_i * x_i` over equally shaped operands.
    pub fn lin_comb(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let shape = self.value(terms[0].0).shape();
        let mut out = Tensor::zeros(shape.0, shape.1);
        for (v, c) in &terms {
            let t = self.value(*v);
            assert_eq!(t.shape(), shape, "lin_comb shape");
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += c * x;
            }
        }
        let rg = terms.iter().any(|(v, _)| self.rg(*v));
        self.push(out, Op::LinComb(terms), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::row_vector(&[s]), Op::Sum(x), rg)
    }

    /// Gradients of a `1 x 1` node with respect to everything upstream.
    pub fn backward(&self, root: Var) -> Grads {
        let shape = self.value(root).shape();
        assert_eq!(shape, (1, 1), "backward root must be a scalar");
        self.backward_with(vec![(root, Tensor::row_vector(&[1.0]))])
    }

    /// Reverse pass seeded with explicit output gradients.
    pub fn backward_with(&self, seeds: Vec<(Var, Tensor)>) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(v).shape(), g.shape(), "seed shape");
            accumulate(&mut grads, v, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let dout = match &node.op {
                Op::Input | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, dout, &mut grads);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(pid, v)| v.map(|v| (ParamId(pid), v)))
            .collect();
        Grads {
            nodes: grads,
            params,
        }
    }

    fn backward_node(&self, node: &Node, dout: Tensor, grads: &mut [Option<Tensor>]) {
        let out = node.value.as_ref().expect("op nodes hold values");
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = slot(grads, *a, av.shape());
                    gemm(1.0, &dout, false, bv, true, 1.0, g);
                }
                if self.rg(*b) {
                    let g = slot(grads, *b, bv.shape());
                    gemm(1.0, av, true, &dout, false, 1.0, g);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = slot(grads, *a, av.shape());
                    gemm(1.0, &dout, false, bv, false, 1.0, g);
                }
                if self.rg(*b) {
                    let g = slot(grads, *b, bv.shape());
                    gemm(1.0, &dout, true, av, false, 1.0, g);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate_ref(grads, *a, &dout);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dout);
                }
            }
            Op::AddRow(a, r) => {
                if self.rg(*r) {
                    let mut colsum = Tensor::zeros(1, dout.cols());
                    for i in 0..dout.rows() {
                        for (c, d) in colsum.data_mut().iter_mut().zip(dout.row(i)) {
                            *c += d;
                        }
                    }
                    accumulate(grads, *r, colsum);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, dout);
                }
            }
            Op::Scale(a, s) => {
                let mut g = dout;
                g.scale_assign(*s);
                accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let mut g = dout;
                for (d, x) in g.data_mut().iter_mut().zip(av.data()) {
                    *d *= gelu_grad(*x);
                }
                accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                let (n, m) = xhat.shape();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = Tensor::zeros(1, m);
                    let mut db = Tensor::zeros(1, m);
                    for i in 0..n {
                        let (d, xh) = (dout.row(i), xhat.row(i));
                        for j in 0..m {
                            dg.data_mut()[j] += d[j] * xh[j];
                            db.data_mut()[j] += d[j];
                        }
                    }
                    if self.rg(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if self.rg(*beta) {
                        accumulate(grads, *beta, db);
                    }
                }
                if self.rg(*x) {
                    let g = slot(grads, *x, (n, m));
                    let mut dxhat = vec![0.0; m];
                    for i in 0..n {
                        let (d, xh) = (dout.row(i), xhat.row(i));
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for j in 0..m {
                            dxhat[j] = d[j] * gv.data()[j];
                            sum += dxhat[j];
                            sum_xh += dxhat[j] * xh[j];
                        }
                        let gr = g.row_mut(i);
                        let r = rstd[i] / m as f64;
                        for j in 0..m {
                            gr[j] += r * (m as f64 * dxhat[j] - sum - xh[j] * sum_xh);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, &dout, grads),
            Op::GatherRows { x, idx } => {
                let shape = self.value(*x).shape();
                let g = slot(grads, *x, shape);
                for (r, &i) in idx.iter().enumerate() {
                    for (a, b) in g.row_mut(i).iter_mut().zip(dout.row(r)) {
                        *a += b;
                    }
                }
            }
            Op::AddAtRows { x, y, idx } => {
                if self.rg(*y) {
                    let shape = self.value(*y).shape();
                    let g = slot(grads, *y, shape);
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, b) in g.row_mut(r).iter_mut().zip(dout.row(i)) {
                            *a += b;
                        }
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, dout);
                }
            }
            Op::SegmentMean { x, segments } => {
                let shape = self.value(*x).shape();
                let g = slot(grads, *x, shape);
                let mut offset = 0;
                for (s, &len) in segments.iter().enumerate() {
                    let inv = 1.0 / len as f64;
                    for i in offset..offset + len {
                        for (a, b) in g.row_mut(i).iter_mut().zip(dout.row(s)) {
                            *a += b * inv;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    if self.rg(*p) {
                        let chunk = dout.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(grads, *p, Tensor::from_vec(rows, cols, chunk).unwrap());
                    }
                    offset += rows;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut g = dout;
                for i in 0..g.rows() {
                    let y = out.row(i);
                    let d = g.row_mut(i);
                    let proj = dot(y, d);
                    for (dj, yj) in d.iter_mut().zip(y) {
                        *dj = (*dj - yj * proj) / norms[i];
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::SoftmaxXent {
                logits,
                weights,
                probs,
            } => {
                let scale = dout.scalar();
                let mut g = Tensor::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    let w = weights.row(i);
                    let wsum: f64 = w.iter().sum();
                    if wsum == 0.0 {
                        continue;
                    }
                    let p = probs.row(i);
                    let gr = g.row_mut(i);
                    for j in 0..p.len() {
                        gr[j] = scale * (wsum * p[j] - w[j]);
                    }
                }
                accumulate(grads, *logits, g);
            }
            Op::LinComb(terms) => {
                for (v, c) in terms {
                    if self.rg(*v) {
                        let mut g = dout.clone();
                        g.scale_assign(*c);
                        accumulate(grads, *v, g);
                    }
                }
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                accumulate(grads, *x, Tensor::full(r, c, dout.scalar()));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        dout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dm) = qv.shape();
        let dh = dm / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(n, dm);
        let mut dk = Tensor::zeros(n, dm);
        let mut dv = Tensor::zeros(n, dm);
        let mut dp = Vec::new();
        let mut offset = 0;
        let mut poff = 0;
        for &len in &spec.segments {
            for h in 0..spec.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let p = &probs[poff + (h * len + i) * len..poff + (h * len + i + 1) * len];
                    let d_o = &dout.row(offset + i)[cols.clone()];
                    dp.clear();
                    let mut c = 0.0;
                    for j in 0..len {
                        let val = if p[j] != 0.0 {
                            dot(d_o, &vv.row(offset + j)[cols.clone()])
                        } else {
                            0.0
                        };
                        c += p[j] * val;
                        dp.push(val);
                    }
                    for j in 0..len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        for (a, b) in dv.row_mut(offset + j)[cols.clone()].iter_mut().zip(d_o) {
                            *a += p[j] * b;
                        }
                        let ds = p[j] * (dp[j] - c) * scale;
                        let kj = &kv.row(offset + j)[cols.clone()];
                        for (a, b) in dq.row_mut(offset + i)[cols.clone()].iter_mut().zip(kj) {
                            *a += ds * b;
                        }
                        let qi = &qv.row(offset + i)[cols.clone()];
                        for (a, b) in dk.row_mut(offset + j)[cols.clone()].iter_mut().zip(qi) {
                            *a += ds * b;
                        }
                    }
                }
            }
            poff += spec.heads * len * len;
            offset += len;
        }
        if self.rg(q) {
            accumulate(grads, q, dq);
        }
        if self.rg(k) {
            accumulate(grads, k, dk);
        }
        if self.rg(v) {
            accumulate(grads, v, dv);
        }
    }
}

/// Result of a reverse pass.
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    /// Gradient of a node; `None` when the node did not influence the seed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grad(*v))
    }

    /// Per-parameter gradients indexed by [`ParamId::index`].
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (id, v) in &self.params {
            out[id.0] = self.nodes[v.0].take();
        }
        out
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        empty => *empty = Some(g),
    }
}

fn accumulate_ref(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        empty => *empty = Some(g.clone()),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamGroup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        use rand::Rng;
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Checks d(f)/d(input) for every input entry against central differences.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new(&store);
            let vars: Vec<Var> = ins.iter().map(|t| g.input_with_grad(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).scalar()
        };
        let h = 1e-6;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = grads.grad(vars[which]).cloned().unwrap_or(Tensor::zeros(t.rows(), t.cols()));
            for e in 0..t.len() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-6, "input {which} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Projects a matrix onto a fixed random direction to get a scalar:
    /// `sum_ij x_ij * w_ij`.
    fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
        let (r, c) = g.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.input(random(r, c, &mut rng));
        let terms = (0..r)
            .map(|i| {
                let xi = g.slice_rows(x, i, 1);
                let wi = g.slice_rows(w, i, 1);
                (g.matmul_nt(xi, wi), 1.0)
            })
            .collect();
        g.lin_comb(terms)
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.add_row(y, v[2]);
            let y = g.gelu(y);
            probe(g, y, 7)
        });
        check(vec![random(3, 4, &mut rng), random(5, 4, &mut rng)], |g, v| {
            let y = g.matmul_nt(v[0], v[1]);
            let y = g.scale(y, 0.7);
            probe(g, y, 8)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(3, 5, &mut rng), random(1, 5, &mut rng), random(1, 5, &mut rng)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            probe(g, y, 9)
        });
    }

    #[test]
    fn attention_gradients_with_masks_and_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![random(5, 4, &mut rng), random(5, 4, &mut rng), random(5, 4, &mut rng)];
        check(ins.clone(), |g, v| {
            let spec = AttentionSpec::new(2, vec![3, 2]).with_key_mask(vec![true, false, true, true, true]);
            let y = g.attention(v[0], v[1], v[2], spec);
            probe(g, y, 10)
        });
        check(ins, |g, v| {
            let spec = AttentionSpec::new(2, vec![1, 4]).excluding_self();
            let y = g.attention(v[0], v[1], v[2], spec);
            probe(g, y, 11)
        });
    }

    #[test]
    fn row_plumbing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(4, 3, &mut rng), random(2, 3, &mut rng)], |g, v| {
            let a = g.gather_rows(v[0], vec![3, 0, 0, 2]);
            let b = g.add_at_rows(a, v[1], vec![1, 1]);
            let c = g.concat_rows(vec![b, v[1]]);
            let d = g.segment_mean(c, vec![2, 1, 3]);
            let e = g.l2_normalize_rows(d);
            let f = g.lin_comb(vec![(e, 0.5), (d, -2.0)]);
            probe(g, f, 12)
        });
    }

    #[test]
    fn softmax_xent_gradient_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = Tensor::zeros(3, 4);
        w.set(0, 1, 0.5);
        w.set(0, 2, 0.5);
        w.set(2, 3, 1.0);
        check(vec![random(3, 4, &mut rng)], |g, v| g.softmax_xent(v[0], w.clone()));

        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(1, 10));
        let mut onehot = Tensor::zeros(1, 10);
        onehot.set(0, 3, 1.0);
        let l = g.softmax_xent(x, onehot);
        assert!((g.value(l).scalar() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn params_are_shared_and_receive_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamGroup::Other, 2, 2, Init::Normal(1.0), 6);
        let mut g = Graph::new(&store);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let y = g.matmul(a, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        let wv = store.value(w);
        // d/dW sum(W W) = 1 W^T + W^T 1
        let ones = Tensor::full(2, 2, 1.0);
        let mut expected = Tensor::zeros(2, 2);
        gemm(1.0, &ones, false, wv, true, 0.0, &mut expected);
        gemm(1.0, wv, true, &ones, false, 1.0, &mut expected);
        assert!(grads.param_grad(w).unwrap().max_abs_diff(&expected) < 1e-12);
    }
}
