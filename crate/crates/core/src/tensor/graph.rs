//! Tape-recorded forward pass with a reverse sweep.
//!
//! Every node is a row-major matrix. Parameters enter the tape by reference
//! (no copy) and are deduplicated, so a weight used at every time step owns a
//! single gradient buffer.

use std::borrow::Cow;

use rand::Rng;

use super::kernels::{self, all_finite, sigmoid};
use super::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over non-pad positions.
    Mean,
    Sum,
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, k: usize },
    Add(NodeId, NodeId),
    AddRow { a: NodeId, bias: NodeId },
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { src: NodeId, start: usize },
    Reshape(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    Dropout { src: NodeId, mask: Vec<F> },
    LstmCell(Box<LstmCache<F>>),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, pad: Option<usize>, scale: F, probs: Vec<F> },
    AddN(Vec<NodeId>),
}

struct LstmCache<F> {
    x: NodeId,
    h: NodeId,
    c: NodeId,
    w: NodeId,
    b: NodeId,
    input: usize,
    hidden: usize,
    xh: Vec<F>,
    gates: Vec<F>,
    tanh_c: Vec<F>,
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, [F]>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op<F>,
}

/// Gradients of a scalar loss with respect to every parameter it touched.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'a, F: Scalar> {
    store: &'a ParamStore<F>,
    nodes: Vec<Node<'a, F>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'a, F: Scalar> Graph<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.nodes[id.0].value[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<F> {
        let n = &self.nodes[id.0];
        Tensor::new(vec![n.rows, n.cols], n.value.to_vec()).expect("node dims match data")
    }

    fn push(&mut self, name: &str, value: Cow<'a, [F]>, rows: usize, cols: usize, op: Op<F>) -> Result<NodeId> {
        debug_assert_eq!(value.len(), rows * cols);
        if !all_finite(&value) {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            Op::MatMul { a, b, .. } => self.ng(*a) || self.ng(*b),
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow { a, bias: b } => self.ng(*a) || self.ng(*b),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::SliceCols { src: a, .. }
            | Op::Dropout { src: a, .. } => self.ng(*a),
            Op::ConcatCols(p) | Op::ConcatRows(p) | Op::AddN(p) => p.iter().any(|&i| self.ng(i)),
            Op::Gather { table, .. } => self.ng(*table),
            Op::LstmCell(l) => [l.x, l.h, l.c, l.w, l.b].iter().any(|&i| self.ng(i)),
            Op::CrossEntropy { logits, .. } => self.ng(*logits),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            op,
        });
        Ok(id)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        TensorError::Shape {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    /// Constant (non-trainable) input.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(TensorError::Shape {
                op: "input",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        self.push("input", Cow::Owned(data), rows, cols, Op::Leaf)
    }

    pub fn input_tensor(&mut self, t: &Tensor<F>) -> Result<NodeId> {
        let (r, c) = t.matrix_dims();
        self.input(r, c, t.data().to_vec())
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<NodeId> {
        self.input(rows, cols, vec![F::zero(); rows * cols])
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(n) = self.param_nodes[id.0] {
            return Ok(n);
        }
        let t = self.store.get(id);
        let (r, c) = t.matrix_dims();
        let n = self.push(self.store.name(id).to_string().as_str(), Cow::Borrowed(t.data()), r, c, Op::Param(id))?;
        self.param_nodes[id.0] = Some(n);
        Ok(n)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, k) = self.dims(a);
        let (k2, c) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![F::zero(); r * c];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, r, k, c);
        self.push("matmul", Cow::Owned(out), r, c, Op::MatMul { a, b, k })
    }

    fn zip_same(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Result<Vec<F>> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(name, a, b));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let (r, c) = self.dims(a);
        self.push("add", Cow::Owned(out), r, c, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let (r, c) = self.dims(a);
        self.push("mul", Cow::Owned(out), r, c, Op::Mul(a, b))
    }

    /// Adds a bias vector (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if self.value(bias).len() != c {
            return Err(self.shape_err("add_row", a, bias));
        }
        let bv = self.value(bias);
        let out: Vec<F> = self
            .value(a)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        self.push("add_row", Cow::Owned(out), r, c, Op::AddRow { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, k: F) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * k).collect();
        self.push("scale", Cow::Owned(out), r, c, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push("tanh", Cow::Owned(out), r, c, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", Cow::Owned(out), r, c, Op::Sigmoid(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if c == 0 {
            return Err(TensorError::Argument("softmax of empty input".into()));
        }
        let mut out = vec![F::zero(); r * c];
        for (src, dst) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(src, dst);
        }
        self.push("softmax", Cow::Owned(out), r, c, Op::Softmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Argument("concat of nothing".into()))?;
        let rows = self.dims(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != rows) {
            return Err(self.shape_err("concat_cols", first, bad));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push("concat_cols", Cow::Owned(out), rows, cols, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Argument("concat of nothing".into()))?;
        let cols = self.dims(first).1;
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).1 != cols) {
            return Err(self.shape_err("concat_rows", first, bad));
        }
        let rows: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push("concat_rows", Cow::Owned(out), rows, cols, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims(src);
        if start + len > c {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, start + len],
            });
        }
        let out = self
            .value(src)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        self.push("slice_cols", Cow::Owned(out), r, len, Op::SliceCols { src, start })
    }

    pub fn reshape(&mut self, src: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.dims(src);
        if r * c != rows * cols {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: vec![r, c],
                rhs: vec![rows, cols],
            });
        }
        let out = self.value(src).to_vec();
        self.push("reshape", Cow::Owned(out), rows, cols, Op::Reshape(src))
    }

    /// Embedding lookup: selects rows of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, e) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Argument(format!("id {bad} out of range for table with {v} rows")));
        }
        if ids.is_empty() {
            return Err(TensorError::Argument("gather of no ids".into()));
        }
        let tv = self.value(table);
        let out = ids.iter().flat_map(|&i| tv[i * e..(i + 1) * e].iter().copied()).collect();
        self.push(
            "gather",
            Cow::Owned(out),
            ids.len(),
            e,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Argument(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = F::lit(1.0 / (1.0 - p));
        let (r, c) = self.dims(x);
        let mask: Vec<F> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push("dropout", Cow::Owned(out), r, c, Op::Dropout { src: x, mask })
    }

    /// One LSTM step over `rows` independent sequences.
    ///
    /// `w` is `(input + hidden) × 4·hidden` with gate blocks ordered
    /// input, forget, candidate, output; `b` has `4·hidden` entries.
    /// Returns `(h, c)`.
    pub fn lstm_cell(&mut self, x: NodeId, h: NodeId, c: NodeId, w: NodeId, b: NodeId) -> Result<(NodeId, NodeId)> {
        let (rows, input) = self.dims(x);
        let (wr, wc) = self.dims(w);
        if wc % 4 != 0 || wc == 0 {
            return Err(self.shape_err("lstm_cell", w, b));
        }
        let hidden = wc / 4;
        if self.dims(h) != (rows, hidden) {
            return Err(self.shape_err("lstm_cell", h, w));
        }
        if self.dims(c) != (rows, hidden) {
            return Err(self.shape_err("lstm_cell", c, w));
        }
        if wr != input + hidden {
            return Err(self.shape_err("lstm_cell", x, w));
        }
        if self.value(b).len() != wc {
            return Err(self.shape_err("lstm_cell", b, w));
        }

        let k = input + hidden;
        let mut xh = Vec::with_capacity(rows * k);
        for r in 0..rows {
            xh.extend_from_slice(&self.value(x)[r * input..(r + 1) * input]);
            xh.extend_from_slice(&self.value(h)[r * hidden..(r + 1) * hidden]);
        }
        let mut gates = vec![F::zero(); rows * wc];
        for row in gates.chunks_mut(wc) {
            row.copy_from_slice(self.value(b));
        }
        kernels::matmul_acc(&xh, self.value(w), &mut gates, rows, k, wc);

        let mut tanh_c = vec![F::zero(); rows * hidden];
        let mut out = vec![F::zero(); rows * 2 * hidden];
        let c_prev = self.value(c);
        for r in 0..rows {
            let g = &mut gates[r * wc..(r + 1) * wc];
            for j in 0..hidden {
                g[j] = sigmoid(g[j]);
                g[hidden + j] = sigmoid(g[hidden + j]);
                g[2 * hidden + j] = g[2 * hidden + j].tanh();
                g[3 * hidden + j] = sigmoid(g[3 * hidden + j]);
                let cn = g[hidden + j] * c_prev[r * hidden + j] + g[j] * g[2 * hidden + j];
                let tc = cn.tanh();
                tanh_c[r * hidden + j] = tc;
                out[r * 2 * hidden + j] = g[3 * hidden + j] * tc;
                out[r * 2 * hidden + hidden + j] = cn;
            }
        }
        let cache = LstmCache {
            x,
            h,
            c,
            w,
            b,
            input,
            hidden,
            xh,
            gates,
            tanh_c,
        };
        let hc = self.push("lstm_cell", Cow::Owned(out), rows, 2 * hidden, Op::LstmCell(Box::new(cache)))?;
        let h_out = self.slice_cols(hc, 0, hidden)?;
        let c_out = self.slice_cols(hc, hidden, hidden)?;
        Ok((h_out, c_out))
    }

    /// Token-level negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`. Positions whose target equals `pad` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        pad: Option<usize>,
        reduction: Reduction,
    ) -> Result<NodeId> {
        let (n, v) = self.dims(logits);
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Argument(format!("target id {bad} out of range for {v} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); n * v];
        let mut total = F::zero();
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * v..(i + 1) * v];
            kernels::softmax_row(row, &mut probs[i * v..(i + 1) * v]);
            if Some(t) == pad {
                continue;
            }
            total += kernels::log_sum_exp(row) - row[t];
            count += 1;
        }
        let scale = match reduction {
            Reduction::Sum => F::one(),
            Reduction::Mean => {
                if count == 0 {
                    return Err(TensorError::Argument("cross entropy over zero non-pad targets".into()));
                }
                F::one() / F::lit(count as f64)
            }
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            pad,
            scale,
            probs,
        };
        self.push("cross_entropy", Cow::Owned(vec![total * scale]), 1, 1, op)
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Argument("sum of nothing".into()))?;
        let (r, c) = self.dims(first);
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p) != (r, c)) {
            return Err(self.shape_err("sum", first, bad));
        }
        let mut out = self.value(first).to_vec();
        for &p in &parts[1..] {
            out.iter_mut().zip(self.value(p)).for_each(|(o, &v)| *o += v);
        }
        self.push("sum", Cow::Owned(out), r, c, Op::AddN(parts.to_vec()))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(TensorError::Shape {
                op: "backward",
                lhs: vec![r, c],
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Vec<F>>> = vec![None; self.store.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    let slot = &mut param_grads[pid.0];
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul { a, b, k } => {
                    let (r, c) = (node.rows, node.cols);
                    if let Some(da) = self.buf(&mut grads, *a) {
                        kernels::matmul_bt_acc(&g, self.value(*b), da, r, *k, c);
                    }
                    if let Some(db) = self.buf(&mut grads, *b) {
                        kernels::matmul_at_acc(self.value(*a), &g, db, r, *k, c);
                    }
                }
                Op::Add(a, b) => {
                    for id in [*a, *b] {
                        if let Some(d) = self.buf(&mut grads, id) {
                            add_into(d, &g);
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    if let Some(da) = self.buf(&mut grads, *a) {
                        add_into(da, &g);
                    }
                    if let Some(db) = self.buf(&mut grads, *bias) {
                        for row in g.chunks(node.cols) {
                            add_into(db, row);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(da) = self.buf(&mut grads, *a) {
                        for ((d, &gv), &bv) in da.iter_mut().zip(&g).zip(self.value(*b)) {
                            *d += gv * bv;
                        }
                    }
                    if let Some(db) = self.buf(&mut grads, *b) {
                        for ((d, &gv), &av) in db.iter_mut().zip(&g).zip(self.value(*a)) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Scale(a, k) => {
                    if let Some(da) = self.buf(&mut grads, *a) {
                        da.iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv * *k);
                    }
                }
                Op::Tanh(a) => {
                    if let Some(da) = self.buf(&mut grads, *a) {
                        for ((d, &gv), &y) in da.iter_mut().zip(&g).zip(node.value.iter()) {
                            *d += gv * (F::one() - y * y);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(da) = self.buf(&mut grads, *a) {
                        for ((d, &gv), &y) in da.iter_mut().zip(&g).zip(node.value.iter()) {
                            *d += gv * y * (F::one() - y);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let c = node.cols;
                    if let Some(da) = self.buf(&mut grads, *a) {
                        for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                            let dot: F = grow.iter().zip(yrow).map(|(&x, &y)| x * y).sum();
                            for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += y * (gv - dot);
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.dims(p).1;
                        if let Some(dp) = self.buf(&mut grads, p) {
                            for r in 0..node.rows {
                                add_into(
                                    &mut dp[r * pc..(r + 1) * pc],
                                    &g[r * node.cols + offset..r * node.cols + offset + pc],
                                );
                            }
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if let Some(dp) = self.buf(&mut grads, p) {
                            add_into(dp, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SliceCols { src, start } => {
                    let sc = self.dims(*src).1;
                    if let Some(ds) = self.buf(&mut grads, *src) {
                        for r in 0..node.rows {
                            add_into(
                                &mut ds[r * sc + start..r * sc + start + node.cols],
                                &g[r * node.cols..(r + 1) * node.cols],
                            );
                        }
                    }
                }
                Op::Reshape(src) => {
                    if let Some(ds) = self.buf(&mut grads, *src) {
                        add_into(ds, &g);
                    }
                }
                Op::Gather { table, ids } => {
                    let e = node.cols;
                    if let Some(dt) = self.buf(&mut grads, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut dt[id * e..(id + 1) * e], &g[r * e..(r + 1) * e]);
                        }
                    }
                }
                Op::Dropout { src, mask } => {
                    if let Some(ds) = self.buf(&mut grads, *src) {
                        for ((d, &gv), &m) in ds.iter_mut().zip(&g).zip(mask) {
                            *d += gv * m;
                        }
                    }
                }
                Op::LstmCell(cache) => self.lstm_backward(cache, node.rows, &g, &mut grads),
                Op::CrossEntropy {
                    logits,
                    targets,
                    pad,
                    scale,
                    probs,
                } => {
                    let v = self.dims(*logits).1;
                    let k = g[0] * *scale;
                    if let Some(dl) = self.buf(&mut grads, *logits) {
                        for (i, &t) in targets.iter().enumerate() {
                            if Some(t) == *pad {
                                continue;
                            }
                            let row = &mut dl[i * v..(i + 1) * v];
                            for (d, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                                *d += k * p;
                            }
                            row[t] -= k;
                        }
                    }
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        if let Some(dp) = self.buf(&mut grads, p) {
                            add_into(dp, &g);
                        }
                    }
                }
            }
        }

        for g in param_grads.iter().flatten() {
            if !all_finite(g) {
                return Err(TensorError::NonFinite("backward".into()));
            }
        }
        Ok(Gradients { grads: param_grads })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<F>>], id: NodeId) -> Option<&'g mut [F]> {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn lstm_backward(&self, l: &LstmCache<F>, rows: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let hd = l.hidden;
        let wc = 4 * hd;
        let k = l.input + hd;
        let c_prev = self.value(l.c);
        let mut dz = vec![F::zero(); rows * wc];
        let mut dc_prev = vec![F::zero(); rows * hd];
        let one = F::one();
        for r in 0..rows {
            let gate = &l.gates[r * wc..(r + 1) * wc];
            let dzr = &mut dz[r * wc..(r + 1) * wc];
            for j in 0..hd {
                let (i, f, cand, o) = (gate[j], gate[hd + j], gate[2 * hd + j], gate[3 * hd + j]);
                let tc = l.tanh_c[r * hd + j];
                let dh = g[r * 2 * hd + j];
                let dc = g[r * 2 * hd + hd + j] + dh * o * (one - tc * tc);
                dzr[j] = dc * cand * i * (one - i);
                dzr[hd + j] = dc * c_prev[r * hd + j] * f * (one - f);
                dzr[2 * hd + j] = dc * i * (one - cand * cand);
                dzr[3 * hd + j] = dh * tc * o * (one - o);
                dc_prev[r * hd + j] = dc * f;
            }
        }
        if let Some(dw) = self.buf(grads, l.w) {
            kernels::matmul_at_acc(&l.xh, &dz, dw, rows, k, wc);
        }
        if let Some(db) = self.buf(grads, l.b) {
            for row in dz.chunks(wc) {
                add_into(db, row);
            }
        }
        if self.ng(l.x) || self.ng(l.h) {
            let mut dxh = vec![F::zero(); rows * k];
            kernels::matmul_bt_acc(&dz, self.value(l.w), &mut dxh, rows, k, wc);
            if let Some(dx) = self.buf(grads, l.x) {
                for r in 0..rows {
                    add_into(&mut dx[r * l.input..(r + 1) * l.input], &dxh[r * k..r * k + l.input]);
                }
            }
            if let Some(dh) = self.buf(grads, l.h) {
                for r in 0..rows {
                    add_into(&mut dh[r * hd..(r + 1) * hd], &dxh[r * k + l.input..(r + 1) * k]);
                }
            }
        }
        if let Some(dc) = self.buf(grads, l.c) {
            add_into(dc, &dc_prev);
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
