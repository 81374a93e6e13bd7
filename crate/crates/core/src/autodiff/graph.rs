use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    OuterAdd(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    LstmCell {
        gates: Var,
        c_prev: Var,
    },
    LstmOutput {
        gates: Var,
        c: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    RnntLoss {
        log_probs: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Attention probabilities saved by [`Graph::attention`], laid out as
/// `heads × queries × sources`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProbs<'a> {
    pub heads: usize,
    pub queries: usize,
    pub sources: usize,
    pub probs: &'a [f64],
}

impl AttentionProbs<'_> {
    pub fn get(&self, head: usize, query: usize, source: usize) -> f64 {
        self.probs[(head * self.queries + query) * self.sources + source]
    }

    /// Head-averaged weights, `queries × sources`.
    pub fn averaged(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.queries * self.sources];
        for h in 0..self.heads {
            let block = &self.probs[h * self.queries * self.sources..][..self.queries * self.sources];
            for (o, p) in out.iter_mut().zip(block) {
                *o += p;
            }
        }
        let inv = 1.0 / self.heads as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// Tape of primitive operations recorded in evaluation order.
///
/// Node ids grow monotonically, so every input precedes its consumer and
/// [`Graph::backward`] visits nodes in exact reverse order.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] loss w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: self.params.get(id).clone(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn out_shape_rows(a: &Tensor, cols: usize) -> Vec<usize> {
        let mut s = a.shape().to_vec();
        *s.last_mut().unwrap() = cols;
        s
    }

    fn matmul_values(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let (av, bv) = (a.values(), b.values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[l * n..(l + 1) * n];
                for (o, w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        out
    }

    /// `a · b` where `b` is a matrix and `a`'s last axis is contracted.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if bt.shape().len() != 2 || at.cols() != bt.shape()[0] {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let out = Self::matmul_values(at, bt);
        let shape = Self::out_shape_rows(at, bt.cols());
        self.push(Op::MatMul(a, b), Tensor::from_parts(shape, out), "matmul")
    }

    /// `x · w + b` with `b` broadcast across rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if wt.shape().len() != 2 || xt.cols() != wt.shape()[0] {
            return Err(Error::shape("affine", xt.shape(), wt.shape()));
        }
        if bt.shape() != [wt.cols()] {
            return Err(Error::shape("affine bias", wt.shape(), bt.shape()));
        }
        let mut out = Self::matmul_values(xt, wt);
        let n = wt.cols();
        for row in out.chunks_mut(n) {
            for (o, bias) in row.iter_mut().zip(bt.values()) {
                *o += bias;
            }
        }
        let shape = Self::out_shape_rows(xt, n);
        self.push(Op::Affine(x, w, b), Tensor::from_parts(shape, out), "affine")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str) -> Result<(&Tensor, &Tensor)> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(op, at.shape(), bt.shape()));
        }
        Ok((at, bt))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = self.zip_same(a, b, "add")?;
        let out = at.values().iter().zip(bt.values()).map(|(x, y)| x + y).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Add(a, b), Tensor::from_parts(shape, out), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = self.zip_same(a, b, "sub")?;
        let out = at.values().iter().zip(bt.values()).map(|(x, y)| x - y).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Sub(a, b), Tensor::from_parts(shape, out), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = self.zip_same(a, b, "mul")?;
        let out = at.values().iter().zip(bt.values()).map(|(x, y)| x * y).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::from_parts(shape, out), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let at = self.value(a);
        let out = at.values().iter().map(|x| x * c).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Scale(a, c), Tensor::from_parts(shape, out), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let out = at.values().iter().map(|&x| sigmoid(x)).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Sigmoid(a), Tensor::from_parts(shape, out), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let out = at.values().iter().map(|x| x.tanh()).collect();
        let shape = at.shape().to_vec();
        self.push(Op::Tanh(a), Tensor::from_parts(shape, out), "tanh")
    }

    /// Concatenates along the last axis. All inputs must have equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.value(first).rows();
        let all_vectors = parts.iter().all(|&p| self.shape(p).len() == 1);
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if all_vectors { vec![total] } else { vec![rows, total] };
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_parts(shape, out), "concat_cols")
    }

    /// Stacks inputs along the row axis. All inputs must have equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.value(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            out.extend_from_slice(t.values());
        }
        let rows = out.len() / cols;
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_parts(vec![rows, cols], out),
            "concat_rows",
        )
    }

    /// Selects rows by index (repeats allowed); output is `idx.len() × cols`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let at = self.value(a);
        let (rows, cols) = (at.rows(), at.cols());
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!("row {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(at.row(i));
        }
        self.push(
            Op::GatherRows(a, idx.to_vec()),
            Tensor::from_parts(vec![idx.len(), cols], out),
            "gather_rows",
        )
    }

    /// Broadcast sum: row `t·U + u` of the output is `a[t] + b[u]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.cols() != bt.cols() {
            return Err(Error::shape("outer_add", at.shape(), bt.shape()));
        }
        let (t_len, u_len, j) = (at.rows(), bt.rows(), at.cols());
        let mut out = Vec::with_capacity(t_len * u_len * j);
        for t in 0..t_len {
            let ar = at.row(t);
            for u in 0..u_len {
                out.extend(ar.iter().zip(bt.row(u)).map(|(x, y)| x + y));
            }
        }
        self.push(
            Op::OuterAdd(a, b),
            Tensor::from_parts(vec![t_len * u_len, j], out),
            "outer_add",
        )
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let cols = at.cols();
        let mut out = at.values().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let shape = at.shape().to_vec();
        self.push(Op::Softmax(a), Tensor::from_parts(shape, out), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let cols = at.cols();
        let mut out = at.values().to_vec();
        for row in out.chunks_mut(cols) {
            log_softmax_in_place(row);
        }
        let shape = at.shape().to_vec();
        self.push(Op::LogSoftmax(a), Tensor::from_parts(shape, out), "log_softmax")
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (n, v) = (lt.rows(), lt.cols());
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", lt.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab: v,
            });
        }
        let mut probs = lt.values().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            log_softmax_in_place(row);
            loss -= row[t];
            row.iter_mut().for_each(|x| *x = x.exp());
        }
        loss /= n as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            "cross_entropy",
        )
    }

    /// Vector of `a[row, col]` for each index pair.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let at = self.value(a);
        let (rows, cols) = (at.rows(), at.cols());
        if idx.is_empty() {
            return Err(Error::invalid("pick with no indices"));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!(
                    "pick ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            out.push(at.values()[r * cols + c]);
        }
        self.push(
            Op::Pick(a, idx.to_vec()),
            Tensor::from_parts(vec![idx.len()], out),
            "pick",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// LSTM cell memory update with gate layout `[input, forget, candidate, output]`:
    /// `c = σ(f)·c_prev + σ(i)·tanh(g)`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (gt, ct) = (self.value(gates), self.value(c_prev));
        let d = ct.cols();
        if gt.cols() != 4 * d || gt.rows() != ct.rows() {
            return Err(Error::shape("lstm_cell", gt.shape(), ct.shape()));
        }
        let mut out = Vec::with_capacity(ct.len());
        for r in 0..ct.rows() {
            let g = gt.row(r);
            for (j, &c) in ct.row(r).iter().enumerate() {
                out.push(sigmoid(g[d + j]) * c + sigmoid(g[j]) * g[2 * d + j].tanh());
            }
        }
        let shape = ct.shape().to_vec();
        self.push(Op::LstmCell { gates, c_prev }, Tensor::from_parts(shape, out), "lstm_cell")
    }

    /// LSTM hidden output `h = σ(o)·tanh(c)`.
    pub fn lstm_output(&mut self, gates: Var, c: Var) -> Result<Var> {
        let (gt, ct) = (self.value(gates), self.value(c));
        let d = ct.cols();
        if gt.cols() != 4 * d || gt.rows() != ct.rows() {
            return Err(Error::shape("lstm_output", gt.shape(), ct.shape()));
        }
        let mut out = Vec::with_capacity(ct.len());
        for r in 0..ct.rows() {
            let g = gt.row(r);
            for (j, &cv) in ct.row(r).iter().enumerate() {
                out.push(sigmoid(g[3 * d + j]) * cv.tanh());
            }
        }
        let shape = ct.shape().to_vec();
        self.push(Op::LstmOutput { gates, c }, Tensor::from_parts(shape, out), "lstm_output")
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries `q` (m×D), keys `k` (S×D) and values `v` (S×D). Head `h` uses
    /// columns `[h·D/heads, (h+1)·D/heads)`. Returns the concatenated
    /// per-head contexts (m×D).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let dim = qt.cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide dim {dim}")));
        }
        if kt.cols() != dim || vt.cols() != dim || kt.rows() != vt.rows() {
            return Err(Error::shape("attention", kt.shape(), vt.shape()));
        }
        let (m, s) = (qt.rows(), kt.rows());
        let dk = dim / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; heads * m * s];
        let mut out = vec![0.0; m * dim];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for r in 0..m {
                let qr = &qt.row(r)[cols.clone()];
                let p = &mut probs[(h * m + r) * s..][..s];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kr = &kt.row(j)[cols.clone()];
                    *pj = scale * qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(p);
                let o = &mut out[r * dim..][cols.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    for (ox, vx) in o.iter_mut().zip(&vt.row(j)[cols.clone()]) {
                        *ox += pj * vx;
                    }
                }
            }
        }
        let shape = qt.shape().to_vec();
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            Tensor::from_parts(shape, out),
            "attention",
        )
    }

    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_>> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => Some(AttentionProbs {
                heads: *heads,
                queries: self.value(*q).rows(),
                sources: self.value(*k).rows(),
                probs,
            }),
            _ => None,
        }
    }

    /// Transducer negative log-likelihood from a lattice of per-node
    /// log-probabilities.
    ///
    /// `log_probs` has `frames · (U+1)` rows (row `t·(U+1) + u`) and one column
    /// per output symbol. `targets` holds the `U` reference labels; `blank` is
    /// the blank column.
    pub fn rnnt_loss(
        &mut self,
        log_probs: Var,
        targets: &[usize],
        frames: usize,
        blank: usize,
    ) -> Result<Var> {
        let lt = self.value(log_probs);
        let u_len = targets.len();
        let vocab = lt.cols();
        if frames == 0 || lt.rows() != frames * (u_len + 1) {
            return Err(Error::shape("rnnt_loss", lt.shape(), &[frames, u_len + 1]));
        }
        if let Some(&bad) = targets.iter().chain(Some(&blank)).find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad as u32,
                vocab,
            });
        }
        let (nll, grad) = transducer_nll_and_grad(lt.values(), vocab, targets, frames, blank);
        self.push(
            Op::RnntLoss { log_probs, grad },
            Tensor::scalar(nll),
            "rnnt_loss",
        )
    }

    /// Reverse sweep from a scalar `loss`. Fills every reached node's gradient
    /// and returns the gradients of all parameters bound on this graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);
        let mut done: Vec<Option<Vec<f64>>> = vec![None; n];
        for i in (0..n).rev() {
            let Some(dout) = adj[i].take() else { continue };
            self.backward_node(i, &dout, &mut adj);
            done[i] = Some(dout);
        }
        let mut grads = Gradients::zeros_like(self.params);
        for (i, g) in done.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("backward"));
            }
            if let Op::Param(id) = self.nodes[i].op {
                grads.get_mut(id).copy_from_slice(&g);
            }
            self.nodes[i].value.set_grad(g);
        }
        Ok(grads)
    }

    fn backward_node(&self, i: usize, dout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.values();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, dout, adj),
            Op::Affine(x, w, b) => {
                self.backward_matmul(*x, *w, dout, adj);
                let n = self.value(*b).len();
                let db = acc(adj, *b, n);
                for row in dout.chunks(n) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(adj, *a, dout.len()), dout, 1.0);
                add_into(acc(adj, *b, dout.len()), dout, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(adj, *a, dout.len()), dout, 1.0);
                add_into(acc(adj, *b, dout.len()), dout, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                let da = acc(adj, *a, dout.len());
                for ((d, g), y) in da.iter_mut().zip(dout).zip(bv) {
                    *d += g * y;
                }
                let db = acc(adj, *b, dout.len());
                for ((d, g), x) in db.iter_mut().zip(dout).zip(av) {
                    *d += g * x;
                }
            }
            Op::Scale(a, c) => add_into(acc(adj, *a, dout.len()), dout, *c),
            Op::Sigmoid(a) => {
                let da = acc(adj, *a, dout.len());
                for ((d, g), y) in da.iter_mut().zip(dout).zip(out) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let da = acc(adj, *a, dout.len());
                for ((d, g), y) in da.iter_mut().zip(dout).zip(out) {
                    *d += g * (1.0 - y * y);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let dp = acc(adj, p, rows * c);
                    for r in 0..rows {
                        add_into(&mut dp[r * c..(r + 1) * c], &dout[r * total + off..][..c], 1.0);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    add_into(acc(adj, p, len), &dout[off..off + len], 1.0);
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let at = self.value(*a);
                let c = at.cols();
                let da = acc(adj, *a, at.len());
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut da[src * c..(src + 1) * c], &dout[r * c..(r + 1) * c], 1.0);
                }
            }
            Op::OuterAdd(a, b) => {
                let (t_len, u_len) = (self.value(*a).rows(), self.value(*b).rows());
                let j = self.value(*a).cols();
                {
                    let da = acc(adj, *a, t_len * j);
                    for t in 0..t_len {
                        for u in 0..u_len {
                            add_into(&mut da[t * j..(t + 1) * j], &dout[(t * u_len + u) * j..][..j], 1.0);
                        }
                    }
                }
                let db = acc(adj, *b, u_len * j);
                for t in 0..t_len {
                    for u in 0..u_len {
                        add_into(&mut db[u * j..(u + 1) * j], &dout[(t * u_len + u) * j..][..j], 1.0);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let da = acc(adj, *a, dout.len());
                for ((d, g), y) in da.chunks_mut(c).zip(dout.chunks(c)).zip(out.chunks(c)) {
                    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                    for ((dx, gx), yx) in d.iter_mut().zip(g).zip(y) {
                        *dx += yx * (gx - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols();
                let da = acc(adj, *a, dout.len());
                for ((d, g), y) in da.chunks_mut(c).zip(dout.chunks(c)).zip(out.chunks(c)) {
                    let total: f64 = g.iter().sum();
                    for ((dx, gx), yx) in d.iter_mut().zip(g).zip(y) {
                        *dx += gx - yx.exp() * total;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lt = self.value(*logits);
                let (n, v) = (lt.rows(), lt.cols());
                let w = dout[0] / n as f64;
                let dl = acc(adj, *logits, lt.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut dl[r * v..(r + 1) * v];
                    for (d, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d += w * p;
                    }
                    row[t] -= w;
                }
            }
            Op::Pick(a, idx) => {
                let at = self.value(*a);
                let c = at.cols();
                let da = acc(adj, *a, at.len());
                for (&(r, col), g) in idx.iter().zip(dout) {
                    da[r * c + col] += g;
                }
            }
            Op::Sum(a) => {
                let da = acc(adj, *a, self.value(*a).len());
                da.iter_mut().for_each(|d| *d += dout[0]);
            }
            Op::LstmCell { gates, c_prev } => {
                let (gt, ct) = (self.value(*gates), self.value(*c_prev));
                let d = ct.cols();
                let rows = ct.rows();
                {
                    let dg = acc(adj, *gates, gt.len());
                    for r in 0..rows {
                        let g = gt.row(r);
                        let cp = ct.row(r);
                        let dgr = &mut dg[r * 4 * d..(r + 1) * 4 * d];
                        for j in 0..d {
                            let dc = dout[r * d + j];
                            let i_g = sigmoid(g[j]);
                            let f_g = sigmoid(g[d + j]);
                            let c_g = g[2 * d + j].tanh();
                            dgr[j] += dc * c_g * i_g * (1.0 - i_g);
                            dgr[d + j] += dc * cp[j] * f_g * (1.0 - f_g);
                            dgr[2 * d + j] += dc * i_g * (1.0 - c_g * c_g);
                        }
                    }
                }
                let dc_prev = acc(adj, *c_prev, ct.len());
                for r in 0..rows {
                    let g = gt.row(r);
                    for j in 0..d {
                        dc_prev[r * d + j] += dout[r * d + j] * sigmoid(g[d + j]);
                    }
                }
            }
            Op::LstmOutput { gates, c } => {
                let (gt, ct) = (self.value(*gates), self.value(*c));
                let d = ct.cols();
                let rows = ct.rows();
                {
                    let dg = acc(adj, *gates, gt.len());
                    for r in 0..rows {
                        let g = gt.row(r);
                        for j in 0..d {
                            let o = sigmoid(g[3 * d + j]);
                            let tc = ct.values()[r * d + j].tanh();
                            dg[r * 4 * d + 3 * d + j] += dout[r * d + j] * tc * o * (1.0 - o);
                        }
                    }
                }
                let dc = acc(adj, *c, ct.len());
                for r in 0..rows {
                    let g = gt.row(r);
                    for j in 0..d {
                        let o = sigmoid(g[3 * d + j]);
                        let tc = ct.values()[r * d + j].tanh();
                        dc[r * d + j] += dout[r * d + j] * o * (1.0 - tc * tc);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backward_attention(*q, *k, *v, *heads, probs, dout, adj),
            Op::RnntLoss { log_probs, grad } => {
                add_into(acc(adj, *log_probs, grad.len()), grad, dout[0]);
            }
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, dout: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k, n) = (at.rows(), at.cols(), bt.cols());
        let (av, bv) = (at.values(), bt.values());
        {
            let da = acc(adj, a, m * k);
            for i in 0..m {
                let g = &dout[i * n..(i + 1) * n];
                for l in 0..k {
                    let brow = &bv[l * n..(l + 1) * n];
                    da[i * k + l] += g.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        let db = acc(adj, b, k * n);
        for i in 0..m {
            let g = &dout[i * n..(i + 1) * n];
            for l in 0..k {
                let x = av[i * k + l];
                if x == 0.0 {
                    continue;
                }
                for (d, gj) in db[l * n..(l + 1) * n].iter_mut().zip(g) {
                    *d += x * gj;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        dout: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let dim = qt.cols();
        let (m, s) = (qt.rows(), kt.rows());
        let dk = dim / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = vec![0.0; m * dim];
        let mut dkm = vec![0.0; s * dim];
        let mut dv = vec![0.0; s * dim];
        let mut ds = vec![0.0; s];
        for h in 0..heads {
            let off = h * dk;
            for r in 0..m {
                let p = &probs[(h * m + r) * s..][..s];
                let g = &dout[r * dim + off..][..dk];
                let mut dot = 0.0;
                for j in 0..s {
                    let vr = &vt.row(j)[off..off + dk];
                    let dp: f64 = g.iter().zip(vr).map(|(a, b)| a * b).sum();
                    ds[j] = dp;
                    dot += p[j] * dp;
                    for (d, gx) in dv[j * dim + off..][..dk].iter_mut().zip(g) {
                        *d += p[j] * gx;
                    }
                }
                let qr = &qt.row(r)[off..off + dk];
                for j in 0..s {
                    let dsj = scale * p[j] * (ds[j] - dot);
                    if dsj == 0.0 {
                        continue;
                    }
                    let kr = &kt.row(j)[off..off + dk];
                    for (d, kx) in dq[r * dim + off..][..dk].iter_mut().zip(kr) {
                        *d += dsj * kx;
                    }
                    for (d, qx) in dkm[j * dim + off..][..dk].iter_mut().zip(qr) {
                        *d += dsj * qx;
                    }
                }
            }
        }
        add_into(acc(adj, q, dq.len()), &dq, 1.0);
        add_into(acc(adj, k, dkm.len()), &dkm, 1.0);
        add_into(acc(adj, v, dv.len()), &dv, 1.0);
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax (max subtraction).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward–backward over the transducer lattice. Returns the negative
/// log-likelihood and its gradient w.r.t. every lattice log-probability.
fn transducer_nll_and_grad(
    lp: &[f64],
    vocab: usize,
    targets: &[usize],
    frames: usize,
    blank: usize,
) -> (f64, Vec<f64>) {
    let u1 = targets.len() + 1;
    let at = |t: usize, u: usize, k: usize| lp[(t * u1 + u) * vocab + k];
    let mut alpha = vec![f64::NEG_INFINITY; frames * u1];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * u1 + u] + at(t - 1, u, blank);
            }
            if u > 0 {
                a = log_add_exp(a, alpha[t * u1 + u - 1] + at(t, u - 1, targets[u - 1]));
            }
            alpha[t * u1 + u] = a;
        }
    }
    let last = frames - 1;
    let ll = alpha[last * u1 + u1 - 1] + at(last, u1 - 1, blank);

    let mut beta = vec![f64::NEG_INFINITY; frames * u1];
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            let b = if t == last && u == u1 - 1 {
                at(t, u, blank)
            } else {
                let mut b = f64::NEG_INFINITY;
                if t < last {
                    b = beta[(t + 1) * u1 + u] + at(t, u, blank);
                }
                if u < u1 - 1 {
                    b = log_add_exp(b, beta[t * u1 + u + 1] + at(t, u, targets[u]));
                }
                b
            };
            beta[t * u1 + u] = b;
        }
    }

    let mut grad = vec![0.0; lp.len()];
    for t in 0..frames {
        for u in 0..u1 {
            let a = alpha[t * u1 + u];
            let next_blank = if t == last {
                if u == u1 - 1 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                beta[(t + 1) * u1 + u]
            };
            if next_blank > f64::NEG_INFINITY {
                grad[(t * u1 + u) * vocab + blank] += -(a + at(t, u, blank) + next_blank - ll).exp();
            }
            if u < u1 - 1 {
                let k = targets[u];
                grad[(t * u1 + u) * vocab + k] +=
                    -(a + at(t, u, k) + beta[t * u1 + u + 1] - ll).exp();
            }
        }
    }
    (-ll, grad)
}
