//! Reverse-mode tape over dense f64 tensors.
//!
//! Every operation evaluates eagerly, stores its result in an arena node, and
//! records enough context to compute vector-Jacobian products. `backward`
//! walks the nodes in reverse insertion order, which is a reverse topological
//! order because operands always precede their results.

use crate::diff::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub type VarId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Identity forward, blocks gradient flow entirely.
    Detach,
    /// C[m x n] = A[m x k] * B[k x n]
    Matmul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    /// C[m x n] = A[m x k] * B[n x k]^T
    MatmulNT { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    /// Y = X*W + b rowwise; X rank 1 or 2.
    Affine { x: VarId, w: VarId, b: VarId, rows: usize, din: usize, dout: usize },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Scale { x: VarId, c: f64 },
    Tanh { x: VarId },
    RowSoftmax { x: VarId, rows: usize, cols: usize },
    MeanRows { x: VarId, rows: usize, cols: usize },
    L2Normalize { x: VarId },
    CosineSim { a: VarId, b: VarId },
    LogSumExp { x: VarId },
    SumVec { x: VarId },
    ConcatScalars { xs: Vec<VarId> },
    /// Row i = table[ids[i]] + pos[i], except pseudo slots which take their
    /// vector from another node: row i = node(pseudo[i]) + pos[i].
    EmbedRows {
        table: VarId,
        pos: VarId,
        ids: Vec<usize>,
        pseudo: Vec<(usize, VarId)>,
        d: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m x n] += A[m x k] * B[n x k]^T
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k x n] += A[m x k]^T * B[m x n]
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> VarId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Insert a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(t.shape.clone(), t.values.clone(), t.requires_grad, Op::Leaf)
    }

    /// Insert raw values as a non-differentiated leaf.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<VarId> {
        if numel(&shape) != values.len() {
            return Err(Error::input(format!(
                "constant: shape {:?} does not match {} values",
                shape,
                values.len()
            )));
        }
        Ok(self.push(shape, values, false, Op::Leaf))
    }

    pub fn constant_vector(&mut self, values: Vec<f64>) -> VarId {
        let shape = vec![values.len()];
        self.push(shape, values, false, Op::Leaf)
    }

    pub fn values(&self, id: VarId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    fn check_vector(&self, id: VarId, what: &str) -> Result<usize> {
        let s = self.shape(id);
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::input(format!(
                "{what}: expected non-empty 1-D tensor, got shape {s:?}"
            )));
        }
        Ok(s[0])
    }

    // ── Operations ──

    pub fn detach(&mut self, x: VarId) -> VarId {
        let shape = self.nodes[x].shape.clone();
        let values = self.nodes[x].values.clone();
        self.push(shape, values, false, Op::Detach)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::input(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.values(a), self.values(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, false, Op::Matmul { a, b, m, k, n }))
    }

    /// A[m x k] * B[n x k]^T -> [m x n]
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::input(format!(
                "matmul_nt: incompatible shapes {sa:?} x {sb:?}^T"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.values(a), self.values(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, false, Op::MatmulNT { a, b, m, k, n }))
    }

    /// x*W + b with b broadcast over rows. x may be rank 1 (one row, rank-1
    /// output) or rank 2.
    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sb.len() != 1 {
            return Err(Error::input(format!(
                "affine: W must be rank 2 and b rank 1, got {sw:?}, {sb:?}"
            )));
        }
        let (din, dout) = (sw[0], sw[1]);
        if sb[0] != dout {
            return Err(Error::input(format!(
                "affine: bias length {} does not match output dim {}",
                sb[0], dout
            )));
        }
        let (rows, rank1) = match sx.len() {
            1 => (1, true),
            2 => (sx[0], false),
            _ => {
                return Err(Error::input(format!(
                    "affine: x must be rank 1 or 2, got {sx:?}"
                )))
            }
        };
        let xin = if rank1 { sx[0] } else { sx[1] };
        if xin != din {
            return Err(Error::input(format!(
                "affine: x inner dim {xin} does not match W input dim {din}"
            )));
        }
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            out[r * dout..(r + 1) * dout].copy_from_slice(self.values(b));
        }
        matmul_acc(self.values(x), self.values(w), rows, din, dout, &mut out);
        let shape = if rank1 { vec![dout] } else { vec![rows, dout] };
        Ok(self.push(shape, out, false, Op::Affine { x, w, b, rows, din, dout }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::input(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.nodes[a].shape.clone();
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(shape, values, false, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::input(format!(
                "sub: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.nodes[a].shape.clone();
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(shape, values, false, Op::Sub { a, b }))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let shape = self.nodes[x].shape.clone();
        let values = self.values(x).iter().map(|v| v * c).collect();
        self.push(shape, values, false, Op::Scale { x, c })
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let shape = self.nodes[x].shape.clone();
        let values = self.values(x).iter().map(|v| v.tanh()).collect();
        self.push(shape, values, false, Op::Tanh { x })
    }

    pub fn row_softmax(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 || s[1] == 0 {
            return Err(Error::input(format!(
                "row_softmax: expected non-empty rank-2 tensor, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut values = self.values(x).to_vec();
        for r in 0..rows {
            let row = &mut values[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(vec![rows, cols], values, false, Op::RowSoftmax { x, rows, cols }))
    }

    pub fn mean_rows(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::input(format!(
                "mean_rows: expected rank-2 tensor with rows, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&self.values(x)[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        Ok(self.push(vec![cols], out, false, Op::MeanRows { x, rows, cols }))
    }

    pub fn l2_normalize(&mut self, x: VarId) -> Result<VarId> {
        self.check_vector(x, "l2_normalize")?;
        let n = self.values(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::numeric("l2_normalize: zero-norm input"));
        }
        let shape = self.nodes[x].shape.clone();
        let values = self.values(x).iter().map(|v| v / n).collect();
        Ok(self.push(shape, values, false, Op::L2Normalize { x }))
    }

    /// dot(a,b) / (|a| |b|); errors on zero-norm operands instead of
    /// silently returning 0 for degenerate embeddings.
    pub fn cosine_similarity(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let la = self.check_vector(a, "cosine_similarity")?;
        let lb = self.check_vector(b, "cosine_similarity")?;
        if la != lb {
            return Err(Error::input(format!(
                "cosine_similarity: length mismatch {la} vs {lb}"
            )));
        }
        let na = self.values(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = self.values(b).iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::numeric("cosine_similarity: zero-norm input"));
        }
        let s = dot(self.values(a), self.values(b)) / (na * nb);
        Ok(self.push(vec![], vec![s], false, Op::CosineSim { a, b }))
    }

    /// log(sum(exp(x))) with max-subtraction, so huge logits stay finite.
    pub fn logsumexp(&mut self, x: VarId) -> Result<VarId> {
        self.check_vector(x, "logsumexp")?;
        let m = self
            .values(x)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = self.values(x).iter().map(|v| (v - m).exp()).sum();
        let l = m + sum.ln();
        Ok(self.push(vec![], vec![l], false, Op::LogSumExp { x }))
    }

    pub fn sum_vec(&mut self, x: VarId) -> Result<VarId> {
        self.check_vector(x, "sum_vec")?;
        let s: f64 = self.values(x).iter().sum();
        Ok(self.push(vec![], vec![s], false, Op::SumVec { x }))
    }

    pub fn concat_scalars(&mut self, xs: &[VarId]) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::input("concat_scalars: empty input"));
        }
        let mut values = Vec::with_capacity(xs.len());
        for &id in xs {
            if self.nodes[id].values.len() != 1 {
                return Err(Error::input(format!(
                    "concat_scalars: node {id} has shape {:?}, expected scalar",
                    self.shape(id)
                )));
            }
            values.push(self.nodes[id].values[0]);
        }
        Ok(self.push(vec![xs.len()], values, false, Op::ConcatScalars { xs: xs.to_vec() }))
    }

    /// Token embedding rows: row i = table[ids[i]] + pos[i] for ordinary ids,
    /// and node(pseudo[i]) + pos[i] for slots listed in `pseudo`.
    pub fn embed_rows(
        &mut self,
        table: VarId,
        pos: VarId,
        ids: &[usize],
        pseudo: &[(usize, VarId)],
    ) -> Result<VarId> {
        let st = self.shape(table);
        let sp = self.shape(pos);
        if st.len() != 2 || sp.len() != 2 || st[1] != sp[1] {
            return Err(Error::input(format!(
                "embed_rows: table {st:?} and positions {sp:?} disagree"
            )));
        }
        let d = st[1];
        let (vocab, max_len) = (st[0], sp[0]);
        if ids.is_empty() {
            return Err(Error::input("embed_rows: empty token sequence"));
        }
        if ids.len() > max_len {
            return Err(Error::input(format!(
                "embed_rows: sequence length {} exceeds positional table {}",
                ids.len(),
                max_len
            )));
        }
        let pseudo_slots: std::collections::BTreeMap<usize, VarId> =
            pseudo.iter().cloned().collect();
        let mut values = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let row = &mut values[i * d..(i + 1) * d];
            if let Some(&pv) = pseudo_slots.get(&i) {
                let sv = self.shape(pv);
                if sv != [d] {
                    return Err(Error::input(format!(
                        "embed_rows: pseudo vector at slot {i} has shape {sv:?}, expected [{d}]"
                    )));
                }
                row.copy_from_slice(&self.nodes[pv].values);
            } else {
                if id >= vocab {
                    return Err(Error::input(format!(
                        "embed_rows: token id {id} out of vocabulary range {vocab}"
                    )));
                }
                row.copy_from_slice(&self.nodes[table].values[id * d..(id + 1) * d]);
            }
            for (r, p) in row
                .iter_mut()
                .zip(&self.nodes[pos].values[i * d..(i + 1) * d])
            {
                *r += p;
            }
        }
        Ok(self.push(
            vec![ids.len(), d],
            values,
            false,
            Op::EmbedRows {
                table,
                pos,
                ids: ids.to_vec(),
                pseudo: pseudo.to_vec(),
                d,
            },
        ))
    }

    // ── Backward ──

    fn accum(grads: &mut [Option<Vec<f64>>], id: VarId, len: usize) -> &mut Vec<f64> {
        grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    /// Reverse pass from a scalar root. Each node is visited exactly once;
    /// calling backward a second time without `reset_grads` is an error.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.backward_done {
            return Err(Error::input(
                "backward already run on this tape; call reset_grads first",
            ));
        }
        if self.nodes[root].values.len() != 1 {
            return Err(Error::input(format!(
                "backward: root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Borrowing dance: the op is cloned (cheap: ids and small vecs)
            // so operand grads can be written while reading node values.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf | Op::Detach => {}
                Op::Matmul { a, b, m, k, n } => {
                    let (av, bv) = (self.nodes[a].values.clone(), self.nodes[b].values.clone());
                    let ga = Self::accum(&mut self.grads, a, m * k);
                    matmul_nt_acc(&g, &bv, m, n, k, ga);
                    let gb = Self::accum(&mut self.grads, b, k * n);
                    matmul_tn_acc(&av, &g, m, k, n, gb);
                }
                Op::MatmulNT { a, b, m, k, n } => {
                    let (av, bv) = (self.nodes[a].values.clone(), self.nodes[b].values.clone());
                    let ga = Self::accum(&mut self.grads, a, m * k);
                    matmul_acc(&g, &bv, m, n, k, ga);
                    let gb = Self::accum(&mut self.grads, b, n * k);
                    matmul_tn_acc(&g, &av, m, n, k, gb);
                }
                Op::Affine { x, w, b, rows, din, dout } => {
                    let (xv, wv) = (self.nodes[x].values.clone(), self.nodes[w].values.clone());
                    let gx = Self::accum(&mut self.grads, x, rows * din);
                    matmul_nt_acc(&g, &wv, rows, dout, din, gx);
                    let gw = Self::accum(&mut self.grads, w, din * dout);
                    matmul_tn_acc(&xv, &g, rows, din, dout, gw);
                    let gb = Self::accum(&mut self.grads, b, dout);
                    for r in 0..rows {
                        for (o, v) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *o += v;
                        }
                    }
                }
                Op::Add { a, b } => {
                    let ga = Self::accum(&mut self.grads, a, g.len());
                    for (o, v) in ga.iter_mut().zip(&g) {
                        *o += v;
                    }
                    let gb = Self::accum(&mut self.grads, b, g.len());
                    for (o, v) in gb.iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::Sub { a, b } => {
                    let ga = Self::accum(&mut self.grads, a, g.len());
                    for (o, v) in ga.iter_mut().zip(&g) {
                        *o += v;
                    }
                    let gb = Self::accum(&mut self.grads, b, g.len());
                    for (o, v) in gb.iter_mut().zip(&g) {
                        *o -= v;
                    }
                }
                Op::Scale { x, c } => {
                    let gx = Self::accum(&mut self.grads, x, g.len());
                    for (o, v) in gx.iter_mut().zip(&g) {
                        *o += c * v;
                    }
                }
                Op::Tanh { x } => {
                    let yv = self.nodes[i].values.clone();
                    let gx = Self::accum(&mut self.grads, x, g.len());
                    for ((o, v), y) in gx.iter_mut().zip(&g).zip(&yv) {
                        *o += v * (1.0 - y * y);
                    }
                }
                Op::RowSoftmax { x, rows, cols } => {
                    let yv = self.nodes[i].values.clone();
                    let gx = Self::accum(&mut self.grads, x, rows * cols);
                    for r in 0..rows {
                        let y = &yv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                        for ((o, &yv), &gv) in gx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(y)
                            .zip(gr)
                        {
                            *o += yv * (gv - s);
                        }
                    }
                }
                Op::MeanRows { x, rows, cols } => {
                    let gx = Self::accum(&mut self.grads, x, rows * cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for (o, v) in gx[r * cols..(r + 1) * cols].iter_mut().zip(&g) {
                            *o += v * inv;
                        }
                    }
                }
                Op::L2Normalize { x } => {
                    let xv = self.nodes[x].values.clone();
                    let n = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yv = self.nodes[i].values.clone();
                    let proj: f64 = yv.iter().zip(&g).map(|(y, gv)| y * gv).sum();
                    let gx = Self::accum(&mut self.grads, x, g.len());
                    for ((o, &gv), &y) in gx.iter_mut().zip(&g).zip(&yv) {
                        *o += (gv - y * proj) / n;
                    }
                }
                Op::CosineSim { a, b } => {
                    let av = self.nodes[a].values.clone();
                    let bv = self.nodes[b].values.clone();
                    let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = self.nodes[i].values[0];
                    let gs = g[0];
                    let ga = Self::accum(&mut self.grads, a, av.len());
                    for ((o, &x), &y) in ga.iter_mut().zip(&av).zip(&bv) {
                        *o += gs * (y / (na * nb) - s * x / (na * na));
                    }
                    let gb = Self::accum(&mut self.grads, b, bv.len());
                    for ((o, &y), &x) in gb.iter_mut().zip(&bv).zip(&av) {
                        *o += gs * (x / (na * nb) - s * y / (nb * nb));
                    }
                }
                Op::LogSumExp { x } => {
                    let xv = self.nodes[x].values.clone();
                    let l = self.nodes[i].values[0];
                    let gs = g[0];
                    let gx = Self::accum(&mut self.grads, x, xv.len());
                    for (o, &v) in gx.iter_mut().zip(&xv) {
                        *o += gs * (v - l).exp();
                    }
                }
                Op::SumVec { x } => {
                    let len = self.nodes[x].values.len();
                    let gs = g[0];
                    let gx = Self::accum(&mut self.grads, x, len);
                    for o in gx.iter_mut() {
                        *o += gs;
                    }
                }
                Op::ConcatScalars { xs } => {
                    for (j, &id) in xs.iter().enumerate() {
                        let gx = Self::accum(&mut self.grads, id, 1);
                        gx[0] += g[j];
                    }
                }
                Op::EmbedRows { table, pos, ids, pseudo, d } => {
                    let pseudo_slots: std::collections::BTreeMap<usize, VarId> =
                        pseudo.iter().cloned().collect();
                    let table_len = self.nodes[table].values.len();
                    let pos_len = self.nodes[pos].values.len();
                    for (slot, &id) in ids.iter().enumerate() {
                        let gr = &g[slot * d..(slot + 1) * d];
                        if let Some(&pv) = pseudo_slots.get(&slot) {
                            let gp = Self::accum(&mut self.grads, pv, d);
                            for (o, v) in gp.iter_mut().zip(gr) {
                                *o += v;
                            }
                        } else {
                            let gt = Self::accum(&mut self.grads, table, table_len);
                            for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                                *o += v;
                            }
                        }
                        let gpos = Self::accum(&mut self.grads, pos, pos_len);
                        for (o, v) in gpos[slot * d..(slot + 1) * d].iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                }
            }
            self.grads[i] = Some(g);
        }

        // Leaves that never appeared on a gradient path still get a populated
        // (all-zero) grad, so "no influence" reads as exact zeros downstream.
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.nodes[i].values.len()]);
            }
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.backward_done = false;
    }

    /// Copy a node's current values out as a Tensor (grad included if present).
    pub fn tensor(&self, id: VarId) -> Tensor {
        Tensor {
            shape: self.nodes[id].shape.clone(),
            values: self.nodes[id].values.clone(),
            requires_grad: self.nodes[id].requires_grad,
            grad: self.grads[id].clone(),
        }
    }
}
