//! Eager compute graph with reverse-mode differentiation.
//!
//! Ops execute immediately and record what they need for the backward pass.
//! [`Graph::backward`] walks nodes in reverse creation order (which is a
//! topological order, since ops can only reference existing nodes) and
//! accumulates gradients for every node that transitively depends on a
//! tracked leaf. All accumulation orders are fixed, so gradients are
//! bit-reproducible.

use super::gemm::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::tensor::Tensor;
use super::NnError;

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AffineScalar { x: NodeId, mul: f64 },
    Matmul { a: NodeId, b: NodeId, transpose_b: bool },
    Conv2d { x: NodeId, w: NodeId, pad: usize, stride: usize, col: Vec<f64> },
    BiasChannel { x: NodeId, b: NodeId },
    BiasRow { x: NodeId, b: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log { x: NodeId, floor: f64 },
    L2NormalizeRows(NodeId),
    MaxPool2d { x: NodeId, size: usize },
    AvgPool2d { x: NodeId, size: usize },
    GlobalMaxPool(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize, len: usize },
    SelectEntries { x: NodeId, idx: Vec<usize> },
    PairRowSum { u: NodeId, v: NodeId },
    RowSum(NodeId),
    SumAll(NodeId),
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Single-use computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Inserts a leaf. `tracked` marks it as a parameter that receives a
    /// gradient; untracked leaves are constants.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> NodeId {
        self.push(value, tracked, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape("add", a, b)?;
        let v = zip_tensors(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape("sub", a, b)?;
        let v = zip_tensors(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape("mul", a, b)?;
        let v = zip_tensors(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        Ok(self.push(v, self.needs(a) || self.needs(b), Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in v.data_mut() {
            *e *= c;
        }
        self.push(v, self.needs(x), Op::ScalarMul(x, c))
    }

    /// Elementwise x * mul + add with scalar constants.
    pub fn affine_scalar(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in v.data_mut() {
            *e = *e * mul + add;
        }
        self.push(v, self.needs(x), Op::AffineScalar { x, mul })
    }

    /// `a [m,k] @ b [k,n]`, or `a [m,k] @ b[n,k]^T` when `transpose_b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId, NnError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(NnError::ShapeMismatch { ctx: "matmul rank", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, kb) = if transpose_b { (sb[0], sb[1]) } else { (sb[1], sb[0]) };
        if k != kb {
            return Err(NnError::ShapeMismatch { ctx: "matmul inner dim", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let mut out = Tensor::zeros(&[m, n]);
        if transpose_b {
            gemm_nt_acc(self.nodes[a].value.data(), self.nodes[b].value.data(), out.data_mut(), m, k, n);
        } else {
            gemm_acc(self.nodes[a].value.data(), self.nodes[b].value.data(), out.data_mut(), m, k, n);
        }
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::Matmul { a, b, transpose_b }))
    }

    /// 2-D convolution, NCHW input, OIHW weights, symmetric zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize, stride: usize) -> Result<NodeId, NnError> {
        let (sx, sw) = (self.nodes[x].value.shape(), self.nodes[w].value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(NnError::ShapeMismatch { ctx: "conv2d", lhs: sx.to_vec(), rhs: sw.to_vec() });
        }
        if stride == 0 {
            return Err(NnError::ShapeMismatch { ctx: "conv2d stride", lhs: sx.to_vec(), rhs: vec![stride] });
        }
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(NnError::ShapeMismatch { ctx: "conv2d kernel larger than input", lhs: sx.to_vec(), rhs: sw.to_vec() });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let kdim = cin * kh * kw;
        let pdim = ho * wo;
        let bp = bsz * pdim;
        if cout < 64 && stride == 1 && wo >= 16 {
            // narrow wide-row layers are memory-bound under im2col; run directly
            let out = conv_direct(self.nodes[x].value.data(), self.nodes[w].value.data(), bsz, cin, cout, h, wd, pad, kh, kw, ho, wo);
            let needs = self.needs(x) || self.needs(w);
            return Ok(self.push(out, needs, Op::Conv2d { x, w, pad, stride, col: Vec::new() }));
        }
        // one batched im2col ([positions, kdim] layout keeps the GEMM wide)
        // and a single GEMM per layer against the cached weight matrix
        let col = im2col_batch(self.nodes[x].value.data(), bsz, cin, h, wd, pad, stride, kh, kw, ho, wo);
        let mut out_rm = vec![0.0f64; bp * cout];
        gemm_nt_acc(&col, self.nodes[w].value.data(), &mut out_rm, bp, kdim, cout);
        let mut out = Tensor::zeros(&[bsz, cout, ho, wo]);
        {
            let od = out.data_mut();
            for bi in 0..bsz {
                for p in 0..pdim {
                    let src = (bi * pdim + p) * cout;
                    for co in 0..cout {
                        od[(bi * cout + co) * pdim + p] = out_rm[src + co];
                    }
                }
            }
        }
        // the column matrix is kept for the backward pass
        let needs = self.needs(x) || self.needs(w);
        let col = if needs { col } else { Vec::new() };
        Ok(self.push(out, needs, Op::Conv2d { x, w, pad, stride, col }))
    }

    /// Adds a per-channel bias to a NCHW tensor.
    pub fn bias_channel(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sx, sb) = (self.nodes[x].value.shape(), self.nodes[b].value.shape());
        if sx.len() != 4 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(NnError::ShapeMismatch { ctx: "bias_channel", lhs: sx.to_vec(), rhs: sb.to_vec() });
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let mut v = self.nodes[x].value.clone();
        let bias = self.nodes[b].value.data().to_vec();
        {
            let d = v.data_mut();
            for bi in 0..bsz {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let bv = bias[ci];
                    for e in &mut d[base..base + h * w] {
                        *e += bv;
                    }
                }
            }
        }
        Ok(self.push(v, self.needs(x) || self.needs(b), Op::BiasChannel { x, b }))
    }

    /// Adds a bias vector to every row of a [R,K] tensor.
    pub fn bias_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sx, sb) = (self.nodes[x].value.shape(), self.nodes[b].value.shape());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(NnError::ShapeMismatch { ctx: "bias_row", lhs: sx.to_vec(), rhs: sb.to_vec() });
        }
        let (r, k) = (sx[0], sx[1]);
        let mut v = self.nodes[x].value.clone();
        let bias = self.nodes[b].value.data().to_vec();
        {
            let d = v.data_mut();
            for ri in 0..r {
                for ki in 0..k {
                    d[ri * k + ki] += bias[ki];
                }
            }
        }
        Ok(self.push(v, self.needs(x) || self.needs(b), Op::BiasRow { x, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in v.data_mut() {
            if *e < 0.0 {
                *e = 0.0;
            }
        }
        self.push(v, self.needs(x), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in v.data_mut() {
            *e = 1.0 / (1.0 + (-*e).exp());
        }
        self.push(v, self.needs(x), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in v.data_mut() {
            *e = e.exp();
        }
        self.push(v, self.needs(x), Op::Exp(x))
    }

    /// `ln(max(x, floor))`; with `floor = 0` this is a plain log.
    pub fn log(&mut self, x: NodeId, floor: f64) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in v.data_mut() {
            *e = e.max(floor).ln();
        }
        self.push(v, self.needs(x), Op::Log { x, floor })
    }

    /// Normalizes each row of a [R,K] tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 2 {
            return Err(NnError::ShapeMismatch { ctx: "l2_normalize rank", lhs: sx, rhs: vec![2] });
        }
        let (r, k) = (sx[0], sx[1]);
        let mut v = self.nodes[x].value.clone();
        {
            let d = v.data_mut();
            for ri in 0..r {
                let row = &mut d[ri * k..(ri + 1) * k];
                let norm = row.iter().map(|e| e * e).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(NnError::ZeroVector { ctx: "l2_normalize" });
                }
                for e in row {
                    *e /= norm;
                }
            }
        }
        Ok(self.push(v, self.needs(x), Op::L2NormalizeRows(x)))
    }

    /// Max pooling with square window and equal stride.
    pub fn max_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId, NnError> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 4 || size == 0 || sx[2] < size || sx[3] < size {
            return Err(NnError::ShapeMismatch { ctx: "max_pool2d", lhs: sx, rhs: vec![size] });
        }
        let v = pool_forward(&self.nodes[x].value, size, PoolKind::Max);
        Ok(self.push(v, self.needs(x), Op::MaxPool2d { x, size }))
    }

    /// Mean pooling with square window and equal stride.
    pub fn avg_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId, NnError> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 4 || size == 0 || sx[2] < size || sx[3] < size {
            return Err(NnError::ShapeMismatch { ctx: "avg_pool2d", lhs: sx, rhs: vec![size] });
        }
        let v = pool_forward(&self.nodes[x].value, size, PoolKind::Avg);
        Ok(self.push(v, self.needs(x), Op::AvgPool2d { x, size }))
    }

    /// [B,C,H,W] -> [B,C], max over the spatial grid.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 4 {
            return Err(NnError::ShapeMismatch { ctx: "global_max_pool", lhs: sx, rhs: vec![4] });
        }
        let (bsz, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let xd = self.nodes[x].value.data();
        let mut out = Tensor::zeros(&[bsz, c]);
        {
            let d = out.data_mut();
            for i in 0..bsz * c {
                let seg = &xd[i * hw..(i + 1) * hw];
                let mut best = seg[0];
                for &e in &seg[1..] {
                    if e > best {
                        best = e;
                    }
                }
                d[i] = best;
            }
        }
        Ok(self.push(out, self.needs(x), Op::GlobalMaxPool(x)))
    }

    /// Concatenates two [R,*] tensors along columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(NnError::ShapeMismatch { ctx: "concat_cols", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (r, ka, kb) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[r, ka + kb]);
        {
            let d = out.data_mut();
            let ad = self.nodes[a].value.data();
            let bd = self.nodes[b].value.data();
            for ri in 0..r {
                d[ri * (ka + kb)..ri * (ka + kb) + ka].copy_from_slice(&ad[ri * ka..(ri + 1) * ka]);
                d[ri * (ka + kb) + ka..(ri + 1) * (ka + kb)].copy_from_slice(&bd[ri * kb..(ri + 1) * kb]);
            }
        }
        Ok(self.push(out, self.needs(a) || self.needs(b), Op::ConcatCols(a, b)))
    }

    /// Takes columns [start, start+len) of a [R,K] tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(NnError::ShapeMismatch { ctx: "slice_cols", lhs: sx, rhs: vec![start, len] });
        }
        let (r, k) = (sx[0], sx[1]);
        let mut out = Tensor::zeros(&[r, len]);
        {
            let d = out.data_mut();
            let xd = self.nodes[x].value.data();
            for ri in 0..r {
                d[ri * len..(ri + 1) * len].copy_from_slice(&xd[ri * k + start..ri * k + start + len]);
            }
        }
        Ok(self.push(out, self.needs(x), Op::SliceCols { x, start, len }))
    }

    /// Picks elements of x (flat indexing) into a vector.
    pub fn select_entries(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId, NnError> {
        let n = self.nodes[x].value.numel();
        if idx.iter().any(|&i| i >= n) {
            return Err(NnError::ShapeMismatch { ctx: "select_entries", lhs: vec![n], rhs: vec![idx.len()] });
        }
        let xd = self.nodes[x].value.data();
        let data: Vec<f64> = idx.iter().map(|&i| xd[i]).collect();
        let out = Tensor::from_vec(&[idx.len()], data)?;
        Ok(self.push(out, self.needs(x), Op::SelectEntries { x, idx }))
    }

    /// All pairwise row sums: out[(i*Nv+j), :] = u[i,:] + v[j,:].
    ///
    /// This is the first dense layer of a pair network factored into two
    /// per-side projections, avoiding materializing concatenated pairs.
    pub fn pair_row_sum(&mut self, u: NodeId, v: NodeId) -> Result<NodeId, NnError> {
        let (su, sv) = (self.nodes[u].value.shape(), self.nodes[v].value.shape());
        if su.len() != 2 || sv.len() != 2 || su[1] != sv[1] {
            return Err(NnError::ShapeMismatch { ctx: "pair_row_sum", lhs: su.to_vec(), rhs: sv.to_vec() });
        }
        let (nu, nv, k) = (su[0], sv[0], su[1]);
        let mut out = Tensor::zeros(&[nu * nv, k]);
        {
            let d = out.data_mut();
            let ud = self.nodes[u].value.data();
            let vd = self.nodes[v].value.data();
            for i in 0..nu {
                for j in 0..nv {
                    let dst = &mut d[(i * nv + j) * k..(i * nv + j + 1) * k];
                    let ur = &ud[i * k..(i + 1) * k];
                    let vr = &vd[j * k..(j + 1) * k];
                    for t in 0..k {
                        dst[t] = ur[t] + vr[t];
                    }
                }
            }
        }
        Ok(self.push(out, self.needs(u) || self.needs(v), Op::PairRowSum { u, v }))
    }

    /// [R,K] -> [R], sum over columns.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let sx = self.nodes[x].value.shape().to_vec();
        if sx.len() != 2 {
            return Err(NnError::ShapeMismatch { ctx: "row_sum", lhs: sx, rhs: vec![2] });
        }
        let (r, k) = (sx[0], sx[1]);
        let xd = self.nodes[x].value.data();
        let mut out = Tensor::zeros(&[r]);
        {
            let d = out.data_mut();
            for ri in 0..r {
                let mut s = 0.0;
                for ki in 0..k {
                    s += xd[ri * k + ki];
                }
                d[ri] = s;
            }
        }
        Ok(self.push(out, self.needs(x), Op::RowSum(x)))
    }

    /// Sum of all elements, index-ascending, into a scalar.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = 0.0;
        for &e in self.nodes[x].value.data() {
            s += e;
        }
        self.push(Tensor::scalar(s), self.needs(x), Op::SumAll(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let v = self.nodes[x].value.reshaped(shape)?;
        Ok(self.push(v, self.needs(x), Op::Reshape(x)))
    }

    /// Reverse-mode pass from a scalar loss. Returns per-node gradients
    /// (None for nodes that do not require one).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>, NnError> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(NnError::NotScalar { shape: self.nodes[loss].value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::filled(self.nodes[loss].value.shape(), 1.0));
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(t) => {
                let d = t.data_mut();
                for (a, b) in d.iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.needs(*b) {
                    let mut neg = g.clone();
                    for e in neg.data_mut() {
                        *e = -*e;
                    }
                    self.accum(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = zip_tensors(g, &self.nodes[*b].value, |x, y| x * y);
                    self.accum(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = zip_tensors(g, &self.nodes[*a].value, |x, y| x * y);
                    self.accum(grads, *b, d);
                }
            }
            Op::ScalarMul(x, c) => {
                if self.needs(*x) {
                    let mut d = g.clone();
                    for e in d.data_mut() {
                        *e *= c;
                    }
                    self.accum(grads, *x, d);
                }
            }
            Op::AffineScalar { x, mul } => {
                if self.needs(*x) {
                    let mut d = g.clone();
                    for e in d.data_mut() {
                        *e *= mul;
                    }
                    self.accum(grads, *x, d);
                }
            }
            Op::Matmul { a, b, transpose_b } => self.backward_matmul(*a, *b, *transpose_b, g, grads),
            Op::Conv2d { x, w, pad, stride, col } => {
                self.backward_conv2d(*x, *w, *pad, *stride, col, g, grads)
            }
            Op::BiasChannel { x, b } => {
                self.accum(grads, *x, g.clone());
                if self.needs(*b) {
                    let sx = self.nodes[*x].value.shape();
                    let (bsz, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let mut db = Tensor::zeros(&[c]);
                    let dd = db.data_mut();
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut s = 0.0;
                            for &e in &g.data()[base..base + hw] {
                                s += e;
                            }
                            dd[ci] += s;
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::BiasRow { x, b } => {
                self.accum(grads, *x, g.clone());
                if self.needs(*b) {
                    let sx = self.nodes[*x].value.shape();
                    let (r, k) = (sx[0], sx[1]);
                    let mut db = Tensor::zeros(&[k]);
                    let dd = db.data_mut();
                    for ri in 0..r {
                        for ki in 0..k {
                            dd[ki] += g.data()[ri * k + ki];
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let d = zip_tensors(g, &self.nodes[*x].value, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    self.accum(grads, *x, d);
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let d = zip_tensors(g, &self.nodes[id].value, |gi, yi| gi * yi * (1.0 - yi));
                    self.accum(grads, *x, d);
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    let d = zip_tensors(g, &self.nodes[id].value, |gi, yi| gi * yi);
                    self.accum(grads, *x, d);
                }
            }
            Op::Log { x, floor } => {
                if self.needs(*x) {
                    let fl = *floor;
                    let d = zip_tensors(g, &self.nodes[*x].value, |gi, xi| if xi > fl { gi / xi } else { 0.0 });
                    self.accum(grads, *x, d);
                }
            }
            Op::L2NormalizeRows(x) => {
                if self.needs(*x) {
                    let sx = self.nodes[*x].value.shape();
                    let (r, k) = (sx[0], sx[1]);
                    let xd = self.nodes[*x].value.data();
                    let yd = self.nodes[id].value.data();
                    let mut dx = Tensor::zeros(&[r, k]);
                    let dd = dx.data_mut();
                    for ri in 0..r {
                        let xr = &xd[ri * k..(ri + 1) * k];
                        let yr = &yd[ri * k..(ri + 1) * k];
                        let gr = &g.data()[ri * k..(ri + 1) * k];
                        let norm = xr.iter().map(|e| e * e).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        let dst = &mut dd[ri * k..(ri + 1) * k];
                        for t in 0..k {
                            dst[t] = (gr[t] - dot * yr[t]) / norm;
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::MaxPool2d { x, size } => {
                if self.needs(*x) {
                    let dx = pool_backward(&self.nodes[*x].value, g, *size, PoolKind::Max);
                    self.accum(grads, *x, dx);
                }
            }
            Op::AvgPool2d { x, size } => {
                if self.needs(*x) {
                    let dx = pool_backward(&self.nodes[*x].value, g, *size, PoolKind::Avg);
                    self.accum(grads, *x, dx);
                }
            }
            Op::GlobalMaxPool(x) => {
                if self.needs(*x) {
                    let sx = self.nodes[*x].value.shape();
                    let (bsz, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                    let xd = self.nodes[*x].value.data();
                    let mut dx = Tensor::zeros(sx);
                    let dd = dx.data_mut();
                    for i in 0..bsz * c {
                        let seg = &xd[i * hw..(i + 1) * hw];
                        let mut best = 0usize;
                        for (t, &e) in seg.iter().enumerate() {
                            if e > seg[best] {
                                best = t;
                            }
                        }
                        dd[i * hw + best] += g.data()[i];
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::ConcatCols(a, b) => {
                let (ka, kb) = (self.nodes[*a].value.shape()[1], self.nodes[*b].value.shape()[1]);
                let r = self.nodes[*a].value.shape()[0];
                if self.needs(*a) {
                    let mut da = Tensor::zeros(&[r, ka]);
                    for ri in 0..r {
                        da.data_mut()[ri * ka..(ri + 1) * ka]
                            .copy_from_slice(&g.data()[ri * (ka + kb)..ri * (ka + kb) + ka]);
                    }
                    self.accum(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(&[r, kb]);
                    for ri in 0..r {
                        db.data_mut()[ri * kb..(ri + 1) * kb]
                            .copy_from_slice(&g.data()[ri * (ka + kb) + ka..(ri + 1) * (ka + kb)]);
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let sx = self.nodes[*x].value.shape();
                    let (r, k) = (sx[0], sx[1]);
                    let mut dx = Tensor::zeros(sx);
                    for ri in 0..r {
                        dx.data_mut()[ri * k + start..ri * k + start + len]
                            .copy_from_slice(&g.data()[ri * len..(ri + 1) * len]);
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::SelectEntries { x, idx } => {
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                    let dd = dx.data_mut();
                    for (t, &i) in idx.iter().enumerate() {
                        dd[i] += g.data()[t];
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::PairRowSum { u, v } => {
                let (nu, k) = {
                    let s = self.nodes[*u].value.shape();
                    (s[0], s[1])
                };
                let nv = self.nodes[*v].value.shape()[0];
                if self.needs(*u) {
                    let mut du = Tensor::zeros(&[nu, k]);
                    let dd = du.data_mut();
                    for i in 0..nu {
                        let dst = &mut dd[i * k..(i + 1) * k];
                        for j in 0..nv {
                            let src = &g.data()[(i * nv + j) * k..(i * nv + j + 1) * k];
                            for t in 0..k {
                                dst[t] += src[t];
                            }
                        }
                    }
                    self.accum(grads, *u, du);
                }
                if self.needs(*v) {
                    let mut dv = Tensor::zeros(&[nv, k]);
                    let dd = dv.data_mut();
                    for i in 0..nu {
                        for j in 0..nv {
                            let src = &g.data()[(i * nv + j) * k..(i * nv + j + 1) * k];
                            let dst = &mut dd[j * k..(j + 1) * k];
                            for t in 0..k {
                                dst[t] += src[t];
                            }
                        }
                    }
                    self.accum(grads, *v, dv);
                }
            }
            Op::RowSum(x) => {
                if self.needs(*x) {
                    let sx = self.nodes[*x].value.shape();
                    let (r, k) = (sx[0], sx[1]);
                    let mut dx = Tensor::zeros(sx);
                    let dd = dx.data_mut();
                    for ri in 0..r {
                        let gv = g.data()[ri];
                        for ki in 0..k {
                            dd[ri * k + ki] = gv;
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let d = Tensor::filled(self.nodes[*x].value.shape(), g.data()[0]);
                    self.accum(grads, *x, d);
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let d = g.reshaped(self.nodes[*x].value.shape()).expect("reshape grad");
                    self.accum(grads, *x, d);
                }
            }
        }
    }

    fn backward_matmul(&self, a: NodeId, b: NodeId, transpose_b: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let sa = self.nodes[a].value.shape();
        let (m, k) = (sa[0], sa[1]);
        let n = g.shape()[1];
        if self.needs(a) {
            let mut da = Tensor::zeros(&[m, k]);
            if transpose_b {
                // da += g [m,n] @ bt [n,k]
                gemm_acc(g.data(), self.nodes[b].value.data(), da.data_mut(), m, n, k);
            } else {
                // da += g [m,n] @ b[k,n]^T
                gemm_nt_acc(g.data(), self.nodes[b].value.data(), da.data_mut(), m, n, k);
            }
            self.accum(grads, a, da);
        }
        if self.needs(b) {
            if transpose_b {
                // dbt [n,k] += g[m,n]^T @ a[m,k]
                let mut db = Tensor::zeros(&[n, k]);
                gemm_tn_acc(g.data(), self.nodes[a].value.data(), db.data_mut(), n, m, k);
                self.accum(grads, b, db);
            } else {
                // db [k,n] += a[m,k]^T @ g[m,n]
                let mut db = Tensor::zeros(&[k, n]);
                gemm_tn_acc(self.nodes[a].value.data(), g.data(), db.data_mut(), k, m, n);
                self.accum(grads, b, db);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(&self, x: NodeId, w: NodeId, pad: usize, stride: usize, col: &[f64], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let sx = self.nodes[x].value.shape();
        let sw = self.nodes[w].value.shape();
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let kdim = cin * kh * kw;
        let pdim = ho * wo;
        let bp = bsz * pdim;
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);

        if cout < 64 && stride == 1 && wo >= 16 {
            self.backward_conv_direct(x, w, pad, g, grads);
            return;
        }

        // gradient rows gathered as [B*pdim, cout]
        let mut gy_rm = vec![0.0f64; bp * cout];
        for bi in 0..bsz {
            for co in 0..cout {
                let src = (bi * cout + co) * pdim;
                for p in 0..pdim {
                    gy_rm[(bi * pdim + p) * cout + co] = g.data()[src + p];
                }
            }
        }

        if self.needs(w) {
            let mut dw = Tensor::zeros(sw);
            // dW [cout,kdim] += gy [bp,cout]^T @ col [bp,kdim]
            gemm_tn_acc(&gy_rm, col, dw.data_mut(), cout, bp, kdim);
            self.accum(grads, w, dw);
        }
        if self.needs(x) {
            // dcol [bp,kdim] = gy [bp,cout] @ w [cout,kdim]
            let mut dcol = vec![0.0f64; bp * kdim];
            gemm_acc(&gy_rm, self.nodes[w].value.data(), &mut dcol, bp, cout, kdim);
            let mut dx = Tensor::zeros(sx);
            let mut dpad = vec![0.0f64; cin * ph * pw];
            let dd = dx.data_mut();
            for bi in 0..bsz {
                dpad.iter_mut().for_each(|e| *e = 0.0);
                col2im_rm(&dcol, &mut dpad, bi, pdim, kdim, cin, ph, pw, kh, kw, ho, wo, stride);
                for ci in 0..cin {
                    for y in 0..h {
                        let src = ci * ph * pw + (y + pad) * pw + pad;
                        let dst = ((bi * cin + ci) * h + y) * wd;
                        for t in 0..wd {
                            dd[dst + t] += dpad[src + t];
                        }
                    }
                }
            }
            self.accum(grads, x, dx);
        }
    }

    fn backward_conv_direct(&self, x: NodeId, w: NodeId, pad: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let sx = self.nodes[x].value.shape();
        let sw = self.nodes[w].value.shape();
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        let pdim = ho * wo;
        let xd = self.nodes[x].value.data();
        let wd_data = self.nodes[w].value.data();
        let mut padded = vec![0.0f64; cin * ph * pw];
        let mut dw = if self.needs(w) { Some(Tensor::zeros(sw)) } else { None };
        let mut dx = if self.needs(x) { Some(Tensor::zeros(sx)) } else { None };
        let mut dpad = vec![0.0f64; cin * ph * pw];
        for bi in 0..bsz {
            pad_item(xd, &mut padded, bi, cin, h, wd, pad);
            if dx.is_some() {
                dpad.iter_mut().for_each(|e| *e = 0.0);
            }
            for co in 0..cout {
                let gy = &g.data()[(bi * cout + co) * pdim..(bi * cout + co + 1) * pdim];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                            let wv = wd_data[widx];
                            let mut acc = 0.0;
                            for y in 0..ho {
                                let prow = ci * ph * pw + (y + ky) * pw + kx;
                                let gr = &gy[y * wo..(y + 1) * wo];
                                if let Some(dw) = dw.as_ref() {
                                    let _ = dw;
                                    let pr = &padded[prow..prow + wo];
                                    for t in 0..wo {
                                        acc += gr[t] * pr[t];
                                    }
                                }
                                if dx.is_some() {
                                    let dr = &mut dpad[prow..prow + wo];
                                    for t in 0..wo {
                                        dr[t] += wv * gr[t];
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw.data_mut()[widx] += acc;
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dd = dx.data_mut();
                for ci in 0..cin {
                    for y in 0..h {
                        let src = ci * ph * pw + (y + pad) * pw + pad;
                        let dst = ((bi * cin + ci) * h + y) * wd;
                        for t in 0..wd {
                            dd[dst + t] += dpad[src + t];
                        }
                    }
                }
            }
        }
        if let Some(dw) = dw {
            self.accum(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.accum(grads, x, dx);
        }
    }

    fn same_shape(&self, ctx: &'static str, a: NodeId, b: NodeId) -> Result<(), NnError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(NnError::ShapeMismatch { ctx, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }
}

fn zip_tensors(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x = f(*x, *y);
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum PoolKind {
    Max,
    Avg,
}

fn pool_forward(x: &Tensor, size: usize, kind: PoolKind) -> Tensor {
    let s = x.shape();
    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / size, w / size);
    let mut out = Tensor::zeros(&[bsz, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    let inv = 1.0 / (size * size) as f64;
    for i in 0..bsz * c {
        let src = &xd[i * h * w..(i + 1) * h * w];
        let dst = &mut od[i * ho * wo..(i + 1) * ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = if kind == PoolKind::Max { f64::NEG_INFINITY } else { 0.0 };
                for ky in 0..size {
                    for kx in 0..size {
                        let v = src[(y * size + ky) * w + xo * size + kx];
                        match kind {
                            PoolKind::Max => {
                                if v > acc {
                                    acc = v;
                                }
                            }
                            PoolKind::Avg => acc += v,
                        }
                    }
                }
                dst[y * wo + xo] = if kind == PoolKind::Max { acc } else { acc * inv };
            }
        }
    }
    out
}

fn pool_backward(x: &Tensor, g: &Tensor, size: usize, kind: PoolKind) -> Tensor {
    let s = x.shape();
    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / size, w / size);
    let mut dx = Tensor::zeros(s);
    let xd = x.data();
    let dd = dx.data_mut();
    let inv = 1.0 / (size * size) as f64;
    for i in 0..bsz * c {
        let src = &xd[i * h * w..(i + 1) * h * w];
        let gr = &g.data()[i * ho * wo..(i + 1) * ho * wo];
        let dst = &mut dd[i * h * w..(i + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                let gv = gr[y * wo + xo];
                match kind {
                    PoolKind::Max => {
                        // first maximum in scan order receives the gradient
                        let (mut by, mut bx) = (0, 0);
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..size {
                            for kx in 0..size {
                                let v = src[(y * size + ky) * w + xo * size + kx];
                                if v > best {
                                    best = v;
                                    by = ky;
                                    bx = kx;
                                }
                            }
                        }
                        dst[(y * size + by) * w + xo * size + bx] += gv;
                    }
                    PoolKind::Avg => {
                        for ky in 0..size {
                            for kx in 0..size {
                                dst[(y * size + ky) * w + xo * size + kx] += gv * inv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Copies one batch item into a zero-padded [cin, h+2p, w+2p] buffer.
fn pad_item(x: &[f64], padded: &mut [f64], bi: usize, cin: usize, h: usize, w: usize, pad: usize) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    padded.iter_mut().for_each(|e| *e = 0.0);
    for ci in 0..cin {
        for y in 0..h {
            let src = ((bi * cin + ci) * h + y) * w;
            let dst = ci * ph * pw + (y + pad) * pw + pad;
            padded[dst..dst + w].copy_from_slice(&x[src..src + w]);
        }
    }
}

/// Direct stride-1 convolution for narrow layers.
#[allow(clippy::too_many_arguments)]
fn conv_direct(
    x: &[f64],
    w: &[f64],
    bsz: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    pad: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
) -> Tensor {
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let pdim = ho * wo;
    let mut out = Tensor::zeros(&[bsz, cout, ho, wo]);
    let mut padded = vec![0.0f64; cin * ph * pw];
    let od = out.data_mut();
    for bi in 0..bsz {
        pad_item(x, &mut padded, bi, cin, h, wd, pad);
        for co in 0..cout {
            let dst = &mut od[(bi * cout + co) * pdim..(bi * cout + co + 1) * pdim];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                        for y in 0..ho {
                            let prow = ci * ph * pw + (y + ky) * pw + kx;
                            let pr = &padded[prow..prow + wo];
                            let orow = &mut dst[y * wo..(y + 1) * wo];
                            for t in 0..wo {
                                orow[t] += wv * pr[t];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Batched im2col over all items, positions-major:
/// col[bi*pdim + y*wo+xo, (ci*kh+ky)*kw+kx] = x[bi, ci, y*s+ky-p, xo*s+kx-p].
#[allow(clippy::too_many_arguments)]
fn im2col_batch(
    x: &[f64],
    bsz: usize,
    cin: usize,
    h: usize,
    wd: usize,
    pad: usize,
    stride: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let pdim = ho * wo;
    let kdim = cin * kh * kw;
    // rows are produced strictly in order, so no zero-fill is needed
    let mut col = Vec::with_capacity(bsz * pdim * kdim);
    let mut padded = vec![0.0f64; cin * ph * pw];
    for bi in 0..bsz {
        pad_item(x, &mut padded, bi, cin, h, wd, pad);
        for y in 0..ho {
            for xo in 0..wo {
                for ci in 0..cin {
                    for ky in 0..kh {
                        let src = ci * ph * pw + (y * stride + ky) * pw + xo * stride;
                        col.extend_from_slice(&padded[src..src + kw]);
                    }
                }
            }
        }
    }
    debug_assert_eq!(col.len(), bsz * pdim * kdim);
    col
}

/// Adjoint of [`im2col_batch`] for one item: scatter-adds that item's
/// column-gradient rows back onto the padded grid.
#[allow(clippy::too_many_arguments)]
fn col2im_rm(
    dcol: &[f64],
    dpad: &mut [f64],
    bi: usize,
    pdim: usize,
    kdim: usize,
    cin: usize,
    ph: usize,
    pw: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
) {
    for y in 0..ho {
        for xo in 0..wo {
            let row = (bi * pdim + y * wo + xo) * kdim;
            let src = &dcol[row..row + kdim];
            let mut r = 0;
            for ci in 0..cin {
                for ky in 0..kh {
                    let dst = ci * ph * pw + (y * stride + ky) * pw + xo * stride;
                    for kx in 0..kw {
                        dpad[dst + kx] += src[r];
                        r += 1;
                    }
                }
            }
        }
    }
}
