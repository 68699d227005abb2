//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape rebuilt for every forward pass. Each operation appends
//! a node whose parents already exist on the tape, so reverse iteration is a
//! valid topological order for backpropagation. Layout convention for images
//! is NHWC (channels last); a 3-D `h x w x c` input is treated as a batch of
//! one wherever an op accepts images.

use crate::error::{contract_err, dim_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    co: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Clone, Copy, Debug)]
struct MatGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    Conv2d { x: Var, k: Var, g: ConvGeom, cols: Vec<f64> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    GlobalAvgPool { x: Var, spatial: usize },
    MatMul { a: Var, b: Var, g: MatGeom },
    SoftmaxRows(Var),
    CrossEntropyRows { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SumAll(Var),
    SumLastAxis(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    ConcatCols(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Per-channel statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

/// Gradients of a scalar with respect to every node of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(graph.nodes[v.0].value.shape().to_vec(), g.clone()))
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// `c = a * b + beta * c` for `m x k` times `k x n`, all with explicit
/// row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, col: usize| (r - 1) * rs + (col - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len());
        assert!(last(rsb, csb, k, n) < b.len());
    }
    assert!(last(rsc, csc, m, n) < c.len());
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn as_nhwc(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Some((1, h, w, c)),
        [n, h, w, c] => Some((n, h, w, c)),
        _ => None,
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kkc = g.k * g.k * g.c;
    let mut cols = vec![0.0; g.n * g.oh * g.ow * kkc];
    for b in 0..g.n {
        let xb = &x[b * g.h * g.w * g.c..(b + 1) * g.h * g.w * g.c];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * kkc;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.c;
                        let dst = row + (ky * g.k + kx) * g.c;
                        cols[dst..dst + g.c].copy_from_slice(&xb[src..src + g.c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let kkc = g.k * g.k * g.c;
    for b in 0..g.n {
        let base = b * g.h * g.w * g.c;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * kkc;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.w + ix as usize) * g.c;
                        let src = row + (ky * g.k + kx) * g.c;
                        for ci in 0..g.c {
                            dx[dst + ci] += dcols[src + ci];
                        }
                    }
                }
            }
        }
    }
}

fn channel_count(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph whose parameter leaves are untracked; nothing is retained for
    /// a backward pass.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked input whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf holding a snapshot of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.nodes[v.0].param = Some((store.store_id(), id));
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("add: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("mul: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = channel_count(tx.shape());
        if tb.shape() != [c] {
            return dim_err(format!("bias {:?} for input {:?}", tb.shape(), tx.shape()));
        }
        let b = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, v)| v + b[i % c]).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Square-kernel 2-D convolution (cross-correlation), NHWC input and a
    /// `k x k x c x c'` kernel. Output extents are
    /// `floor((dim + 2 * padding - k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        let Some((n, h, w, c)) = as_nhwc(xs) else {
            return dim_err(format!("conv2d input must be h x w x c or n x h x w x c, got {xs:?}"));
        };
        let ks = self.value(kernel).shape();
        let &[k, k2, kc, co] = ks else {
            return dim_err(format!("conv2d kernel must be k x k x c x c', got {ks:?}"));
        };
        if k != k2 || k % 2 == 0 {
            return dim_err(format!("conv2d kernel must be square with odd size, got {ks:?}"));
        }
        if kc != c {
            return dim_err(format!("conv2d: input has {c} channels, kernel expects {kc}"));
        }
        if stride == 0 {
            return dim_err("conv2d stride must be positive");
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return dim_err(format!("conv2d: {h}x{w} input too small for {k}x{k} kernel"));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let g = ConvGeom { n, h, w, c, k, co, stride, pad: padding, oh, ow };
        let cols = im2col(self.value(x).data(), &g);
        let rows = n * oh * ow;
        let kkc = k * k * c;
        let mut out = vec![0.0; rows * co];
        gemm(
            rows,
            kkc,
            co,
            &cols,
            (kkc, 1),
            self.value(kernel).data(),
            (co, 1),
            0.0,
            &mut out,
            (co, 1),
        );
        let shape = if xs.len() == 3 { vec![oh, ow, co] } else { vec![n, oh, ow, co] };
        let rg = self.rg(x) || self.rg(kernel);
        let cols = if self.rg(kernel) { cols } else { Vec::new() };
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, k: kernel, g, cols }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return dim_err(format!("batch norm needs a batch axis, got {xs:?}"));
        }
        let c = channel_count(xs);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return dim_err(format!("batch norm affine parameters must have {c} entries"));
        }
        Ok((c, self.value(x).len() / c))
    }

    /// Batch normalization over all axes but the last, using the statistics of
    /// this batch. Returns the output and the batch statistics for updating
    /// running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (c, m) = self.bn_check(x, gamma, beta)?;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        for (i, v) in xd.iter().enumerate() {
            mean[i % c] += v;
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for (i, v) in xd.iter().enumerate() {
            let d = v - mean[i % c];
            var[i % c] += d * d;
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let unbiased: Vec<f64> =
            var.iter().map(|v| if m > 1 { v / (m - 1) as f64 } else { 0.0 }).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> =
            xd.iter().enumerate().map(|(i, v)| (v - mean[i % c]) * inv_std[i % c]).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> =
            xhat.iter().enumerate().map(|(i, v)| gd[i % c] * v + bd[i % c]).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            rg,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (c, _) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return dim_err("running statistics length mismatch");
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| gd[i % c] * (v - mean[i % c]) * inv_std[i % c] + bd[i % c])
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNormEval { x, gamma, beta, mean: mean.to_vec(), inv_std },
            rg,
        ))
    }

    /// Mean over the spatial axes: `h x w x c -> c`, `n x h x w x c -> n x c`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let Some((n, h, w, c)) = as_nhwc(xs) else {
            return dim_err(format!("global_avg_pool needs an image tensor, got {xs:?}"));
        };
        let spatial = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            for p in 0..spatial {
                let base = (b * spatial + p) * c;
                for ch in 0..c {
                    out[b * c + ch] += xd[base + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= spatial as f64);
        let shape = if xs.len() == 3 { vec![c] } else { vec![n, c] };
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::GlobalAvgPool { x, spatial }, rg))
    }

    /// `op(a) * op(b)` where `op` optionally transposes the trailing two axes.
    /// Both operands are matrices, or both are equal-length batches of
    /// matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (batch, ra, ca, rb, cb) = match (sa, sb) {
            (&[ra, ca], &[rb, cb]) => (1, ra, ca, rb, cb),
            (&[ba, ra, ca], &[bb, rb, cb]) if ba == bb => (ba, ra, ca, rb, cb),
            _ => return dim_err(format!("matmul operands {sa:?} and {sb:?}")),
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return dim_err(format!("matmul inner dimensions {k} vs {k2} ({sa:?} x {sb:?})"));
        }
        let g = MatGeom { batch, m, k, n, ta, tb };
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let sa_ = if ta { (1, m) } else { (k, 1) };
        let sb_ = if tb { (1, k) } else { (n, 1) };
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[bi * m * k..(bi + 1) * m * k],
                sa_,
                &bd[bi * k * n..(bi + 1) * k * n],
                sb_,
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
                (n, 1),
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, g }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = channel_count(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Per-row cross-entropy `-log softmax(logits_i)[target_i]` of an
    /// `n x c` logit matrix (or a single `c` vector). Output has shape `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = channel_count(t.shape());
        let rows = t.len() / c;
        if t.ndim() > 2 || targets.len() != rows {
            return dim_err(format!(
                "cross_entropy: logits {:?} with {} targets",
                t.shape(),
                targets.len()
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("class {bad} out of range for {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut out = Vec::with_capacity(rows);
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.push((lse - row[y]).max(0.0));
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::vector(out),
            Op::CrossEntropyRows { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums the last axis away.
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = channel_count(t.shape());
        let out: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let shape = t.shape()[..t.ndim() - 1].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::SumLastAxis(x), rg)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = channel_count(t.shape());
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(Error::DegenerateEmbedding);
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Row-wise dot product of two `n x d` matrices, giving `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.ndim() != 2 {
            return dim_err(format!("row_dot: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let d = ta.shape()[1];
        let out: Vec<f64> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let rows = out.len();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![rows, 1], out), Op::RowDot(a, b), rg))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[ra, ca], &[rb, cb]) = (ta.shape(), tb.shape()) else {
            return dim_err("concat_cols needs matrices");
        };
        if ra != rb {
            return dim_err(format!("concat_cols rows {ra} vs {rb}"));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![ra, ca + cb], out), Op::ConcatCols(a, b), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return contract_err(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter gradients to the matching entries of `store`.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        let sid = store.store_id();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some((s, pid)), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                if s == sid {
                    let dst = store.get_mut(pid).grad.data_mut();
                    for (d, v) in dst.iter_mut().zip(g) {
                        *d += v;
                    }
                }
            }
        }
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
                acc(*b, &mut |g| {
                    let c = g.len();
                    for (i, s) in gy.iter().enumerate() {
                        g[i % c] += s;
                    }
                });
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(d, v)| *d += s * v));
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += s));
            }
            Op::Conv2d { x, k, g: geom, cols } => {
                let kkc = geom.k * geom.k * geom.c;
                let rows = geom.n * geom.oh * geom.ow;
                let kv = nodes[k.0].value.data();
                acc(*k, &mut |g| {
                    // dK = cols^T * dY
                    gemm(kkc, rows, geom.co, cols, (1, kkc), gy, (geom.co, 1), 1.0, g, (geom.co, 1));
                });
                acc(*x, &mut |g| {
                    let mut dcols = vec![0.0; rows * kkc];
                    // dcols = dY * K^T
                    gemm(rows, geom.co, kkc, gy, (geom.co, 1), kv, (1, geom.co), 0.0, &mut dcols, (kkc, 1));
                    col2im_add(&dcols, geom, g);
                });
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let c = inv_std.len();
                let m = (xhat.len() / c) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..gy.len() {
                    sum_dy[i % c] += gy[i];
                    sum_dy_xhat[i % c] += gy[i] * xhat[i];
                }
                let gv = nodes[gamma.0].value.data();
                acc(*gamma, &mut |g| g.iter_mut().zip(&sum_dy_xhat).for_each(|(d, s)| *d += s));
                acc(*beta, &mut |g| g.iter_mut().zip(&sum_dy).for_each(|(d, s)| *d += s));
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        let ch = i % c;
                        g[i] += gv[ch] * inv_std[ch] / m
                            * (m * gy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                    }
                });
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let c = inv_std.len();
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                acc(*gamma, &mut |g| {
                    for i in 0..gy.len() {
                        g[i % c] += gy[i] * (xv[i] - mean[i % c]) * inv_std[i % c];
                    }
                });
                acc(*beta, &mut |g| {
                    for i in 0..gy.len() {
                        g[i % c] += gy[i];
                    }
                });
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * gv[i % c] * inv_std[i % c];
                    }
                });
            }
            Op::GlobalAvgPool { x, spatial } => {
                let c = *nodes[x.0].value.shape().last().unwrap();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        let b = i / (spatial * c);
                        g[i] += gy[b * c + i % c] / *spatial as f64;
                    }
                });
            }
            Op::MatMul { a, b, g: mg } => {
                let MatGeom { batch, m, k, n, ta, tb } = *mg;
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                // strides of op(A) (m x k) and op(B) (k x n) inside one batch slice
                let sa = if ta { (1, m) } else { (k, 1) };
                let sb = if tb { (1, k) } else { (n, 1) };
                acc(*a, &mut |g| {
                    // d op(A) = dC * op(B)^T, written through A's storage layout
                    let out_s = if ta { (1, m) } else { (k, 1) };
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gy[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &bv[bi * k * n..(bi + 1) * k * n],
                            (sb.1, sb.0),
                            1.0,
                            &mut g[bi * m * k..(bi + 1) * m * k],
                            out_s,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    // d op(B) = op(A)^T * dC
                    let out_s = if tb { (1, k) } else { (n, 1) };
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av[bi * m * k..(bi + 1) * m * k],
                            (sa.1, sa.0),
                            &gy[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            1.0,
                            &mut g[bi * k * n..(bi + 1) * k * n],
                            out_s,
                        );
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = channel_count(node.value.shape());
                acc(*x, &mut |g| {
                    for r in 0..y.len() / c {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &gy[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            g[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                let c = probs.len() / targets.len();
                acc(*logits, &mut |g| {
                    for (r, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            g[r * c + j] += gy[r] * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|d| *d += gy[0]));
            }
            Op::SumLastAxis(x) => {
                let c = channel_count(nodes[x.0].value.shape());
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i / c];
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let c = y.len() / norms.len();
                acc(*x, &mut |g| {
                    for (r, nrm) in norms.iter().enumerate() {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &gy[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            g[r * c + j] += (gs[j] - ys[j] * dot) / nrm;
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let d = av.len() / gy.len();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i / d] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i / d] * av[i];
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.shape()[1];
                let cb = nodes[b.0].value.shape()[1];
                let w = ca + cb;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[(i / ca) * w + i % ca];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[(i / cb) * w + ca + i % cb];
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Untracked convolution of an `h x w x c` (or batched) tensor.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let (x, k) = (g.constant(input.clone()), g.constant(kernel.clone()));
    let y = g.conv2d(x, k, stride, padding)?;
    Ok(g.value(y).clone())
}

/// `-log softmax(logits)[true_class]` of a single logit vector.
pub fn cross_entropy(logits: &Tensor, true_class: usize) -> Result<f64> {
    let mut g = Graph::no_grad();
    let x = g.constant(logits.clone());
    let y = g.cross_entropy(x, &[true_class])?;
    Ok(g.value(y).item())
}

/// Untracked spatial mean of an image tensor.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let x = g.constant(input.clone());
    let y = g.global_avg_pool(x)?;
    Ok(g.value(y).clone())
}
