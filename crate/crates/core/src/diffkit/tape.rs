use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Attention { q: Var, k: Var, v: Var, block: usize, probs: Vec<f64> },
    BlockMean { x: Var, block: usize },
    BlockStd { x: Var, block: usize },
    Cosine { a: Var, b: Var, eps: f64 },
    Gather { sources: Vec<Var>, index: Vec<(usize, usize)> },
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Select { x: Var, index: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape: operations append nodes in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// c (m×n) = op(a) (m×k) · op(b) (k×n) + beta·c, strides in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes slices covering every strided access of an
    // m×k / k×n / m×n layout; all offsets stay inside those slices.
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
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reachable and requires gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(DiffError::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(DiffError::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(DiffError::shape(
                "add_row",
                format!("bias {:?} for rows of width {c}", bv.shape()),
            ));
        }
        let b = bv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Per-row normalization to zero mean and unit population variance,
    /// followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 {
            return Err(DiffError::shape("layer_norm", "zero width".to_string()));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.numel() != d || bv.numel() != d {
            return Err(DiffError::shape(
                "layer_norm",
                format!("gain {:?} bias {:?} for width {d}", gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; xv.numel()];
        for (src, dst) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Single-head scaled dot-product attention over all rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, DiffError> {
        let t = self.value(q).rows();
        self.attention_blocks(q, k, v, t)
    }

    /// Scaled dot-product attention applied independently to consecutive
    /// groups of `block` rows (one group per sequence).
    pub fn attention_blocks(&mut self, q: Var, k: Var, v: Var, block: usize) -> Result<Var, DiffError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(DiffError::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if block == 0 || rows % block != 0 {
            return Err(DiffError::shape(
                "attention",
                format!("{rows} rows do not split into blocks of {block}"),
            ));
        }
        let t = block;
        let inv = 1.0 / (d as f64).sqrt();
        let nblocks = rows / t;
        let mut probs = vec![0.0; nblocks * t * t];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; t * t];
        for blk in 0..nblocks {
            let off = blk * t * d;
            let qb = &qv.data()[off..off + t * d];
            let kb = &kv.data()[off..off + t * d];
            let vb = &vv.data()[off..off + t * d];
            // scores = q kᵀ
            gemm(t, d, t, qb, d, 1, kb, 1, d, &mut scores, 0.0);
            let pb = &mut probs[blk * t * t..(blk + 1) * t * t];
            for (src, dst) in scores.chunks(t).zip(pb.chunks_mut(t)) {
                let scaled: Vec<f64> = src.iter().map(|s| s * inv).collect();
                softmax_row(&scaled, dst);
            }
            gemm(t, t, d, pb, t, 1, vb, d, 1, &mut out[off..off + t * d], 0.0);
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, block, probs }, rg))
    }

    /// Column means of each consecutive group of `block` rows: `[n·block × d] -> [n × d]`.
    pub fn block_mean(&mut self, x: Var, block: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if block == 0 || rows % block != 0 {
            return Err(DiffError::shape("block_mean", format!("{rows} rows, block {block}")));
        }
        let n = rows / block;
        let mut out = vec![0.0; n * d];
        for r in 0..rows {
            let dst = &mut out[(r / block) * d..(r / block + 1) * d];
            for (o, v) in dst.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= block as f64;
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::BlockMean { x, block }, rg))
    }

    /// Column standard deviations (population variance, `eps` inside the
    /// square root) of each consecutive group of `block` rows.
    pub fn block_std(&mut self, x: Var, block: usize, eps: f64) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if block == 0 || rows % block != 0 {
            return Err(DiffError::shape("block_std", format!("{rows} rows, block {block}")));
        }
        let n = rows / block;
        let mut out = vec![0.0; n * d];
        for b in 0..n {
            for j in 0..d {
                let col = (0..block).map(|t| xv.data()[(b * block + t) * d + j]);
                let mean = col.clone().sum::<f64>() / block as f64;
                let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
                out[b * d + j] = (var + eps).sqrt();
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::BlockStd { x, block }, rg))
    }

    /// Per-channel mean and standard deviation over the token (row) axis.
    pub fn mean_std(&mut self, x: Var, eps: f64) -> Result<(Var, Var), DiffError> {
        let t = self.value(x).rows();
        let mu = self.block_mean(x, t)?;
        let sigma = self.block_std(x, t, eps)?;
        Ok((mu, sigma))
    }

    /// Row-wise `a·b / (max(‖a‖, eps)·max(‖b‖, eps))`, one value per row.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(DiffError::shape(
                "cosine",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out: Vec<f64> = (0..av.rows())
            .map(|r| {
                let (x, y) = (av.row(r), bv.row(r));
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let na = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nb = y.iter().map(|q| q * q).sum::<f64>().sqrt();
                dot / (na.max(eps) * nb.max(eps))
            })
            .collect();
        let value = Tensor::vector(out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Cosine { a, b, eps }, rg))
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var, eps: f64) -> Result<Var, DiffError> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if na != nb {
            return Err(DiffError::shape("cosine_sim", format!("{na} vs {nb}")));
        }
        let a = self.reshape(a, vec![1, na])?;
        let b = self.reshape(b, vec![1, nb])?;
        self.cosine_rows(a, b, eps)
    }

    /// Stacks rows picked from `sources`: output row `r` is row
    /// `index[r].1` of `sources[index[r].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var, DiffError> {
        let Some(&first) = sources.first() else {
            return Err(DiffError::Empty("gather_rows"));
        };
        if index.is_empty() {
            return Err(DiffError::Empty("gather_rows"));
        }
        let d = self.value(first).cols();
        for &s in sources {
            if self.value(s).cols() != d {
                return Err(DiffError::shape("gather_rows", "sources differ in width".to_string()));
            }
        }
        let mut out = Vec::with_capacity(index.len() * d);
        for &(s, r) in index {
            let src = sources
                .get(s)
                .map(|&v| self.value(v))
                .ok_or_else(|| DiffError::shape("gather_rows", format!("no source {s}")))?;
            if r >= src.rows() {
                return Err(DiffError::shape("gather_rows", format!("row {r} out of range")));
            }
            out.extend_from_slice(src.row(r));
        }
        let value = Tensor::new(vec![index.len(), d], out)?;
        let rg = self.rg(sources);
        Ok(self.push(value, Op::Gather { sources: sources.to_vec(), index: index.to_vec() }, rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if start >= end || end > xv.rows() {
            return Err(DiffError::shape(
                "slice_rows",
                format!("{start}..{end} of {} rows", xv.rows()),
            ));
        }
        let d = xv.cols();
        let value = Tensor::new(vec![end - start, d], xv.data()[start * d..end * d].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.numel() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum over the last axis, one value per row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.data().chunks(xv.cols()).map(|r| r.iter().sum()).collect();
        let value = Tensor::vector(out);
        let rg = self.rg(&[x]);
        self.push(value, Op::SumRows(x), rg)
    }

    /// Picks elements by flat index.
    pub fn select(&mut self, x: Var, index: &[usize]) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if index.is_empty() {
            return Err(DiffError::Empty("select"));
        }
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            out.push(*xv.data().get(i).ok_or_else(|| {
                DiffError::shape("select", format!("index {i} of {}", xv.numel()))
            })?);
        }
        let value = Tensor::vector(out);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Select { x, index: index.to_vec() }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Reverse pass from a scalar `loss`. Previous gradients are discarded;
    /// afterwards every reachable node that requires gradients has one.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
            f(slot);
        };
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dC · Bᵀ
                acc(*a, &mut |ga| gemm(m, n, k, g, n, 1, bv.data(), 1, n, ga, 1.0));
                // dB = Aᵀ · dC
                acc(*b, &mut |gb| gemm(k, m, n, av.data(), 1, k, g, n, 1, gb, 1.0));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let c = val(*bias).numel();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
                acc(*bias, &mut |gb| {
                    for (j, q) in g.iter().enumerate() {
                        gb[j % c] += q;
                    }
                });
            }
            Op::Scale(x, f) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q * f));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                acc(*gain, &mut |gg| {
                    for (j, q) in g.iter().enumerate() {
                        gg[j % d] += q * xhat[j];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (j, q) in g.iter().enumerate() {
                        gb[j % d] += q;
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, &s) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += s * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for r in 0..y.len() / c {
                        let gr = &g[r * c..(r + 1) * c];
                        let total: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += gr[j] - y[r * c + j].exp() * total;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, block, probs } => {
                let t = *block;
                let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let d = val(*q).cols();
                let nblocks = qv.len() / (t * d);
                let inv = 1.0 / (d as f64).sqrt();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; qv.len()];
                let mut dv = vec![0.0; qv.len()];
                let mut dp = vec![0.0; t * t];
                for blk in 0..nblocks {
                    let off = blk * t * d;
                    let pb = &probs[blk * t * t..(blk + 1) * t * t];
                    let gb = &g[off..off + t * d];
                    // dV = Pᵀ dO
                    gemm(t, t, d, pb, 1, t, gb, d, 1, &mut dv[off..off + t * d], 0.0);
                    // dP = dO Vᵀ
                    gemm(t, d, t, gb, d, 1, &vv[off..off + t * d], 1, d, &mut dp, 0.0);
                    // dS = P ⊙ (dP - rowsum(dP ⊙ P)), folded with the 1/√d scale
                    for r in 0..t {
                        let row = r * t..(r + 1) * t;
                        let dot: f64 = pb[row.clone()].iter().zip(&dp[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            dp[j] = pb[j] * (dp[j] - dot) * inv;
                        }
                    }
                    gemm(t, t, d, &dp, t, 1, &kv[off..off + t * d], d, 1, &mut dq[off..off + t * d], 0.0);
                    gemm(t, t, d, &dp, 1, t, &qv[off..off + t * d], d, 1, &mut dk[off..off + t * d], 0.0);
                }
                acc(*q, &mut |gq| gq.iter_mut().zip(&dq).for_each(|(a, b)| *a += b));
                acc(*k, &mut |gk| gk.iter_mut().zip(&dk).for_each(|(a, b)| *a += b));
                acc(*v, &mut |gv| gv.iter_mut().zip(&dv).for_each(|(a, b)| *a += b));
            }
            Op::BlockMean { x, block } => {
                let d = node.value.cols();
                let scale = 1.0 / *block as f64;
                acc(*x, &mut |gx| {
                    for r in 0..gx.len() / d {
                        let src = &g[(r / block) * d..(r / block + 1) * d];
                        for j in 0..d {
                            gx[r * d + j] += src[j] * scale;
                        }
                    }
                });
            }
            Op::BlockStd { x, block } => {
                let d = node.value.cols();
                let sigma = node.value.data();
                let xv = val(*x).data();
                let n = *block as f64;
                acc(*x, &mut |gx| {
                    for b in 0..sigma.len() / d {
                        for j in 0..d {
                            let idx = |t: usize| (b * block + t) * d + j;
                            let mean = (0..*block).map(|t| xv[idx(t)]).sum::<f64>() / n;
                            let coef = g[b * d + j] / (n * sigma[b * d + j]);
                            for t in 0..*block {
                                gx[idx(t)] += coef * (xv[idx(t)] - mean);
                            }
                        }
                    }
                });
            }
            Op::Cosine { a, b, eps } => {
                let (av, bv) = (val(*a), val(*b));
                let d = av.cols();
                let mut ga_local = vec![0.0; av.numel()];
                let mut gb_local = vec![0.0; bv.numel()];
                for (r, &gr) in g.iter().enumerate() {
                    let (x, y) = (av.row(r), bv.row(r));
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    let na = x.iter().map(|p| p * p).sum::<f64>().sqrt();
                    let nb = y.iter().map(|q| q * q).sum::<f64>().sqrt();
                    let (ca, cb) = (na.max(*eps), nb.max(*eps));
                    let den = ca * cb;
                    // A clamped norm is constant, so it contributes no gradient.
                    let ka = if na > *eps { dot / (na * na * na * cb) } else { 0.0 };
                    let kb = if nb > *eps { dot / (nb * nb * nb * ca) } else { 0.0 };
                    for j in 0..d {
                        ga_local[r * d + j] += gr * (y[j] / den - ka * x[j]);
                        gb_local[r * d + j] += gr * (x[j] / den - kb * y[j]);
                    }
                }
                acc(*a, &mut |ga| ga.iter_mut().zip(&ga_local).for_each(|(p, q)| *p += q));
                acc(*b, &mut |gb| gb.iter_mut().zip(&gb_local).for_each(|(p, q)| *p += q));
            }
            Op::Gather { sources, index } => {
                let d = node.value.cols();
                for (s, &src) in sources.iter().enumerate() {
                    acc(src, &mut |gs| {
                        for (r, &(si, row)) in index.iter().enumerate() {
                            if si == s {
                                let dst = &mut gs[row * d..(row + 1) * d];
                                dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(p, q)| *p += q);
                            }
                        }
                    });
                }
            }
            Op::SliceRows { x, start } => {
                let off = start * node.value.cols();
                acc(*x, &mut |gx| {
                    gx[off..off + g.len()].iter_mut().zip(g).for_each(|(p, q)| *p += q);
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, q)| *p += q));
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|p| *p += g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::SumRows(x) => {
                let c = val(*x).cols();
                acc(*x, &mut |gx| {
                    for (j, p) in gx.iter_mut().enumerate() {
                        *p += g[j / c];
                    }
                });
            }
            Op::Select { x, index } => {
                acc(*x, &mut |gx| {
                    for (r, &i) in index.iter().enumerate() {
                        gx[i] += g[r];
                    }
                });
            }
        }
    }
}
